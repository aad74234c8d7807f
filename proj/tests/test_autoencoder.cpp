#include "srom/autoencoder.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

namespace {

using namespace srom;
using namespace srom::testing;

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected srom::Error";
    return ErrorKind::internal;
}

// x = M s with s a smooth 3-dim trajectory.
Matrix subspace_data(std::size_t n_m, std::size_t n_t, std::uint64_t seed) {
    Rng rng(seed);
    const Matrix mix = random_real(static_cast<Eigen::Index>(n_m), 3, rng);
    Matrix s(3, static_cast<Eigen::Index>(n_t));
    for (Eigen::Index t = 0; t < s.cols(); ++t) {
        const double u = 0.05 * static_cast<double>(t);
        s(0, t) = std::sin(u);
        s(1, t) = std::cos(1.7 * u);
        s(2, t) = std::sin(0.6 * u + 1.0);
    }
    return mix * s;
}

AeConfig small(std::size_t n_z, std::size_t epochs) {
    AeConfig c;
    c.encoder_hidden = {16};
    c.decoder_hidden = {16};
    c.latent_size = n_z;
    c.train.epochs = epochs;
    c.train.batch_size = 16;
    c.train.learning_rate = 3e-3;
    c.train.patience = epochs;
    return c;
}

double nmse_of(const Matrix& ref, const Matrix& approx) { return (approx - ref).squaredNorm() / ref.squaredNorm(); }

TEST(AeConfig, Validation) {
    AeConfig c = small(3, 1);
    EXPECT_NO_THROW(c.validate(3));
    EXPECT_EQ(kind_of([&] { c.validate(2); }), ErrorKind::invalid_argument);
    c.decoder_hidden = {8};
    EXPECT_EQ(kind_of([&] { c.validate(10); }), ErrorKind::invalid_argument);
    c = small(0, 1);
    EXPECT_EQ(kind_of([&] { c.validate(10); }), ErrorKind::invalid_argument);

    AeConfig p;
    p.encoder_hidden = {1024, 512, 256, 128, 64, 32};
    p.decoder_hidden = {32, 64, 128, 256, 512, 1024};
    p.latent_size = 30;
    EXPECT_NO_THROW(p.validate(2003));

    const AeConfig back = nlohmann::json(p).get<AeConfig>();
    EXPECT_EQ(back.encoder_hidden, p.encoder_hidden);
    EXPECT_EQ(back.decoder_hidden, p.decoder_hidden);
    EXPECT_EQ(back.latent_size, 30u);
    const auto mirrored = nlohmann::json::parse(R"({"encoder_hidden":[8,4],"latent_size":2})").get<AeConfig>();
    EXPECT_EQ(mirrored.decoder_hidden, (std::vector<std::size_t>{4, 8}));
}

TEST(AeStandardize, RoundTripExact) {
    Rng rng(5);
    Matrix x = random_real(7, 50, rng) * 1e3;
    x.row(2).setConstant(4.5);  // zero spread
    const auto s = nn::Standardizer::fit(x);
    EXPECT_EQ(s.scale(2), 0.0);
    const Matrix z = s.apply(x);
    EXPECT_LE(z.rowwise().mean().cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((s.invert(z) - x).cwiseAbs().maxCoeff() / x.cwiseAbs().maxCoeff(), 1e-12);
    const auto j = nlohmann::json(s).get<nn::Standardizer>();
    EXPECT_EQ(j.mean, s.mean);
    EXPECT_EQ(j.scale, s.scale);
}

TEST(Ae, ChronologicalSplit) {
    EXPECT_EQ(chronological_train_count(100, 0.2), 80u);
    EXPECT_EQ(chronological_train_count(3, 0.2), 2u);
    EXPECT_EQ(kind_of([] { chronological_train_count(1, 0.2); }), ErrorKind::insufficient_data);
}

TEST(Ae, ZeroBiasesGiveZeroLatentAndMeanOutput) {
    Autoencoder ae(6, small(2, 1), 3);
    for (auto& p : ae.params())
        if (p.name.back() == 'b') p.value.setZero();
    EXPECT_EQ(ae.encode(Matrix::Zero(6, 1)), Matrix::Zero(2, 1));
    ae.stats().mean = Vector::LinSpaced(6, 1.0, 6.0);
    ae.stats().scale = Vector::Constant(6, 2.0);
    EXPECT_EQ(ae.decode(Matrix::Zero(2, 1)), ae.stats().mean);
    ae.stats().mean.setZero();
    EXPECT_EQ(ae.encode(Matrix::Zero(6, 1)), Matrix::Zero(2, 1));
    EXPECT_EQ(kind_of([&] { ae.encode(Matrix::Zero(5, 1)); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([&] { ae.decode(Matrix::Zero(3, 1)); }), ErrorKind::invalid_argument);
}

TEST(Ae, LinearSubspaceIsRecovered) {
    const Matrix x = subspace_data(10, 400, 11);
    Autoencoder ae(10, small(3, 400), 21);
    const auto& rep = ae.train(x);
    ASSERT_FALSE(rep.val_loss.empty());
    const Matrix val = x.rightCols(80);
    const Matrix back = ae.decode(ae.encode(val));
    EXPECT_LE(nmse_of(val, back), 0.05);
    // validation loss is in standardized units: 10 unit-variance features
    EXPECT_LE(rep.best_val / 10.0, 0.05);

    const Matrix train = x.leftCols(320);
    const Matrix z = ae.encode(train);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        EXPECT_GE(z.row(i).minCoeff(), ae.latent_lo()(i));
        EXPECT_LE(z.row(i).maxCoeff(), ae.latent_hi()(i));
    }
    EXPECT_TRUE(z.allFinite());
    EXPECT_EQ(ae.encode(train.col(5)), ae.encode(train.col(5)));
    EXPECT_EQ(ae.decode(z.col(0)), ae.decode(z.col(0)));
}

TEST(Ae, NoBottleneckFitsAlmostExactly) {
    Rng rng(8);
    const Matrix x = subspace_data(4, 300, 9) + 0.0 * random_real(4, 300, rng);
    AeConfig c = small(4, 600);
    c.encoder_hidden = {24};
    c.decoder_hidden = {24};
    Autoencoder ae(4, c, 4);
    const auto& rep = ae.train(x);
    // per-sample loss relative to the total standardized variance (4)
    EXPECT_LE(rep.train_loss[rep.best_epoch] / 4.0, 1e-3);
}

TEST(Ae, TrainingIsDeterministic) {
    const Matrix x = subspace_data(6, 120, 2);
    Autoencoder a(6, small(2, 20), 99), b(6, small(2, 20), 99);
    a.train(x);
    b.train(x);
    EXPECT_EQ(a.report().val_loss, b.report().val_loss);
    EXPECT_EQ(a.encode(x), b.encode(x));
}

TEST(Ae, DivergenceAndBadInput) {
    const Matrix x = subspace_data(6, 120, 2);
    AeConfig c = small(2, 50);
    c.train.learning_rate = 1e300;
    Autoencoder ae(6, c, 1);
    EXPECT_EQ(kind_of([&] { ae.train(x); }), ErrorKind::training_diverged);

    Matrix bad = x;
    bad(0, 0) = std::nan("");
    Autoencoder ok(6, small(2, 2), 1);
    EXPECT_EQ(kind_of([&] { ok.train(bad); }), ErrorKind::invalid_data);
    EXPECT_EQ(kind_of([&] { ok.train(x.topRows(5)); }), ErrorKind::invalid_argument);
}

TEST(ComplexAe, IndependentNetworksAndPersistence) {
    const Matrix re = subspace_data(8, 150, 1), im = subspace_data(8, 150, 2);
    CMatrix a(8, 150);
    a.real() = re;
    a.imag() = im;
    ComplexAutoencoder ae(8, small(3, 30), 17);
    EXPECT_NE(ae.re().params()[0].value, ae.im().params()[0].value);
    ae.train(a, 2);

    ComplexAutoencoder serial(8, small(3, 30), 17);
    serial.train(a, 1);
    EXPECT_EQ(serial.encode(a), ae.encode(a));

    CoefficientSeries cs;
    cs.values = a;
    cs.source_basis = 0xabcdef;
    const auto z = ae.encode(cs);
    EXPECT_EQ(z.n_z(), 3u);
    EXPECT_EQ(z.n_t(), 150u);
    EXPECT_EQ(z.source_basis, 0xabcdefu);
    EXPECT_TRUE(z.values.allFinite());
    EXPECT_EQ(z.values.real(), ae.re().encode(re));
    EXPECT_EQ(z.values.imag(), ae.im().encode(im));

    const auto dir = temp_dir("ae");
    const auto path = dir + "/ae.snnp";
    ae.save(path);
    const auto back = ComplexAutoencoder::load(path);
    EXPECT_EQ(back.seed(), 17u);
    EXPECT_EQ(back.encode(a), ae.encode(a));
    EXPECT_EQ(back.decode(z.values), ae.decode(z.values));
    EXPECT_EQ(back.re().latent_hi(), ae.re().latent_hi());

    {
        std::ofstream f(path + ".json");
        f << "{\"kind\": \"complex-autoencoder\"}";
    }
    EXPECT_EQ(kind_of([&] { ComplexAutoencoder::load(path); }), ErrorKind::format);
}

TEST(LatentStudy, DedupAndCapacity) {
    // 6-dim nonlinear manifold embedded in 12 features
    Rng rng(31);
    const Matrix mix = random_real(12, 6, rng);
    CMatrix a(12, 300);
    for (Eigen::Index t = 0; t < a.cols(); ++t) {
        Vector s(6);
        for (Eigen::Index i = 0; i < 6; ++i) s(i) = std::sin(0.03 * static_cast<double>(t) * (1.0 + 0.37 * static_cast<double>(i)) + static_cast<double>(i));
        const Vector v = mix * s;
        for (Eigen::Index i = 0; i < 12; ++i) a(i, t) = Complex(v(i) + 0.3 * v(i) * v(i), 0.5 * v(i));
    }
    AeConfig c = small(2, 150);
    c.encoder_hidden = {24};
    c.decoder_hidden = {24};
    int calls = 0;
    const auto rows = latent_size_study(a, {2, 8, 2, 8}, c, 5, [&](const CMatrix& back) {
        ++calls;
        return (back - a).squaredNorm() / a.squaredNorm();
    });
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(calls, 2);
    EXPECT_EQ(rows[0].n_z, 2u);
    EXPECT_EQ(rows[1].n_z, 8u);
    EXPECT_LT(rows[1].val_loss, rows[0].val_loss);
    EXPECT_LT(rows[1].field_nmse, rows[0].field_nmse);

    const auto dir = temp_dir("latent_study");
    write_latent_study_csv(rows, dir + "/study.csv");
    std::ifstream f(dir + "/study.csv");
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "n_z,train_loss,val_loss,field_nmse");
    EXPECT_EQ(kind_of([&] { latent_size_study(a, {}, c, 5); }), ErrorKind::invalid_argument);
}

TEST(LatentStudy, LargeLatentSizesAccepted) {
    Rng rng(3);
    const CMatrix a = random_complex(40, 30, rng);
    AeConfig c = small(5, 1);
    const auto rows = latent_size_study(a, {5, 15, 30}, c, 1);
    ASSERT_EQ(rows.size(), 3u);
    for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.field_nmse));
}

TEST(ComplexAe, WideDeepConfigRuns) {
    Rng rng(4);
    const CMatrix a = random_complex(300, 20, rng);
    AeConfig p;
    p.encoder_hidden = {1024, 512, 256, 128, 64, 32};
    p.decoder_hidden = {32, 64, 128, 256, 512, 1024};
    p.latent_size = 30;
    p.train.batch_size = 2048;
    p.train.epochs = 1;
    ComplexAutoencoder ae(300, p, 2);
    ae.train(a);
    EXPECT_TRUE(ae.encode(a).allFinite());
}

}  // namespace
