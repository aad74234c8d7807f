#include "srom/nn.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

namespace {

using namespace srom;
using namespace srom::nn;
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

TEST(Dense, IdentityAndConstant) {
    Rng rng(1);
    ParamStore s;
    const auto l = add_dense(s, "d", 3, 3, Activation::linear, rng);
    s[l.w].value = Matrix::Identity(3, 3);
    s[l.b].value.setZero();
    const Matrix x = random_real(3, 4, rng);
    EXPECT_EQ(dense_forward(s, l, x), x);

    ParamStore t;
    auto lt = add_dense(t, "d", 2, 3, Activation::tanh, rng);
    t[lt.w].value.setZero();
    t[lt.b].value.setConstant(0.7);
    const Matrix y = dense_forward(t, lt, random_real(2, 5, rng));
    EXPECT_LE((y.array() - std::tanh(0.7)).abs().maxCoeff(), 1e-15);
}

TEST(Dense, MatchesHandMultiply) {
    Rng rng(2);
    ParamStore s;
    const auto l = add_dense(s, "d", 2, 3, Activation::relu, rng);
    s[l.b].value = random_real(3, 1, rng);
    const Matrix x = random_real(2, 4, rng);
    const Matrix y = dense_forward(s, l, x);
    for (int c = 0; c < 4; ++c)
        for (int r = 0; r < 3; ++r) {
            double a = s[l.b].value(r, 0);
            for (int k = 0; k < 2; ++k) a += s[l.w].value(r, k) * x(k, c);
            EXPECT_NEAR(y(r, c), std::max(a, 0.0), 1e-12);
        }
    EXPECT_EQ(kind_of([&] { dense_forward(s, l, Matrix::Zero(3, 1)); }), ErrorKind::invalid_argument);
}

TEST(Init, GlorotBoundsAndForgetBias) {
    Rng rng(3);
    ParamStore s;
    const auto l = add_dense(s, "d", 10, 6, Activation::tanh, rng);
    const double a = std::sqrt(6.0 / 16.0);
    EXPECT_LE(s[l.w].value.cwiseAbs().maxCoeff(), a);
    EXPECT_GT(s[l.w].value.cwiseAbs().maxCoeff(), 0.5 * a);
    EXPECT_EQ(s[l.b].value.cwiseAbs().maxCoeff(), 0.0);
    Lstm lstm(s, "lstm", 2, 4, rng);
    const auto& b = s.at("lstm.b").value;
    EXPECT_EQ(b.middleRows(4, 4), Matrix::Ones(4, 1));
    EXPECT_EQ(b.topRows(4), Matrix::Zero(4, 1));
    EXPECT_EQ(b.bottomRows(8), Matrix::Zero(8, 1));
}

TEST(Lstm, ZeroWeightsGiveHalfGates) {
    Rng rng(4);
    ParamStore s;
    Lstm lstm(s, "l", 2, 3, rng);
    for (auto& p : s) p.value.setZero();
    LstmStepCache c;
    const auto st = lstm.step(s, lstm.zero_state(1), Matrix::Ones(2, 1), &c);
    EXPECT_TRUE((c.i.array() == 0.5).all());
    EXPECT_TRUE((c.f.array() == 0.5).all());
    EXPECT_TRUE((c.o.array() == 0.5).all());
    EXPECT_EQ(st.s.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(st.h.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lstm, SaturatedForgetGateKeepsState) {
    Rng rng(5);
    ParamStore s;
    Lstm lstm(s, "l", 1, 2, rng);
    for (auto& p : s) p.value.setZero();
    s.at("l.b").value.middleRows(2, 2).setConstant(30.0);
    LstmState prev{Matrix::Zero(2, 1), Matrix(2, 1)};
    prev.s << 0.8, -1.3;
    const auto st = lstm.step(s, prev, Matrix::Constant(1, 1, 0.4));
    EXPECT_NEAR(st.s(0), 0.8, 1e-6);
    EXPECT_NEAR(st.s(1), -1.3, 1e-6);
}

TEST(Lstm, MatchesScalarHandCalculation) {
    Rng rng(6);
    ParamStore s;
    Lstm lstm(s, "l", 1, 2, rng);
    auto& w = s.at("l.W").value;  // 8 x 3, columns (h0, h1, z)
    auto& b = s.at("l.b").value;
    for (int r = 0; r < 8; ++r) {
        for (int c = 0; c < 3; ++c) w(r, c) = 0.05 * (r + 1) - 0.1 * c;
        b(r, 0) = 0.01 * r;
    }
    const double h_prev[2] = {0.2, -0.1}, s_prev[2] = {0.5, 0.3}, z = 0.7;
    LstmState prev{Matrix(2, 1), Matrix(2, 1)};
    prev.h << h_prev[0], h_prev[1];
    prev.s << s_prev[0], s_prev[1];
    const auto st = lstm.step(s, prev, Matrix::Constant(1, 1, z));
    auto pre = [&](int r) { return w(r, 0) * h_prev[0] + w(r, 1) * h_prev[1] + w(r, 2) * z + b(r, 0); };
    auto sg = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int j = 0; j < 2; ++j) {
        const double i = sg(pre(j)), f = sg(pre(2 + j)), o = sg(pre(4 + j)), g = std::tanh(pre(6 + j));
        const double sn = f * s_prev[j] + i * g;
        EXPECT_NEAR(st.s(j), sn, 1e-12);
        EXPECT_NEAR(st.h(j), o * std::tanh(sn), 1e-12);
    }
    EXPECT_EQ(kind_of([&] { lstm.step(s, prev, Matrix::Zero(2, 1)); }), ErrorKind::invalid_argument);
}

TEST(Conv, DeltaKernelIsIdentity) {
    Rng rng(7);
    ParamStore s;
    const auto l = add_conv(s, "c", 1, 1, 3, Activation::linear, rng);
    s[l.w].value.setZero();
    s[l.w].value(0, 4) = 1.0;
    s[l.b].value.setZero();
    const FeatureShape fs{4, 5, 2};
    const Matrix x = random_real(1, fs.cols(), rng);
    EXPECT_EQ(conv_forward(s, l, x, fs), x);
}

TEST(Conv, ZeroKernelWithBiasUnderRelu) {
    Rng rng(8);
    ParamStore s;
    const auto l = add_conv(s, "c", 2, 3, 5, Activation::relu, rng);
    s[l.w].value.setZero();
    s[l.b].value << 0.4, -0.2, 0.0;
    const FeatureShape fs{3, 3, 1};
    const Matrix y = conv_forward(s, l, random_real(2, fs.cols(), rng), fs);
    EXPECT_TRUE((y.row(0).array() == 0.4).all());
    EXPECT_TRUE((y.row(1).array() == 0.0).all());
    EXPECT_TRUE((y.row(2).array() == 0.0).all());
}

TEST(Conv, OnesKernelGivesPatchSums) {
    Rng rng(9);
    ParamStore s;
    const auto l = add_conv(s, "c", 1, 1, 3, Activation::linear, rng);
    s[l.w].value.setOnes();
    s[l.b].value.setZero();
    const FeatureShape fs{5, 5, 1};
    const Matrix x = random_real(1, 25, rng);
    const Matrix y = conv_forward(s, l, x, fs);
    for (int z = 0; z < 5; ++z)
        for (int xx = 0; xx < 5; ++xx) {
            double sum = 0.0;
            for (int dz = -1; dz <= 1; ++dz)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int zz = z + dz, xc = xx + dx;
                    if (zz >= 0 && zz < 5 && xc >= 0 && xc < 5) sum += x(0, zz * 5 + xc);
                }
            EXPECT_NEAR(y(0, z * 5 + xx), sum, 1e-12);
        }
}

TEST(Conv, CrossCorrelationOrientation) {
    Rng rng(10);
    ParamStore s;
    const auto l = add_conv(s, "c", 1, 1, 3, Activation::linear, rng);
    s[l.w].value.setZero();
    s[l.w].value(0, 5) = 1.0;  // kernel (dz=1, dx=2): picks the right neighbour
    s[l.b].value.setZero();
    const FeatureShape fs{1, 4, 1};
    Matrix x(1, 4);
    x << 1, 2, 3, 4;
    const Matrix y = conv_forward(s, l, x, fs);
    EXPECT_EQ(y, (Matrix(1, 4) << 2, 3, 4, 0).finished());
}

TEST(Conv, EvenKernelRejected) {
    Rng rng(11);
    ParamStore s;
    EXPECT_EQ(kind_of([&] { add_conv(s, "c", 1, 1, 4, Activation::linear, rng); }), ErrorKind::invalid_argument);
}

TEST(Mse, Conventions) {
    Rng rng(12);
    const Matrix a = random_real(3, 2, rng);
    EXPECT_EQ(mse_loss(a, a).loss, 0.0);
    EXPECT_EQ(mse_loss(Matrix::Ones(5, 1), Matrix::Zero(5, 1)).loss, 5.0);
    const Matrix t = random_real(3, 2, rng);
    const auto r = mse_loss(a, t);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 3; ++i) {
            Matrix p = a, m = a;
            p(i, c) += 1e-6;
            m(i, c) -= 1e-6;
            const double num = (mse_loss(p, t).loss - mse_loss(m, t).loss) / 2e-6;
            EXPECT_NEAR(r.grad(i, c), num, 1e-7 * std::max(1.0, std::abs(num)));
        }
    EXPECT_EQ(kind_of([&] { mse_loss(a, Matrix::Zero(2, 2)); }), ErrorKind::invalid_argument);
    const auto masked = masked_mse_loss(a, t, (Vector(3) << 1, 0, 1).finished());
    EXPECT_NEAR(masked.loss, ((a - t).row(0).squaredNorm() + (a - t).row(2).squaredNorm()) / 2.0, 1e-14);
    EXPECT_EQ(masked.grad.row(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
    Rng rng(13);
    ParamStore s;
    s.add("p", {4});
    s[0].value << 1, 2, 3, 4;
    s[0].grad << 0.5, -2.0, 1e-3, -7.0;
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    Adam adam(s);
    adam.step(s, cfg);
    const Vector expect = (Vector(4) << 1 - 0.01, 2 + 0.01, 3 - 0.01, 4 + 0.01).finished();
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(s[0].value(i), expect(i), 1e-6 * std::abs(expect(i)));
}

TEST(Adam, ZeroGradientLeavesParameters) {
    ParamStore s;
    s.add("p", {3});
    s[0].value << 1, -2, 3;
    const Matrix before = s[0].value;
    Adam adam(s);
    for (int k = 0; k < 20; ++k) adam.step(s, TrainConfig{});
    EXPECT_EQ(s[0].value, before);
}

TEST(Adam, ScalarQuadraticTrace) {
    ParamStore s;
    s.add("theta", {1});
    s[0].value(0) = 1.0;
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    Adam adam(s);
    double theta = 1.0, m = 0.0, v = 0.0, prev = 1.0;
    for (int t = 1; t <= 10; ++t) {
        s[0].grad(0) = 2.0 * s[0].value(0);
        adam.step(s, cfg);
        const double g = 2.0 * theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        theta -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        EXPECT_NEAR(s[0].value(0), theta, 1e-14);
        EXPECT_LT(std::abs(theta), prev);
        prev = std::abs(theta);
    }
}

TEST(Adam, NonFiniteGradientDiverges) {
    ParamStore s;
    s.add("p", {2});
    s[0].grad(1) = std::numeric_limits<double>::infinity();
    Adam adam(s);
    EXPECT_EQ(kind_of([&] { adam.step(s, TrainConfig{}); }), ErrorKind::training_diverged);
}

TEST(GradientCheck, DenseTanhStack) {
    Rng rng(14);
    ParamStore s;
    Mlp mlp(s, "m", {5, 7, 4, 3}, {Activation::tanh, Activation::tanh, Activation::linear}, rng);
    for (auto& p : s)
        if (p.name.back() == 'b') p.value = 0.1 * random_real(p.value.rows(), 1, rng);
    const Matrix x = random_real(5, 6, rng);
    const Matrix y = random_real(3, 6, rng);
    const auto rep = finite_difference_check(s, [&] {
        s.zero_grad();
        const auto acts = mlp.forward(s, x);
        const auto l = mse_loss(acts.back(), y);
        mlp.backward(s, acts, l.grad);
        return l.loss;
    });
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
    EXPECT_EQ(rep.checked, s.count());
}

TEST(GradientCheck, LstmThreeStepUnroll) {
    Rng rng(15);
    ParamStore s;
    Lstm lstm(s, "l", 3, 5, rng);
    std::vector<Matrix> seq;
    for (int t = 0; t < 3; ++t) seq.push_back(random_real(3, 4, rng));
    const Matrix y = random_real(3, 4, rng);
    const auto rep = finite_difference_check(s, [&] {
        s.zero_grad();
        Lstm::SequenceCache c;
        const auto l = mse_loss(lstm.forward(s, seq, &c), y);
        lstm.backward(s, c, l.grad);
        return l.loss;
    });
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(GradientCheck, LstmInputGradient) {
    Rng rng(16);
    ParamStore s;
    Lstm lstm(s, "l", 2, 3, rng);
    std::vector<Matrix> seq;
    for (int t = 0; t < 3; ++t) seq.push_back(random_real(2, 2, rng));
    const Matrix y = random_real(2, 2, rng);
    Lstm::SequenceCache c;
    const auto l = mse_loss(lstm.forward(s, seq, &c), y);
    const auto dz = lstm.backward(s, c, l.grad);
    for (int t = 0; t < 3; ++t)
        for (int i = 0; i < 2; ++i) {
            auto p = seq, m = seq;
            p[t](i, 1) += 1e-6;
            m[t](i, 1) -= 1e-6;
            const double num = (mse_loss(lstm.forward(s, p), y).loss - mse_loss(lstm.forward(s, m), y).loss) / 2e-6;
            EXPECT_NEAR(dz[t](i, 1), num, 1e-5 * std::max(1e-4, std::abs(num)));
        }
}

TEST(GradientCheck, ConvReluStack) {
    Rng rng(17);
    ParamStore s;
    ConvNet net(s, "c", {2, 4, 3, 1}, 3, {Activation::relu, Activation::relu, Activation::relu}, rng);
    for (auto& p : s)
        if (p.name.back() == 'b') p.value.setConstant(0.05);
    const FeatureShape fs{5, 6, 2};
    Matrix x = random_real(2, fs.cols(), rng);
    // keep inputs away from exact zeros
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (std::abs(x(i)) < 1e-3) x(i) += 1e-3;
    const Matrix y = random_real(1, fs.cols(), rng).cwiseAbs();
    const auto rep = finite_difference_check(
        s,
        [&] {
            s.zero_grad();
            ConvNet::Cache c;
            const auto l = mse_loss(net.forward(s, x, fs, &c), y);
            net.backward(s, c, l.grad, fs);
            return l.loss;
        },
        1e-4);
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(GradientCheck, ReportsOffenders) {
    ParamStore s;
    s.add("p", {2});
    s[0].value << 1.0, 2.0;
    const auto rep = finite_difference_check(s, [&] {
        s.zero_grad();
        s[0].grad(0) = 2.0 * s[0].value(0);
        s[0].grad(1) = 5.0;  // wrong
        return s[0].value.squaredNorm();
    });
    ASSERT_EQ(rep.offenders.size(), 1u);
    EXPECT_EQ(rep.offenders[0].param, "p");
    EXPECT_EQ(rep.offenders[0].row, 1);
}

TEST(ParamFile, RoundTripAndShapeChecks) {
    Rng rng(18);
    ParamStore s;
    s.seed = 99;
    Mlp mlp(s, "m", {3, 4, 2}, {Activation::tanh, Activation::linear}, rng);
    ConvNet net(s, "c", {1, 2}, 3, {Activation::relu}, rng);
    const auto dir = temp_dir("snnp");
    write_params(s, dir + "/p.snnp");
    ParamStore t;
    Rng other(5);
    Mlp m2(t, "m", {3, 4, 2}, {Activation::tanh, Activation::linear}, other);
    ConvNet n2(t, "c", {1, 2}, 3, {Activation::relu}, other);
    read_params(t, dir + "/p.snnp");
    EXPECT_EQ(t.seed, 99u);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(t[i].value, s[i].value);
    EXPECT_EQ(t.at("c.c0.W").shape, (std::vector<std::size_t>{2, 1, 3, 3}));

    ParamStore wrong;
    Mlp m3(wrong, "m", {3, 5, 2}, {Activation::tanh, Activation::linear}, other);
    ConvNet n3(wrong, "c", {1, 2}, 3, {Activation::relu}, other);
    EXPECT_EQ(kind_of([&] { read_params(wrong, dir + "/p.snnp"); }), ErrorKind::format);
    std::filesystem::resize_file(dir + "/p.snnp", std::filesystem::file_size(dir + "/p.snnp") - 8);
    EXPECT_EQ(kind_of([&] { read_params(t, dir + "/p.snnp"); }), ErrorKind::corrupt_file);
}

struct LinearProblem {
    Matrix x, y;
    ParamStore s;
    Mlp mlp;
    FitProblem prob;
    explicit LinearProblem(std::uint64_t seed) {
        Rng rng(seed);
        x = random_real(3, 200, rng);
        const Matrix a = random_real(2, 3, rng);
        y = a * x;
        Rng init(derive_seed(seed, "init"));
        mlp = Mlp(s, "m", {3, 2}, {Activation::linear}, init);
        prob.n_train = 160;
        prob.batch_loss = [this](const std::vector<std::size_t>& idx) {
            Matrix xb(3, static_cast<Eigen::Index>(idx.size())), yb(2, static_cast<Eigen::Index>(idx.size()));
            for (std::size_t j = 0; j < idx.size(); ++j) {
                xb.col(static_cast<Eigen::Index>(j)) = x.col(static_cast<Eigen::Index>(idx[j]));
                yb.col(static_cast<Eigen::Index>(j)) = y.col(static_cast<Eigen::Index>(idx[j]));
            }
            const auto acts = mlp.forward(s, xb);
            const auto l = mse_loss(acts.back(), yb);
            mlp.backward(s, acts, l.grad);
            return l.loss;
        };
        prob.validation_loss = [this] { return mse_loss(mlp.apply(s, x.rightCols(40)), y.rightCols(40)).loss; };
    }
};

TEST(Fit, LearnsLinearMapAndIsReproducible) {
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 16;
    cfg.epochs = 150;
    cfg.seed = 3;
    LinearProblem a(1), b(1);
    const auto ra = fit(a.s, cfg, a.prob);
    const auto rb = fit(b.s, cfg, b.prob);
    EXPECT_LT(ra.best_val, 1e-4);
    EXPECT_EQ(ra.val_loss, rb.val_loss);
    for (std::size_t i = 0; i < a.s.size(); ++i) EXPECT_EQ(a.s[i].value, b.s[i].value);
    cfg.seed = 4;
    LinearProblem c(1);
    const auto rc = fit(c.s, cfg, c.prob);
    EXPECT_NE(rc.train_loss, ra.train_loss);
}

TEST(Fit, EarlyStoppingRestoresBest) {
    TrainConfig cfg;
    cfg.learning_rate = 0.5;  // large steps make validation loss bounce
    cfg.batch_size = 8;
    cfg.epochs = 400;
    cfg.patience = 5;
    cfg.min_delta = 1e-3;
    LinearProblem p(2);
    const auto rep = fit(p.s, cfg, p.prob);
    EXPECT_TRUE(rep.stopped_early);
    EXPECT_LT(rep.epochs_run(), 400u);
    EXPECT_EQ(rep.epochs_run(), rep.best_epoch + 1 + cfg.patience);
    EXPECT_DOUBLE_EQ(p.prob.validation_loss(), rep.best_val);
}

TEST(Fit, ConfigValidation) {
    TrainConfig cfg;
    cfg.validation_fraction = 1.0;
    EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::invalid_argument);
    cfg = TrainConfig{};
    cfg.learning_rate = 0.0;
    EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::invalid_argument);
    const TrainConfig back = nlohmann::json(TrainConfig{}).get<TrainConfig>();
    EXPECT_EQ(back.patience, 50u);
    EXPECT_EQ(back.min_delta, 1e-6);
}

}  // namespace
