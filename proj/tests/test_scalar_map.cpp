#include "srom/scalar_map.hpp"
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

GridGeometry blocked_grid() {
    auto g = GridGeometry::uniform(8, 6);
    for (std::size_t iz = 0; iz < 2; ++iz)
        for (std::size_t ix = 3; ix < 5; ++ix) g.mask[g.cell(ix, iz)] = 0;
    return g;
}

SnapshotDataset random_velocity(const GridGeometry& g, std::size_t n_t, std::uint64_t seed) {
    SnapshotDataset d;
    d.geometry = g;
    d.times = SnapshotDataset::uniform_times(n_t, 1.0);
    d.velocity.assign(n_t * 2 * g.n_cells(), 0.0);
    Rng rng(seed);
    for (std::size_t t = 0; t < n_t; ++t)
        for (std::size_t v = 0; v < 2; ++v)
            for (std::size_t c = 0; c < g.n_cells(); ++c)
                if (g.fluid(c)) d.u(t, v, c) = rng.normal() + (v == 0 ? 0.5 : 0.0);
    return d;
}

std::vector<double> relu_target(const SnapshotDataset& d, double a, double b) {
    std::vector<double> c(d.n_t() * d.n_x(), 0.0);
    for (std::size_t t = 0; t < d.n_t(); ++t)
        for (std::size_t k = 0; k < d.n_x(); ++k)
            if (d.geometry.fluid(k)) c[t * d.n_x() + k] = std::max(0.0, a * d.u(t, 0, k) + b * d.u(t, 1, k));
    return c;
}

CnnConfig cnn(std::vector<std::size_t> channels, std::size_t kernel, std::size_t epochs, double lr) {
    CnnConfig c;
    c.channels = std::move(channels);
    c.kernel = kernel;
    c.train.epochs = epochs;
    c.train.patience = epochs;
    c.train.learning_rate = lr;
    c.train.batch_size = 16;
    return c;
}

// masked MSE over fluid cells of frames [t0, t1)
double fluid_mse(const GridGeometry& g, const std::vector<double>& a, const std::vector<double>& b, std::size_t t0, std::size_t t1,
                 double* var = nullptr) {
    const auto n_x = g.n_cells();
    double s = 0.0, m = 0.0, m2 = 0.0, n = 0.0;
    for (std::size_t t = t0; t < t1; ++t)
        for (std::size_t c = 0; c < n_x; ++c) {
            if (!g.fluid(c)) continue;
            const double d = a[t * n_x + c] - b[t * n_x + c];
            s += d * d;
            m += a[t * n_x + c];
            m2 += a[t * n_x + c] * a[t * n_x + c];
            n += 1.0;
        }
    if (var) *var = m2 / n - (m / n) * (m / n);
    return s / n;
}

TEST(CnnConfig, ValidationAndFullSizeShape) {
    const auto p = nlohmann::json::parse(
                       R"({"channels":[2,32,64,128,64,32,1],"kernel":5,"padding":2,"train":{"learning_rate":0.001}})")
                       .get<CnnConfig>();
    EXPECT_NO_THROW(p.validate());
    EXPECT_EQ(p.padding(), 2u);
    EXPECT_NO_THROW(ScalarMapper(GridGeometry::uniform(12, 10), 2, p, 1));
    EXPECT_EQ(kind_of([] { nlohmann::json::parse(R"({"kernel":5,"padding":1})").get<CnnConfig>(); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([] { nlohmann::json::parse(R"({"training_input":"magic"})").get<CnnConfig>(); }), ErrorKind::invalid_argument);
    CnnConfig c;
    c.channels = {3, 1};
    EXPECT_EQ(kind_of([&] { c.validate(2); }), ErrorKind::invalid_argument);
    c.channels = {2, 2};
    EXPECT_EQ(kind_of([&] { c.validate(2); }), ErrorKind::invalid_argument);
    c.channels = {2, 1};
    c.kernel = 4;
    EXPECT_EQ(kind_of([&] { c.validate(2); }), ErrorKind::invalid_argument);
    const auto r = nlohmann::json::parse(R"({"training_input":"reconstruction"})").get<CnnConfig>();
    EXPECT_EQ(r.training_input, CnnTrainingInput::reconstruction);
}

TEST(ScalarMap, ExactlyRepresentableTarget) {
    const auto g = blocked_grid();
    const auto d = random_velocity(g, 200, 3);
    const auto c = relu_target(d, 0.8, -0.6);
    ScalarMapper m(g, 2, cnn({2, 1}, 1, 400, 1e-2), 5);
    m.train(d, c);
    const auto pred = m.map(d);
    double var = 0.0;
    const double mse = fluid_mse(g, c, pred, 160, 200, &var);
    EXPECT_LE(mse, 1e-6 * var) << "held-out MSE " << mse << " variance " << var;
    for (std::size_t k = 0; k < g.n_cells(); ++k)
        if (!g.fluid(k)) EXPECT_EQ(pred[k], 0.0);
}

TEST(ScalarMap, ZeroInZeroOut) {
    const auto g = blocked_grid();
    SnapshotDataset d = random_velocity(g, 40, 1);
    std::fill(d.velocity.begin(), d.velocity.end(), 0.0);
    const std::vector<double> c(d.n_t() * d.n_x(), 0.0);
    ScalarMapper m(g, 2, cnn({2, 4, 1}, 3, 200, 1e-2), 2);
    m.train(d, c);
    const auto p = m.map(d);
    EXPECT_LE(*std::max_element(p.begin(), p.end()), 1e-6);
}

TEST(ScalarMap, NonNegativeAndDeterministic) {
    const auto g = blocked_grid();
    ScalarMapper m(g, 2, cnn({2, 6, 6, 1}, 3, 1, 1e-3), 9);
    // random biases so the ReLUs are not all trivially active
    Rng rng(4);
    for (auto& p : m.params())
        if (p.name.back() == 'b') p.value = random_real(p.value.rows(), 1, rng);
    for (int trial = 0; trial < 1000; ++trial) {
        const Matrix x = 10.0 * random_real(2, static_cast<Eigen::Index>(g.n_cells()), rng);
        const Vector c = m.map_frame(x);
        ASSERT_GE(c.minCoeff(), 0.0);
        if (trial < 3) EXPECT_EQ(c, m.map_frame(x));
    }
    EXPECT_EQ(kind_of([&] { m.map_frame(Matrix::Zero(2, 5)); }), ErrorKind::invalid_argument);
}

TEST(ScalarMap, InteriorTranslationCovariance) {
    const auto g = GridGeometry::uniform(14, 10);
    ScalarMapper m(g, 2, cnn({2, 4, 4, 1}, 3, 1, 1e-3), 6);
    Rng rng(2);
    for (auto& p : m.params())
        if (p.name.back() == 'b') p.value = 0.3 * random_real(p.value.rows(), 1, rng);
    const nn::FeatureShape fs{10, 14, 1};
    const Matrix x = random_real(2, fs.cols(), rng);
    Matrix shifted = Matrix::Zero(2, fs.cols());
    for (std::size_t z = 0; z < 10; ++z)
        for (std::size_t i = 1; i < 14; ++i) shifted.col(static_cast<Eigen::Index>(z * 14 + i)) = x.col(static_cast<Eigen::Index>(z * 14 + i - 1));
    const Matrix a = m.raw_forward(x, fs), b = m.raw_forward(shifted, fs);
    // three 3x3 layers see 3 cells; stay that far from every edge after the shift
    double dev = 0.0;
    for (std::size_t z = 3; z < 7; ++z)
        for (std::size_t i = 4; i < 11; ++i)
            dev = std::max(dev, std::abs(b(0, static_cast<Eigen::Index>(z * 14 + i)) - a(0, static_cast<Eigen::Index>(z * 14 + i - 1))));
    EXPECT_LE(dev, 1e-10);
}

TEST(ScalarMap, FullNetworkGradientCheck) {
    const auto g = GridGeometry::uniform(5, 4);
    ScalarMapper m(g, 2, cnn({2, 3, 3, 1}, 3, 1, 1e-3), 8);
    Rng rng(5);
    // positive biases keep pre-activations away from the ReLU kink
    for (auto& p : m.params())
        if (p.name.back() == 'b') p.value.setConstant(0.5);
    const nn::FeatureShape fs{4, 5, 2};
    const Matrix x = 0.3 * random_real(2, fs.cols(), rng);
    const Matrix y = random_real(1, fs.cols(), rng);
    auto& store = m.params();
    const auto& net = m.net();
    auto loss = [&] {
        nn::ConvNet::Cache cache;
        const Matrix p = net.forward(store, x, fs, &cache);
        const auto l = nn::mse_loss(p, y);
        net.backward(store, cache, l.grad, fs);
        return l.loss;
    };
    const auto rep = nn::finite_difference_check(store, loss, 1e-4);
    EXPECT_TRUE(rep.passed()) << "max relative error " << rep.max_rel_error;
    EXPECT_GT(rep.checked, 0u);
}

TEST(ScalarMap, HeldOutSyntheticFrames) {
    SynthConfig s;
    s.nx = 16;
    s.nz = 12;
    s.n_t = 300;
    s.solids = {{6, 10, 0, 5}};
    s.components = {{0, 0.031, 1.0, 0.0, true}, {1, 0.073, 0.6, 0.5, true}};
    s.mean_u = 0.8;
    s.concentration = true;
    s.conc_base = 0.1;
    s.conc_gain = 1.0;
    const auto d = synthesize_flow(s, 4);
    ScalarMapper m(d.geometry, 2, cnn({2, 8, 8, 1}, 3, 150, 5e-3), 3);
    m.train(d, *d.concentration);
    const auto p = m.map(d);
    const auto n_x = d.n_x();
    double num = 0.0, den = 0.0;
    for (std::size_t t = 240; t < 300; ++t)
        for (std::size_t c = 0; c < n_x; ++c) {
            const double r = (*d.concentration)[t * n_x + c];
            num += (p[t * n_x + c] - r) * (p[t * n_x + c] - r);
            den += r * r;
        }
    EXPECT_LE(num / den, 0.1);

    const auto dir = temp_dir("cnn");
    m.save(dir + "/cnn.snnp");
    const auto back = ScalarMapper::load(dir + "/cnn.snnp");
    EXPECT_EQ(back.map(d), p);
    EXPECT_EQ(back.config().channels, m.config().channels);
}

TEST(ScalarMap, MismatchedInputs) {
    const auto g = blocked_grid();
    auto d = random_velocity(g, 20, 1);
    ScalarMapper m(g, 2, cnn({2, 1}, 1, 1, 1e-3), 1);
    EXPECT_EQ(kind_of([&] { m.train(d, std::vector<double>(5)); }), ErrorKind::invalid_argument);
    auto other = random_velocity(GridGeometry::uniform(8, 6), 20, 1);
    EXPECT_EQ(kind_of([&] { m.map(other); }), ErrorKind::invalid_argument);
    CnnConfig bad = cnn({2, 1}, 1, 20, 1e300);
    ScalarMapper boom(g, 2, bad, 1);
    EXPECT_EQ(kind_of([&] { boom.train(d, relu_target(d, 1.0, 1.0)); }), ErrorKind::training_diverged);
}

SnapshotDataset flux_frames(std::size_t nx, std::size_t nz, std::size_t n_t) {
    SnapshotDataset d;
    d.geometry = GridGeometry::uniform(nx, nz);
    d.times = SnapshotDataset::uniform_times(n_t, 1.0);
    d.velocity.assign(n_t * 2 * nx * nz, 0.0);
    d.concentration = std::vector<double>(n_t * nx * nz, 0.0);
    return d;
}

TEST(Flux, UnitFieldsGiveUnitProfile) {
    auto d = flux_frames(4, 3, 5);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t c = 0; c < 12; ++c) d.u(t, 1, c) = 1.0;
    std::fill(d.concentration->begin(), d.concentration->end(), 1.0);
    EXPECT_EQ(vertical_mass_flux(d, 1), Vector::Ones(4));
    d.meta.u_ref = 2.0;
    d.meta.c_ref = 4.0;
    EXPECT_EQ(vertical_mass_flux(d, 1), Vector::Constant(4, 0.125));
}

TEST(Flux, DecorrelatedFieldsGiveZero) {
    const std::size_t n_t = 4000;
    auto d = flux_frames(3, 2, n_t);
    Rng rng(7);
    for (std::size_t t = 0; t < n_t; ++t)
        for (std::size_t c = 0; c < 6; ++c) d.u(t, 1, c) = rng.normal();
    std::fill(d.concentration->begin(), d.concentration->end(), 2.0);
    const Vector f = vertical_mass_flux(d, 0);
    EXPECT_LE(f.cwiseAbs().maxCoeff(), 4.0 * 2.0 / std::sqrt(static_cast<double>(n_t)));
}

TEST(Flux, HandComputation) {
    auto d = flux_frames(3, 2, 2);
    // row 1 cells are 3, 4, 5
    const double w[2][3] = {{1.0, -2.0, 0.5}, {3.0, 1.0, -1.0}};
    const double c[2][3] = {{2.0, 1.0, 4.0}, {0.5, 3.0, 2.0}};
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 0; i < 3; ++i) {
            d.u(t, 1, 3 + i) = w[t][i];
            (*d.concentration)[t * 6 + 3 + i] = c[t][i];
        }
    const Vector f = vertical_mass_flux(d, 1);
    EXPECT_DOUBLE_EQ(f(0), (2.0 + 1.5) / 2.0);
    EXPECT_DOUBLE_EQ(f(1), (-2.0 + 3.0) / 2.0);
    EXPECT_DOUBLE_EQ(f(2), (2.0 - 2.0) / 2.0);
}

TEST(Flux, SolidRowsAndCells) {
    auto d = flux_frames(3, 2, 2);
    d.geometry.mask[0] = d.geometry.mask[1] = d.geometry.mask[2] = 0;
    EXPECT_EQ(kind_of([&] { vertical_mass_flux(d, 0); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([&] { vertical_mass_flux(d, 2); }), ErrorKind::invalid_argument);
    d.geometry.mask[0] = 1;
    const Vector f = vertical_mass_flux(d, 0);
    EXPECT_EQ(f(0), 0.0);
    EXPECT_TRUE(std::isnan(f(1)));
}

TEST(Probe, NearestCellAndMetadata) {
    auto g = GridGeometry::uniform(40, 20, 0.05, 0.1);
    g.x0 = -1.0;
    g.z0 = 0.0;
    for (std::size_t iz = 0; iz < 10; ++iz) g.mask[g.cell(0, iz)] = 0;
    const std::size_t n_t = 3;
    std::vector<double> frames(n_t * g.n_cells());
    for (std::size_t t = 0; t < n_t; ++t)
        for (std::size_t c = 0; c < g.n_cells(); ++c) frames[t * g.n_cells() + c] = static_cast<double>(c) + 1000.0 * static_cast<double>(t);

    // (0.60, 1.01): ix = floor(1.60 / 0.05) = 32, iz = floor(1.01 / 0.1) = 10
    const auto a = probe_history(frames, g, 0.60, 1.01);
    EXPECT_EQ(a.ix, 32u);
    EXPECT_EQ(a.iz, 10u);
    EXPECT_NEAR(a.x_cell, -1.0 + 32.5 * 0.05, 1e-12);
    EXPECT_NEAR(a.z_cell, 1.05, 1e-12);
    EXPECT_EQ(a.values, (std::vector<double>{432.0, 1432.0, 2432.0}));
    // (-0.49, 0.50): ix = floor(0.51 / 0.05) = 10, iz = 5
    const auto b = probe_history(frames, g, -0.49, 0.50);
    EXPECT_EQ(b.ix, 10u);
    EXPECT_EQ(b.iz, 5u);

    std::vector<double> constant(n_t * g.n_cells(), 3.25);
    EXPECT_EQ(probe_history(constant, g, 0.1, 0.3).values, std::vector<double>(n_t, 3.25));
    EXPECT_EQ(kind_of([&] { probe_history(frames, g, -0.99, 0.2); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([&] { probe_history(frames, g, 1.5, 0.2); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([&] { probe_history(std::vector<double>(7), g, 0.0, 0.2); }), ErrorKind::invalid_argument);
}

TEST(Probe, CsvExports) {
    const auto g = GridGeometry::uniform(3, 2);
    const auto dir = temp_dir("probe_csv");
    write_flux_csv(g, {{"reference", Vector::Ones(3)}, {"predicted", Vector::Zero(3)}}, dir + "/flux.csv");
    std::vector<double> frames(2 * 6, 1.0);
    write_probes_csv({0.0, 1.0}, {{"p1", probe_history(frames, g, 0.5, 0.5)}}, dir + "/probes.csv");
    auto lines = [](const std::string& p) {
        std::ifstream f(p);
        std::string s;
        int n = 0;
        while (std::getline(f, s)) ++n;
        return n;
    };
    EXPECT_EQ(lines(dir + "/flux.csv"), 4);
    EXPECT_EQ(lines(dir + "/probes.csv"), 3);
}

}  // namespace
