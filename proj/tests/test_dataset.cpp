#include "srom/dataset.hpp"

#include <gtest/gtest.h>
#include <unsupported/Eigen/FFT>

#include <cstdio>
#include <filesystem>

namespace {

using namespace srom;

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("srom_test_dataset_" + name)).string();
}

SnapshotDataset tiny_dataset(std::size_t nx, std::size_t nz, std::size_t n_t) {
    SnapshotDataset d;
    d.geometry = GridGeometry::uniform(nx, nz, 0.5, 0.25);
    d.meta.dt = 0.1;
    d.meta.n_v = 2;
    d.times = SnapshotDataset::uniform_times(n_t, d.meta.dt);
    d.velocity.assign(n_t * 2 * nx * nz, 0.0);
    return d;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected srom::Error";
    return ErrorKind::internal;
}

TEST(Snapshots, MinimalFileLoads) {
    auto d = tiny_dataset(2, 1, 3);
    for (std::size_t i = 0; i < d.velocity.size(); ++i) d.velocity[i] = static_cast<double>(i) * 0.5 - 1.0;
    const auto path = temp_path("minimal.srom");
    write_snapshots(d, path);
    const auto back = load_snapshots(path);
    EXPECT_EQ(back.n_t(), 3u);
    EXPECT_EQ(back.n_xv(), 4u);
    EXPECT_EQ(back.geometry.nx, 2u);
    EXPECT_FALSE(back.concentration.has_value());
    std::filesystem::remove(path);
}

TEST(Snapshots, SolidCellWithVelocityIsInvalidData) {
    // Hand-written file: mask marks cell 1 solid but its u holds 1.0.
    const auto path = temp_path("solid.srom");
    {
        io::Writer w(path);
        w.magic("SROM");
        w.u32(1);
        w.u32(2);
        w.u32(1);
        w.u32(2);
        w.u32(1);
        w.u8(0);
        for (double v : {0.1, 1.0, 1.0, 1.0, 1.0}) w.f64(v);
        const std::uint8_t mask[2] = {1, 0};
        w.bytes(mask, 2);
        for (double v : {0.5, 1.0, 0.0, 0.0}) w.f64(v);
        w.close();
    }
    EXPECT_EQ(kind_of([&] { load_snapshots(path); }), ErrorKind::invalid_data);
    std::filesystem::remove(path);
}

TEST(Snapshots, RejectsBadMagicVersionAndTruncation) {
    auto d = tiny_dataset(3, 2, 4);
    const auto path = temp_path("bad.srom");
    write_snapshots(d, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XROM", 4);
    }
    EXPECT_EQ(kind_of([&] { load_snapshots(path); }), ErrorKind::format);

    write_snapshots(d, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        const std::uint32_t v = 7;
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    EXPECT_EQ(kind_of([&] { load_snapshots(path); }), ErrorKind::format);

    write_snapshots(d, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
    EXPECT_EQ(kind_of([&] { load_snapshots(path); }), ErrorKind::corrupt_file);
    std::filesystem::remove(path);
}

TEST(Snapshots, RoundTripIsBitExact) {
    SynthConfig cfg;
    cfg.nx = 7;
    cfg.nz = 5;
    cfg.solids = {{0, 2, 0, 2}};
    cfg.n_t = 33;
    cfg.dt = 0.01;
    cfg.components = {{1, 3.0, 0.7, 0.2, true}};
    cfg.noise_sigma = 0.3;
    cfg.concentration = true;
    cfg.conc_base = 0.2;
    const auto d = synthesize_flow(cfg, 99);
    const auto path = temp_path("roundtrip.srom");
    write_snapshots(d, path);
    const auto back = load_snapshots(path);
    ASSERT_EQ(back.velocity.size(), d.velocity.size());
    EXPECT_EQ(std::memcmp(back.velocity.data(), d.velocity.data(), d.velocity.size() * 8), 0);
    ASSERT_TRUE(back.concentration.has_value());
    EXPECT_EQ(std::memcmp(back.concentration->data(), d.concentration->data(), d.concentration->size() * 8), 0);
    EXPECT_EQ(back.geometry.mask, d.geometry.mask);
    std::filesystem::remove(path);
}

TEST(Snapshots, NonUniformTimesRejected) {
    auto d = tiny_dataset(2, 1, 3);
    d.times[2] = 0.35;
    EXPECT_EQ(kind_of([&] { d.validate(); }), ErrorKind::invalid_data);
}

TEST(Fluctuations, ConstantFieldGivesZeroFluctuation) {
    auto d = tiny_dataset(3, 2, 6);
    std::fill(d.velocity.begin(), d.velocity.end(), 5.0);
    const auto [fl, mean] = compute_fluctuations(d);
    for (double v : fl.velocity) EXPECT_EQ(v, 0.0);
    for (Eigen::Index i = 0; i < mean.mean_velocity.size(); ++i) EXPECT_EQ(mean.mean_velocity(i), 5.0);
}

TEST(Fluctuations, ZeroMeanSineIsUnchanged) {
    constexpr double pi = 3.14159265358979323846;
    const std::size_t period = 16, n_t = 4 * period;
    auto d = tiny_dataset(1, 1, n_t);
    for (std::size_t t = 0; t < n_t; ++t) d.u(t, 0, 0) = std::sin(2 * pi * static_cast<double>(t) / period);
    const auto [fl, mean] = compute_fluctuations(d);
    EXPECT_NEAR(mean.mean_velocity(0), 0.0, 1e-12);
    for (std::size_t t = 0; t < n_t; ++t) EXPECT_NEAR(fl.u(t, 0, 0), d.u(t, 0, 0), 1e-12);
}

TEST(Fluctuations, TwoSnapshotArithmetic) {
    auto d = tiny_dataset(1, 1, 2);
    d.u(0, 0, 0) = 1.0;
    d.u(1, 0, 0) = 3.0;
    const auto [fl, mean] = compute_fluctuations(d);
    EXPECT_EQ(mean.mean_velocity(0), 2.0);
    EXPECT_EQ(fl.u(0, 0, 0), -1.0);
    EXPECT_EQ(fl.u(1, 0, 0), 1.0);
}

TEST(Fluctuations, MeanPlusFluctuationReconstructs) {
    SynthConfig cfg;
    cfg.nx = 6;
    cfg.nz = 4;
    cfg.solids = {{2, 4, 0, 2}};
    cfg.n_t = 50;
    cfg.mean_u = 3.0;
    cfg.mean_vortex = 0.5;
    cfg.components = {{0, 0.1, 1.0, 0.0, true}};
    cfg.noise_sigma = 0.2;
    cfg.concentration = true;
    const auto d = synthesize_flow(cfg, 3);
    const auto [fl, mean] = compute_fluctuations(d);
    const auto back = add_mean(fl, mean);
    for (std::size_t i = 0; i < d.velocity.size(); ++i) EXPECT_NEAR(back.velocity[i], d.velocity[i], 1e-14);
    for (std::size_t i = 0; i < d.concentration->size(); ++i)
        EXPECT_NEAR((*back.concentration)[i], (*d.concentration)[i], 1e-14);
    // Temporal mean of the fluctuations vanishes; solid cells stay zero.
    const Vector m = fl.snapshot_matrix().rowwise().mean();
    EXPECT_LT(m.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NO_THROW(fl.validate());
}

TEST(Fluctuations, TrainingMeanAppliedToOtherData) {
    auto train = tiny_dataset(2, 1, 4);
    std::fill(train.velocity.begin(), train.velocity.end(), 1.0);
    auto test = tiny_dataset(2, 1, 2);
    std::fill(test.velocity.begin(), test.velocity.end(), 4.0);
    const auto [ftrain, mean] = compute_fluctuations(train);
    const auto [ftest, same] = compute_fluctuations(test, mean);
    for (double v : ftest.velocity) EXPECT_EQ(v, 3.0);
    MeanField wrong;
    wrong.mean_velocity = Vector::Zero(3);
    EXPECT_EQ(kind_of([&] { compute_fluctuations(test, wrong); }), ErrorKind::invalid_argument);
}

TEST(Fluctuations, StackingOrderIsUThenW) {
    auto d = tiny_dataset(2, 2, 1);
    for (std::size_t c = 0; c < 4; ++c) {
        d.u(0, 0, c) = 10.0 + static_cast<double>(c);
        d.u(0, 1, c) = 20.0 + static_cast<double>(c);
    }
    const auto q = d.snapshot_matrix();
    EXPECT_EQ(q(0, 0), 10.0);
    EXPECT_EQ(q(3, 0), 13.0);
    EXPECT_EQ(q(4, 0), 20.0);
    // Cell index is row-major over (z, x).
    EXPECT_EQ(d.geometry.cell(1, 1), 3u);
}

TEST(Synthesis, PureToneHasSingleNonNegativeBin) {
    SynthConfig cfg;
    cfg.nx = 4;
    cfg.nz = 3;
    cfg.n_t = 40;
    cfg.dt = 0.5;
    cfg.components = {{0, 0.1, 1.0, 0.3, true}};
    const auto d = synthesize_flow(cfg, 1);
    Eigen::FFT<double> fft;
    const double tone_bin = 0.1 * static_cast<double>(cfg.n_t) * cfg.dt;  // = 2
    for (std::size_t e = 0; e < d.n_xv(); ++e) {
        std::vector<double> series(cfg.n_t);
        for (std::size_t t = 0; t < cfg.n_t; ++t) series[t] = d.velocity[t * d.n_xv() + e];
        std::vector<Complex> spec;
        fft.fwd(spec, series);
        for (std::size_t k = 0; k <= cfg.n_t / 2; ++k) {
            if (static_cast<double>(k) == tone_bin) continue;
            EXPECT_NEAR(std::abs(spec[k]), 0.0, 1e-10) << "entry " << e << " bin " << k;
        }
    }
}

TEST(Synthesis, AboveNyquistRejected) {
    SynthConfig cfg;
    cfg.dt = 0.5;
    cfg.components = {{0, 1.01, 1.0, 0.0, true}};
    EXPECT_EQ(kind_of([&] { synthesize_flow(cfg, 1); }), ErrorKind::invalid_argument);
}

TEST(Synthesis, SeedChangesNoiseOnly) {
    SynthConfig cfg;
    cfg.nx = 5;
    cfg.nz = 4;
    cfg.n_t = 64;
    cfg.components = {{2, 0.125, 2.0, 0.0, true}};
    cfg.noise_sigma = 0.1;
    const auto a = synthesize_flow(cfg, 11);
    const auto a2 = synthesize_flow(cfg, 11);
    const auto b = synthesize_flow(cfg, 12);
    EXPECT_EQ(a.velocity, a2.velocity);
    EXPECT_NE(a.velocity, b.velocity);
    cfg.noise_sigma = 0.0;
    const auto clean = synthesize_flow(cfg, 0);
    const auto pattern = planted_pattern(clean.geometry, 2);
    for (std::size_t t = 0; t < cfg.n_t; t += 7) {
        const Vector expect = planted_field(pattern, cfg.components[0], clean.times[t]);
        for (std::size_t e = 0; e < clean.n_xv(); ++e)
            EXPECT_NEAR(clean.velocity[t * clean.n_xv() + e], expect(static_cast<Eigen::Index>(e)), 1e-12);
    }
}

TEST(Synthesis, PhaseDiffusionKeepsEnergyAndNoiseStream) {
    SynthConfig cfg;
    cfg.nx = 8;
    cfg.nz = 4;
    cfg.n_t = 200;
    cfg.dt = 0.1;
    cfg.components = {{1, 0.5, 1.0, 0.0, true, 3.0}};
    const auto d = synthesize_flow(cfg, 3);
    EXPECT_EQ(d.velocity, synthesize_flow(cfg, 3).velocity);
    // a traveling wave over whole periods has frame energy independent of phase
    const auto frames = d.snapshot_matrix();
    const double e0 = frames.col(0).squaredNorm();
    for (Eigen::Index t = 1; t < frames.cols(); ++t) EXPECT_NEAR(frames.col(t).squaredNorm(), e0, 1e-10 * e0);
    // and the phase really wanders away from the coherent tone
    auto coherent = cfg;
    coherent.components[0].phase_diffusion = 0.0;
    const auto c = synthesize_flow(coherent, 3).snapshot_matrix();
    EXPECT_EQ(frames.col(0), c.col(0));
    EXPECT_GT((frames.col(150) - c.col(150)).norm(), 0.1 * c.col(150).norm());

    // noise draws do not depend on diffusing components
    cfg.noise_sigma = 0.2;
    cfg.components[0].amplitude = 0.0;
    coherent.noise_sigma = 0.2;
    coherent.components[0].amplitude = 0.0;
    EXPECT_EQ(synthesize_flow(cfg, 4).velocity, synthesize_flow(coherent, 4).velocity);

    const auto back = nlohmann::json(cfg).get<SynthConfig>();
    EXPECT_EQ(back.components[0].phase_diffusion, 3.0);
    EXPECT_FALSE(nlohmann::json(coherent).at("components")[0].contains("phase_diffusion"));
    EXPECT_EQ(kind_of([] { nlohmann::json::parse(R"({"frequency": 1, "phase_diffusion": -1})").get<PlantedComponent>(); }),
              ErrorKind::invalid_argument);
}

TEST(Synthesis, ConcentrationIsNonNegativeAndMasked) {
    SynthConfig cfg;
    cfg.nx = 8;
    cfg.nz = 6;
    cfg.solids = {{0, 3, 0, 3}};
    cfg.n_t = 20;
    cfg.mean_u = 1.0;
    cfg.components = {{0, 0.1, 1.0, 0.0, true}};
    cfg.concentration = true;
    cfg.conc_base = -0.2;
    cfg.conc_gain = 1.5;
    const auto d = synthesize_flow(cfg, 4);
    for (std::size_t t = 0; t < cfg.n_t; ++t)
        for (std::size_t c = 0; c < d.n_x(); ++c) {
            const double v = (*d.concentration)[t * d.n_x() + c];
            EXPECT_GE(v, 0.0);
            if (!d.geometry.fluid(c)) EXPECT_EQ(v, 0.0);
        }
}

TEST(Split, EightyTwentyRatio) {
    auto d = tiny_dataset(1, 1, 80000);
    const auto [train, test] = split_train_test(d, 0.9);
    EXPECT_EQ(train.n_t(), 72000u);
    EXPECT_EQ(test.n_t(), 8000u);
}

TEST(Split, HalfAndInvalidRatios) {
    auto d = tiny_dataset(1, 1, 10);
    for (std::size_t t = 0; t < 10; ++t) d.u(t, 0, 0) = static_cast<double>(t);
    const auto [train, test] = split_train_test(d, 0.5);
    EXPECT_EQ(train.n_t(), 5u);
    EXPECT_EQ(test.n_t(), 5u);
    EXPECT_EQ(test.u(0, 0, 0), 5.0);
    EXPECT_EQ(kind_of([&] { split_train_test(d, 1.0); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([&] { split_train_test(d, 0.1); }), ErrorKind::invalid_argument);
}

}  // namespace
