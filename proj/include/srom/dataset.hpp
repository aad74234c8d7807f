#ifndef SROM_DATASET_HPP
#define SROM_DATASET_HPP

// Gridded snapshot archives: the SROM file format, mean/fluctuation
// decomposition, the synthetic flow generator and chronological splitting.

#include "srom/core.hpp"

#include <json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace srom {

struct GridGeometry {
    std::size_t nx = 0;
    std::size_t nz = 0;
    double dx = 1.0;
    double dz = 1.0;
    /// Row-major over (z, x); true = fluid.
    std::vector<std::uint8_t> mask;
    double x0 = 0.0;
    double z0 = 0.0;

    std::size_t n_cells() const { return nx * nz; }
    std::size_t cell(std::size_t ix, std::size_t iz) const { return iz * nx + ix; }
    bool fluid(std::size_t c) const { return mask[c] != 0; }
    std::size_t n_fluid() const {
        std::size_t n = 0;
        for (auto m : mask) n += (m != 0);
        return n;
    }
    double x_center(std::size_t ix) const { return x0 + (static_cast<double>(ix) + 0.5) * dx; }
    double z_center(std::size_t iz) const { return z0 + (static_cast<double>(iz) + 0.5) * dz; }

    void validate() const {
        require(nx > 0 && nz > 0, ErrorKind::invalid_argument, "grid must have nx, nz > 0");
        require(dx > 0 && dz > 0 && std::isfinite(dx) && std::isfinite(dz), ErrorKind::invalid_argument,
                "grid spacings must be positive");
        require(mask.size() == nx * nz, ErrorKind::invalid_argument, "mask size must equal nx*nz");
        require(n_fluid() > 0, ErrorKind::invalid_argument, "grid has no fluid cell");
    }

    static GridGeometry uniform(std::size_t nx, std::size_t nz, double dx = 1.0, double dz = 1.0) {
        GridGeometry g;
        g.nx = nx;
        g.nz = nz;
        g.dx = dx;
        g.dz = dz;
        g.mask.assign(nx * nz, 1);
        return g;
    }
};

struct DatasetMeta {
    double dt = 1.0;
    double u_ref = 1.0;
    double c_ref = 1.0;
    double q_c = 0.0;  ///< 0 when no emission rate is known
    double span_length = 1.0;
    double h_ref = 1.0;
    double re_h = 0.0;  ///< informational only
    std::size_t n_v = 2;

    static double reference_concentration(double q_c, double u_ref, double h_ref, double span_length) {
        return q_c / (u_ref * h_ref * span_length);
    }
};

/// Time-major snapshot archive. Frame layout is component-outer: entry
/// (t, v, cell) lives at ((t * n_v) + v) * n_cells + cell, so one frame is
/// exactly the stacked snapshot vector [u' cells..., w' cells...].
struct SnapshotDataset {
    GridGeometry geometry;
    DatasetMeta meta;
    std::vector<double> velocity;
    std::optional<std::vector<double>> concentration;
    std::vector<double> times;

    std::size_t n_t() const { return times.size(); }
    std::size_t n_x() const { return geometry.n_cells(); }
    std::size_t n_v() const { return meta.n_v; }
    std::size_t n_xv() const { return n_x() * n_v(); }

    double& u(std::size_t t, std::size_t v, std::size_t c) { return velocity[(t * n_v() + v) * n_x() + c]; }
    double u(std::size_t t, std::size_t v, std::size_t c) const { return velocity[(t * n_v() + v) * n_x() + c]; }

    /// Snapshot matrix view [N_xv x N_t], one column per time.
    Eigen::Map<const Matrix> snapshot_matrix() const {
        return Eigen::Map<const Matrix>(velocity.data(), static_cast<Eigen::Index>(n_xv()),
                                        static_cast<Eigen::Index>(n_t()));
    }
    Eigen::Map<Matrix> snapshot_matrix() {
        return Eigen::Map<Matrix>(velocity.data(), static_cast<Eigen::Index>(n_xv()),
                                  static_cast<Eigen::Index>(n_t()));
    }

    /// Quadrature weights per snapshot entry: dx*dz on fluid cells, 0 on solid.
    Vector weights() const {
        Vector w(static_cast<Eigen::Index>(n_xv()));
        const double area = geometry.dx * geometry.dz;
        for (std::size_t v = 0; v < n_v(); ++v)
            for (std::size_t c = 0; c < n_x(); ++c)
                w(static_cast<Eigen::Index>(v * n_x() + c)) = geometry.fluid(c) ? area : 0.0;
        return w;
    }

    /// Copies frames [begin, end) into a new dataset sharing geometry and meta.
    SnapshotDataset slice(std::size_t begin, std::size_t end) const {
        require(begin <= end && end <= n_t(), ErrorKind::invalid_argument, "slice out of range");
        SnapshotDataset out;
        out.geometry = geometry;
        out.meta = meta;
        const auto frame = n_xv();
        out.velocity.assign(velocity.begin() + static_cast<std::ptrdiff_t>(begin * frame),
                            velocity.begin() + static_cast<std::ptrdiff_t>(end * frame));
        if (concentration) {
            out.concentration = std::vector<double>(
                concentration->begin() + static_cast<std::ptrdiff_t>(begin * n_x()),
                concentration->begin() + static_cast<std::ptrdiff_t>(end * n_x()));
        }
        out.times.assign(times.begin() + static_cast<std::ptrdiff_t>(begin),
                         times.begin() + static_cast<std::ptrdiff_t>(end));
        return out;
    }

    /// Checks every structural invariant; throws invalid-data on violation.
    void validate() const {
        geometry.validate();
        require(meta.n_v >= 1, ErrorKind::invalid_data, "n_v must be >= 1");
        require(meta.dt > 0 && std::isfinite(meta.dt), ErrorKind::invalid_data, "dt must be positive");
        require(velocity.size() == n_t() * n_xv(), ErrorKind::invalid_data, "velocity size mismatch");
        if (concentration)
            require(concentration->size() == n_t() * n_x(), ErrorKind::invalid_data, "concentration size mismatch");
        for (std::size_t k = 1; k < times.size(); ++k) {
            const double step = times[k] - times[k - 1];
            require(step > 0 && std::abs(step - meta.dt) <= 1e-9 * meta.dt, ErrorKind::invalid_data,
                    "snapshot times must be strictly increasing with uniform spacing dt");
        }
        require(all_finite(velocity.data(), velocity.size()), ErrorKind::invalid_data, "non-finite velocity");
        for (std::size_t t = 0; t < n_t(); ++t)
            for (std::size_t c = 0; c < n_x(); ++c) {
                if (geometry.fluid(c)) continue;
                for (std::size_t v = 0; v < n_v(); ++v)
                    require(u(t, v, c) == 0.0, ErrorKind::invalid_data, "solid cell holds nonzero velocity");
                if (concentration)
                    require((*concentration)[t * n_x() + c] == 0.0, ErrorKind::invalid_data,
                            "solid cell holds nonzero concentration");
            }
        if (concentration)
            require(all_finite(concentration->data(), concentration->size()), ErrorKind::invalid_data,
                    "non-finite concentration");
    }

    static std::vector<double> uniform_times(std::size_t n_t, double dt) {
        std::vector<double> t(n_t);
        for (std::size_t k = 0; k < n_t; ++k) t[k] = static_cast<double>(k) * dt;
        return t;
    }
};

enum class MeanSource { computed_from_training, loaded };

struct MeanField {
    Vector mean_velocity;  ///< [N_x * N_v], component-outer
    std::optional<Vector> mean_concentration;
    MeanSource source = MeanSource::computed_from_training;
};

// ---------------------------------------------------------------------------
// SROM file format
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kSromVersion = 1;

inline void write_snapshots(const SnapshotDataset& data, const std::string& path) {
    data.validate();
    io::Writer w(path);
    w.magic("SROM");
    w.u32(kSromVersion);
    w.u32(static_cast<std::uint32_t>(data.geometry.nx));
    w.u32(static_cast<std::uint32_t>(data.geometry.nz));
    w.u32(static_cast<std::uint32_t>(data.meta.n_v));
    w.u32(static_cast<std::uint32_t>(data.n_t()));
    w.u8(data.concentration ? 1 : 0);
    w.f64(data.meta.dt);
    w.f64(data.meta.u_ref);
    w.f64(data.meta.c_ref);
    w.f64(data.geometry.dx);
    w.f64(data.geometry.dz);
    w.bytes(data.geometry.mask.data(), data.geometry.mask.size());
    w.f64s(data.velocity.data(), data.velocity.size());
    if (data.concentration) w.f64s(data.concentration->data(), data.concentration->size());
    w.close();
}

inline SnapshotDataset load_snapshots(const std::string& path) {
    io::Reader r(path);
    r.expect_magic("SROM");
    const auto version = r.u32();
    require(version == kSromVersion, ErrorKind::format, "unsupported SROM version " + std::to_string(version));
    SnapshotDataset d;
    d.geometry.nx = r.u32();
    d.geometry.nz = r.u32();
    d.meta.n_v = r.u32();
    const std::size_t n_t = r.u32();
    const auto has_conc = r.u8();
    require(has_conc <= 1, ErrorKind::corrupt_file, "bad concentration flag");
    d.meta.dt = r.f64();
    d.meta.u_ref = r.f64();
    d.meta.c_ref = r.f64();
    d.geometry.dx = r.f64();
    d.geometry.dz = r.f64();
    const std::size_t cells = d.geometry.nx * d.geometry.nz;
    require(cells > 0 && d.meta.n_v > 0, ErrorKind::corrupt_file, "zero-sized grid");
    const std::uint64_t expected = cells + 8ull * n_t * cells * d.meta.n_v + (has_conc ? 8ull * n_t * cells : 0);
    require(r.remaining() == expected, ErrorKind::corrupt_file, "payload size does not match header dimensions");
    d.geometry.mask.resize(cells);
    r.bytes(d.geometry.mask.data(), cells);
    for (auto m : d.geometry.mask) require(m <= 1, ErrorKind::corrupt_file, "mask bytes must be 0 or 1");
    d.velocity.resize(n_t * cells * d.meta.n_v);
    r.f64s(d.velocity.data(), d.velocity.size());
    if (has_conc) {
        d.concentration = std::vector<double>(n_t * cells);
        r.f64s(d.concentration->data(), d.concentration->size());
    }
    d.times = SnapshotDataset::uniform_times(n_t, d.meta.dt);
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Mean / fluctuation decomposition
// ---------------------------------------------------------------------------

inline MeanField temporal_mean(const SnapshotDataset& data) {
    require(data.n_t() > 0, ErrorKind::invalid_argument, "cannot average an empty dataset");
    MeanField m;
    m.source = MeanSource::computed_from_training;
    m.mean_velocity = data.snapshot_matrix().rowwise().mean();
    if (data.concentration) {
        Eigen::Map<const Matrix> c(data.concentration->data(), static_cast<Eigen::Index>(data.n_x()),
                                   static_cast<Eigen::Index>(data.n_t()));
        m.mean_concentration = c.rowwise().mean();
    }
    return m;
}

/// Subtracts the temporal mean. With `mean` absent the mean is computed from
/// `data`; otherwise the given (training) mean is subtracted.
inline std::pair<SnapshotDataset, MeanField> compute_fluctuations(const SnapshotDataset& data,
                                                                  const std::optional<MeanField>& mean = std::nullopt) {
    MeanField m = mean ? *mean : temporal_mean(data);
    require(m.mean_velocity.size() == static_cast<Eigen::Index>(data.n_xv()), ErrorKind::invalid_argument,
            "mean field shape does not match dataset");
    SnapshotDataset out = data;
    out.snapshot_matrix().colwise() -= m.mean_velocity;
    if (data.concentration) {
        require(m.mean_concentration.has_value() &&
                    m.mean_concentration->size() == static_cast<Eigen::Index>(data.n_x()),
                ErrorKind::invalid_argument, "mean concentration shape does not match dataset");
        Eigen::Map<Matrix> c(out.concentration->data(), static_cast<Eigen::Index>(data.n_x()),
                             static_cast<Eigen::Index>(data.n_t()));
        c.colwise() -= *m.mean_concentration;
    }
    // Solid cells stay exactly zero.
    for (std::size_t c = 0; c < data.n_x(); ++c) {
        if (data.geometry.fluid(c)) continue;
        for (std::size_t v = 0; v < data.n_v(); ++v) m.mean_velocity(static_cast<Eigen::Index>(v * data.n_x() + c)) = 0.0;
        for (std::size_t t = 0; t < data.n_t(); ++t) {
            for (std::size_t v = 0; v < data.n_v(); ++v) out.u(t, v, c) = 0.0;
            if (out.concentration) (*out.concentration)[t * data.n_x() + c] = 0.0;
        }
    }
    return {std::move(out), std::move(m)};
}

/// Adds `mean` back onto a fluctuation dataset.
inline SnapshotDataset add_mean(const SnapshotDataset& fluct, const MeanField& mean) {
    require(mean.mean_velocity.size() == static_cast<Eigen::Index>(fluct.n_xv()), ErrorKind::invalid_argument,
            "mean field shape does not match dataset");
    SnapshotDataset out = fluct;
    out.snapshot_matrix().colwise() += mean.mean_velocity;
    if (out.concentration && mean.mean_concentration) {
        Eigen::Map<Matrix> c(out.concentration->data(), static_cast<Eigen::Index>(out.n_x()),
                             static_cast<Eigen::Index>(out.n_t()));
        c.colwise() += *mean.mean_concentration;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Train / test split
// ---------------------------------------------------------------------------

inline std::pair<SnapshotDataset, SnapshotDataset> split_train_test(const SnapshotDataset& data, double ratio) {
    require(ratio > 0.0 && ratio < 1.0, ErrorKind::invalid_argument, "split ratio must lie in (0, 1)");
    const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(data.n_t())));
    require(n_train >= 2, ErrorKind::invalid_argument, "training split shorter than 2 snapshots");
    require(n_train < data.n_t(), ErrorKind::invalid_argument, "test split is empty");
    return {data.slice(0, n_train), data.slice(n_train, data.n_t())};
}

// ---------------------------------------------------------------------------
// Synthetic flow generator
// ---------------------------------------------------------------------------

struct SolidBlock {
    std::size_t ix0 = 0, ix1 = 0;  ///< cell range [ix0, ix1)
    std::size_t iz0 = 0, iz1 = 0;
};

struct PlantedComponent {
    std::size_t pattern = 0;
    double frequency = 0.0;
    double amplitude = 1.0;
    double phase = 0.0;
    bool traveling = true;
    /// Phase random walk strength in rad/sqrt(time unit); 0 keeps the tone coherent.
    double phase_diffusion = 0.0;
};

struct SynthConfig {
    std::size_t nx = 16;
    std::size_t nz = 12;
    double dx = 1.0;
    double dz = 1.0;
    double x0 = 0.0;
    double z0 = 0.0;
    std::vector<SolidBlock> solids;
    std::size_t n_t = 1024;
    double dt = 1.0;
    double u_ref = 1.0;
    double h_ref = 1.0;
    double span_length = 1.0;
    double q_c = 0.0;
    /// Mean flow: u = mean_u * (z + 0.5)/nz (linear shear) plus a cellular
    /// recirculation of strength mean_vortex.
    double mean_u = 0.0;
    double mean_vortex = 0.0;
    std::vector<PlantedComponent> components;
    double noise_sigma = 0.0;
    /// 0: noise white in space; R > 0: noise confined to R smooth spatial patterns.
    std::size_t noise_rank = 0;
    bool concentration = false;
    double conc_base = 0.0;
    double conc_gain = 1.0;
};

inline void from_json(const nlohmann::json& j, SolidBlock& s) {
    s.ix0 = j.at("ix0").get<std::size_t>();
    s.ix1 = j.at("ix1").get<std::size_t>();
    s.iz0 = j.at("iz0").get<std::size_t>();
    s.iz1 = j.at("iz1").get<std::size_t>();
}
inline void to_json(nlohmann::json& j, const SolidBlock& s) {
    j = {{"ix0", s.ix0}, {"ix1", s.ix1}, {"iz0", s.iz0}, {"iz1", s.iz1}};
}
inline void from_json(const nlohmann::json& j, PlantedComponent& c) {
    c.pattern = j.value("pattern", std::size_t{0});
    c.frequency = j.at("frequency").get<double>();
    c.amplitude = j.value("amplitude", 1.0);
    c.phase = j.value("phase", 0.0);
    c.traveling = j.value("traveling", true);
    c.phase_diffusion = j.value("phase_diffusion", 0.0);
    require(c.phase_diffusion >= 0.0, ErrorKind::invalid_argument, "phase_diffusion must be >= 0");
}
inline void to_json(nlohmann::json& j, const PlantedComponent& c) {
    j = {{"pattern", c.pattern}, {"frequency", c.frequency}, {"amplitude", c.amplitude},
         {"phase", c.phase}, {"traveling", c.traveling}};
    if (c.phase_diffusion > 0.0) j["phase_diffusion"] = c.phase_diffusion;
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
    SynthConfig d;
    c.nx = j.value("nx", d.nx);
    c.nz = j.value("nz", d.nz);
    c.dx = j.value("dx", d.dx);
    c.dz = j.value("dz", d.dz);
    c.x0 = j.value("x0", d.x0);
    c.z0 = j.value("z0", d.z0);
    c.solids = j.value("solids", std::vector<SolidBlock>{});
    c.n_t = j.value("n_t", d.n_t);
    c.dt = j.value("dt", d.dt);
    c.u_ref = j.value("u_ref", d.u_ref);
    c.h_ref = j.value("h_ref", d.h_ref);
    c.span_length = j.value("span_length", d.span_length);
    c.q_c = j.value("q_c", d.q_c);
    c.mean_u = j.value("mean_u", d.mean_u);
    c.mean_vortex = j.value("mean_vortex", d.mean_vortex);
    c.components = j.value("components", std::vector<PlantedComponent>{});
    c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    c.noise_rank = j.value("noise_rank", d.noise_rank);
    c.concentration = j.value("concentration", d.concentration);
    c.conc_base = j.value("conc_base", d.conc_base);
    c.conc_gain = j.value("conc_gain", d.conc_gain);
}

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"nx", c.nx}, {"nz", c.nz}, {"dx", c.dx}, {"dz", c.dz}, {"x0", c.x0}, {"z0", c.z0},
         {"solids", c.solids}, {"n_t", c.n_t}, {"dt", c.dt}, {"u_ref", c.u_ref}, {"h_ref", c.h_ref},
         {"span_length", c.span_length}, {"q_c", c.q_c}, {"mean_u", c.mean_u}, {"mean_vortex", c.mean_vortex},
         {"components", c.components}, {"noise_sigma", c.noise_sigma}, {"noise_rank", c.noise_rank},
         {"concentration", c.concentration}, {"conc_base", c.conc_base}, {"conc_gain", c.conc_gain}};
}

inline GridGeometry synth_geometry(const SynthConfig& cfg) {
    GridGeometry g = GridGeometry::uniform(cfg.nx, cfg.nz, cfg.dx, cfg.dz);
    g.x0 = cfg.x0;
    g.z0 = cfg.z0;
    for (const auto& s : cfg.solids) {
        require(s.ix0 <= s.ix1 && s.ix1 <= cfg.nx && s.iz0 <= s.iz1 && s.iz1 <= cfg.nz,
                ErrorKind::invalid_argument, "solid block outside the grid");
        for (std::size_t iz = s.iz0; iz < s.iz1; ++iz)
            for (std::size_t ix = s.ix0; ix < s.ix1; ++ix) g.mask[g.cell(ix, iz)] = 0;
    }
    g.validate();
    return g;
}

/// Complex spatial pattern number `index` over [u cells..., w cells...],
/// masked and scaled to unit RMS over fluid entries. Pattern j carries
/// streamwise wavenumber j+1 so distinct indices are close to orthogonal.
inline CVector planted_pattern(const GridGeometry& g, std::size_t index, std::size_t n_v = 2) {
    constexpr double pi = 3.14159265358979323846;
    const auto n = static_cast<Eigen::Index>(g.n_cells());
    CVector p = CVector::Zero(n * static_cast<Eigen::Index>(n_v));
    const double m = static_cast<double>(index + 1);
    const double ell = static_cast<double>(index % 2 + 1);
    for (std::size_t iz = 0; iz < g.nz; ++iz)
        for (std::size_t ix = 0; ix < g.nx; ++ix) {
            const auto c = g.cell(ix, iz);
            if (!g.fluid(c)) continue;
            const double zeta = pi * ell * (static_cast<double>(iz) + 0.5) / static_cast<double>(g.nz);
            const Complex wave = std::polar(1.0, 2.0 * pi * m * (static_cast<double>(ix) + 0.5) / static_cast<double>(g.nx));
            p(static_cast<Eigen::Index>(c)) = std::sin(zeta) * wave;
            if (n_v > 1) p(n + static_cast<Eigen::Index>(c)) = Complex(0.0, 1.0) * std::cos(zeta) * wave;
        }
    const double rms = std::sqrt(p.squaredNorm() / static_cast<double>(g.n_fluid() * n_v));
    require(rms > 0, ErrorKind::invalid_argument, "planted pattern vanishes on the fluid region");
    return p / rms;
}

/// Real field contribution of a planted component at time t; `drift` is the
/// accumulated random phase.
inline Vector planted_field(const CVector& pattern, const PlantedComponent& c, double t, double drift = 0.0) {
    constexpr double pi = 3.14159265358979323846;
    const double arg = 2.0 * pi * c.frequency * t + c.phase + drift;
    if (c.traveling) return c.amplitude * (pattern * std::polar(1.0, arg)).real();
    return c.amplitude * pattern.real() * std::cos(arg);
}

/// Noise level giving the requested signal-to-noise ratio (dB) against the
/// planted components, using the unit-RMS pattern normalization.
inline double noise_sigma_for_snr(const std::vector<PlantedComponent>& comps, double snr_db) {
    double power = 0.0;
    for (const auto& c : comps) power += 0.5 * c.amplitude * c.amplitude;
    return std::sqrt(power / std::pow(10.0, snr_db / 10.0));
}

inline SnapshotDataset synthesize_flow(const SynthConfig& cfg, std::uint64_t seed) {
    constexpr double pi = 3.14159265358979323846;
    require(cfg.n_t >= 1, ErrorKind::invalid_argument, "n_t must be >= 1");
    require(cfg.dt > 0, ErrorKind::invalid_argument, "dt must be positive");
    require(cfg.noise_sigma >= 0, ErrorKind::invalid_argument, "noise_sigma must be >= 0");
    const double nyquist = 1.0 / (2.0 * cfg.dt);
    for (const auto& c : cfg.components)
        require(c.frequency >= 0 && c.frequency <= nyquist, ErrorKind::invalid_argument,
                "planted frequency above Nyquist 1/(2 dt)");

    SnapshotDataset d;
    d.geometry = synth_geometry(cfg);
    d.meta.dt = cfg.dt;
    d.meta.u_ref = cfg.u_ref;
    d.meta.h_ref = cfg.h_ref;
    d.meta.span_length = cfg.span_length;
    d.meta.q_c = cfg.q_c;
    d.meta.c_ref = cfg.q_c > 0 ? DatasetMeta::reference_concentration(cfg.q_c, cfg.u_ref, cfg.h_ref, cfg.span_length) : 1.0;
    d.meta.n_v = 2;
    d.times = SnapshotDataset::uniform_times(cfg.n_t, cfg.dt);
    const auto& g = d.geometry;
    const auto n_x = g.n_cells();
    const auto n_xv = static_cast<Eigen::Index>(2 * n_x);
    d.velocity.assign(cfg.n_t * 2 * n_x, 0.0);

    Vector mean = Vector::Zero(n_xv);
    for (std::size_t iz = 0; iz < g.nz; ++iz)
        for (std::size_t ix = 0; ix < g.nx; ++ix) {
            const auto c = g.cell(ix, iz);
            if (!g.fluid(c)) continue;
            const double zf = (static_cast<double>(iz) + 0.5) / static_cast<double>(g.nz);
            const double xf = (static_cast<double>(ix) + 0.5) / static_cast<double>(g.nx);
            mean(static_cast<Eigen::Index>(c)) = cfg.mean_u * zf + cfg.mean_vortex * std::sin(pi * xf) * std::cos(pi * zf);
            mean(static_cast<Eigen::Index>(n_x + c)) = -cfg.mean_vortex * std::cos(pi * xf) * std::sin(pi * zf);
        }

    std::vector<CVector> patterns;
    for (const auto& c : cfg.components) patterns.push_back(planted_pattern(g, c.pattern, 2));

    Rng rng(derive_seed(seed, "synth-noise"));
    std::vector<Vector> noise_modes;
    if (cfg.noise_rank > 0) {
        // Smooth random real patterns: low-order sine products with random weights.
        for (std::size_t r = 0; r < cfg.noise_rank; ++r) {
            Vector m = Vector::Zero(n_xv);
            for (int term = 0; term < 4; ++term) {
                const double kx = static_cast<double>(rng.uniform_int(1, 3));
                const double kz = static_cast<double>(rng.uniform_int(1, 3));
                const double ph = rng.uniform(0.0, 2.0 * pi);
                const double wu = rng.normal();
                const double ww = rng.normal();
                for (std::size_t iz = 0; iz < g.nz; ++iz)
                    for (std::size_t ix = 0; ix < g.nx; ++ix) {
                        const auto c = g.cell(ix, iz);
                        if (!g.fluid(c)) continue;
                        const double s = std::sin(pi * kx * (static_cast<double>(ix) + 0.5) / static_cast<double>(g.nx) + ph) *
                                         std::sin(pi * kz * (static_cast<double>(iz) + 0.5) / static_cast<double>(g.nz));
                        m(static_cast<Eigen::Index>(c)) += wu * s;
                        m(static_cast<Eigen::Index>(n_x + c)) += ww * s;
                    }
            }
            const double rms = std::sqrt(m.squaredNorm() / static_cast<double>(2 * g.n_fluid()));
            noise_modes.push_back(rms > 0 ? Vector(m / rms) : m);
        }
    }

    // Separate stream so coherent configs reproduce the same noise draws.
    Rng phase_rng(derive_seed(seed, "synth-phase"));
    std::vector<double> drift(cfg.components.size(), 0.0);

    auto frames = d.snapshot_matrix();
    for (std::size_t t = 0; t < cfg.n_t; ++t) {
        Vector q = mean;
        for (std::size_t j = 0; j < cfg.components.size(); ++j) {
            const auto& c = cfg.components[j];
            if (t > 0 && c.phase_diffusion > 0.0) drift[j] += c.phase_diffusion * std::sqrt(cfg.dt) * phase_rng.normal();
            q += planted_field(patterns[j], c, d.times[t], drift[j]);
        }
        if (cfg.noise_sigma > 0) {
            if (cfg.noise_rank == 0) {
                for (Eigen::Index i = 0; i < n_xv; ++i) q(i) += cfg.noise_sigma * rng.normal();
            } else {
                const double s = cfg.noise_sigma / std::sqrt(static_cast<double>(cfg.noise_rank));
                for (const auto& m : noise_modes) q += (s * rng.normal()) * m;
            }
        }
        for (std::size_t c = 0; c < n_x; ++c)
            if (!g.fluid(c)) {
                q(static_cast<Eigen::Index>(c)) = 0.0;
                q(static_cast<Eigen::Index>(n_x + c)) = 0.0;
            }
        frames.col(static_cast<Eigen::Index>(t)) = q;
    }

    if (cfg.concentration) {
        // c = 3x3 box average (zero padded) of max(0, base + gain*|u|), masked.
        d.concentration = std::vector<double>(cfg.n_t * n_x, 0.0);
        std::vector<double> raw(n_x);
        for (std::size_t t = 0; t < cfg.n_t; ++t) {
            for (std::size_t c = 0; c < n_x; ++c)
                raw[c] = g.fluid(c) ? std::max(0.0, cfg.conc_base + cfg.conc_gain * std::abs(d.u(t, 0, c))) : 0.0;
            for (std::size_t iz = 0; iz < g.nz; ++iz)
                for (std::size_t ix = 0; ix < g.nx; ++ix) {
                    const auto c = g.cell(ix, iz);
                    if (!g.fluid(c)) continue;
                    double s = 0.0;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dxo = -1; dxo <= 1; ++dxo) {
                            const auto jz = static_cast<std::ptrdiff_t>(iz) + dz;
                            const auto jx = static_cast<std::ptrdiff_t>(ix) + dxo;
                            if (jz < 0 || jx < 0 || jz >= static_cast<std::ptrdiff_t>(g.nz) ||
                                jx >= static_cast<std::ptrdiff_t>(g.nx))
                                continue;
                            s += raw[g.cell(static_cast<std::size_t>(jx), static_cast<std::size_t>(jz))];
                        }
                    (*d.concentration)[t * n_x + c] = s / 9.0;
                }
        }
    }
    d.validate();
    return d;
}

}  // namespace srom

#endif  // SROM_DATASET_HPP
