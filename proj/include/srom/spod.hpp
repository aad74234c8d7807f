#ifndef SROM_SPOD_HPP
#define SROM_SPOD_HPP

// Welch-blocked spectral POD. Blocks of the fluctuation series are windowed
// and Fourier transformed, realizations are regrouped per frequency, and the
// weighted cross-spectral eigenproblem is solved in its small (method of
// snapshots) form at every retained frequency.

#include "srom/dataset.hpp"

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/FFT>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <thread>

namespace srom {

enum class WindowKind : std::uint8_t { hamming = 0, hann = 1, rectangular = 2 };

inline WindowKind parse_window(const std::string& name) {
    if (name == "hamming") return WindowKind::hamming;
    if (name == "hann") return WindowKind::hann;
    if (name == "rectangular" || name == "boxcar") return WindowKind::rectangular;
    throw Error(ErrorKind::invalid_argument, "unknown window '" + name + "'");
}

inline std::string window_name(WindowKind w) {
    switch (w) {
    case WindowKind::hamming: return "hamming";
    case WindowKind::hann: return "hann";
    case WindowKind::rectangular: return "rectangular";
    }
    return "unknown";
}

/// Symmetric window of length n.
inline Vector make_window(std::size_t n, WindowKind kind) {
    constexpr double pi = 3.14159265358979323846;
    Vector w(static_cast<Eigen::Index>(n));
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (std::size_t j = 0; j < n; ++j) {
        const double c = std::cos(2.0 * pi * static_cast<double>(j) / denom);
        switch (kind) {
        case WindowKind::hamming: w(static_cast<Eigen::Index>(j)) = 0.54 - 0.46 * c; break;
        case WindowKind::hann: w(static_cast<Eigen::Index>(j)) = 0.5 - 0.5 * c; break;
        case WindowKind::rectangular: w(static_cast<Eigen::Index>(j)) = 1.0; break;
        }
    }
    return w;
}

struct SpodParams {
    std::size_t n_fft = 256;
    std::size_t n_ovlp = 128;
    WindowKind window = WindowKind::hamming;

    void validate() const {
        require(n_fft >= 2, ErrorKind::invalid_argument, "n_fft must be >= 2");
        require(n_ovlp < n_fft, ErrorKind::invalid_argument, "n_ovlp must be < n_fft");
    }
};

struct BlockPlan {
    std::size_t n_blk = 0;
    std::vector<std::size_t> starts;
};

inline BlockPlan plan_blocks(std::size_t n_t, std::size_t n_fft, std::size_t n_ovlp) {
    require(n_fft >= 2 && n_ovlp < n_fft, ErrorKind::invalid_argument, "need n_fft >= 2 and 0 <= n_ovlp < n_fft");
    require(n_t >= n_fft, ErrorKind::insufficient_data,
            "time series of " + std::to_string(n_t) + " snapshots is shorter than n_fft = " + std::to_string(n_fft));
    BlockPlan plan;
    const std::size_t hop = n_fft - n_ovlp;
    plan.n_blk = (n_t - n_ovlp) / hop;
    plan.starts.resize(plan.n_blk);
    for (std::size_t i = 0; i < plan.n_blk; ++i) plan.starts[i] = i * hop;
    return plan;
}

struct FrequencyGrid {
    std::size_t n_fc = 0;
    std::vector<double> freqs;
    double df = 0.0;
    std::size_t n_fft = 0;

    /// f H / U_ref
    static double reduced(double f, double h_ref, double u_ref) { return f * h_ref / u_ref; }

    /// Multiplicity of bin k in a two-sided sum: strictly positive
    /// frequencies below Nyquist stand for themselves and their conjugate.
    double fold_weight(std::size_t k) const {
        if (k == 0) return 1.0;
        if (n_fft % 2 == 0 && k == n_fft / 2) return 1.0;
        return 2.0;
    }
    bool is_self_conjugate(std::size_t k) const { return fold_weight(k) == 1.0; }
};

/// Non-negative resolved frequencies k / (n_fft dt). For even n_fft the
/// Nyquist bin is included and reported positive.
inline FrequencyGrid resolved_frequencies(std::size_t n_fft, double dt) {
    require(n_fft >= 2, ErrorKind::invalid_argument, "n_fft must be >= 2");
    require(dt > 0 && std::isfinite(dt), ErrorKind::invalid_argument, "dt must be positive");
    FrequencyGrid g;
    g.n_fft = n_fft;
    g.n_fc = n_fft % 2 == 0 ? n_fft / 2 + 1 : (n_fft + 1) / 2;
    g.df = 1.0 / (static_cast<double>(n_fft) * dt);
    g.freqs.resize(g.n_fc);
    for (std::size_t k = 0; k < g.n_fc; ++k) g.freqs[k] = static_cast<double>(k) * g.df;
    return g;
}

/// Windowed, density-scaled DFT of one block [N_xv x n_fft] along time.
/// Returns bins 0..n_fc-1 as columns of an [N_xv x n_fc] matrix.
template <typename Derived>
CMatrix block_dft(const Eigen::MatrixBase<Derived>& block, const Vector& window, double dt, std::size_t n_fc) {
    const auto rows = block.rows();
    const auto n = block.cols();
    require(window.size() == n, ErrorKind::internal, "window length does not match block length");
    const double scale = std::sqrt(dt / window.squaredNorm());
    Eigen::FFT<double> fft;
    std::vector<Complex> in(static_cast<std::size_t>(n)), out;
    CMatrix result(rows, static_cast<Eigen::Index>(n_fc));
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index j = 0; j < n; ++j) in[static_cast<std::size_t>(j)] = Complex(block(r, j)) * window(j);
        fft.fwd(out, in);
        for (std::size_t k = 0; k < n_fc; ++k) result(r, static_cast<Eigen::Index>(k)) = scale * out[k];
    }
    return result;
}

/// Per-frequency realization matrices Q_hat_{f_k} [N_xv x n_blk].
struct FourierEnsemble {
    std::vector<CMatrix> per_frequency;
};

inline FourierEnsemble windowed_block_dft(const SnapshotDataset& fluct, const BlockPlan& plan, const SpodParams& params) {
    params.validate();
    const auto grid = resolved_frequencies(params.n_fft, fluct.meta.dt);
    const Vector window = make_window(params.n_fft, params.window);
    const auto q = fluct.snapshot_matrix();
    FourierEnsemble ens;
    ens.per_frequency.assign(grid.n_fc, CMatrix(q.rows(), static_cast<Eigen::Index>(plan.n_blk)));
    for (std::size_t i = 0; i < plan.n_blk; ++i) {
        require(plan.starts[i] + params.n_fft <= fluct.n_t(), ErrorKind::internal, "block plan exceeds data range");
        const CMatrix bins = block_dft(q.middleCols(static_cast<Eigen::Index>(plan.starts[i]),
                                                    static_cast<Eigen::Index>(params.n_fft)),
                                       window, fluct.meta.dt, grid.n_fc);
        for (std::size_t k = 0; k < grid.n_fc; ++k)
            ens.per_frequency[k].col(static_cast<Eigen::Index>(i)) = bins.col(static_cast<Eigen::Index>(k));
    }
    return ens;
}

struct FrequencySpod {
    CMatrix modes;                   ///< [N_xv x n_blk]
    Vector eigenvalues;              ///< descending
    std::vector<std::uint8_t> rank_deficient;
    bool degenerate_single_block = false;
};

inline constexpr double kRankTolerance = 1e-12;

/// Weighted inner product <a, b>_W = a^* W b.
template <typename A, typename B>
Complex weighted_dot(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, const Vector& w) {
    return (a.adjoint() * w.asDiagonal() * b)(0, 0);
}

/// Hermitian eigenpairs sorted by descending eigenvalue; equal eigenvalues
/// keep the solver's column order.
inline std::pair<Vector, CMatrix> sorted_hermitian_eigen(const CMatrix& m) {
    Eigen::SelfAdjointEigenSolver<CMatrix> es(m);
    require(es.info() == Eigen::Success, ErrorKind::numeric, "Hermitian eigensolver failed");
    const auto n = m.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = n - 1 - i;
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        return es.eigenvalues()(a) > es.eigenvalues()(b);
    });
    Vector vals(n);
    CMatrix vecs(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        vals(i) = es.eigenvalues()(order[static_cast<std::size_t>(i)]);
        vecs.col(i) = es.eigenvectors().col(order[static_cast<std::size_t>(i)]);
    }
    return {vals, vecs};
}

/// Method-of-snapshots SPOD at one frequency.
inline FrequencySpod spod_at_frequency(const CMatrix& qhat, const Vector& weights) {
    const auto n_blk = qhat.cols();
    require(n_blk >= 1, ErrorKind::invalid_argument, "need at least one block");
    require(weights.size() == qhat.rows(), ErrorKind::invalid_argument, "weight length does not match N_xv");
    require(qhat.allFinite(), ErrorKind::invalid_data, "non-finite Fourier realizations");
    FrequencySpod out;
    out.degenerate_single_block = (n_blk == 1);
    const double norm = n_blk > 1 ? 1.0 / static_cast<double>(n_blk - 1) : 1.0;
    CMatrix m = norm * (qhat.adjoint() * weights.asDiagonal() * qhat);
    m = 0.5 * (m + m.adjoint()).eval();
    auto [vals, psi] = sorted_hermitian_eigen(m);
    const double lmax = vals.size() > 0 ? std::max(vals(0), 0.0) : 0.0;
    out.eigenvalues = vals;
    out.rank_deficient.assign(static_cast<std::size_t>(n_blk), 0);
    out.modes = CMatrix::Zero(qhat.rows(), n_blk);
    for (Eigen::Index j = 0; j < n_blk; ++j) {
        if (lmax <= 0.0 || vals(j) <= kRankTolerance * lmax) {
            out.rank_deficient[static_cast<std::size_t>(j)] = 1;
            out.eigenvalues(j) = std::max(vals(j), 0.0);
            continue;
        }
        out.modes.col(j) = qhat * psi.col(j) * (std::sqrt(norm) / std::sqrt(vals(j)));
    }
    return out;
}

/// Dense eigendecomposition of the weighted CSD, test-scale only. Returns all
/// N_xv eigenpairs, descending, with modes W-orthonormal.
inline FrequencySpod csd_direct_oracle(const CMatrix& qhat, const Vector& weights, std::size_t max_entries = 512) {
    const auto n = qhat.rows();
    require(static_cast<std::size_t>(n) <= max_entries, ErrorKind::invalid_argument,
            "csd_direct_oracle refuses N_xv > " + std::to_string(max_entries));
    require(weights.size() == n, ErrorKind::invalid_argument, "weight length does not match N_xv");
    const auto n_blk = qhat.cols();
    const double norm = n_blk > 1 ? 1.0 / static_cast<double>(n_blk - 1) : 1.0;
    const CMatrix s = norm * (qhat * qhat.adjoint());
    const Vector sw = weights.cwiseSqrt();
    CMatrix h = sw.asDiagonal() * s * sw.asDiagonal();
    h = 0.5 * (h + h.adjoint()).eval();
    auto [vals, vecs] = sorted_hermitian_eigen(h);
    FrequencySpod out;
    out.eigenvalues = vals;
    out.modes = CMatrix::Zero(n, n);
    out.rank_deficient.assign(static_cast<std::size_t>(n), 0);
    const double lmax = std::max(vals(0), 0.0);
    for (Eigen::Index j = 0; j < n; ++j) {
        if (lmax <= 0.0 || vals(j) <= kRankTolerance * lmax) {
            out.rank_deficient[static_cast<std::size_t>(j)] = 1;
            continue;
        }
        // S W phi = lambda phi holds for phi = S W^{1/2} v / lambda, even
        // where W vanishes.
        out.modes.col(j) = s * (sw.asDiagonal() * vecs.col(j)) / vals(j);
    }
    return out;
}

struct SpodBasis {
    SpodParams params;
    FrequencyGrid grid;
    double dt = 1.0;
    Vector weights;
    std::size_t n_blk = 0;
    std::vector<CMatrix> modes;
    std::vector<Vector> eigenvalues;
    std::vector<std::vector<std::uint8_t>> rank_deficient;
    std::vector<std::string> warnings;

    std::size_t n_fc() const { return grid.n_fc; }
    std::size_t n_xv() const { return static_cast<std::size_t>(weights.size()); }

    auto mode(std::size_t k, std::size_t n) const { return modes[k].col(static_cast<Eigen::Index>(n)); }
    double eigenvalue(std::size_t k, std::size_t n) const { return eigenvalues[k](static_cast<Eigen::Index>(n)); }
    bool deficient(std::size_t k, std::size_t n) const { return rank_deficient[k][n] != 0; }

    double total_energy() const {
        double s = 0.0;
        for (const auto& l : eigenvalues) s += l.sum();
        return s;
    }

    /// Two-sided integral sum_k sum_n lambda df (conjugate bins folded in).
    double integrated_energy() const {
        double s = 0.0;
        for (std::size_t k = 0; k < n_fc(); ++k) s += grid.fold_weight(k) * eigenvalues[k].sum();
        return s * grid.df;
    }

    /// Identifier written into coefficient files.
    std::uint64_t fingerprint() const {
        std::uint64_t h = fnv1a("SPOB");
        const std::uint64_t dims[4] = {n_fc(), n_blk, n_xv(), params.n_fft};
        h = fnv1a(dims, sizeof dims, h);
        for (const auto& l : eigenvalues) h = fnv1a(l.data(), static_cast<std::size_t>(l.size()) * 8, h);
        return h;
    }
};

/// Full SPOD of a mean-subtracted dataset. Per-frequency eigenproblems run on
/// up to `threads` workers; results are stored by frequency index so the
/// output does not depend on scheduling.
inline SpodBasis compute_spod(const SnapshotDataset& fluct, const SpodParams& params, std::size_t threads = 1) {
    params.validate();
    const auto plan = plan_blocks(fluct.n_t(), params.n_fft, params.n_ovlp);
    SpodBasis basis;
    basis.params = params;
    basis.dt = fluct.meta.dt;
    basis.grid = resolved_frequencies(params.n_fft, fluct.meta.dt);
    basis.weights = fluct.weights();
    basis.n_blk = plan.n_blk;
    const auto ens = windowed_block_dft(fluct, plan, params);
    const auto n_fc = basis.grid.n_fc;
    std::vector<FrequencySpod> results(n_fc);
    auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t k = first; k < n_fc; k += stride) results[k] = spod_at_frequency(ens.per_frequency[k], basis.weights);
    };
    threads = std::max<std::size_t>(1, std::min(threads, n_fc));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
        for (auto& th : pool) th.join();
    }
    for (auto& r : results) {
        basis.modes.push_back(std::move(r.modes));
        basis.eigenvalues.push_back(std::move(r.eigenvalues));
        basis.rank_deficient.push_back(std::move(r.rank_deficient));
    }
    if (plan.n_blk == 1) {
        basis.warnings.push_back("single block: CSD normalized by 1 instead of 1/(n_blk-1)");
        warn(basis.warnings.back());
    }
    return basis;
}

struct ConfidenceInterval {
    double lo = 0.0;
    double hi = 0.0;
};

/// Chi-squared interval for a spectral estimate with 2 n_blk degrees of freedom.
inline ConfidenceInterval eigenvalue_confidence(double lambda, std::size_t n_blk, double level) {
    require(level > 0.0 && level < 1.0, ErrorKind::invalid_argument, "confidence level must lie in (0, 1)");
    require(n_blk >= 2, ErrorKind::invalid_argument, "confidence intervals need n_blk >= 2");
    const double nu = 2.0 * static_cast<double>(n_blk);
    const boost::math::chi_squared dist(nu);
    const double q_hi = boost::math::quantile(dist, 0.5 * (1.0 + level));
    const double q_lo = boost::math::quantile(dist, 0.5 * (1.0 - level));
    return {lambda * nu / q_hi, lambda * nu / q_lo};
}

/// Spatially averaged turbulent kinetic energy of a fluctuation dataset,
/// (1/|Omega|) * integral of 0.5 * sum_v <q_v'^2>.
inline double mean_tke(const SnapshotDataset& fluct) {
    const Vector w = fluct.weights();
    const double area = fluct.geometry.n_fluid() * fluct.geometry.dx * fluct.geometry.dz;
    const auto q = fluct.snapshot_matrix();
    const Vector var = q.rowwise().squaredNorm() / static_cast<double>(fluct.n_t());
    return 0.5 * w.dot(var) / area;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kSpobVersion = 1;

inline void write_basis(const SpodBasis& b, const std::string& path) {
    io::Writer w(path);
    w.magic("SPOB");
    w.u32(kSpobVersion);
    w.u32(static_cast<std::uint32_t>(b.n_fc()));
    w.u32(static_cast<std::uint32_t>(b.n_blk));
    w.u32(static_cast<std::uint32_t>(b.n_xv()));
    w.u32(static_cast<std::uint32_t>(b.params.n_fft));
    w.u32(static_cast<std::uint32_t>(b.params.n_ovlp));
    w.u8(static_cast<std::uint8_t>(b.params.window));
    w.f64(b.dt);
    w.f64s(b.weights.data(), b.n_xv());
    for (std::size_t k = 0; k < b.n_fc(); ++k) w.f64s(b.eigenvalues[k].data(), b.n_blk);
    for (std::size_t k = 0; k < b.n_fc(); ++k) w.bytes(b.rank_deficient[k].data(), b.n_blk);
    // std::complex<double> is layout-compatible with double[2] (re, im).
    for (std::size_t k = 0; k < b.n_fc(); ++k)
        w.f64s(reinterpret_cast<const double*>(b.modes[k].data()), 2 * b.n_xv() * b.n_blk);
    w.close();
}

inline SpodBasis load_basis(const std::string& path) {
    io::Reader r(path);
    r.expect_magic("SPOB");
    require(r.u32() == kSpobVersion, ErrorKind::format, "unsupported SPOB version");
    SpodBasis b;
    const std::size_t n_fc = r.u32();
    b.n_blk = r.u32();
    const std::size_t n_xv = r.u32();
    b.params.n_fft = r.u32();
    b.params.n_ovlp = r.u32();
    const auto wk = r.u8();
    require(wk <= 2, ErrorKind::corrupt_file, "unknown window code");
    b.params.window = static_cast<WindowKind>(wk);
    b.dt = r.f64();
    require(b.dt > 0 && b.params.n_fft >= 2 && b.params.n_ovlp < b.params.n_fft, ErrorKind::corrupt_file,
            "invalid SPOD parameters in basis header");
    b.grid = resolved_frequencies(b.params.n_fft, b.dt);
    require(b.grid.n_fc == n_fc, ErrorKind::corrupt_file, "n_fc inconsistent with n_fft");
    const std::uint64_t expected = 8ull * n_xv + n_fc * b.n_blk * (8ull + 1ull + 16ull * n_xv);
    require(r.remaining() == expected, ErrorKind::corrupt_file, "basis payload size mismatch");
    b.weights.resize(static_cast<Eigen::Index>(n_xv));
    r.f64s(b.weights.data(), n_xv);
    b.eigenvalues.assign(n_fc, Vector(static_cast<Eigen::Index>(b.n_blk)));
    for (auto& l : b.eigenvalues) r.f64s(l.data(), b.n_blk);
    b.rank_deficient.assign(n_fc, std::vector<std::uint8_t>(b.n_blk));
    for (auto& d : b.rank_deficient) r.bytes(d.data(), b.n_blk);
    b.modes.assign(n_fc, CMatrix(static_cast<Eigen::Index>(n_xv), static_cast<Eigen::Index>(b.n_blk)));
    for (auto& m : b.modes) r.f64s(reinterpret_cast<double*>(m.data()), 2 * n_xv * b.n_blk);
    return b;
}

/// Spectrum table: freq, reduced_freq, lambda_1..lambda_nblk, ci_lo_1, ci_hi_1.
inline void write_spectrum_csv(const SpodBasis& b, const std::string& path, double h_ref, double u_ref,
                               double level = 0.95) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot open '" + path + "'");
    out << "freq,reduced_freq";
    for (std::size_t n = 0; n < b.n_blk; ++n) out << ",lambda_" << n + 1;
    out << ",ci_lo_1,ci_hi_1\n";
    out << std::setprecision(17);
    for (std::size_t k = 0; k < b.n_fc(); ++k) {
        const double f = b.grid.freqs[k];
        out << f << ',' << FrequencyGrid::reduced(f, h_ref, u_ref);
        for (std::size_t n = 0; n < b.n_blk; ++n) out << ',' << b.eigenvalue(k, n);
        if (b.n_blk >= 2) {
            const auto ci = eigenvalue_confidence(b.eigenvalue(k, 0), b.n_blk, level);
            out << ',' << ci.lo << ',' << ci.hi;
        } else {
            out << ",nan,nan";
        }
        out << '\n';
    }
    require(static_cast<bool>(out), ErrorKind::io, "write failed on '" + path + "'");
}

}  // namespace srom

#endif  // SROM_SPOD_HPP
