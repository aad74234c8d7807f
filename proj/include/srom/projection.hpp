#ifndef SROM_PROJECTION_HPP
#define SROM_PROJECTION_HPP

#include "srom/spod.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <limits>
#include <set>

namespace srom {

/// (frequency index, rank) of one SPOD mode.
struct ModeKey {
    std::uint32_t k = 0;
    std::uint32_t n = 0;
    friend bool operator==(const ModeKey& a, const ModeKey& b) { return a.k == b.k && a.n == b.n; }
    friend bool operator<(const ModeKey& a, const ModeKey& b) { return a.k != b.k ? a.k < b.k : a.n < b.n; }
};

/// Every non-deficient mode, frequency-major.
inline std::vector<ModeKey> all_modes(const SpodBasis& basis) {
    std::vector<ModeKey> keys;
    for (std::size_t k = 0; k < basis.n_fc(); ++k)
        for (std::size_t n = 0; n < basis.n_blk; ++n)
            if (!basis.deficient(k, n)) keys.push_back({static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(n)});
    return keys;
}

inline void validate_keys(const SpodBasis& basis, const std::vector<ModeKey>& keys) {
    std::set<ModeKey> seen;
    for (const auto& key : keys) {
        require(key.k < basis.n_fc() && key.n < basis.n_blk, ErrorKind::invalid_argument,
                "mode (" + std::to_string(key.k) + ", " + std::to_string(key.n) + ") is outside the basis");
        require(seen.insert(key).second, ErrorKind::invalid_argument, "duplicate mode in selection");
    }
}

inline CMatrix gather_modes(const SpodBasis& basis, const std::vector<ModeKey>& keys) {
    CMatrix phi(static_cast<Eigen::Index>(basis.n_xv()), static_cast<Eigen::Index>(keys.size()));
    for (std::size_t j = 0; j < keys.size(); ++j) phi.col(static_cast<Eigen::Index>(j)) = basis.mode(keys[j].k, keys[j].n);
    return phi;
}

/// Factorized weighted normal operator of a mode set.  Solves
/// min ||W^(1/2)(Q - Phi A)|| by pivoted LDL^T of Phi* W Phi when it is
/// acceptably conditioned, otherwise by an eigenvalue-truncated pseudo-solve
/// (minimum-norm solution) on the smaller of the two Gram forms.
class GramOperator {
public:
    static constexpr double kMaxCondition = 1e10;
    static constexpr double kCutoff = 1e-10;

    GramOperator() = default;

    GramOperator(const CMatrix& phi, const Vector& weights) {
        require(phi.rows() == weights.size(), ErrorKind::invalid_argument, "mode length does not match weights");
        for (Eigen::Index i = 0; i < weights.size(); ++i)
            if (weights(i) > 0.0) rows_.push_back(i);
        sqrt_w_.resize(static_cast<Eigen::Index>(rows_.size()));
        b_.resize(static_cast<Eigen::Index>(rows_.size()), phi.cols());
        for (std::size_t r = 0; r < rows_.size(); ++r) {
            sqrt_w_(static_cast<Eigen::Index>(r)) = std::sqrt(weights(rows_[r]));
            b_.row(static_cast<Eigen::Index>(r)) = sqrt_w_(static_cast<Eigen::Index>(r)) * phi.row(rows_[r]);
        }
        require(b_.allFinite(), ErrorKind::invalid_data, "non-finite mode entries");
        n_xv_ = phi.rows();
        const auto m = phi.cols();
        if (m == 0) {
            condition_ = 1.0;
            return;
        }
        if (m <= b_.rows()) {
            const CMatrix g = b_.adjoint() * b_;
            ldlt_.compute(g);
            // LDLT::solve silently zeroes tiny pivots, which hides singularity
            // from rcond(); the pivot spread is checked as well.
            const Vector d = ldlt_.vectorD().cwiseAbs();
            const double rc = ldlt_.info() == Eigen::Success ? ldlt_.rcond() : 0.0;
            condition_ = rc > 0.0 && d.minCoeff() > 0.0 ? std::max(1.0 / rc, d.maxCoeff() / d.minCoeff())
                                                        : std::numeric_limits<double>::infinity();
            if (condition_ <= kMaxCondition) return;
            build_pseudo(g, false);
        } else {
            condition_ = std::numeric_limits<double>::infinity();
            build_pseudo(b_ * b_.adjoint(), true);
        }
    }

    /// Coefficients [N_cols x N_t] for data columns q [N_xv x N_t].
    template <typename Derived>
    CMatrix solve(const Eigen::MatrixBase<Derived>& q) const {
        require(q.rows() == n_xv_, ErrorKind::invalid_argument, "data length does not match modes");
        CMatrix y(static_cast<Eigen::Index>(rows_.size()), q.cols());
        for (std::size_t r = 0; r < rows_.size(); ++r)
            y.row(static_cast<Eigen::Index>(r)) = (sqrt_w_(static_cast<Eigen::Index>(r)) * q.row(rows_[r])).template cast<Complex>();
        if (b_.cols() == 0) return CMatrix(0, q.cols());
        if (!fallback_) return ldlt_.solve(b_.adjoint() * y);
        if (wide_) return b_.adjoint() * (pinv_ * y);
        return pinv_ * (b_.adjoint() * y);
    }

    double condition() const { return condition_; }
    bool fallback() const { return fallback_; }
    std::size_t rank() const { return fallback_ ? rank_ : static_cast<std::size_t>(b_.cols()); }

private:
    void build_pseudo(const CMatrix& g, bool wide) {
        fallback_ = true;
        wide_ = wide;
        Eigen::SelfAdjointEigenSolver<CMatrix> es(g);
        require(es.info() == Eigen::Success, ErrorKind::numeric, "Gram eigendecomposition failed");
        const Vector& l = es.eigenvalues();
        const double lmax = l.size() ? l.maxCoeff() : 0.0;
        require(lmax > 0.0 && std::isfinite(lmax), ErrorKind::numeric, "Gram operator is singular with no resolvable part");
        Vector inv = Vector::Zero(l.size());
        rank_ = 0;
        for (Eigen::Index i = 0; i < l.size(); ++i)
            if (l(i) > kCutoff * lmax) {
                inv(i) = 1.0 / l(i);
                ++rank_;
            }
        if (!wide) condition_ = std::max(condition_, lmax / std::max(l.minCoeff(), 0.0));
        pinv_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().adjoint();
    }

    std::vector<Eigen::Index> rows_;
    Vector sqrt_w_;
    CMatrix b_;
    Eigen::Index n_xv_ = 0;
    Eigen::LDLT<CMatrix> ldlt_;
    CMatrix pinv_;
    double condition_ = 1.0;
    bool fallback_ = false;
    bool wide_ = false;
    std::size_t rank_ = 0;
};

struct CoefficientSeries {
    CMatrix values;  ///< [N_m x N_t]
    std::vector<ModeKey> mode_index;
    std::uint64_t source_basis = 0;
    double condition = 1.0;
    bool fallback = false;

    std::size_t n_m() const { return mode_index.size(); }
    std::size_t n_t() const { return static_cast<std::size_t>(values.cols()); }
};

/// Solve for time coefficients of real data.  Strictly positive, non-Nyquist
/// modes are paired with their complex conjugates (the omitted negative
/// frequencies) so that the fitted field is real; only the coefficients of the
/// requested modes are returned.
inline CoefficientSeries project_coefficients(const SpodBasis& basis, const std::vector<ModeKey>& keys,
                                              const SnapshotDataset& fluct) {
    require(fluct.n_xv() == basis.n_xv(), ErrorKind::invalid_argument, "data and basis sizes differ");
    require(fluct.weights() == basis.weights, ErrorKind::invalid_argument, "data and basis use different weights");
    validate_keys(basis, keys);
    const CMatrix phi = gather_modes(basis, keys);
    std::vector<Eigen::Index> paired;
    for (std::size_t j = 0; j < keys.size(); ++j)
        if (!basis.grid.is_self_conjugate(keys[j].k)) paired.push_back(static_cast<Eigen::Index>(j));
    CMatrix aug(phi.rows(), phi.cols() + static_cast<Eigen::Index>(paired.size()));
    aug.leftCols(phi.cols()) = phi;
    for (std::size_t j = 0; j < paired.size(); ++j)
        aug.col(phi.cols() + static_cast<Eigen::Index>(j)) = phi.col(paired[j]).conjugate();
    const GramOperator gram(aug, basis.weights);
    const CMatrix a = gram.solve(fluct.snapshot_matrix());
    require(a.allFinite(), ErrorKind::numeric, "projection produced non-finite coefficients");
    CoefficientSeries out;
    out.values = a.topRows(phi.cols());
    out.mode_index = keys;
    out.source_basis = basis.fingerprint();
    out.condition = gram.condition();
    out.fallback = gram.fallback();
    return out;
}

inline CoefficientSeries project_coefficients(const SpodBasis& basis, const SnapshotDataset& fluct) {
    return project_coefficients(basis, all_modes(basis), fluct);
}

struct Reconstruction {
    SnapshotDataset field;
    double imag_max = 0.0;  ///< largest imaginary magnitude left by self-conjugate bins
    double field_rms = 0.0;
};

/// Real field sum_j c_j Re(phi_j a_j), c_j = 2 for strictly positive
/// non-Nyquist frequencies and 1 otherwise; the mean is added when given.
inline Reconstruction reconstruct(const SpodBasis& basis, const CoefficientSeries& coeffs, const GridGeometry& geometry,
                                  const DatasetMeta& meta, const MeanField* mean = nullptr) {
    require(coeffs.source_basis == basis.fingerprint(), ErrorKind::invalid_argument,
            "coefficients were computed with a different basis");
    require(static_cast<std::size_t>(coeffs.values.rows()) == coeffs.n_m(), ErrorKind::invalid_argument,
            "coefficient rows do not match the mode index");
    validate_keys(basis, coeffs.mode_index);
    require(geometry.n_cells() * meta.n_v == basis.n_xv(), ErrorKind::invalid_argument, "geometry does not match basis");
    CMatrix phi = gather_modes(basis, coeffs.mode_index);
    std::vector<Eigen::Index> self_conj;
    for (std::size_t j = 0; j < coeffs.n_m(); ++j) {
        if (basis.grid.is_self_conjugate(coeffs.mode_index[j].k))
            self_conj.push_back(static_cast<Eigen::Index>(j));
        else
            phi.col(static_cast<Eigen::Index>(j)) *= 2.0;
    }
    const Matrix& ar = coeffs.values.real();
    const Matrix& ai = coeffs.values.imag();
    Reconstruction out;
    out.field.geometry = geometry;
    out.field.meta = meta;
    out.field.times = SnapshotDataset::uniform_times(coeffs.n_t(), meta.dt);
    out.field.velocity.assign(basis.n_xv() * coeffs.n_t(), 0.0);
    auto q = out.field.snapshot_matrix();
    if (coeffs.n_m() > 0) q.noalias() = phi.real() * ar - phi.imag() * ai;
    if (!self_conj.empty()) {
        Matrix im = Matrix::Zero(q.rows(), q.cols());
        for (auto j : self_conj)
            im.noalias() += phi.col(j).real() * ai.row(j) + phi.col(j).imag() * ar.row(j);
        out.imag_max = im.cwiseAbs().maxCoeff();
    }
    out.field_rms = q.size() ? std::sqrt(q.squaredNorm() / static_cast<double>(q.size())) : 0.0;
    if (mean) out.field = add_mean(out.field, *mean);
    return out;
}

struct NmseReport {
    std::vector<double> per_step;
    double overall = 0.0;       ///< sum over all entries
    double mean_per_step = 0.0;
    double nrmse() const { return std::sqrt(overall); }
};

inline double nmse(const double* ref, const double* approx, std::size_t n) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = ref[i] - approx[i];
        num += d * d;
        den += ref[i] * ref[i];
    }
    require(den > 0.0, ErrorKind::undefined_metric, "NMSE is undefined for a zero-energy reference");
    return num / den;
}

inline double nmse(const std::vector<double>& ref, const std::vector<double>& approx) {
    require(ref.size() == approx.size(), ErrorKind::invalid_argument, "NMSE operands differ in size");
    return nmse(ref.data(), approx.data(), ref.size());
}

/// Per-snapshot and aggregate NMSE over frames of `frame` values each.
inline NmseReport nmse_series(const std::vector<double>& ref, const std::vector<double>& approx, std::size_t frame) {
    require(ref.size() == approx.size(), ErrorKind::invalid_argument, "NMSE operands differ in size");
    require(frame > 0 && ref.size() % frame == 0, ErrorKind::invalid_argument, "frame size does not divide data");
    NmseReport r;
    r.overall = nmse(ref, approx);
    const auto steps = ref.size() / frame;
    for (std::size_t t = 0; t < steps; ++t) r.per_step.push_back(nmse(ref.data() + t * frame, approx.data() + t * frame, frame));
    for (double v : r.per_step) r.mean_per_step += v;
    r.mean_per_step /= static_cast<double>(steps);
    return r;
}

// ---------------------------------------------------------------------------
// SCOF coefficient files
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kScofVersion = 1;

inline void write_coefficients(const CoefficientSeries& c, const std::string& path) {
    io::Writer w(path);
    w.magic("SCOF");
    w.u32(kScofVersion);
    w.u64(c.source_basis);
    w.u64(c.n_m());
    w.u64(c.n_t());
    w.u8(c.fallback ? 1 : 0);
    w.f64(c.condition);
    for (const auto& key : c.mode_index) {
        w.u32(key.k);
        w.u32(key.n);
    }
    // row-major time series, interleaved re/im
    const Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = c.values;
    w.f64s(reinterpret_cast<const double*>(rm.data()), 2 * c.n_m() * c.n_t());
    w.close();
}

inline CoefficientSeries load_coefficients(const std::string& path) {
    io::Reader r(path);
    r.expect_magic("SCOF");
    require(r.u32() == kScofVersion, ErrorKind::format, "unsupported SCOF version");
    CoefficientSeries c;
    c.source_basis = r.u64();
    const auto n_m = r.u64();
    const auto n_t = r.u64();
    c.fallback = r.u8() != 0;
    c.condition = r.f64();
    require(r.remaining() == n_m * 8 + n_m * n_t * 16, ErrorKind::corrupt_file, "coefficient payload size mismatch");
    c.mode_index.resize(n_m);
    for (auto& key : c.mode_index) {
        key.k = r.u32();
        key.n = r.u32();
    }
    Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(static_cast<Eigen::Index>(n_m),
                                                                               static_cast<Eigen::Index>(n_t));
    r.f64s(reinterpret_cast<double*>(rm.data()), 2 * n_m * n_t);
    c.values = rm;
    require(c.values.allFinite(), ErrorKind::corrupt_file, "non-finite coefficients");
    return c;
}

}  // namespace srom

#endif  // SROM_PROJECTION_HPP
