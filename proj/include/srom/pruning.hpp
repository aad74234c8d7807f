#ifndef SROM_PRUNING_HPP
#define SROM_PRUNING_HPP

#include "srom/projection.hpp"

#include <json.hpp>

#include <optional>

namespace srom {

struct SeparationRank {
    std::uint32_t k = 0;
    double delta = 0.0;  ///< |lambda_1 - lambda_2|
};

/// Frequencies by descending leading-eigenvalue gap; ties by ascending index.
inline std::vector<SeparationRank> frequency_rank_by_separation(const SpodBasis& basis) {
    require(basis.n_blk >= 2, ErrorKind::invalid_argument, "eigenvalue separation needs at least two blocks");
    std::vector<SeparationRank> out;
    for (std::size_t k = 0; k < basis.n_fc(); ++k)
        out.push_back({static_cast<std::uint32_t>(k), std::abs(basis.eigenvalue(k, 0) - basis.eigenvalue(k, 1))});
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.delta > b.delta; });
    return out;
}

/// Cumulative information content along the separation ranking; entry n-1 is
/// RIC(n).  The total is accumulated in the same order, so the last entry is 1.
inline std::vector<double> ric_curve(const SpodBasis& basis, const std::vector<SeparationRank>& order) {
    std::vector<double> partial;
    double s = 0.0;
    for (const auto& r : order) {
        s += basis.eigenvalues[r.k].sum();
        partial.push_back(s);
    }
    require(s > 0.0, ErrorKind::undefined_metric, "RIC is undefined for a zero-energy spectrum");
    for (auto& p : partial) p /= s;
    return partial;
}

inline double ric(const SpodBasis& basis, std::size_t n) {
    require(n >= 1 && n <= basis.n_fc(), ErrorKind::invalid_argument, "RIC index out of range");
    return ric_curve(basis, frequency_rank_by_separation(basis))[n - 1];
}

/// Top-n ranked frequencies for the smallest n with RIC(n) >= eps_ric.
inline std::vector<std::uint32_t> select_frequencies(const SpodBasis& basis, double eps_ric) {
    require(eps_ric > 0.0 && eps_ric <= 1.0, ErrorKind::invalid_argument, "eps_ric must lie in (0, 1]");
    const auto order = frequency_rank_by_separation(basis);
    std::size_t n = order.size();
    if (eps_ric < 1.0) {
        const auto curve = ric_curve(basis, order);
        n = static_cast<std::size_t>(std::find_if(curve.begin(), curve.end(), [&](double r) { return r >= eps_ric; }) -
                                     curve.begin()) + 1;
        n = std::min(n, order.size());
    }
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(order[i].k);
    return out;
}

/// gamma = |<a, b>_W| / (|a|_W |b|_W), clamped to [0, 1]. Stored modes are
/// W-unit only to ~1e-11, so both norms are always divided out.
inline double similarity(const CVector& a, const CVector& b, const Vector& w) {
    require(a.size() == b.size() && a.size() == w.size(), ErrorKind::invalid_argument, "similarity operands differ in size");
    // elementwise sums: swapping a and b conjugates d exactly, so gamma is symmetric to the bit
    double na = 0.0, nb = 0.0;
    Complex d = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        na += w(i) * std::norm(a(i));
        nb += w(i) * std::norm(b(i));
        d += w(i) * (std::conj(a(i)) * b(i));
    }
    require(na > 0.0 && nb > 0.0, ErrorKind::invalid_argument, "similarity of a zero mode");
    return std::clamp(std::abs(d) / std::sqrt(na * nb), 0.0, 1.0);
}

/// Roundoff allowance when comparing gamma to the threshold, so modes that are
/// orthogonal to working precision pass eps_gamma = 0.
inline constexpr double kGammaTolerance = 1e-8;

struct SelectionEntry {
    ModeKey key;
    std::size_t separation_rank = 0;  ///< position of its frequency in the ranking
    double ric_at_inclusion = 0.0;
    std::optional<double> max_gamma;  ///< against modes kept before it; unset when not evaluated
};

struct ModeSelection {
    std::vector<ModeKey> kept;              ///< frequency-major order
    std::vector<std::uint32_t> frequencies; ///< separation-ranked retained frequencies
    std::vector<SelectionEntry> provenance; ///< in greedy order
    double eps_ric = 1.0;
    double eps_gamma = 1.0;
    std::uint64_t source_basis = 0;

    std::size_t n_f() const { return frequencies.size(); }
    std::size_t n_m() const { return kept.size(); }
};

/// Greedy deduplication over every non-deficient rank of the retained
/// frequencies, visited by descending eigenvalue (ties: frequency, then rank).
/// A candidate survives when its similarity to every survivor so far is at
/// most eps_gamma.
inline ModeSelection prune_by_similarity(const SpodBasis& basis, const std::vector<std::uint32_t>& freq_set,
                                         double eps_gamma) {
    require(eps_gamma >= 0.0 && eps_gamma <= 1.0, ErrorKind::invalid_argument, "eps_gamma must lie in [0, 1]");
    ModeSelection sel;
    sel.frequencies = freq_set;
    sel.eps_gamma = eps_gamma;
    sel.source_basis = basis.fingerprint();

    std::vector<std::size_t> rank_of(basis.n_fc(), 0);
    std::vector<double> ric_of(basis.n_fc(), 0.0);
    if (basis.n_blk >= 2) {
        const auto order = frequency_rank_by_separation(basis);
        const double total = basis.total_energy();
        const auto curve = total > 0.0 ? ric_curve(basis, order) : std::vector<double>(order.size(), 0.0);
        for (std::size_t i = 0; i < order.size(); ++i) {
            rank_of[order[i].k] = i;
            ric_of[order[i].k] = curve[i];
        }
    }

    std::vector<ModeKey> cand;
    std::set<std::uint32_t> seen;
    for (auto k : freq_set) {
        require(k < basis.n_fc(), ErrorKind::invalid_argument, "frequency index outside the basis");
        require(seen.insert(k).second, ErrorKind::invalid_argument, "duplicate frequency in selection");
        for (std::uint32_t n = 0; n < basis.n_blk; ++n)
            if (!basis.deficient(k, n)) cand.push_back({k, n});
    }
    std::stable_sort(cand.begin(), cand.end(), [&](const ModeKey& a, const ModeKey& b) {
        const double la = basis.eigenvalue(a.k, a.n), lb = basis.eigenvalue(b.k, b.n);
        if (la != lb) return la > lb;
        return a < b;
    });

    const bool keep_all = eps_gamma >= 1.0;
    const Vector sw = basis.weights.cwiseSqrt();
    CMatrix kept_scaled(static_cast<Eigen::Index>(basis.n_xv()), keep_all ? 0 : static_cast<Eigen::Index>(cand.size()));
    Eigen::Index n_kept = 0;
    for (const auto& key : cand) {
        SelectionEntry e{key, rank_of[key.k], ric_of[key.k], std::nullopt};
        if (!keep_all) {
            CVector b = sw.cwiseProduct(basis.mode(key.k, key.n));
            const double nb = b.norm();
            require(nb > 0.0, ErrorKind::invalid_argument, "similarity of a zero mode");
            if (std::abs(nb - 1.0) > 1e-8) b /= nb;
            double g = 0.0;
            if (n_kept > 0) g = std::min(1.0, (kept_scaled.leftCols(n_kept).adjoint() * b).cwiseAbs().maxCoeff());
            e.max_gamma = g;
            if (g > eps_gamma + kGammaTolerance) continue;
            kept_scaled.col(n_kept++) = b;
        }
        sel.provenance.push_back(e);
        sel.kept.push_back(key);
    }
    std::sort(sel.kept.begin(), sel.kept.end());
    return sel;
}

/// Both stages: RIC truncation, then similarity deduplication.
inline ModeSelection select_modes(const SpodBasis& basis, double eps_ric, double eps_gamma) {
    auto sel = prune_by_similarity(basis, select_frequencies(basis, eps_ric), eps_gamma);
    sel.eps_ric = eps_ric;
    return sel;
}

struct SensitivityRow {
    double eps_gamma = 0.0;
    std::size_t n_m = 0;
    double tke_fraction = 0.0;
    double nmse = 0.0;
};

/// Modes kept, retained energy fraction (conjugate-folded, over all
/// frequencies) and reconstruction NMSE of `fluct` for each threshold.
inline std::vector<SensitivityRow> pruning_sensitivity(const SpodBasis& basis, const std::vector<std::uint32_t>& freq_set,
                                                       const std::vector<double>& grid, const SnapshotDataset& fluct) {
    require(!grid.empty(), ErrorKind::invalid_argument, "empty threshold grid");
    double total = 0.0;
    for (std::size_t k = 0; k < basis.n_fc(); ++k) total += basis.grid.fold_weight(k) * basis.eigenvalues[k].sum();
    require(total > 0.0, ErrorKind::undefined_metric, "energy fraction is undefined for a zero spectrum");
    std::vector<SensitivityRow> rows;
    for (double eps : grid) {
        const auto sel = prune_by_similarity(basis, freq_set, eps);
        double kept = 0.0;
        for (const auto& key : sel.kept) kept += basis.grid.fold_weight(key.k) * basis.eigenvalue(key.k, key.n);
        const auto coeffs = project_coefficients(basis, sel.kept, fluct);
        const auto rec = reconstruct(basis, coeffs, fluct.geometry, fluct.meta);
        rows.push_back({eps, sel.n_m(), kept / total, nmse(fluct.velocity, rec.field.velocity)});
    }
    return rows;
}

inline void write_sensitivity_csv(const std::vector<SensitivityRow>& rows, const std::string& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot open '" + path + "'");
    out << "eps_gamma,n_m,tke_fraction,nmse\n" << std::setprecision(17);
    for (const auto& r : rows) out << r.eps_gamma << ',' << r.n_m << ',' << r.tke_fraction << ',' << r.nmse << '\n';
    require(static_cast<bool>(out), ErrorKind::io, "write failed on '" + path + "'");
}

inline nlohmann::json selection_to_json(const ModeSelection& s) {
    nlohmann::json j;
    j["eps_ric"] = s.eps_ric;
    j["eps_gamma"] = s.eps_gamma;
    j["basis"] = hex64(s.source_basis);
    j["n_f"] = s.n_f();
    j["n_m"] = s.n_m();
    j["frequencies"] = s.frequencies;
    auto& kept = j["kept"] = nlohmann::json::array();
    for (const auto& key : s.kept) kept.push_back({key.k, key.n});
    auto& prov = j["provenance"] = nlohmann::json::array();
    for (const auto& e : s.provenance) {
        nlohmann::json p{{"k", e.key.k}, {"n", e.key.n}, {"separation_rank", e.separation_rank},
                         {"ric", e.ric_at_inclusion}};
        p["max_gamma"] = e.max_gamma ? nlohmann::json(*e.max_gamma) : nlohmann::json(nullptr);
        prov.push_back(p);
    }
    return j;
}

inline ModeSelection selection_from_json(const nlohmann::json& j) {
    ModeSelection s;
    try {
        s.eps_ric = j.at("eps_ric").get<double>();
        s.eps_gamma = j.at("eps_gamma").get<double>();
        s.source_basis = std::stoull(j.at("basis").get<std::string>(), nullptr, 16);
        s.frequencies = j.at("frequencies").get<std::vector<std::uint32_t>>();
        for (const auto& p : j.at("kept")) s.kept.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
        for (const auto& p : j.value("provenance", nlohmann::json::array())) {
            SelectionEntry e;
            e.key = {p.at("k").get<std::uint32_t>(), p.at("n").get<std::uint32_t>()};
            e.separation_rank = p.at("separation_rank").get<std::size_t>();
            e.ric_at_inclusion = p.at("ric").get<double>();
            if (!p.at("max_gamma").is_null()) e.max_gamma = p.at("max_gamma").get<double>();
            s.provenance.push_back(e);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, std::string("malformed selection: ") + e.what());
    } catch (const std::logic_error& e) {
        throw Error(ErrorKind::format, std::string("malformed selection: ") + e.what());
    }
    return s;
}

inline void write_selection(const ModeSelection& s, const std::string& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot open '" + path + "'");
    out << selection_to_json(s).dump(2) << '\n';
    require(static_cast<bool>(out), ErrorKind::io, "write failed on '" + path + "'");
}

inline ModeSelection load_selection(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, std::string("selection is not valid JSON: ") + e.what());
    }
    return selection_from_json(j);
}

}  // namespace srom

#endif  // SROM_PRUNING_HPP
