#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <set>

#include "srom/autoencoder.hpp"
#include "srom/dataset.hpp"
#include "srom/forecaster.hpp"
#include "srom/projection.hpp"
#include "srom/pruning.hpp"
#include "srom/scalar_map.hpp"
#include "srom/spod.hpp"

namespace srom {

inline constexpr const char* kLibraryVersion = "0.1.0";
inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr const char* kSummarySchema = "srom-summary/1";

// ---------------------------------------------------------------------------
// Master configuration
// ---------------------------------------------------------------------------

struct PruneConfig {
    double eps_ric = 0.99;
    double eps_gamma = 0.5;
};

struct SearchConfig {
    bool enabled = false;
    SearchSpace space;
    std::size_t trials = 20;
    std::size_t epochs = 100;
};

struct ProbeSpec {
    std::string name;
    double x = 0.0, z = 0.0;
};

struct ReportConfig {
    std::vector<ProbeSpec> probes;
    std::optional<double> flux_z;  ///< centre row when absent
    std::size_t pdf_bins = 50;
    std::size_t pdf_dims = 4;      ///< latent dimensions per channel in pdf.csv
    std::size_t poincare_bins = 50;
    std::size_t poincare_plane = 0;
};

struct MasterConfig {
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::optional<SynthConfig> synth;
    double train_ratio = 0.8;
    SpodParams spod;
    PruneConfig prune;
    AeConfig ae;
    bool ae_auto_width = true;  ///< hidden widths follow AeConfig::desk_scale(N_m, N_z)
    LstmConfig lstm;
    std::optional<LstmConfig> lstm_im;  ///< Im channel; defaults to `lstm`
    SearchConfig search;
    CnnConfig cnn;
    bool cnn_enabled = true;    ///< only used when the data carries concentration
    std::size_t horizon = 0;    ///< 0: the whole test split minus the init window
    RolloutMode rollout = RolloutMode::sliding_window;
    ReportConfig report;

    const LstmConfig& lstm_imag() const { return lstm_im ? *lstm_im : lstm; }

    void validate() const {
        require(threads >= 1, ErrorKind::invalid_argument, "threads must be >= 1");
        require(train_ratio > 0.0 && train_ratio < 1.0, ErrorKind::invalid_argument, "train_ratio must lie in (0, 1)");
        spod.validate();
        require(prune.eps_ric > 0.0 && prune.eps_ric <= 1.0, ErrorKind::invalid_argument, "eps_ric must lie in (0, 1]");
        require(prune.eps_gamma >= 0.0 && prune.eps_gamma <= 1.0, ErrorKind::invalid_argument, "eps_gamma must lie in [0, 1]");
        lstm.validate();
        lstm_imag().validate();
        require(lstm.n_t_in == lstm_imag().n_t_in, ErrorKind::invalid_argument, "Re and Im look-back windows must agree");
        if (search.enabled) {
            search.space.validate();
            require(search.trials >= 1 && search.epochs >= 1, ErrorKind::invalid_argument, "search needs trials and epochs");
        }
        require(report.pdf_bins >= 1 && report.poincare_bins >= 1, ErrorKind::invalid_argument, "bin counts must be positive");
    }
};

inline std::string rollout_name(RolloutMode m) { return m == RolloutMode::sliding_window ? "sliding_window" : "carry_state"; }

inline RolloutMode parse_rollout(const std::string& s) {
    if (s == "sliding_window") return RolloutMode::sliding_window;
    if (s == "carry_state") return RolloutMode::carry_state;
    throw Error(ErrorKind::invalid_argument, "unknown rollout mode '" + s + "' (sliding_window | carry_state)");
}

inline void to_json(nlohmann::json& j, const ProbeSpec& p) { j = {{"name", p.name}, {"x", p.x}, {"z", p.z}}; }
inline void from_json(const nlohmann::json& j, ProbeSpec& p) {
    p.name = j.at("name").get<std::string>();
    p.x = j.at("x").get<double>();
    p.z = j.at("z").get<double>();
}

inline void to_json(nlohmann::json& j, const MasterConfig& c) {
    nlohmann::json ae = c.ae;
    ae["auto_width"] = c.ae_auto_width;
    nlohmann::json cnn = c.cnn;
    cnn["enabled"] = c.cnn_enabled;
    nlohmann::json report = {{"probes", c.report.probes}, {"pdf_bins", c.report.pdf_bins}, {"pdf_dims", c.report.pdf_dims},
                             {"poincare_bins", c.report.poincare_bins}, {"poincare_plane", c.report.poincare_plane},
                             {"flux_z", c.report.flux_z ? nlohmann::json(*c.report.flux_z) : nlohmann::json(nullptr)}};
    j = {{"seed", c.seed},
         {"threads", c.threads},
         {"data", {{"train_ratio", c.train_ratio}}},
         {"spod", {{"n_fft", c.spod.n_fft}, {"n_ovlp", c.spod.n_ovlp}, {"window", window_name(c.spod.window)}}},
         {"prune", {{"eps_ric", c.prune.eps_ric}, {"eps_gamma", c.prune.eps_gamma}}},
         {"ae", ae},
         {"lstm", c.lstm},
         {"lstm_im", c.lstm_imag()},
         {"search", {{"enabled", c.search.enabled}, {"space", c.search.space}, {"trials", c.search.trials}, {"epochs", c.search.epochs}}},
         {"cnn", cnn},
         {"online", {{"horizon", c.horizon}, {"rollout", rollout_name(c.rollout)}}},
         {"report", report}};
    if (c.synth) j["synth"] = *c.synth;
}

inline void from_json(const nlohmann::json& j, MasterConfig& c) {
    static const std::set<std::string> known{"seed", "threads", "synth", "data", "spod", "prune", "ae", "lstm",
                                             "lstm_im", "search", "cnn", "online", "report"};
    require(j.is_object(), ErrorKind::invalid_argument, "master config must be a JSON object");
    for (const auto& [k, v] : j.items()) require(known.count(k) > 0, ErrorKind::invalid_argument, "unknown config section '" + k + "'");
    MasterConfig d;
    c = d;
    c.seed = j.value("seed", d.seed);
    c.threads = j.value("threads", d.threads);
    if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
    if (j.contains("data")) c.train_ratio = j.at("data").value("train_ratio", d.train_ratio);
    if (j.contains("spod")) {
        const auto& s = j.at("spod");
        c.spod.n_fft = s.value("n_fft", d.spod.n_fft);
        c.spod.n_ovlp = s.value("n_ovlp", c.spod.n_fft / 2);
        c.spod.window = parse_window(s.value("window", window_name(d.spod.window)));
    }
    if (j.contains("prune")) {
        c.prune.eps_ric = j.at("prune").value("eps_ric", d.prune.eps_ric);
        c.prune.eps_gamma = j.at("prune").value("eps_gamma", d.prune.eps_gamma);
    }
    if (j.contains("ae")) {
        const auto& a = j.at("ae");
        c.ae = a.get<AeConfig>();
        c.ae_auto_width = a.value("auto_width", !a.contains("encoder_hidden"));
    }
    if (j.contains("lstm")) c.lstm = j.at("lstm").get<LstmConfig>();
    if (j.contains("lstm_im")) c.lstm_im = j.at("lstm_im").get<LstmConfig>();
    if (j.contains("search")) {
        const auto& s = j.at("search");
        c.search.enabled = s.value("enabled", true);
        if (s.contains("space")) c.search.space = s.at("space").get<SearchSpace>();
        c.search.trials = s.value("trials", d.search.trials);
        c.search.epochs = s.value("epochs", d.search.epochs);
    }
    if (j.contains("cnn")) {
        c.cnn = j.at("cnn").get<CnnConfig>();
        c.cnn_enabled = j.at("cnn").value("enabled", true);
    }
    if (j.contains("online")) {
        c.horizon = j.at("online").value("horizon", d.horizon);
        c.rollout = parse_rollout(j.at("online").value("rollout", rollout_name(d.rollout)));
    }
    if (j.contains("report")) {
        const auto& r = j.at("report");
        c.report.probes = r.value("probes", std::vector<ProbeSpec>{});
        c.report.pdf_bins = r.value("pdf_bins", d.report.pdf_bins);
        c.report.pdf_dims = r.value("pdf_dims", d.report.pdf_dims);
        c.report.poincare_bins = r.value("poincare_bins", d.report.poincare_bins);
        c.report.poincare_plane = r.value("poincare_plane", d.report.poincare_plane);
        if (r.contains("flux_z") && !r.at("flux_z").is_null()) c.report.flux_z = r.at("flux_z").get<double>();
    }
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, "malformed JSON in '" + path + "': " + e.what());
    }
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + "'");
    f << j.dump(2) << '\n';
    require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + "'");
}

inline MasterConfig load_master_config(const std::string& path) {
    const auto j = read_json_file(path);
    try {
        MasterConfig c = j.get<MasterConfig>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::invalid_argument, "bad master config '" + path + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Stage plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline std::string strip_kind(const std::string& what) {
    const auto p = what.find(": ");
    return p == std::string::npos ? what : what.substr(p + 2);
}

}  // namespace detail

/// Runs `f`, re-raising any failure with the stage name prefixed.
template <class F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
    const std::string tag = "[" + stage + "] ";
    try {
        return f();
    } catch (const Error& e) {
        const auto msg = detail::strip_kind(e.what());
        throw Error(e.kind(), msg.rfind('[', 0) == 0 ? msg : tag + msg);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, tag + e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        throw Error(ErrorKind::io, tag + e.what());
    } catch (const std::bad_alloc&) {
        throw Error(ErrorKind::internal, tag + "out of memory");
    }
}

inline std::uint64_t hash_json(const nlohmann::json& j) { return fnv1a(j.dump()); }

/// Content checksum of a dataset, independent of how it was stored.
inline std::uint64_t dataset_checksum(const SnapshotDataset& d) {
    std::uint64_t h = fnv1a("SROM-data");
    const std::uint64_t dims[4] = {d.geometry.nx, d.geometry.nz, d.meta.n_v, d.n_t()};
    h = fnv1a(dims, sizeof dims, h);
    const double meta[5] = {d.meta.dt, d.meta.u_ref, d.meta.c_ref, d.geometry.dx, d.geometry.dz};
    h = fnv1a(meta, sizeof meta, h);
    h = fnv1a(d.geometry.mask.data(), d.geometry.mask.size(), h);
    h = fnv1a(d.velocity.data(), d.velocity.size() * sizeof(double), h);
    if (d.concentration) h = fnv1a(d.concentration->data(), d.concentration->size() * sizeof(double), h);
    return h;
}

/// Content-addressed store of stage outputs: one directory per
/// (stage, input hash), published by rename once complete.
class ArtifactCache {
public:
    ArtifactCache() = default;
    explicit ArtifactCache(std::string dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

    bool enabled() const { return !dir_.empty(); }
    std::string entry(const std::string& stage, std::uint64_t key) const { return dir_ + "/" + stage + "-" + hex64(key); }
    bool has(const std::string& stage, std::uint64_t key) const { return enabled() && std::filesystem::is_directory(entry(stage, key)); }

    /// Calls write(dir) on a scratch directory, then publishes it.
    void store(const std::string& stage, std::uint64_t key, const std::function<void(const std::string&)>& write) const {
        if (!enabled()) return;
        const auto final_dir = entry(stage, key);
        const auto tmp = final_dir + ".partial";
        std::filesystem::remove_all(tmp);
        std::filesystem::create_directories(tmp);
        write(tmp);
        std::filesystem::remove_all(final_dir);
        std::filesystem::rename(tmp, final_dir);
    }

private:
    std::string dir_;
};

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

struct ModelBundle {
    SpodBasis basis;
    ModeSelection selection;
    MeanField mean;
    GridGeometry geometry;
    DatasetMeta meta;
    ComplexAutoencoder ae;
    ComplexForecaster lstm;
    std::optional<ScalarMapper> cnn;
    nlohmann::json manifest = nlohmann::json::object();

    std::size_t n_m() const { return selection.n_m(); }
    std::size_t n_z() const { return ae.n_z(); }
    std::size_t window() const { return lstm.window(); }

    void validate() const {
        geometry.validate();
        require(basis.n_xv() == geometry.n_cells() * meta.n_v, ErrorKind::invalid_data, "basis size does not match the grid");
        require(selection.source_basis == basis.fingerprint(), ErrorKind::invalid_data, "mode selection belongs to another basis");
        require(n_m() >= 1, ErrorKind::invalid_data, "empty mode selection");
        validate_keys(basis, selection.kept);
        require(ae.n_m() == n_m(), ErrorKind::invalid_data,
                "autoencoder input " + std::to_string(ae.n_m()) + " != N_m " + std::to_string(n_m()));
        require(lstm.n_z() == ae.n_z(), ErrorKind::invalid_data,
                "forecaster width " + std::to_string(lstm.n_z()) + " != N_z " + std::to_string(ae.n_z()));
        require(mean.mean_velocity.size() == static_cast<Eigen::Index>(basis.n_xv()), ErrorKind::invalid_data,
                "mean field size does not match the basis");
        if (cnn) {
            const auto& g = cnn->geometry();
            require(g.nx == geometry.nx && g.nz == geometry.nz && g.mask == geometry.mask, ErrorKind::invalid_data,
                    "scalar mapper grid differs from the bundle grid");
            require(cnn->config().channels.front() == meta.n_v, ErrorKind::invalid_data, "scalar mapper input channels != n_v");
            require(mean.mean_concentration.has_value() &&
                        mean.mean_concentration->size() == static_cast<Eigen::Index>(geometry.n_cells()),
                    ErrorKind::invalid_data, "scalar mapper present without a mean concentration");
        }
    }
};

namespace detail {

inline SnapshotDataset mean_as_dataset(const MeanField& m, const GridGeometry& g, const DatasetMeta& meta) {
    SnapshotDataset d;
    d.geometry = g;
    d.meta = meta;
    d.times = {0.0};
    d.velocity.assign(m.mean_velocity.data(), m.mean_velocity.data() + m.mean_velocity.size());
    if (m.mean_concentration) d.concentration = std::vector<double>(m.mean_concentration->data(), m.mean_concentration->data() + m.mean_concentration->size());
    return d;
}

inline nlohmann::json meta_json(const GridGeometry& g, const DatasetMeta& m) {
    return {{"x0", g.x0}, {"z0", g.z0}, {"dx", g.dx}, {"dz", g.dz}, {"nx", g.nx}, {"nz", g.nz},
            {"dt", m.dt}, {"u_ref", m.u_ref}, {"c_ref", m.c_ref}, {"q_c", m.q_c}, {"span_length", m.span_length},
            {"h_ref", m.h_ref}, {"re_h", m.re_h}, {"n_v", m.n_v}};
}

inline void restore_meta(const nlohmann::json& j, GridGeometry& g, DatasetMeta& m) {
    g.x0 = j.at("x0");
    g.z0 = j.at("z0");
    m.q_c = j.at("q_c");
    m.span_length = j.at("span_length");
    m.h_ref = j.at("h_ref");
    m.re_h = j.at("re_h");
    require(j.at("nx").get<std::size_t>() == g.nx && j.at("nz").get<std::size_t>() == g.nz &&
                j.at("n_v").get<std::size_t>() == m.n_v && j.at("dt").get<double>() == m.dt,
            ErrorKind::corrupt_file, "manifest grid does not match the stored mean field");
}

inline const std::vector<std::string>& bundle_files(bool with_cnn) {
    static const std::vector<std::string> base{"basis.spob", "selection.json", "mean.srom", "ae.snnp", "ae.snnp.json",
                                               "lstm.snnp", "lstm.snnp.json"};
    static const std::vector<std::string> full = [] {
        auto v = base;
        v.insert(v.end(), {"cnn.snnp", "cnn.snnp.json"});
        return v;
    }();
    return with_cnn ? full : base;
}

}  // namespace detail

inline nlohmann::json bundle_dimensions(const ModelBundle& b) {
    return {{"n_x", b.geometry.n_cells()}, {"n_v", b.meta.n_v}, {"n_xv", b.basis.n_xv()},
            {"n_fc", b.basis.n_fc()}, {"n_blk", b.basis.n_blk}, {"n_f", b.selection.n_f()},
            {"n_m", b.n_m()}, {"n_z", b.n_z()}, {"window", b.window()}, {"has_cnn", b.cnn.has_value()}};
}

/// Writes the bundle into `dir` atomically: files go to a sibling scratch
/// directory that replaces `dir` only after every file is complete.
inline void save_bundle(const ModelBundle& b, const std::string& dir) {
    run_stage("bundle", [&] {
        b.validate();
        namespace fs = std::filesystem;
        const fs::path target = fs::path(dir).lexically_normal();
        const fs::path tmp = target.string() + ".partial";
        if (target.has_parent_path()) fs::create_directories(target.parent_path());
        fs::remove_all(tmp);
        fs::create_directories(tmp);
        const auto p = [&](const char* f) { return (tmp / f).string(); };
        write_basis(b.basis, p("basis.spob"));
        write_selection(b.selection, p("selection.json"));
        write_snapshots(detail::mean_as_dataset(b.mean, b.geometry, b.meta), p("mean.srom"));
        b.ae.save(p("ae.snnp"));
        b.lstm.save(p("lstm.snnp"));
        if (b.cnn) b.cnn->save(p("cnn.snnp"));
        nlohmann::json m = b.manifest;
        m["format"] = "srom-bundle";
        m["bundle_version"] = kBundleVersion;
        m["library_version"] = kLibraryVersion;
        m["grid"] = detail::meta_json(b.geometry, b.meta);
        m["mean_source"] = b.mean.source == MeanSource::computed_from_training ? "training" : "loaded";
        m["dimensions"] = bundle_dimensions(b);
        nlohmann::json sums = nlohmann::json::object();
        for (const auto& f : detail::bundle_files(b.cnn.has_value())) sums[f] = hex64(io::file_checksum((tmp / f).string()));
        m["files"] = sums;
        write_json_file(m, p("manifest.json"));
        fs::remove_all(target);
        fs::rename(tmp, target);
    });
}

inline ModelBundle load_bundle(const std::string& dir) {
    return run_stage("bundle", [&] {
        namespace fs = std::filesystem;
        require(fs::is_directory(dir), ErrorKind::io, "bundle directory '" + dir + "' not found");
        const auto p = [&](const std::string& f) { return (fs::path(dir) / f).string(); };
        ModelBundle b;
        b.manifest = read_json_file(p("manifest.json"));
        const auto& m = b.manifest;
        require(m.value("format", "") == "srom-bundle", ErrorKind::format, "not a model bundle manifest");
        require(m.at("bundle_version").get<std::uint32_t>() == kBundleVersion, ErrorKind::format, "unsupported bundle version");
        const bool has_cnn = m.at("dimensions").at("has_cnn").get<bool>();
        for (const auto& f : detail::bundle_files(has_cnn)) {
            require(fs::exists(p(f)), ErrorKind::corrupt_file, "bundle file '" + f + "' is missing");
            require(hex64(io::file_checksum(p(f))) == m.at("files").at(f).get<std::string>(), ErrorKind::corrupt_file,
                    "bundle file '" + f + "' does not match its manifest checksum");
        }
        b.basis = load_basis(p("basis.spob"));
        b.selection = load_selection(p("selection.json"));
        const auto mean = load_snapshots(p("mean.srom"));
        require(mean.n_t() == 1, ErrorKind::corrupt_file, "mean field file must hold one frame");
        b.geometry = mean.geometry;
        b.meta = mean.meta;
        detail::restore_meta(m.at("grid"), b.geometry, b.meta);
        b.mean.mean_velocity = Eigen::Map<const Vector>(mean.velocity.data(), static_cast<Eigen::Index>(mean.velocity.size()));
        if (mean.concentration)
            b.mean.mean_concentration = Eigen::Map<const Vector>(mean.concentration->data(), static_cast<Eigen::Index>(mean.concentration->size()));
        b.mean.source = m.value("mean_source", "training") == "training" ? MeanSource::computed_from_training : MeanSource::loaded;
        b.ae = ComplexAutoencoder::load(p("ae.snnp"));
        b.lstm = ComplexForecaster::load(p("lstm.snnp"));
        if (has_cnn) b.cnn = ScalarMapper::load(p("cnn.snnp"));
        b.validate();
        const auto& dims = m.at("dimensions");
        require(dims.at("n_m").get<std::size_t>() == b.n_m() && dims.at("n_z").get<std::size_t>() == b.n_z() &&
                    dims.at("window").get<std::size_t>() == b.window(),
                ErrorKind::corrupt_file, "manifest dimensions disagree with the stored models");
        return b;
    });
}

// ---------------------------------------------------------------------------
// Offline phase
// ---------------------------------------------------------------------------

struct OfflineOptions {
    std::optional<std::string> cache_dir;
    std::function<void(const std::string&)> log;  ///< progress lines; may be empty
};

struct OfflineResult {
    ModelBundle bundle;
    SnapshotDataset test;               ///< held-out frames, total fields
    std::vector<std::string> cache_hits;
    std::optional<SearchResult> search;
};

namespace detail {

inline double field_nmse(const SpodBasis& basis, const ModeSelection& sel, const CMatrix& a, const SnapshotDataset& fluct) {
    CoefficientSeries c;
    c.values = a;
    c.mode_index = sel.kept;
    c.source_basis = basis.fingerprint();
    const auto rec = reconstruct(basis, c, fluct.geometry, fluct.meta);
    return nmse(fluct.velocity, rec.field.velocity);
}

inline SnapshotDataset velocity_only(SnapshotDataset d) {
    d.concentration.reset();
    return d;
}

}  // namespace detail

inline OfflineResult run_offline(const SnapshotDataset& data, const MasterConfig& cfg, const OfflineOptions& opt = {}) {
    using clock = std::chrono::steady_clock;
    cfg.validate();
    ArtifactCache cache = opt.cache_dir ? ArtifactCache(*opt.cache_dir) : ArtifactCache();
    OfflineResult out;
    nlohmann::json metrics = nlohmann::json::object();
    nlohmann::json keys = nlohmann::json::object();
    auto log = [&](const std::string& stage, clock::time_point t0, bool hit) {
        if (!opt.log) return;
        const double s = std::chrono::duration<double>(clock::now() - t0).count();
        std::ostringstream os;
        os << "[" << stage << "] " << (hit ? "cached" : "done") << " in " << std::fixed << std::setprecision(2) << s << " s";
        opt.log(os.str());
    };
    auto stage_key = [&](const char* stage, nlohmann::json inputs) {
        inputs["stage"] = stage;
        const auto k = hash_json(inputs);
        keys[stage] = hex64(k);
        return k;
    };
    auto note_hit = [&](const char* stage, bool hit) {
        if (hit) out.cache_hits.emplace_back(stage);
    };
    const nlohmann::json full_cfg = cfg;

    // dataset
    auto t0 = clock::now();
    SnapshotDataset train, fluct;
    MeanField mean;
    const std::uint64_t checksum = run_stage("dataset", [&] {
        data.validate();
        auto split = split_train_test(data, cfg.train_ratio);
        train = std::move(split.first);
        out.test = std::move(split.second);
        auto fm = compute_fluctuations(train);
        fluct = std::move(fm.first);
        mean = std::move(fm.second);
        return dataset_checksum(data);
    });
    const auto k_data = stage_key("dataset", {{"data", hex64(checksum)}, {"train_ratio", cfg.train_ratio}});
    log("dataset", t0, false);

    // spod
    t0 = clock::now();
    const auto k_spod = stage_key("spod", {{"up", hex64(k_data)}, {"spod", full_cfg.at("spod")}});
    bool hit = cache.has("spod", k_spod);
    SpodBasis basis = run_stage("spod", [&] {
        if (hit) return load_basis(cache.entry("spod", k_spod) + "/basis.spob");
        auto b = compute_spod(fluct, cfg.spod, cfg.threads);
        cache.store("spod", k_spod, [&](const std::string& d) { write_basis(b, d + "/basis.spob"); });
        return b;
    });
    for (const auto& w : basis.warnings) warn("spod: " + w);
    note_hit("spod", hit);
    log("spod", t0, hit);

    // prune (the selection decides which modes the projection solves for)
    t0 = clock::now();
    const auto k_prune = stage_key("prune", {{"up", hex64(k_spod)}, {"prune", full_cfg.at("prune")}});
    hit = cache.has("prune", k_prune);
    ModeSelection sel = run_stage("prune", [&] {
        if (hit) return load_selection(cache.entry("prune", k_prune) + "/selection.json");
        auto s = select_modes(basis, cfg.prune.eps_ric, cfg.prune.eps_gamma);
        require(s.n_m() >= 1, ErrorKind::insufficient_data, "pruning kept no modes");
        cache.store("prune", k_prune, [&](const std::string& d) { write_selection(s, d + "/selection.json"); });
        return s;
    });
    require(sel.source_basis == basis.fingerprint(), ErrorKind::corrupt_file, "[prune] cached selection belongs to another basis");
    note_hit("prune", hit);
    log("prune", t0, hit);

    // project
    t0 = clock::now();
    const auto k_proj = stage_key("project", {{"up", hex64(k_prune)}});
    hit = cache.has("project", k_proj);
    CoefficientSeries coeffs = run_stage("project", [&] {
        if (hit) return load_coefficients(cache.entry("project", k_proj) + "/coeffs.scof");
        auto c = project_coefficients(basis, sel.kept, fluct);
        cache.store("project", k_proj, [&](const std::string& d) { write_coefficients(c, d + "/coeffs.scof"); });
        return c;
    });
    run_stage("project", [&] {
        require(coeffs.source_basis == basis.fingerprint() && coeffs.n_m() == sel.n_m() && coeffs.n_t() == fluct.n_t(),
                ErrorKind::corrupt_file, "cached coefficients do not match the basis and selection");
        metrics["projection_nmse_train"] = detail::field_nmse(basis, sel, coeffs.values, fluct);
        metrics["gram_condition"] = coeffs.condition;
        metrics["gram_fallback"] = coeffs.fallback;
    });
    note_hit("project", hit);
    log("project", t0, hit);

    // train-ae
    t0 = clock::now();
    AeConfig ae_cfg = cfg.ae;
    if (cfg.ae_auto_width) {
        ae_cfg = AeConfig::desk_scale(sel.n_m(), cfg.ae.latent_size);
        ae_cfg.train = cfg.ae.train;
    }
    const std::uint64_t ae_seed = derive_seed(cfg.seed, "ae");
    const auto k_ae = stage_key("train-ae", {{"up", hex64(k_proj)}, {"ae", ae_cfg}, {"seed", ae_seed}});
    hit = cache.has("train-ae", k_ae);
    ComplexAutoencoder ae = run_stage("train-ae", [&] {
        ae_cfg.validate(sel.n_m());
        if (hit) return ComplexAutoencoder::load(cache.entry("train-ae", k_ae) + "/ae.snnp");
        ComplexAutoencoder m(sel.n_m(), ae_cfg, ae_seed);
        m.train(coeffs.values, cfg.threads);
        cache.store("train-ae", k_ae, [&](const std::string& d) { m.save(d + "/ae.snnp"); });
        return m;
    });
    const CMatrix latent = run_stage("train-ae", [&] {
        require(ae.n_m() == sel.n_m(), ErrorKind::corrupt_file, "cached autoencoder width does not match N_m");
        CMatrix z = ae.encode(coeffs.values);
        const double ae_err = detail::field_nmse(basis, sel, ae.decode(z), fluct);
        const double proj_err = metrics.at("projection_nmse_train").get<double>();
        metrics["ae_nmse_train"] = ae_err;
        metrics["error_ordering_holds"] = ae_err >= proj_err;
        if (ae_err < proj_err)
            warn("autoencoder field error " + std::to_string(ae_err) + " is below the projection error " + std::to_string(proj_err));
        return z;
    });
    note_hit("train-ae", hit);
    log("train-ae", t0, hit);

    // search-lstm
    LstmConfig re_cfg = cfg.lstm, im_cfg = cfg.lstm_imag();
    std::uint64_t k_search = 0;
    if (cfg.search.enabled) {
        t0 = clock::now();
        const std::uint64_t search_seed = derive_seed(cfg.seed, "search");
        k_search = stage_key("search-lstm", {{"up", hex64(k_ae)}, {"search", full_cfg.at("search")}, {"base", cfg.lstm}, {"seed", search_seed}});
        hit = cache.has("search-lstm", k_search);
        out.search = run_stage("search-lstm", [&] {
            SearchResult r;
            if (hit) {
                const auto j = read_json_file(cache.entry("search-lstm", k_search) + "/best.json");
                r.best = j.at("best").get<LstmConfig>();
                r.best_trial = j.at("best_trial");
                for (const auto& t : j.at("trials")) {
                    Trial tr;
                    tr.index = t.at("index");
                    tr.n_h = t.at("n_h");
                    tr.batch = t.at("batch");
                    tr.lr = t.at("lr");
                    tr.diverged = t.at("diverged");
                    tr.val_loss = t.at("val_loss").is_null() ? std::numeric_limits<double>::quiet_NaN() : t.at("val_loss").get<double>();
                    r.trials.push_back(tr);
                }
                return r;
            }
            r = random_search(latent.real(), cfg.search.space, cfg.search.trials, cfg.search.epochs, search_seed, cfg.lstm, cfg.threads);
            cache.store("search-lstm", k_search, [&](const std::string& d) {
                nlohmann::json trials = nlohmann::json::array();
                for (const auto& t : r.trials)
                    trials.push_back({{"index", t.index}, {"n_h", t.n_h}, {"batch", t.batch}, {"lr", t.lr}, {"diverged", t.diverged},
                                      {"val_loss", std::isfinite(t.val_loss) ? nlohmann::json(t.val_loss) : nlohmann::json(nullptr)}});
                write_json_file({{"best", r.best}, {"best_trial", r.best_trial}, {"trials", trials}}, d + "/best.json");
                write_trials_csv(r.trials, d + "/trials.csv");
            });
            return r;
        });
        // The searched widths and optimiser settings apply to both channels;
        // the full epoch budget comes from the lstm section.
        for (auto* c : {&re_cfg, &im_cfg}) {
            c->n_h = out.search->best.n_h;
            c->train.batch_size = out.search->best.train.batch_size;
            c->train.learning_rate = out.search->best.train.learning_rate;
        }
        metrics["search_best_trial"] = out.search->best_trial;
        note_hit("search-lstm", hit);
        log("search-lstm", t0, hit);
    }

    // train-lstm
    t0 = clock::now();
    const std::uint64_t lstm_seed = derive_seed(cfg.seed, "lstm");
    const auto k_lstm = stage_key("train-lstm", {{"up", hex64(k_ae)}, {"re", re_cfg}, {"im", im_cfg}, {"seed", lstm_seed}});
    hit = cache.has("train-lstm", k_lstm);
    ComplexForecaster lstm = run_stage("train-lstm", [&] {
        if (hit) return ComplexForecaster::load(cache.entry("train-lstm", k_lstm) + "/lstm.snnp");
        require(static_cast<std::size_t>(latent.cols()) > re_cfg.n_t_in + 1, ErrorKind::insufficient_data,
                "latent series shorter than the look-back window");
        ComplexForecaster f(ae.n_z(), re_cfg, im_cfg, lstm_seed);
        f.train(latent, cfg.threads);
        cache.store("train-lstm", k_lstm, [&](const std::string& d) { f.save(d + "/lstm.snnp"); });
        return f;
    });
    run_stage("train-lstm", [&] {
        require(lstm.n_z() == ae.n_z(), ErrorKind::corrupt_file, "cached forecaster width does not match N_z");
        const auto w = lstm.window();
        const Matrix pr = lstm.re().teacher_forced(latent.real()), pi = lstm.im().teacher_forced(latent.imag());
        const auto n = latent.cols() - static_cast<Eigen::Index>(w);
        const Matrix tr = latent.real().rightCols(n), ti = latent.imag().rightCols(n);
        const std::vector<double> rv(tr.data(), tr.data() + tr.size()), pv(pr.data(), pr.data() + pr.size());
        const std::vector<double> iv(ti.data(), ti.data() + ti.size()), qv(pi.data(), pi.data() + pi.size());
        metrics["lstm_one_step_nmse_re"] = nmse(rv, pv);
        metrics["lstm_one_step_nmse_im"] = nmse(iv, qv);
    });
    note_hit("train-lstm", hit);
    log("train-lstm", t0, hit);

    // train-cnn
    std::optional<ScalarMapper> cnn;
    if (train.concentration && cfg.cnn_enabled) {
        t0 = clock::now();
        const std::uint64_t cnn_seed = derive_seed(cfg.seed, "cnn");
        const bool from_rec = cfg.cnn.training_input == CnnTrainingInput::reconstruction;
        const auto k_cnn = stage_key("train-cnn", {{"up", hex64(from_rec ? k_proj : k_data)}, {"cnn", cfg.cnn}, {"seed", cnn_seed}});
        hit = cache.has("train-cnn", k_cnn);
        SnapshotDataset input = detail::velocity_only(train);
        if (from_rec) input = reconstruct(basis, coeffs, train.geometry, train.meta, &mean).field;
        cnn = run_stage("train-cnn", [&] {
            if (hit) return ScalarMapper::load(cache.entry("train-cnn", k_cnn) + "/cnn.snnp");
            ScalarMapper m(train.geometry, train.meta.n_v, cfg.cnn, cnn_seed);
            m.train(input, *train.concentration);
            cache.store("train-cnn", k_cnn, [&](const std::string& d) { m.save(d + "/cnn.snnp"); });
            return m;
        });
        run_stage("train-cnn", [&] {
            const auto pred = cnn->map(input);
            const auto n_x = train.n_x();
            const auto n_val = train.n_t() - chronological_train_count(train.n_t(), cfg.cnn.train.validation_fraction);
            const auto off = static_cast<std::ptrdiff_t>((train.n_t() - n_val) * n_x);
            const std::vector<double> ref(train.concentration->begin() + off, train.concentration->end());
            const std::vector<double> got(pred.begin() + off, pred.end());
            metrics["cnn_nmse_validation"] = nmse(ref, got);
        });
        note_hit("train-cnn", hit);
        log("train-cnn", t0, hit);
    } else if (train.concentration) {
        warn("concentration present but the scalar mapper is disabled");
    }

    ModelBundle& b = out.bundle;
    b.basis = std::move(basis);
    b.selection = std::move(sel);
    b.mean = std::move(mean);
    b.geometry = data.geometry;
    b.meta = data.meta;
    b.ae = std::move(ae);
    b.lstm = std::move(lstm);
    b.cnn = std::move(cnn);
    b.manifest = {{"config", full_cfg},
                  {"resolved", {{"ae", ae_cfg}, {"lstm_re", re_cfg}, {"lstm_im", im_cfg}}},
                  {"provenance", {{"seed", cfg.seed}, {"dataset_checksum", hex64(checksum)}, {"library_version", kLibraryVersion},
                                  {"stage_keys", keys}, {"n_t_train", train.n_t()}, {"n_t_test", out.test.n_t()}}},
                  {"offline_metrics", metrics}};
    run_stage("bundle", [&] { b.validate(); });
    return out;
}

inline OfflineResult run_offline(const std::string& data_path, const MasterConfig& cfg, const OfflineOptions& opt = {}) {
    const auto data = run_stage("dataset", [&] { return load_snapshots(data_path); });
    return run_offline(data, cfg, opt);
}

// ---------------------------------------------------------------------------
// Online phase
// ---------------------------------------------------------------------------

struct SaturationCheck {
    double mean = 0.0;            ///< time-averaged NMSE over the whole horizon
    double worst_ratio = 0.0;     ///< max step / mean after the skipped lead-in
    std::size_t first_checked = 0;
    bool bounded = true;
};

/// No step after the first `skip` fraction may exceed `factor` times the
/// horizon average.
inline SaturationCheck saturation_check(const std::vector<double>& per_step, double skip = 0.1, double factor = 3.0) {
    SaturationCheck s;
    if (per_step.empty()) return s;
    for (double v : per_step) s.mean += v;
    s.mean /= static_cast<double>(per_step.size());
    s.first_checked = static_cast<std::size_t>(std::ceil(skip * static_cast<double>(per_step.size())));
    for (std::size_t t = s.first_checked; t < per_step.size(); ++t) {
        const double r = s.mean > 0.0 ? per_step[t] / s.mean : (per_step[t] > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
        s.worst_ratio = std::max(s.worst_ratio, r);
    }
    s.bounded = s.worst_ratio <= factor;
    return s;
}

struct OnlineResult {
    SnapshotDataset prediction;  ///< total velocity (+ concentration), times from 0
    LatentSeries latent;         ///< rolled-out latent, or the window latent when horizon is 0
    std::optional<ComplexForecaster::Rollout> rollout;
    std::optional<NmseReport> velocity_nmse, concentration_nmse;
    bool diverged = false;
};

namespace detail {

inline void check_grid(const ModelBundle& b, const SnapshotDataset& d, const char* what) {
    require(d.geometry.nx == b.geometry.nx && d.geometry.nz == b.geometry.nz && d.geometry.mask == b.geometry.mask &&
                d.meta.n_v == b.meta.n_v,
            ErrorKind::invalid_argument, std::string(what) + " grid does not match the bundle");
}

/// Copy carrying the bundle's geometry and scales (SROM files drop origin
/// and reference lengths).
inline SnapshotDataset aligned(const ModelBundle& b, SnapshotDataset d) {
    d.geometry = b.geometry;
    d.meta = b.meta;
    d.times = SnapshotDataset::uniform_times(d.n_t(), b.meta.dt);
    return d;
}

inline std::vector<double> fluct_velocity(const SnapshotDataset& d, const MeanField& m) {
    return compute_fluctuations(velocity_only(d), MeanField{m.mean_velocity, std::nullopt, m.source}).first.velocity;
}

inline std::vector<double> fluct_concentration(const std::vector<double>& c, const Vector& mean) {
    std::vector<double> out(c);
    const auto n = static_cast<std::size_t>(mean.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= mean(static_cast<Eigen::Index>(i % n));
    return out;
}

inline CMatrix project_and_encode(const ModelBundle& b, const SnapshotDataset& frames) {
    const auto fl = compute_fluctuations(velocity_only(frames), MeanField{b.mean.mean_velocity, std::nullopt, b.mean.source}).first;
    return b.ae.encode(project_coefficients(b.basis, b.selection.kept, fl).values);
}

}  // namespace detail

/// Forecast from the last N_t_in frames of `window`. With `reference`, its
/// first frames are aligned with the prediction and scored on fluctuations
/// about the training mean.
inline OnlineResult run_online(const ModelBundle& b, const SnapshotDataset& window, std::size_t horizon,
                               const SnapshotDataset* reference = nullptr, RolloutMode mode = RolloutMode::sliding_window) {
    return run_stage("online", [&] {
        detail::check_grid(b, window, "init window");
        const auto w = b.window();
        require(window.n_t() >= w, ErrorKind::invalid_argument,
                "init window holds " + std::to_string(window.n_t()) + " frames; the forecaster needs " + std::to_string(w));
        window.validate();
        const auto init = detail::aligned(b, detail::velocity_only(window.slice(window.n_t() - w, window.n_t())));
        const CMatrix z0 = detail::project_and_encode(b, init);

        OnlineResult r;
        r.latent.source_basis = b.basis.fingerprint();
        if (horizon == 0) {
            r.latent.values = z0;
        } else {
            r.rollout = b.lstm.rollout(z0, horizon, mode);
            r.latent.values = r.rollout->values;
            r.diverged = r.rollout->diverged();
            if (r.diverged) warn("latent rollout left the training bound; predictions past that point are unreliable");
        }
        CoefficientSeries a;
        a.values = b.ae.decode(r.latent.values);
        a.mode_index = b.selection.kept;
        a.source_basis = b.basis.fingerprint();
        const MeanField vmean{b.mean.mean_velocity, std::nullopt, b.mean.source};
        r.prediction = reconstruct(b.basis, a, b.geometry, b.meta, &vmean).field;
        if (b.cnn) r.prediction.concentration = b.cnn->map(r.prediction);

        if (reference) {
            detail::check_grid(b, *reference, "reference");
            const auto n = r.prediction.n_t();
            require(reference->n_t() >= n, ErrorKind::invalid_argument,
                    "reference holds " + std::to_string(reference->n_t()) + " frames; the prediction has " + std::to_string(n));
            const auto ref = detail::aligned(b, reference->slice(0, n));
            r.velocity_nmse = nmse_series(detail::fluct_velocity(ref, b.mean), detail::fluct_velocity(r.prediction, b.mean), b.basis.n_xv());
            if (b.cnn && ref.concentration)
                r.concentration_nmse = nmse_series(detail::fluct_concentration(*ref.concentration, *b.mean.mean_concentration),
                                                   detail::fluct_concentration(*r.prediction.concentration, *b.mean.mean_concentration),
                                                   b.geometry.n_cells());
        }
        return r;
    });
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

namespace detail {

inline std::ofstream open_csv(const std::string& path) {
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + "'");
    f.precision(17);
    return f;
}

inline void close_csv(std::ofstream& f, const std::string& path) {
    f.flush();
    require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + "'");
}

inline std::vector<double> component_frames(const SnapshotDataset& d, std::size_t v) {
    std::vector<double> out(d.n_t() * d.n_x());
    for (std::size_t t = 0; t < d.n_t(); ++t)
        for (std::size_t c = 0; c < d.n_x(); ++c) out[t * d.n_x() + c] = d.u(t, v, c);
    return out;
}

inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json nmse_json(const NmseReport& r) {
    const auto s = saturation_check(r.per_step);
    return {{"overall", num(r.overall)}, {"nrmse", num(r.nrmse())}, {"mean_per_step", num(r.mean_per_step)},
            {"max_per_step", num(*std::max_element(r.per_step.begin(), r.per_step.end()))},
            {"saturation", {{"bounded", s.bounded}, {"worst_ratio", num(s.worst_ratio)}, {"first_checked", s.first_checked}}}};
}

}  // namespace detail

/// Writes every report file under `out_dir` and returns the summary. All
/// content derives from the bundle, the prediction, its latent series and
/// the optional reference, so rerunning on reloaded files reproduces it.
inline nlohmann::json emit_report(const ModelBundle& b, const SnapshotDataset& prediction_in, const LatentSeries& latent,
                                  const SnapshotDataset* reference_in, const ReportConfig& rc, const std::string& out_dir) {
    return run_stage("report", [&] {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        require(fs::is_directory(out_dir), ErrorKind::io, "cannot create report directory '" + out_dir + "'");
        const auto p = [&](const char* f) { return (fs::path(out_dir) / f).string(); };
        detail::check_grid(b, prediction_in, "prediction");
        const auto pred = detail::aligned(b, prediction_in);
        const auto n = pred.n_t();
        require(n >= 1, ErrorKind::invalid_argument, "empty prediction");
        require(latent.n_z() == b.n_z() && latent.n_t() == n, ErrorKind::invalid_argument, "latent series does not match the prediction");
        std::optional<SnapshotDataset> ref;
        if (reference_in) {
            detail::check_grid(b, *reference_in, "reference");
            require(reference_in->n_t() >= n, ErrorKind::invalid_argument, "reference shorter than the prediction");
            ref = detail::aligned(b, reference_in->slice(0, n));
        }
        const auto& g = b.geometry;
        std::vector<std::string> files;
        nlohmann::json metrics = nlohmann::json::object();

        write_spectrum_csv(b.basis, p("spectrum.csv"), b.meta.h_ref, b.meta.u_ref);
        files.emplace_back("spectrum.csv");

        // errors.csv
        std::optional<NmseReport> ev, ec;
        if (ref) {
            ev = nmse_series(detail::fluct_velocity(*ref, b.mean), detail::fluct_velocity(pred, b.mean), b.basis.n_xv());
            if (pred.concentration && ref->concentration && b.mean.mean_concentration)
                ec = nmse_series(detail::fluct_concentration(*ref->concentration, *b.mean.mean_concentration),
                                 detail::fluct_concentration(*pred.concentration, *b.mean.mean_concentration), g.n_cells());
        }
        {
            auto f = detail::open_csv(p("errors.csv"));
            f << "step,t,nmse_velocity,nmse_concentration\n";
            for (std::size_t t = 0; t < n; ++t) {
                f << t << ',' << pred.times[t] << ',';
                if (ev) f << ev->per_step[t];
                f << ',';
                if (ec) f << ec->per_step[t];
                f << '\n';
            }
            detail::close_csv(f, p("errors.csv"));
            files.emplace_back("errors.csv");
        }
        metrics["velocity_nmse"] = ev ? detail::nmse_json(*ev) : nlohmann::json(nullptr);
        metrics["concentration_nmse"] = ec ? detail::nmse_json(*ec) : nlohmann::json(nullptr);

        // latent statistics
        std::optional<CMatrix> zref;
        if (ref) zref = detail::project_and_encode(b, *ref);
        const Matrix zp_re = latent.values.real(), zp_im = latent.values.imag();
        {
            const double bound_re = b.lstm.re().bound(), bound_im = b.lstm.im().bound();
            const double max_re = zp_re.cwiseAbs().maxCoeff(), max_im = zp_im.cwiseAbs().maxCoeff();
            nlohmann::json corr = nlohmann::json::array();
            if (n > 1) {
                const Vector c = channel_correlation(zp_re, zp_im);
                for (Eigen::Index i = 0; i < c.size(); ++i) corr.push_back(detail::num(c(i)));
            }
            metrics["rollout"] = {{"max_abs_re", max_re}, {"max_abs_im", max_im}, {"bound_re", detail::num(bound_re)},
                                  {"bound_im", detail::num(bound_im)}, {"exceeds_bound", max_re > bound_re || max_im > bound_im},
                                  {"re_im_correlation", corr}};
        }
        {
            auto f = detail::open_csv(p("pdf.csv"));
            f << "channel,dim,bin,center,predicted,reference\n";
            const auto dims = std::min(rc.pdf_dims, b.n_z());
            nlohmann::json js = {{"re", nlohmann::json::array()}, {"im", nlohmann::json::array()}};
            for (int ch = 0; ch < 2; ++ch) {
                const Matrix& zp = ch == 0 ? zp_re : zp_im;
                std::optional<Matrix> zr;
                if (zref) zr = ch == 0 ? Matrix(zref->real()) : Matrix(zref->imag());
                for (std::size_t d = 0; d < dims; ++d) {
                    const auto di = static_cast<Eigen::Index>(d);
                    double lo = zp.row(di).minCoeff(), hi = zp.row(di).maxCoeff();
                    if (zr) {
                        lo = std::min(lo, zr->row(di).minCoeff());
                        hi = std::max(hi, zr->row(di).maxCoeff());
                    }
                    const auto range = padded_range(lo, hi);
                    const auto hp = coefficient_pdf(zp.row(di).transpose(), rc.pdf_bins, range);
                    std::optional<Histogram1D> hr;
                    if (zr) hr = coefficient_pdf(zr->row(di).transpose(), rc.pdf_bins, range);
                    for (std::size_t k = 0; k < rc.pdf_bins; ++k) {
                        const auto ki = static_cast<Eigen::Index>(k);
                        f << (ch == 0 ? "re" : "im") << ',' << d << ',' << k << ',' << hp.lo + (static_cast<double>(k) + 0.5) * hp.width() << ','
                          << hp.density(ki) << ',';
                        if (hr) f << hr->density(ki);
                        f << '\n';
                    }
                    js[ch == 0 ? "re" : "im"].push_back(hr ? detail::num(js_divergence(hp.mass(), hr->mass())) : nlohmann::json(nullptr));
                }
            }
            detail::close_csv(f, p("pdf.csv"));
            files.emplace_back("pdf.csv");
            metrics["pdf_js"] = js;
        }
        {
            auto f = detail::open_csv(p("poincare.csv"));
            f << "source,crossing,t,c1,c2\n";
            nlohmann::json pm = nlohmann::json::object();
            const bool usable = b.n_z() >= 2 && n >= 3 && rc.poincare_plane < b.n_z();
            if (usable) {
                const Matrix& rr = zref ? Matrix(zref->real()) : zp_re;
                const auto range = section_range(zp_re, rr, rc.poincare_plane);
                const auto sp = poincare_section(zp_re, rc.poincare_plane, rc.poincare_bins, range);
                std::optional<PoincareSection> sr;
                if (zref) sr = poincare_section(rr, rc.poincare_plane, rc.poincare_bins, range);
                auto dump = [&](const char* src, const PoincareSection& s) {
                    for (Eigen::Index k = 0; k < s.points.cols(); ++k) {
                        f << src << ',' << k << ',' << s.times[static_cast<std::size_t>(k)] * b.meta.dt << ',' << s.points(0, k) << ',';
                        if (s.points.rows() > 1) f << s.points(1, k);
                        f << '\n';
                    }
                };
                dump("predicted", sp);
                if (sr) dump("reference", *sr);
                pm["crossings_predicted"] = sp.points.cols();
                pm["crossings_reference"] = sr ? nlohmann::json(sr->points.cols()) : nlohmann::json(nullptr);
                pm["js"] = sr && sp.pdf && sr->pdf ? detail::num(js_divergence(sp.pdf->mass(), sr->pdf->mass())) : nlohmann::json(nullptr);
            }
            detail::close_csv(f, p("poincare.csv"));
            files.emplace_back("poincare.csv");
            metrics["poincare"] = usable ? pm : nlohmann::json(nullptr);
        }

        // scalar diagnostics
        {
            std::vector<std::pair<std::string, Vector>> profiles;
            nlohmann::json fm = nullptr;
            if (pred.concentration) {
                const auto iz = nearest_row(g, rc.flux_z ? *rc.flux_z : g.z_center(g.nz / 2));
                profiles.emplace_back("predicted", vertical_mass_flux(pred, iz));
                if (ref && ref->concentration) profiles.emplace_back("reference", vertical_mass_flux(*ref, iz));
                fm = {{"row", iz}, {"z", g.z_center(iz)}};
            }
            write_flux_csv(g, profiles, p("flux.csv"));
            files.emplace_back("flux.csv");
            metrics["flux"] = fm;
        }
        {
            const bool conc = pred.concentration.has_value();
            const auto pf = conc ? *pred.concentration : detail::component_frames(pred, 0);
            std::optional<std::vector<double>> rf;
            if (ref && (!conc || ref->concentration)) rf = conc ? *ref->concentration : detail::component_frames(*ref, 0);
            std::vector<std::pair<std::string, ProbeSeries>> probes;
            nlohmann::json pm = nlohmann::json::array();
            for (const auto& s : rc.probes) {
                const auto ps = probe_history(pf, g, s.x, s.z);
                probes.emplace_back(s.name + "_predicted", ps);
                nlohmann::json e = {{"name", s.name}, {"x_cell", ps.x_cell}, {"z_cell", ps.z_cell}};
                double mp = 0.0;
                for (double v : ps.values) mp += v;
                mp /= static_cast<double>(ps.values.size());
                e["mean_predicted"] = mp;
                if (rf) {
                    const auto pr = probe_history(*rf, g, s.x, s.z);
                    probes.emplace_back(s.name + "_reference", pr);
                    double mr = 0.0;
                    for (double v : pr.values) mr += v;
                    mr /= static_cast<double>(pr.values.size());
                    e["mean_reference"] = mr;
                    e["relative_bias"] = mr != 0.0 ? detail::num((mp - mr) / mr) : nlohmann::json(nullptr);
                }
                pm.push_back(e);
            }
            write_probes_csv(pred.times, probes, p("probes.csv"));
            files.emplace_back("probes.csv");
            metrics["probes"] = {{"field", conc ? "concentration" : "u"}, {"series", pm}};
        }

        // Mean fields: frame 0 training mean, 1 predicted mean, 2 reference mean.
        {
            SnapshotDataset m = detail::mean_as_dataset(b.mean, g, b.meta);
            const bool with_c = m.concentration && pred.concentration && (!ref || ref->concentration);
            if (!with_c) m.concentration.reset();
            auto append = [&](const SnapshotDataset& d) {
                const auto tm = temporal_mean(with_c ? d : detail::velocity_only(d));
                m.velocity.insert(m.velocity.end(), tm.mean_velocity.data(), tm.mean_velocity.data() + tm.mean_velocity.size());
                if (with_c) m.concentration->insert(m.concentration->end(), tm.mean_concentration->data(),
                                                    tm.mean_concentration->data() + tm.mean_concentration->size());
                m.times.push_back(static_cast<double>(m.times.size()) * b.meta.dt);
            };
            append(pred);
            if (ref) append(*ref);
            write_snapshots(m, p("mean_fields.srom"));
            files.emplace_back("mean_fields.srom");
        }

        const auto& man = b.manifest;
        nlohmann::json summary = {
            {"schema", kSummarySchema},
            {"library_version", kLibraryVersion},
            {"dimensions", bundle_dimensions(b)},
            {"horizon", n},
            {"has_reference", ref.has_value()},
            {"metrics", metrics},
            {"offline_metrics", man.value("offline_metrics", nlohmann::json::object())},
            {"configs", man.value("config", nlohmann::json::object())},
            {"report_config", {{"pdf_bins", rc.pdf_bins}, {"pdf_dims", rc.pdf_dims}, {"poincare_bins", rc.poincare_bins},
                               {"poincare_plane", rc.poincare_plane}, {"probes", rc.probes}}},
            {"provenance", man.value("provenance", nlohmann::json::object())},
        };
        files.emplace_back("summary.json");
        summary["files"] = files;
        write_json_file(summary, p("summary.json"));
        return summary;
    });
}

/// Structural check of a summary document; throws format-error on the first
/// violation.
inline void validate_summary(const nlohmann::json& s) {
    auto need = [&](bool ok, const std::string& what) { require(ok, ErrorKind::format, "summary: " + what); };
    need(s.is_object(), "not an object");
    need(s.contains("schema") && s.at("schema") == kSummarySchema, "schema tag missing or unknown");
    need(s.contains("library_version") && s.at("library_version").is_string(), "library_version missing");
    need(s.contains("horizon") && s.at("horizon").is_number_unsigned(), "horizon missing");
    need(s.contains("has_reference") && s.at("has_reference").is_boolean(), "has_reference missing");
    for (const char* k : {"dimensions", "metrics", "offline_metrics", "configs", "report_config", "provenance"})
        need(s.contains(k) && s.at(k).is_object(), std::string(k) + " must be an object");
    for (const char* k : {"n_xv", "n_m", "n_z", "n_f", "window"})
        need(s.at("dimensions").contains(k) && s.at("dimensions").at(k).is_number_unsigned(), std::string("dimensions.") + k + " missing");
    for (const char* k : {"seed", "dataset_checksum", "library_version"})
        need(s.at("provenance").contains(k), std::string("provenance.") + k + " missing");
    const auto& m = s.at("metrics");
    for (const char* k : {"velocity_nmse", "concentration_nmse", "rollout", "pdf_js", "poincare", "flux", "probes"})
        need(m.contains(k), std::string("metrics.") + k + " missing");
    if (s.at("has_reference").get<bool>()) {
        need(m.at("velocity_nmse").is_object(), "velocity_nmse must be present with a reference");
        for (const char* k : {"overall", "mean_per_step", "saturation"})
            need(m.at("velocity_nmse").contains(k), std::string("velocity_nmse.") + k + " missing");
    }
    need(s.contains("files") && s.at("files").is_array() && !s.at("files").empty(), "files list missing");
    for (const auto& f : s.at("files")) need(f.is_string(), "file names must be strings");
}

/// Prediction artifacts that `emit_report` can be rerun from.
inline void write_prediction(const OnlineResult& r, const std::string& dir) {
    run_stage("predict", [&] {
        std::filesystem::create_directories(dir);
        write_snapshots(r.prediction, dir + "/prediction.srom");
        write_latent(r.latent, dir + "/latent.slat");
    });
}

}  // namespace srom
