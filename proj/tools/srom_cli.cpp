#include <CLI11.hpp>

#include <iostream>

#include "srom/srom.hpp"

using namespace srom;
using nlohmann::json;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
};

std::uint64_t seed_or(const Globals& g, std::uint64_t fallback) { return g.seed ? *g.seed : fallback; }

void say(const std::string& s) { std::cout << s << '\n'; }

/// Accepts a bare module section or a master config holding it under `key`.
json section(const std::string& path, const char* key) {
    auto j = read_json_file(path);
    if (j.is_object() && j.contains(key) && j.at(key).is_object()) return j.at(key);
    return j;
}

MeanField mean_from_file(const std::string& path) {
    const auto d = load_snapshots(path);
    require(d.n_t() == 1, ErrorKind::invalid_argument, "'" + path + "' must hold a single mean frame");
    MeanField m;
    m.source = MeanSource::loaded;
    m.mean_velocity = Eigen::Map<const Vector>(d.velocity.data(), static_cast<Eigen::Index>(d.velocity.size()));
    if (d.concentration)
        m.mean_concentration = Eigen::Map<const Vector>(d.concentration->data(), static_cast<Eigen::Index>(d.concentration->size()));
    return m;
}

void write_mean(const MeanField& m, const SnapshotDataset& like, const std::string& path) {
    SnapshotDataset d;
    d.geometry = like.geometry;
    d.meta = like.meta;
    d.times = {0.0};
    d.velocity.assign(m.mean_velocity.data(), m.mean_velocity.data() + m.mean_velocity.size());
    if (m.mean_concentration)
        d.concentration = std::vector<double>(m.mean_concentration->data(), m.mean_concentration->data() + m.mean_concentration->size());
    write_snapshots(d, path);
}

void add_synth(CLI::App& app, const Globals& g) {
    auto* c = app.add_subcommand("synth", "Generate a synthetic flow dataset");
    auto cfg = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    c->add_option("--config", *cfg, "synthetic-flow JSON (or a master config with a synth section)")->required()->check(CLI::ExistingFile);
    c->add_option("--out", *out, "output .srom")->required();
    c->callback([=, &g] {
        const auto j = read_json_file(*cfg);
        const auto s = (j.contains("synth") ? j.at("synth") : j).get<SynthConfig>();
        const auto seed = seed_or(g, j.value("seed", std::uint64_t{0}));
        const auto d = synthesize_flow(s, seed);
        write_snapshots(d, *out);
        say("wrote " + *out + ": " + std::to_string(d.n_t()) + " frames, " + std::to_string(d.geometry.nx) + "x" +
            std::to_string(d.geometry.nz) + " grid, checksum " + hex64(dataset_checksum(d)));
    });
}

void add_spod(CLI::App& app, const Globals& g) {
    auto* c = app.add_subcommand("spod", "Compute the SPOD basis of a dataset");
    struct Opts {
        std::string data, out, mean_out, mean_in, spectrum;
        std::size_t n_fft = 256;
        std::optional<std::size_t> n_ovlp;
        std::string window = "hamming";
        double train_ratio = 1.0;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--data", o->data, "input .srom")->required()->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "output basis .spob")->required();
    c->add_option("--n-fft", o->n_fft, "block length")->capture_default_str();
    c->add_option("--n-ovlp", o->n_ovlp, "block overlap (default n_fft/2)");
    c->add_option("--window", o->window, "hamming | hann | rectangular")->capture_default_str();
    c->add_option("--train-ratio", o->train_ratio, "use only this leading fraction of frames (1 = all)")->capture_default_str();
    c->add_option("--mean", o->mean_in, "subtract this mean (.srom, one frame) instead of the data mean");
    c->add_option("--mean-out", o->mean_out, "write the subtracted mean as .srom");
    c->add_option("--spectrum", o->spectrum, "write the eigenvalue spectrum CSV");
    c->callback([o, &g] {
        auto d = load_snapshots(o->data);
        if (o->train_ratio < 1.0) d = split_train_test(d, o->train_ratio).first;
        std::optional<MeanField> mean;
        if (!o->mean_in.empty()) mean = mean_from_file(o->mean_in);
        const auto [fl, m] = compute_fluctuations(d, mean);
        SpodParams p;
        p.n_fft = o->n_fft;
        p.n_ovlp = o->n_ovlp ? *o->n_ovlp : o->n_fft / 2;
        p.window = parse_window(o->window);
        const auto b = compute_spod(fl, p, g.threads);
        for (const auto& w : b.warnings) warn(w);
        write_basis(b, o->out);
        if (!o->mean_out.empty()) write_mean(m, d, o->mean_out);
        if (!o->spectrum.empty()) write_spectrum_csv(b, o->spectrum, d.meta.h_ref, d.meta.u_ref);
        say("wrote " + o->out + ": " + std::to_string(b.n_fc()) + " frequencies x " + std::to_string(b.n_blk) + " modes");
    });
}

void add_prune(CLI::App& app) {
    auto* c = app.add_subcommand("prune", "Select frequencies and deduplicate modes");
    struct Opts {
        std::string basis, out, sensitivity, data, mean;
        double eps_ric = 0.99, eps_gamma = 0.5;
        std::vector<double> grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--basis", o->basis, "basis .spob")->required()->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "output selection JSON")->required();
    c->add_option("--eps-ric", o->eps_ric, "relative information content threshold")->capture_default_str();
    c->add_option("--eps-gamma", o->eps_gamma, "similarity threshold")->capture_default_str();
    c->add_option("--sensitivity", o->sensitivity, "write an eps_gamma sweep CSV (needs --data)");
    c->add_option("--data", o->data, "dataset for the sweep's reconstruction error");
    c->add_option("--mean", o->mean, "mean (.srom) for the sweep; default: the data mean");
    c->add_option("--grid", o->grid, "eps_gamma values for the sweep");
    c->callback([o] {
        const auto b = load_basis(o->basis);
        const auto s = select_modes(b, o->eps_ric, o->eps_gamma);
        write_selection(s, o->out);
        say("wrote " + o->out + ": N_f = " + std::to_string(s.n_f()) + ", N_m = " + std::to_string(s.n_m()));
        if (!o->sensitivity.empty()) {
            require(!o->data.empty(), ErrorKind::invalid_argument, "--sensitivity needs --data");
            std::optional<MeanField> mean;
            if (!o->mean.empty()) mean = mean_from_file(o->mean);
            const auto fl = compute_fluctuations(load_snapshots(o->data), mean).first;
            write_sensitivity_csv(pruning_sensitivity(b, s.frequencies, o->grid, fl), o->sensitivity);
        }
    });
}

void add_project(CLI::App& app) {
    auto* c = app.add_subcommand("project", "Project snapshots onto (selected) SPOD modes");
    struct Opts {
        std::string data, basis, selection, mean, out, recon;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--data", o->data, "input .srom")->required()->check(CLI::ExistingFile);
    c->add_option("--basis", o->basis, "basis .spob")->required()->check(CLI::ExistingFile);
    c->add_option("--selection", o->selection, "selection JSON (default: every mode)");
    c->add_option("--mean", o->mean, "mean (.srom) to subtract; default: the data mean");
    c->add_option("--out", o->out, "output coefficients .scof")->required();
    c->add_option("--reconstruction", o->recon, "also write the reconstructed field (.srom)");
    c->callback([o] {
        const auto b = load_basis(o->basis);
        const auto d = load_snapshots(o->data);
        std::optional<MeanField> mean;
        if (!o->mean.empty()) mean = mean_from_file(o->mean);
        const auto [fl, m] = compute_fluctuations(d, mean);
        const auto keys = o->selection.empty() ? all_modes(b) : load_selection(o->selection).kept;
        const auto coeffs = project_coefficients(b, keys, fl);
        write_coefficients(coeffs, o->out);
        const auto rec = reconstruct(b, coeffs, d.geometry, d.meta);
        std::ostringstream os;
        os << "wrote " << o->out << ": " << coeffs.n_m() << " modes x " << coeffs.n_t() << " steps, reconstruction NMSE "
           << nmse(fl.velocity, rec.field.velocity);
        if (coeffs.fallback) os << " (pseudo-inverse fallback, condition " << coeffs.condition << ")";
        say(os.str());
        if (!o->recon.empty()) {
            const MeanField vm{m.mean_velocity, std::nullopt, m.source};
            write_snapshots(add_mean(rec.field, vm), o->recon);
        }
    });
}

void add_train_ae(CLI::App& app, const Globals& g) {
    auto* c = app.add_subcommand("train-ae", "Train the Re/Im autoencoder pair on SPOD coefficients");
    struct Opts {
        std::string coeffs, config, out, latent;
        std::optional<std::size_t> nz;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--coeffs", o->coeffs, "coefficients .scof")->required()->check(CLI::ExistingFile);
    c->add_option("--nz", o->nz, "latent size (overrides the config)");
    c->add_option("--config", o->config, "autoencoder JSON (or master config with an ae section)")->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "output .snnp (sidecar at <out>.json)")->required();
    c->add_option("--latent", o->latent, "also write the encoded training latent series");
    c->callback([o, &g] {
        const auto a = load_coefficients(o->coeffs);
        json j = o->config.empty() ? json::object() : section(o->config, "ae");
        AeConfig cfg = j.get<AeConfig>();
        if (o->nz) cfg.latent_size = *o->nz;
        if (!j.contains("encoder_hidden")) {
            auto t = cfg.train;
            cfg = AeConfig::desk_scale(a.n_m(), cfg.latent_size);
            cfg.train = t;
        }
        ComplexAutoencoder ae(a.n_m(), cfg, derive_seed(seed_or(g, 0), "ae"));
        ae.train(a.values, g.threads);
        ae.save(o->out);
        const auto z = ae.encode(a);
        if (!o->latent.empty()) write_latent(z, o->latent);
        say("wrote " + o->out + ": N_m = " + std::to_string(a.n_m()) + " -> N_z = " + std::to_string(cfg.latent_size) +
            ", best validation loss re " + std::to_string(ae.re().report().best_val) + " im " + std::to_string(ae.im().report().best_val));
    });
}

std::pair<LstmConfig, LstmConfig> lstm_configs(const std::string& path) {
    if (path.empty()) return {LstmConfig{}, LstmConfig{}};
    auto j = read_json_file(path);
    if (j.contains("lstm")) {
        const auto re = j.at("lstm").get<LstmConfig>();
        return {re, j.contains("lstm_im") ? j.at("lstm_im").get<LstmConfig>() : re};
    }
    if (j.contains("re")) return {j.at("re").get<LstmConfig>(), j.at(j.contains("im") ? "im" : "re").get<LstmConfig>()};
    const auto c = j.get<LstmConfig>();
    return {c, c};
}

void add_search_lstm(CLI::App& app, const Globals& g) {
    auto* c = app.add_subcommand("search-lstm", "Random hyper-parameter search for the forecaster");
    struct Opts {
        std::string latent, space, out, config, best;
        std::size_t trials = 20, epochs = 100;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--latent", o->latent, "latent series file")->required()->check(CLI::ExistingFile);
    c->add_option("--space", o->space, "search-space JSON")->check(CLI::ExistingFile);
    c->add_option("--trials", o->trials)->capture_default_str();
    c->add_option("--epochs", o->epochs)->capture_default_str();
    c->add_option("--config", o->config, "base LSTM config")->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "trials CSV")->required();
    c->add_option("--best", o->best, "write the best configuration as JSON");
    c->callback([o, &g] {
        const auto z = load_latent(o->latent);
        const SearchSpace space = o->space.empty() ? SearchSpace{} : section(o->space, "space").get<SearchSpace>();
        const auto base = lstm_configs(o->config).first;
        const auto r = random_search(z.values.real(), space, o->trials, o->epochs, derive_seed(seed_or(g, 0), "search"), base, g.threads);
        write_trials_csv(r.trials, o->out);
        if (!o->best.empty()) write_json_file(r.best, o->best);
        say("wrote " + o->out + ": best trial " + std::to_string(r.best_trial) + " (N_h " + std::to_string(r.best.n_h) +
            ", batch " + std::to_string(r.best.train.batch_size) + ", lr " + std::to_string(r.best.train.learning_rate) + ")");
    });
}

void add_train_lstm(CLI::App& app, const Globals& g) {
    auto* c = app.add_subcommand("train-lstm", "Train the Re/Im forecaster pair on a latent series");
    struct Opts {
        std::string latent, config, out;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--latent", o->latent, "latent series file")->required()->check(CLI::ExistingFile);
    c->add_option("--config", o->config, "LSTM JSON (single, {re, im}, or master config)")->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "output .snnp (sidecar at <out>.json)")->required();
    c->callback([o, &g] {
        const auto z = load_latent(o->latent);
        const auto [re, im] = lstm_configs(o->config);
        ComplexForecaster f(z.n_z(), re, im, derive_seed(seed_or(g, 0), "lstm"));
        f.train(z.values, g.threads);
        f.save(o->out);
        say("wrote " + o->out + ": N_z = " + std::to_string(z.n_z()) + ", window " + std::to_string(f.window()) +
            ", best validation loss re " + std::to_string(f.re().report().best_val) + " im " + std::to_string(f.im().report().best_val));
    });
}

void add_train_cnn(CLI::App& app, const Globals& g) {
    auto* c = app.add_subcommand("train-cnn", "Train the velocity-to-concentration network");
    struct Opts {
        std::string data, config, out, velocity;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--data", o->data, "dataset with concentration (.srom)")->required()->check(CLI::ExistingFile);
    c->add_option("--config", o->config, "CNN JSON (or master config with a cnn section)")->check(CLI::ExistingFile);
    c->add_option("--velocity", o->velocity, "input velocity (.srom), e.g. a reconstruction; default: the data velocity");
    c->add_option("--out", o->out, "output .snnp (sidecar at <out>.json)")->required();
    c->callback([o, &g] {
        const auto d = load_snapshots(o->data);
        require(d.concentration.has_value(), ErrorKind::invalid_argument, "'" + o->data + "' carries no concentration");
        const CnnConfig cfg = o->config.empty() ? CnnConfig{} : section(o->config, "cnn").get<CnnConfig>();
        SnapshotDataset input = d;
        input.concentration.reset();
        if (!o->velocity.empty()) {
            input = load_snapshots(o->velocity);
            input.concentration.reset();
            require(input.n_t() == d.n_t() && input.geometry.mask == d.geometry.mask, ErrorKind::invalid_argument,
                    "--velocity does not align with --data");
        } else if (cfg.training_input == CnnTrainingInput::reconstruction) {
            throw Error(ErrorKind::invalid_argument, "training_input is reconstruction: pass the reconstructed field with --velocity");
        }
        ScalarMapper m(d.geometry, d.meta.n_v, cfg, derive_seed(seed_or(g, 0), "cnn"));
        m.train(input, *d.concentration);
        m.save(o->out);
        say("wrote " + o->out + ": best validation loss " + std::to_string(m.report().best_val));
    });
}

void add_map(CLI::App& app) {
    auto* c = app.add_subcommand("map", "Map velocity frames to concentration with a trained network");
    struct Opts {
        std::string cnn, velocity, out;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--cnn", o->cnn, "trained .snnp")->required()->check(CLI::ExistingFile);
    c->add_option("--velocity", o->velocity, "velocity .srom")->required()->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "output .srom (velocity plus mapped concentration)")->required();
    c->callback([o] {
        const auto m = ScalarMapper::load(o->cnn);
        auto d = load_snapshots(o->velocity);
        d.concentration.reset();
        d.concentration = m.map(d);
        write_snapshots(d, o->out);
        say("wrote " + o->out + ": " + std::to_string(d.n_t()) + " frames");
    });
}

void add_offline(CLI::App& app, const Globals& g) {
    auto* c = app.add_subcommand("offline", "Run the full training phase and write a model bundle");
    struct Opts {
        std::string data, config, out, cache, test_out;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--data", o->data, "input .srom (default: synthesize from the config's synth section)")->check(CLI::ExistingFile);
    c->add_option("--config", o->config, "master config JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "bundle directory")->required();
    c->add_option("--cache", o->cache, "directory for reusable stage artifacts");
    c->add_option("--test-out", o->test_out, "write the held-out frames (.srom)");
    c->callback([o, &g] {
        auto cfg = load_master_config(o->config);
        if (g.seed) cfg.seed = *g.seed;
        cfg.threads = g.threads;
        SnapshotDataset d;
        if (!o->data.empty()) {
            d = run_stage("dataset", [&] { return load_snapshots(o->data); });
        } else {
            require(cfg.synth.has_value(), ErrorKind::invalid_argument, "no --data and no synth section in the config");
            d = synthesize_flow(*cfg.synth, cfg.seed);
        }
        OfflineOptions opt;
        if (!o->cache.empty()) opt.cache_dir = o->cache;
        opt.log = [](const std::string& s) { std::cerr << s << '\n'; };
        const auto r = run_offline(d, cfg, opt);
        save_bundle(r.bundle, o->out);
        if (!o->test_out.empty()) write_snapshots(r.test, o->test_out);
        const auto& m = r.bundle.manifest.at("offline_metrics");
        say("wrote bundle " + o->out + ": N_f = " + std::to_string(r.bundle.selection.n_f()) + ", N_m = " + std::to_string(r.bundle.n_m()) +
            ", N_z = " + std::to_string(r.bundle.n_z()) + ", projection NMSE " + m.at("projection_nmse_train").dump() +
            ", autoencoder NMSE " + m.at("ae_nmse_train").dump());
    });
}

ReportConfig bundle_report_config(const ModelBundle& b) {
    const auto& cfg = b.manifest.at("config");
    return cfg.get<MasterConfig>().report;
}

void print_summary(const json& s) {
    const auto& v = s.at("metrics").at("velocity_nmse");
    if (v.is_null()) return;
    say("velocity NMSE: overall " + v.at("overall").dump() + ", mean per step " + v.at("mean_per_step").dump() +
        ", bounded " + v.at("saturation").at("bounded").dump());
    const auto& c = s.at("metrics").at("concentration_nmse");
    if (!c.is_null()) say("concentration NMSE: overall " + c.at("overall").dump());
}

void add_predict(CLI::App& app) {
    auto* c = app.add_subcommand("predict", "Forecast from an init window with a trained bundle");
    struct Opts {
        std::string bundle, window, reference, out, rollout;
        std::optional<std::size_t> horizon, init_frames;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--bundle", o->bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--init-frames", o->init_frames,
                  "use the first N frames of --window as the init window; without --reference the rest is the reference");
    c->add_option("--window", o->window, "init window .srom (its last N_t_in frames are used)")->required()->check(CLI::ExistingFile);
    c->add_option("--horizon", o->horizon, "steps to forecast (default: from the bundle config, else the reference length)");
    c->add_option("--reference", o->reference, "frames following the window, for scoring (.srom)")->check(CLI::ExistingFile);
    c->add_option("--rollout", o->rollout, "sliding_window | carry_state");
    c->add_option("--out", o->out, "output directory (prediction plus report)")->required();
    c->callback([o] {
        const auto b = load_bundle(o->bundle);
        const auto cfg = b.manifest.at("config").get<MasterConfig>();
        auto w = load_snapshots(o->window);
        std::optional<SnapshotDataset> ref;
        if (!o->reference.empty()) ref = load_snapshots(o->reference);
        if (o->init_frames) {
            require(*o->init_frames >= 1 && *o->init_frames <= w.n_t(), ErrorKind::invalid_argument, "--init-frames out of range");
            if (!ref && *o->init_frames < w.n_t()) ref = w.slice(*o->init_frames, w.n_t());
            w = w.slice(0, *o->init_frames);
        }
        std::size_t h = o->horizon ? *o->horizon : cfg.horizon;
        if (!o->horizon && h == 0 && ref) h = ref->n_t();
        const auto mode = o->rollout.empty() ? cfg.rollout : parse_rollout(o->rollout);
        const auto r = run_online(b, w, h, ref ? &*ref : nullptr, mode);
        write_prediction(r, o->out);
        if (ref) write_snapshots(ref->slice(0, r.prediction.n_t()), o->out + "/reference.srom");
        const auto s = emit_report(b, r.prediction, r.latent, ref ? &*ref : nullptr, cfg.report, o->out);
        say("wrote " + o->out + ": " + std::to_string(r.prediction.n_t()) + " predicted frames");
        print_summary(s);
    });
}

void add_report(CLI::App& app) {
    auto* c = app.add_subcommand("report", "Regenerate report files from persisted prediction artifacts");
    struct Opts {
        std::string bundle, prediction, latent, reference, out;
    };
    auto o = std::make_shared<Opts>();
    c->add_option("--bundle", o->bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--prediction", o->prediction, "prediction .srom")->required()->check(CLI::ExistingFile);
    c->add_option("--latent", o->latent, "predicted latent series")->required()->check(CLI::ExistingFile);
    c->add_option("--reference", o->reference, "reference .srom")->check(CLI::ExistingFile);
    c->add_option("--out", o->out, "report directory")->required();
    c->callback([o] {
        const auto b = load_bundle(o->bundle);
        const auto p = load_snapshots(o->prediction);
        const auto z = load_latent(o->latent);
        std::optional<SnapshotDataset> ref;
        if (!o->reference.empty()) ref = load_snapshots(o->reference);
        const auto s = emit_report(b, p, z, ref ? &*ref : nullptr, bundle_report_config(b), o->out);
        validate_summary(s);
        say("wrote report to " + o->out);
        print_summary(s);
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spectral reduced-order modelling of flow and scalar dispersion"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "master seed (overrides config seeds)");
    app.add_option("--threads", g.threads, "worker threads; 1 is bit-reproducible")->capture_default_str()->check(CLI::PositiveNumber);
    add_synth(app, g);
    add_spod(app, g);
    add_prune(app);
    add_project(app);
    add_train_ae(app, g);
    add_search_lstm(app, g);
    add_train_lstm(app, g);
    add_train_cnn(app, g);
    add_map(app);
    add_offline(app, g);
    add_predict(app);
    add_report(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "srom: error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "srom: error: format-error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "srom: error: internal: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
