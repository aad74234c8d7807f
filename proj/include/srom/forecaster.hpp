#ifndef SROM_FORECASTER_HPP
#define SROM_FORECASTER_HPP

// LSTM next-step model on latent series, closed-loop rollout, random
// hyper-parameter search and the statistics used to judge long rollouts
// (Poincare sections, histograms, Jensen-Shannon divergence).

#include "srom/autoencoder.hpp"
#include "srom/nn.hpp"

#include <unsupported/Eigen/FFT>

#include <array>
#include <atomic>
#include <mutex>

namespace srom {

struct LstmConfig {
    std::size_t n_h = 32;
    std::size_t n_t_in = 10;
    std::size_t n_t_out = 1;
    nn::TrainConfig train{};

    void validate() const {
        require(n_h > 0, ErrorKind::invalid_argument, "hidden size must be positive");
        require(n_t_in >= 1, ErrorKind::invalid_argument, "input window must hold at least one step");
        require(n_t_out == 1, ErrorKind::invalid_argument, "only single-step output is supported for autoregression");
        train.validate();
    }
};

inline void to_json(nlohmann::json& j, const LstmConfig& c) {
    j = {{"n_h", c.n_h}, {"n_t_in", c.n_t_in}, {"n_t_out", c.n_t_out}, {"train", c.train}};
}

inline void from_json(const nlohmann::json& j, LstmConfig& c) {
    LstmConfig d;
    c.n_h = j.value("n_h", d.n_h);
    c.n_t_in = j.value("n_t_in", d.n_t_in);
    c.n_t_out = j.value("n_t_out", d.n_t_out);
    c.train = j.contains("train") ? j.at("train").get<nn::TrainConfig>() : d.train;
}

enum class RolloutMode : std::uint8_t {
    sliding_window,  ///< restart from a zero state on the latest N_t_in values every step (the trained regime)
    carry_state,     ///< warm up on the seed window, then keep feeding predictions to the same cell state
};

struct ForecastResult {
    Matrix values;                ///< [N_z x horizon]
    std::size_t seed_start = 0;   ///< column of the seed window in its source series, when known
    std::size_t seed_length = 0;
    double bound = 0.0;           ///< 10x the largest training magnitude
    double max_abs = 0.0;
    bool diverged = false;        ///< some |z| exceeded `bound`
    std::optional<std::size_t> first_exceed;
};

/// One LSTM with its latent standardization.
class Forecaster {
public:
    static constexpr double kDivergenceFactor = 10.0;

    Forecaster() = default;
    Forecaster(std::size_t n_z, const LstmConfig& cfg, std::uint64_t seed, const std::string& prefix = "lstm")
        : cfg_(cfg), n_z_(n_z) {
        cfg_.validate();
        require(n_z > 0, ErrorKind::invalid_argument, "latent size must be positive");
        store_.seed = seed;
        Rng rng(seed);
        lstm_ = nn::Lstm(store_, prefix, n_z, cfg_.n_h, rng);
        stats_.mean = Vector::Zero(static_cast<Eigen::Index>(n_z));
        stats_.scale = Vector::Ones(static_cast<Eigen::Index>(n_z));
    }

    /// Windows of N_t_in steps predict the next column; the last windows validate.
    const nn::TrainReport& train(const Matrix& series) {
        check_rows(series, "train");
        require(series.allFinite(), ErrorKind::invalid_data, "non-finite latent values");
        const auto n_t = static_cast<std::size_t>(series.cols());
        require(n_t > cfg_.n_t_in + 1, ErrorKind::insufficient_data,
                "series of " + std::to_string(n_t) + " steps is too short for a window of " + std::to_string(cfg_.n_t_in));
        const std::size_t n_win = n_t - cfg_.n_t_in;
        const auto n_train = chronological_train_count(n_win, cfg_.train.validation_fraction);
        const auto train_cols = static_cast<Eigen::Index>(n_train + cfg_.n_t_in);
        stats_ = nn::Standardizer::fit(series.leftCols(train_cols));
        bound_ = kDivergenceFactor * series.leftCols(train_cols).cwiseAbs().maxCoeff();
        const Matrix zs = stats_.apply(series);

        std::vector<std::size_t> val_idx(n_win - n_train);
        for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = n_train + i;

        nn::FitProblem prob;
        prob.n_train = n_train;
        prob.batch_loss = [&](const std::vector<std::size_t>& idx) {
            nn::Lstm::SequenceCache cache;
            const Matrix y = lstm_.forward(store_, windows(zs, idx), &cache);
            const auto l = nn::mse_loss(y, targets(zs, idx));
            lstm_.backward(store_, cache, l.grad);
            return l.loss;
        };
        prob.validation_loss = [&] { return nn::mse_loss(lstm_.forward(store_, windows(zs, val_idx)), targets(zs, val_idx)).loss; };
        report_ = nn::fit(store_, cfg_.train, prob);
        return report_;
    }

    /// Next value after each window: column j predicts series column j + N_t_in.
    Matrix teacher_forced(const Matrix& series) const {
        check_rows(series, "teacher_forced");
        require(static_cast<std::size_t>(series.cols()) > cfg_.n_t_in, ErrorKind::insufficient_data,
                "series shorter than the input window");
        const Matrix zs = stats_.apply(series);
        std::vector<std::size_t> idx(static_cast<std::size_t>(series.cols()) - cfg_.n_t_in);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return stats_.invert(lstm_.forward(store_, windows(zs, idx)));
    }

    /// One prediction from a window [N_z x N_t_in].
    Vector predict_next(const Matrix& window) const {
        check_window(window);
        std::vector<Matrix> seq;
        const Matrix zs = stats_.apply(window);
        for (Eigen::Index t = 0; t < zs.cols(); ++t) seq.emplace_back(zs.col(t));
        return stats_.invert(lstm_.forward(store_, seq));
    }

    ForecastResult rollout(const Matrix& seed_window, std::size_t horizon, RolloutMode mode = RolloutMode::sliding_window) const {
        check_window(seed_window);
        require(horizon >= 1, ErrorKind::invalid_argument, "horizon must be at least one step");
        ForecastResult r;
        r.seed_length = cfg_.n_t_in;
        r.bound = bound_;
        r.values.resize(static_cast<Eigen::Index>(n_z_), static_cast<Eigen::Index>(horizon));
        const Matrix zs = stats_.apply(seed_window);
        auto record = [&](std::size_t t, const Matrix& y_std) {
            const Matrix y = stats_.invert(y_std);
            require(y.allFinite(), ErrorKind::rollout_diverged, "rollout produced non-finite values at step " + std::to_string(t));
            r.values.col(static_cast<Eigen::Index>(t)) = y;
            const double m = y.cwiseAbs().maxCoeff();
            r.max_abs = std::max(r.max_abs, m);
            if (m > bound_ && !r.first_exceed) {
                r.diverged = true;
                r.first_exceed = t;
            }
        };
        if (mode == RolloutMode::carry_state) {
            nn::LstmState st = lstm_.zero_state(1);
            for (Eigen::Index t = 0; t < zs.cols(); ++t) st = lstm_.step(store_, st, zs.col(t));
            Matrix y = lstm_.readout(store_, st.h);
            for (std::size_t t = 0;; ++t) {
                require(st.h.allFinite() && st.s.allFinite(), ErrorKind::rollout_diverged,
                        "recurrent state became non-finite at step " + std::to_string(t));
                record(t, y);
                if (t + 1 == horizon) break;
                st = lstm_.step(store_, st, y);
                y = lstm_.readout(store_, st.h);
            }
        } else {
            std::vector<Matrix> seq;
            for (Eigen::Index t = 0; t < zs.cols(); ++t) seq.emplace_back(zs.col(t));
            for (std::size_t t = 0; t < horizon; ++t) {
                const Matrix y = lstm_.forward(store_, seq);
                record(t, y);
                seq.erase(seq.begin());
                seq.push_back(y);
            }
        }
        return r;
    }

    const LstmConfig& config() const { return cfg_; }
    std::size_t n_z() const { return n_z_; }
    double bound() const { return bound_; }
    const nn::Standardizer& stats() const { return stats_; }
    const nn::TrainReport& report() const { return report_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    nlohmann::json sidecar() const {
        return {{"n_z", n_z_}, {"config", cfg_}, {"stats", stats_}, {"bound", bound_}, {"seed", store_.seed},
                {"best_epoch", report_.best_epoch}, {"best_val", report_.best_val}};
    }
    void restore_sidecar(const nlohmann::json& j) {
        stats_ = j.at("stats").get<nn::Standardizer>();
        require(static_cast<std::size_t>(stats_.mean.size()) == n_z_, ErrorKind::format, "standardizer size mismatch");
        bound_ = j.at("bound").get<double>();
        report_.best_epoch = j.value("best_epoch", std::size_t{0});
        report_.best_val = j.value("best_val", 0.0);
    }

private:
    std::vector<Matrix> windows(const Matrix& zs, const std::vector<std::size_t>& idx) const {
        std::vector<Matrix> seq(cfg_.n_t_in, Matrix(zs.rows(), static_cast<Eigen::Index>(idx.size())));
        for (std::size_t t = 0; t < cfg_.n_t_in; ++t)
            for (std::size_t j = 0; j < idx.size(); ++j)
                seq[t].col(static_cast<Eigen::Index>(j)) = zs.col(static_cast<Eigen::Index>(idx[j] + t));
        return seq;
    }
    Matrix targets(const Matrix& zs, const std::vector<std::size_t>& idx) const {
        Matrix y(zs.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) y.col(static_cast<Eigen::Index>(j)) = zs.col(static_cast<Eigen::Index>(idx[j] + cfg_.n_t_in));
        return y;
    }
    void check_rows(const Matrix& m, const char* what) const {
        require(static_cast<std::size_t>(m.rows()) == n_z_, ErrorKind::invalid_argument,
                std::string(what) + ": expected " + std::to_string(n_z_) + " rows, got " + std::to_string(m.rows()));
    }
    void check_window(const Matrix& w) const {
        check_rows(w, "window");
        require(static_cast<std::size_t>(w.cols()) == cfg_.n_t_in, ErrorKind::invalid_argument,
                "window must have " + std::to_string(cfg_.n_t_in) + " steps, got " + std::to_string(w.cols()));
        require(w.allFinite(), ErrorKind::invalid_data, "non-finite seed window");
    }

    LstmConfig cfg_;
    std::size_t n_z_ = 0;
    nn::ParamStore store_;
    nn::Lstm lstm_;
    nn::Standardizer stats_;
    nn::TrainReport report_;
    double bound_ = std::numeric_limits<double>::infinity();
};

/// Per-row Pearson correlation; NaN where either row is constant.
inline Vector channel_correlation(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols() && a.cols() > 1, ErrorKind::invalid_argument,
            "correlation needs two equally shaped series of length >= 2");
    Vector r(a.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const Eigen::RowVectorXd x = a.row(i).array() - a.row(i).mean();
        const Eigen::RowVectorXd y = b.row(i).array() - b.row(i).mean();
        const double d = std::sqrt(x.squaredNorm() * y.squaredNorm());
        r(i) = d > 0.0 ? x.dot(y) / d : std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

/// Separate forecasters for the real and imaginary latent channels.
class ComplexForecaster {
public:
    ComplexForecaster() = default;
    ComplexForecaster(std::size_t n_z, const LstmConfig& re_cfg, const LstmConfig& im_cfg, std::uint64_t seed)
        : re_(n_z, with_seed(re_cfg, seed, "lstm-re-batches"), derive_seed(seed, "lstm-re"), "re"),
          im_(n_z, with_seed(im_cfg, seed, "lstm-im-batches"), derive_seed(seed, "lstm-im"), "im"),
          seed_(seed) {}

    void train(const CMatrix& z, unsigned threads = 1) {
        const Matrix re = z.real(), im = z.imag();
        if (threads > 1) {
            std::exception_ptr err;
            std::thread t([&] {
                try {
                    im_.train(im);
                } catch (...) {
                    err = std::current_exception();
                }
            });
            try {
                re_.train(re);
            } catch (...) {
                t.join();
                throw;
            }
            t.join();
            if (err) std::rethrow_exception(err);
        } else {
            re_.train(re);
            im_.train(im);
        }
    }

    struct Rollout {
        CMatrix values;
        ForecastResult re, im;
        Vector correlation;  ///< per-dimension Re/Im correlation of the rollout, a diagnostic only
        bool diverged() const { return re.diverged || im.diverged; }
    };

    Rollout rollout(const CMatrix& seed_window, std::size_t horizon, RolloutMode mode = RolloutMode::sliding_window) const {
        Rollout r;
        r.re = re_.rollout(seed_window.real(), horizon, mode);
        r.im = im_.rollout(seed_window.imag(), horizon, mode);
        r.values.resize(r.re.values.rows(), r.re.values.cols());
        r.values.real() = r.re.values;
        r.values.imag() = r.im.values;
        if (horizon > 1) r.correlation = channel_correlation(r.re.values, r.im.values);
        return r;
    }

    const Forecaster& re() const { return re_; }
    const Forecaster& im() const { return im_; }
    std::size_t n_z() const { return re_.n_z(); }
    std::size_t window() const { return re_.config().n_t_in; }
    std::uint64_t seed() const { return seed_; }

    void save(const std::string& path) const {
        nn::write_params({&re_.params(), &im_.params()}, path);
        nlohmann::json j = {{"kind", "complex-forecaster"}, {"seed", seed_}, {"n_z", n_z()},
                            {"re", re_.sidecar()}, {"im", im_.sidecar()}};
        std::ofstream f(path + ".json");
        require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + ".json'");
        f << j.dump(2) << '\n';
        require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + ".json'");
    }

    static ComplexForecaster load(const std::string& path) {
        std::ifstream f(path + ".json");
        require(static_cast<bool>(f), ErrorKind::io, "cannot open '" + path + ".json'");
        try {
            nlohmann::json j;
            f >> j;
            require(j.at("kind") == "complex-forecaster", ErrorKind::format, "sidecar is not a forecaster");
            ComplexForecaster m;
            m.seed_ = j.at("seed").get<std::uint64_t>();
            const auto n_z = j.at("n_z").get<std::size_t>();
            m.re_ = Forecaster(n_z, j.at("re").at("config").get<LstmConfig>(), derive_seed(m.seed_, "lstm-re"), "re");
            m.im_ = Forecaster(n_z, j.at("im").at("config").get<LstmConfig>(), derive_seed(m.seed_, "lstm-im"), "im");
            nn::read_params({&m.re_.params(), &m.im_.params()}, path);
            m.re_.restore_sidecar(j.at("re"));
            m.im_.restore_sidecar(j.at("im"));
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::format, "malformed forecaster sidecar '" + path + ".json': " + e.what());
        }
    }

private:
    static LstmConfig with_seed(LstmConfig c, std::uint64_t seed, const char* tag) {
        c.train.seed = derive_seed(seed, tag);
        return c;
    }

    Forecaster re_, im_;
    std::uint64_t seed_ = 0;
};

// ---------------------------------------------------------------------------
// Random search
// ---------------------------------------------------------------------------

struct SearchSpace {
    std::array<std::size_t, 2> n_h{50, 200};
    std::array<std::size_t, 2> batch{500, 1000};
    std::array<double, 2> lr{5e-4, 1e-3};

    void validate() const {
        require(n_h[0] >= 1 && n_h[0] <= n_h[1], ErrorKind::invalid_argument, "bad hidden-size range");
        require(batch[0] >= 1 && batch[0] <= batch[1], ErrorKind::invalid_argument, "bad batch range");
        require(lr[0] > 0.0 && lr[0] <= lr[1], ErrorKind::invalid_argument, "bad learning-rate range");
    }
};

inline void to_json(nlohmann::json& j, const SearchSpace& s) { j = {{"n_h", s.n_h}, {"batch", s.batch}, {"lr", s.lr}}; }

inline void from_json(const nlohmann::json& j, SearchSpace& s) {
    SearchSpace d;
    s.n_h = j.value("n_h", d.n_h);
    s.batch = j.value("batch", d.batch);
    s.lr = j.value("lr", d.lr);
}

struct Trial {
    std::size_t index = 0;
    std::size_t n_h = 0, batch = 0;
    double lr = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    bool diverged = false;
};

struct SearchResult {
    LstmConfig best;
    std::size_t best_trial = 0;
    std::vector<Trial> trials;
};

/// Uniformly sampled trials, each trained for `epochs` with its own seed.
/// Sampling is sequential, so the trial list is independent of `threads`.
inline SearchResult random_search(const Matrix& series, const SearchSpace& space, std::size_t trials, std::size_t epochs,
                                  std::uint64_t seed, const LstmConfig& base = {}, unsigned threads = 1) {
    space.validate();
    require(trials >= 1 && epochs >= 1, ErrorKind::invalid_argument, "need at least one trial and one epoch");
    Rng rng(derive_seed(seed, "search-space"));
    std::vector<Trial> out(trials);
    for (std::size_t i = 0; i < trials; ++i) {
        out[i].index = i;
        out[i].n_h = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(space.n_h[0]), static_cast<std::int64_t>(space.n_h[1])));
        out[i].batch = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(space.batch[0]), static_cast<std::int64_t>(space.batch[1])));
        out[i].lr = space.lr[0] == space.lr[1] ? space.lr[0] : rng.uniform(space.lr[0], space.lr[1]);
    }
    auto config_of = [&](const Trial& t) {
        LstmConfig c = base;
        c.n_h = t.n_h;
        c.train.batch_size = t.batch;
        c.train.learning_rate = t.lr;
        c.train.epochs = epochs;
        return c;
    };
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < trials;) {
            try {
                Forecaster f(static_cast<std::size_t>(series.rows()), config_of(out[i]), derive_seed(seed, "trial-" + std::to_string(i)));
                out[i].val_loss = f.train(series).best_val;
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::training_diverged) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!err) err = std::current_exception();
                    continue;
                }
                out[i].diverged = true;
            }
        }
    };
    const unsigned n_workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(trials)));
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);

    SearchResult res;
    res.trials = out;
    bool any = false;
    for (const auto& t : out)
        if (!t.diverged && (!any || t.val_loss < out[res.best_trial].val_loss)) {
            res.best_trial = t.index;
            any = true;
        }
    require(any, ErrorKind::search_failed, "all " + std::to_string(trials) + " trials diverged");
    res.best = config_of(out[res.best_trial]);
    return res;
}

inline void write_trials_csv(const std::vector<Trial>& trials, const std::string& path) {
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + "'");
    f.precision(10);
    f << "trial,N_h,batch,lr,val_loss\n";
    for (const auto& t : trials) {
        f << t.index << ',' << t.n_h << ',' << t.batch << ',' << t.lr << ',';
        if (t.diverged)
            f << "nan";
        else
            f << t.val_loss;
        f << '\n';
    }
    require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Data range widened by 10% of its span on each side (or by 10% of the
/// magnitude, at least 0.1, for a degenerate range).
inline std::array<double, 2> padded_range(double lo, double hi) {
    const double span = hi - lo;
    const double pad = span > 0.0 ? 0.1 * span : 0.1 * std::max(1.0, std::abs(lo));
    return {lo - pad, hi + pad};
}

struct Histogram1D {
    double lo = 0.0, hi = 1.0;
    Vector density;  ///< integrates to one over [lo, hi]
    double width() const { return (hi - lo) / static_cast<double>(density.size()); }
    Vector mass() const { return density * width(); }
};

inline std::size_t bin_of(double v, double lo, double hi, std::size_t n) {
    const double u = (v - lo) / (hi - lo) * static_cast<double>(n);
    if (!(u >= 0.0)) return 0;
    return std::min(n - 1, static_cast<std::size_t>(u));
}

/// Normalized histogram; values outside an explicit range are dropped.
inline Histogram1D coefficient_pdf(const Vector& x, std::size_t bins = 50, std::optional<std::array<double, 2>> range = {}) {
    require(x.size() > 0, ErrorKind::invalid_argument, "cannot build a PDF from an empty series");
    require(bins >= 1, ErrorKind::invalid_argument, "need at least one bin");
    require(x.allFinite(), ErrorKind::invalid_data, "non-finite samples");
    const auto r = range ? *range : padded_range(x.minCoeff(), x.maxCoeff());
    require(r[1] > r[0], ErrorKind::invalid_argument, "empty histogram range");
    Histogram1D h{r[0], r[1], Vector::Zero(static_cast<Eigen::Index>(bins))};
    double n = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (x(i) < r[0] || x(i) > r[1]) continue;
        h.density(static_cast<Eigen::Index>(bin_of(x(i), r[0], r[1], bins))) += 1.0;
        n += 1.0;
    }
    require(n > 0.0, ErrorKind::invalid_argument, "no samples fall inside the histogram range");
    h.density /= n * h.width();
    return h;
}

struct Histogram2D {
    double x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;
    Matrix density;  ///< [nx x ny], integrates to one
    double cell_area() const {
        return (x_hi - x_lo) / static_cast<double>(density.rows()) * (y_hi - y_lo) / static_cast<double>(density.cols());
    }
    Matrix mass() const { return density * cell_area(); }
};

/// x from row 0 of `points`, y from row 1 (or a single unit-wide y bin when
/// there is only one row).
inline Histogram2D histogram2d(const Matrix& points, std::size_t nx, std::size_t ny,
                               std::optional<std::array<double, 4>> range = {}) {
    require(points.rows() >= 1 && points.rows() <= 2, ErrorKind::invalid_argument, "points must have one or two rows");
    require(points.cols() > 0, ErrorKind::invalid_argument, "no points to bin");
    const bool flat = points.rows() == 1;
    if (flat) ny = 1;
    std::array<double, 4> r{};
    if (range) {
        r = *range;
    } else {
        const auto rx = padded_range(points.row(0).minCoeff(), points.row(0).maxCoeff());
        const auto ry = flat ? std::array<double, 2>{-0.5, 0.5} : padded_range(points.row(1).minCoeff(), points.row(1).maxCoeff());
        r = {rx[0], rx[1], ry[0], ry[1]};
    }
    require(r[1] > r[0] && r[3] > r[2], ErrorKind::invalid_argument, "empty histogram range");
    Histogram2D h{r[0], r[1], r[2], r[3], Matrix::Zero(static_cast<Eigen::Index>(nx), static_cast<Eigen::Index>(ny))};
    double n = 0.0;
    for (Eigen::Index j = 0; j < points.cols(); ++j) {
        const double x = points(0, j), y = flat ? 0.0 : points(1, j);
        if (x < r[0] || x > r[1] || y < r[2] || y > r[3]) continue;
        h.density(static_cast<Eigen::Index>(bin_of(x, r[0], r[1], nx)), static_cast<Eigen::Index>(bin_of(y, r[2], r[3], ny))) += 1.0;
        n += 1.0;
    }
    require(n > 0.0, ErrorKind::invalid_argument, "no points fall inside the histogram range");
    h.density /= n * h.cell_area();
    return h;
}

/// Base-2 Jensen-Shannon divergence of two mass arrays; in [0, 1].
inline double js_divergence(const Matrix& p_in, const Matrix& q_in) {
    require(p_in.rows() == q_in.rows() && p_in.cols() == q_in.cols(), ErrorKind::invalid_argument, "distributions differ in shape");
    require(p_in.minCoeff() >= 0.0 && q_in.minCoeff() >= 0.0, ErrorKind::invalid_argument, "negative probability mass");
    const double sp = p_in.sum(), sq = q_in.sum();
    require(sp > 0.0 && sq > 0.0, ErrorKind::undefined_metric, "empty distribution");
    const Matrix p = p_in / sp, q = q_in / sq;
    double d = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p(i) + q(i));
        if (p(i) > 0.0) d += 0.5 * p(i) * std::log2(p(i) / m);
        if (q(i) > 0.0) d += 0.5 * q(i) * std::log2(q(i) / m);
    }
    return std::clamp(d, 0.0, 1.0);
}

struct PoincareSection {
    Matrix points;               ///< [(d - 1) x crossings], remaining coordinates in order
    std::vector<double> times;   ///< fractional sample index of each crossing
    std::optional<Histogram2D> pdf;
    bool empty() const { return points.cols() == 0; }
};

/// Padded range of the two section coordinates over whole trajectories
/// (several series give a common range).
inline std::array<double, 4> section_range(const Matrix& a, const Matrix& b, std::size_t plane = 0) {
    require(a.rows() == b.rows() && a.rows() >= 2 && a.cols() > 0 && b.cols() > 0, ErrorKind::invalid_argument,
            "trajectories differ in dimension or are empty");
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < a.rows() && keep.size() < 2; ++i)
        if (i != static_cast<Eigen::Index>(plane)) keep.push_back(i);
    auto span = [&](Eigen::Index r) {
        return padded_range(std::min(a.row(r).minCoeff(), b.row(r).minCoeff()), std::max(a.row(r).maxCoeff(), b.row(r).maxCoeff()));
    };
    const auto rx = span(keep[0]);
    const auto ry = keep.size() > 1 ? span(keep[1]) : std::array<double, 2>{-0.5, 0.5};
    return {rx[0], rx[1], ry[0], ry[1]};
}

/// Upward crossings of z_plane = 0, located by linear interpolation. The PDF
/// uses the first two remaining coordinates (one for a 2-d series) and by
/// default spans their range over the whole trajectory.
inline PoincareSection poincare_section(const Matrix& series, std::size_t plane = 0, std::size_t bins = 50,
                                        std::optional<std::array<double, 4>> range = {}) {
    require(series.rows() >= 2, ErrorKind::invalid_argument, "a section needs at least two dimensions");
    require(series.cols() >= 3, ErrorKind::insufficient_data, "a section needs at least three samples");
    require(plane < static_cast<std::size_t>(series.rows()), ErrorKind::invalid_argument, "plane index out of range");
    require(series.allFinite(), ErrorKind::invalid_data, "non-finite series");
    const auto p = static_cast<Eigen::Index>(plane);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < series.rows(); ++i)
        if (i != p) keep.push_back(i);
    std::vector<Vector> pts;
    PoincareSection out;
    for (Eigen::Index t = 0; t + 1 < series.cols(); ++t) {
        const double a = series(p, t), b = series(p, t + 1);
        if (!(a < 0.0 && b >= 0.0)) continue;
        const double u = -a / (b - a);
        Vector v(static_cast<Eigen::Index>(keep.size()));
        for (std::size_t k = 0; k < keep.size(); ++k)
            v(static_cast<Eigen::Index>(k)) = (1.0 - u) * series(keep[k], t) + u * series(keep[k], t + 1);
        pts.push_back(std::move(v));
        out.times.push_back(static_cast<double>(t) + u);
    }
    out.points.resize(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(pts.size()));
    for (std::size_t j = 0; j < pts.size(); ++j) out.points.col(static_cast<Eigen::Index>(j)) = pts[j];
    if (pts.empty()) {
        warn("Poincare section is empty: no upward crossings of dimension " + std::to_string(plane));
        return out;
    }
    out.pdf = histogram2d(out.points.topRows(std::min<Eigen::Index>(2, out.points.rows())), bins, bins,
                          range ? *range : section_range(series, series, plane));
    return out;
}

/// Dominant frequency in cycles per sample, from a zero-padded FFT of the
/// mean-removed signal refined by a parabola through the peak.
inline double dominant_frequency(const Vector& x) {
    require(x.size() >= 4, ErrorKind::insufficient_data, "signal too short for a spectrum");
    std::size_t n = 1;
    while (n < 16 * static_cast<std::size_t>(x.size())) n <<= 1;
    std::vector<double> buf(n, 0.0);
    const double mean = x.mean();
    for (Eigen::Index i = 0; i < x.size(); ++i) buf[static_cast<std::size_t>(i)] = x(i) - mean;
    Eigen::FFT<double> fft;
    std::vector<Complex> spec;
    fft.fwd(spec, buf);
    std::size_t best = 1;
    for (std::size_t k = 1; k <= n / 2; ++k)
        if (std::abs(spec[k]) > std::abs(spec[best])) best = k;
    double shift = 0.0;
    if (best > 1 && best < n / 2) {
        const double a = std::abs(spec[best - 1]), b = std::abs(spec[best]), c = std::abs(spec[best + 1]);
        const double den = a - 2.0 * b + c;
        if (den != 0.0) shift = 0.5 * (a - c) / den;
    }
    return (static_cast<double>(best) + shift) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Latent series file
// ---------------------------------------------------------------------------

// SLAT: "SLAT", u32 version, u64 basis fingerprint, u64 n_z, u64 n_t, then
// row-major values with interleaved re/im.
inline constexpr std::uint32_t kSlatVersion = 1;

inline void write_latent(const LatentSeries& z, const std::string& path) {
    io::Writer w(path);
    w.magic("SLAT");
    w.u32(kSlatVersion);
    w.u64(z.source_basis);
    w.u64(z.n_z());
    w.u64(z.n_t());
    const Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = z.values;
    w.f64s(reinterpret_cast<const double*>(rm.data()), 2 * z.n_z() * z.n_t());
    w.close();
}

inline LatentSeries load_latent(const std::string& path) {
    io::Reader r(path);
    r.expect_magic("SLAT");
    require(r.u32() == kSlatVersion, ErrorKind::format, "unsupported SLAT version");
    LatentSeries z;
    z.source_basis = r.u64();
    const auto n_z = r.u64();
    const auto n_t = r.u64();
    require(r.remaining() == n_z * n_t * 16, ErrorKind::corrupt_file, "latent payload size mismatch");
    Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(static_cast<Eigen::Index>(n_z), static_cast<Eigen::Index>(n_t));
    r.f64s(reinterpret_cast<double*>(rm.data()), 2 * n_z * n_t);
    z.values = rm;
    require(z.values.allFinite(), ErrorKind::corrupt_file, "non-finite latent values in '" + path + "'");
    return z;
}

}  // namespace srom

#endif
