#ifndef SROM_SCALAR_MAP_HPP
#define SROM_SCALAR_MAP_HPP

// Velocity -> concentration mapping with a size-preserving conv stack, plus
// flux profiles and probe extraction.

#include "srom/dataset.hpp"
#include "srom/autoencoder.hpp"
#include "srom/nn.hpp"

#include <json.hpp>

#include <fstream>

namespace srom {

enum class CnnTrainingInput : std::uint8_t { truth, reconstruction };

struct CnnConfig {
    std::vector<std::size_t> channels{2, 16, 16, 1};
    std::size_t kernel = 3;
    CnnTrainingInput training_input = CnnTrainingInput::truth;
    nn::TrainConfig train{};

    std::size_t padding() const { return (kernel - 1) / 2; }

    void validate(std::size_t n_v = 2) const {
        require(channels.size() >= 2, ErrorKind::invalid_argument, "need at least input and output channels");
        require(channels.front() == n_v, ErrorKind::invalid_argument,
                "first channel count must equal the " + std::to_string(n_v) + " velocity components");
        require(channels.back() == 1, ErrorKind::invalid_argument, "last channel count must be 1");
        for (auto c : channels) require(c > 0, ErrorKind::invalid_argument, "channel counts must be positive");
        require(kernel % 2 == 1, ErrorKind::invalid_argument, "kernel size must be odd");
        train.validate();
    }
};

inline void to_json(nlohmann::json& j, const CnnConfig& c) {
    j = {{"channels", c.channels}, {"kernel", c.kernel}, {"padding", c.padding()},
         {"training_input", c.training_input == CnnTrainingInput::truth ? "truth" : "reconstruction"}, {"train", c.train}};
}

inline void from_json(const nlohmann::json& j, CnnConfig& c) {
    CnnConfig d;
    c.channels = j.value("channels", d.channels);
    c.kernel = j.value("kernel", d.kernel);
    if (j.contains("padding"))
        require(j.at("padding").get<std::size_t>() == c.padding(), ErrorKind::invalid_argument,
                "padding must be (kernel - 1) / 2 = " + std::to_string(c.padding()));
    const auto mode = j.value("training_input", std::string("truth"));
    require(mode == "truth" || mode == "reconstruction", ErrorKind::invalid_argument, "training_input must be truth or reconstruction");
    c.training_input = mode == "truth" ? CnnTrainingInput::truth : CnnTrainingInput::reconstruction;
    c.train = j.contains("train") ? j.at("train").get<nn::TrainConfig>() : d.train;
}

/// Frames [n_t * n_x] -> conv input [n_v x (n_t * n_x)] for selected times.
inline Matrix velocity_batch(const SnapshotDataset& d, const std::vector<std::size_t>& times) {
    const auto n_x = d.n_x();
    Matrix x(static_cast<Eigen::Index>(d.n_v()), static_cast<Eigen::Index>(times.size() * n_x));
    for (std::size_t b = 0; b < times.size(); ++b)
        for (std::size_t v = 0; v < d.n_v(); ++v)
            for (std::size_t c = 0; c < n_x; ++c) x(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(b * n_x + c)) = d.u(times[b], v, c);
    return x;
}

inline Matrix scalar_batch(const std::vector<double>& frames, std::size_t n_x, const std::vector<std::size_t>& times) {
    Matrix y(1, static_cast<Eigen::Index>(times.size() * n_x));
    for (std::size_t b = 0; b < times.size(); ++b)
        for (std::size_t c = 0; c < n_x; ++c) y(0, static_cast<Eigen::Index>(b * n_x + c)) = frames[times[b] * n_x + c];
    return y;
}

/// Conv net with ReLU everywhere (the last ReLU keeps outputs >= 0). Inputs
/// are standardized per channel, outputs rescaled by a positive constant.
class ScalarMapper {
public:
    ScalarMapper() = default;
    ScalarMapper(const GridGeometry& g, std::size_t n_v, const CnnConfig& cfg, std::uint64_t seed)
        : cfg_(cfg), geometry_(g), n_v_(n_v) {
        g.validate();
        cfg_.validate(n_v);
        store_.seed = seed;
        Rng rng(seed);
        net_ = nn::ConvNet(store_, "cnn", cfg_.channels, cfg_.kernel,
                           std::vector<nn::Activation>(cfg_.channels.size() - 1, nn::Activation::relu), rng);
        in_.mean = Vector::Zero(static_cast<Eigen::Index>(n_v));
        in_.scale = Vector::Ones(static_cast<Eigen::Index>(n_v));
        mask_ = Vector(static_cast<Eigen::Index>(g.n_cells()));
        for (std::size_t c = 0; c < g.n_cells(); ++c) mask_(static_cast<Eigen::Index>(c)) = g.fluid(c) ? 1.0 : 0.0;
    }

    /// Trains on aligned frame pairs; the last 20% of frames validate.
    const nn::TrainReport& train(const SnapshotDataset& velocity, const std::vector<double>& concentration) {
        check_dataset(velocity);
        const auto n_x = geometry_.n_cells();
        require(concentration.size() == velocity.n_t() * n_x, ErrorKind::invalid_argument,
                "concentration frames do not align with the velocity frames");
        require(std::all_of(concentration.begin(), concentration.end(), [](double v) { return std::isfinite(v); }),
                ErrorKind::invalid_data, "non-finite concentration");
        const auto n_train = chronological_train_count(velocity.n_t(), cfg_.train.validation_fraction);
        std::vector<std::size_t> train_t(n_train), val_t(velocity.n_t() - n_train);
        for (std::size_t i = 0; i < n_train; ++i) train_t[i] = i;
        for (std::size_t i = 0; i < val_t.size(); ++i) val_t[i] = n_train + i;

        fit_scaling(velocity, concentration, train_t);
        const double n_fluid = static_cast<double>(geometry_.n_fluid());
        auto loss_on = [&](const std::vector<std::size_t>& t, bool grad) {
            const Matrix x = standardize(velocity_batch(velocity, t));
            const Matrix y = scalar_batch(concentration, n_x, t) / out_scale_;
            const nn::FeatureShape fs{geometry_.nz, geometry_.nx, t.size()};
            nn::ConvNet::Cache cache;
            const Matrix p = net_.forward(store_, x, fs, grad ? &cache : nullptr);
            Matrix d = p - y;
            for (std::size_t b = 0; b < t.size(); ++b)
                d.middleCols(static_cast<Eigen::Index>(b * n_x), static_cast<Eigen::Index>(n_x)).array() *= mask_.transpose().array();
            const double denom = n_fluid * static_cast<double>(t.size());
            if (grad) net_.backward(store_, cache, 2.0 * d / denom, fs);
            return d.squaredNorm() / denom;
        };
        nn::FitProblem prob;
        prob.n_train = n_train;
        prob.batch_loss = [&](const std::vector<std::size_t>& idx) {
            std::vector<std::size_t> t(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) t[i] = train_t[idx[i]];
            return loss_on(t, true);
        };
        prob.validation_loss = [&] { return loss_on(val_t, false); };
        report_ = nn::fit(store_, cfg_.train, prob);
        return report_;
    }

    /// One frame [n_v x n_x] to concentration [n_x]; solid cells are zero.
    Vector map_frame(const Matrix& velocity) const {
        require(velocity.rows() == static_cast<Eigen::Index>(n_v_) && velocity.cols() == static_cast<Eigen::Index>(geometry_.n_cells()),
                ErrorKind::invalid_argument, "velocity frame shape does not match the model grid");
        const nn::FeatureShape fs{geometry_.nz, geometry_.nx, 1};
        const Matrix p = net_.forward(store_, standardize(velocity), fs);
        return (p.row(0).transpose().array() * out_scale_ * mask_.array()).matrix();
    }

    /// All frames of `velocity`, returned time-major [n_t * n_x].
    std::vector<double> map(const SnapshotDataset& velocity) const {
        check_dataset(velocity);
        const auto n_x = geometry_.n_cells();
        std::vector<double> out(velocity.n_t() * n_x);
        for (std::size_t t = 0; t < velocity.n_t(); ++t) {
            const Vector c = map_frame(velocity_batch(velocity, {t}));
            std::copy(c.data(), c.data() + c.size(), out.begin() + static_cast<std::ptrdiff_t>(t * n_x));
        }
        return out;
    }

    /// Network output in standardized units, for property checks.
    Matrix raw_forward(const Matrix& x_std, const nn::FeatureShape& fs) const { return net_.forward(store_, x_std, fs); }

    const CnnConfig& config() const { return cfg_; }
    const GridGeometry& geometry() const { return geometry_; }
    const nn::TrainReport& report() const { return report_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const nn::ConvNet& net() const { return net_; }
    double output_scale() const { return out_scale_; }
    const nn::Standardizer& input_stats() const { return in_; }

    void save(const std::string& path) const {
        nn::write_params(store_, path);
        nlohmann::json j = {{"kind", "scalar-mapper"}, {"seed", store_.seed}, {"config", cfg_}, {"n_v", n_v_},
                            {"nx", geometry_.nx}, {"nz", geometry_.nz}, {"mask", geometry_.mask},
                            {"dx", geometry_.dx}, {"dz", geometry_.dz}, {"x0", geometry_.x0}, {"z0", geometry_.z0},
                            {"input_stats", in_}, {"output_scale", out_scale_}};
        std::ofstream f(path + ".json");
        require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + ".json'");
        f << j.dump(2) << '\n';
        require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + ".json'");
    }

    static ScalarMapper load(const std::string& path) {
        std::ifstream f(path + ".json");
        require(static_cast<bool>(f), ErrorKind::io, "cannot open '" + path + ".json'");
        try {
            nlohmann::json j;
            f >> j;
            require(j.at("kind") == "scalar-mapper", ErrorKind::format, "sidecar is not a scalar mapper");
            GridGeometry g;
            g.nx = j.at("nx");
            g.nz = j.at("nz");
            g.mask = j.at("mask").get<std::vector<std::uint8_t>>();
            g.dx = j.at("dx");
            g.dz = j.at("dz");
            g.x0 = j.at("x0");
            g.z0 = j.at("z0");
            ScalarMapper m(g, j.at("n_v"), j.at("config").get<CnnConfig>(), j.at("seed"));
            nn::read_params(m.store_, path);
            m.in_ = j.at("input_stats").get<nn::Standardizer>();
            m.out_scale_ = j.at("output_scale");
            require(m.out_scale_ > 0.0, ErrorKind::format, "output scale must be positive");
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::format, "malformed scalar-mapper sidecar '" + path + ".json': " + e.what());
        }
    }

private:
    void check_dataset(const SnapshotDataset& d) const {
        require(d.geometry.nx == geometry_.nx && d.geometry.nz == geometry_.nz && d.geometry.mask == geometry_.mask,
                ErrorKind::invalid_argument, "dataset grid does not match the model grid");
        require(d.n_v() == n_v_, ErrorKind::invalid_argument, "velocity component count does not match the model");
    }

    // Channel statistics over fluid cells of the training frames.
    void fit_scaling(const SnapshotDataset& v, const std::vector<double>& conc, const std::vector<std::size_t>& t) {
        const auto n_x = geometry_.n_cells();
        in_.mean = Vector::Zero(static_cast<Eigen::Index>(n_v_));
        in_.scale = Vector::Zero(static_cast<Eigen::Index>(n_v_));
        double n = 0.0, c2 = 0.0;
        for (auto ti : t)
            for (std::size_t c = 0; c < n_x; ++c) {
                if (!geometry_.fluid(c)) continue;
                n += 1.0;
                c2 += conc[ti * n_x + c] * conc[ti * n_x + c];
                for (std::size_t k = 0; k < n_v_; ++k) in_.mean(static_cast<Eigen::Index>(k)) += v.u(ti, k, c);
            }
        in_.mean /= n;
        for (auto ti : t)
            for (std::size_t c = 0; c < n_x; ++c) {
                if (!geometry_.fluid(c)) continue;
                for (std::size_t k = 0; k < n_v_; ++k) {
                    const double d = v.u(ti, k, c) - in_.mean(static_cast<Eigen::Index>(k));
                    in_.scale(static_cast<Eigen::Index>(k)) += d * d;
                }
            }
        in_.scale = (in_.scale / n).cwiseSqrt();
        const double rms = std::sqrt(c2 / n);
        out_scale_ = rms > 0.0 ? rms : 1.0;
    }

    // Solid cells stay zero after standardization.
    Matrix standardize(const Matrix& x) const {
        Matrix s = in_.apply(x);
        const auto n_x = static_cast<Eigen::Index>(geometry_.n_cells());
        for (Eigen::Index b = 0; b < s.cols() / n_x; ++b)
            s.middleCols(b * n_x, n_x).array().rowwise() *= mask_.transpose().array();
        return s;
    }

    CnnConfig cfg_;
    GridGeometry geometry_;
    std::size_t n_v_ = 2;
    nn::ParamStore store_;
    nn::ConvNet net_;
    nn::Standardizer in_;
    double out_scale_ = 1.0;
    Vector mask_;
    nn::TrainReport report_;
};

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Row whose cell centre is nearest to height z.
inline std::size_t nearest_row(const GridGeometry& g, double z) {
    const double u = (z - g.z0) / g.dz;
    require(u >= 0.0 && u <= static_cast<double>(g.nz), ErrorKind::invalid_argument, "height " + std::to_string(z) + " lies outside the grid");
    return std::min(g.nz - 1, static_cast<std::size_t>(u));
}

inline std::size_t nearest_column(const GridGeometry& g, double x) {
    const double u = (x - g.x0) / g.dx;
    require(u >= 0.0 && u <= static_cast<double>(g.nx), ErrorKind::invalid_argument, "position " + std::to_string(x) + " lies outside the grid");
    return std::min(g.nx - 1, static_cast<std::size_t>(u));
}

/// Time mean of w * c along row `iz`, divided by u_ref * c_ref. Solid cells
/// of the row are NaN.
inline Vector vertical_mass_flux(const SnapshotDataset& velocity, const std::vector<double>& concentration, std::size_t iz) {
    const auto& g = velocity.geometry;
    require(iz < g.nz, ErrorKind::invalid_argument, "row " + std::to_string(iz) + " outside the grid");
    require(velocity.n_v() >= 2, ErrorKind::invalid_argument, "flux needs a vertical velocity component");
    require(concentration.size() == velocity.n_t() * g.n_cells(), ErrorKind::invalid_argument,
            "concentration frames do not align with the velocity frames");
    require(velocity.n_t() > 0, ErrorKind::insufficient_data, "no frames");
    bool any = false;
    for (std::size_t ix = 0; ix < g.nx; ++ix) any = any || g.fluid(g.cell(ix, iz));
    require(any, ErrorKind::invalid_argument, "row " + std::to_string(iz) + " is entirely solid");
    const double norm = velocity.meta.u_ref * velocity.meta.c_ref;
    require(norm > 0.0, ErrorKind::invalid_argument, "reference velocity and concentration must be positive");
    Vector out(static_cast<Eigen::Index>(g.nx));
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
        const auto c = g.cell(ix, iz);
        if (!g.fluid(c)) {
            out(static_cast<Eigen::Index>(ix)) = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        double s = 0.0;
        for (std::size_t t = 0; t < velocity.n_t(); ++t) s += velocity.u(t, 1, c) * concentration[t * g.n_cells() + c];
        out(static_cast<Eigen::Index>(ix)) = s / static_cast<double>(velocity.n_t()) / norm;
    }
    return out;
}

inline Vector vertical_mass_flux(const SnapshotDataset& data, std::size_t iz) {
    require(data.concentration.has_value(), ErrorKind::invalid_argument, "dataset carries no concentration");
    return vertical_mass_flux(data, *data.concentration, iz);
}

struct ProbeSeries {
    double x = 0.0, z = 0.0;  ///< requested location
    std::size_t ix = 0, iz = 0;
    double x_cell = 0.0, z_cell = 0.0;
    std::vector<double> values;
};

/// Value history of the cell containing (x, z); `frames` is time-major with
/// stride n_cells.
inline ProbeSeries probe_history(const std::vector<double>& frames, const GridGeometry& g, double x, double z) {
    const auto n_x = g.n_cells();
    require(n_x > 0 && frames.size() % n_x == 0, ErrorKind::invalid_argument, "frames do not match the grid");
    ProbeSeries p;
    p.x = x;
    p.z = z;
    p.ix = nearest_column(g, x);
    p.iz = nearest_row(g, z);
    p.x_cell = g.x_center(p.ix);
    p.z_cell = g.z_center(p.iz);
    const auto c = g.cell(p.ix, p.iz);
    require(g.fluid(c), ErrorKind::invalid_argument,
            "probe (" + std::to_string(x) + ", " + std::to_string(z) + ") falls in a solid cell");
    const auto n_t = frames.size() / n_x;
    p.values.resize(n_t);
    for (std::size_t t = 0; t < n_t; ++t) p.values[t] = frames[t * n_x + c];
    return p;
}

inline void write_flux_csv(const GridGeometry& g, const std::vector<std::pair<std::string, Vector>>& profiles, const std::string& path) {
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + "'");
    f.precision(12);
    f << "x";
    for (const auto& p : profiles) f << ',' << p.first;
    f << '\n';
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
        f << g.x_center(ix);
        for (const auto& p : profiles) f << ',' << p.second(static_cast<Eigen::Index>(ix));
        f << '\n';
    }
    require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + "'");
}

inline void write_probes_csv(const std::vector<double>& times, const std::vector<std::pair<std::string, ProbeSeries>>& probes,
                             const std::string& path) {
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + "'");
    f.precision(12);
    f << "t";
    for (const auto& p : probes) f << ',' << p.first;
    f << '\n';
    for (std::size_t t = 0; t < times.size(); ++t) {
        f << times[t];
        for (const auto& p : probes) f << ',' << (t < p.second.values.size() ? p.second.values[t] : std::nan(""));
        f << '\n';
    }
    require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + "'");
}

}  // namespace srom

#endif
