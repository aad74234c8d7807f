#ifndef SROM_AUTOENCODER_HPP
#define SROM_AUTOENCODER_HPP

// Dense autoencoders compressing mode coefficients to a latent series. The
// real and imaginary parts get independent networks.

#include "srom/nn.hpp"
#include "srom/projection.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <thread>

namespace srom {

struct AeConfig {
    std::vector<std::size_t> encoder_hidden{64, 32};
    std::vector<std::size_t> decoder_hidden{32, 64};
    std::size_t latent_size = 8;
    nn::TrainConfig train{};

    /// Hidden widths scaled to the input size.
    static AeConfig desk_scale(std::size_t n_m, std::size_t n_z) {
        AeConfig c;
        const std::size_t h1 = std::max<std::size_t>(2 * n_z, std::min<std::size_t>(128, 2 * n_m));
        const std::size_t h2 = std::max<std::size_t>(n_z, h1 / 2);
        c.encoder_hidden = {h1, h2};
        c.decoder_hidden = {h2, h1};
        c.latent_size = n_z;
        return c;
    }

    void validate(std::size_t n_m) const {
        require(latent_size > 0, ErrorKind::invalid_argument, "latent size must be positive");
        require(latent_size <= n_m, ErrorKind::invalid_argument,
                "latent size " + std::to_string(latent_size) + " exceeds the " + std::to_string(n_m) + " input features");
        require(std::equal(encoder_hidden.begin(), encoder_hidden.end(), decoder_hidden.rbegin(), decoder_hidden.rend()),
                ErrorKind::invalid_argument, "decoder widths must mirror the encoder widths");
        for (auto h : encoder_hidden) require(h > 0, ErrorKind::invalid_argument, "hidden width must be positive");
        train.validate();
    }
};

inline void to_json(nlohmann::json& j, const AeConfig& c) {
    j = {{"encoder_hidden", c.encoder_hidden}, {"decoder_hidden", c.decoder_hidden},
         {"latent_size", c.latent_size}, {"train", c.train}};
}

inline void from_json(const nlohmann::json& j, AeConfig& c) {
    AeConfig d;
    c.encoder_hidden = j.value("encoder_hidden", d.encoder_hidden);
    c.decoder_hidden = j.contains("decoder_hidden")
                           ? j.at("decoder_hidden").get<std::vector<std::size_t>>()
                           : std::vector<std::size_t>(c.encoder_hidden.rbegin(), c.encoder_hidden.rend());
    c.latent_size = j.value("latent_size", d.latent_size);
    c.train = j.contains("train") ? j.at("train").get<nn::TrainConfig>() : d.train;
}

/// Chronological split: the last fraction of columns is validation.
inline std::size_t chronological_train_count(std::size_t n, double val_fraction) {
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
    require(n > n_val, ErrorKind::insufficient_data,
            "need more than " + std::to_string(n_val) + " samples for a train/validation split, got " + std::to_string(n));
    return n - n_val;
}

/// One real-valued autoencoder with its standardization.
class Autoencoder {
public:
    Autoencoder() = default;

    Autoencoder(std::size_t n_m, const AeConfig& cfg, std::uint64_t seed, const std::string& prefix = "ae")
        : cfg_(cfg), n_m_(n_m), prefix_(prefix) {
        cfg_.validate(n_m);
        store_.seed = seed;
        Rng rng(seed);
        std::vector<std::size_t> enc{n_m};
        enc.insert(enc.end(), cfg_.encoder_hidden.begin(), cfg_.encoder_hidden.end());
        enc.push_back(cfg_.latent_size);
        std::vector<std::size_t> dec{cfg_.latent_size};
        dec.insert(dec.end(), cfg_.decoder_hidden.begin(), cfg_.decoder_hidden.end());
        dec.push_back(n_m);
        auto acts = [](std::size_t n) {
            std::vector<nn::Activation> a(n - 1, nn::Activation::tanh);
            a.back() = nn::Activation::linear;
            return a;
        };
        encoder_ = nn::Mlp(store_, prefix + ".enc", enc, acts(enc.size()), rng);
        decoder_ = nn::Mlp(store_, prefix + ".dec", dec, acts(dec.size()), rng);
        stats_.mean = Vector::Zero(static_cast<Eigen::Index>(n_m));
        stats_.scale = Vector::Ones(static_cast<Eigen::Index>(n_m));
    }

    /// Trains on columns of `x` [N_m x N_t]; the trailing columns validate.
    const nn::TrainReport& train(const Matrix& x) {
        require(static_cast<std::size_t>(x.rows()) == n_m_, ErrorKind::invalid_argument,
                "component has " + std::to_string(x.rows()) + " rows, model expects " + std::to_string(n_m_));
        require(x.allFinite(), ErrorKind::invalid_data, "non-finite coefficients");
        const auto n_train = chronological_train_count(static_cast<std::size_t>(x.cols()), cfg_.train.validation_fraction);
        stats_ = nn::Standardizer::fit(x.leftCols(static_cast<Eigen::Index>(n_train)));
        const Matrix xs = stats_.apply(x);
        const Matrix train = xs.leftCols(static_cast<Eigen::Index>(n_train));
        const Matrix val = xs.rightCols(xs.cols() - static_cast<Eigen::Index>(n_train));

        nn::FitProblem prob;
        prob.n_train = n_train;
        prob.batch_loss = [&](const std::vector<std::size_t>& idx) {
            const Matrix b = nn::take_columns(train, idx);
            const auto ea = encoder_.forward(store_, b);
            const auto da = decoder_.forward(store_, ea.back());
            const auto l = nn::mse_loss(da.back(), b);
            const Matrix dz = decoder_.backward(store_, da, l.grad);
            encoder_.backward(store_, ea, dz);
            return l.loss;
        };
        prob.validation_loss = [&] { return nn::mse_loss(run(val), val).loss; };
        report_ = nn::fit(store_, cfg_.train, prob);

        const Matrix z = encoder_.apply(store_, train);
        latent_lo_ = z.rowwise().minCoeff();
        latent_hi_ = z.rowwise().maxCoeff();
        return report_;
    }

    /// Raw coefficients [N_m x T] to latents [N_z x T].
    Matrix encode(const Matrix& a) const {
        check_rows(a, n_m_, "encode");
        return encoder_.apply(store_, stats_.apply(a));
    }

    /// Latents [N_z x T] back to raw coefficients.
    Matrix decode(const Matrix& z) const {
        check_rows(z, cfg_.latent_size, "decode");
        return stats_.invert(decoder_.apply(store_, z));
    }

    const AeConfig& config() const { return cfg_; }
    std::size_t n_m() const { return n_m_; }
    std::size_t n_z() const { return cfg_.latent_size; }
    const nn::Standardizer& stats() const { return stats_; }
    nn::Standardizer& stats() { return stats_; }
    const nn::TrainReport& report() const { return report_; }
    const Vector& latent_lo() const { return latent_lo_; }
    const Vector& latent_hi() const { return latent_hi_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const std::string& prefix() const { return prefix_; }

    nlohmann::json sidecar() const {
        auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
        return {{"n_m", n_m_}, {"config", cfg_}, {"stats", stats_}, {"seed", store_.seed},
                {"latent_lo", vec(latent_lo_)}, {"latent_hi", vec(latent_hi_)},
                {"best_epoch", report_.best_epoch}, {"best_val", report_.best_val}};
    }

    void restore_sidecar(const nlohmann::json& j) {
        stats_ = j.at("stats").get<nn::Standardizer>();
        require(static_cast<std::size_t>(stats_.mean.size()) == n_m_, ErrorKind::format, "standardizer size mismatch");
        auto vec = [](const nlohmann::json& v) {
            const auto d = v.get<std::vector<double>>();
            return Vector(Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size())));
        };
        latent_lo_ = vec(j.at("latent_lo"));
        latent_hi_ = vec(j.at("latent_hi"));
        report_.best_epoch = j.value("best_epoch", std::size_t{0});
        report_.best_val = j.value("best_val", 0.0);
    }

private:
    Matrix run(const Matrix& xs) const { return decoder_.apply(store_, encoder_.apply(store_, xs)); }

    static void check_rows(const Matrix& m, std::size_t n, const char* what) {
        require(static_cast<std::size_t>(m.rows()) == n, ErrorKind::invalid_argument,
                std::string(what) + ": expected " + std::to_string(n) + " rows, got " + std::to_string(m.rows()));
    }

    AeConfig cfg_;
    std::size_t n_m_ = 0;
    std::string prefix_;
    nn::ParamStore store_;
    nn::Mlp encoder_, decoder_;
    nn::Standardizer stats_;
    nn::TrainReport report_;
    Vector latent_lo_, latent_hi_;
};

struct LatentSeries {
    CMatrix values;  ///< [N_z x N_t]; real part from the Re network, imaginary from the Im network
    std::uint64_t source_basis = 0;
    std::size_t n_z() const { return static_cast<std::size_t>(values.rows()); }
    std::size_t n_t() const { return static_cast<std::size_t>(values.cols()); }
};

/// The Re / Im network pair for complex coefficients.
class ComplexAutoencoder {
public:
    ComplexAutoencoder() = default;
    ComplexAutoencoder(std::size_t n_m, const AeConfig& cfg, std::uint64_t seed)
        : re_(n_m, with_seed(cfg, seed, "ae-re-batches"), derive_seed(seed, "ae-re"), "re"),
          im_(n_m, with_seed(cfg, seed, "ae-im-batches"), derive_seed(seed, "ae-im"), "im"),
          seed_(seed) {}

    /// Trains both networks, concurrently when threads > 1.
    void train(const CMatrix& a, unsigned threads = 1) {
        const Matrix re = a.real(), im = a.imag();
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

    LatentSeries encode(const CoefficientSeries& c) const {
        LatentSeries z;
        z.values = encode(c.values);
        z.source_basis = c.source_basis;
        return z;
    }
    CMatrix encode(const CMatrix& a) const {
        const Matrix zr = re_.encode(a.real()), zi = im_.encode(a.imag());
        CMatrix z(zr.rows(), zr.cols());
        z.real() = zr;
        z.imag() = zi;
        require(z.allFinite(), ErrorKind::numeric, "non-finite latent values");
        return z;
    }
    CMatrix decode(const CMatrix& z) const {
        const Matrix ar = re_.decode(z.real()), ai = im_.decode(z.imag());
        CMatrix a(ar.rows(), ar.cols());
        a.real() = ar;
        a.imag() = ai;
        return a;
    }

    const Autoencoder& re() const { return re_; }
    const Autoencoder& im() const { return im_; }
    Autoencoder& re() { return re_; }
    Autoencoder& im() { return im_; }
    std::size_t n_m() const { return re_.n_m(); }
    std::size_t n_z() const { return re_.n_z(); }
    std::uint64_t seed() const { return seed_; }

    /// Parameters to `path`, configuration and statistics to `path`.json.
    void save(const std::string& path) const {
        nn::write_params({&re_.params(), &im_.params()}, path);
        nlohmann::json j = {{"kind", "complex-autoencoder"}, {"seed", seed_}, {"n_m", n_m()},
                            {"config", re_.config()}, {"re", re_.sidecar()}, {"im", im_.sidecar()}};
        std::ofstream f(path + ".json");
        require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + ".json'");
        f << j.dump(2) << '\n';
        require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + ".json'");
    }

    static ComplexAutoencoder load(const std::string& path) {
        std::ifstream f(path + ".json");
        require(static_cast<bool>(f), ErrorKind::io, "cannot open '" + path + ".json'");
        nlohmann::json j;
        try {
            f >> j;
            require(j.at("kind") == "complex-autoencoder", ErrorKind::format, "sidecar is not an autoencoder");
            ComplexAutoencoder m;
            m.seed_ = j.at("seed").get<std::uint64_t>();
            const auto n_m = j.at("n_m").get<std::size_t>();
            m.re_ = Autoencoder(n_m, j.at("re").at("config").get<AeConfig>(), derive_seed(m.seed_, "ae-re"), "re");
            m.im_ = Autoencoder(n_m, j.at("im").at("config").get<AeConfig>(), derive_seed(m.seed_, "ae-im"), "im");
            nn::read_params({&m.re_.params(), &m.im_.params()}, path);
            m.re_.restore_sidecar(j.at("re"));
            m.im_.restore_sidecar(j.at("im"));
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::format, "malformed autoencoder sidecar '" + path + ".json': " + e.what());
        }
    }

private:
    static AeConfig with_seed(AeConfig c, std::uint64_t seed, const char* tag) {
        c.train.seed = derive_seed(seed, tag);
        return c;
    }

    Autoencoder re_, im_;
    std::uint64_t seed_ = 0;
};

struct LatentStudyRow {
    std::size_t n_z = 0;
    double train_loss = 0.0;  ///< mean of the Re / Im networks at the best epoch
    double val_loss = 0.0;
    double field_nmse = std::numeric_limits<double>::quiet_NaN();
};

/// Trains one pair per distinct latent size. `field_nmse` maps decoded
/// coefficients to a field error; without it the coefficient NMSE is used.
inline std::vector<LatentStudyRow> latent_size_study(const CMatrix& coeffs, std::vector<std::size_t> sizes, const AeConfig& base,
                                                     std::uint64_t seed,
                                                     const std::function<double(const CMatrix&)>& field_nmse = {},
                                                     unsigned threads = 1) {
    require(!sizes.empty(), ErrorKind::invalid_argument, "no latent sizes given");
    std::vector<std::size_t> uniq;
    std::set<std::size_t> seen;
    for (auto s : sizes)
        if (seen.insert(s).second) uniq.push_back(s);
    std::vector<LatentStudyRow> rows;
    for (auto n_z : uniq) {
        AeConfig c = base;
        c.latent_size = n_z;
        ComplexAutoencoder ae(static_cast<std::size_t>(coeffs.rows()), c, derive_seed(seed, "nz-" + std::to_string(n_z)));
        ae.train(coeffs, threads);
        LatentStudyRow r;
        r.n_z = n_z;
        const auto& rr = ae.re().report();
        const auto& ri = ae.im().report();
        r.train_loss = 0.5 * (rr.train_loss[rr.best_epoch] + ri.train_loss[ri.best_epoch]);
        r.val_loss = 0.5 * (rr.best_val + ri.best_val);
        const CMatrix back = ae.decode(ae.encode(coeffs));
        if (field_nmse) {
            r.field_nmse = field_nmse(back);
        } else {
            const Matrix ref(coeffs.cwiseAbs()), err((back - coeffs).cwiseAbs());
            require(ref.squaredNorm() > 0.0, ErrorKind::undefined_metric, "all-zero coefficients");
            r.field_nmse = err.squaredNorm() / ref.squaredNorm();
        }
        rows.push_back(r);
    }
    return rows;
}

inline void write_latent_study_csv(const std::vector<LatentStudyRow>& rows, const std::string& path) {
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write '" + path + "'");
    f.precision(10);
    f << "n_z,train_loss,val_loss,field_nmse\n";
    for (const auto& r : rows) f << r.n_z << ',' << r.train_loss << ',' << r.val_loss << ',' << r.field_nmse << '\n';
    require(static_cast<bool>(f), ErrorKind::io, "failed writing '" + path + "'");
}

}  // namespace srom

#endif
