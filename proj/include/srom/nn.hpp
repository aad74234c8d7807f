#ifndef SROM_NN_HPP
#define SROM_NN_HPP

// Small deterministic network kernel: named parameter store, dense / LSTM /
// conv2d layers with hand-written backward passes, Adam, MSE, a mini-batch
// trainer with early stopping, and a finite-difference gradient checker.
// Batches are stored as matrix columns.

#include "srom/core.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <optional>

namespace srom::nn {

enum class Activation : std::uint8_t { tanh = 0, linear = 1, relu = 2 };

inline Activation parse_activation(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "linear") return Activation::linear;
    if (s == "relu") return Activation::relu;
    throw Error(ErrorKind::invalid_argument, "unknown activation '" + s + "'");
}

inline std::string activation_name(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::linear: return "linear";
        case Activation::relu: return "relu";
    }
    return "?";
}

inline void activate(Matrix& a, Activation act) {
    switch (act) {
        case Activation::tanh: a = a.array().tanh().matrix(); break;
        case Activation::relu: a = a.cwiseMax(0.0); break;
        case Activation::linear: break;
    }
}

/// dL/da from dL/dy, using the activated output y.
inline Matrix activation_backward(const Matrix& y, const Matrix& dy, Activation act) {
    switch (act) {
        case Activation::tanh: return dy.cwiseProduct((1.0 - y.array().square()).matrix());
        case Activation::relu: return (y.array() > 0.0).select(dy, 0.0);
        case Activation::linear: return dy;
    }
    return dy;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Param {
    std::string name;
    std::vector<std::size_t> shape;  ///< logical shape; value holds it as rows x (rest)
    Matrix value;
    Matrix grad;
};

class ParamStore {
public:
    std::uint64_t seed = 0;
    std::string initializer = "glorot-uniform";

    std::size_t add(const std::string& name, std::vector<std::size_t> shape) {
        require(!index_.count(name), ErrorKind::internal, "duplicate parameter '" + name + "'");
        require(!shape.empty(), ErrorKind::internal, "parameter needs a shape");
        std::size_t rest = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) rest *= shape[i];
        Param p{name, std::move(shape), Matrix::Zero(0, 0), Matrix::Zero(0, 0)};
        p.value = Matrix::Zero(static_cast<Eigen::Index>(p.shape[0]), static_cast<Eigen::Index>(rest));
        p.grad = p.value;
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return params_.size() - 1;
    }

    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }
    Param& at(const std::string& name) {
        auto it = index_.find(name);
        require(it != index_.end(), ErrorKind::invalid_argument, "no parameter named '" + name + "'");
        return params_[it->second];
    }
    const Param& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }
    std::size_t size() const { return params_.size(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
        return n;
    }
    void zero_grad() {
        for (auto& p : params_) p.grad.setZero();
    }
    bool finite() const {
        for (const auto& p : params_)
            if (!p.value.allFinite()) return false;
        return true;
    }
    std::vector<Matrix> snapshot() const {
        std::vector<Matrix> out;
        for (const auto& p : params_) out.push_back(p.value);
        return out;
    }
    void restore(const std::vector<Matrix>& s) {
        require(s.size() == params_.size(), ErrorKind::internal, "snapshot size mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) params_[i].value = s[i];
    }

    /// Uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    void glorot(std::size_t i, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        auto& v = params_[i].value;
        for (Eigen::Index c = 0; c < v.cols(); ++c)
            for (Eigen::Index r = 0; r < v.rows(); ++r) v(r, c) = rng.uniform(-a, a);
    }

private:
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
};

// SNNP: "SNNP", u32 version, u64 seed, str initializer, u32 count, then per
// tensor: str name, u32 rank, u64 dims[rank], f64 data in row-major order.
// Several stores can share one file as long as their names are distinct.
inline constexpr std::uint32_t kSnnpVersion = 1;

inline void write_params(const std::vector<const ParamStore*>& stores, const std::string& path) {
    require(!stores.empty(), ErrorKind::internal, "nothing to write");
    io::Writer w(path);
    w.magic("SNNP");
    w.u32(kSnnpVersion);
    w.u64(stores.front()->seed);
    w.str(stores.front()->initializer);
    std::size_t n = 0;
    for (const auto* s : stores) n += s->size();
    w.u32(static_cast<std::uint32_t>(n));
    for (const auto* s : stores)
        for (const auto& p : *s) {
            w.str(p.name);
            w.u32(static_cast<std::uint32_t>(p.shape.size()));
            for (auto d : p.shape) w.u64(d);
            const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = p.value;
            w.f64s(rm.data(), static_cast<std::size_t>(rm.size()));
        }
    w.close();
}

inline void write_params(const ParamStore& store, const std::string& path) { write_params({&store}, path); }

/// Loads values into already-built stores; names and shapes must agree.
inline void read_params(const std::vector<ParamStore*>& stores, const std::string& path) {
    io::Reader r(path);
    r.expect_magic("SNNP");
    require(r.u32() == kSnnpVersion, ErrorKind::format, "unsupported SNNP version");
    const auto seed = r.u64();
    const auto init = r.str();
    std::size_t expected = 0;
    // The header seed belongs to the first store; the others keep their own.
    stores.front()->seed = seed;
    stores.front()->initializer = init;
    for (auto* s : stores) expected += s->size();
    const auto n = r.u32();
    require(n == expected, ErrorKind::format,
            "'" + path + "' holds " + std::to_string(n) + " tensors, model has " + std::to_string(expected));
    auto find = [&](const std::string& name) -> Param& {
        for (auto* s : stores)
            for (auto& p : *s)
                if (p.name == name) return p;
        throw Error(ErrorKind::format, "unexpected tensor '" + name + "' in '" + path + "'");
    };
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto name = r.str();
        auto& p = find(name);
        const auto rank = r.u32();
        require(rank == p.shape.size(), ErrorKind::format, "rank mismatch for '" + name + "'");
        for (std::uint32_t d = 0; d < rank; ++d)
            require(r.u64() == p.shape[d], ErrorKind::format, "shape mismatch for '" + name + "'");
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(p.value.rows(), p.value.cols());
        r.f64s(rm.data(), static_cast<std::size_t>(rm.size()));
        p.value = rm;
    }
    r.expect_eof();
    for (auto* s : stores) require(s->finite(), ErrorKind::corrupt_file, "non-finite parameters in '" + path + "'");
}

inline void read_params(ParamStore& store, const std::string& path) { read_params(std::vector<ParamStore*>{&store}, path); }

/// Per-feature (row) standardization. A feature with zero spread keeps
/// scale 0: it is divided by one going in and restored as its mean.
struct Standardizer {
    Vector mean, scale;

    static Standardizer fit(const Matrix& x) {
        require(x.cols() > 0, ErrorKind::insufficient_data, "cannot standardize an empty sample");
        Standardizer s;
        s.mean = x.rowwise().mean();
        s.scale = ((x.colwise() - s.mean).rowwise().squaredNorm() / static_cast<double>(x.cols())).cwiseSqrt();
        return s;
    }
    Vector divisor() const { return (scale.array() > 0.0).select(scale, 1.0); }
    Matrix apply(const Matrix& x) const {
        require(x.rows() == mean.size(), ErrorKind::invalid_argument, "feature count does not match the standardizer");
        return (x.colwise() - mean).array().colwise() / divisor().array();
    }
    Matrix invert(const Matrix& x) const {
        require(x.rows() == mean.size(), ErrorKind::invalid_argument, "feature count does not match the standardizer");
        return (x.array().colwise() * scale.array()).matrix().colwise() + mean;
    }
};

inline void to_json(nlohmann::json& j, const Standardizer& s) {
    j = {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
         {"scale", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())}};
}

inline void from_json(const nlohmann::json& j, Standardizer& s) {
    const auto m = j.at("mean").get<std::vector<double>>();
    const auto c = j.at("scale").get<std::vector<double>>();
    require(m.size() == c.size(), ErrorKind::format, "standardizer mean and scale differ in length");
    s.mean = Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
    s.scale = Eigen::Map<const Vector>(c.data(), static_cast<Eigen::Index>(c.size()));
}

/// Gathers the given columns.
inline Matrix take_columns(const Matrix& x, const std::vector<std::size_t>& idx) {
    Matrix out(x.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = x.col(static_cast<Eigen::Index>(idx[j]));
    return out;
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

struct DenseLayer {
    std::size_t w = 0, b = 0;
    Activation act = Activation::linear;
};

inline DenseLayer add_dense(ParamStore& s, const std::string& prefix, std::size_t in, std::size_t out, Activation act,
                            Rng& rng) {
    DenseLayer l{s.add(prefix + ".W", {out, in}), s.add(prefix + ".b", {out}), act};
    s.glorot(l.w, in, out, rng);
    return l;
}

inline Matrix dense_forward(const ParamStore& s, const DenseLayer& l, const Matrix& x) {
    const auto& w = s[l.w].value;
    require(x.rows() == w.cols(), ErrorKind::invalid_argument,
            "dense input has " + std::to_string(x.rows()) + " rows, layer expects " + std::to_string(w.cols()));
    Matrix y = w * x;
    y.colwise() += s[l.b].value.col(0);
    activate(y, l.act);
    return y;
}

/// Accumulates parameter gradients; returns dL/dx.
inline Matrix dense_backward(ParamStore& s, const DenseLayer& l, const Matrix& x, const Matrix& y, const Matrix& dy) {
    const Matrix da = activation_backward(y, dy, l.act);
    s[l.w].grad.noalias() += da * x.transpose();
    s[l.b].grad.col(0) += da.rowwise().sum();
    return s[l.w].value.transpose() * da;
}

/// Feed-forward stack.
class Mlp {
public:
    Mlp() = default;
    Mlp(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& sizes,
        const std::vector<Activation>& acts, Rng& rng) {
        require(sizes.size() >= 2 && acts.size() == sizes.size() - 1, ErrorKind::invalid_argument,
                "layer sizes and activations disagree");
        for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
            require(sizes[i] > 0 && sizes[i + 1] > 0, ErrorKind::invalid_argument, "layer width must be positive");
            layers_.push_back(add_dense(store, prefix + ".l" + std::to_string(i), sizes[i], sizes[i + 1], acts[i], rng));
        }
    }

    /// Returns activations of every layer; front() is the input.
    std::vector<Matrix> forward(const ParamStore& s, const Matrix& x) const {
        std::vector<Matrix> acts{x};
        for (const auto& l : layers_) acts.push_back(dense_forward(s, l, acts.back()));
        return acts;
    }
    Matrix apply(const ParamStore& s, const Matrix& x) const { return forward(s, x).back(); }

    Matrix backward(ParamStore& s, const std::vector<Matrix>& acts, const Matrix& dy) const {
        Matrix d = dy;
        for (std::size_t i = layers_.size(); i-- > 0;) d = dense_backward(s, layers_[i], acts[i], acts[i + 1], d);
        return d;
    }

    const std::vector<DenseLayer>& layers() const { return layers_; }

private:
    std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

struct LstmState {
    Matrix h, s;
};

struct LstmStepCache {
    Matrix x;                 ///< [h_prev; z]
    Matrix i, f, o, g;        ///< gate activations
    Matrix s_prev, s, tanh_s;
};

/// Single recurrent cell with gate rows ordered (input, forget, output,
/// candidate) acting on [h_prev; z], plus a linear read-out h -> z.
class Lstm {
public:
    Lstm() = default;
    Lstm(ParamStore& store, const std::string& prefix, std::size_t n_z, std::size_t n_h, Rng& rng) : n_z_(n_z), n_h_(n_h) {
        require(n_z > 0 && n_h > 0, ErrorKind::invalid_argument, "LSTM sizes must be positive");
        w_ = store.add(prefix + ".W", {4 * n_h, n_h + n_z});
        b_ = store.add(prefix + ".b", {4 * n_h});
        wy_ = store.add(prefix + ".Wy", {n_z, n_h});
        by_ = store.add(prefix + ".by", {n_z});
        store.glorot(w_, n_h + n_z, n_h, rng);
        store.glorot(wy_, n_h, n_z, rng);
        store[b_].value.middleRows(static_cast<Eigen::Index>(n_h), static_cast<Eigen::Index>(n_h)).setOnes();
    }

    std::size_t n_z() const { return n_z_; }
    std::size_t n_h() const { return n_h_; }

    LstmState zero_state(Eigen::Index batch) const {
        return {Matrix::Zero(static_cast<Eigen::Index>(n_h_), batch), Matrix::Zero(static_cast<Eigen::Index>(n_h_), batch)};
    }

    LstmState step(const ParamStore& st, const LstmState& prev, const Matrix& z, LstmStepCache* cache = nullptr) const {
        const auto n = static_cast<Eigen::Index>(n_h_);
        require(z.rows() == static_cast<Eigen::Index>(n_z_) && prev.h.rows() == n && prev.s.rows() == n &&
                    prev.h.cols() == z.cols() && prev.s.cols() == z.cols(),
                ErrorKind::invalid_argument, "LSTM step shape mismatch");
        Matrix x(n + z.rows(), z.cols());
        x.topRows(n) = prev.h;
        x.bottomRows(z.rows()) = z;
        Matrix a = st[w_].value * x;
        a.colwise() += st[b_].value.col(0);
        const auto sig = [](const auto& m) { return m.unaryExpr([](double v) { return sigmoid(v); }).eval(); };
        Matrix i = sig(a.topRows(n));
        Matrix f = sig(a.middleRows(n, n));
        Matrix o = sig(a.middleRows(2 * n, n));
        Matrix g = a.bottomRows(n).array().tanh().matrix();
        LstmState next;
        next.s = f.cwiseProduct(prev.s) + i.cwiseProduct(g);
        Matrix ts = next.s.array().tanh().matrix();
        next.h = o.cwiseProduct(ts);
        if (cache) *cache = {std::move(x), std::move(i), std::move(f), std::move(o), std::move(g), prev.s, next.s, std::move(ts)};
        return next;
    }

    Matrix readout(const ParamStore& st, const Matrix& h) const {
        Matrix y = st[wy_].value * h;
        y.colwise() += st[by_].value.col(0);
        return y;
    }

    struct SequenceCache {
        std::vector<LstmStepCache> steps;
        Matrix h_last;
    };

    /// Consumes z_1..z_T from a zero state and predicts the next value.
    Matrix forward(const ParamStore& st, const std::vector<Matrix>& seq, SequenceCache* cache = nullptr) const {
        require(!seq.empty(), ErrorKind::invalid_argument, "empty input sequence");
        LstmState state = zero_state(seq.front().cols());
        if (cache) cache->steps.resize(seq.size());
        for (std::size_t t = 0; t < seq.size(); ++t) state = step(st, state, seq[t], cache ? &cache->steps[t] : nullptr);
        if (cache) cache->h_last = state.h;
        return readout(st, state.h);
    }

    /// Back-propagation through time; accumulates gradients and returns
    /// dL/dz_t for every input step.
    std::vector<Matrix> backward(ParamStore& st, const SequenceCache& cache, const Matrix& dy) const {
        const auto n = static_cast<Eigen::Index>(n_h_);
        st[wy_].grad.noalias() += dy * cache.h_last.transpose();
        st[by_].grad.col(0) += dy.rowwise().sum();
        Matrix dh = st[wy_].value.transpose() * dy;
        Matrix ds = Matrix::Zero(n, dy.cols());
        std::vector<Matrix> dz(cache.steps.size());
        for (std::size_t t = cache.steps.size(); t-- > 0;) {
            const auto& c = cache.steps[t];
            const Matrix d_o = dh.cwiseProduct(c.tanh_s);
            ds += dh.cwiseProduct(c.o).cwiseProduct((1.0 - c.tanh_s.array().square()).matrix());
            Matrix da(4 * n, dy.cols());
            da.topRows(n) = ds.cwiseProduct(c.g).cwiseProduct(c.i.cwiseProduct((1.0 - c.i.array()).matrix()));
            da.middleRows(n, n) = ds.cwiseProduct(c.s_prev).cwiseProduct(c.f.cwiseProduct((1.0 - c.f.array()).matrix()));
            da.middleRows(2 * n, n) = d_o.cwiseProduct(c.o.cwiseProduct((1.0 - c.o.array()).matrix()));
            da.bottomRows(n) = ds.cwiseProduct(c.i).cwiseProduct((1.0 - c.g.array().square()).matrix());
            st[w_].grad.noalias() += da * c.x.transpose();
            st[b_].grad.col(0) += da.rowwise().sum();
            const Matrix dx = st[w_].value.transpose() * da;
            dh = dx.topRows(n);
            dz[t] = dx.bottomRows(dx.rows() - n);
            ds = ds.cwiseProduct(c.f).eval();
        }
        return dz;
    }

private:
    std::size_t n_z_ = 0, n_h_ = 0;
    std::size_t w_ = 0, b_ = 0, wy_ = 0, by_ = 0;
};

// ---------------------------------------------------------------------------
// Conv2d (cross-correlation, zero padding, size preserving)
// ---------------------------------------------------------------------------

/// Feature maps for a batch: rows are channels, columns run over
/// (sample, z, x) with x fastest.
struct FeatureShape {
    std::size_t nz = 0, nx = 0, batch = 0;
    std::size_t pixels() const { return nz * nx; }
    Eigen::Index cols() const { return static_cast<Eigen::Index>(nz * nx * batch); }
};

inline Matrix im2col(const Matrix& x, const FeatureShape& fs, std::size_t kernel) {
    const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
    const auto c_in = static_cast<std::size_t>(x.rows());
    Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(c_in * kernel * kernel), fs.cols());
    for (std::size_t b = 0; b < fs.batch; ++b)
        for (std::size_t z = 0; z < fs.nz; ++z)
            for (std::size_t xx = 0; xx < fs.nx; ++xx) {
                const auto col = static_cast<Eigen::Index>((b * fs.nz + z) * fs.nx + xx);
                for (std::size_t dz = 0; dz < kernel; ++dz) {
                    const auto sz = static_cast<std::ptrdiff_t>(z + dz) - pad;
                    if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(fs.nz)) continue;
                    for (std::size_t dx = 0; dx < kernel; ++dx) {
                        const auto sx = static_cast<std::ptrdiff_t>(xx + dx) - pad;
                        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(fs.nx)) continue;
                        const auto src = static_cast<Eigen::Index>((b * fs.nz + static_cast<std::size_t>(sz)) * fs.nx +
                                                                   static_cast<std::size_t>(sx));
                        for (std::size_t c = 0; c < c_in; ++c)
                            cols(static_cast<Eigen::Index>((c * kernel + dz) * kernel + dx), col) =
                                x(static_cast<Eigen::Index>(c), src);
                    }
                }
            }
    return cols;
}

inline Matrix col2im(const Matrix& cols, const FeatureShape& fs, std::size_t c_in, std::size_t kernel) {
    const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(c_in), fs.cols());
    for (std::size_t b = 0; b < fs.batch; ++b)
        for (std::size_t z = 0; z < fs.nz; ++z)
            for (std::size_t xx = 0; xx < fs.nx; ++xx) {
                const auto col = static_cast<Eigen::Index>((b * fs.nz + z) * fs.nx + xx);
                for (std::size_t dz = 0; dz < kernel; ++dz) {
                    const auto sz = static_cast<std::ptrdiff_t>(z + dz) - pad;
                    if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(fs.nz)) continue;
                    for (std::size_t dx = 0; dx < kernel; ++dx) {
                        const auto sx = static_cast<std::ptrdiff_t>(xx + dx) - pad;
                        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(fs.nx)) continue;
                        const auto dst = static_cast<Eigen::Index>((b * fs.nz + static_cast<std::size_t>(sz)) * fs.nx +
                                                                   static_cast<std::size_t>(sx));
                        for (std::size_t c = 0; c < c_in; ++c)
                            x(static_cast<Eigen::Index>(c), dst) += cols(static_cast<Eigen::Index>((c * kernel + dz) * kernel + dx), col);
                    }
                }
            }
    return x;
}

struct ConvLayer {
    std::size_t w = 0, b = 0;
    std::size_t c_in = 0, c_out = 0, kernel = 1;
    Activation act = Activation::linear;
};

inline ConvLayer add_conv(ParamStore& s, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                          std::size_t kernel, Activation act, Rng& rng) {
    require(kernel % 2 == 1, ErrorKind::invalid_argument, "kernel size must be odd to preserve the grid");
    require(c_in > 0 && c_out > 0, ErrorKind::invalid_argument, "channel counts must be positive");
    ConvLayer l{s.add(prefix + ".W", {c_out, c_in, kernel, kernel}), s.add(prefix + ".b", {c_out}), c_in, c_out, kernel, act};
    s.glorot(l.w, c_in * kernel * kernel, c_out * kernel * kernel, rng);
    return l;
}

inline Matrix conv_forward(const ParamStore& s, const ConvLayer& l, const Matrix& x, const FeatureShape& fs,
                           Matrix* cols_out = nullptr) {
    require(x.rows() == static_cast<Eigen::Index>(l.c_in) && x.cols() == fs.cols(), ErrorKind::invalid_argument,
            "conv input shape mismatch");
    Matrix cols = im2col(x, fs, l.kernel);
    Matrix y = s[l.w].value * cols;
    y.colwise() += s[l.b].value.col(0);
    activate(y, l.act);
    if (cols_out) *cols_out = std::move(cols);
    return y;
}

inline Matrix conv_backward(ParamStore& s, const ConvLayer& l, const Matrix& cols, const Matrix& y, const Matrix& dy,
                            const FeatureShape& fs) {
    const Matrix da = activation_backward(y, dy, l.act);
    s[l.w].grad.noalias() += da * cols.transpose();
    s[l.b].grad.col(0) += da.rowwise().sum();
    return col2im(s[l.w].value.transpose() * da, fs, l.c_in, l.kernel);
}

/// Stack of size-preserving convolutions.
class ConvNet {
public:
    ConvNet() = default;
    ConvNet(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& channels, std::size_t kernel,
            const std::vector<Activation>& acts, Rng& rng) {
        require(channels.size() >= 2 && acts.size() == channels.size() - 1, ErrorKind::invalid_argument,
                "channel list and activations disagree");
        for (std::size_t i = 0; i + 1 < channels.size(); ++i)
            layers_.push_back(add_conv(store, prefix + ".c" + std::to_string(i), channels[i], channels[i + 1], kernel, acts[i], rng));
    }

    struct Cache {
        std::vector<Matrix> acts, cols;
    };

    Matrix forward(const ParamStore& s, const Matrix& x, const FeatureShape& fs, Cache* cache = nullptr) const {
        Matrix cur = x;
        if (cache) {
            cache->acts = {x};
            cache->cols.clear();
        }
        for (const auto& l : layers_) {
            Matrix cols;
            cur = conv_forward(s, l, cur, fs, cache ? &cols : nullptr);
            if (cache) {
                cache->cols.push_back(std::move(cols));
                cache->acts.push_back(cur);
            }
        }
        return cur;
    }

    Matrix backward(ParamStore& s, const Cache& c, const Matrix& dy, const FeatureShape& fs) const {
        Matrix d = dy;
        for (std::size_t i = layers_.size(); i-- > 0;) d = conv_backward(s, layers_[i], c.cols[i], c.acts[i + 1], d, fs);
        return d;
    }

    const std::vector<ConvLayer>& layers() const { return layers_; }

private:
    std::vector<ConvLayer> layers_;
};

// ---------------------------------------------------------------------------
// Loss, optimizer, training
// ---------------------------------------------------------------------------

struct LossResult {
    double loss = 0.0;
    Matrix grad;
};

/// Batch mean of the squared 2-norm of (pred - target) per column.
inline LossResult mse_loss(const Matrix& pred, const Matrix& target) {
    require(pred.rows() == target.rows() && pred.cols() == target.cols(), ErrorKind::invalid_argument,
            "loss operands differ in shape");
    require(pred.cols() > 0, ErrorKind::invalid_argument, "empty batch");
    const double batch = static_cast<double>(pred.cols());
    const Matrix d = pred - target;
    return {d.squaredNorm() / batch, 2.0 * d / batch};
}

/// As mse_loss with a per-row weight (e.g. a fluid mask).
inline LossResult masked_mse_loss(const Matrix& pred, const Matrix& target, const Vector& row_weight) {
    require(row_weight.size() == pred.rows(), ErrorKind::invalid_argument, "mask length does not match rows");
    auto r = mse_loss(pred, target);
    const double batch = static_cast<double>(pred.cols());
    const Matrix d = row_weight.asDiagonal() * (pred - target);
    r.loss = (pred - target).cwiseProduct(d).sum() / batch;
    r.grad = 2.0 * d / batch;
    return r;
}

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    double validation_fraction = 0.2;
    std::size_t patience = 50;
    double min_delta = 1e-6;

    void validate() const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::invalid_argument, "learning rate must be positive");
        require(batch_size > 0, ErrorKind::invalid_argument, "batch size must be positive");
        require(validation_fraction > 0.0 && validation_fraction < 1.0, ErrorKind::invalid_argument,
                "validation fraction must lie in (0, 1)");
        require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrorKind::invalid_argument,
                "Adam betas must lie in (0, 1)");
        require(adam_eps > 0.0, ErrorKind::invalid_argument, "Adam epsilon must be positive");
        require(patience > 0, ErrorKind::invalid_argument, "patience must be positive");
    }
};

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.epochs = j.value("epochs", d.epochs);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.seed = j.value("seed", d.seed);
    c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
    c.patience = j.value("patience", d.patience);
    c.min_delta = j.value("min_delta", d.min_delta);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
         {"beta1", c.beta1}, {"beta2", c.beta2}, {"adam_eps", c.adam_eps}, {"seed", c.seed},
         {"validation_fraction", c.validation_fraction}, {"patience", c.patience}, {"min_delta", c.min_delta}};
}

class Adam {
public:
    Adam() = default;
    explicit Adam(const ParamStore& store) {
        for (const auto& p : store) {
            m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
            v_.push_back(m_.back());
        }
    }

    std::size_t iteration() const { return t_; }

    /// One bias-corrected update from the gradients held in `store`.
    void step(ParamStore& store, const TrainConfig& cfg) {
        require(m_.size() == store.size(), ErrorKind::internal, "optimizer built for another model");
        for (const auto& p : store)
            require(p.grad.allFinite(), ErrorKind::training_diverged, "non-finite gradient in '" + p.name + "'");
        ++t_;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < store.size(); ++i) {
            auto& p = store[i];
            m_[i] = cfg.beta1 * m_[i] + (1.0 - cfg.beta1) * p.grad;
            v_[i] = cfg.beta2 * v_[i] + (1.0 - cfg.beta2) * p.grad.cwiseAbs2();
            p.value.array() -= cfg.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg.adam_eps);
        }
    }

private:
    std::vector<Matrix> m_, v_;
    std::size_t t_ = 0;
};

struct TrainReport {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
    std::size_t epochs_run() const { return train_loss.size(); }
};

/// Problem description for `fit`: sample counts plus callbacks that evaluate
/// a batch (accumulating gradients when asked) and the validation loss.
struct FitProblem {
    std::size_t n_train = 0;
    std::function<double(const std::vector<std::size_t>& idx)> batch_loss;  ///< adds gradients
    std::function<double()> validation_loss;
};

/// Mini-batch Adam with a seeded per-epoch shuffle and validation-plateau
/// early stopping; the best parameters are restored on exit.
inline TrainReport fit(ParamStore& store, const TrainConfig& cfg, const FitProblem& prob) {
    cfg.validate();
    require(prob.n_train > 0, ErrorKind::insufficient_data, "no training samples");
    Adam adam(store);
    Rng shuffle(derive_seed(cfg.seed, "batch-order"));
    TrainReport rep;
    auto best = store.snapshot();
    std::size_t wait = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto perm = shuffle.permutation(prob.n_train);
        double total = 0.0;
        for (std::size_t start = 0; start < prob.n_train; start += cfg.batch_size) {
            const std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                               perm.begin() + static_cast<std::ptrdiff_t>(std::min(prob.n_train, start + cfg.batch_size)));
            store.zero_grad();
            const double l = prob.batch_loss(idx);
            require(std::isfinite(l), ErrorKind::training_diverged, "training loss became non-finite at epoch " + std::to_string(epoch));
            adam.step(store, cfg);
            total += l * static_cast<double>(idx.size());
        }
        rep.train_loss.push_back(total / static_cast<double>(prob.n_train));
        const double v = prob.validation_loss ? prob.validation_loss() : rep.train_loss.back();
        require(std::isfinite(v), ErrorKind::training_diverged, "validation loss became non-finite at epoch " + std::to_string(epoch));
        rep.val_loss.push_back(v);
        if (v < rep.best_val - cfg.min_delta || epoch == 0) {
            rep.best_val = v;
            rep.best_epoch = epoch;
            best = store.snapshot();
            wait = 0;
        } else if (++wait >= cfg.patience) {
            rep.stopped_early = true;
            break;
        }
    }
    store.restore(best);
    store.zero_grad();
    return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

struct GradientIssue {
    std::string param;
    Eigen::Index row = 0, col = 0;
    double analytic = 0.0, numeric = 0.0, rel_error = 0.0;
};

struct GradientReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::vector<GradientIssue> offenders;
    bool passed() const { return offenders.empty(); }
};

/// Compares analytic gradients against central differences for every
/// parameter entry.  `loss` must zero and then fill the store's gradients and
/// return the scalar loss.  The relative error is |a - n| / max(|a|, |n|,
/// floor); the floor keeps roundoff in near-zero entries from dominating.
inline GradientReport finite_difference_check(ParamStore& store, const std::function<double()>& loss, double tolerance = 1e-5,
                                              double step = 1e-6, double floor = 1e-4) {
    store.zero_grad();
    loss();
    std::vector<Matrix> analytic;
    for (const auto& p : store) analytic.push_back(p.grad);
    GradientReport rep;
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& v = store[i].value;
        for (Eigen::Index c = 0; c < v.cols(); ++c)
            for (Eigen::Index r = 0; r < v.rows(); ++r) {
                const double orig = v(r, c);
                v(r, c) = orig + step;
                const double lp = loss();
                v(r, c) = orig - step;
                const double lm = loss();
                v(r, c) = orig;
                const double num = (lp - lm) / (2.0 * step);
                const double a = analytic[i](r, c);
                const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
                rep.max_rel_error = std::max(rep.max_rel_error, rel);
                ++rep.checked;
                if (!(rel <= tolerance)) rep.offenders.push_back({store[i].name, r, c, a, num, rel});
            }
    }
    store.zero_grad();
    return rep;
}

}  // namespace srom::nn

#endif  // SROM_NN_HPP
