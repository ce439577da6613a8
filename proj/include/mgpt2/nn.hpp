#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mgpt2/rng.hpp"
#include "mgpt2/tensor.hpp"

namespace mgpt2::nn {

// A named, optionally frozen leaf tensor. Frozen parameters may still
// accumulate gradients but receive no optimizer updates. update_row_begin
// restricts updates to rows >= the boundary (used when only newly grown
// vocabulary rows are trainable).
template <class S>
struct Parameter {
    Tensor<S> value;
    std::string name;
    bool frozen = false;
    int update_row_begin = 0;

    Parameter() = default;
    Parameter(Tensor<S> v, std::string n) : value(std::move(v)), name(std::move(n)) {
        value.set_requires_grad(true);
    }
};

// Parameters are collected on demand rather than cached as member pointers,
// so modules stay valid under move assignment and inside containers.
template <class S>
class Module {
public:
    virtual ~Module() = default;

    virtual void collect_parameters(std::vector<Parameter<S>*>& out) = 0;

    std::vector<Parameter<S>*> parameters() {
        std::vector<Parameter<S>*> out;
        collect_parameters(out);
        return out;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->value.clear_grad();
    }

    void set_frozen(bool frozen) {
        for (auto* p : parameters()) p->frozen = frozen;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for (auto* p : parameters()) n += p->value.numel();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> xavier_uniform(const Shape& shape, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<S> data(numel_of(shape));
    for (auto& v : data) v = static_cast<S>(rng.uniform(-bound, bound));
    return Tensor<S>::from(shape, std::move(data));
}

template <class S>
Tensor<S> gaussian_init(const Shape& shape, double mean, double stddev, Rng& rng) {
    std::vector<S> data(numel_of(shape));
    for (auto& v : data) v = static_cast<S>(rng.gaussian(mean, stddev));
    return Tensor<S>::from(shape, std::move(data));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class S>
class Linear : public Module<S> {
public:
    Linear() = default;
    Linear(int in_features, int out_features, Rng& rng, const std::string& name, bool bias = true)
        : in_(in_features), out_(out_features), has_bias_(bias) {
        weight_ = Parameter<S>(xavier_uniform<S>({out_features, in_features}, in_features,
                                                 out_features, rng),
                               name + ".weight");
        if (bias) bias_ = Parameter<S>(Tensor<S>::zeros({out_features}), name + ".bias");
    }

    void collect_parameters(std::vector<Parameter<S>*>& out) override {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    Tensor<S> forward(const Tensor<S>& x) {
        return linear(x, weight_.value, has_bias_ ? &bias_.value : nullptr);
    }

    int in_features() const { return in_; }
    int out_features() const { return out_; }
    Parameter<S>& weight() { return weight_; }
    Parameter<S>& bias() { return bias_; }

private:
    int in_ = 0, out_ = 0;
    bool has_bias_ = true;
    Parameter<S> weight_, bias_;
};

template <class S>
class LayerNorm : public Module<S> {
public:
    LayerNorm() = default;
    LayerNorm(int width, const std::string& name) {
        gamma_ = Parameter<S>(Tensor<S>::full({width}, S(1)), name + ".gamma");
        beta_ = Parameter<S>(Tensor<S>::zeros({width}), name + ".beta");
    }

    void collect_parameters(std::vector<Parameter<S>*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    Tensor<S> forward(const Tensor<S>& x) { return layer_norm(x, gamma_.value, beta_.value); }

private:
    Parameter<S> gamma_, beta_;
};

template <class S>
class EmbeddingTable : public Module<S> {
public:
    EmbeddingTable() = default;
    EmbeddingTable(int vocab, int width, Rng& rng, const std::string& name, double init_std = 0.02)
        : width_(width) {
        table_ = Parameter<S>(gaussian_init<S>({vocab, width}, 0.0, init_std, rng), name + ".table");
    }

    void collect_parameters(std::vector<Parameter<S>*>& out) override { out.push_back(&table_); }

    Tensor<S> forward(const std::vector<int>& ids, const Shape& ids_shape) {
        return embedding(table_.value, ids, ids_shape);
    }

    int vocab_size() const { return table_.value.dim(0); }
    int width() const { return width_; }
    Parameter<S>& table() { return table_; }

    // Appends rows for new ids; existing rows are preserved bit-for-bit.
    void grow(int new_vocab, Rng& rng, double init_std = 0.02) {
        const int old_vocab = vocab_size();
        check_contract(new_vocab >= old_vocab, "embedding growth cannot shrink the table");
        if (new_vocab == old_vocab) return;
        std::vector<S> data(static_cast<std::int64_t>(new_vocab) * width_);
        std::copy(table_.value.values().begin(), table_.value.values().end(), data.begin());
        for (std::int64_t i = static_cast<std::int64_t>(old_vocab) * width_;
             i < static_cast<std::int64_t>(new_vocab) * width_; ++i)
            data[i] = static_cast<S>(rng.gaussian(0.0, init_std));
        table_.value = Tensor<S>::from({new_vocab, width_}, std::move(data));
        table_.value.set_requires_grad(true);
    }

private:
    int width_ = 0;
    Parameter<S> table_;
};

template <class S>
class Conv1d : public Module<S> {
public:
    Conv1d() = default;
    Conv1d(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng,
           const std::string& name)
        : kernel_(kernel), stride_(stride), pad_(pad) {
        weight_ = Parameter<S>(xavier_uniform<S>({out_channels, kernel * in_channels},
                                                 kernel * in_channels, out_channels, rng),
                               name + ".weight");
        bias_ = Parameter<S>(Tensor<S>::zeros({out_channels}), name + ".bias");
    }

    void collect_parameters(std::vector<Parameter<S>*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Tensor<S> forward(const Tensor<S>& x) {
        return conv1d(x, weight_.value, bias_.value, kernel_, stride_, pad_);
    }

private:
    int kernel_ = 1, stride_ = 1, pad_ = 0;
    Parameter<S> weight_, bias_;
};

template <class S>
class ConvTranspose1d : public Module<S> {
public:
    ConvTranspose1d() = default;
    ConvTranspose1d(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng,
                    const std::string& name)
        : kernel_(kernel), stride_(stride), pad_(pad) {
        weight_ = Parameter<S>(xavier_uniform<S>({in_channels, kernel * out_channels}, in_channels,
                                                 kernel * out_channels, rng),
                               name + ".weight");
        bias_ = Parameter<S>(Tensor<S>::zeros({out_channels}), name + ".bias");
    }

    void collect_parameters(std::vector<Parameter<S>*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Tensor<S> forward(const Tensor<S>& x) {
        return conv1d_transpose(x, weight_.value, bias_.value, kernel_, stride_, pad_);
    }

private:
    int kernel_ = 1, stride_ = 1, pad_ = 0;
    Parameter<S> weight_, bias_;
};

// Causal multi-head self-attention, pre-norm convention is applied by the
// caller. Input [B, T, W] -> output [B, T, W].
template <class S>
class CausalSelfAttention : public Module<S> {
public:
    CausalSelfAttention() = default;
    CausalSelfAttention(int width, int heads, Rng& rng, const std::string& name)
        : width_(width), heads_(heads) {
        check_config(width % heads == 0, "attention width must divide by head count");
        qkv_ = Linear<S>(width, 3 * width, rng, name + ".qkv");
        out_ = Linear<S>(width, width, rng, name + ".out");
    }

    void collect_parameters(std::vector<Parameter<S>*>& out) override {
        qkv_.collect_parameters(out);
        out_.collect_parameters(out);
    }

    Tensor<S> forward(const Tensor<S>& x) {
        const int b = x.dim(0), t = x.dim(1);
        const int hd = width_ / heads_;
        Tensor<S> qkv = qkv_.forward(x);  // [B, T, 3W]
        Tensor<S> q = split_heads(slice_last(qkv, 0, width_), b, t, hd);
        Tensor<S> k = split_heads(slice_last(qkv, width_, width_), b, t, hd);
        Tensor<S> v = split_heads(slice_last(qkv, 2 * width_, width_), b, t, hd);
        // scores [B, H, T, T]
        Tensor<S> kt = permute(k, {0, 1, 3, 2});
        Tensor<S> scores = scale(matmul(q, kt), static_cast<S>(1.0 / std::sqrt(double(hd))));
        scores = add(scores, causal_mask(t));
        Tensor<S> att = softmax(scores);
        Tensor<S> ctx = matmul(att, v);                       // [B, H, T, hd]
        ctx = permute(ctx, {0, 2, 1, 3});                     // [B, T, H, hd]
        ctx = reshape(ctx, {b, t, width_});
        return out_.forward(ctx);
    }

    Linear<S>& qkv_proj() { return qkv_; }
    Linear<S>& out_proj() { return out_; }
    int heads() const { return heads_; }

private:
    Tensor<S> split_heads(const Tensor<S>& x, int b, int t, int hd) {
        return permute(reshape(x, {b, t, heads_, hd}), {0, 2, 1, 3});  // [B, H, T, hd]
    }

    Tensor<S> causal_mask(int t) {
        std::vector<S> m(static_cast<std::int64_t>(t) * t, S(0));
        for (int i = 0; i < t; ++i)
            for (int j = i + 1; j < t; ++j) m[static_cast<std::int64_t>(i) * t + j] = S(-1e9);
        return Tensor<S>::from({t, t}, std::move(m));
    }

    int width_ = 0, heads_ = 0;
    Linear<S> qkv_, out_;
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class S>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
    std::int64_t step_count() const { return step_; }

    // One update over all parameters. Frozen parameters are skipped (their
    // stale gradients are still cleared); non-frozen parameters must have a
    // gradient. update_row_begin confines the update to the trailing rows.
    void step(const std::vector<Parameter<S>*>& params) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Parameter<S>& p = *params[pi];
            if (p.frozen) {
                p.value.clear_grad();
                continue;
            }
            check_contract(p.value.grad().size() == p.value.values().size(),
                           "missing gradient for parameter '" + p.name + "'");
            auto& m = moments1_[params[pi]];
            auto& v = moments2_[params[pi]];
            if (m.size() != p.value.values().size()) {
                m.assign(p.value.values().size(), 0.0);
                v.assign(p.value.values().size(), 0.0);
            }
            std::int64_t begin = 0;
            if (p.update_row_begin > 0) {
                const std::int64_t row =
                    p.value.numel() / p.value.dim(0);
                begin = static_cast<std::int64_t>(p.update_row_begin) * row;
            }
            auto& vals = p.value.values();
            const auto& grads = p.value.grad();
            for (std::int64_t i = begin; i < static_cast<std::int64_t>(vals.size()); ++i) {
                const double g = static_cast<double>(grads[i]);
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                vals[i] = static_cast<S>(
                    static_cast<double>(vals[i]) -
                    cfg_.learning_rate *
                        (mhat / (std::sqrt(vhat) + cfg_.epsilon) +
                         cfg_.weight_decay * static_cast<double>(vals[i])));
            }
            p.value.clear_grad();
        }
    }

    void reset() {
        step_ = 0;
        moments1_.clear();
        moments2_.clear();
    }

private:
    AdamWConfig cfg_;
    std::int64_t step_ = 0;
    std::unordered_map<const Parameter<S>*, std::vector<double>> moments1_;
    std::unordered_map<const Parameter<S>*, std::vector<double>> moments2_;
};

}  // namespace mgpt2::nn
