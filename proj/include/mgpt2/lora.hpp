#pragma once

#include <string>

#include "mgpt2/nn.hpp"

namespace mgpt2::nn {

// Low-rank additive delta for one linear layer: delta(x) = (alpha/r) * B(A x),
// with A [r, d_in] Gaussian(0, 1/r) and B [d_out, r] zero so a fresh adapter
// is exactly the identity on the base output.
template <class S>
class LoraAdapter : public Module<S> {
public:
    LoraAdapter() = default;
    LoraAdapter(int d_in, int d_out, int rank, double alpha, Rng& rng,
                const std::string& target_layer)
        : rank_(rank), alpha_(alpha), target_(target_layer) {
        check_config(rank > 0 && rank <= std::min(d_in, d_out),
                     "lora rank must be in (0, min(d_in, d_out)] for layer '" + target_layer + "'");
        down_ = Parameter<S>(gaussian_init<S>({rank, d_in}, 0.0, 1.0 / std::sqrt(double(rank)), rng),
                             target_layer + ".lora.down");
        up_ = Parameter<S>(Tensor<S>::zeros({d_out, rank}), target_layer + ".lora.up");
        up_.value.set_requires_grad(true);
    }

    void collect_parameters(std::vector<Parameter<S>*>& out) override {
        out.push_back(&down_);
        out.push_back(&up_);
    }

    // base_out + (alpha/r) * B (A layer_in)
    Tensor<S> forward(const Tensor<S>& base_out, const Tensor<S>& layer_in) {
        Tensor<S> h = linear(layer_in, down_.value);
        Tensor<S> d = linear(h, up_.value);
        return add(base_out, scale(d, static_cast<S>(alpha_ / rank_)));
    }

    int rank() const { return rank_; }
    double alpha() const { return alpha_; }
    const std::string& target_layer() const { return target_; }
    Parameter<S>& down() { return down_; }
    Parameter<S>& up() { return up_; }

private:
    int rank_ = 0;
    double alpha_ = 0.0;
    std::string target_;
    Parameter<S> down_, up_;
};

// Linear layer with an optional attached adapter. The base weights stay
// intact; enabling the adapter only adds the low-rank path.
template <class S>
class LoraLinear : public Module<S> {
public:
    LoraLinear() = default;
    LoraLinear(int in_features, int out_features, Rng& rng, const std::string& name)
        : base_(in_features, out_features, rng, name) {}

    void collect_parameters(std::vector<Parameter<S>*>& out) override {
        base_.collect_parameters(out);
        if (has_adapter_) adapter_.collect_parameters(out);
    }

    void attach_adapter(int rank, double alpha, Rng& rng) {
        adapter_ = LoraAdapter<S>(base_.in_features(), base_.out_features(), rank, alpha, rng,
                                  base_.weight().name.substr(0, base_.weight().name.size() - 7));
        has_adapter_ = true;
    }

    Tensor<S> forward(const Tensor<S>& x) {
        Tensor<S> y = base_.forward(x);
        if (has_adapter_) y = adapter_.forward(y, x);
        return y;
    }

    bool has_adapter() const { return has_adapter_; }
    Linear<S>& base() { return base_; }
    LoraAdapter<S>& adapter() { return adapter_; }

private:
    Linear<S> base_;
    LoraAdapter<S> adapter_;
    bool has_adapter_ = false;
};

}  // namespace mgpt2::nn
