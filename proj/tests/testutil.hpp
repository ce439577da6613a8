#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mgpt2/nn.hpp"
#include "mgpt2/tensor.hpp"

namespace testutil {

// Central finite differences against the analytic gradient of a scalar loss.
// Returns the maximum relative error over the checked entries. `loss_fn` must
// re-run the forward pass from current parameter values.
inline double max_grad_rel_error(const std::function<mgpt2::nn::Tensor<double>()>& loss_fn,
                                 std::vector<mgpt2::nn::Parameter<double>*> params,
                                 double step = 1e-5, int max_entries_per_param = 64) {
    using mgpt2::nn::backward;
    auto loss = loss_fn();
    backward(loss);
    double worst = 0.0;
    for (auto* p : params) {
        std::vector<double> analytic(p->value.grad().begin(), p->value.grad().end());
        const std::int64_t n = p->value.numel();
        const std::int64_t stride = std::max<std::int64_t>(1, n / max_entries_per_param);
        for (std::int64_t i = 0; i < n; i += stride) {
            const double orig = p->value.values()[i];
            p->value.values()[i] = orig + step;
            const double up = loss_fn().item();
            p->value.values()[i] = orig - step;
            const double down = loss_fn().item();
            p->value.values()[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
        }
        p->value.clear_grad();
    }
    return worst;
}

}  // namespace testutil
