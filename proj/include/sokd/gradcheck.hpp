#pragma once

#include <cmath>
#include <functional>

#include "sokd/tensor.hpp"

namespace sokd {

// Central finite differences (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) per
// element. f is evaluated without an active tape, so it sees plain forward
// passes. This is the reference every backward implementation is checked
// against.
inline Tensor finite_difference_gradient(const std::function<float(const Tensor&)>& f,
                                         const Tensor& x, float eps = 1e-3f) {
    if (eps <= 0.0f) throw InvalidArg("finite_difference_gradient: eps must be positive");
    Tensor grad = Tensor::zeros(x.shape());
    Tensor probe = x.detach();
    auto p = probe.mutable_data();
    auto g = grad.mutable_data();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const float saved = p[i];
        p[i] = saved + eps;
        const double fp = f(probe);
        p[i] = saved - eps;
        const double fm = f(probe);
        p[i] = saved;
        const double d = (fp - fm) / (2.0 * static_cast<double>(eps));
        if (std::isnan(d)) throw NonFinite("finite_difference_gradient: f returned NaN");
        g[i] = static_cast<float>(d);
    }
    return grad;
}

}  // namespace sokd
