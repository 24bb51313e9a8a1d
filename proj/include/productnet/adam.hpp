#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace productnet {

struct AdamConfig {
    double step = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One bias-corrected Adam update of `params` in place. `t` is the 1-based
/// global step count; `m` and `v` are the moment buffers for these params.
inline void adam_update(std::span<double> params, std::span<const double> grad, std::span<double> m,
                        std::span<double> v, std::size_t t, const AdamConfig& cfg) {
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const double lr = cfg.step * std::sqrt(c2) / c1;
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        params[i] -= lr * m[i] / (std::sqrt(v[i]) + cfg.epsilon * std::sqrt(c2));
    }
}

}  // namespace productnet
