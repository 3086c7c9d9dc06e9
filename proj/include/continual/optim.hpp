#pragma once

#include <cmath>

#include "continual/common.hpp"
#include "continual/nn.hpp"

namespace continual {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Vec m;  // first moment
    Vec v;  // second moment
    long t = 0;

    static AdamState zeros(Index n) {
        AdamState s;
        s.m = Vec::Zero(n);
        s.v = Vec::Zero(n);
        return s;
    }

    /// Carries moments across an output-growth step; new coordinates start at zero
    /// and the step counter is kept (bias correction keeps its history).
    void grow(const std::vector<LayerShape>& before, const std::vector<LayerShape>& after) {
        m = grow_flat(m, before, after, 0.0);
        v = grow_flat(v, before, after, 0.0);
    }
};

/// One bias-corrected Adam update, in place. If step_delta is given it receives
/// theta_after - theta_before, which is what the importance accumulator needs.
inline void adam_step(AdamState& state, Vec& theta, const Vec& grad, const AdamConfig& cfg,
                      Vec* step_delta = nullptr) {
    if (grad.size() != theta.size() || state.m.size() != theta.size())
        throw ShapeError("adam_step: gradient/state length does not match parameters");
    if (!grad.allFinite())
        throw NumericError("adam_step: non-finite gradient");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    const Index n = theta.size();
    double* m = state.m.data();
    double* v = state.v.data();
    double* th = theta.data();
    const double* g = grad.data();
    double* sd = step_delta ? step_delta->data() : nullptr;
    if (step_delta && step_delta->size() != n)
        throw ShapeError("adam_step: step_delta length mismatch");
    for (Index i = 0; i < n; ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double step = -cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
        th[i] += step;
        if (sd) sd[i] = step;
    }
}

}  // namespace continual
