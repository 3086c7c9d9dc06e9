#pragma once

#include "continual/common.hpp"
#include "continual/fisher.hpp"
#include "continual/nn.hpp"

namespace continual {

/// Distance in the denominator of the score increment. fisher_kl uses the
/// running-Fisher quadratic; euclidean swaps in plain squared parameter motion,
/// which is what turns this accumulator into the PI-style importance.
enum class StepDistance { fisher_kl, euclidean };

/// Path-integral importance scores. Within a task, per-parameter first-order
/// loss decreases are accumulated and every delta_t optimizer steps the
/// interval is flushed into s_current as
///     increment_i = delta_l_i / (0.5 * F_i * (theta_i - theta_at_flush_i)^2 + epsilon)
/// with negative increments clamped to zero. At task boundaries s_current is
/// folded into s_total by averaging, so older tasks decay geometrically.
struct ScoreState {
    Vec s_total;
    Vec s_current;
    Vec delta_l;
    Vec theta_at_flush;
    int steps_since_flush = 0;
    int delta_t = 10;
    double epsilon = 1e-3;
    StepDistance distance = StepDistance::fisher_kl;
    int finished_tasks = 0;
};

inline ScoreState make_score_state(const Vec& theta0, int delta_t, double epsilon,
                                   StepDistance distance = StepDistance::fisher_kl) {
    require(delta_t >= 1, "score state: delta_t must be >= 1");
    require(epsilon > 0.0, "score state: epsilon must be positive");
    ScoreState s;
    const Index n = theta0.size();
    s.s_total = Vec::Zero(n);
    s.s_current = Vec::Zero(n);
    s.delta_l = Vec::Zero(n);
    s.theta_at_flush = theta0;
    s.delta_t = delta_t;
    s.epsilon = epsilon;
    s.distance = distance;
    return s;
}

/// Records one optimizer step: delta_l_i += -grad_i * step_delta_i (positive when
/// the step reduced the loss along coordinate i). The caller flushes when
/// flush_due() turns true.
inline void accumulate_step(ScoreState& state, const Vec& grad, const Vec& step_delta) {
    if (grad.size() != state.delta_l.size() || step_delta.size() != state.delta_l.size())
        throw ShapeError("accumulate_step: length mismatch");
    state.delta_l.array() -= grad.array() * step_delta.array();
    state.steps_since_flush += 1;
}

inline bool flush_due(const ScoreState& state) {
    return state.steps_since_flush >= state.delta_t;
}

/// Ends the current interval: converts delta_l into clamped score increments and
/// re-anchors theta_at_flush at theta_now. fisher_running may be null when the
/// distance is euclidean. `force` permits flushing a partial interval, which the
/// training loop does once at each task boundary.
inline void flush_interval(ScoreState& state, const FisherDiag* fisher_running,
                           const Vec& theta_now, bool force = false) {
    if (state.epsilon <= 0.0)
        throw std::invalid_argument("flush_interval: epsilon must be positive");
    if (!force && state.steps_since_flush != state.delta_t)
        throw std::logic_error("flush_interval: called before the interval completed");
    if (theta_now.size() != state.theta_at_flush.size())
        throw ShapeError("flush_interval: theta length mismatch");
    if (state.distance == StepDistance::fisher_kl) {
        if (fisher_running == nullptr)
            throw std::invalid_argument("flush_interval: fisher_kl distance needs the running Fisher");
        if (fisher_running->values.size() != state.delta_l.size())
            throw ShapeError("flush_interval: Fisher length mismatch");
    }
    if (state.steps_since_flush > 0) {
        const Index n = state.delta_l.size();
        const double* th = theta_now.data();
        const double* th0 = state.theta_at_flush.data();
        const double* dl = state.delta_l.data();
        const double* f =
            state.distance == StepDistance::fisher_kl ? fisher_running->values.data() : nullptr;
        double* sc = state.s_current.data();
        for (Index i = 0; i < n; ++i) {
            const double dth = th[i] - th0[i];
            // fisher_kl: the quadratic KL form. euclidean: plain squared motion
            // (no 1/2), identical to fisher_kl with F = 2.
            const double dist = f ? 0.5 * f[i] * dth * dth : dth * dth;
            const double inc = dl[i] / (dist + state.epsilon);
            if (inc > 0.0) sc[i] += inc;
        }
    }
    state.delta_l.setZero();
    state.theta_at_flush = theta_now;
    state.steps_since_flush = 0;
}

inline void flush_interval(ScoreState& state, const FisherDiag& fisher_running,
                           const Vec& theta_now, bool force = false) {
    flush_interval(state, &fisher_running, theta_now, force);
}

/// Folds the finished task's scores into the consolidated total. The first task
/// has nothing to average with, so its scores are taken as-is.
inline void consolidate_task(ScoreState& state) {
    if (state.finished_tasks == 0)
        state.s_total = state.s_current;
    else
        state.s_total = 0.5 * (state.s_total + state.s_current);
    state.s_current.setZero();
    state.finished_tasks += 1;
}

/// Starts a fresh accumulation interval at theta_now (used at each task start).
inline void reset_interval(ScoreState& state, const Vec& theta_now) {
    if (theta_now.size() != state.delta_l.size())
        throw ShapeError("reset_interval: theta length mismatch");
    state.delta_l.setZero();
    state.theta_at_flush = theta_now;
    state.steps_since_flush = 0;
}

/// Remaps every per-parameter vector across an output-growth step, zero-filling
/// the new coordinates (theta_at_flush is re-anchored by reset_interval).
inline void grow_score_state(ScoreState& state, const std::vector<LayerShape>& before,
                             const std::vector<LayerShape>& after) {
    state.s_total = grow_flat(state.s_total, before, after, 0.0);
    state.s_current = grow_flat(state.s_current, before, after, 0.0);
    state.delta_l = grow_flat(state.delta_l, before, after, 0.0);
    state.theta_at_flush = grow_flat(state.theta_at_flush, before, after, 0.0);
}

/// Scales a nonnegative vector by its maximum so the result lies in [0,1].
/// All-zero input stays zero.
inline Vec normalize_unit(const Vec& values) {
    if ((values.array() < 0.0).any())
        throw std::invalid_argument("normalize_unit: negative entry");
    const double mx = values.size() > 0 ? values.maxCoeff() : 0.0;
    if (mx <= 0.0) return Vec::Zero(values.size());
    return values / mx;
}

/// Min-max variant: maps [min, max] to [0,1]; constant input maps to zeros.
inline Vec normalize_minmax(const Vec& values) {
    if (values.size() == 0) return values;
    const double lo = values.minCoeff();
    const double hi = values.maxCoeff();
    if (hi <= lo) return Vec::Zero(values.size());
    return (values.array() - lo) / (hi - lo);
}

/// Sum variant: scales so the entries add to 1. Unlike the max scaling this
/// keeps the total penalty mass independent of the parameter count, so a
/// given lambda means the same overall stiffness at any model size.
inline Vec normalize_sum(const Vec& values) {
    if ((values.array() < 0.0).any())
        throw std::invalid_argument("normalize_sum: negative entry");
    const double total = values.size() > 0 ? values.sum() : 0.0;
    if (total <= 0.0) return Vec::Zero(values.size());
    return values / total;
}

}  // namespace continual
