#pragma once

#include <string>

#include "continual/common.hpp"
#include "continual/fisher.hpp"
#include "continual/importance.hpp"

namespace continual {

enum class Method { vanilla, ewcpp, pi, rwalk };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::vanilla: return "vanilla";
        case Method::ewcpp: return "ewcpp";
        case Method::pi: return "pi";
        case Method::rwalk: return "rwalk";
    }
    return "?";
}

inline Method method_from_name(const std::string& s) {
    if (s == "vanilla") return Method::vanilla;
    if (s == "ewcpp") return Method::ewcpp;
    if (s == "pi") return Method::pi;
    if (s == "rwalk") return Method::rwalk;
    throw std::invalid_argument("unknown method '" + s + "' (vanilla|ewcpp|pi|rwalk)");
}

/// How the Fisher and score vectors are brought to a common [0,1] scale before
/// they are summed into the rwalk anchor weights (and, unless raw scores are
/// requested, for the pi weights too). Max scaling makes the largest entry 1,
/// which leaves most coordinates with weights of order 1/sparsity and, at the
/// default lambdas, pins a large model almost everywhere. Sum scaling fixes
/// the total weight mass at 1 instead, so stiffness does not grow with the
/// parameter count. Min-max is max scaling with the floor shifted to zero.
enum class AnchorNormalizer { max, min_max, sum };

inline const char* anchor_normalizer_name(AnchorNormalizer n) {
    switch (n) {
        case AnchorNormalizer::max: return "max";
        case AnchorNormalizer::min_max: return "min_max";
        case AnchorNormalizer::sum: return "sum";
    }
    return "?";
}

inline AnchorNormalizer anchor_normalizer_from_name(const std::string& s) {
    if (s == "max") return AnchorNormalizer::max;
    if (s == "min_max") return AnchorNormalizer::min_max;
    if (s == "sum") return AnchorNormalizer::sum;
    throw std::invalid_argument("unknown normalizer '" + s + "' (max|min_max|sum)");
}

inline Vec apply_normalizer(AnchorNormalizer kind, const Vec& values) {
    switch (kind) {
        case AnchorNormalizer::max: return normalize_unit(values);
        case AnchorNormalizer::min_max: return normalize_minmax(values);
        case AnchorNormalizer::sum: return normalize_sum(values);
    }
    throw std::logic_error("apply_normalizer: bad kind");
}

/// Quadratic pull toward the parameters at the last task boundary:
///     penalty(theta) = lambda * sum_i weight_i * (theta_i - theta_star_i)^2.
/// The conventional 1/2 in front of EWC's KL form is folded into lambda so all
/// methods share one formula; lambda defaults account for that.
struct PenaltyAnchor {
    Vec theta_star;
    Vec weight;
    Method method = Method::vanilla;
    double lambda = 0.0;

    bool active() const { return lambda > 0.0 && weight.size() > 0; }

    /// Pre-existing coordinates stay pinned where they were; new coordinates get
    /// zero weight (nothing is known about them yet).
    void grow(const std::vector<LayerShape>& before, const std::vector<LayerShape>& after) {
        if (theta_star.size() == 0) return;
        theta_star = grow_flat(theta_star, before, after, 0.0);
        weight = grow_flat(weight, before, after, 0.0);
    }
};

/// The no-op anchor used for task 1 and for the vanilla method.
inline PenaltyAnchor zero_anchor(Index n) {
    PenaltyAnchor a;
    a.theta_star = Vec::Zero(n);
    a.weight = Vec::Zero(n);
    a.method = Method::vanilla;
    a.lambda = 0.0;
    return a;
}

/// Builds the per-method anchor at a task boundary. Expects the Fisher snapshot
/// and consolidated scores that the boundary just produced.
///
/// Weights: ewcpp uses the raw Fisher snapshot; rwalk adds the normalized
/// Fisher and normalized scores so both live on the same [0,1] scale; pi
/// uses the scores alone (accumulated with Euclidean denominators), normalized
/// by default. normalize_pi=false keeps the raw score scale instead, matching
/// the magnitude conventions of the original path-integral formulation. The
/// normalizer picks how that [0,1] scaling is done; see AnchorNormalizer.
inline PenaltyAnchor make_anchor(Method method, const Vec& theta_now,
                                 const FisherDiag& fisher_snapshot, const ScoreState& scores,
                                 double lambda, bool normalize_pi = true,
                                 AnchorNormalizer normalizer = AnchorNormalizer::max) {
    if (lambda < 0.0) throw std::invalid_argument("make_anchor: negative lambda");
    PenaltyAnchor a;
    a.method = method;
    a.lambda = lambda;
    a.theta_star = theta_now;
    switch (method) {
        case Method::vanilla:
            a.weight = Vec::Zero(theta_now.size());
            break;
        case Method::ewcpp:
            if (fisher_snapshot.values.size() != theta_now.size())
                throw ShapeError("make_anchor: Fisher length mismatch");
            a.weight = fisher_snapshot.values;
            break;
        case Method::pi:
            if (scores.s_total.size() != theta_now.size())
                throw ShapeError("make_anchor: score length mismatch");
            a.weight = normalize_pi ? apply_normalizer(normalizer, scores.s_total)
                                    : scores.s_total;
            break;
        case Method::rwalk:
            if (fisher_snapshot.values.size() != theta_now.size() ||
                scores.s_total.size() != theta_now.size())
                throw ShapeError("make_anchor: Fisher/score length mismatch");
            a.weight = apply_normalizer(normalizer, fisher_snapshot.values) +
                       apply_normalizer(normalizer, scores.s_total);
            break;
    }
    return a;
}

inline double penalty(const PenaltyAnchor& anchor, const Vec& theta) {
    if (!anchor.active()) return 0.0;
    if (theta.size() != anchor.theta_star.size())
        throw ShapeError("penalty: theta length mismatch");
    return anchor.lambda *
           (anchor.weight.array() * (theta - anchor.theta_star).array().square()).sum();
}

inline Vec penalty_grad(const PenaltyAnchor& anchor, const Vec& theta) {
    if (anchor.active() && theta.size() != anchor.theta_star.size())
        throw ShapeError("penalty_grad: theta length mismatch");
    if (!anchor.active()) return Vec::Zero(theta.size());
    return 2.0 * anchor.lambda * anchor.weight.cwiseProduct(theta - anchor.theta_star);
}

/// grad += penalty gradient, skipping the temporary when the anchor is inert.
inline void add_penalty_grad(const PenaltyAnchor& anchor, const Vec& theta, Vec& grad) {
    if (!anchor.active()) return;
    if (theta.size() != anchor.theta_star.size() || grad.size() != theta.size())
        throw ShapeError("add_penalty_grad: length mismatch");
    grad.array() +=
        (2.0 * anchor.lambda) * anchor.weight.array() * (theta - anchor.theta_star).array();
}

}  // namespace continual
