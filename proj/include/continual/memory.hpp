#pragma once

#include <map>
#include <numeric>
#include <vector>

#include "continual/common.hpp"
#include "continual/data.hpp"
#include "continual/nn.hpp"
#include "continual/rng.hpp"

namespace continual {

enum class SamplerKind { uniform, plane_distance, entropy, mof };

inline const char* sampler_name(SamplerKind s) {
    switch (s) {
        case SamplerKind::uniform: return "uniform";
        case SamplerKind::plane_distance: return "plane_distance";
        case SamplerKind::entropy: return "entropy";
        case SamplerKind::mof: return "mof";
    }
    return "?";
}

inline SamplerKind sampler_from_name(const std::string& s) {
    if (s == "uniform") return SamplerKind::uniform;
    if (s == "plane_distance") return SamplerKind::plane_distance;
    if (s == "entropy") return SamplerKind::entropy;
    if (s == "mof") return SamplerKind::mof;
    throw std::invalid_argument("unknown sampler '" + s +
                                "' (uniform|plane_distance|entropy|mof)");
}

namespace detail {

/// Weighted sampling without replacement: repeatedly draw an index with
/// probability proportional to its weight among the remaining candidates.
inline std::vector<Index> weighted_without_replacement(const Vec& weights, Index m, Rng& rng) {
    const Index n = weights.size();
    require(n > 0, "sampling from empty data");
    if ((weights.array() <= 0.0).any())
        throw std::invalid_argument("sampling weights must be positive");
    std::vector<Index> remaining(static_cast<std::size_t>(n));
    std::iota(remaining.begin(), remaining.end(), Index(0));
    std::vector<Index> picked;
    const Index take = std::min(m, n);
    picked.reserve(static_cast<std::size_t>(take));
    double total = weights.sum();
    for (Index round = 0; round < take; ++round) {
        const double u = rng.uniform() * total;
        double acc = 0.0;
        std::size_t chosen = remaining.size() - 1;  // fp-safety fallback: last remaining
        for (std::size_t i = 0; i < remaining.size(); ++i) {
            acc += weights(remaining[i]);
            if (u < acc) {
                chosen = i;
                break;
            }
        }
        picked.push_back(remaining[chosen]);
        total -= weights(remaining[chosen]);
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(chosen));
    }
    return picked;
}

}  // namespace detail

/// m distinct row indices uniformly at random (all rows if m >= n).
inline std::vector<Index> select_uniform(Index n, Index m, Rng& rng) {
    require(n > 0, "select_uniform: empty class data");
    require(m >= 1, "select_uniform: m must be >= 1");
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index(0));
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(std::min(m, n)));
    return idx;
}

/// Sampling biased toward the decision boundary: pseudo-distance
/// d(x) = features(x) . w_y (the class row of the output layer, bias excluded),
/// selection probability proportional to 1/max(d, d_floor). Nonpositive d gets
/// the floor, i.e. the highest weight.
inline std::vector<Index> select_plane_distance(const ModelParams& model, const Mat& class_inputs,
                                                int class_label, Index m, Rng& rng,
                                                double d_floor = 1e-6) {
    require(class_inputs.rows() > 0, "select_plane_distance: empty class data");
    require(m >= 1, "select_plane_distance: m must be >= 1");
    const Index row = model.label_row(class_label);
    const Mat phi = features(model, class_inputs);
    Vec d = phi * model.weight(model.num_layers() - 1).row(row).transpose();
    Vec w(d.size());
    for (Index i = 0; i < d.size(); ++i) w(i) = 1.0 / std::max(d(i), d_floor);
    return detail::weighted_without_replacement(w, m, rng);
}

/// Entropy of the model's softmax for one input row, with 0*log 0 := 0.
inline double softmax_entropy(const ModelParams& model, const Mat& inputs, Index row_index) {
    const ForwardCache cache = forward(model, Mat(inputs.row(row_index)));
    std::vector<int> dummy{model.output_labels().front()};
    const LossResult lr = softmax_log_likelihood(cache, dummy);
    double h = 0.0;
    for (Index j = 0; j < lr.probs.cols(); ++j) {
        const double p = lr.probs(0, j);
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

/// Sampling biased toward uncertain examples: probability proportional to the
/// softmax entropy plus a small floor so confident points keep nonzero mass.
inline std::vector<Index> select_entropy(const ModelParams& model, const Mat& class_inputs,
                                         Index m, Rng& rng, double h_floor = 1e-8) {
    require(class_inputs.rows() > 0, "select_entropy: empty class data");
    require(m >= 1, "select_entropy: m must be >= 1");
    const ForwardCache cache = forward(model, class_inputs);
    std::vector<int> dummy(static_cast<std::size_t>(class_inputs.rows()),
                           model.output_labels().front());
    const LossResult lr = softmax_log_likelihood(cache, dummy);
    Vec w(class_inputs.rows());
    for (Index i = 0; i < class_inputs.rows(); ++i) {
        double h = 0.0;
        for (Index j = 0; j < lr.probs.cols(); ++j) {
            const double p = lr.probs(i, j);
            if (p > 0.0) h -= p * std::log(p);
        }
        w(i) = h + h_floor;
    }
    return detail::weighted_without_replacement(w, m, rng);
}

/// Mean-of-features herding: greedily grow the exemplar set so its feature mean
/// tracks the class mean; deterministic, O(n*m) feature-space passes.
inline std::vector<Index> select_mof(const ModelParams& model, const Mat& class_inputs, Index m) {
    require(class_inputs.rows() > 0, "select_mof: empty class data");
    require(m >= 1, "select_mof: m must be >= 1");
    const Mat phi = features(model, class_inputs);
    const Vec mu = phi.colwise().mean().transpose();
    const Index n = phi.rows();
    const Index take = std::min(m, n);
    std::vector<bool> used(static_cast<std::size_t>(n), false);
    std::vector<Index> picked;
    Vec sum = Vec::Zero(phi.cols());
    for (Index round = 1; round <= take; ++round) {
        Index best = -1;
        double best_dist = std::numeric_limits<double>::infinity();
        for (Index i = 0; i < n; ++i) {
            if (used[static_cast<std::size_t>(i)]) continue;
            const double dist =
                (mu - (sum + phi.row(i).transpose()) / static_cast<double>(round)).norm();
            if (dist < best_dist) {
                best_dist = dist;
                best = i;
            }
        }
        used[static_cast<std::size_t>(best)] = true;
        picked.push_back(best);
        sum += phi.row(best).transpose();
    }
    return picked;
}

/// Replay buffer: up to m exemplars per class, captured at the end of the task
/// that introduced the class and never mutated afterwards.
class EpisodicMemory {
public:
    EpisodicMemory() = default;
    EpisodicMemory(Index budget, SamplerKind selection)
        : budget_(budget), selection_(selection) {}

    Index budget() const { return budget_; }
    SamplerKind selection() const { return selection_; }

    bool empty() const { return store_.empty(); }

    Index total_count() const {
        Index n = 0;
        for (const auto& [label, rows] : store_) n += rows.rows();
        return n;
    }

    std::vector<int> classes() const {
        std::vector<int> out;
        for (const auto& [label, rows] : store_) out.push_back(label);
        return out;
    }

    const Mat& exemplars(int label) const {
        auto it = store_.find(label);
        if (it == store_.end())
            throw std::invalid_argument("no exemplars stored for label " + std::to_string(label));
        return it->second;
    }

    void add_class(int label, Mat rows) {
        require(budget_ > 0, "add_class: memory has no budget");
        require(rows.rows() <= budget_, "add_class: exceeds per-class budget");
        if (store_.count(label))
            throw std::invalid_argument("exemplars for label " + std::to_string(label) +
                                        " already stored");
        store_.emplace(label, std::move(rows));
    }

    /// Runs the configured selector on one class of the finished task's data.
    void select_and_store(const ModelParams& model, const Mat& class_inputs, int label, Rng& rng) {
        if (budget_ <= 0) return;
        std::vector<Index> idx;
        switch (selection_) {
            case SamplerKind::uniform: idx = select_uniform(class_inputs.rows(), budget_, rng); break;
            case SamplerKind::plane_distance:
                idx = select_plane_distance(model, class_inputs, label, budget_, rng);
                break;
            case SamplerKind::entropy: idx = select_entropy(model, class_inputs, budget_, rng); break;
            case SamplerKind::mof: idx = select_mof(model, class_inputs, budget_); break;
        }
        Mat rows(static_cast<Index>(idx.size()), class_inputs.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) rows.row(static_cast<Index>(r)) =
            class_inputs.row(idx[r]);
        add_class(label, std::move(rows));
    }

private:
    std::map<int, Mat> store_;  // ordered so iteration (and serialization) is stable
    Index budget_ = 0;
    SamplerKind selection_ = SamplerKind::mof;
};

/// Current task data plus every stored exemplar (shuffling is the training
/// loop's job). Empty memory returns the current data unchanged.
inline Dataset replay_union(const EpisodicMemory& memory, const Dataset& current) {
    if (memory.empty()) return current;
    const Index extra = memory.total_count();
    Dataset out;
    out.split = current.split;
    out.inputs.resize(current.size() + extra, current.dim());
    out.inputs.topRows(current.size()) = current.inputs;
    out.labels = current.labels;
    Index at = current.size();
    for (int label : memory.classes()) {
        const Mat& rows = memory.exemplars(label);
        require(rows.cols() == current.dim(), "replay_union: feature dimension mismatch");
        out.inputs.middleRows(at, rows.rows()) = rows;
        for (Index i = 0; i < rows.rows(); ++i) out.labels.push_back(label);
        at += rows.rows();
    }
    return out;
}

}  // namespace continual
