#pragma once

#include <vector>

#include "continual/common.hpp"
#include "continual/nn.hpp"

namespace continual {

enum class FisherProvenance { batch, running, snapshot };

/// Diagonal of the empirical Fisher information, one entry per parameter in
/// flat layout. Provenance records which stage of the pipeline produced it.
struct FisherDiag {
    Vec values;
    FisherProvenance provenance = FisherProvenance::batch;

    static FisherDiag zeros(Index n, FisherProvenance p = FisherProvenance::running) {
        return {Vec::Zero(n), p};
    }
};

enum class FisherEstimator {
    per_example,   // mean of per-example squared gradients (the exact diagonal)
    squared_mean,  // square of the batch-mean gradient; cheaper, biased low
};

/// Diagonal empirical Fisher of the batch: values_i = (1/B) sum_b (d log p(y_b|x_b)/d theta_i)^2.
///
/// The per-example mode never materializes per-example gradients. Because each
/// example's gradient of W is an outer product delta_b a_b^T, the sum of its
/// squares over the batch is (delta^2)^T (a^2), one GEMM per layer on the
/// squared activations. This overload reuses an existing forward pass; params
/// must be the ones that produced the cache.
inline FisherDiag batch_fisher(const ModelParams& params, const ForwardCache& cache,
                               const std::vector<int>& labels,
                               FisherEstimator mode = FisherEstimator::per_example) {
    require(!cache.mask, "batch_fisher: masked caches are not supported");
    if (mode == FisherEstimator::squared_mean) {
        Vec g = backward(params, cache, labels);
        return {g.cwiseProduct(g), FisherProvenance::batch};
    }

    const LossResult lr = softmax_log_likelihood(cache, labels);
    const Index n = cache.batch_size();
    const Index num_layers = params.num_layers();

    // Per-example gradient of -log p at the output is (softmax - onehot); no 1/B.
    Mat delta = lr.probs;
    for (Index i = 0; i < n; ++i)
        delta(i, params.label_row(labels[static_cast<std::size_t>(i)])) -= 1.0;

    Vec out(params.flat_size());
    std::vector<Mat> sq_w(static_cast<std::size_t>(num_layers));
    std::vector<Vec> sq_b(static_cast<std::size_t>(num_layers));
    for (Index l = num_layers - 1; l >= 0; --l) {
        const Mat& a = cache.acts[static_cast<std::size_t>(l)];
        sq_w[static_cast<std::size_t>(l)] =
            delta.array().square().matrix().transpose() * a.array().square().matrix();
        sq_b[static_cast<std::size_t>(l)] = delta.array().square().colwise().sum();
        if (l > 0) {
            delta = (delta * params.weight(l)).array() *
                    (cache.acts[static_cast<std::size_t>(l)].array() > 0.0).cast<double>();
        }
    }
    Index off = 0;
    for (Index l = 0; l < num_layers; ++l) {
        const Mat& sw = sq_w[static_cast<std::size_t>(l)];
        std::copy(sw.data(), sw.data() + sw.size(), out.data() + off);
        off += sw.size();
        const Vec& sb = sq_b[static_cast<std::size_t>(l)];
        std::copy(sb.data(), sb.data() + sb.size(), out.data() + off);
        off += sb.size();
    }
    out /= static_cast<double>(n);
    return {std::move(out), FisherProvenance::batch};
}

inline FisherDiag batch_fisher(const ModelParams& params, const Batch& batch,
                               FisherEstimator mode = FisherEstimator::per_example) {
    return batch_fisher(params, forward(params, batch), batch.labels, mode);
}

/// Moving-average update of the running Fisher: alpha*batch + (1-alpha)*running.
inline void ewc_update_inplace(FisherDiag& running, const FisherDiag& batch_f, double alpha) {
    require(alpha >= 0.0 && alpha <= 1.0, "ewc_update: alpha must lie in [0,1]");
    if (running.values.size() != batch_f.values.size())
        throw ShapeError("ewc_update: Fisher length mismatch");
    running.values = alpha * batch_f.values + (1.0 - alpha) * running.values;
    running.provenance = FisherProvenance::running;
}

inline FisherDiag ewc_update(const FisherDiag& running, const FisherDiag& batch_f, double alpha) {
    FisherDiag out = running;
    ewc_update_inplace(out, batch_f, alpha);
    return out;
}

/// Quadratic KL surrogate: 0.5 * sum_i F_i (theta_b_i - theta_a_i)^2.
inline double kl_quadratic(const FisherDiag& fisher, const Vec& theta_a, const Vec& theta_b) {
    if (fisher.values.size() != theta_a.size() || theta_a.size() != theta_b.size())
        throw ShapeError("kl_quadratic: length mismatch");
    return 0.5 * (fisher.values.array() * (theta_b - theta_a).array().square()).sum();
}

/// Mean KL(p_a || p_b) over a probe set, computed from full softmax outputs.
/// Used as the exact value the quadratic form approximates.
inline double exact_mean_kl(const ModelParams& params_a, const ModelParams& params_b,
                            const Mat& probe_inputs) {
    if (params_a.output_labels() != params_b.output_labels())
        throw std::invalid_argument("exact_mean_kl: models have different label spaces");
    require(probe_inputs.rows() > 0, "exact_mean_kl: empty probe set");
    const ForwardCache ca = forward(params_a, probe_inputs);
    const ForwardCache cb = forward(params_b, probe_inputs);

    auto log_softmax = [](const Mat& logits) {
        Mat out = logits;
        for (Index i = 0; i < logits.rows(); ++i) {
            const double mx = logits.row(i).maxCoeff();
            const double lz = std::log((logits.row(i).array() - mx).exp().sum()) + mx;
            out.row(i).array() -= lz;
        }
        return out;
    };
    const Mat la = log_softmax(ca.logits());
    const Mat lb = log_softmax(cb.logits());
    double total = 0.0;
    for (Index i = 0; i < la.rows(); ++i)
        total += (la.row(i).array().exp() * (la.row(i) - lb.row(i)).array()).sum();
    return total / static_cast<double>(la.rows());
}

}  // namespace continual
