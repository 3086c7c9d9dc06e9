#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "continual/common.hpp"
#include "continual/rng.hpp"

namespace continual {

struct LayerShape {
    Index out = 0;
    Index in = 0;
    bool operator==(const LayerShape&) const = default;
};

/// A mini-batch: one example per row, inputs expected in [0, 1].
struct Batch {
    Mat inputs;               // n x dim
    std::vector<int> labels;  // global label ids, one per row
};

/// Fully connected ReLU network with a linear output layer whose rows are
/// class logits. The output layer can grow as new classes arrive; row r of the
/// last weight matrix always belongs to output_labels()[r], and rows present
/// before a growth step keep their values.
class ModelParams {
public:
    ModelParams() = default;

    /// He-uniform weights, zero biases. hidden may be empty (a linear model).
    static ModelParams make_mlp(Index input_dim, const std::vector<Index>& hidden,
                                const std::vector<int>& initial_labels, Rng& rng) {
        require(input_dim > 0, "make_mlp: input_dim must be positive");
        require(!initial_labels.empty(), "make_mlp: need at least one output label");
        ModelParams p;
        std::vector<Index> dims;
        dims.push_back(input_dim);
        for (Index h : hidden) {
            require(h > 0, "make_mlp: hidden sizes must be positive");
            dims.push_back(h);
        }
        dims.push_back(static_cast<Index>(initial_labels.size()));
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            Mat w(dims[l + 1], dims[l]);
            fill_he_uniform(w, rng);
            p.weights_.push_back(std::move(w));
            p.biases_.push_back(Vec::Zero(dims[l + 1]));
        }
        for (int y : initial_labels) p.append_label(y);
        return p;
    }

    /// Rebuilds a model from raw pieces (deserialization); validates the chain.
    static ModelParams from_parts(std::vector<Mat> weights, std::vector<Vec> biases,
                                  std::vector<int> labels) {
        require(!weights.empty() && weights.size() == biases.size(),
                "from_parts: need matching weight/bias lists");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (biases[l].size() != weights[l].rows())
                throw ShapeError("from_parts: bias length does not match layer rows");
            if (l > 0 && weights[l].cols() != weights[l - 1].rows())
                throw ShapeError("from_parts: layer widths do not chain");
        }
        if (static_cast<Index>(labels.size()) != weights.back().rows())
            throw ShapeError("from_parts: one output label per logit row required");
        for (std::size_t i = 0; i < labels.size(); ++i)
            for (std::size_t j = i + 1; j < labels.size(); ++j)
                if (labels[i] == labels[j])
                    throw std::invalid_argument("from_parts: duplicate output label");
        ModelParams p;
        p.weights_ = std::move(weights);
        p.biases_ = std::move(biases);
        p.labels_ = std::move(labels);
        return p;
    }

    Index num_layers() const { return static_cast<Index>(weights_.size()); }
    Index input_dim() const { return weights_.front().cols(); }
    Index num_outputs() const { return weights_.back().rows(); }

    const Mat& weight(Index l) const { return weights_[static_cast<std::size_t>(l)]; }
    Mat& weight(Index l) { return weights_[static_cast<std::size_t>(l)]; }
    const Vec& bias(Index l) const { return biases_[static_cast<std::size_t>(l)]; }
    Vec& bias(Index l) { return biases_[static_cast<std::size_t>(l)]; }

    const std::vector<int>& output_labels() const { return labels_; }

    bool has_label(int y) const {
        return std::find(labels_.begin(), labels_.end(), y) != labels_.end();
    }

    /// Row of the output layer that scores label y.
    Index label_row(int y) const {
        for (std::size_t r = 0; r < labels_.size(); ++r)
            if (labels_[r] == y) return static_cast<Index>(r);
        throw std::invalid_argument("label_row: unknown label " + std::to_string(y));
    }

    /// Appends He-uniform rows (and zero biases) to the output layer, one per new
    /// label. Existing rows are untouched.
    void grow_output(const std::vector<int>& new_labels, Rng& rng) {
        require(!new_labels.empty(), "grow_output: no labels given");
        for (std::size_t i = 0; i < new_labels.size(); ++i) {
            if (has_label(new_labels[i]))
                throw std::invalid_argument("grow_output: label already present");
            for (std::size_t j = i + 1; j < new_labels.size(); ++j)
                if (new_labels[i] == new_labels[j])
                    throw std::invalid_argument("grow_output: duplicate label in request");
        }
        Mat& w = weights_.back();
        Vec& b = biases_.back();
        const Index old_rows = w.rows();
        const Index cols = w.cols();
        const Index added = static_cast<Index>(new_labels.size());
        w.conservativeResize(old_rows + added, cols);
        b.conservativeResize(old_rows + added);
        const double limit = std::sqrt(6.0 / static_cast<double>(cols));
        for (Index r = 0; r < added; ++r) {
            for (Index c = 0; c < cols; ++c)
                w(old_rows + r, c) = rng.uniform(-limit, limit);
            b(old_rows + r) = 0.0;
        }
        for (int y : new_labels) append_label(y);
    }

    std::vector<LayerShape> shapes() const {
        std::vector<LayerShape> s;
        for (std::size_t l = 0; l < weights_.size(); ++l)
            s.push_back({weights_[l].rows(), weights_[l].cols()});
        return s;
    }

    Index flat_size() const {
        Index n = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l)
            n += weights_[l].size() + biases_[l].size();
        return n;
    }

    /// Flat layout: per layer, the weight matrix column-major then the bias.
    Vec to_flat() const {
        Vec v(flat_size());
        Index off = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            const Mat& w = weights_[l];
            std::copy(w.data(), w.data() + w.size(), v.data() + off);
            off += w.size();
            std::copy(biases_[l].data(), biases_[l].data() + biases_[l].size(), v.data() + off);
            off += biases_[l].size();
        }
        return v;
    }

    void from_flat(const Vec& v) {
        if (v.size() != flat_size())
            throw ShapeError("from_flat: expected " + std::to_string(flat_size()) +
                             " values, got " + std::to_string(v.size()));
        Index off = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            Mat& w = weights_[l];
            std::copy(v.data() + off, v.data() + off + w.size(), w.data());
            off += w.size();
            std::copy(v.data() + off, v.data() + off + biases_[l].size(), biases_[l].data());
            off += biases_[l].size();
        }
    }

private:
    static void fill_he_uniform(Mat& w, Rng& rng) {
        const double limit = std::sqrt(6.0 / static_cast<double>(w.cols()));
        for (Index c = 0; c < w.cols(); ++c)
            for (Index r = 0; r < w.rows(); ++r)
                w(r, c) = rng.uniform(-limit, limit);
    }

    void append_label(int y) { labels_.push_back(y); }

    std::vector<Mat> weights_;
    std::vector<Vec> biases_;
    std::vector<int> labels_;
};

/// Remaps a per-parameter vector (optimizer moments, importance weights, ...)
/// across an output-growth step. Coordinates that existed under `before` keep
/// their values at their new flat positions; new coordinates get `fill`.
inline Vec grow_flat(const Vec& v, const std::vector<LayerShape>& before,
                     const std::vector<LayerShape>& after, double fill = 0.0) {
    require(before.size() == after.size(), "grow_flat: layer count changed");
    Index total_before = 0, total_after = 0;
    for (std::size_t l = 0; l < before.size(); ++l) {
        require(before[l].in == after[l].in, "grow_flat: input widths must not change");
        require(before[l].out <= after[l].out, "grow_flat: layers cannot shrink");
        total_before += before[l].out * (before[l].in + 1);
        total_after += after[l].out * (after[l].in + 1);
    }
    if (v.size() != total_before)
        throw ShapeError("grow_flat: vector does not match the old shapes");
    Vec out = Vec::Constant(total_after, fill);
    Index src = 0, dst = 0;
    for (std::size_t l = 0; l < before.size(); ++l) {
        const Index ob = before[l].out, oa = after[l].out, in = before[l].in;
        for (Index c = 0; c < in; ++c)
            out.segment(dst + c * oa, ob) = v.segment(src + c * ob, ob);
        // bias block sits after the weights
        out.segment(dst + in * oa, ob) = v.segment(src + in * ob, ob);
        src += ob * (in + 1);
        dst += oa * (in + 1);
    }
    return out;
}

/// Activations captured during a forward pass. acts[0] is the input batch,
/// acts[l] the ReLU output of hidden layer l, acts.back() the raw logits over
/// all output rows. When a mask was given, downstream ops (softmax, predict)
/// only look at mask_rows of the logits.
struct ForwardCache {
    std::vector<Mat> acts;
    std::vector<int> output_labels;      // label of each logit row
    std::optional<std::vector<int>> mask;
    std::vector<Index> mask_rows;        // rows of the logits matching mask order

    const Mat& logits() const { return acts.back(); }
    Index batch_size() const { return acts.front().rows(); }

    bool row_active(Index r) const {
        if (!mask) return true;
        return std::find(mask_rows.begin(), mask_rows.end(), r) != mask_rows.end();
    }
};

inline ForwardCache forward(const ModelParams& params, const Mat& inputs,
                            const std::optional<std::vector<int>>& mask = std::nullopt) {
    if (inputs.cols() != params.input_dim())
        throw ShapeError("forward: batch has dim " + std::to_string(inputs.cols()) +
                         ", model expects " + std::to_string(params.input_dim()));
    ForwardCache cache;
    cache.output_labels = params.output_labels();
    if (mask) {
        require(!mask->empty(), "forward: mask must not be empty");
        for (int y : *mask) cache.mask_rows.push_back(params.label_row(y));
        cache.mask = mask;
    }
    cache.acts.reserve(static_cast<std::size_t>(params.num_layers()) + 1);
    cache.acts.push_back(inputs);
    for (Index l = 0; l < params.num_layers(); ++l) {
        Mat z = (cache.acts.back() * params.weight(l).transpose()).rowwise() +
                params.bias(l).transpose();
        if (l + 1 < params.num_layers()) z = z.cwiseMax(0.0);
        cache.acts.push_back(std::move(z));
    }
    return cache;
}

inline ForwardCache forward(const ModelParams& params, const Batch& batch,
                            const std::optional<std::vector<int>>& mask = std::nullopt) {
    return forward(params, batch.inputs, mask);
}

struct LossResult {
    double loss = 0.0;  // mean negative log-likelihood over the batch
    Mat probs;          // n x num_outputs; rows sum to 1 over the active rows
};

/// Numerically stable softmax cross-entropy. With a mask, probabilities are
/// renormalized over the masked rows and other columns are exactly zero.
inline LossResult softmax_log_likelihood(const ForwardCache& cache,
                                         const std::vector<int>& labels) {
    const Mat& logits = cache.logits();
    const Index n = logits.rows();
    const Index k = logits.cols();
    require(static_cast<Index>(labels.size()) == n,
            "softmax_log_likelihood: one label per row required");
    require(n > 0, "softmax_log_likelihood: empty batch");

    std::vector<Index> active;
    if (cache.mask) {
        active = cache.mask_rows;
    } else {
        active.resize(static_cast<std::size_t>(k));
        for (Index r = 0; r < k; ++r) active[static_cast<std::size_t>(r)] = r;
    }

    LossResult out;
    out.probs = Mat::Zero(n, k);
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Index r : active) mx = std::max(mx, logits(i, r));
        double z = 0.0;
        for (Index r : active) z += std::exp(logits(i, r) - mx);
        for (Index r : active) out.probs(i, r) = std::exp(logits(i, r) - mx) / z;

        const int y = labels[static_cast<std::size_t>(i)];
        Index row = static_cast<Index>(-1);
        for (std::size_t j = 0; j < cache.output_labels.size(); ++j)
            if (cache.output_labels[j] == y) { row = static_cast<Index>(j); break; }
        if (row < 0)
            throw std::invalid_argument("softmax_log_likelihood: label " + std::to_string(y) +
                                        " is not an output of this model");
        if (cache.mask && !cache.row_active(row))
            throw std::invalid_argument("softmax_log_likelihood: label " + std::to_string(y) +
                                        " is outside the evaluation mask");
        total += std::log(z) + mx - logits(i, row);
    }
    out.loss = total / static_cast<double>(n);
    if (!std::isfinite(out.loss))
        throw NumericError("softmax_log_likelihood: non-finite loss");
    return out;
}

/// Predicted label per row: argmax over the active logit rows, lowest row on ties.
inline std::vector<int> predict(const ForwardCache& cache) {
    const Mat& logits = cache.logits();
    std::vector<Index> active;
    if (cache.mask) {
        active = cache.mask_rows;
    } else {
        for (Index r = 0; r < logits.cols(); ++r) active.push_back(r);
    }
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(logits.rows()));
    for (Index i = 0; i < logits.rows(); ++i) {
        Index best = active.front();
        for (Index r : active)
            if (logits(i, r) > logits(i, best)) best = r;
        out.push_back(cache.output_labels[static_cast<std::size_t>(best)]);
    }
    return out;
}

/// Gradient of the mean cross-entropy w.r.t. all parameters, flat layout.
/// Only defined for unmasked caches; training never masks.
inline Vec backward(const ModelParams& params, const ForwardCache& cache,
                    const std::vector<int>& labels) {
    require(!cache.mask, "backward: gradients of masked losses are not supported");
    const LossResult lr = softmax_log_likelihood(cache, labels);
    const Index n = cache.batch_size();
    const Index num_layers = params.num_layers();

    // delta at the output: (softmax - onehot) / n
    Mat delta = lr.probs;
    for (Index i = 0; i < n; ++i)
        delta(i, params.label_row(labels[static_cast<std::size_t>(i)])) -= 1.0;
    delta /= static_cast<double>(n);

    std::vector<Mat> grad_w(static_cast<std::size_t>(num_layers));
    std::vector<Vec> grad_b(static_cast<std::size_t>(num_layers));
    for (Index l = num_layers - 1; l >= 0; --l) {
        grad_w[static_cast<std::size_t>(l)] =
            delta.transpose() * cache.acts[static_cast<std::size_t>(l)];
        grad_b[static_cast<std::size_t>(l)] = delta.colwise().sum();
        if (l > 0) {
            // ReLU'(z) read off the activation: zero output means zero slope
            delta = (delta * params.weight(l)).array() *
                    (cache.acts[static_cast<std::size_t>(l)].array() > 0.0).cast<double>();
        }
    }

    Vec flat(params.flat_size());
    Index off = 0;
    for (Index l = 0; l < num_layers; ++l) {
        const Mat& gw = grad_w[static_cast<std::size_t>(l)];
        std::copy(gw.data(), gw.data() + gw.size(), flat.data() + off);
        off += gw.size();
        const Vec& gb = grad_b[static_cast<std::size_t>(l)];
        std::copy(gb.data(), gb.data() + gb.size(), flat.data() + off);
        off += gb.size();
    }
    return flat;
}

/// Last hidden-layer activations (the penultimate representation). For a model
/// with no hidden layers this is just the input.
inline Mat features(const ModelParams& params, const Mat& inputs) {
    if (inputs.cols() != params.input_dim())
        throw ShapeError("features: batch dim does not match the model");
    Mat h = inputs;
    for (Index l = 0; l + 1 < params.num_layers(); ++l) {
        h = ((h * params.weight(l).transpose()).rowwise() + params.bias(l).transpose())
                .cwiseMax(0.0);
    }
    return h;
}

}  // namespace continual
