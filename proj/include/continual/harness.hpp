#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "continual/checkpoint.hpp"
#include "continual/common.hpp"
#include "continual/data.hpp"
#include "continual/fisher.hpp"
#include "continual/importance.hpp"
#include "continual/memory.hpp"
#include "continual/metrics.hpp"
#include "continual/nn.hpp"
#include "continual/optim.hpp"
#include "continual/regularizers.hpp"
#include "continual/rng.hpp"

namespace continual {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kResultSchemaVersion = 1;

enum class HeadSelect { single, multi, both };

inline const char* head_select_name(HeadSelect h) {
    switch (h) {
        case HeadSelect::single: return "single";
        case HeadSelect::multi: return "multi";
        case HeadSelect::both: return "both";
    }
    return "?";
}

inline HeadSelect head_select_from_name(const std::string& s) {
    if (s == "single") return HeadSelect::single;
    if (s == "multi") return HeadSelect::multi;
    if (s == "both") return HeadSelect::both;
    throw std::invalid_argument("unknown head mode '" + s + "' (single|multi|both)");
}

enum class ReferenceMode { none, train, load };

inline const char* reference_mode_name(ReferenceMode r) {
    switch (r) {
        case ReferenceMode::none: return "none";
        case ReferenceMode::train: return "train";
        case ReferenceMode::load: return "load";
    }
    return "?";
}

inline ReferenceMode reference_mode_from_name(const std::string& s) {
    if (s == "none") return ReferenceMode::none;
    if (s == "train") return ReferenceMode::train;
    if (s == "load") return ReferenceMode::load;
    throw std::invalid_argument("unknown reference mode '" + s + "' (none|train|load)");
}

struct SyntheticConfig {
    std::uint64_t data_seed = 1234;  // dataset identity; independent of the run seed
    int num_tasks = 5;
    int classes_per_task = 2;
    int dim = 16;
    int n_per_class = 100;
    double separation = 4.0;
};

/// Full description of one experiment run. Every field has a default; a config
/// round-trips through JSON without loss.
struct ExperimentConfig {
    std::string dataset = "synthetic";          // synthetic | mnist
    std::string mnist_dir;                      // empty: $CONTINUAL_MNIST_DIR, else data/mnist
    std::vector<std::vector<int>> task_groups;  // empty: dataset default grouping
    SyntheticConfig synthetic;

    Method method = Method::vanilla;
    std::optional<double> lambda;  // absent: per-method default (see resolved_lambda)
    double alpha = 0.9;            // running-Fisher mixing weight
    int delta_t = 10;              // optimizer steps per score flush
    double epsilon = 1e-3;         // score-denominator damping
    bool score_grad_total = true;  // scores see the full objective gradient, not just data loss
    bool pi_raw_scores = false;    // keep PI anchor weights on their raw scale
    // Absent: per-method default, see resolved_anchor_normalizer().
    std::optional<AnchorNormalizer> anchor_normalizer;
    FisherEstimator fisher_estimator = FisherEstimator::per_example;

    Index samples_per_class = 0;  // m; 0 = no episodic memory
    SamplerKind sampler = SamplerKind::mof;
    HeadSelect head_mode = HeadSelect::both;
    std::vector<Index> hidden = {256, 256};
    int epochs_per_task = 0;  // 0 = dataset default: 10 for mnist, 20 for synthetic
    int batch_size = 64;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    // Fresh optimizer moments at each task start. Carrying the decayed second
    // moment across a boundary lets the first steps of the new task run far
    // above lr and wrecks old-task representations; resetting matches the
    // usual one-optimizer-per-task training loop.
    bool reset_adam_per_task = true;
    std::uint64_t seed = 42;

    std::string out_dir;  // empty: no files written
    ReferenceMode reference_mode = ReferenceMode::none;
    std::string reference_file;   // read when reference_mode = load
    std::string checkpoint_path;  // if set, final run state is saved here

    int resolved_epochs() const {
        if (epochs_per_task > 0) return epochs_per_task;
        return dataset == "mnist" ? 10 : 20;
    }

    /// Per-method defaults match the hyperparameters of the reproduced setup.
    double resolved_lambda() const {
        if (lambda) {
            require(*lambda >= 0.0, "lambda must be >= 0");
            return *lambda;
        }
        switch (method) {
            case Method::vanilla: return 0.0;
            case Method::ewcpp: return 75000.0;
            case Method::pi: return 0.1;
            case Method::rwalk: return 1000.0;
        }
        return 0.0;
    }

    /// Per-method defaults: rwalk sums two normalized vectors, and with max
    /// scaling their combined mass grows with the parameter count until the
    /// default lambda pins the whole network; sum scaling keeps the mass fixed
    /// and leaves the single-head protocols trainable. pi's weight vector
    /// keeps the max scaling its formula was tuned around.
    AnchorNormalizer resolved_anchor_normalizer() const {
        if (anchor_normalizer) return *anchor_normalizer;
        return method == Method::rwalk ? AnchorNormalizer::sum : AnchorNormalizer::max;
    }

    AdamConfig adam_config() const { return {lr, beta1, beta2, eps_adam}; }

    std::string resolved_mnist_dir() const {
        if (!mnist_dir.empty()) return mnist_dir;
        if (const char* env = std::getenv("CONTINUAL_MNIST_DIR"); env && *env) return env;
        return "data/mnist";
    }
};

// Which per-step trackers a method actually consumes. Skipping unused trackers
// never changes parameter trajectories (they read theta, they do not write it).
inline bool method_tracks_fisher(Method m) {
    return m == Method::ewcpp || m == Method::rwalk;
}
inline bool method_tracks_scores(Method m) {
    return m == Method::pi || m == Method::rwalk;
}
inline StepDistance method_distance(Method m) {
    return m == Method::pi ? StepDistance::euclidean : StepDistance::fisher_kl;
}

namespace cfgjson {

using json = nlohmann::ordered_json;

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["dataset"] = c.dataset;
    j["mnist_dir"] = c.mnist_dir;
    j["task_groups"] = c.task_groups;
    j["synthetic"] = {{"data_seed", c.synthetic.data_seed},
                      {"num_tasks", c.synthetic.num_tasks},
                      {"classes_per_task", c.synthetic.classes_per_task},
                      {"dim", c.synthetic.dim},
                      {"n_per_class", c.synthetic.n_per_class},
                      {"separation", c.synthetic.separation}};
    j["method"] = method_name(c.method);
    if (c.lambda)
        j["lambda"] = *c.lambda;
    else
        j["lambda"] = "auto";
    j["alpha"] = c.alpha;
    j["delta_t"] = c.delta_t;
    j["epsilon"] = c.epsilon;
    j["score_grad_total"] = c.score_grad_total;
    j["pi_raw_scores"] = c.pi_raw_scores;
    if (c.anchor_normalizer)
        j["anchor_normalizer"] = anchor_normalizer_name(*c.anchor_normalizer);
    else
        j["anchor_normalizer"] = "auto";
    j["fisher_estimator"] =
        c.fisher_estimator == FisherEstimator::per_example ? "per_example" : "squared_mean";
    j["samples_per_class"] = c.samples_per_class;
    j["sampler"] = sampler_name(c.sampler);
    j["head_mode"] = head_select_name(c.head_mode);
    j["hidden"] = c.hidden;
    j["epochs_per_task"] = c.epochs_per_task;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps_adam"] = c.eps_adam;
    j["reset_adam_per_task"] = c.reset_adam_per_task;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["reference_mode"] = reference_mode_name(c.reference_mode);
    j["reference_file"] = c.reference_file;
    j["checkpoint_path"] = c.checkpoint_path;
    return j;
}

inline ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "dataset") {
            c.dataset = value.get<std::string>();
            if (c.dataset != "synthetic" && c.dataset != "mnist")
                throw std::invalid_argument("dataset must be 'synthetic' or 'mnist'");
        } else if (key == "mnist_dir") {
            c.mnist_dir = value.get<std::string>();
        } else if (key == "task_groups") {
            c.task_groups = value.get<std::vector<std::vector<int>>>();
        } else if (key == "synthetic") {
            for (const auto& [sk, sv] : value.items()) {
                if (sk == "data_seed") c.synthetic.data_seed = sv.get<std::uint64_t>();
                else if (sk == "num_tasks") c.synthetic.num_tasks = sv.get<int>();
                else if (sk == "classes_per_task") c.synthetic.classes_per_task = sv.get<int>();
                else if (sk == "dim") c.synthetic.dim = sv.get<int>();
                else if (sk == "n_per_class") c.synthetic.n_per_class = sv.get<int>();
                else if (sk == "separation") c.synthetic.separation = sv.get<double>();
                else throw std::invalid_argument("unknown synthetic config key '" + sk + "'");
            }
        } else if (key == "method") {
            c.method = method_from_name(value.get<std::string>());
        } else if (key == "lambda") {
            if (value.is_null() || (value.is_string() && value.get<std::string>() == "auto"))
                c.lambda.reset();
            else
                c.lambda = value.get<double>();
        } else if (key == "alpha") {
            c.alpha = value.get<double>();
        } else if (key == "delta_t") {
            c.delta_t = value.get<int>();
        } else if (key == "epsilon") {
            c.epsilon = value.get<double>();
        } else if (key == "score_grad_total") {
            c.score_grad_total = value.get<bool>();
        } else if (key == "pi_raw_scores") {
            c.pi_raw_scores = value.get<bool>();
        } else if (key == "anchor_normalizer") {
            if (value.is_null() || (value.is_string() && value.get<std::string>() == "auto"))
                c.anchor_normalizer.reset();
            else
                c.anchor_normalizer = anchor_normalizer_from_name(value.get<std::string>());
        } else if (key == "fisher_estimator") {
            const std::string s = value.get<std::string>();
            if (s == "per_example") c.fisher_estimator = FisherEstimator::per_example;
            else if (s == "squared_mean") c.fisher_estimator = FisherEstimator::squared_mean;
            else throw std::invalid_argument("fisher_estimator must be per_example|squared_mean");
        } else if (key == "samples_per_class") {
            c.samples_per_class = value.get<Index>();
        } else if (key == "sampler") {
            c.sampler = sampler_from_name(value.get<std::string>());
        } else if (key == "head_mode") {
            c.head_mode = head_select_from_name(value.get<std::string>());
        } else if (key == "hidden") {
            c.hidden = value.get<std::vector<Index>>();
        } else if (key == "epochs_per_task") {
            c.epochs_per_task = value.get<int>();
        } else if (key == "batch_size") {
            c.batch_size = value.get<int>();
        } else if (key == "lr") {
            c.lr = value.get<double>();
        } else if (key == "beta1") {
            c.beta1 = value.get<double>();
        } else if (key == "beta2") {
            c.beta2 = value.get<double>();
        } else if (key == "eps_adam") {
            c.eps_adam = value.get<double>();
        } else if (key == "reset_adam_per_task") {
            c.reset_adam_per_task = value.get<bool>();
        } else if (key == "seed") {
            c.seed = value.get<std::uint64_t>();
        } else if (key == "out_dir") {
            c.out_dir = value.get<std::string>();
        } else if (key == "reference_mode") {
            c.reference_mode = reference_mode_from_name(value.get<std::string>());
        } else if (key == "reference_file") {
            c.reference_file = value.get<std::string>();
        } else if (key == "checkpoint_path") {
            c.checkpoint_path = value.get<std::string>();
        } else {
            throw std::invalid_argument("unknown config key '" + key + "'");
        }
    }
    require(c.batch_size >= 1, "batch_size must be >= 1");
    require(c.alpha >= 0.0 && c.alpha <= 1.0, "alpha must lie in [0,1]");
    require(c.delta_t >= 1, "delta_t must be >= 1");
    require(c.epsilon > 0.0, "epsilon must be positive");
    require(c.samples_per_class >= 0, "samples_per_class must be >= 0");
    return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw FormatError("config parse error in " + path + ": " + e.what());
    }
    return from_json(j);
}

}  // namespace cfgjson

struct MetricsRow {
    int k = 0;
    double average_accuracy = 0.0;
    std::optional<double> forgetting_mean;     // undefined at k = 1
    std::vector<double> forgetting_per_task;   // f_j^k for j < k
    std::optional<double> intransigence_value; // needs a reference accuracy
    std::string forward_sign = "neutral";
    std::vector<std::string> backward_signs;
};

struct HeadResult {
    AccuracyMatrix matrix;
    std::optional<ReferenceAccuracies> reference;
    std::vector<MetricsRow> metrics;
};

struct RunResult {
    ExperimentConfig config;
    std::string version = kToolVersion;
    std::optional<HeadResult> single;
    std::optional<HeadResult> multi;
    std::vector<double> per_task_seconds;
    double total_seconds = 0.0;
};

/// Loads the task stream the config describes.
inline TaskStream build_stream(const ExperimentConfig& cfg) {
    if (cfg.dataset == "mnist") {
        std::vector<std::vector<int>> groups =
            cfg.task_groups.empty() ? mnist_default_groups() : cfg.task_groups;
        return mnist_task_stream(cfg.resolved_mnist_dir(), groups);
    }
    TaskStream stream = synthetic_tasks(cfg.synthetic.data_seed, cfg.synthetic.num_tasks,
                                        cfg.synthetic.classes_per_task, cfg.synthetic.dim,
                                        cfg.synthetic.n_per_class, cfg.synthetic.separation);
    if (!cfg.task_groups.empty())
        throw std::invalid_argument("task_groups only apply to the mnist dataset");
    return stream;
}

inline RunState make_initial_state(const TaskStream& stream, const ExperimentConfig& cfg) {
    require(stream.num_tasks() >= 1, "empty task stream");
    Rng init_rng(derive_seed(cfg.seed, "init"));
    RunState state;
    state.params = ModelParams::make_mlp(stream.task(1).train.dim(), cfg.hidden,
                                         stream.task(1).labels, init_rng);
    const Index p = state.params.flat_size();
    state.adam = AdamState::zeros(p);
    state.fisher_running = FisherDiag::zeros(p, FisherProvenance::running);
    state.scores = make_score_state(state.params.to_flat(), cfg.delta_t, cfg.epsilon,
                                    method_distance(cfg.method));
    state.anchor = zero_anchor(p);
    state.memory = EpisodicMemory(cfg.samples_per_class, cfg.sampler);
    return state;
}

/// Grows the model and every piece of per-parameter state for a task's new
/// labels, then re-anchors the score interval at the grown parameter vector.
inline void begin_task(RunState& state, const TaskSpec& task, const ExperimentConfig& cfg) {
    const int k = task.index;
    if (k > state.completed_tasks + 1)
        throw std::logic_error("begin_task: tasks must be visited in order");
    if (k > 1) {
        const std::vector<LayerShape> before = state.params.shapes();
        Rng grow_rng(derive_seed(cfg.seed, "grow", static_cast<std::uint64_t>(k)));
        state.params.grow_output(task.labels, grow_rng);
        const std::vector<LayerShape> after = state.params.shapes();
        state.adam.grow(before, after);
        state.fisher_running.values = grow_flat(state.fisher_running.values, before, after, 0.0);
        if (state.fisher_snapshot)
            state.fisher_snapshot->values =
                grow_flat(state.fisher_snapshot->values, before, after, 0.0);
        grow_score_state(state.scores, before, after);
        state.anchor.grow(before, after);
        if (cfg.reset_adam_per_task) state.adam = AdamState::zeros(state.params.flat_size());
    }
    reset_interval(state.scores, state.params.to_flat());
}

/// Trains one task: standard epochs over the (already replay-merged) data with
/// the per-batch pipeline of gradient, penalty, Adam step, running-Fisher
/// update, and score accumulation with periodic flushes.
inline void train_task(RunState& state, const Dataset& data, int task_index,
                       const ExperimentConfig& cfg) {
    require(data.size() > 0, "train_task: empty training data");
    const bool track_fisher = method_tracks_fisher(cfg.method);
    const bool track_scores = method_tracks_scores(cfg.method);
    const AdamConfig acfg = cfg.adam_config();
    const Index p = state.params.flat_size();
    const Index n = data.size();
    const Index bs = cfg.batch_size;

    Vec theta = state.params.to_flat();
    Vec step_delta(p);
    Vec score_grad(p);
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index(0));

    for (int epoch = 0; epoch < cfg.resolved_epochs(); ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "shuffle",
                                    static_cast<std::uint64_t>(task_index),
                                    static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (Index start = 0; start < n; start += bs) {
            const Index b = std::min(bs, n - start);
            Batch batch;
            batch.inputs.resize(b, data.dim());
            batch.labels.resize(static_cast<std::size_t>(b));
            for (Index r = 0; r < b; ++r) {
                batch.inputs.row(r) = data.inputs.row(order[static_cast<std::size_t>(start + r)]);
                batch.labels[static_cast<std::size_t>(r)] =
                    data.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + r)])];
            }

            const ForwardCache cache = forward(state.params, batch);
            Vec grad;
            try {
                grad = backward(state.params, cache, batch.labels);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (task " + std::to_string(task_index) +
                                   ", epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(state.adam.t) + ")");
            }

            // Batch Fisher reuses the pre-step activations; it must run before
            // the parameters move.
            FisherDiag fisher_batch;
            if (track_fisher)
                fisher_batch = batch_fisher(state.params, cache, batch.labels, cfg.fisher_estimator);

            if (track_scores && !cfg.score_grad_total) score_grad = grad;
            add_penalty_grad(state.anchor, theta, grad);

            adam_step(state.adam, theta, grad, acfg, track_scores ? &step_delta : nullptr);
            state.params.from_flat(theta);

            if (track_fisher) ewc_update_inplace(state.fisher_running, fisher_batch, cfg.alpha);
            if (track_scores) {
                accumulate_step(state.scores, cfg.score_grad_total ? grad : score_grad, step_delta);
                if (flush_due(state.scores))
                    flush_interval(state.scores,
                                   track_fisher ? &state.fisher_running : nullptr, theta);
            }
        }
    }
}

/// Boundary bookkeeping after a task finishes: flush the partial score
/// interval, fold scores into the consolidated total, snapshot the running
/// Fisher, rebuild the anchor, and select exemplars for the new classes.
inline void task_boundary(RunState& state, const TaskSpec& task, const ExperimentConfig& cfg) {
    const Vec theta = state.params.to_flat();
    flush_interval(state.scores, &state.fisher_running, theta, /*force=*/true);
    consolidate_task(state.scores);

    state.fisher_snapshot = FisherDiag{state.fisher_running.values, FisherProvenance::snapshot};
    state.anchor = make_anchor(cfg.method, theta, *state.fisher_snapshot, state.scores,
                               cfg.resolved_lambda(), /*normalize_pi=*/!cfg.pi_raw_scores,
                               cfg.resolved_anchor_normalizer());

    if (cfg.samples_per_class > 0) {
        for (int label : task.labels) {
            std::vector<Index> rows;
            for (Index i = 0; i < task.train.size(); ++i)
                if (task.train.labels[static_cast<std::size_t>(i)] == label) rows.push_back(i);
            require(!rows.empty(), "task_boundary: task has no examples of its own label");
            Mat class_inputs(static_cast<Index>(rows.size()), task.train.dim());
            for (std::size_t r = 0; r < rows.size(); ++r)
                class_inputs.row(static_cast<Index>(r)) = task.train.inputs.row(rows[r]);
            Rng sampler_rng(derive_seed(cfg.seed, "sampler", static_cast<std::uint64_t>(task.index),
                                        static_cast<std::uint64_t>(label)));
            state.memory.select_and_store(state.params, class_inputs, label, sampler_rng);
        }
    }
    state.completed_tasks = task.index;
}

/// Accuracy of the model on one dataset; multi-head restricts the prediction to
/// `mask` labels, single-head passes no mask.
inline double evaluate_accuracy(const ModelParams& params, const Dataset& data,
                                const std::optional<std::vector<int>>& mask) {
    require(data.size() > 0, "evaluate_accuracy: empty test set");
    constexpr Index kChunk = 1024;
    Index correct = 0;
    for (Index start = 0; start < data.size(); start += kChunk) {
        const Index b = std::min(kChunk, data.size() - start);
        const ForwardCache cache = forward(params, Mat(data.inputs.middleRows(start, b)), mask);
        const std::vector<int> pred = predict(cache);
        for (Index r = 0; r < b; ++r)
            if (pred[static_cast<std::size_t>(r)] ==
                data.labels[static_cast<std::size_t>(start + r)])
                ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// One accuracy-matrix row: test accuracy on every task j <= k.
inline std::vector<double> evaluate_all(const ModelParams& params, const TaskStream& stream,
                                        int k, HeadMode head) {
    std::vector<double> row;
    for (int j = 1; j <= k; ++j) {
        const TaskSpec& t = stream.task(j);
        std::optional<std::vector<int>> mask;
        if (head == HeadMode::multi) mask = t.labels;
        row.push_back(evaluate_accuracy(params, t.test, mask));
    }
    return row;
}

struct ReferenceAccuracy {
    double single_head = 0.0;
    double multi_head = 0.0;
};

/// Trains a fresh model jointly on all data through task k with the same
/// architecture and budget as the incremental runs, and returns its accuracy on
/// task k's test set under both head protocols.
inline ReferenceAccuracy train_reference(const TaskStream& stream, int k,
                                         const ExperimentConfig& cfg) {
    require(k >= 1 && k <= stream.num_tasks(), "train_reference: bad task index");
    Index total = 0;
    for (int j = 1; j <= k; ++j) total += stream.task(j).train.size();
    Dataset joint;
    joint.split = Split::train;
    joint.inputs.resize(total, stream.task(1).train.dim());
    joint.labels.reserve(static_cast<std::size_t>(total));
    Index at = 0;
    for (int j = 1; j <= k; ++j) {
        const Dataset& d = stream.task(j).train;
        joint.inputs.middleRows(at, d.size()) = d.inputs;
        joint.labels.insert(joint.labels.end(), d.labels.begin(), d.labels.end());
        at += d.size();
    }

    Rng init_rng(derive_seed(cfg.seed, "ref-init", static_cast<std::uint64_t>(k)));
    ModelParams params = ModelParams::make_mlp(joint.dim(), cfg.hidden,
                                               stream.labels_through(k), init_rng);
    AdamState adam = AdamState::zeros(params.flat_size());
    const AdamConfig acfg = cfg.adam_config();
    Vec theta = params.to_flat();

    std::vector<Index> order(static_cast<std::size_t>(joint.size()));
    std::iota(order.begin(), order.end(), Index(0));
    const Index bs = cfg.batch_size;
    for (int epoch = 0; epoch < cfg.resolved_epochs(); ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "ref-shuffle", static_cast<std::uint64_t>(k),
                                    static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (Index start = 0; start < joint.size(); start += bs) {
            const Index b = std::min(bs, joint.size() - start);
            Batch batch;
            batch.inputs.resize(b, joint.dim());
            batch.labels.resize(static_cast<std::size_t>(b));
            for (Index r = 0; r < b; ++r) {
                batch.inputs.row(r) = joint.inputs.row(order[static_cast<std::size_t>(start + r)]);
                batch.labels[static_cast<std::size_t>(r)] =
                    joint.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + r)])];
            }
            const ForwardCache cache = forward(params, batch);
            Vec grad = backward(params, cache, batch.labels);
            adam_step(adam, theta, grad, acfg);
            params.from_flat(theta);
        }
    }

    ReferenceAccuracy out;
    out.single_head = evaluate_accuracy(params, stream.task(k).test, std::nullopt);
    out.multi_head = evaluate_accuracy(params, stream.task(k).test, stream.task(k).labels);
    return out;
}

namespace output_detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_accuracy_csv(const AccuracyMatrix& m, int total_tasks, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "k";
    for (int j = 1; j <= total_tasks; ++j) out << ",j" << j;
    out << "\n";
    for (int k = 1; k <= m.rows(); ++k) {
        out << k;
        for (int j = 1; j <= total_tasks; ++j) {
            out << ",";
            if (j <= k) out << fmt_double(m.at(k, j));
        }
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "k,A_k,F_k,I_k,forward_sign,backward_signs\n";
    for (const MetricsRow& r : rows) {
        out << r.k << "," << fmt_double(r.average_accuracy) << ",";
        if (r.forgetting_mean) out << fmt_double(*r.forgetting_mean);
        out << ",";
        if (r.intransigence_value) out << fmt_double(*r.intransigence_value);
        out << "," << r.forward_sign << ",";
        for (std::size_t i = 0; i < r.backward_signs.size(); ++i) {
            if (i) out << ";";
            out << r.backward_signs[i];
        }
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace output_detail

/// Metric rows for every completed prefix of the matrix.
inline std::vector<MetricsRow> compute_metrics(const AccuracyMatrix& matrix,
                                               const std::optional<ReferenceAccuracies>& ref) {
    std::vector<MetricsRow> rows;
    for (int k = 1; k <= matrix.rows(); ++k) {
        MetricsRow r;
        r.k = k;
        r.average_accuracy = average_accuracy(matrix, k);
        if (k >= 2) {
            const ForgettingResult f = forgetting(matrix, k);
            r.forgetting_mean = f.mean;
            r.forgetting_per_task = f.per_task;
        }
        if (ref && ref->size() >= k) r.intransigence_value = intransigence(*ref, matrix, k);
        const TransferSigns signs =
            transfer_signs(r.forgetting_per_task, r.intransigence_value.value_or(0.0));
        r.backward_signs = signs.backward;
        r.forward_sign = r.intransigence_value ? signs.forward : "neutral";
        rows.push_back(std::move(r));
    }
    return rows;
}

inline nlohmann::ordered_json head_result_to_json(const HeadResult& h, int total_tasks) {
    nlohmann::ordered_json j;
    j["head_mode"] = head_name(h.matrix.head_mode());
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (int k = 1; k <= h.matrix.rows(); ++k) rows.push_back(h.matrix.row(k));
    j["accuracy_matrix"] = rows;
    j["num_tasks"] = total_tasks;
    if (h.reference)
        j["reference_accuracies"] = h.reference->a_star;
    else
        j["reference_accuracies"] = nullptr;
    nlohmann::ordered_json metrics = nlohmann::ordered_json::array();
    for (const MetricsRow& r : h.metrics) {
        nlohmann::ordered_json m;
        m["k"] = r.k;
        m["average_accuracy"] = r.average_accuracy;
        m["forgetting"] = r.forgetting_mean ? nlohmann::ordered_json(*r.forgetting_mean)
                                            : nlohmann::ordered_json(nullptr);
        m["forgetting_per_task"] = r.forgetting_per_task;
        m["intransigence"] = r.intransigence_value
                                 ? nlohmann::ordered_json(*r.intransigence_value)
                                 : nlohmann::ordered_json(nullptr);
        m["forward_sign"] = r.forward_sign;
        m["backward_signs"] = r.backward_signs;
        metrics.push_back(std::move(m));
    }
    j["metrics"] = metrics;
    return j;
}

inline nlohmann::ordered_json result_to_json(const RunResult& res) {
    nlohmann::ordered_json j;
    j["schema_version"] = kResultSchemaVersion;
    j["tool"] = "continual";
    j["version"] = res.version;
    j["config"] = cfgjson::to_json(res.config);
    const int total = res.single ? static_cast<int>(res.single->matrix.rows())
                                 : (res.multi ? static_cast<int>(res.multi->matrix.rows()) : 0);
    nlohmann::ordered_json heads;
    heads["single"] =
        res.single ? head_result_to_json(*res.single, total) : nlohmann::ordered_json(nullptr);
    heads["multi"] =
        res.multi ? head_result_to_json(*res.multi, total) : nlohmann::ordered_json(nullptr);
    j["heads"] = heads;
    j["timing"] = {{"per_task_seconds", res.per_task_seconds},
                   {"total_seconds", res.total_seconds}};
    return j;
}

/// Runs the complete incremental protocol for one config: train each task in
/// order, evaluate after every boundary, optionally train or load reference
/// models, compute metrics, and (if out_dir is set) write accuracy_matrix.csv,
/// metrics.csv, and result.json. Partial CSVs are flushed after every task so
/// an interrupted run keeps its completed rows.
inline RunResult run_experiment(const ExperimentConfig& cfg, bool verbose = true) {
    namespace fs = std::filesystem;
    const auto t_start = std::chrono::steady_clock::now();
    const TaskStream stream = build_stream(cfg);
    const int num_tasks = stream.num_tasks();

    const bool want_single =
        cfg.head_mode == HeadSelect::single || cfg.head_mode == HeadSelect::both;
    const bool want_multi =
        cfg.head_mode == HeadSelect::multi || cfg.head_mode == HeadSelect::both;

    RunResult res;
    res.config = cfg;
    if (want_single) res.single = HeadResult{AccuracyMatrix(HeadMode::single), {}, {}};
    if (want_multi) res.multi = HeadResult{AccuracyMatrix(HeadMode::multi), {}, {}};

    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
    const bool both = cfg.head_mode == HeadSelect::both;
    auto matrix_csv_path = [&](HeadMode h) {
        const std::string base = both ? std::string("accuracy_matrix_") + head_name(h) + ".csv"
                                      : std::string("accuracy_matrix.csv");
        return (fs::path(cfg.out_dir) / base).string();
    };
    auto metrics_csv_path = [&](HeadMode h) {
        const std::string base =
            both ? std::string("metrics_") + head_name(h) + ".csv" : std::string("metrics.csv");
        return (fs::path(cfg.out_dir) / base).string();
    };

    RunState state = make_initial_state(stream, cfg);
    for (int k = 1; k <= num_tasks; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        const TaskSpec& task = stream.task(k);
        begin_task(state, task, cfg);
        const Dataset data = replay_union(state.memory, task.train);
        train_task(state, data, k, cfg);
        task_boundary(state, task, cfg);

        if (want_single)
            res.single->matrix.append_row(evaluate_all(state.params, stream, k, HeadMode::single));
        if (want_multi)
            res.multi->matrix.append_row(evaluate_all(state.params, stream, k, HeadMode::multi));

        const auto t1 = std::chrono::steady_clock::now();
        res.per_task_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        if (verbose) {
            std::cout << "task " << k << "/" << num_tasks << " done in "
                      << output_detail::fmt_double(res.per_task_seconds.back()) << "s";
            if (want_single)
                std::cout << "  A_" << k << "(single)="
                          << average_accuracy(res.single->matrix, k);
            if (want_multi)
                std::cout << "  A_" << k << "(multi)=" << average_accuracy(res.multi->matrix, k);
            std::cout << std::endl;
        }
        if (!cfg.out_dir.empty()) {
            if (want_single)
                output_detail::write_accuracy_csv(res.single->matrix, num_tasks,
                                                  matrix_csv_path(HeadMode::single));
            if (want_multi)
                output_detail::write_accuracy_csv(res.multi->matrix, num_tasks,
                                                  matrix_csv_path(HeadMode::multi));
        }
    }

    // Reference accuracies for intransigence.
    std::optional<ReferenceAccuracies> ref_single, ref_multi;
    if (cfg.reference_mode == ReferenceMode::train) {
        ReferenceAccuracies rs, rm;
        for (int k = 1; k <= num_tasks; ++k) {
            const ReferenceAccuracy r = train_reference(stream, k, cfg);
            rs.a_star.push_back(r.single_head);
            rm.a_star.push_back(r.multi_head);
            if (verbose)
                std::cout << "reference " << k << "/" << num_tasks
                          << ": single=" << r.single_head << " multi=" << r.multi_head
                          << std::endl;
        }
        ref_single = rs;
        ref_multi = rm;
        if (!cfg.out_dir.empty()) {
            nlohmann::ordered_json j;
            j["single"] = rs.a_star;
            j["multi"] = rm.a_star;
            std::ofstream out(fs::path(cfg.out_dir) / "references.json");
            if (!out) throw IoError("cannot write references.json in " + cfg.out_dir);
            out << j.dump(2) << "\n";
        }
    } else if (cfg.reference_mode == ReferenceMode::load) {
        std::ifstream in(cfg.reference_file);
        if (!in) throw IoError("cannot open reference file: " + cfg.reference_file);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("reference file parse error in " + cfg.reference_file + ": " +
                              e.what());
        }
        ReferenceAccuracies rs{j.at("single").get<std::vector<double>>()};
        ReferenceAccuracies rm{j.at("multi").get<std::vector<double>>()};
        if (rs.size() < num_tasks || rm.size() < num_tasks)
            throw MissingDataError("reference file covers fewer tasks than the run: " +
                                   cfg.reference_file);
        ref_single = rs;
        ref_multi = rm;
    }

    if (res.single) {
        res.single->reference = ref_single;
        res.single->metrics = compute_metrics(res.single->matrix, ref_single);
    }
    if (res.multi) {
        res.multi->reference = ref_multi;
        res.multi->metrics = compute_metrics(res.multi->matrix, ref_multi);
    }

    const auto t_end = std::chrono::steady_clock::now();
    res.total_seconds = std::chrono::duration<double>(t_end - t_start).count();

    if (!cfg.out_dir.empty()) {
        if (res.single)
            output_detail::write_metrics_csv(res.single->metrics, metrics_csv_path(HeadMode::single));
        if (res.multi)
            output_detail::write_metrics_csv(res.multi->metrics, metrics_csv_path(HeadMode::multi));
        std::ofstream out(fs::path(cfg.out_dir) / "result.json");
        if (!out) throw IoError("cannot write result.json in " + cfg.out_dir);
        out << result_to_json(res).dump(2) << "\n";
    }
    if (!cfg.checkpoint_path.empty()) save_checkpoint(state, cfg.checkpoint_path);

    if (verbose) {
        auto print_head = [&](const HeadResult& h) {
            std::printf("[%s]\n  k   A_k      F_k      I_k\n", head_name(h.matrix.head_mode()));
            for (const MetricsRow& r : h.metrics) {
                std::printf("  %-3d %-8.4f ", r.k, r.average_accuracy);
                if (r.forgetting_mean)
                    std::printf("%-8.4f ", *r.forgetting_mean);
                else
                    std::printf("%-8s ", "-");
                if (r.intransigence_value)
                    std::printf("%-8.4f\n", *r.intransigence_value);
                else
                    std::printf("%-8s\n", "-");
            }
        };
        std::printf("method=%s lambda=%s dataset=%s m=%lld sampler=%s seed=%llu\n",
                    method_name(cfg.method), output_detail::fmt_double(cfg.resolved_lambda()).c_str(),
                    cfg.dataset.c_str(), static_cast<long long>(cfg.samples_per_class),
                    sampler_name(cfg.sampler), static_cast<unsigned long long>(cfg.seed));
        if (res.single) print_head(*res.single);
        if (res.multi) print_head(*res.multi);
    }
    return res;
}

}  // namespace continual
