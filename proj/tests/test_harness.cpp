#include <catch2/catch_amalgamated.hpp>

#include <continual/harness.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace continual;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("continual-harness-test-" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string dir(const std::string& name) const { return (path / name).string(); }
};

ExperimentConfig synthetic_config() {
    ExperimentConfig cfg;
    cfg.dataset = "synthetic";
    cfg.head_mode = HeadSelect::both;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// metrics.csv parsed back into (k, A_k, F_k, I_k); empty fields become nullopt.
struct ParsedMetricsRow {
    int k;
    double a;
    std::optional<double> f, i;
};

std::vector<ParsedMetricsRow> parse_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "k,A_k,F_k,I_k,forward_sign,backward_signs");
    std::vector<ParsedMetricsRow> rows;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string field;
        ParsedMetricsRow r;
        std::getline(ss, field, ',');
        r.k = std::stoi(field);
        std::getline(ss, field, ',');
        r.a = std::stod(field);
        std::getline(ss, field, ',');
        if (!field.empty()) r.f = std::stod(field);
        std::getline(ss, field, ',');
        if (!field.empty()) r.i = std::stod(field);
        rows.push_back(r);
    }
    return rows;
}

AccuracyMatrix parse_accuracy_csv(const std::string& path, HeadMode mode) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);  // header
    AccuracyMatrix m(mode);
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string field;
        std::getline(ss, field, ',');  // k
        std::vector<double> row;
        while (std::getline(ss, field, ','))
            if (!field.empty()) row.push_back(std::stod(field));
        m.append_row(row);
    }
    return m;
}

}  // namespace

TEST_CASE("config json round trip is lossless") {
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::rwalk;
    cfg.lambda = 17.5;
    cfg.alpha = 0.42;
    cfg.delta_t = 3;
    cfg.samples_per_class = 4;
    cfg.sampler = SamplerKind::entropy;
    cfg.hidden = {32, 16, 8};
    cfg.epochs_per_task = 7;
    cfg.reset_adam_per_task = false;
    cfg.task_groups = {{0, 1}, {2, 3}};
    cfg.seed = 987654321;
    cfg.reference_mode = ReferenceMode::train;
    cfg.checkpoint_path = "state.bin";

    const auto j = cfgjson::to_json(cfg);
    const ExperimentConfig back = cfgjson::from_json(j);
    REQUIRE(cfgjson::to_json(back).dump() == j.dump());
    REQUIRE(back.lambda.has_value());
    REQUIRE(*back.lambda == 17.5);
    REQUIRE(back.reset_adam_per_task == false);
    REQUIRE(back.sampler == SamplerKind::entropy);
    REQUIRE(back.task_groups == cfg.task_groups);
}

TEST_CASE("config json rejects unknown keys and bad values") {
    auto j = cfgjson::to_json(synthetic_config());
    j["momentum"] = 0.9;
    REQUIRE_THROWS_AS(cfgjson::from_json(j), std::invalid_argument);

    auto bad_alpha = cfgjson::to_json(synthetic_config());
    bad_alpha["alpha"] = 1.5;
    REQUIRE_THROWS_AS(cfgjson::from_json(bad_alpha), std::invalid_argument);

    auto bad_batch = cfgjson::to_json(synthetic_config());
    bad_batch["batch_size"] = 0;
    REQUIRE_THROWS_AS(cfgjson::from_json(bad_batch), std::invalid_argument);
}

TEST_CASE("per method lambda defaults") {
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::vanilla;
    REQUIRE(cfg.resolved_lambda() == 0.0);
    cfg.method = Method::ewcpp;
    REQUIRE(cfg.resolved_lambda() == 75000.0);
    cfg.method = Method::pi;
    REQUIRE(cfg.resolved_lambda() == 0.1);
    cfg.method = Method::rwalk;
    REQUIRE(cfg.resolved_lambda() == 1000.0);
    cfg.lambda = 2.0;
    REQUIRE(cfg.resolved_lambda() == 2.0);
    cfg.lambda = -1.0;
    REQUIRE_THROWS_AS(cfg.resolved_lambda(), std::invalid_argument);
}

TEST_CASE("epoch defaults resolve per dataset with override") {
    ExperimentConfig cfg = synthetic_config();
    REQUIRE(cfg.resolved_epochs() == 20);
    cfg.epochs_per_task = 3;
    REQUIRE(cfg.resolved_epochs() == 3);
}

TEST_CASE("rwalk with lambda zero matches vanilla exactly") {
    ExperimentConfig vanilla = synthetic_config();
    vanilla.method = Method::vanilla;

    ExperimentConfig rwalk0 = synthetic_config();
    rwalk0.method = Method::rwalk;
    rwalk0.lambda = 0.0;

    const RunResult a = run_experiment(vanilla, false);
    const RunResult b = run_experiment(rwalk0, false);
    REQUIRE(a.multi->matrix == b.multi->matrix);
    REQUIRE(a.single->matrix == b.single->matrix);
}

TEST_CASE("huge lambda pins weighted coordinates to the anchor") {
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::rwalk;
    cfg.lambda = 1e9;

    const TaskStream stream = build_stream(cfg);
    RunState state = make_initial_state(stream, cfg);
    begin_task(state, stream.task(1), cfg);
    train_task(state, stream.task(1).train, 1, cfg);
    task_boundary(state, stream.task(1), cfg);
    begin_task(state, stream.task(2), cfg);
    train_task(state, stream.task(2).train, 2, cfg);

    const Vec theta = state.params.to_flat();
    double drift = 0.0;
    int pinned = 0;
    for (Index i = 0; i < state.anchor.theta_star.size(); ++i) {
        // Normalized weights span many decades; a coordinate whose weight is
        // below 1e-6 sees lambda*w < 1e3 and is only softly held.
        if (state.anchor.weight[i] < 1e-6) continue;
        ++pinned;
        drift = std::max(drift, std::abs(theta[i] - state.anchor.theta_star[i]));
    }
    REQUIRE(pinned > 0);
    REQUIRE(drift < 0.01);
}

TEST_CASE("task boundary snapshots the anchor from the live parameters") {
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::ewcpp;
    cfg.samples_per_class = 0;

    const TaskStream stream = build_stream(cfg);
    RunState state = make_initial_state(stream, cfg);
    begin_task(state, stream.task(1), cfg);
    train_task(state, stream.task(1).train, 1, cfg);
    const Vec at_boundary = state.params.to_flat();
    task_boundary(state, stream.task(1), cfg);

    REQUIRE(state.fisher_snapshot.has_value());
    REQUIRE(state.anchor.theta_star == at_boundary);
    REQUIRE(state.memory.empty());  // m = 0 leaves memory untouched
}

TEST_CASE("episodic memory fills through the harness") {
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::vanilla;
    cfg.samples_per_class = 2;
    cfg.sampler = SamplerKind::uniform;

    const TaskStream stream = build_stream(cfg);
    RunState state = make_initial_state(stream, cfg);
    for (int k = 1; k <= 2; ++k) {
        begin_task(state, stream.task(k), cfg);
        const Dataset data = replay_union(state.memory, stream.task(k).train);
        // Task 2 sees its own data plus the four stored task-1 exemplars.
        if (k == 2) REQUIRE(data.size() == stream.task(2).train.size() + 4);
        train_task(state, data, k, cfg);
        task_boundary(state, stream.task(k), cfg);
    }
    REQUIRE(state.memory.total_count() == 8);
    for (int label : stream.task(1).labels)
        REQUIRE(state.memory.exemplars(label).rows() == 2);
}

TEST_CASE("multi head dominates single head cell by cell") {
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::vanilla;
    const RunResult res = run_experiment(cfg, false);
    const AccuracyMatrix& multi = res.multi->matrix;
    const AccuracyMatrix& single = res.single->matrix;
    for (int k = 1; k <= multi.rows(); ++k)
        for (int j = 1; j <= k; ++j)
            REQUIRE(multi.at(k, j) >= single.at(k, j));
    // One task seen: the label spaces coincide, so the protocols agree exactly.
    REQUIRE(multi.at(1, 1) == single.at(1, 1));
}

TEST_CASE("untrained network scores at chance under masking") {
    ExperimentConfig cfg = synthetic_config();
    cfg.synthetic.n_per_class = 500;
    const TaskStream stream = build_stream(cfg);

    std::vector<int> all_labels;
    for (const TaskSpec& t : stream.tasks)
        all_labels.insert(all_labels.end(), t.labels.begin(), t.labels.end());
    Rng rng(derive_seed(cfg.seed, "init"));
    const ModelParams params =
        ModelParams::make_mlp(stream.task(1).train.dim(), cfg.hidden, all_labels, rng);

    double total = 0.0;
    for (int k = 1; k <= stream.num_tasks(); ++k) {
        const std::optional<std::vector<int>> mask(stream.task(k).labels);
        total += evaluate_accuracy(params, stream.task(k).test, mask);
    }
    REQUIRE_THAT(total / stream.num_tasks(), Catch::Matchers::WithinAbs(0.5, 0.05));
}

TEST_CASE("a single separable task trains to high accuracy") {
    ExperimentConfig cfg = synthetic_config();
    cfg.synthetic.num_tasks = 1;
    cfg.synthetic.n_per_class = 200;
    cfg.synthetic.separation = 6.0;
    cfg.epochs_per_task = 50;
    const TaskStream stream = build_stream(cfg);
    RunState state = make_initial_state(stream, cfg);
    begin_task(state, stream.task(1), cfg);
    train_task(state, stream.task(1).train, 1, cfg);
    REQUIRE(evaluate_accuracy(state.params, stream.task(1).train, std::nullopt) > 0.99);
}

TEST_CASE("reference training is deterministic and sane") {
    ExperimentConfig cfg = synthetic_config();
    cfg.synthetic.separation = 6.0;
    const TaskStream stream = build_stream(cfg);

    const ReferenceAccuracy r1 = train_reference(stream, 1, cfg);
    const ReferenceAccuracy again = train_reference(stream, 1, cfg);
    REQUIRE(r1.single_head == again.single_head);
    REQUIRE(r1.multi_head == again.multi_head);
    // One task: no other labels to confuse, the two protocols coincide.
    REQUIRE(r1.single_head == r1.multi_head);

    const ReferenceAccuracy r3 = train_reference(stream, 3, cfg);
    REQUIRE(r3.single_head > 0.95);
    REQUIRE(r3.multi_head >= r3.single_head);
}

TEST_CASE("metrics files agree with recomputation from the accuracy matrix") {
    TempDir tmp;
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::vanilla;
    cfg.reference_mode = ReferenceMode::train;
    cfg.out_dir = tmp.dir("run");
    const RunResult res = run_experiment(cfg, false);

    for (const char* head : {"single", "multi"}) {
        const bool is_single = std::string(head) == "single";
        const AccuracyMatrix m = parse_accuracy_csv(
            cfg.out_dir + "/accuracy_matrix_" + head + ".csv",
            is_single ? HeadMode::single : HeadMode::multi);
        const HeadResult& h = is_single ? *res.single : *res.multi;
        REQUIRE(m == h.matrix);

        const auto rows = parse_metrics_csv(cfg.out_dir + "/metrics_" + head + ".csv");
        REQUIRE(rows.size() == static_cast<std::size_t>(m.rows()));
        for (const ParsedMetricsRow& r : rows) {
            REQUIRE(r.a == average_accuracy(m, r.k));
            if (r.k >= 2) {
                REQUIRE(r.f.has_value());
                REQUIRE(*r.f == forgetting(m, r.k).mean);
            }
            REQUIRE(r.i.has_value());
            REQUIRE(*r.i == intransigence(h.reference.value(), m, r.k));
        }
    }
}

TEST_CASE("same seed reruns are byte identical") {
    TempDir tmp;
    ExperimentConfig cfg = synthetic_config();
    cfg.method = Method::rwalk;
    cfg.out_dir = tmp.dir("a");
    run_experiment(cfg, false);
    cfg.out_dir = tmp.dir("b");
    run_experiment(cfg, false);

    for (const char* name :
         {"accuracy_matrix_single.csv", "accuracy_matrix_multi.csv", "metrics_single.csv",
          "metrics_multi.csv"})
        REQUIRE(slurp(tmp.dir("a") + "/" + std::string(name)) ==
                slurp(tmp.dir("b") + "/" + std::string(name)));

    // result.json differs only in wall-clock timing.
    auto ja = nlohmann::ordered_json::parse(slurp(tmp.dir("a") + "/result.json"));
    auto jb = nlohmann::ordered_json::parse(slurp(tmp.dir("b") + "/result.json"));
    ja.erase("timing");
    jb.erase("timing");
    ja["config"].erase("out_dir");
    jb["config"].erase("out_dir");
    REQUIRE(ja.dump() == jb.dump());
}

TEST_CASE("head selection does not change the trajectory") {
    ExperimentConfig both = synthetic_config();
    both.method = Method::pi;
    const RunResult rb = run_experiment(both, false);

    ExperimentConfig single = both;
    single.head_mode = HeadSelect::single;
    const RunResult rs = run_experiment(single, false);
    REQUIRE_FALSE(rs.multi.has_value());
    REQUIRE(rs.single->matrix == rb.single->matrix);

    ExperimentConfig multi = both;
    multi.head_mode = HeadSelect::multi;
    const RunResult rm = run_experiment(multi, false);
    REQUIRE_FALSE(rm.single.has_value());
    REQUIRE(rm.multi->matrix == rb.multi->matrix);
}

TEST_CASE("non finite losses abort the run") {
    ExperimentConfig cfg = synthetic_config();
    const TaskStream stream = build_stream(cfg);
    RunState state = make_initial_state(stream, cfg);
    begin_task(state, stream.task(1), cfg);

    Dataset bad;
    bad.inputs = Mat::Zero(2, stream.task(1).train.dim());
    bad.inputs(0, 0) = std::numeric_limits<double>::infinity();
    bad.labels = {stream.task(1).labels[0], stream.task(1).labels[1]};
    REQUIRE_THROWS_AS(train_task(state, bad, 1, cfg), NumericError);
}
