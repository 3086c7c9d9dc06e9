// Command-line front end: `continual run` executes one incremental-learning
// experiment described by a JSON config file plus flag overrides.

#include <CLI11.hpp>

#include <continual/continual.hpp>

#include <iostream>
#include <optional>
#include <string>

int main(int argc, char** argv) {
    CLI::App app{"Incremental-learning experiment runner"};
    app.require_subcommand(1);

    CLI::App* run = app.add_subcommand("run", "Run one experiment");
    std::string config_path;
    std::optional<std::string> method, sampler, anchor_norm, heads, dataset, mnist_dir, out_dir;
    std::optional<std::string> reference_mode, reference_file, checkpoint_path;
    std::optional<double> lambda;
    std::optional<long long> samples_per_class, seed, epochs, batch_size, delta_t;
    std::optional<double> alpha, epsilon, lr;

    run->add_option("--config", config_path, "JSON config file (defaults apply when omitted)")
        ->check(CLI::ExistingFile);
    run->add_option("--method", method, "vanilla|ewcpp|pi|rwalk");
    run->add_option("--lambda", lambda, "penalty strength (omit for the method default)");
    run->add_option("--samples-per-class", samples_per_class, "episodic memory budget m (0 = off)");
    run->add_option("--sampler", sampler, "uniform|plane_distance|entropy|mof");
    run->add_option("--anchor-norm", anchor_norm, "weight normalizer: max|min_max|sum");
    run->add_option("--heads", heads, "evaluation protocol")
        ->check(CLI::IsMember({"single", "multi"}));
    run->add_option("--seed", seed, "master seed");
    run->add_option("--out", out_dir, "output directory for CSV/JSON results");
    run->add_option("--dataset", dataset, "data source")
        ->check(CLI::IsMember({"mnist", "synthetic"}));
    run->add_option("--mnist-dir", mnist_dir, "directory with the four MNIST idx files");
    run->add_option("--epochs", epochs, "epochs per task (0 = dataset default)");
    run->add_option("--batch-size", batch_size, "mini-batch size");
    run->add_option("--alpha", alpha, "running-Fisher mixing weight");
    run->add_option("--delta-t", delta_t, "steps between score flushes");
    run->add_option("--epsilon", epsilon, "score-denominator damping");
    run->add_option("--lr", lr, "Adam learning rate");
    run->add_option("--reference-mode", reference_mode, "none|train|load");
    run->add_option("--reference-file", reference_file, "references.json for --reference-mode load");
    run->add_option("--checkpoint", checkpoint_path, "write final run state to this file");

    CLI11_PARSE(app, argc, argv);

    try {
        continual::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = continual::cfgjson::load_config_file(config_path);
        if (method) cfg.method = continual::method_from_name(*method);
        if (lambda) cfg.lambda = *lambda;
        if (samples_per_class) cfg.samples_per_class = static_cast<continual::Index>(*samples_per_class);
        if (sampler) cfg.sampler = continual::sampler_from_name(*sampler);
        if (anchor_norm) cfg.anchor_normalizer = continual::anchor_normalizer_from_name(*anchor_norm);
        if (heads) cfg.head_mode = continual::head_select_from_name(*heads);
        if (seed) cfg.seed = static_cast<std::uint64_t>(*seed);
        if (out_dir) cfg.out_dir = *out_dir;
        if (dataset) cfg.dataset = *dataset;
        if (mnist_dir) cfg.mnist_dir = *mnist_dir;
        if (epochs) cfg.epochs_per_task = static_cast<int>(*epochs);
        if (batch_size) cfg.batch_size = static_cast<int>(*batch_size);
        if (alpha) cfg.alpha = *alpha;
        if (delta_t) cfg.delta_t = static_cast<int>(*delta_t);
        if (epsilon) cfg.epsilon = *epsilon;
        if (lr) cfg.lr = *lr;
        if (reference_mode) cfg.reference_mode = continual::reference_mode_from_name(*reference_mode);
        if (reference_file) cfg.reference_file = *reference_file;
        if (checkpoint_path) cfg.checkpoint_path = *checkpoint_path;

        continual::run_experiment(cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
