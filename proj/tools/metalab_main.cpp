#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mcl/confounder.hpp"
#include "mcl/config.hpp"
#include "mcl/gradcheck.hpp"
#include "mcl/io.hpp"
#include "mcl/meta.hpp"
#include "mcl/model.hpp"
#include "mcl/rng.hpp"
#include "mcl/tasks.hpp"

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config_path;
    std::string out_dir = ".";
    std::string checkpoint_path;
    std::optional<std::uint64_t> seed;
    std::string mode;
    std::string ablate;
    bool timing = false;
    std::size_t trials = 50;
};

void add_config_flags(CLI::App& cmd, Options& o) {
    cmd.add_option("--config", o.config_path, "configuration file (defaults apply when absent)")
        ->check(CLI::ExistingFile);
    cmd.add_option("--out", o.out_dir, "output directory (created if missing)");
    cmd.add_option("--seed", o.seed, "override the config seed (drives every stream)");
    cmd.add_option("--mode", o.mode, "override the training mode")
        ->check(CLI::IsMember({"plain", "causal"}));
    cmd.add_option("--ablate", o.ablate, "drop disentangling terms")
        ->check(CLI::IsMember({"xi", "fgr", "both", "none"}));
}

mcl::ExperimentConfig load_config(const Options& o) {
    mcl::ExperimentConfig cfg = o.config_path.empty() ? mcl::ExperimentConfig{}
                                                      : mcl::parse_config_file(o.config_path);
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.theorem1.seed = *o.seed;
    }
    if (!o.mode.empty()) cfg.mode = mcl::mode_from_string(o.mode);
    if (!o.ablate.empty()) {
        cfg.ablate_xi = o.ablate == "xi" || o.ablate == "both";
        cfg.ablate_fgr = o.ablate == "fgr" || o.ablate == "both";
    }
    mcl::validate(cfg);
    return cfg;
}

mcl::RunManifest open_manifest(const std::string& subcommand, const mcl::ExperimentConfig& cfg,
                               const Options& o) {
    fs::create_directories(o.out_dir);
    mcl::RunManifest m;
    m.subcommand = subcommand;
    m.config_text = mcl::dump_config(cfg);
    m.seed = cfg.seed;
    m.started = mcl::utc_timestamp();
    return m;
}

std::string emit(mcl::RunManifest& m, const Options& o, const std::string& name,
                 const std::string& text) {
    const std::string path = (fs::path(o.out_dir) / name).string();
    mcl::write_text_file(path, text);
    m.outputs.push_back(path);
    return path;
}

// The manifest goes last: its presence marks a completed run.
void close_manifest(mcl::RunManifest& m, const Options& o) {
    const std::string path = (fs::path(o.out_dir) / "manifest.json").string();
    m.outputs.push_back(path);
    m.finished = mcl::utc_timestamp();
    mcl::write_manifest(m, path);
}

mcl::BatchSource training_source(const mcl::ExperimentConfig& cfg) {
    if (cfg.task_kind == mcl::TaskKind::regression) return mcl::sinusoid_source(cfg);
    mcl::Rng world_rng(cfg.seed, 3);
    const mcl::FactorWorld world = mcl::sample_factor_world(cfg.world, world_rng);
    return mcl::confounded_source(world, world.spec.q);
}

std::vector<mcl::Task> evaluation_tasks(const mcl::ExperimentConfig& cfg) {
    mcl::Rng rng(cfg.seed, 2);
    std::vector<mcl::Task> tasks;
    tasks.reserve(cfg.eval_tasks);
    if (cfg.task_kind == mcl::TaskKind::regression) {
        for (std::size_t t = 0; t < cfg.eval_tasks; ++t)
            tasks.push_back(mcl::sample_sinusoid_task(cfg.sinusoid, rng));
        return tasks;
    }
    mcl::Rng world_rng(cfg.seed, 3);
    const mcl::FactorWorld world = mcl::sample_factor_world(cfg.world, world_rng);
    for (std::size_t t = 0; t < cfg.eval_tasks; ++t)
        tasks.push_back(mcl::sample_classification_task(world, t % world.subsets.size(),
                                                        world.spec.shots, world.spec.query, rng));
    return tasks;
}

int cmd_train(const Options& o) {
    const mcl::ExperimentConfig cfg = load_config(o);
    mcl::RunManifest m = open_manifest("train", cfg, o);

    const mcl::TrainResult result = mcl::meta_train(cfg, training_source(cfg), o.timing);

    const std::string metrics_path = (fs::path(o.out_dir) / "metrics.csv").string();
    mcl::emit_metrics(result.metrics, metrics_path);
    m.outputs.push_back(metrics_path);

    const std::string ckpt_path = (fs::path(o.out_dir) / "checkpoint.bin").string();
    mcl::save_checkpoint(result.bundle, mcl::config_hash(cfg), ckpt_path);
    m.outputs.push_back(ckpt_path);

    close_manifest(m, o);
    const mcl::MetricsRow& last = result.metrics.back();
    std::cout << "train: " << mcl::to_string(cfg.mode) << ", " << cfg.iterations
              << " iterations, final pred-loss " << last.pred_loss << ", score " << last.score
              << "\n"
              << "wrote " << metrics_path << ", " << ckpt_path << "\n";
    return 0;
}

int cmd_eval(const Options& o) {
    const mcl::ExperimentConfig cfg = load_config(o);
    const mcl::Checkpoint ckpt = mcl::load_checkpoint(o.checkpoint_path);
    if (ckpt.config_hash != mcl::config_hash(cfg))
        std::cerr << "metalab: warning: checkpoint config hash " << ckpt.config_hash
                  << " does not match the current config (" << mcl::config_hash(cfg)
                  << "); proceeding\n";

    mcl::RunManifest m = open_manifest("eval", cfg, o);
    const mcl::EvalReport report = mcl::meta_evaluate(ckpt.bundle, evaluation_tasks(cfg), cfg);
    emit(m, o, "eval.json", mcl::to_json_text(report));
    close_manifest(m, o);
    std::cout << "eval: " << report.task_count << " tasks, mean loss " << report.mean_loss
              << " +- " << report.half_width_loss << ", mean score " << report.mean_score
              << " +- " << report.half_width_score << "\n";
    return 0;
}

int cmd_theorem1(const Options& o) {
    const mcl::ExperimentConfig cfg = load_config(o);
    mcl::RunManifest m = open_manifest("theorem1", cfg, o);
    const std::vector<mcl::Theorem1Report> reports = mcl::theorem1_experiment(cfg.theorem1);
    emit(m, o, "theorem1.json", mcl::to_json_text(reports));
    close_manifest(m, o);
    for (const mcl::Theorem1Report& r : reports)
        std::cout << r.setting() << "  noncausal-norm " << r.noncausal_norm
                  << (r.noncausal_zero ? "  (exactly zero)" : "") << "\n";
    return 0;
}

int cmd_sweep_batch(const Options& o) {
    const mcl::ExperimentConfig cfg = load_config(o);
    mcl::RunManifest m = open_manifest("sweep-batch", cfg, o);
    const mcl::SweepReport report = mcl::batch_size_sweep(cfg);
    emit(m, o, "sweep.json", mcl::to_json_text(report));
    close_manifest(m, o);
    for (const mcl::SweepAggregate& a : report.aggregates)
        std::cout << "sweep: " << mcl::to_string(a.mode) << " batch " << a.batch_size
                  << "  held-in " << a.heldin_mean << " +- " << a.heldin_half_width
                  << "  held-out " << a.heldout_mean << " +- " << a.heldout_half_width << "\n";
    return 0;
}

int cmd_gradcheck(const Options& o) {
    const mcl::ExperimentConfig cfg = load_config(o);
    mcl::RunManifest m = open_manifest("gradcheck", cfg, o);
    const mcl::GradCheckReport report = mcl::gradcheck_suite(cfg.seed, o.trials);

    nlohmann::ordered_json j;
    j["trials"] = report.trials;
    j["blocks"] = report.blocks;
    j["failures"] = report.failures;
    j["worst"] = report.worst;
    j["worst_label"] = report.worst_label;
    j["tolerance"] = report.tolerance;
    emit(m, o, "gradcheck.json", j.dump(2) + "\n");
    close_manifest(m, o);

    std::cout << "gradcheck: " << (report.blocks - report.failures) << "/" << report.blocks
              << " parameter blocks within " << report.tolerance << " over " << report.trials
              << " trials, worst " << report.worst << " (" << report.worst_label << ")\n";
    return report.failures == 0 ? 0 : 2;
}

int cmd_export_gram(const Options& o) {
    const mcl::ExperimentConfig cfg = load_config(o);
    const mcl::Checkpoint ckpt = mcl::load_checkpoint(o.checkpoint_path);
    if (ckpt.bundle.mode != mcl::Mode::causal || !ckpt.bundle.params.contains("xi"))
        throw std::runtime_error("export-gram needs a causal checkpoint (no factor matrix found)");

    mcl::RunManifest m = open_manifest("export-gram", cfg, o);
    const std::string path = (fs::path(o.out_dir) / "gram.csv").string();
    mcl::write_gram_csv(ckpt.bundle.params.at("xi"), path);
    m.outputs.push_back(path);
    close_manifest(m, o);
    const mcl::Tensor& xi = ckpt.bundle.params.at("xi");
    std::cout << "export-gram: wrote " << xi.shape[1] << "x" << xi.shape[1] << " matrix to "
              << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"meta-learning laboratory: bi-level training with a causal factor layer"};
    app.require_subcommand(1);

    Options o;
    CLI::App* train = app.add_subcommand("train", "meta-train a model and checkpoint it");
    add_config_flags(*train, o);
    train->add_flag("--timing", o.timing,
                    "record wall-clock seconds per iteration (breaks bit-reproducibility)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on fresh tasks");
    add_config_flags(*eval, o);
    eval->add_option("--checkpoint", o.checkpoint_path, "checkpoint to evaluate")
        ->required()
        ->check(CLI::ExistingFile);

    CLI::App* theorem1 =
        app.add_subcommand("theorem1", "least-squares weight analysis of paired labels");
    add_config_flags(*theorem1, o);

    CLI::App* sweep = app.add_subcommand("sweep-batch", "compare batch sizes B and 2B per mode");
    add_config_flags(*sweep, o);

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "autodiff versus finite differences on random networks");
    add_config_flags(*gradcheck, o);
    gradcheck->add_option("--trials", o.trials, "number of random networks");

    CLI::App* gram = app.add_subcommand("export-gram", "write |xi^T xi| of a checkpoint as CSV");
    add_config_flags(*gram, o);
    gram->add_option("--checkpoint", o.checkpoint_path, "checkpoint to export")
        ->required()
        ->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(o);
        if (eval->parsed()) return cmd_eval(o);
        if (theorem1->parsed()) return cmd_theorem1(o);
        if (sweep->parsed()) return cmd_sweep_batch(o);
        if (gradcheck->parsed()) return cmd_gradcheck(o);
        if (gram->parsed()) return cmd_export_gram(o);
    } catch (const std::exception& e) {
        std::cerr << "metalab: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
