#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mcl/causal.hpp"
#include "mcl/config.hpp"
#include "mcl/model.hpp"
#include "mcl/rng.hpp"
#include "mcl/tasks.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

// One training iteration's diagnostics. score is query MSE for regression and
// query accuracy for classification; the dm fields stay zero in plain mode.
struct MetricsRow {
    std::size_t iteration = 0;
    std::string split = "train";
    double pred_loss = 0.0;
    double score = 0.0;
    double l_dm_xi = 0.0;
    double l_dm_fgr = 0.0;
    double seconds = 0.0;
};

// Aggregate over an evaluation task list: mean and 95% confidence half-width
// (1.96 * population std / sqrt(task count)) of per-task loss and score.
struct EvalReport {
    std::size_t task_count = 0;
    double mean_loss = 0.0;
    double half_width_loss = 0.0;
    double mean_score = 0.0;
    double half_width_score = 0.0;
    std::vector<double> per_task_loss;
    std::vector<double> per_task_score;
};

// Draws one training batch of n tasks from rng.
using BatchSource = std::function<std::vector<Task>(std::size_t n, Rng& rng)>;

// Fraction of rows whose argmax logit (first maximum on ties) is the label.
double classification_accuracy(const Tensor& logits, const std::vector<int>& labels);

// cfg.inner_steps support-split gradient steps on theta = (encoder, head)
// only. Theta leaves live on `graph` (tensors already tracked there are
// reused, so a caller's leaves stay the roots), and with create_graph the
// adapted values remain differentiable with respect to them; cfg.first_order
// cuts that flow through the gradient while keeping the update recorded. In
// causal mode each step recomputes the grouping weights at the current theta.
// Returns the full parameter set: adapted theta plus the untouched factor
// entries.
ParamSet inner_adapt(Graph& graph, const ModelBundle& b, const Task& task,
                     const ExperimentConfig& cfg, bool create_graph = true);

struct OuterStepResult {
    ModelBundle bundle;
    double query_loss = 0.0;  // mean post-adaptation query loss over the batch
    double query_score = 0.0;
};

// One outer update: per-task inner_adapt, mean query loss at the adapted
// parameters, gradient back through the inner steps, theta -= outer_lr * grad.
// Factor entries of the result are the very tensors of the input bundle.
OuterStepResult meta_outer_step(const ModelBundle& b, const std::vector<Task>& batch,
                                const ExperimentConfig& cfg);

struct TrainStepResult {
    ModelBundle bundle;
    MetricsRow row;
};

// One full training iteration: step 1 updates theta (meta_outer_step), step 2
// updates the factors (causal_second_level; skipped in plain mode). Both use
// `batch` unless step2_batch provides its own. iteration and seconds are left
// for the caller to fill.
TrainStepResult train_batch_two_step(
    const ModelBundle& b, const std::vector<Task>& batch, const ExperimentConfig& cfg,
    const std::optional<std::vector<Task>>& step2_batch = std::nullopt);

struct TrainResult {
    ModelBundle bundle;
    std::vector<MetricsRow> metrics;
};

// Full training loop from `start`: cfg.iterations batches of cfg.n_tr tasks
// drawn from `source` with Rng(cfg.seed, 1) (plus a second batch per
// iteration when cfg.fresh_batch_step2 is set in causal mode), one
// train_batch_two_step each. Deterministic per seed once record_timing is
// off. Any step failure, including a non-finite loss, aborts naming the
// iteration.
TrainResult meta_train_from(ModelBundle start, const ExperimentConfig& cfg,
                            const BatchSource& source, bool record_timing = true);

// meta_train_from at init_bundle(cfg, cfg.seed).
TrainResult meta_train(const ExperimentConfig& cfg, const BatchSource& source,
                       bool record_timing = true);

// Value-mode inner_adapt per task, then query scoring (MSE for regression,
// accuracy for classification), aggregated over the list.
EvalReport meta_evaluate(const ModelBundle& b, const std::vector<Task>& tasks,
                         const ExperimentConfig& cfg);

// Batch source drawing i.i.d. sinusoid tasks from cfg.sinusoid.
BatchSource sinusoid_source(const ExperimentConfig& cfg);

}  // namespace mcl
