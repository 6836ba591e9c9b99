#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mcl/config.hpp"
#include "mcl/meta.hpp"
#include "mcl/model.hpp"
#include "mcl/tasks.hpp"

namespace mcl {

// Optimal linear read-out of a task's own label from the joint factor
// features z = [own block; partner block]. The joint covariance is
// block-symmetric (constant within each block), so the solution is too and
// reduces to a 2x2 system. The partner block of the solution is exactly zero
// iff the labels carry no correlation (agreement q = 0.5) or the partner
// signal has no mean. Requires both factor noise stds > 0 (otherwise the
// covariance can be singular) and q in [0, 1].
std::vector<double> population_lsq_weights(const Theorem1Spec& spec, double q);

// Ridge least squares on a sampled joint dataset, read-out of y_i:
// w = (Z^T Z + eps I)^{-1} Z^T y_i. Without an explicit ridge, eps defaults
// to 1e-8 * trace(Z^T Z) / width. Deterministic in the dataset.
std::vector<double> empirical_lsq_weights(const JointDataset& data,
                                          std::optional<double> ridge = std::nullopt);

// One cell of the optimal-read-out study. n = 0 is the closed-form population
// row; a finite n reports the resample whose partner-block norm is the median
// (lower median for even resample counts), so noncausal_norm always equals
// the euclidean norm of w_noncausal.
struct Theorem1Report {
    Theorem1Spec spec;
    double q = 0.5;
    std::size_t n = 0;  // sample size; 0 = population
    std::vector<double> w_causal;     // own block, d_i entries
    std::vector<double> w_noncausal;  // partner block, d_j entries
    double noncausal_norm = 0.0;
    bool population = false;
    bool noncausal_zero = false;  // noncausal_norm == 0 exactly
    std::string setting() const;  // human-readable cell label
};

// Least-squares read-outs over the full q_grid x n_grid. Sample rows draw
// cfg.resamples datasets each from Rng(cfg.seed, 4), consumed in grid order,
// so the grid is deterministic per seed. Reports come out in q-major order.
// The q values are label agreement probabilities P(y_i = y_j); a stated
// correlation of one half is read as q = 0.5 (independent labels).
std::vector<Theorem1Report> theorem1_experiment(const Theorem1Config& cfg);

// Central-difference sensitivity of the model's outputs, averaged over the
// task's query inputs, along the dictionary directions of the task's
// confounded partner: the euclidean norm of
//   g_k = mean_rows [margin(x + h u_k) - margin(x - h u_k)] / 2h
// over the partner subset's columns u_k, where margin is the logit gap
// (second minus first logit) for two-way heads and the raw output otherwise.
// Grouping weights in causal mode come from the unperturbed task and stay
// fixed during the probe. Non-negative; exactly zero for a model whose
// outputs do not depend on the input. The task must carry the task_id its
// sampler recorded, and that id must belong to one of the world's pairs.
double noncausal_weight_mass(const ModelBundle& b, const FactorWorld& world, const Task& task,
                             double fd_step = 1e-4);

// Batch source over a world's confounded pairs: each batch picks random pairs
// and keeps both directed tasks of each, truncated to the requested count.
// The world is captured by value, so the source outlives its argument.
BatchSource confounded_source(const FactorWorld& world, double q);

// One trained-and-evaluated configuration of the batch size study.
struct SweepCell {
    Mode mode = Mode::plain;
    std::size_t batch_size = 0;
    std::uint64_t seed = 0;
    double heldin_accuracy = 0.0;  // fresh confounded pairs from the training world
    double heldin_half_width = 0.0;
    double heldout_accuracy = 0.0;  // fresh unconfounded tasks
    double heldout_half_width = 0.0;
};

// Across-seed mean and 95% half-width (1.96 * population std / sqrt(seeds))
// of the per-cell accuracies for one (mode, batch size).
struct SweepAggregate {
    Mode mode = Mode::plain;
    std::size_t batch_size = 0;
    std::size_t seeds = 0;
    double heldin_mean = 0.0, heldin_half_width = 0.0;
    double heldout_mean = 0.0, heldout_half_width = 0.0;
};

struct SweepReport {
    std::vector<SweepCell> cells;            // seed-major, then mode, then batch size
    std::vector<SweepAggregate> aggregates;  // mode-major, then batch size
};

// Trains one learner per (seed, mode, batch size in {B, 2B}) on confounded
// batches and evaluates it on held-in confounded pairs and held-out
// unconfounded tasks. Within a seed every cell shares the same world
// (Rng(seed', 3)), initialization, and evaluation tasks (Rng(seed', 2)),
// seed' = cfg.seed + seed index, so batch size is the only moving part of
// each paired comparison. Deterministic per config. Requires classification
// tasks and a world with q != 0.5 (no confounder, no study).
SweepReport batch_size_sweep(const ExperimentConfig& cfg);

}  // namespace mcl
