#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcl/tasks.hpp"

namespace mcl {

enum class Mode : std::uint8_t { plain, causal };
enum class Activation : std::uint8_t { identity, tanh, relu, softplus };

std::string to_string(Mode m);
std::string to_string(Activation a);
Mode mode_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);
TaskKind task_kind_from_string(const std::string& s);

struct CausalHyper {
    double lambda1 = 0.4, lambda2 = 0.2;
    double alpha1 = 1e-3, alpha2 = 1e-3;  // factor / grouping rates, support level
    double alpha3 = 1e-3, alpha4 = 1e-3;  // factor / grouping rates, query level
    bool signed_xi = false;       // raw pairwise column products instead of squared
    bool per_task_entropy = false;  // entropy over per-task mass instead of factor usage
};

struct SweepConfig {
    std::size_t batch = 4;  // B; the sweep compares B against 2B
    std::size_t iterations = 2000;
    std::size_t seeds = 10;
    std::string modes = "both";  // plain | causal | both
    std::size_t eval_pairs = 8;     // held-in: fresh confounded pairs
    std::size_t eval_holdout = 16;  // held-out: fresh unconfounded tasks
};

struct Theorem1Config {
    Theorem1Spec spec;
    std::vector<double> q_grid{0.2, 0.5, 0.8};
    // Sample sizes per report; 0 stands for the population (closed-form) row.
    std::vector<std::size_t> n_grid{0, 50, 500};
    std::size_t resamples = 25;  // finite-n rows report the median over these
    std::uint64_t seed = 0;
};

struct ExperimentConfig {
    Mode mode = Mode::plain;
    TaskKind task_kind = TaskKind::regression;
    std::uint64_t seed = 0;
    std::size_t iterations = 10000;
    std::size_t n_tr = 4;  // tasks per training batch
    double inner_lr = 0.01;
    std::size_t inner_steps = 1;
    double outer_lr = 0.001;
    bool first_order = false;         // ablation: cut gradient flow through the inner step
    bool fresh_batch_step2 = false;   // factor update draws its own batch
    bool force_uniform_weights = false;  // diagnostic: constant 1/n_k grouping
    std::vector<std::size_t> encoder_widths{1, 40, 40};
    std::vector<std::size_t> head_hidden{40};
    std::size_t n_k = 12;
    Activation hidden_act = Activation::relu;
    CausalHyper causal;
    bool ablate_xi = false, ablate_fgr = false;
    SinusoidSpec sinusoid;
    FactorWorldSpec world;
    std::size_t eval_tasks = 200;
    SweepConfig sweep;
    Theorem1Config theorem1;

    std::size_t input_dim() const { return encoder_widths.front(); }
    std::size_t n_z() const { return encoder_widths.back(); }
    std::size_t output_dim() const { return task_kind == TaskKind::regression ? 1 : 2; }
};

void validate(const ExperimentConfig& c);  // throws naming the violated invariant

// Parses the dotted-key text format (one `key = value` per line, `#` comments,
// comma-separated lists). Unknown keys are rejected by name; type and
// constraint errors carry the key path. `origin` names the source in errors.
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<inline>");
ExperimentConfig parse_config_file(const std::string& path);

// Canonical dump: every key in fixed order with its effective value. A dump
// reparses to an equal config, and its FNV-1a hash keys the checkpoint header.
std::string dump_config(const ExperimentConfig& c);
std::uint64_t config_hash(const ExperimentConfig& c);

}  // namespace mcl
