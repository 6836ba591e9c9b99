#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mcl/rng.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

enum class TaskKind : std::uint8_t { regression, classification };

std::string to_string(TaskKind k);

// One episode: a support split to adapt on and a query split to score on.
// Regression targets live in ys/yq ([n,1]); classification targets are class
// indices in labels_s/labels_q. labels_partner_* record the paired task's
// label per sample when the task came from a confounded batch (generator
// bookkeeping used by diagnostics and tests; empty otherwise).
struct Task {
    TaskKind kind = TaskKind::regression;
    Tensor xs, xq;  // [n, input_dim]
    Tensor ys, yq;  // regression only, [n, 1]
    std::vector<int> labels_s, labels_q;
    std::vector<int> labels_partner_s, labels_partner_q;
    std::map<std::string, double> meta;

    std::size_t support_count() const { return xs.shape.empty() ? 0 : xs.shape[0]; }
    std::size_t query_count() const { return xq.shape.empty() ? 0 : xq.shape[0]; }
    std::size_t input_dim() const { return xs.shape.size() == 2 ? xs.shape[1] : 0; }
};

void validate(const Task& t);  // non-empty splits, equal widths, labels in range

struct SinusoidSpec {
    double amp_lo = 0.1, amp_hi = 5.0;
    double freq_lo = 0.5, freq_hi = 2.0;
    double phase_lo = 0.0, phase_hi = 6.283185307179586;
    double noise_std = 0.3;
    double input_lo = -5.0, input_hi = 5.0;
    std::size_t shots = 10, query = 10;
    bool offset_form = false;  // read b as an additive offset instead of a phase
};

// Draws (A, w, b) uniformly from the spec ranges; y = A*sin(w*x + b) + noise
// (or A*sin(w*x) + b with offset_form). Inputs are uniform on the input range;
// support and query draws never coincide.
Task sample_sinusoid_task(const SinusoidSpec& spec, Rng& rng);

struct FactorWorldSpec {
    std::size_t ambient_dim = 16;  // observed feature width
    std::size_t n_factors = 16;    // latent dictionary columns
    std::size_t subset_size = 2;   // causal factors per task
    double mu = 2.0;               // class-mean magnitude in factor space
    double factor_noise = 1.0;
    double obs_noise = 0.1;
    double q = 0.8;        // label-agreement probability for paired tasks
    std::size_t n_pairs = 4;
    std::size_t shots = 5, query = 15;
};

/// A fixed generative mechanism: one orthonormal dictionary shared by every
// task, plus per-task causal subsets arranged in disjoint pairs.
struct FactorWorld {
    FactorWorldSpec spec;
    Tensor dictionary;  // [ambient_dim, n_factors], orthonormal columns
    std::vector<std::vector<std::size_t>> subsets;          // per task
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // task-id pairs
};

// Dictionary = QR of a Gaussian matrix with a canonical column-sign fix.
// When 2*subset_size*n_pairs <= n_factors the pair subsets partition one
// shuffled index pool (fully disjoint across the world); otherwise each pair
// draws its own disjoint index pair.
FactorWorld sample_factor_world(const FactorWorldSpec& spec, Rng& rng);

/// Unconfounded draw for one task: its causal coordinates get mean mu*y, every
// other coordinate mean 0, all with factor noise; observations are
// dictionary * factors + observation noise. Labels balanced per split when
// the count is even.
Task sample_classification_task(const FactorWorld& world, std::size_t task_id, std::size_t shots,
                                std::size_t query, Rng& rng);

// Paired tasks with disjoint causal subsets whose labels agree with
/// probability q: each sample of task i also draws the partner label y_j and
// plants mu*y_j on the partner's coordinates, so the partner signal is
// present (and spuriously usable) inside task i's inputs.
std::vector<Task> make_confounded_batch(const FactorWorld& world,
                                        const std::vector<std::pair<std::size_t, std::size_t>>& pair_list,
                                        double q, Rng& rng);

struct Theorem1Spec {
    std::size_t d_i = 4, d_j = 4;
    double mu_i = 1.0, mu_j = 1.0;
    double sigma_i = 1.0, sigma_j = 1.0;
};

// Joint factor-space dataset z = [own-block; partner-block] with correlated
// +-1 labels; the two blocks never share coordinates.
struct JointDataset {
    std::size_t d_i = 0, d_j = 0;
    std::vector<double> z;  // row-major, rows() x (d_i + d_j)
    std::vector<double> y_i, y_j;  // +-1

    std::size_t rows() const { return y_i.size(); }
    std::size_t width() const { return d_i + d_j; }
};

JointDataset sample_theorem1_dataset(const Theorem1Spec& spec, std::size_t n, double q, Rng& rng);

}  // namespace mcl
