#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mcl/config.hpp"
#include "mcl/model.hpp"
#include "mcl/tasks.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

enum class Split : std::uint8_t { support, query };

// True for the factor matrix and grouping-net parameters ("xi", "fgr.*"),
// the part of a bundle the second training step owns; everything else is
// θ = (encoder, head), owned by the first step.
bool factor_param(const std::string& name);

// Pairwise column-similarity penalty of the factor matrix:
// sum over i<j of (xi_:i . xi_:j)^2. With signed_products the raw inner
// products are summed instead (unbounded below; kept for ablation).
Tensor loss_dm_xi(const Tensor& xi, bool signed_products = false);

// Grouping-usage penalty over pre-Norm grouping outputs (one positive
// [1,n_k] row per task): total L1 mass minus the entropy of the factor-usage
// distribution p_k = sum_i out_i[k] / total mass. With per_task_entropy the
// entropy is taken over per-task masses instead.
Tensor loss_dm_fgr(const std::vector<Tensor>& outputs, bool per_task_entropy = false);

// lambda1 * loss_dm_xi + lambda2 * loss_dm_fgr, flags taken from hyper.
Tensor loss_dm_total(const Tensor& xi, const std::vector<Tensor>& outputs,
                     const CausalHyper& hyper);

// The weights predict() wants for this bundle: none in plain mode, the
// grouping weights of the task average (or uniform when forced) in causal
// mode.
std::optional<Tensor> prediction_weights(const ModelBundle& b, const Task& t,
                                         bool force_uniform = false);

// Per-task objective on one split: mse for regression, mean negative
// log-likelihood for classification.
Tensor task_prediction_loss(const ModelBundle& b, const Task& t, Split split,
                            const std::optional<Tensor>& weights);

struct CausalOptions {
    CausalHyper hyper;
    bool ablate_xi = false;   // drop the factor-similarity term
    bool ablate_fgr = false;  // drop the grouping-usage term
    bool force_uniform_weights = false;
};
CausalOptions causal_options(const ExperimentConfig& cfg);

// Mean grouping-weighted prediction loss over the chosen split of the batch,
// plus the (possibly ablated) disentangling losses. Differentiable with
// respect to every parameter that is tracked in the bundle.
Tensor causal_support_loss(const ModelBundle& b, const std::vector<Task>& batch, Split split,
                           const CausalOptions& opt);

// One recorded gradient step of the support-split loss on xi (rate alpha1)
// and the grouping parameters (rate alpha2). `original` holds the tracked
// leaves the step started from, `updated` the stepped tensors; both live on
// `graph`, and the step stays differentiable with respect to the originals.
struct FactorUpdate {
    ParamSet original;
    ParamSet updated;
};
FactorUpdate causal_first_level(Graph& graph, const ModelBundle& b,
                                const std::vector<Task>& batch, const CausalOptions& opt);

// Evaluates the query-split loss at the first-level update, differentiates it
// back to the original xi / grouping parameters through the recorded first
// level, and applies value updates with rates alpha3 / alpha4. Encoder and
// head entries of the result are the very tensors of the input bundle.
ModelBundle causal_second_level(const ModelBundle& b, const std::vector<Task>& batch,
                                const CausalOptions& opt);

std::vector<double> gram_abs(const Tensor& xi);  // |xi^T xi|, row-major n_k x n_k
double mean_offdiag_abs(const std::vector<double>& gram, std::size_t n);

}  // namespace mcl
