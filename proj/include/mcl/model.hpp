#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mcl/config.hpp"
#include "mcl/rng.hpp"
#include "mcl/tasks.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

struct MLPSpec {
    std::vector<std::size_t> widths;  // input, hidden..., output
    Activation hidden = Activation::relu;
    Activation output = Activation::identity;
};

std::size_t param_count(const MLPSpec& spec);

// The learner's parameters plus the structure needed to run them. Bundles are
// immutable values: forward passes never mutate one, and updates construct a
// replacement via with_params. Parameter names: g.w0/g.b0/... for the
// encoder, h.* for the head, fgr.* for the grouping net, xi for the factor
// matrix ([n_z, n_k]); the latter two exist only in causal mode.
struct ModelBundle {
    Mode mode = Mode::plain;
    MLPSpec encoder;   // g: input_dim -> ... -> n_z
    MLPSpec head;      // h: n_z (plain) or n_k (causal) -> ... -> output_dim
    MLPSpec grouping;  // f_gr: n_k -> 2*n_k -> n_k, causal mode only
    std::size_t n_k = 0;  // 0 in plain mode
    ParamSet params;

    std::size_t input_dim() const { return encoder.widths.front(); }
    std::size_t n_z() const { return encoder.widths.back(); }
    std::size_t output_dim() const { return head.widths.back(); }
};

// Gaussian init with standard deviation 1/sqrt(fan-in) for weights (1/sqrt(n_z)
// for xi), zero biases. Deterministic per seed; draw order g, h, fgr, xi.
ModelBundle init_bundle(const ExperimentConfig& cfg, std::uint64_t seed);

ModelBundle with_params(const ModelBundle& b, ParamSet params);

Tensor apply_activation(Activation act, const Tensor& x);

// Dense layers: x -> act(x @ W + b), hidden activation between layers, output
// activation after the last. Reads prefix.w<l> [in,out] and prefix.b<l> [1,out].
Tensor mlp_forward(const MLPSpec& spec, const ParamSet& params, const std::string& prefix,
                   const Tensor& x);

Tensor encode(const ModelBundle& b, const Tensor& x);  // g(x), [batch, n_z]

// xi^T g(x) as [batch, n_k] = g(x) @ xi. Causal mode only.
Tensor causal_representation(const ModelBundle& b, const Tensor& x);

// Coordinate-wise mean over every support and query input, shape [1, input_dim].
Tensor task_average(const Task& t);

// Raw grouping-net output on one representation row: softplus keeps every
// coordinate strictly positive. Causal mode only.
Tensor grouping_forward(const ModelBundle& b, const Tensor& rep);

// The Norm step: a positive row divided by its sum, denominator floored at
// 1e-12. Differentiable.
Tensor normalize_row(const Tensor& raw);

// Norm(f_gr(xi^T g(x_avg))): normalize_row of grouping_forward, shape
// [1, n_k]. Differentiable through f_gr and xi.
Tensor grouping_weights(const ModelBundle& b, const Tensor& x_avg);

Tensor uniform_weights(std::size_t n_k);  // untracked [1, n_k] row of 1/n_k

// Plain mode: h(g(x)), weights must be absent. Causal mode: h(w * xi^T g(x))
// with the weight row broadcast across the batch; weights required, [1, n_k].
Tensor predict(const ModelBundle& b, const Tensor& x,
               const std::optional<Tensor>& weights = std::nullopt);

}  // namespace mcl
