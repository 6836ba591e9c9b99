#include "mcl/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mcl {

namespace {

void check_matrix_input(const Tensor& x, std::size_t want_width, const std::string& who) {
    if (x.shape.size() != 2 || x.shape[1] != want_width)
        throw std::invalid_argument(who + ": expected input [batch," + std::to_string(want_width) +
                                    "], got " + shape_str(x.shape));
}

void check_spec(const MLPSpec& spec, const std::string& who) {
    if (spec.widths.size() < 2)
        throw std::invalid_argument(who + ": needs an input and an output width");
    for (auto w : spec.widths)
        if (w == 0) throw std::invalid_argument(who + ": zero layer width");
}

void draw_mlp(ParamSet& params, const std::string& prefix, const MLPSpec& spec, Rng& rng) {
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(in));
        std::vector<double> w(in * out);
        for (double& v : w) v = rng.normal(0.0, std_dev);
        params.set(prefix + ".w" + std::to_string(l), tensor({in, out}, std::move(w)));
        params.set(prefix + ".b" + std::to_string(l), zeros({1, out}));
    }
}

}  // namespace

std::size_t param_count(const MLPSpec& spec) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l)
        n += spec.widths[l] * spec.widths[l + 1] + spec.widths[l + 1];
    return n;
}

ModelBundle init_bundle(const ExperimentConfig& cfg, std::uint64_t seed) {
    ModelBundle b;
    b.mode = cfg.mode;
    // The encoder's last layer is activated like its hidden layers, so the
    // plain composition h(g(x)) is one deep MLP with a linear output.
    b.encoder = MLPSpec{cfg.encoder_widths, cfg.hidden_act, cfg.hidden_act};
    check_spec(b.encoder, "encoder");

    std::vector<std::size_t> head_widths;
    head_widths.push_back(cfg.mode == Mode::causal ? cfg.n_k : b.encoder.widths.back());
    head_widths.insert(head_widths.end(), cfg.head_hidden.begin(), cfg.head_hidden.end());
    head_widths.push_back(cfg.output_dim());
    b.head = MLPSpec{std::move(head_widths), cfg.hidden_act, Activation::identity};
    check_spec(b.head, "head");

    Rng rng(seed, 0);  // stream 0: parameter initialization
    draw_mlp(b.params, "g", b.encoder, rng);
    draw_mlp(b.params, "h", b.head, rng);

    if (cfg.mode == Mode::causal) {
        if (cfg.n_k < 2) throw std::invalid_argument("causal mode needs n_k >= 2");
        b.n_k = cfg.n_k;
        b.grouping = MLPSpec{{b.n_k, 2 * b.n_k, b.n_k}, Activation::tanh, Activation::softplus};
        draw_mlp(b.params, "fgr", b.grouping, rng);

        const std::size_t n_z = b.n_z();
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(n_z));
        std::vector<double> xi(n_z * b.n_k);
        for (double& v : xi) v = rng.normal(0.0, std_dev);
        b.params.set("xi", tensor({n_z, b.n_k}, std::move(xi)));
    }
    return b;
}

ModelBundle with_params(const ModelBundle& b, ParamSet params) {
    for (const auto& [name, old_t] : b.params) {
        if (!params.contains(name))
            throw std::invalid_argument("with_params: missing parameter '" + name + "'");
        if (params.at(name).shape != old_t.shape)
            throw std::invalid_argument("with_params: shape mismatch for '" + name + "'");
    }
    ModelBundle out = b;
    out.params = std::move(params);
    return out;
}

Tensor apply_activation(Activation act, const Tensor& x) {
    switch (act) {
        case Activation::identity: return x;
        case Activation::tanh: return tanh(x);
        case Activation::relu: return relu(x);
        case Activation::softplus: return softplus(x);
    }
    throw std::logic_error("unhandled activation tag");
}

Tensor mlp_forward(const MLPSpec& spec, const ParamSet& params, const std::string& prefix,
                   const Tensor& x) {
    check_spec(spec, prefix);
    check_matrix_input(x, spec.widths.front(), prefix);
    Tensor h = x;
    const std::size_t layers = spec.widths.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
        const Tensor& w = params.at(prefix + ".w" + std::to_string(l));
        const Tensor& bias = params.at(prefix + ".b" + std::to_string(l));
        Tensor y = matmul(h, w);
        y = add(y, expand(bias, 0, y.shape[0]));
        h = apply_activation(l + 1 == layers ? spec.output : spec.hidden, y);
    }
    return h;
}

Tensor encode(const ModelBundle& b, const Tensor& x) {
    return mlp_forward(b.encoder, b.params, "g", x);
}

Tensor causal_representation(const ModelBundle& b, const Tensor& x) {
    if (b.mode != Mode::causal)
        throw std::invalid_argument("causal_representation: plain-mode bundle");
    return matmul(encode(b, x), b.params.at("xi"));
}

Tensor task_average(const Task& t) {
    const std::size_t n_s = t.support_count(), n_q = t.query_count();
    if (n_s + n_q == 0) throw std::invalid_argument("task_average: empty task");
    const std::size_t dim = t.input_dim();
    if (dim == 0 || t.xq.shape.size() != 2 || t.xq.shape[1] != dim)
        throw std::invalid_argument("task_average: support/query widths disagree");
    std::vector<double> sum(dim, 0.0);
    for (std::size_t r = 0; r < n_s; ++r)
        for (std::size_t c = 0; c < dim; ++c) sum[c] += t.xs.vals()[r * dim + c];
    for (std::size_t r = 0; r < n_q; ++r)
        for (std::size_t c = 0; c < dim; ++c) sum[c] += t.xq.vals()[r * dim + c];
    for (double& v : sum) v /= static_cast<double>(n_s + n_q);
    return tensor({1, dim}, std::move(sum));
}

Tensor grouping_forward(const ModelBundle& b, const Tensor& rep) {
    if (b.mode != Mode::causal)
        throw std::invalid_argument("grouping_forward: plain-mode bundle");
    return mlp_forward(b.grouping, b.params, "fgr", rep);
}

Tensor normalize_row(const Tensor& raw) {
    if (raw.shape.size() != 2 || raw.shape[0] != 1)
        throw std::invalid_argument("normalize_row: wants a single row, got " +
                                    shape_str(raw.shape));
    return div(raw, clamp_min(reduce_sum_keep(raw, 1), 1e-12));
}

Tensor grouping_weights(const ModelBundle& b, const Tensor& x_avg) {
    if (x_avg.shape.size() != 2 || x_avg.shape[0] != 1)
        throw std::invalid_argument("grouping_weights: x_avg must be a single row");
    const Tensor w = normalize_row(grouping_forward(b, causal_representation(b, x_avg)));
    for (double v : w.vals())
        if (!std::isfinite(v)) throw std::runtime_error("grouping_weights: non-finite value");
    return w;
}

Tensor uniform_weights(std::size_t n_k) {
    if (n_k == 0) throw std::invalid_argument("uniform_weights: n_k must be >= 1");
    return full({1, n_k}, 1.0 / static_cast<double>(n_k));
}

Tensor predict(const ModelBundle& b, const Tensor& x, const std::optional<Tensor>& weights) {
    if (b.mode == Mode::plain) {
        if (weights) throw std::invalid_argument("predict: plain mode takes no grouping weights");
        return mlp_forward(b.head, b.params, "h", encode(b, x));
    }
    if (!weights) throw std::invalid_argument("predict: causal mode needs grouping weights");
    if (weights->shape != Shape{1, b.n_k})
        throw std::invalid_argument("predict: weights must be [1," + std::to_string(b.n_k) + "]");
    const Tensor rep = causal_representation(b, x);
    const Tensor z = mul(expand(*weights, 0, rep.shape[0]), rep);
    return mlp_forward(b.head, b.params, "h", z);
}

}  // namespace mcl
