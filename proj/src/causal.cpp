#include "mcl/causal.hpp"

#include <cmath>
#include <stdexcept>

namespace mcl {

bool factor_param(const std::string& name) {
    return name == "xi" || name.rfind("fgr.", 0) == 0;
}

namespace {

ParamSet merge_params(const ParamSet& base, const ParamSet& overrides) {
    ParamSet out = base;
    for (const auto& [name, t] : overrides) out.set(name, t);
    return out;
}

}  // namespace

Tensor loss_dm_xi(const Tensor& xi, bool signed_products) {
    if (xi.shape.size() != 2 || xi.shape[1] < 2)
        throw std::invalid_argument("loss_dm_xi: needs a matrix with at least two columns, got " +
                                    shape_str(xi.shape));
    const std::size_t n_k = xi.shape[1];
    std::vector<double> upper(n_k * n_k, 0.0);
    for (std::size_t i = 0; i < n_k; ++i)
        for (std::size_t j = i + 1; j < n_k; ++j) upper[i * n_k + j] = 1.0;
    const Tensor gram = matmul(transpose(xi), xi);
    const Tensor picked = signed_products ? gram : mul(gram, gram);
    const Tensor loss = reduce_sum_all(mul(picked, tensor({n_k, n_k}, std::move(upper))));
    if (!std::isfinite(loss.scalar()))
        throw std::runtime_error("loss_dm_xi: non-finite similarity");
    return loss;
}

Tensor loss_dm_fgr(const std::vector<Tensor>& outputs, bool per_task_entropy) {
    if (outputs.empty()) throw std::invalid_argument("loss_dm_fgr: no grouping outputs");
    const Shape& shape = outputs.front().shape;
    if (shape.size() != 2 || shape[0] != 1)
        throw std::invalid_argument("loss_dm_fgr: outputs must be [1,n_k] rows");
    for (const Tensor& out : outputs) {
        if (out.shape != shape)
            throw std::invalid_argument("loss_dm_fgr: inconsistent output shapes");
        for (double v : out.vals())
            if (!(v > 0.0))
                throw std::domain_error("loss_dm_fgr: non-positive grouping output");
    }
    Tensor totals = outputs.front();
    for (std::size_t i = 1; i < outputs.size(); ++i) totals = add(totals, outputs[i]);
    const Tensor grand = reduce_sum_all(totals);  // == sum of every ||out_i||_1
    Tensor entropy;
    if (per_task_entropy) {
        entropy = scalar_tensor(0.0);
        for (const Tensor& out : outputs) {
            const Tensor p = div(reduce_sum_all(out), grand);
            entropy = add(entropy, mul(p, log(p)));
        }
        entropy = neg(entropy);
    } else {
        const Tensor p = div(totals, grand);
        entropy = neg(reduce_sum_all(mul(p, log(p))));
    }
    return sub(grand, entropy);
}

Tensor loss_dm_total(const Tensor& xi, const std::vector<Tensor>& outputs,
                     const CausalHyper& hyper) {
    return add(mul_scalar(loss_dm_xi(xi, hyper.signed_xi), hyper.lambda1),
               mul_scalar(loss_dm_fgr(outputs, hyper.per_task_entropy), hyper.lambda2));
}

std::optional<Tensor> prediction_weights(const ModelBundle& b, const Task& t,
                                         bool force_uniform) {
    if (b.mode == Mode::plain) return std::nullopt;
    if (force_uniform) return uniform_weights(b.n_k);
    return grouping_weights(b, task_average(t));
}

Tensor task_prediction_loss(const ModelBundle& b, const Task& t, Split split,
                            const std::optional<Tensor>& weights) {
    const Tensor& x = split == Split::support ? t.xs : t.xq;
    const Tensor pred = predict(b, x, weights);
    if (t.kind == TaskKind::regression)
        return mse_loss(pred, split == Split::support ? t.ys : t.yq);
    return nll_loss(pred, split == Split::support ? t.labels_s : t.labels_q);
}

CausalOptions causal_options(const ExperimentConfig& cfg) {
    CausalOptions opt;
    opt.hyper = cfg.causal;
    opt.ablate_xi = cfg.ablate_xi;
    opt.ablate_fgr = cfg.ablate_fgr;
    opt.force_uniform_weights = cfg.force_uniform_weights;
    return opt;
}

Tensor causal_support_loss(const ModelBundle& b, const std::vector<Task>& batch, Split split,
                           const CausalOptions& opt) {
    if (b.mode != Mode::causal)
        throw std::invalid_argument("causal_support_loss: plain-mode bundle");
    if (batch.empty()) throw std::invalid_argument("causal_support_loss: empty batch");

    std::vector<Tensor> raw_outputs;
    raw_outputs.reserve(batch.size());
    Tensor pred_sum;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor raw = grouping_forward(b, causal_representation(b, task_average(batch[i])));
        raw_outputs.push_back(raw);
        const std::optional<Tensor> w =
            opt.force_uniform_weights ? std::optional<Tensor>(uniform_weights(b.n_k))
                                      : std::optional<Tensor>(normalize_row(raw));
        const Tensor loss = task_prediction_loss(b, batch[i], split, w);
        pred_sum = i == 0 ? loss : add(pred_sum, loss);
    }
    const Tensor pred_mean = mul_scalar(pred_sum, 1.0 / static_cast<double>(batch.size()));

    const Tensor xi_term = opt.ablate_xi ? scalar_tensor(0.0)
                                         : loss_dm_xi(b.params.at("xi"), opt.hyper.signed_xi);
    const Tensor fgr_term = opt.ablate_fgr
                                ? scalar_tensor(0.0)
                                : loss_dm_fgr(raw_outputs, opt.hyper.per_task_entropy);
    return add(pred_mean, add(mul_scalar(xi_term, opt.hyper.lambda1),
                              mul_scalar(fgr_term, opt.hyper.lambda2)));
}

FactorUpdate causal_first_level(Graph& graph, const ModelBundle& b,
                                const std::vector<Task>& batch, const CausalOptions& opt) {
    if (b.mode != Mode::causal)
        throw std::invalid_argument("causal_first_level: plain-mode bundle");
    ParamSet factors;
    for (const auto& [name, t] : b.params)
        if (factor_param(name)) factors.set(name, t);

    FactorUpdate out;
    out.original = track_all(graph, factors);
    const ModelBundle tracked = with_params(b, merge_params(b.params, out.original));
    const Tensor loss = causal_support_loss(tracked, batch, Split::support, opt);
    const GradMap grads = grad(loss, out.original, /*create_graph=*/true);

    for (const auto& [name, t] : out.original) {
        ParamSet one, one_grad;
        one.set(name, t);
        one_grad.set(name, grads.at(name));
        const double rate = name == "xi" ? opt.hyper.alpha1 : opt.hyper.alpha2;
        out.updated.set(name, sgd_step(one, one_grad, rate, /*create_graph=*/true).at(name));
    }
    return out;
}

ModelBundle causal_second_level(const ModelBundle& b, const std::vector<Task>& batch,
                                const CausalOptions& opt) {
    Graph graph;
    const FactorUpdate first = causal_first_level(graph, b, batch, opt);
    const ModelBundle stepped = with_params(b, merge_params(b.params, first.updated));
    const Tensor query_loss = causal_support_loss(stepped, batch, Split::query, opt);
    const GradMap grads = grad(query_loss, first.original);

    ParamSet out = b.params;  // encoder/head entries stay the same objects
    for (const auto& [name, g] : grads) {
        const double rate = name == "xi" ? opt.hyper.alpha3 : opt.hyper.alpha4;
        const Tensor& old = b.params.at(name);
        std::vector<double> next(old.size());
        for (std::size_t i = 0; i < next.size(); ++i)
            next[i] = old.vals()[i] - rate * g.vals()[i];
        out.set(name, tensor(old.shape, std::move(next)));
    }
    return with_params(b, out);
}

std::vector<double> gram_abs(const Tensor& xi) {
    if (xi.shape.size() != 2) throw std::invalid_argument("gram_abs: wants a matrix");
    const std::size_t n_z = xi.shape[0], n_k = xi.shape[1];
    std::vector<double> gram(n_k * n_k, 0.0);
    for (std::size_t i = 0; i < n_k; ++i)
        for (std::size_t j = 0; j < n_k; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < n_z; ++r)
                acc += xi.vals()[r * n_k + i] * xi.vals()[r * n_k + j];
            gram[i * n_k + j] = std::abs(acc);
        }
    return gram;
}

double mean_offdiag_abs(const std::vector<double>& gram, std::size_t n) {
    if (n < 2 || gram.size() != n * n)
        throw std::invalid_argument("mean_offdiag_abs: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) acc += gram[i * n + j];
    return acc / static_cast<double>(n * n - n);
}

}  // namespace mcl
