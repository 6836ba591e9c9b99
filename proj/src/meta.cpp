#include "mcl/meta.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace mcl {

namespace {

ParamSet merge_params(const ParamSet& base, const ParamSet& overrides) {
    ParamSet out = base;
    for (const auto& [name, t] : overrides) out.set(name, t);
    return out;
}

double mean_of(const std::vector<double>& xs) {
    double acc = 0.0;
    for (double x : xs) acc += x;
    return acc / static_cast<double>(xs.size());
}

double population_std(const std::vector<double>& xs, double mean) {
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(xs.size()));
}

// Post-adaptation query loss and score of one task; loss stays differentiable
// when the adapted parameters are tracked.
std::pair<Tensor, double> query_loss_and_score(const ModelBundle& adapted, const Task& t,
                                               const ExperimentConfig& cfg) {
    const std::optional<Tensor> w = prediction_weights(adapted, t, cfg.force_uniform_weights);
    const Tensor pred = predict(adapted, t.xq, w);
    if (t.kind == TaskKind::regression) {
        const Tensor loss = mse_loss(pred, t.yq);
        return {loss, loss.scalar()};
    }
    const Tensor loss = nll_loss(pred, t.labels_q);
    return {loss, classification_accuracy(pred, t.labels_q)};
}

}  // namespace

double classification_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2)
        throw std::invalid_argument("classification_accuracy: logits must be [batch, classes], got " +
                                    shape_str(logits.shape));
    const std::size_t rows = logits.shape[0], cols = logits.shape[1];
    if (labels.size() != rows)
        throw std::invalid_argument("classification_accuracy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(rows) + " rows");
    const auto& v = logits.vals();
    std::size_t hits = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c)
            if (v[r * cols + c] > v[r * cols + best]) best = c;
        if (static_cast<std::size_t>(labels[r]) == best) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(rows);
}

ParamSet inner_adapt(Graph& graph, const ModelBundle& b, const Task& task,
                     const ExperimentConfig& cfg, bool create_graph) {
    if (task.kind != cfg.task_kind)
        throw std::invalid_argument("inner_adapt: task kind does not match the config");
    ParamSet all = b.params;
    ParamSet theta;
    for (const auto& [name, p] : b.params) {
        if (factor_param(name)) continue;
        if (p.tracked() && p.graph != &graph)
            throw std::invalid_argument("inner_adapt: parameter " + name +
                                        " is tracked on a different graph");
        theta.set(name, p);
    }
    const bool grad_graph = create_graph && !cfg.first_order;
    for (std::size_t step = 0; step < cfg.inner_steps; ++step) {
        ParamSet leaves;
        for (const auto& [name, p] : theta) leaves.set(name, p.tracked() ? p : graph.leaf(p));
        all = merge_params(all, leaves);
        const ModelBundle cur = with_params(b, all);
        const std::optional<Tensor> w = prediction_weights(cur, task, cfg.force_uniform_weights);
        const Tensor loss = task_prediction_loss(cur, task, Split::support, w);
        const GradMap grads = grad(loss, leaves, grad_graph);
        theta = sgd_step(leaves, grads, cfg.inner_lr, create_graph);
    }
    return merge_params(all, theta);
}

OuterStepResult meta_outer_step(const ModelBundle& b, const std::vector<Task>& batch,
                                const ExperimentConfig& cfg) {
    if (batch.empty()) throw std::invalid_argument("meta_outer_step: empty batch");
    if (batch.size() != cfg.n_tr)
        throw std::invalid_argument("meta_outer_step: batch size " + std::to_string(batch.size()) +
                                    " != n_tr " + std::to_string(cfg.n_tr));
    Graph graph;
    ParamSet theta;
    ParamSet working = b.params;
    for (const auto& [name, p] : b.params) {
        if (factor_param(name)) continue;
        const Tensor leaf = graph.leaf(p);
        theta.set(name, leaf);
        working.set(name, leaf);
    }
    const ModelBundle tracked = with_params(b, working);

    Tensor loss_sum;
    double score_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const ParamSet adapted = inner_adapt(graph, tracked, batch[i], cfg, /*create_graph=*/true);
        auto [loss, score] = query_loss_and_score(with_params(b, adapted), batch[i], cfg);
        score_sum += score;
        loss_sum = i == 0 ? loss : add(loss_sum, loss);
    }
    const double n = static_cast<double>(batch.size());
    const Tensor mean_loss = mul_scalar(loss_sum, 1.0 / n);
    const GradMap grads = grad(mean_loss, theta);
    const ParamSet stepped = sgd_step(theta, grads, cfg.outer_lr);
    return {with_params(b, merge_params(b.params, stepped)), mean_loss.scalar(), score_sum / n};
}

TrainStepResult train_batch_two_step(const ModelBundle& b, const std::vector<Task>& batch,
                                     const ExperimentConfig& cfg,
                                     const std::optional<std::vector<Task>>& step2_batch) {
    const OuterStepResult step1 = meta_outer_step(b, batch, cfg);
    TrainStepResult out{step1.bundle, {}};
    out.row.pred_loss = step1.query_loss;
    out.row.score = step1.query_score;
    if (cfg.mode == Mode::causal) {
        const std::vector<Task>& fb = step2_batch ? *step2_batch : batch;
        out.bundle = causal_second_level(out.bundle, fb, causal_options(cfg));
        out.row.l_dm_xi =
            loss_dm_xi(out.bundle.params.at("xi"), cfg.causal.signed_xi).scalar();
        std::vector<Tensor> grouping_outs;
        grouping_outs.reserve(fb.size());
        for (const Task& t : fb)
            grouping_outs.push_back(
                grouping_forward(out.bundle, causal_representation(out.bundle, task_average(t))));
        out.row.l_dm_fgr = loss_dm_fgr(grouping_outs, cfg.causal.per_task_entropy).scalar();
    }
    return out;
}

TrainResult meta_train_from(ModelBundle start, const ExperimentConfig& cfg,
                            const BatchSource& source, bool record_timing) {
    validate(cfg);
    if (!source) throw std::invalid_argument("meta_train: no batch source");
    TrainResult out{std::move(start), {}};
    out.metrics.reserve(cfg.iterations);
    Rng task_rng(cfg.seed, 1);
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            std::vector<Task> batch = source(cfg.n_tr, task_rng);
            std::optional<std::vector<Task>> second;
            if (cfg.mode == Mode::causal && cfg.fresh_batch_step2)
                second = source(cfg.n_tr, task_rng);
            TrainStepResult step = train_batch_two_step(out.bundle, batch, cfg, second);
            for (double f : {step.row.pred_loss, step.row.score, step.row.l_dm_xi,
                             step.row.l_dm_fgr})
                if (!std::isfinite(f)) throw std::runtime_error("non-finite metrics");
            out.bundle = std::move(step.bundle);
            step.row.iteration = it;
            if (record_timing)
                step.row.seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            out.metrics.push_back(std::move(step.row));
        } catch (const std::exception& e) {
            throw std::runtime_error("meta_train: aborted at iteration " + std::to_string(it) +
                                     ": " + e.what());
        }
    }
    return out;
}

TrainResult meta_train(const ExperimentConfig& cfg, const BatchSource& source,
                       bool record_timing) {
    validate(cfg);
    return meta_train_from(init_bundle(cfg, cfg.seed), cfg, source, record_timing);
}

EvalReport meta_evaluate(const ModelBundle& b, const std::vector<Task>& tasks,
                         const ExperimentConfig& cfg) {
    if (tasks.empty()) throw std::invalid_argument("meta_evaluate: empty task list");
    EvalReport rep;
    rep.task_count = tasks.size();
    rep.per_task_loss.reserve(tasks.size());
    rep.per_task_score.reserve(tasks.size());
    for (const Task& t : tasks) {
        Graph graph;
        const ParamSet adapted = inner_adapt(graph, b, t, cfg, /*create_graph=*/false);
        ParamSet values;
        for (const auto& [name, p] : adapted) values.set(name, p.tracked() ? p.detach() : p);
        auto [loss, score] = query_loss_and_score(with_params(b, values), t, cfg);
        rep.per_task_loss.push_back(loss.scalar());
        rep.per_task_score.push_back(score);
    }
    rep.mean_loss = mean_of(rep.per_task_loss);
    rep.mean_score = mean_of(rep.per_task_score);
    const double root_n = std::sqrt(static_cast<double>(tasks.size()));
    rep.half_width_loss = 1.96 * population_std(rep.per_task_loss, rep.mean_loss) / root_n;
    rep.half_width_score = 1.96 * population_std(rep.per_task_score, rep.mean_score) / root_n;
    return rep;
}

BatchSource sinusoid_source(const ExperimentConfig& cfg) {
    const SinusoidSpec spec = cfg.sinusoid;
    return [spec](std::size_t n, Rng& rng) {
        std::vector<Task> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(sample_sinusoid_task(spec, rng));
        return out;
    };
}

}  // namespace mcl
