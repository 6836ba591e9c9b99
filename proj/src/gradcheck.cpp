#include "mcl/gradcheck.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcl/causal.hpp"
#include "mcl/config.hpp"
#include "mcl/model.hpp"
#include "mcl/rng.hpp"
#include "mcl/tasks.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

namespace {

constexpr const char* kPathNames[4] = {"plain-regression", "plain-classification",
                                       "causal-regression", "causal-classification"};

Task random_task(TaskKind kind, std::size_t in_dim, std::size_t n, Rng& rng) {
    Task t;
    t.kind = kind;
    const auto draw_inputs = [&] {
        std::vector<double> v(n * in_dim);
        for (double& x : v) x = rng.normal();
        return tensor({n, in_dim}, std::move(v));
    };
    t.xs = draw_inputs();
    t.xq = draw_inputs();
    if (kind == TaskKind::regression) {
        const auto draw_targets = [&] {
            std::vector<double> v(n);
            for (double& x : v) x = rng.normal();
            return tensor({n, 1}, std::move(v));
        };
        t.ys = draw_targets();
        t.yq = draw_targets();
    } else {
        const auto draw_labels = [&] {
            std::vector<int> v(n);
            for (int& x : v) x = static_cast<int>(rng.next_below(2));
            return v;
        };
        t.labels_s = draw_labels();
        t.labels_q = draw_labels();
    }
    return t;
}

double block_rel_error(const Tensor& a, const Tensor& b, double floor) {
    double na = 0.0, nb = 0.0, nd = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.vals()[i], y = b.vals()[i];
        na += x * x;
        nb += y * y;
        nd += (x - y) * (x - y);
    }
    return std::sqrt(nd) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace

GradCheckReport gradcheck_suite(std::uint64_t seed, std::size_t trials, double tolerance) {
    if (trials < 1) throw std::invalid_argument("gradcheck: trials must be >= 1");
    if (!(tolerance > 0.0)) throw std::invalid_argument("gradcheck: tolerance must be > 0");

    GradCheckReport report;
    report.trials = trials;
    report.tolerance = tolerance;

    Rng base(seed, 0);
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng rng = base.split(trial);
        const std::size_t path = trial % 4;
        const bool causal = path >= 2;
        const TaskKind kind = path % 2 == 0 ? TaskKind::regression : TaskKind::classification;

        ExperimentConfig cfg;
        cfg.task_kind = kind;
        cfg.mode = causal ? Mode::causal : Mode::plain;
        const std::size_t in_dim =
            kind == TaskKind::regression ? 1 : 2 + rng.next_below(3);
        cfg.encoder_widths = {in_dim, 2 + rng.next_below(3)};
        if (rng.next_below(2) == 1) cfg.encoder_widths.push_back(2 + rng.next_below(2));
        cfg.head_hidden.clear();
        if (rng.next_below(2) == 1) cfg.head_hidden.push_back(2 + rng.next_below(2));
        cfg.n_k = 2 + rng.next_below(3);
        cfg.hidden_act = rng.next_below(2) == 1 ? Activation::tanh : Activation::softplus;
        cfg.causal.lambda1 = 0.2 + rng.uniform();
        cfg.causal.lambda2 = 0.1 + rng.uniform();

        const ModelBundle b0 = init_bundle(cfg, rng.next_u64());
        std::vector<Task> batch;
        for (std::size_t i = 0, count = causal ? 2 : 1; i < count; ++i)
            batch.push_back(random_task(kind, in_dim, 3, rng));
        const CausalOptions opt = causal_options(cfg);

        const auto loss_value = [&](const ParamSet& p) {
            const ModelBundle b = with_params(b0, p);
            if (causal) return causal_support_loss(b, batch, Split::support, opt).scalar();
            return task_prediction_loss(b, batch[0], Split::support, std::nullopt).scalar();
        };

        Graph graph;
        const ModelBundle tracked = with_params(b0, track_all(graph, b0.params));
        const Tensor loss = causal
                                ? causal_support_loss(tracked, batch, Split::support, opt)
                                : task_prediction_loss(tracked, batch[0], Split::support,
                                                       std::nullopt);
        const GradMap exact = grad(loss, tracked.params);
        const GradMap approx = finite_diff_grad(loss_value, b0.params);

        for (const auto& [name, ga] : exact) {
            const double err = block_rel_error(ga, approx.at(name), 1e-8);
            ++report.blocks;
            if (err > report.worst) {
                report.worst = err;
                report.worst_label =
                    "trial " + std::to_string(trial) + " " + kPathNames[path] + " " + name;
            }
            if (err > tolerance) ++report.failures;
        }
    }
    return report;
}

}  // namespace mcl
