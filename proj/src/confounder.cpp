#include "mcl/confounder.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include "mcl/causal.hpp"
#include "mcl/meta.hpp"
#include "mcl/rng.hpp"

namespace mcl {

namespace {

double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// 95% half-width with the population (ddof 0) standard deviation.
double half_width(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    const double n = static_cast<double>(v.size());
    return 1.96 * std::sqrt(s / n) / std::sqrt(n);
}

}  // namespace

std::vector<double> population_lsq_weights(const Theorem1Spec& spec, double q) {
    if (spec.d_i < 1 || spec.d_j < 1)
        throw std::invalid_argument("population weights: both blocks need at least one coordinate");
    if (!(spec.sigma_i > 0.0) || !(spec.sigma_j > 0.0))
        throw std::invalid_argument("population weights: factor noise std must be positive");
    if (!(q >= 0.0 && q <= 1.0))
        throw std::invalid_argument("population weights: q must lie in [0, 1]");

    // Cov(z) has mu_i^2 * ones + sigma_i^2 * I on the own block, the partner
    // analogue on its block, and mu_i * mu_j * rho * ones across, with
    // rho = E[y_i y_j] = 2q - 1; Cov(z, y_i) is mu_i on the own block and
    // mu_j * rho on the partner block. A block-constant ansatz solves it.
    const double rho = 2.0 * q - 1.0;
    const double di = static_cast<double>(spec.d_i);
    const double dj = static_cast<double>(spec.d_j);
    const double a11 = spec.mu_i * spec.mu_i * di + spec.sigma_i * spec.sigma_i;
    const double a12 = spec.mu_i * spec.mu_j * rho * dj;
    const double a21 = spec.mu_i * spec.mu_j * rho * di;
    const double a22 = spec.mu_j * spec.mu_j * dj + spec.sigma_j * spec.sigma_j;
    const double c1 = spec.mu_i;
    const double c2 = spec.mu_j * rho;
    const double det = a11 * a22 - a12 * a21;  // > 0: the covariance is positive definite

    // rho = 0 or mu_j = 0 makes a21 and c2 signed zeros, so the partner
    // coefficient comes out exactly 0.0 rather than merely small.
    const double own = (c1 * a22 - a12 * c2) / det;
    const double partner = (a11 * c2 - a21 * c1) / det;

    std::vector<double> w(spec.d_i + spec.d_j, own);
    std::fill(w.begin() + static_cast<std::ptrdiff_t>(spec.d_i), w.end(), partner);
    return w;
}

std::vector<double> empirical_lsq_weights(const JointDataset& data, std::optional<double> ridge) {
    const std::size_t d = data.width();
    const std::size_t n = data.rows();
    if (d == 0) throw std::invalid_argument("empirical weights: dataset width is zero");
    if (n == 0) throw std::invalid_argument("empirical weights: dataset has no rows");
    if (data.z.size() != n * d)
        throw std::invalid_argument("empirical weights: z size does not match rows x width");
    if (ridge && !(*ridge >= 0.0))
        throw std::invalid_argument("empirical weights: ridge must be >= 0");

    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> z(data.z.data(), static_cast<Eigen::Index>(n),
                               static_cast<Eigen::Index>(d));
    Eigen::Map<const Eigen::VectorXd> y(data.y_i.data(), static_cast<Eigen::Index>(n));

    Eigen::MatrixXd gram = z.transpose() * z;
    Eigen::VectorXd rhs = z.transpose() * y;
    const double eps = ridge ? *ridge : 1e-8 * gram.trace() / static_cast<double>(d);
    gram.diagonal().array() += eps;

    Eigen::LDLT<Eigen::MatrixXd> solver(gram);
    Eigen::VectorXd w = solver.solve(rhs);
    if (solver.info() != Eigen::Success || !w.allFinite())
        throw std::runtime_error("empirical weights: singular normal equations");
    return std::vector<double>(w.data(), w.data() + d);
}

std::string Theorem1Report::setting() const {
    std::ostringstream os;
    os << "d=(" << spec.d_i << "," << spec.d_j << ") mu=(" << spec.mu_i << "," << spec.mu_j
       << ") sigma=(" << spec.sigma_i << "," << spec.sigma_j << ") q=" << q << " n=";
    if (population)
        os << "population";
    else
        os << n;
    return os.str();
}

std::vector<Theorem1Report> theorem1_experiment(const Theorem1Config& cfg) {
    if (cfg.q_grid.empty()) throw std::invalid_argument("theorem1: q_grid is empty");
    if (cfg.n_grid.empty()) throw std::invalid_argument("theorem1: n_grid is empty");
    for (double q : cfg.q_grid)
        if (!(q >= 0.0 && q <= 1.0))
            throw std::invalid_argument("theorem1: q_grid entries must lie in [0, 1]");
    if (cfg.resamples < 1) throw std::invalid_argument("theorem1: resamples must be >= 1");
    if (!(cfg.spec.sigma_i > 0.0) || !(cfg.spec.sigma_j > 0.0))
        throw std::invalid_argument("theorem1: factor noise std must be positive");

    Rng rng(cfg.seed, 4);
    std::vector<Theorem1Report> reports;
    reports.reserve(cfg.q_grid.size() * cfg.n_grid.size());
    for (double q : cfg.q_grid) {
        for (std::size_t n : cfg.n_grid) {
            Theorem1Report rep;
            rep.spec = cfg.spec;
            rep.q = q;
            rep.n = n;
            rep.population = n == 0;

            std::vector<double> w;
            if (n == 0) {
                w = population_lsq_weights(cfg.spec, q);
            } else {
                std::vector<std::pair<double, std::vector<double>>> fits;
                fits.reserve(cfg.resamples);
                for (std::size_t r = 0; r < cfg.resamples; ++r) {
                    JointDataset ds = sample_theorem1_dataset(cfg.spec, n, q, rng);
                    std::vector<double> wr = empirical_lsq_weights(ds);
                    std::vector<double> tail(wr.begin() + static_cast<std::ptrdiff_t>(cfg.spec.d_i),
                                             wr.end());
                    fits.emplace_back(l2_norm(tail), std::move(wr));
                }
                std::sort(fits.begin(), fits.end(),
                          [](const auto& a, const auto& b) { return a.first < b.first; });
                w = std::move(fits[(fits.size() - 1) / 2].second);
            }

            rep.w_causal.assign(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(cfg.spec.d_i));
            rep.w_noncausal.assign(w.begin() + static_cast<std::ptrdiff_t>(cfg.spec.d_i), w.end());
            rep.noncausal_norm = l2_norm(rep.w_noncausal);
            rep.noncausal_zero = rep.noncausal_norm == 0.0;
            reports.push_back(std::move(rep));
        }
    }
    return reports;
}

double noncausal_weight_mass(const ModelBundle& b, const FactorWorld& world, const Task& task,
                             double fd_step) {
    if (!(fd_step > 0.0)) throw std::invalid_argument("noncausal mass: fd_step must be > 0");
    auto it = task.meta.find("task_id");
    if (it == task.meta.end())
        throw std::invalid_argument("noncausal mass: task carries no task_id");
    const auto id = static_cast<std::size_t>(it->second);
    std::optional<std::size_t> partner;
    for (auto [i, j] : world.pairs) {
        if (i == id) partner = j;
        if (j == id) partner = i;
    }
    if (!partner)
        throw std::out_of_range("noncausal mass: task id " + std::to_string(id) +
                                " is not in any pair of this world");
    if (task.input_dim() != world.spec.ambient_dim)
        throw std::invalid_argument("noncausal mass: task width does not match the world");

    const std::optional<Tensor> weights = prediction_weights(b, task);
    const std::size_t rows = task.query_count();
    const std::size_t width = task.input_dim();
    const std::vector<double>& base = task.xq.vals();
    const std::vector<double>& dict = world.dictionary.vals();
    const std::size_t n_factors = world.spec.n_factors;

    const auto mean_margin = [&](std::vector<double> pts) {
        Tensor out = predict(b, tensor({rows, width}, std::move(pts)), weights);
        const std::vector<double>& v = out.vals();
        const std::size_t cols = out.shape[1];
        double sum = 0.0;
        for (std::size_t r = 0; r < rows; ++r)
            sum += cols == 2 ? v[r * 2 + 1] - v[r * 2] : v[r * cols];
        return sum / static_cast<double>(rows);
    };

    double sumsq = 0.0;
    for (std::size_t k : world.subsets[*partner]) {
        std::vector<double> plus(base), minus(base);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < width; ++c) {
                const double d = fd_step * dict[c * n_factors + k];
                plus[r * width + c] += d;
                minus[r * width + c] -= d;
            }
        }
        const double g = (mean_margin(std::move(plus)) - mean_margin(std::move(minus))) /
                         (2.0 * fd_step);
        sumsq += g * g;
    }
    return std::sqrt(sumsq);
}

BatchSource confounded_source(const FactorWorld& world, double q) {
    if (world.pairs.empty())
        throw std::invalid_argument("confounded source: world has no pairs");
    return [world, q](std::size_t n, Rng& rng) {
        std::vector<Task> batch;
        batch.reserve(n);
        while (batch.size() < n) {
            const auto& pair = world.pairs[rng.next_below(world.pairs.size())];
            std::vector<Task> two = make_confounded_batch(world, {pair}, q, rng);
            for (Task& t : two) {
                if (batch.size() == n) break;
                batch.push_back(std::move(t));
            }
        }
        return batch;
    };
}

namespace {

// Training source for the sweep: every batch slot draws one directed task
// independently (a pair plus an orientation), so the chance that a task and
// its confounding partner land in the same batch grows with the batch size.
// That chance is the moving part of the B-versus-2B comparison; whole-pair
// batches would pin it at 1 for every size.
BatchSource oriented_source(const FactorWorld& world, double q) {
    if (world.pairs.empty())
        throw std::invalid_argument("oriented source: world has no pairs");
    return [world, q](std::size_t n, Rng& rng) {
        std::vector<Task> batch;
        batch.reserve(n);
        while (batch.size() < n) {
            const auto& pair = world.pairs[rng.next_below(world.pairs.size())];
            const std::size_t keep = rng.next_below(2);
            std::vector<Task> two = make_confounded_batch(world, {pair}, q, rng);
            batch.push_back(std::move(two[keep]));
        }
        return batch;
    };
}

}  // namespace

SweepReport batch_size_sweep(const ExperimentConfig& cfg) {
    validate(cfg);
    if (cfg.task_kind != TaskKind::classification)
        throw std::invalid_argument("batch size sweep: needs classification tasks");
    if (cfg.world.q == 0.5)
        throw std::invalid_argument("batch size sweep: world.q = 0.5 has no confounder to study");

    std::vector<Mode> modes;
    if (cfg.sweep.modes == "plain")
        modes = {Mode::plain};
    else if (cfg.sweep.modes == "causal")
        modes = {Mode::causal};
    else
        modes = {Mode::plain, Mode::causal};
    const std::array<std::size_t, 2> sizes{cfg.sweep.batch, 2 * cfg.sweep.batch};

    SweepReport report;
    for (std::size_t s = 0; s < cfg.sweep.seeds; ++s) {
        const std::uint64_t run_seed = cfg.seed + s;
        Rng world_rng(run_seed, 3);
        const FactorWorld world = sample_factor_world(cfg.world, world_rng);

        // One evaluation suite per seed, shared by every cell of the seed so
        // batch size and mode are the only moving parts of the comparison.
        Rng eval_rng(run_seed, 2);
        std::vector<Task> heldin;
        for (std::size_t p = 0; p < cfg.sweep.eval_pairs; ++p) {
            const auto& pair = world.pairs[eval_rng.next_below(world.pairs.size())];
            std::vector<Task> two = make_confounded_batch(world, {pair}, cfg.world.q, eval_rng);
            for (Task& t : two) heldin.push_back(std::move(t));
        }
        std::vector<Task> heldout;
        for (std::size_t t = 0; t < cfg.sweep.eval_holdout; ++t) {
            const std::size_t id = eval_rng.next_below(world.subsets.size());
            heldout.push_back(sample_classification_task(world, id, cfg.world.shots,
                                                         cfg.world.query, eval_rng));
        }

        const BatchSource source = oriented_source(world, cfg.world.q);
        for (Mode mode : modes) {
            for (std::size_t size : sizes) {
                ExperimentConfig run = cfg;
                run.mode = mode;
                run.n_tr = size;
                run.iterations = cfg.sweep.iterations;
                run.seed = run_seed;
                const TrainResult trained = meta_train(run, source, false);
                const EvalReport in = meta_evaluate(trained.bundle, heldin, run);
                const EvalReport out = meta_evaluate(trained.bundle, heldout, run);
                report.cells.push_back({mode, size, run_seed, in.mean_score,
                                        in.half_width_score, out.mean_score,
                                        out.half_width_score});
            }
        }
    }

    for (Mode mode : modes) {
        for (std::size_t size : sizes) {
            std::vector<double> in, out;
            for (const SweepCell& cell : report.cells) {
                if (cell.mode != mode || cell.batch_size != size) continue;
                in.push_back(cell.heldin_accuracy);
                out.push_back(cell.heldout_accuracy);
            }
            report.aggregates.push_back({mode, size, in.size(), mean_of(in), half_width(in),
                                         mean_of(out), half_width(out)});
        }
    }
    return report;
}

}  // namespace mcl
