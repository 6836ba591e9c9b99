#include "mcl/tasks.hpp"

#include <Eigen/Dense>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mcl {

std::string to_string(TaskKind k) {
    return k == TaskKind::regression ? "regression" : "classification";
}

void validate(const Task& t) {
    if (t.support_count() == 0 || t.query_count() == 0)
        throw std::invalid_argument("task: empty support or query split");
    if (t.xs.shape.size() != 2 || t.xq.shape.size() != 2 || t.xs.shape[1] != t.xq.shape[1])
        throw std::invalid_argument("task: input widths differ across splits (" +
                                    shape_str(t.xs.shape) + " vs " + shape_str(t.xq.shape) + ")");
    if (t.kind == TaskKind::regression) {
        if (t.ys.shape != Shape{t.support_count(), 1} || t.yq.shape != Shape{t.query_count(), 1})
            throw std::invalid_argument("task: regression targets must be [n,1]");
    } else {
        if (t.labels_s.size() != t.support_count() || t.labels_q.size() != t.query_count())
            throw std::invalid_argument("task: label count mismatch");
        for (int y : t.labels_s)
            if (y < 0) throw std::invalid_argument("task: negative class index");
        for (int y : t.labels_q)
            if (y < 0) throw std::invalid_argument("task: negative class index");
    }
}

Task sample_sinusoid_task(const SinusoidSpec& spec, Rng& rng) {
    if (spec.amp_hi < spec.amp_lo || spec.freq_hi < spec.freq_lo || spec.phase_hi < spec.phase_lo)
        throw std::invalid_argument("sinusoid spec: unordered range");
    if (spec.noise_std < 0) throw std::invalid_argument("sinusoid spec: negative noise std");
    const double a = rng.uniform(spec.amp_lo, spec.amp_hi);
    const double w = rng.uniform(spec.freq_lo, spec.freq_hi);
    const double b = rng.uniform(spec.phase_lo, spec.phase_hi);
    auto target = [&](double x) {
        return spec.offset_form ? a * std::sin(w * x) + b : a * std::sin(w * x + b);
    };
    std::vector<double> sx(spec.shots), sy(spec.shots);
    for (std::size_t i = 0; i < spec.shots; ++i) {
        sx[i] = rng.uniform(spec.input_lo, spec.input_hi);
        sy[i] = target(sx[i]) + spec.noise_std * rng.normal();
    }
    std::vector<double> qx(spec.query), qy(spec.query);
    for (std::size_t i = 0; i < spec.query; ++i) {
        double x;
        do {
            x = rng.uniform(spec.input_lo, spec.input_hi);
        } while (std::find(sx.begin(), sx.end(), x) != sx.end());
        qx[i] = x;
        qy[i] = target(x) + spec.noise_std * rng.normal();
    }
    Task t;
    t.kind = TaskKind::regression;
    t.xs = tensor({spec.shots, 1}, std::move(sx));
    t.ys = tensor({spec.shots, 1}, std::move(sy));
    t.xq = tensor({spec.query, 1}, std::move(qx));
    t.yq = tensor({spec.query, 1}, std::move(qy));
    t.meta = {{"amplitude", a}, {"frequency", w}, {"phase", b}};
    validate(t);
    return t;
}

namespace {

// First k entries of a Fisher-Yates shuffle over [0, n).
std::vector<std::size_t> draw_distinct(std::size_t k, std::size_t n, Rng& rng) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

// Balanced +-1 labels (extra +1 on odd counts), order shuffled.
std::vector<int> balanced_pm1(std::size_t n, Rng& rng) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = (i < (n + 1) / 2) ? 1 : -1;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
        std::swap(y[i], y[j]);
    }
    return y;
}

// factors -> observation: x = dictionary * s + obs_noise.
void emit_observation(const FactorWorld& world, const std::vector<double>& s, Rng& rng,
                      std::vector<double>& out_row) {
    const auto& d = world.dictionary.vals();
    const std::size_t dx = world.spec.ambient_dim, nf = world.spec.n_factors;
    for (std::size_t r = 0; r < dx; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < nf; ++c) acc += d[r * nf + c] * s[c];
        out_row[r] = acc + world.spec.obs_noise * rng.normal();
    }
}

struct SplitDraw {
    std::vector<double> x;
    std::vector<int> y01, partner01;
};

// Samples one split of a task: own label balanced, optional partner label
// agreeing with probability q, factor noise everywhere.
SplitDraw draw_split(const FactorWorld& world, const std::vector<std::size_t>& own,
                     const std::vector<std::size_t>* partner, double q, std::size_t n, Rng& rng) {
    const auto& spec = world.spec;
    SplitDraw out;
    out.x.resize(n * spec.ambient_dim);
    out.y01.resize(n);
    std::vector<int> y = balanced_pm1(n, rng);
    std::vector<double> s(spec.n_factors);
    std::vector<double> row(spec.ambient_dim);
    if (partner) out.partner01.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        int yj = 0;
        if (partner) yj = (rng.uniform() < q) ? y[i] : -y[i];
        for (std::size_t k = 0; k < spec.n_factors; ++k) s[k] = spec.factor_noise * rng.normal();
        for (std::size_t k : own) s[k] += spec.mu * y[i];
        if (partner)
            for (std::size_t k : *partner) s[k] += spec.mu * yj;
        emit_observation(world, s, rng, row);
        std::copy(row.begin(), row.end(), out.x.begin() + static_cast<std::ptrdiff_t>(i * spec.ambient_dim));
        out.y01[i] = y[i] > 0 ? 1 : 0;
        if (partner) out.partner01[i] = yj > 0 ? 1 : 0;
    }
    return out;
}

Task assemble_task(const FactorWorld& world, SplitDraw sup, SplitDraw que, std::size_t task_id) {
    const std::size_t dx = world.spec.ambient_dim;
    Task t;
    t.kind = TaskKind::classification;
    t.xs = tensor({sup.y01.size(), dx}, std::move(sup.x));
    t.xq = tensor({que.y01.size(), dx}, std::move(que.x));
    t.labels_s = std::move(sup.y01);
    t.labels_q = std::move(que.y01);
    t.labels_partner_s = std::move(sup.partner01);
    t.labels_partner_q = std::move(que.partner01);
    t.meta = {{"task_id", static_cast<double>(task_id)}};
    validate(t);
    return t;
}

}  // namespace

FactorWorld sample_factor_world(const FactorWorldSpec& spec, Rng& rng) {
    if (spec.ambient_dim < spec.n_factors)
        throw std::invalid_argument("factor world: ambient dim " + std::to_string(spec.ambient_dim) +
                                    " < factor count " + std::to_string(spec.n_factors));
    if (spec.subset_size > spec.n_factors)
        throw std::invalid_argument("factor world: subset larger than factor count");
    if (spec.q < 0.0 || spec.q > 1.0)
        throw std::invalid_argument("factor world: q outside [0,1]");

    Eigen::MatrixXd a(spec.ambient_dim, spec.n_factors);
    for (std::size_t r = 0; r < spec.ambient_dim; ++r)
        for (std::size_t c = 0; c < spec.n_factors; ++c)
            a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd thin = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(spec.ambient_dim),
                                                     static_cast<Eigen::Index>(spec.n_factors));
    Eigen::MatrixXd qmat = qr.householderQ() * thin;
    Eigen::MatrixXd rmat = qr.matrixQR().topRows(static_cast<Eigen::Index>(spec.n_factors));
    for (std::size_t c = 0; c < spec.n_factors; ++c)
        if (rmat(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c)) < 0)
            qmat.col(static_cast<Eigen::Index>(c)) *= -1.0;

    FactorWorld world;
    world.spec = spec;
    std::vector<double> dv(spec.ambient_dim * spec.n_factors);
    for (std::size_t r = 0; r < spec.ambient_dim; ++r)
        for (std::size_t c = 0; c < spec.n_factors; ++c)
            dv[r * spec.n_factors + c] = qmat(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    world.dictionary = tensor({spec.ambient_dim, spec.n_factors}, std::move(dv));

    const std::size_t per_pair = 2 * spec.subset_size;
    if (per_pair * spec.n_pairs <= spec.n_factors) {
        std::vector<std::size_t> pool = draw_distinct(per_pair * spec.n_pairs, spec.n_factors, rng);
        std::size_t at = 0;
        for (std::size_t p = 0; p < spec.n_pairs; ++p) {
            std::vector<std::size_t> si(pool.begin() + static_cast<std::ptrdiff_t>(at),
                                        pool.begin() + static_cast<std::ptrdiff_t>(at + spec.subset_size));
            at += spec.subset_size;
            std::vector<std::size_t> sj(pool.begin() + static_cast<std::ptrdiff_t>(at),
                                        pool.begin() + static_cast<std::ptrdiff_t>(at + spec.subset_size));
            at += spec.subset_size;
            world.pairs.emplace_back(world.subsets.size(), world.subsets.size() + 1);
            world.subsets.push_back(std::move(si));
            world.subsets.push_back(std::move(sj));
        }
    } else {
        for (std::size_t p = 0; p < spec.n_pairs; ++p) {
            std::vector<std::size_t> both = draw_distinct(per_pair, spec.n_factors, rng);
            world.pairs.emplace_back(world.subsets.size(), world.subsets.size() + 1);
            world.subsets.emplace_back(both.begin(), both.begin() + static_cast<std::ptrdiff_t>(spec.subset_size));
            world.subsets.emplace_back(both.begin() + static_cast<std::ptrdiff_t>(spec.subset_size), both.end());
        }
    }
    return world;
}

Task sample_classification_task(const FactorWorld& world, std::size_t task_id, std::size_t shots,
                                std::size_t query, Rng& rng) {
    if (task_id >= world.subsets.size())
        throw std::out_of_range("factor world: unknown task id " + std::to_string(task_id));
    const auto& own = world.subsets[task_id];
    SplitDraw sup = draw_split(world, own, nullptr, 0.0, shots, rng);
    SplitDraw que = draw_split(world, own, nullptr, 0.0, query, rng);
    return assemble_task(world, std::move(sup), std::move(que), task_id);
}

std::vector<Task> make_confounded_batch(const FactorWorld& world,
                                        const std::vector<std::pair<std::size_t, std::size_t>>& pair_list,
                                        double q, Rng& rng) {
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("confounded batch: q outside [0,1]");
    std::vector<Task> batch;
    batch.reserve(pair_list.size() * 2);
    for (auto [i, j] : pair_list) {
        if (i >= world.subsets.size() || j >= world.subsets.size())
            throw std::out_of_range("confounded batch: pair references unknown task");
        for (auto [own_id, partner_id] : {std::pair{i, j}, std::pair{j, i}}) {
            const auto& own = world.subsets[own_id];
            const auto& partner = world.subsets[partner_id];
            SplitDraw sup = draw_split(world, own, &partner, q, world.spec.shots, rng);
            SplitDraw que = draw_split(world, own, &partner, q, world.spec.query, rng);
            batch.push_back(assemble_task(world, std::move(sup), std::move(que), own_id));
        }
    }
    return batch;
}

JointDataset sample_theorem1_dataset(const Theorem1Spec& spec, std::size_t n, double q, Rng& rng) {
    if (n == 0) throw std::invalid_argument("theorem1 dataset: n must be >= 1");
    JointDataset d;
    d.d_i = spec.d_i;
    d.d_j = spec.d_j;
    d.z.resize(n * (spec.d_i + spec.d_j));
    d.y_i.resize(n);
    d.y_j.resize(n);
    const std::size_t w = spec.d_i + spec.d_j;
    for (std::size_t r = 0; r < n; ++r) {
        double yi = rng.uniform() < 0.5 ? 1.0 : -1.0;
        double yj = rng.uniform() < q ? yi : -yi;
        d.y_i[r] = yi;
        d.y_j[r] = yj;
        double* row = d.z.data() + r * w;
        for (std::size_t k = 0; k < spec.d_i; ++k)
            row[k] = spec.mu_i * yi + spec.sigma_i * rng.normal();
        for (std::size_t k = 0; k < spec.d_j; ++k)
            row[spec.d_i + k] = spec.mu_j * yj + spec.sigma_j * rng.normal();
    }
    return d;
}

}  // namespace mcl
