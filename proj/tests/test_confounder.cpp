#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "mcl/confounder.hpp"
#include "mcl/meta.hpp"

using namespace mcl;

namespace {

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

double l2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::vector<double> l2_diff(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

// Independent oracle: materialize the full joint covariance and cross moment
// from the generative model's moments and solve them densely.
std::vector<double> dense_population_solve(const Theorem1Spec& s, double q) {
    const std::size_t d = s.d_i + s.d_j;
    const double rho = 2.0 * q - 1.0;
    Eigen::MatrixXd cov(d, d);
    Eigen::VectorXd rhs(d);
    for (std::size_t r = 0; r < d; ++r) {
        const bool own_r = r < s.d_i;
        const double mu_r = own_r ? s.mu_i : s.mu_j;
        const double sig_r = own_r ? s.sigma_i : s.sigma_j;
        rhs(static_cast<Eigen::Index>(r)) = own_r ? s.mu_i : s.mu_j * rho;
        for (std::size_t c = 0; c < d; ++c) {
            const bool own_c = c < s.d_i;
            const double mu_c = own_c ? s.mu_i : s.mu_j;
            double entry = mu_r * mu_c * (own_r == own_c ? 1.0 : rho);
            if (r == c) entry += sig_r * sig_r;
            cov(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = entry;
        }
    }
    Eigen::VectorXd w = cov.ldlt().solve(rhs);
    return std::vector<double>(w.data(), w.data() + d);
}

Theorem1Spec spec_of(std::size_t d_i, std::size_t d_j, double mu_i, double mu_j, double sigma_i,
                     double sigma_j) {
    Theorem1Spec s;
    s.d_i = d_i;
    s.d_j = d_j;
    s.mu_i = mu_i;
    s.mu_j = mu_j;
    s.sigma_i = sigma_i;
    s.sigma_j = sigma_j;
    return s;
}

FactorWorldSpec small_world_spec(std::size_t ambient, double q) {
    FactorWorldSpec w;
    w.ambient_dim = ambient;
    w.n_factors = ambient;
    w.subset_size = 1;
    w.n_pairs = 2;
    w.mu = 2.0;
    w.factor_noise = 1.0;
    w.obs_noise = 0.1;
    w.q = q;
    w.shots = 5;
    w.query = 10;
    return w;
}

ExperimentConfig small_classification_cfg(std::size_t ambient, double q) {
    ExperimentConfig cfg;
    cfg.task_kind = TaskKind::classification;
    cfg.mode = Mode::plain;
    cfg.encoder_widths = {ambient, 16};
    cfg.head_hidden = {};
    cfg.hidden_act = Activation::relu;
    cfg.world = small_world_spec(ambient, q);
    cfg.n_tr = 2;
    cfg.inner_lr = 0.05;
    cfg.inner_steps = 1;
    cfg.outer_lr = 0.01;
    cfg.iterations = 250;
    return cfg;
}

bool cells_equal(const SweepCell& a, const SweepCell& b) {
    return a.mode == b.mode && a.batch_size == b.batch_size && a.seed == b.seed &&
           a.heldin_accuracy == b.heldin_accuracy && a.heldin_half_width == b.heldin_half_width &&
           a.heldout_accuracy == b.heldout_accuracy &&
           a.heldout_half_width == b.heldout_half_width;
}

}  // namespace

TEST_CASE("population read-out matches a dense covariance solve") {
    const std::vector<std::pair<Theorem1Spec, double>> settings = {
        {spec_of(4, 4, 1.0, 1.0, 1.0, 1.0), 0.8},
        {spec_of(3, 5, 1.5, 0.7, 0.9, 1.3), 0.35},
        {spec_of(2, 6, 0.5, 2.0, 2.0, 0.6), 0.97},
        {spec_of(1, 1, 1.0, 1.0, 1.0, 1.0), 0.0},
    };
    for (const auto& [spec, q] : settings) {
        CAPTURE(q);
        const std::vector<double> w = population_lsq_weights(spec, q);
        const std::vector<double> oracle = dense_population_solve(spec, q);
        REQUIRE(w.size() == spec.d_i + spec.d_j);
        REQUIRE(oracle.size() == w.size());
        for (std::size_t i = 0; i < w.size(); ++i) {
            CAPTURE(i);
            CHECK(close(w[i], oracle[i], 1e-12));
        }
        // The dense solve lands on a block-constant vector, confirming the
        // symmetry the closed form assumes.
        for (std::size_t i = 1; i < spec.d_i; ++i) CHECK(close(oracle[i], oracle[0], 1e-10));
        for (std::size_t i = spec.d_i + 1; i < w.size(); ++i)
            CHECK(close(oracle[i], oracle[spec.d_i], 1e-10));
    }
}

TEST_CASE("population read-out zeroes the partner block exactly when labels decouple") {
    // Independent labels: every partner coordinate is exactly 0.0, not small.
    const std::vector<double> at_half = population_lsq_weights(spec_of(4, 4, 1.0, 1.0, 1.0, 1.0), 0.5);
    for (std::size_t i = 4; i < 8; ++i) CHECK(at_half[i] == 0.0);

    // Signed means change nothing about the exact zero.
    const std::vector<double> signed_mu = population_lsq_weights(spec_of(3, 2, -1.3, 0.7, 1.0, 2.0), 0.5);
    for (std::size_t i = 3; i < 5; ++i) CHECK(signed_mu[i] == 0.0);

    // A meanless partner block is unusable at any correlation.
    const std::vector<double> meanless = population_lsq_weights(spec_of(4, 4, 1.0, 0.0, 1.0, 1.0), 0.9);
    for (std::size_t i = 4; i < 8; ++i) CHECK(meanless[i] == 0.0);
    CHECK(meanless[0] == doctest::Approx(1.0 / 5.0).epsilon(1e-12));

    // Away from q = 0.5 with a live partner mean the block is non-zero.
    const std::vector<double> live = population_lsq_weights(spec_of(4, 4, 1.0, -2.0, 1.0, 1.0), 0.9);
    CHECK(std::abs(live[4]) > 0.0);

    CHECK_THROWS_WITH_AS(population_lsq_weights(spec_of(4, 4, 1.0, 1.0, 0.0, 1.0), 0.5),
                         doctest::Contains("factor noise"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(population_lsq_weights(spec_of(4, 4, 1.0, 1.0, 1.0, 1.0), 1.5),
                         doctest::Contains("[0, 1]"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(population_lsq_weights(spec_of(0, 4, 1.0, 1.0, 1.0, 1.0), 0.5),
                         doctest::Contains("at least one coordinate"), std::invalid_argument);
}

TEST_CASE("population read-out puts visible weight on a correlated partner block") {
    // d_i = d_j = 4, unit means and noises, agreement 0.8. The reduced system
    // is 5a + 2.4b = 1, 2.4a + 5b = 0.6, so a = 3.56/19.24 and b = 0.6/19.24.
    const Theorem1Spec spec = spec_of(4, 4, 1.0, 1.0, 1.0, 1.0);
    const std::vector<double> w = population_lsq_weights(spec, 0.8);
    for (std::size_t i = 0; i < 4; ++i) CHECK(close(w[i], 3.56 / 19.24, 1e-12));
    for (std::size_t i = 4; i < 8; ++i) CHECK(close(w[i], 0.6 / 19.24, 1e-12));

    std::vector<double> partner(w.begin() + 4, w.end());
    CHECK(l2(partner) > 0.05);
    CHECK(l2(partner) == doctest::Approx(2.0 * 0.6 / 19.24).epsilon(1e-12));

    // Agreement and disagreement at the same distance from 0.5 mirror each
    // other: same own block, opposite partner block.
    const std::vector<double> lo = population_lsq_weights(spec, 0.2);
    const std::vector<double> hi = population_lsq_weights(spec, 0.8);
    for (std::size_t i = 0; i < 4; ++i) CHECK(close(lo[i], hi[i], 1e-12));
    for (std::size_t i = 4; i < 8; ++i) {
        CHECK(close(lo[i], -hi[i], 1e-12));
        CHECK(lo[i] < 0.0);
        CHECK(hi[i] > 0.0);
    }
}

TEST_CASE("empirical read-out solves a tiny system exactly") {
    // One feature, two points, mirrored: slope (2*1 + (-2)*(-1)) / 8 = 0.5.
    JointDataset tiny;
    tiny.d_i = 1;
    tiny.d_j = 0;
    tiny.z = {2.0, -2.0};
    tiny.y_i = {1.0, -1.0};
    tiny.y_j = {1.0, -1.0};
    const std::vector<double> exact = empirical_lsq_weights(tiny, 0.0);
    REQUIRE(exact.size() == 1);
    CHECK(exact[0] == 0.5);

    // The default ridge only shrinks it by a relative 1e-8.
    const std::vector<double> ridged = empirical_lsq_weights(tiny);
    CHECK(ridged[0] < 0.5);
    CHECK(ridged[0] == doctest::Approx(0.5).epsilon(1e-7));

    JointDataset empty;
    empty.d_i = 1;
    CHECK_THROWS_WITH_AS(empirical_lsq_weights(empty), doctest::Contains("no rows"),
                         std::invalid_argument);
    JointDataset zero_width;
    zero_width.y_i = {1.0};
    CHECK_THROWS_WITH_AS(empirical_lsq_weights(zero_width), doctest::Contains("width is zero"),
                         std::invalid_argument);
    JointDataset ragged = tiny;
    ragged.z.push_back(3.0);
    CHECK_THROWS_WITH_AS(empirical_lsq_weights(ragged), doctest::Contains("does not match"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(empirical_lsq_weights(tiny, -1.0), doctest::Contains("ridge"),
                         std::invalid_argument);
}

TEST_CASE("empirical read-out approaches the population solution on a million samples") {
    const Theorem1Spec spec = spec_of(4, 4, 1.0, 1.0, 1.0, 1.0);
    const std::vector<double> pop = population_lsq_weights(spec, 0.8);

    Rng rng(77, 4);
    const JointDataset big = sample_theorem1_dataset(spec, 1000000, 0.8, rng);
    const std::vector<double> emp = empirical_lsq_weights(big);
    REQUIRE(emp.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CAPTURE(i);
        CHECK(std::abs(emp[i] - pop[i]) <= 1e-2);
    }
    std::vector<double> partner(emp.begin() + 4, emp.end());
    std::vector<double> pop_partner(pop.begin() + 4, pop.end());
    CHECK(std::abs(l2(partner) - l2(pop_partner)) <= 1e-2);

    // Uncorrelated labels: only sampling noise reaches the partner block.
    Rng rng_half(78, 4);
    const JointDataset half = sample_theorem1_dataset(spec, 1000000, 0.5, rng_half);
    const std::vector<double> emp_half = empirical_lsq_weights(half);
    std::vector<double> partner_half(emp_half.begin() + 4, emp_half.end());
    CHECK(l2(partner_half) <= 0.01);
    CHECK(l2(partner_half) > 0.0);
}

TEST_CASE("small samples fabricate partner weight that more data removes") {
    // 50 samples with independent labels: the median fitted partner norm over
    // 1000 resamples stays clearly away from the population value of zero.
    Theorem1Config fifty;
    fifty.q_grid = {0.5};
    fifty.n_grid = {50};
    fifty.resamples = 1000;
    fifty.seed = 3;
    const std::vector<Theorem1Report> reps = theorem1_experiment(fifty);
    REQUIRE(reps.size() == 1);
    CHECK(reps[0].noncausal_norm > 0.02);
    CHECK_FALSE(reps[0].noncausal_zero);
    CHECK_FALSE(reps[0].population);

    // And the whole fitted vector walks into the population solution as the
    // sample grows by decades.
    Theorem1Config conv;
    conv.q_grid = {0.8};
    conv.n_grid = {1000, 10000, 100000, 1000000};
    conv.resamples = 3;
    conv.seed = 5;
    const std::vector<double> pop = population_lsq_weights(conv.spec, 0.8);
    const std::vector<Theorem1Report> rows = theorem1_experiment(conv);
    REQUIRE(rows.size() == 4);
    std::vector<double> dist;
    for (const Theorem1Report& r : rows) {
        std::vector<double> w = r.w_causal;
        w.insert(w.end(), r.w_noncausal.begin(), r.w_noncausal.end());
        dist.push_back(l2(l2_diff(w, pop)));
    }
    for (std::size_t i = 1; i < dist.size(); ++i) {
        CAPTURE(i);
        CHECK(dist[i] < dist[i - 1]);
    }
}

TEST_CASE("grid experiment lays out reports with verdict flags") {
    Theorem1Config cfg;
    cfg.q_grid = {0.2, 0.5, 0.8};
    cfg.n_grid = {0, 200};
    cfg.resamples = 9;
    cfg.seed = 11;
    const std::vector<Theorem1Report> reps = theorem1_experiment(cfg);
    REQUIRE(reps.size() == 6);

    for (std::size_t qi = 0; qi < 3; ++qi) {
        for (std::size_t ni = 0; ni < 2; ++ni) {
            const Theorem1Report& r = reps[qi * 2 + ni];
            CHECK(r.q == cfg.q_grid[qi]);
            CHECK(r.n == cfg.n_grid[ni]);
            CHECK(r.population == (r.n == 0));
            CHECK(r.w_causal.size() + r.w_noncausal.size() == r.spec.d_i + r.spec.d_j);
            CHECK(r.noncausal_norm == l2(r.w_noncausal));
            if (r.population)
                CHECK(r.noncausal_zero == (r.q == 0.5));
            else
                CHECK(r.noncausal_norm > 0.0);  // finite samples always fit some phantom weight
        }
    }
    CHECK(reps[0].setting() == "d=(4,4) mu=(1,1) sigma=(1,1) q=0.2 n=population");
    CHECK(reps[1].setting() == "d=(4,4) mu=(1,1) sigma=(1,1) q=0.2 n=200");

    // Population rows at mirrored agreement have equal partner norms.
    CHECK(close(reps[0].noncausal_norm, reps[4].noncausal_norm, 1e-12));

    // Reruns are bit-identical.
    const std::vector<Theorem1Report> again = theorem1_experiment(cfg);
    REQUIRE(again.size() == reps.size());
    for (std::size_t i = 0; i < reps.size(); ++i) {
        CHECK(again[i].noncausal_norm == reps[i].noncausal_norm);
        CHECK(again[i].w_causal == reps[i].w_causal);
        CHECK(again[i].w_noncausal == reps[i].w_noncausal);
    }

    Theorem1Config single;
    single.q_grid = {0.5};
    single.n_grid = {0};
    const std::vector<Theorem1Report> one = theorem1_experiment(single);
    REQUIRE(one.size() == 1);
    CHECK(one[0].population);
    CHECK(one[0].noncausal_zero);

    Theorem1Config bad = cfg;
    bad.q_grid.clear();
    CHECK_THROWS_WITH_AS(theorem1_experiment(bad), doctest::Contains("q_grid"),
                         std::invalid_argument);
    bad = cfg;
    bad.n_grid.clear();
    CHECK_THROWS_WITH_AS(theorem1_experiment(bad), doctest::Contains("n_grid"),
                         std::invalid_argument);
    bad = cfg;
    bad.resamples = 0;
    CHECK_THROWS_WITH_AS(theorem1_experiment(bad), doctest::Contains("resamples"),
                         std::invalid_argument);
    bad = cfg;
    bad.q_grid = {1.2};
    CHECK_THROWS_WITH_AS(theorem1_experiment(bad), doctest::Contains("[0, 1]"),
                         std::invalid_argument);
    bad = cfg;
    bad.spec.sigma_j = 0.0;
    CHECK_THROWS_WITH_AS(theorem1_experiment(bad), doctest::Contains("factor noise"),
                         std::invalid_argument);
}

TEST_CASE("partner-direction mass vanishes for input-independent models") {
    ExperimentConfig cfg = small_classification_cfg(6, 0.8);
    cfg.encoder_widths = {6, 4};
    Rng world_rng(40, 3);
    const FactorWorld world = sample_factor_world(cfg.world, world_rng);
    Rng task_rng(40, 2);
    const Task probe = sample_classification_task(world, 0, 5, 10, task_rng);

    const ModelBundle base = init_bundle(cfg, 17);

    // Head weights and bias zeroed: the output is identically zero.
    ParamSet zeroed = base.params;
    zeroed.set("h.w0", zeros({4, 2}));
    zeroed.set("h.b0", zeros({1, 2}));
    CHECK(noncausal_weight_mass(with_params(base, zeroed), world, probe) == 0.0);

    // Nonzero constant output: still no input dependence, mass exactly zero.
    ParamSet constant = base.params;
    constant.set("h.w0", zeros({4, 2}));
    constant.set("h.b0", tensor({1, 2}, {0.3, -0.2}));
    CHECK(noncausal_weight_mass(with_params(base, constant), world, probe) == 0.0);

    // A live model has non-negative finite mass, computed deterministically,
    // in both modes.
    const double live = noncausal_weight_mass(base, world, probe);
    CHECK(live >= 0.0);
    CHECK(std::isfinite(live));
    CHECK(noncausal_weight_mass(base, world, probe) == live);

    ExperimentConfig causal_cfg = cfg;
    causal_cfg.mode = Mode::causal;
    causal_cfg.n_k = 4;
    const ModelBundle causal_bundle = init_bundle(causal_cfg, 18);
    const double causal_mass = noncausal_weight_mass(causal_bundle, world, probe);
    CHECK(causal_mass >= 0.0);
    CHECK(std::isfinite(causal_mass));

    CHECK_THROWS_WITH_AS(noncausal_weight_mass(base, world, probe, 0.0),
                         doctest::Contains("fd_step"), std::invalid_argument);
    Task no_meta = probe;
    no_meta.meta.clear();
    CHECK_THROWS_WITH_AS(noncausal_weight_mass(base, world, no_meta),
                         doctest::Contains("task_id"), std::invalid_argument);
    FactorWorld unpaired = world;
    unpaired.pairs.erase(unpaired.pairs.begin());
    CHECK_THROWS_WITH_AS(noncausal_weight_mass(base, unpaired, probe),
                         doctest::Contains("not in any pair"), std::out_of_range);
    Rng other_rng(41, 3);
    const FactorWorld wide = sample_factor_world(small_world_spec(8, 0.8), other_rng);
    CHECK_THROWS_WITH_AS(noncausal_weight_mass(base, wide, probe),
                         doctest::Contains("does not match the world"), std::invalid_argument);
}

TEST_CASE("partner-direction mass matches an analytic linear probe") {
    // Both nets are single dense layers, so the margin is linear in the input
    // and its gradient is the constant vector W_g (W_h[:,1] - W_h[:,0]). The
    // mass must equal the norm of that vector's projections onto the
    // partner's dictionary columns.
    ExperimentConfig cfg = small_classification_cfg(6, 0.8);
    cfg.encoder_widths = {6, 4};
    cfg.hidden_act = Activation::identity;  // the encoder ends in its hidden activation
    const ModelBundle b = init_bundle(cfg, 23);
    Rng world_rng(42, 3);
    const FactorWorld world = sample_factor_world(cfg.world, world_rng);
    Rng task_rng(42, 2);

    const std::vector<double>& wg = b.params.at("g.w0").vals();  // [6,4]
    const std::vector<double>& wh = b.params.at("h.w0").vals();  // [4,2]
    std::vector<double> grad_x(6, 0.0);
    for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t k = 0; k < 4; ++k) grad_x[c] += wg[c * 4 + k] * (wh[k * 2 + 1] - wh[k * 2]);

    const std::vector<double>& dict = world.dictionary.vals();  // [6,6]
    for (std::size_t task_id = 0; task_id < world.subsets.size(); ++task_id) {
        CAPTURE(task_id);
        const Task probe = sample_classification_task(world, task_id, 4, 7, task_rng);
        std::size_t partner = 0;
        for (auto [i, j] : world.pairs) {
            if (i == task_id) partner = j;
            if (j == task_id) partner = i;
        }
        double expected_sq = 0.0;
        for (std::size_t k : world.subsets[partner]) {
            double proj = 0.0;
            for (std::size_t c = 0; c < 6; ++c) proj += dict[c * 6 + k] * grad_x[c];
            expected_sq += proj * proj;
        }
        const double mass = noncausal_weight_mass(b, world, probe);
        CHECK(close(mass, std::sqrt(expected_sq), 1e-8));
    }
}

TEST_CASE("training against a stronger confounder leaves more partner-direction mass") {
    // Same architecture, same seeds, same probe draws; only the label
    // agreement during training differs. The strongly confounded runs should
    // end with more sensitivity along the partner directions on average.
    const auto trained_mass = [](double q, std::uint64_t seed) {
        ExperimentConfig cfg = small_classification_cfg(8, q);
        cfg.seed = seed;
        Rng world_rng(seed, 3);
        const FactorWorld world = sample_factor_world(cfg.world, world_rng);
        const TrainResult res = meta_train(cfg, confounded_source(world, q), false);
        Rng eval_rng(seed, 2);
        double sum = 0.0;
        for (std::size_t id = 0; id < world.subsets.size(); ++id) {
            const Task probe = sample_classification_task(world, id, 5, 10, eval_rng);
            sum += noncausal_weight_mass(res.bundle, world, probe);
        }
        return sum / static_cast<double>(world.subsets.size());
    };

    double strong = 0.0, none = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        strong += trained_mass(0.9, seed);
        none += trained_mass(0.5, seed);
    }
    strong /= 10.0;
    none /= 10.0;
    CAPTURE(strong);
    CAPTURE(none);
    CHECK(strong > none);
    CHECK(none > 0.0);
}

TEST_CASE("confounded source fills batches with directed pairs") {
    Rng world_rng(50, 3);
    const FactorWorld world = sample_factor_world(small_world_spec(8, 0.75), world_rng);
    const BatchSource source = confounded_source(world, 0.75);

    Rng draw(50, 1);
    const std::vector<Task> batch = source(5, draw);
    REQUIRE(batch.size() == 5);
    for (const Task& t : batch) {
        CHECK(t.kind == TaskKind::classification);
        CHECK_FALSE(t.labels_partner_s.empty());  // the confounded marker
        CHECK(t.meta.count("task_id") == 1);
    }
    // Tasks arrive as direction pairs: slots (0,1) and (2,3) hold the two
    // orientations of one world pair each.
    for (std::size_t base : {std::size_t{0}, std::size_t{2}}) {
        const auto a = static_cast<std::size_t>(batch[base].meta.at("task_id"));
        const auto b = static_cast<std::size_t>(batch[base + 1].meta.at("task_id"));
        const bool is_pair =
            std::any_of(world.pairs.begin(), world.pairs.end(), [&](const auto& p) {
                return p.first == a && p.second == b;
            });
        CHECK(is_pair);
    }

    Rng redraw(50, 1);
    const std::vector<Task> again = source(5, redraw);
    REQUIRE(again.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(again[i].meta.at("task_id") == batch[i].meta.at("task_id"));
        CHECK(again[i].xs.vals() == batch[i].xs.vals());
        CHECK(again[i].labels_q == batch[i].labels_q);
    }

    FactorWorld pairless = world;
    pairless.pairs.clear();
    CHECK_THROWS_WITH_AS(confounded_source(pairless, 0.75), doctest::Contains("no pairs"),
                         std::invalid_argument);
}

TEST_CASE("batch size sweep table is paired, aggregated, and reproducible") {
    ExperimentConfig cfg;
    cfg.task_kind = TaskKind::classification;
    cfg.encoder_widths = {8, 12};
    cfg.head_hidden = {};
    cfg.n_k = 4;
    cfg.world = small_world_spec(8, 0.85);
    cfg.world.shots = 4;
    cfg.world.query = 6;
    cfg.inner_lr = 0.05;
    cfg.outer_lr = 0.01;
    cfg.seed = 21;
    cfg.sweep.batch = 2;
    cfg.sweep.iterations = 25;
    cfg.sweep.seeds = 2;
    cfg.sweep.modes = "both";
    cfg.sweep.eval_pairs = 2;
    cfg.sweep.eval_holdout = 4;

    const SweepReport report = batch_size_sweep(cfg);
    REQUIRE(report.cells.size() == 8);
    REQUIRE(report.aggregates.size() == 4);

    // Layout: seed-major, plain before causal, B before 2B.
    const std::vector<std::tuple<std::uint64_t, Mode, std::size_t>> expected_layout = {
        {21, Mode::plain, 2},  {21, Mode::plain, 4},  {21, Mode::causal, 2},
        {21, Mode::causal, 4}, {22, Mode::plain, 2},  {22, Mode::plain, 4},
        {22, Mode::causal, 2}, {22, Mode::causal, 4},
    };
    for (std::size_t i = 0; i < 8; ++i) {
        CAPTURE(i);
        CHECK(report.cells[i].seed == std::get<0>(expected_layout[i]));
        CHECK(report.cells[i].mode == std::get<1>(expected_layout[i]));
        CHECK(report.cells[i].batch_size == std::get<2>(expected_layout[i]));
        CHECK(report.cells[i].heldin_accuracy >= 0.0);
        CHECK(report.cells[i].heldin_accuracy <= 1.0);
        CHECK(report.cells[i].heldout_accuracy >= 0.0);
        CHECK(report.cells[i].heldout_accuracy <= 1.0);
        CHECK(report.cells[i].heldin_half_width >= 0.0);
        CHECK(report.cells[i].heldout_half_width >= 0.0);
    }

    // Every (seed, mode) carries both batch sizes.
    for (std::uint64_t seed : {21, 22}) {
        for (Mode mode : {Mode::plain, Mode::causal}) {
            std::set<std::size_t> sizes;
            for (const SweepCell& c : report.cells)
                if (c.seed == seed && c.mode == mode) sizes.insert(c.batch_size);
            CHECK(sizes == std::set<std::size_t>{2, 4});
        }
    }

    // Aggregates are exactly the fold of their cells in table order.
    for (const SweepAggregate& agg : report.aggregates) {
        std::vector<double> in, out;
        for (const SweepCell& c : report.cells) {
            if (c.mode != agg.mode || c.batch_size != agg.batch_size) continue;
            in.push_back(c.heldin_accuracy);
            out.push_back(c.heldout_accuracy);
        }
        REQUIRE(in.size() == 2);
        CHECK(agg.seeds == 2);
        const auto fold = [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x;
            const double m = s / static_cast<double>(v.size());
            double q = 0.0;
            for (double x : v) q += (x - m) * (x - m);
            const double n = static_cast<double>(v.size());
            return std::pair{m, 1.96 * std::sqrt(q / n) / std::sqrt(n)};
        };
        CHECK(agg.heldin_mean == fold(in).first);
        CHECK(agg.heldin_half_width == fold(in).second);
        CHECK(agg.heldout_mean == fold(out).first);
        CHECK(agg.heldout_half_width == fold(out).second);
    }

    const SweepReport rerun = batch_size_sweep(cfg);
    REQUIRE(rerun.cells.size() == report.cells.size());
    for (std::size_t i = 0; i < report.cells.size(); ++i)
        CHECK(cells_equal(rerun.cells[i], report.cells[i]));

    // Single-mode sweeps keep the same pairing per seed.
    ExperimentConfig plain_only = cfg;
    plain_only.sweep.modes = "plain";
    plain_only.sweep.seeds = 1;
    const SweepReport small = batch_size_sweep(plain_only);
    REQUIRE(small.cells.size() == 2);
    REQUIRE(small.aggregates.size() == 2);
    CHECK(small.cells[0].batch_size == 2);
    CHECK(small.cells[1].batch_size == 4);
    // Same seed and mode as the big table: identical cells.
    CHECK(cells_equal(small.cells[0], report.cells[0]));
    CHECK(cells_equal(small.cells[1], report.cells[1]));

    ExperimentConfig regression = cfg;
    regression.task_kind = TaskKind::regression;
    regression.encoder_widths = {1, 12};
    CHECK_THROWS_WITH_AS(batch_size_sweep(regression), doctest::Contains("classification"),
                         std::invalid_argument);
    ExperimentConfig no_confounder = cfg;
    no_confounder.world.q = 0.5;
    CHECK_THROWS_WITH_AS(batch_size_sweep(no_confounder), doctest::Contains("no confounder"),
                         std::invalid_argument);
    ExperimentConfig bad_modes = cfg;
    bad_modes.sweep.modes = "weird";
    CHECK_THROWS_WITH_AS(batch_size_sweep(bad_modes), doctest::Contains("sweep.modes"),
                         std::invalid_argument);
    ExperimentConfig zero_batch = cfg;
    zero_batch.sweep.batch = 0;
    CHECK_THROWS_WITH_AS(batch_size_sweep(zero_batch), doctest::Contains("sweep.batch"),
                         std::invalid_argument);
}
