#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mcl/config.hpp"
#include "mcl/model.hpp"
#include "mcl/rng.hpp"
#include "mcl/tensor.hpp"

using namespace mcl;

namespace {

ExperimentConfig toy_config(Mode mode, std::vector<std::size_t> encoder,
                            std::vector<std::size_t> head_hidden, std::size_t n_k,
                            Activation act) {
    ExperimentConfig cfg;
    cfg.mode = mode;
    cfg.encoder_widths = std::move(encoder);
    cfg.head_hidden = std::move(head_hidden);
    cfg.n_k = n_k;
    cfg.hidden_act = act;
    return cfg;
}

double apply_act(Activation a, double x) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::tanh: return std::tanh(x);
        case Activation::relu: return x > 0 ? x : 0.0;
        case Activation::softplus: return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    return x;
}

// Independent forward pass with plain loops and std math.
std::vector<double> manual_mlp(const MLPSpec& spec, const ParamSet& params,
                               const std::string& prefix, std::vector<double> x,
                               std::size_t batch) {
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
        const auto& w = params.at(prefix + ".w" + std::to_string(l)).vals();
        const auto& b = params.at(prefix + ".b" + std::to_string(l)).vals();
        const Activation act = l + 2 == spec.widths.size() ? spec.output : spec.hidden;
        std::vector<double> y(batch * out);
        for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < out; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < in; ++k) acc += x[i * in + k] * w[k * out + j];
                y[i * out + j] = apply_act(act, acc + b[j]);
            }
        x = std::move(y);
    }
    return x;
}

Tensor random_rows(std::size_t n, std::size_t d, Rng& rng) {
    std::vector<double> v(n * d);
    for (double& x : v) x = rng.normal();
    return tensor({n, d}, std::move(v));
}

}  // namespace

TEST_CASE("init_bundle is seed-deterministic and seed-sensitive") {
    ExperimentConfig cfg = toy_config(Mode::causal, {1, 8, 6}, {10}, 4, Activation::relu);
    ModelBundle a = init_bundle(cfg, 5), b = init_bundle(cfg, 5), c = init_bundle(cfg, 6);
    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, t] : a.params) CHECK(t.vals() == b.params.at(name).vals());
    bool any_differs = false;
    for (const auto& [name, t] : a.params)
        if (t.vals() != c.params.at(name).vals()) any_differs = true;
    CHECK(any_differs);
}

TEST_CASE("bundle structure follows the mode") {
    ExperimentConfig plain_cfg = toy_config(Mode::plain, {1, 40, 40}, {40}, 12, Activation::relu);
    ModelBundle plain = init_bundle(plain_cfg, 1);
    CHECK(plain.head.widths.front() == 40);  // n_z
    CHECK(plain.output_dim() == 1);
    CHECK(!plain.params.contains("xi"));
    CHECK(!plain.params.contains("fgr.w0"));

    ExperimentConfig causal_cfg = toy_config(Mode::causal, {1, 40, 40}, {40}, 12, Activation::relu);
    ModelBundle causal = init_bundle(causal_cfg, 1);
    CHECK(causal.head.widths.front() == 12);  // n_k
    CHECK(causal.params.at("xi").shape == Shape{40, 12});
    CHECK(causal.grouping.widths == std::vector<std::size_t>{12, 24, 12});

    // The two modes stay parameter-matched with the default widths.
    const std::size_t plain_total = param_count(plain.encoder) + param_count(plain.head);
    const std::size_t causal_total = param_count(causal.encoder) + param_count(causal.head) +
                                     param_count(causal.grouping) + 40 * 12;
    CHECK(plain_total == 3401);
    CHECK(causal_total == 3373);
    CHECK(std::abs(static_cast<double>(causal_total) / static_cast<double>(plain_total) - 1.0) <
          0.1);

    ExperimentConfig bad = causal_cfg;
    bad.n_k = 1;
    CHECK_THROWS_WITH_AS(init_bundle(bad, 1), doctest::Contains("n_k >= 2"),
                         std::invalid_argument);
}

TEST_CASE("factor matrix entries have the documented spread") {
    ExperimentConfig cfg = toy_config(Mode::causal, {1, 100}, {10}, 100, Activation::relu);
    ModelBundle b = init_bundle(cfg, 9);
    const auto& xi = b.params.at("xi").vals();
    REQUIRE(xi.size() == 10000);
    double mean = 0.0;
    for (double v : xi) mean += v;
    mean /= static_cast<double>(xi.size());
    double var = 0.0;
    for (double v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<double>(xi.size());
    const double want = 1.0 / std::sqrt(100.0);
    CHECK(std::abs(std::sqrt(var) - want) < 0.2 * want);
}

TEST_CASE("mlp weights scale with fan-in and biases start at zero") {
    ExperimentConfig cfg = toy_config(Mode::plain, {100, 50}, {10}, 4, Activation::relu);
    ModelBundle b = init_bundle(cfg, 3);
    const auto& w = b.params.at("g.w0").vals();
    double var = 0.0;
    for (double v : w) var += v * v;
    var /= static_cast<double>(w.size());
    CHECK(std::abs(std::sqrt(var) - 0.1) < 0.02);
    for (double v : b.params.at("g.b0").vals()) CHECK(v == 0.0);
}

TEST_CASE("zero weights with bias c encode every input to c") {
    ExperimentConfig cfg = toy_config(Mode::plain, {3, 4}, {5}, 4, Activation::identity);
    ModelBundle b = init_bundle(cfg, 7);
    ParamSet p = b.params;
    p.set("g.w0", zeros({3, 4}));
    p.set("g.b0", full({1, 4}, 2.5));
    ModelBundle z = with_params(b, p);
    Rng rng(1, 0);
    Tensor out = encode(z, random_rows(6, 3, rng));
    CHECK(out.shape == Shape{6, 4});
    for (double v : out.vals()) CHECK(v == 2.5);
}

TEST_CASE("encode matches a layer-by-layer manual composition") {
    ExperimentConfig cfg = toy_config(Mode::plain, {1, 2, 2}, {3}, 4, Activation::tanh);
    ModelBundle b = init_bundle(cfg, 21);
    Rng rng(2, 0);
    Tensor x = random_rows(5, 1, rng);
    Tensor out = encode(b, x);
    std::vector<double> want = manual_mlp(b.encoder, b.params, "g", x.vals(), 5);
    REQUIRE(out.vals().size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(std::abs(out.vals()[i] - want[i]) < 1e-12);
}

TEST_CASE("causal representation is the factor-matrix product of the encoding") {
    ExperimentConfig cfg = toy_config(Mode::causal, {2, 5}, {3}, 4, Activation::tanh);
    ModelBundle b = init_bundle(cfg, 31);
    Rng rng(3, 0);
    Tensor x = random_rows(3, 2, rng);
    Tensor enc = encode(b, x);
    Tensor rep = causal_representation(b, x);
    REQUIRE(rep.shape == Shape{3, 4});
    const auto& xi = b.params.at("xi").vals();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 5; ++j) acc += enc.vals()[i * 5 + j] * xi[j * 4 + k];
            CHECK(rep.vals()[i * 4 + k] == acc);
        }

    ParamSet pid = b.params;
    pid.set("xi", zeros({5, 4}));
    ModelBundle zero_xi = with_params(b, pid);
    Tensor zero_rep = causal_representation(zero_xi, x);
    for (double v : zero_rep.vals()) CHECK(v == 0.0);

    ExperimentConfig sq = toy_config(Mode::causal, {2, 4}, {3}, 4, Activation::tanh);
    ModelBundle square = init_bundle(sq, 33);
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 4 + i)] = 1.0;
    ParamSet pi = square.params;
    pi.set("xi", tensor({4, 4}, eye));
    ModelBundle ident = with_params(square, pi);
    CHECK(causal_representation(ident, x).vals() == encode(ident, x).vals());

    ExperimentConfig plain_cfg = toy_config(Mode::plain, {2, 5}, {3}, 4, Activation::tanh);
    ModelBundle plain = init_bundle(plain_cfg, 31);
    CHECK_THROWS_WITH_AS(causal_representation(plain, x), doctest::Contains("plain-mode"),
                         std::invalid_argument);
}

TEST_CASE("task_average pools support and query inputs") {
    Task t;
    t.xs = tensor({2, 1}, {1.0, 3.0});
    t.ys = tensor({2, 1}, {0.0, 0.0});
    t.xq = tensor({1, 1}, {5.0});
    t.yq = tensor({1, 1}, {0.0});
    Tensor avg = task_average(t);
    CHECK(avg.shape == Shape{1, 1});
    CHECK(avg.vals()[0] == 3.0);

    Task single;
    single.xs = tensor({1, 2}, {4.0, -2.0});
    single.ys = tensor({1, 1}, {0.0});
    single.xq = tensor({1, 2}, {4.0, -2.0});
    single.yq = tensor({1, 1}, {0.0});
    // Both rows identical, so the mean is the sample itself.
    Tensor savg = task_average(single);
    CHECK(savg.vals() == std::vector<double>{4.0, -2.0});

    Rng rng(4, 0);
    Task big;
    big.xs = random_rows(7, 3, rng);
    big.xq = random_rows(5, 3, rng);
    big.ys = zeros({7, 1});
    big.yq = zeros({5, 1});
    Tensor bavg = task_average(big);
    for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < 7; ++r) acc += big.xs.vals()[r * 3 + c];
        for (std::size_t r = 0; r < 5; ++r) acc += big.xq.vals()[r * 3 + c];
        CHECK(std::abs(bavg.vals()[c] - acc / 12.0) < 1e-14);
    }

    Task empty;
    CHECK_THROWS_WITH_AS(task_average(empty), doctest::Contains("empty task"),
                         std::invalid_argument);
}

TEST_CASE("constant grouping outputs give uniform weights") {
    ExperimentConfig cfg = toy_config(Mode::causal, {2, 5}, {3}, 6, Activation::tanh);
    ModelBundle b = init_bundle(cfg, 41);
    ParamSet p = b.params;
    p.set("fgr.w0", zeros({6, 12}));
    p.set("fgr.b0", zeros({1, 12}));
    p.set("fgr.w1", zeros({12, 6}));
    p.set("fgr.b1", full({1, 6}, 0.7));
    ModelBundle flat = with_params(b, p);
    Rng rng(5, 0);
    Tensor w = grouping_weights(flat, random_rows(1, 2, rng));
    REQUIRE(w.shape == Shape{1, 6});
    for (double v : w.vals()) {
        CHECK(v == w.vals()[0]);
        CHECK(std::abs(v - 1.0 / 6.0) < 1e-12);
    }
}

TEST_CASE("grouping weights are positive, normalized, and match the composed oracle") {
    ExperimentConfig cfg = toy_config(Mode::causal, {3, 7}, {4}, 5, Activation::relu);
    Rng rng(6, 0);
    for (int trial = 0; trial < 100; ++trial) {
        ModelBundle b = init_bundle(cfg, static_cast<std::uint64_t>(trial));
        Tensor x_avg = random_rows(1, 3, rng);
        Tensor w = grouping_weights(b, x_avg);
        double sum = 0.0;
        for (double v : w.vals()) {
            CHECK(v > 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-10);

        Tensor rep = causal_representation(b, x_avg);
        std::vector<double> raw = manual_mlp(b.grouping, b.params, "fgr", rep.vals(), 1);
        double rsum = 0.0;
        for (double v : raw) rsum += v;
        for (std::size_t k = 0; k < raw.size(); ++k)
            CHECK(std::abs(w.vals()[k] - raw[k] / rsum) < 1e-12);
    }
    ModelBundle b = init_bundle(cfg, 0);
    CHECK_THROWS_WITH_AS(grouping_weights(b, zeros({2, 3})), doctest::Contains("single row"),
                         std::invalid_argument);
}

TEST_CASE("grouping weights differentiate through xi and the grouping net") {
    ExperimentConfig cfg = toy_config(Mode::causal, {2, 4}, {3}, 3, Activation::tanh);
    ModelBundle base = init_bundle(cfg, 51);
    Rng rng(7, 0);
    Tensor x_avg = random_rows(1, 2, rng);
    Tensor coeff = random_rows(1, 3, rng);

    ParamSet subset;
    subset.set("xi", base.params.at("xi"));
    subset.set("fgr.w0", base.params.at("fgr.w0"));
    subset.set("fgr.b0", base.params.at("fgr.b0"));
    subset.set("fgr.w1", base.params.at("fgr.w1"));
    subset.set("fgr.b1", base.params.at("fgr.b1"));

    auto objective = [&](const ParamSet& vars) {
        ParamSet merged = base.params;
        for (const auto& [name, t] : vars) merged.set(name, t);
        ModelBundle b = with_params(base, merged);
        Tensor w = grouping_weights(b, x_avg);
        return mul(w, coeff);
    };

    Graph g;
    ParamSet tracked = track_all(g, subset);
    Tensor loss = reduce_sum_all(objective(tracked));
    GradMap analytic = grad(loss, tracked);
    GradMap numeric = finite_diff_grad(
        [&](const ParamSet& vars) { return reduce_sum_all(objective(vars)).scalar(); }, subset);
    CHECK(rel_error(analytic, numeric) < 1e-4);
}

TEST_CASE("plain predictions match the end-to-end manual oracle") {
    ExperimentConfig cfg = toy_config(Mode::plain, {2, 6, 4}, {5}, 3, Activation::relu);
    ModelBundle b = init_bundle(cfg, 61);
    Rng rng(8, 0);
    Tensor x = random_rows(4, 2, rng);
    Tensor out = predict(b, x);
    REQUIRE(out.shape == Shape{4, 1});
    std::vector<double> enc = manual_mlp(b.encoder, b.params, "g", x.vals(), 4);
    std::vector<double> want = manual_mlp(b.head, b.params, "h", enc, 4);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(out.vals()[i] - want[i]) < 1e-12);
}

TEST_CASE("a zero grouping weight masks its causal coordinate") {
    ExperimentConfig cfg = toy_config(Mode::causal, {2, 5}, {4}, 4, Activation::tanh);
    ModelBundle b = init_bundle(cfg, 71);
    Rng rng(9, 0);
    Tensor x = random_rows(3, 2, rng);
    Tensor w = tensor({1, 4}, {0.4, 0.0, 0.35, 0.25});  // coordinate 1 masked
    Tensor before = predict(b, x, w);

    ParamSet p = b.params;
    std::vector<double> xi = p.at("xi").vals();
    for (std::size_t j = 0; j < 5; ++j) xi[j * 4 + 1] += 17.0;  // column 1 feeds coordinate 1
    p.set("xi", tensor({5, 4}, std::move(xi)));
    Tensor after = predict(with_params(b, p), x, w);
    CHECK(before.vals() == after.vals());
}

TEST_CASE("uniform weights with an identity factor matrix scale the encoding") {
    ExperimentConfig cfg = toy_config(Mode::causal, {2, 4}, {6}, 4, Activation::tanh);
    ModelBundle b = init_bundle(cfg, 81);
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 4 + i)] = 1.0;
    ParamSet p = b.params;
    p.set("xi", tensor({4, 4}, eye));
    ModelBundle ident = with_params(b, p);
    Rng rng(10, 0);
    Tensor x = random_rows(3, 2, rng);
    Tensor via_predict = predict(ident, x, uniform_weights(4));
    Tensor scaled = mul_scalar(encode(ident, x), 0.25);
    Tensor direct = mlp_forward(ident.head, ident.params, "h", scaled);
    CHECK(via_predict.vals() == direct.vals());
}

TEST_CASE("a dead encoder coordinate makes its factor-matrix row irrelevant") {
    ExperimentConfig cfg = toy_config(Mode::causal, {2, 3}, {4}, 4, Activation::identity);
    ModelBundle b = init_bundle(cfg, 91);
    ParamSet p = b.params;
    std::vector<double> w0 = p.at("g.w0").vals();
    w0[2] = w0[5] = 0.0;  // third output column of the 2x3 weight
    p.set("g.w0", tensor({2, 3}, std::move(w0)));
    // encoder output coordinate 2 is now identically zero (bias is zero)
    ModelBundle dead = init_bundle(cfg, 91);
    dead = with_params(dead, p);

    Rng rng(11, 0);
    Tensor x = random_rows(4, 2, rng);
    Tensor x_avg = random_rows(1, 2, rng);
    Tensor w = tensor({1, 4}, {0.1, 0.2, 0.3, 0.4});
    Tensor pred_before = predict(dead, x, w);
    Tensor gw_before = grouping_weights(dead, x_avg);

    ParamSet p2 = p;
    std::vector<double> xi = p2.at("xi").vals();
    for (std::size_t k = 0; k < 4; ++k) xi[2 * 4 + k] -= 3.25;  // row 2 of xi
    p2.set("xi", tensor({3, 4}, std::move(xi)));
    ModelBundle moved = with_params(dead, p2);
    CHECK(predict(moved, x, w).vals() == pred_before.vals());
    CHECK(grouping_weights(moved, x_avg).vals() == gw_before.vals());
}

TEST_CASE("predict enforces mode and weight-shape consistency") {
    ExperimentConfig plain_cfg = toy_config(Mode::plain, {2, 4}, {3}, 4, Activation::tanh);
    ExperimentConfig causal_cfg = toy_config(Mode::causal, {2, 4}, {3}, 4, Activation::tanh);
    ModelBundle plain = init_bundle(plain_cfg, 1);
    ModelBundle causal = init_bundle(causal_cfg, 1);
    Rng rng(12, 0);
    Tensor x = random_rows(2, 2, rng);
    CHECK_THROWS_WITH_AS(predict(plain, x, uniform_weights(4)), doctest::Contains("plain mode"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(predict(causal, x), doctest::Contains("needs grouping weights"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(predict(causal, x, uniform_weights(5)), doctest::Contains("[1,4]"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(encode(plain, random_rows(2, 3, rng)), doctest::Contains("expected input"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(grouping_forward(plain, x), doctest::Contains("plain-mode"),
                         std::invalid_argument);
}

TEST_CASE("with_params checks names and shapes") {
    ExperimentConfig cfg = toy_config(Mode::plain, {2, 4}, {3}, 4, Activation::tanh);
    ModelBundle b = init_bundle(cfg, 2);
    ParamSet missing;
    missing.set("g.w0", b.params.at("g.w0"));
    CHECK_THROWS_WITH_AS(with_params(b, missing), doctest::Contains("missing parameter"),
                         std::invalid_argument);
    ParamSet wrong = b.params;
    wrong.set("g.b0", zeros({1, 5}));
    CHECK_THROWS_WITH_AS(with_params(b, wrong), doctest::Contains("shape mismatch"),
                         std::invalid_argument);
}
