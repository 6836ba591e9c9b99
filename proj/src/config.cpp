#include "mcl/config.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace mcl {

std::string to_string(Mode m) { return m == Mode::plain ? "plain" : "causal"; }

std::string to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::softplus: return "softplus";
    }
    throw std::logic_error("unhandled activation tag");
}

Mode mode_from_string(const std::string& s) {
    if (s == "plain") return Mode::plain;
    if (s == "causal") return Mode::causal;
    throw std::invalid_argument("unknown mode '" + s + "' (expected plain or causal)");
}

Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::identity;
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "softplus") return Activation::softplus;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "regression") return TaskKind::regression;
    if (s == "classification") return TaskKind::classification;
    throw std::invalid_argument("unknown task kind '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const std::string& want) {
    throw std::invalid_argument("config key '" + key + "': cannot read '" + v + "' as " + want);
}

double read_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(x)) bad_value(key, v, "a finite number");
        return x;
    } catch (const std::invalid_argument&) {
        bad_value(key, v, "a finite number");
    } catch (const std::out_of_range&) {
        bad_value(key, v, "a finite number");
    }
}

std::uint64_t read_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') bad_value(key, v, "a non-negative integer");
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) bad_value(key, v, "a non-negative integer");
        return static_cast<std::uint64_t>(x);
    } catch (const std::invalid_argument&) {
        bad_value(key, v, "a non-negative integer");
    } catch (const std::out_of_range&) {
        bad_value(key, v, "a non-negative integer");
    }
}

std::size_t read_size(const std::string& key, const std::string& v) {
    return static_cast<std::size_t>(read_u64(key, v));
}

bool read_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "a boolean (true/false/1/0)");
}

std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) out.push_back(trim(item));
    if (!v.empty() && v.back() == ',') out.emplace_back();
    return out;
}

std::vector<std::size_t> read_size_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    for (const auto& item : split_commas(v)) out.push_back(read_size(key, item));
    return out;
}

std::vector<double> read_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& item : split_commas(v)) out.push_back(read_double(key, item));
    return out;
}

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string fmt(bool b) { return b ? "true" : "false"; }
std::string fmt(std::uint64_t x) { return std::to_string(x); }

template <class T>
std::string fmt_list(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        out += fmt(xs[i]);
    }
    return out;
}

struct Field {
    std::string key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(ExperimentConfig&)> get;
};

// Accessor lambdas return a mutable reference into the config; the same
// accessor serves parse (write) and dump (read on a local copy).
template <class Acc>
Field fd(std::string key, Acc acc) {  // double
    return {key, [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = read_double(key, v); },
            [acc](ExperimentConfig& c) { return fmt(acc(c)); }};
}
template <class Acc>
Field fsz(std::string key, Acc acc) {  // size_t
    return {key, [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = read_size(key, v); },
            [acc](ExperimentConfig& c) { return fmt(acc(c)); }};
}
template <class Acc>
Field fu64(std::string key, Acc acc) {
    return {key, [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = read_u64(key, v); },
            [acc](ExperimentConfig& c) { return fmt(acc(c)); }};
}
template <class Acc>
Field fb(std::string key, Acc acc) {  // bool
    return {key, [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = read_bool(key, v); },
            [acc](ExperimentConfig& c) { return fmt(acc(c)); }};
}
template <class Acc>
Field fszl(std::string key, Acc acc) {  // vector<size_t>
    return {key, [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = read_size_list(key, v); },
            [acc](ExperimentConfig& c) { return fmt_list(acc(c)); }};
}
template <class Acc>
Field fdl(std::string key, Acc acc) {  // vector<double>
    return {key, [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = read_double_list(key, v); },
            [acc](ExperimentConfig& c) { return fmt_list(acc(c)); }};
}
template <class Acc>
Field fstr(std::string key, Acc acc) {
    return {key, [acc](ExperimentConfig& c, const std::string& v) { acc(c) = v; },
            [acc](ExperimentConfig& c) { return acc(c); }};
}

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        f.push_back({"mode",
                     [](ExperimentConfig& c, const std::string& v) { c.mode = mode_from_string(v); },
                     [](ExperimentConfig& c) { return to_string(c.mode); }});
        f.push_back({"task_kind",
                     [](ExperimentConfig& c, const std::string& v) { c.task_kind = task_kind_from_string(v); },
                     [](ExperimentConfig& c) { return to_string(c.task_kind); }});
        f.push_back(fu64("seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; }));
        f.push_back(fsz("iterations", [](ExperimentConfig& c) -> std::size_t& { return c.iterations; }));
        f.push_back(fsz("n_tr", [](ExperimentConfig& c) -> std::size_t& { return c.n_tr; }));
        f.push_back(fd("inner_lr", [](ExperimentConfig& c) -> double& { return c.inner_lr; }));
        f.push_back(fsz("inner_steps", [](ExperimentConfig& c) -> std::size_t& { return c.inner_steps; }));
        f.push_back(fd("outer_lr", [](ExperimentConfig& c) -> double& { return c.outer_lr; }));
        f.push_back(fb("first_order", [](ExperimentConfig& c) -> bool& { return c.first_order; }));
        f.push_back(fb("fresh_batch_step2", [](ExperimentConfig& c) -> bool& { return c.fresh_batch_step2; }));
        f.push_back(fb("force_uniform_weights",
                       [](ExperimentConfig& c) -> bool& { return c.force_uniform_weights; }));
        f.push_back(fszl("encoder_widths",
                         [](ExperimentConfig& c) -> std::vector<std::size_t>& { return c.encoder_widths; }));
        f.push_back(fszl("head_hidden",
                         [](ExperimentConfig& c) -> std::vector<std::size_t>& { return c.head_hidden; }));
        f.push_back(fsz("n_k", [](ExperimentConfig& c) -> std::size_t& { return c.n_k; }));
        f.push_back({"hidden_act",
                     [](ExperimentConfig& c, const std::string& v) { c.hidden_act = activation_from_string(v); },
                     [](ExperimentConfig& c) { return to_string(c.hidden_act); }});
        f.push_back(fb("ablate_xi", [](ExperimentConfig& c) -> bool& { return c.ablate_xi; }));
        f.push_back(fb("ablate_fgr", [](ExperimentConfig& c) -> bool& { return c.ablate_fgr; }));
        f.push_back(fsz("eval_tasks", [](ExperimentConfig& c) -> std::size_t& { return c.eval_tasks; }));

        f.push_back(fd("causal.lambda1", [](ExperimentConfig& c) -> double& { return c.causal.lambda1; }));
        f.push_back(fd("causal.lambda2", [](ExperimentConfig& c) -> double& { return c.causal.lambda2; }));
        f.push_back(fd("causal.alpha1", [](ExperimentConfig& c) -> double& { return c.causal.alpha1; }));
        f.push_back(fd("causal.alpha2", [](ExperimentConfig& c) -> double& { return c.causal.alpha2; }));
        f.push_back(fd("causal.alpha3", [](ExperimentConfig& c) -> double& { return c.causal.alpha3; }));
        f.push_back(fd("causal.alpha4", [](ExperimentConfig& c) -> double& { return c.causal.alpha4; }));
        f.push_back(fb("causal.signed_xi", [](ExperimentConfig& c) -> bool& { return c.causal.signed_xi; }));
        f.push_back(fb("causal.per_task_entropy",
                       [](ExperimentConfig& c) -> bool& { return c.causal.per_task_entropy; }));

        f.push_back(fd("sinusoid.amp_lo", [](ExperimentConfig& c) -> double& { return c.sinusoid.amp_lo; }));
        f.push_back(fd("sinusoid.amp_hi", [](ExperimentConfig& c) -> double& { return c.sinusoid.amp_hi; }));
        f.push_back(fd("sinusoid.freq_lo", [](ExperimentConfig& c) -> double& { return c.sinusoid.freq_lo; }));
        f.push_back(fd("sinusoid.freq_hi", [](ExperimentConfig& c) -> double& { return c.sinusoid.freq_hi; }));
        f.push_back(fd("sinusoid.phase_lo", [](ExperimentConfig& c) -> double& { return c.sinusoid.phase_lo; }));
        f.push_back(fd("sinusoid.phase_hi", [](ExperimentConfig& c) -> double& { return c.sinusoid.phase_hi; }));
        f.push_back(fd("sinusoid.noise_std", [](ExperimentConfig& c) -> double& { return c.sinusoid.noise_std; }));
        f.push_back(fd("sinusoid.input_lo", [](ExperimentConfig& c) -> double& { return c.sinusoid.input_lo; }));
        f.push_back(fd("sinusoid.input_hi", [](ExperimentConfig& c) -> double& { return c.sinusoid.input_hi; }));
        f.push_back(fsz("sinusoid.shots", [](ExperimentConfig& c) -> std::size_t& { return c.sinusoid.shots; }));
        f.push_back(fsz("sinusoid.query", [](ExperimentConfig& c) -> std::size_t& { return c.sinusoid.query; }));
        f.push_back(fb("sinusoid.offset_form",
                       [](ExperimentConfig& c) -> bool& { return c.sinusoid.offset_form; }));

        f.push_back(fsz("world.ambient_dim", [](ExperimentConfig& c) -> std::size_t& { return c.world.ambient_dim; }));
        f.push_back(fsz("world.n_factors", [](ExperimentConfig& c) -> std::size_t& { return c.world.n_factors; }));
        f.push_back(fsz("world.subset_size", [](ExperimentConfig& c) -> std::size_t& { return c.world.subset_size; }));
        f.push_back(fd("world.mu", [](ExperimentConfig& c) -> double& { return c.world.mu; }));
        f.push_back(fd("world.factor_noise", [](ExperimentConfig& c) -> double& { return c.world.factor_noise; }));
        f.push_back(fd("world.obs_noise", [](ExperimentConfig& c) -> double& { return c.world.obs_noise; }));
        f.push_back(fd("world.q", [](ExperimentConfig& c) -> double& { return c.world.q; }));
        f.push_back(fsz("world.n_pairs", [](ExperimentConfig& c) -> std::size_t& { return c.world.n_pairs; }));
        f.push_back(fsz("world.shots", [](ExperimentConfig& c) -> std::size_t& { return c.world.shots; }));
        f.push_back(fsz("world.query", [](ExperimentConfig& c) -> std::size_t& { return c.world.query; }));

        f.push_back(fsz("sweep.batch", [](ExperimentConfig& c) -> std::size_t& { return c.sweep.batch; }));
        f.push_back(fsz("sweep.iterations", [](ExperimentConfig& c) -> std::size_t& { return c.sweep.iterations; }));
        f.push_back(fsz("sweep.seeds", [](ExperimentConfig& c) -> std::size_t& { return c.sweep.seeds; }));
        f.push_back(fstr("sweep.modes", [](ExperimentConfig& c) -> std::string& { return c.sweep.modes; }));
        f.push_back(fsz("sweep.eval_pairs", [](ExperimentConfig& c) -> std::size_t& { return c.sweep.eval_pairs; }));
        f.push_back(fsz("sweep.eval_holdout",
                        [](ExperimentConfig& c) -> std::size_t& { return c.sweep.eval_holdout; }));

        f.push_back(fsz("theorem1.d_i", [](ExperimentConfig& c) -> std::size_t& { return c.theorem1.spec.d_i; }));
        f.push_back(fsz("theorem1.d_j", [](ExperimentConfig& c) -> std::size_t& { return c.theorem1.spec.d_j; }));
        f.push_back(fd("theorem1.mu_i", [](ExperimentConfig& c) -> double& { return c.theorem1.spec.mu_i; }));
        f.push_back(fd("theorem1.mu_j", [](ExperimentConfig& c) -> double& { return c.theorem1.spec.mu_j; }));
        f.push_back(fd("theorem1.sigma_i", [](ExperimentConfig& c) -> double& { return c.theorem1.spec.sigma_i; }));
        f.push_back(fd("theorem1.sigma_j", [](ExperimentConfig& c) -> double& { return c.theorem1.spec.sigma_j; }));
        f.push_back(fdl("theorem1.q_grid",
                        [](ExperimentConfig& c) -> std::vector<double>& { return c.theorem1.q_grid; }));
        f.push_back(fszl("theorem1.n_grid",
                         [](ExperimentConfig& c) -> std::vector<std::size_t>& { return c.theorem1.n_grid; }));
        f.push_back(fsz("theorem1.resamples",
                        [](ExperimentConfig& c) -> std::size_t& { return c.theorem1.resamples; }));
        f.push_back(fu64("theorem1.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.theorem1.seed; }));
        return f;
    }();
    return fields;
}

const Field* find_field(const std::string& key) {
    for (const auto& f : schema())
        if (f.key == key) return &f;
    return nullptr;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: " + what);
}

}  // namespace

void validate(const ExperimentConfig& c) {
    require(c.iterations >= 1, "iterations must be >= 1");
    require(c.n_tr >= 1, "n_tr must be >= 1");
    require(c.inner_lr >= 0.0, "inner_lr must be >= 0");
    require(c.inner_steps >= 1, "inner_steps must be >= 1");
    require(c.outer_lr >= 0.0, "outer_lr must be >= 0");
    require(c.encoder_widths.size() >= 2, "encoder_widths needs an input and an output width");
    for (auto w : c.encoder_widths) require(w >= 1, "encoder_widths entries must be >= 1");
    for (auto w : c.head_hidden) require(w >= 1, "head_hidden entries must be >= 1");
    require(c.n_k >= 1, "n_k must be >= 1");
    require(c.eval_tasks >= 1, "eval_tasks must be >= 1");

    require(c.causal.lambda1 >= 0.0 && c.causal.lambda2 >= 0.0, "causal.lambda* must be >= 0");
    require(c.causal.alpha1 >= 0.0 && c.causal.alpha2 >= 0.0 && c.causal.alpha3 >= 0.0 &&
                c.causal.alpha4 >= 0.0,
            "causal.alpha* must be >= 0");

    require(c.sinusoid.amp_lo <= c.sinusoid.amp_hi, "sinusoid amplitude range is inverted");
    require(c.sinusoid.freq_lo <= c.sinusoid.freq_hi, "sinusoid frequency range is inverted");
    require(c.sinusoid.phase_lo <= c.sinusoid.phase_hi, "sinusoid phase range is inverted");
    require(c.sinusoid.input_lo < c.sinusoid.input_hi, "sinusoid input range is inverted");
    require(c.sinusoid.noise_std >= 0.0, "sinusoid.noise_std must be >= 0");
    require(c.sinusoid.shots >= 1 && c.sinusoid.query >= 1, "sinusoid shots/query must be >= 1");

    require(c.world.ambient_dim >= c.world.n_factors, "world.ambient_dim must be >= world.n_factors");
    require(c.world.n_factors >= 1 && c.world.subset_size >= 1, "world sizes must be >= 1");
    require(c.world.subset_size * 2 <= c.world.n_factors,
            "world.n_factors must fit two disjoint subsets");
    require(c.world.factor_noise >= 0.0 && c.world.obs_noise >= 0.0, "world noise must be >= 0");
    require(c.world.q >= 0.0 && c.world.q <= 1.0, "world.q must lie in [0,1]");
    require(c.world.n_pairs >= 1, "world.n_pairs must be >= 1");
    require(c.world.shots >= 1 && c.world.query >= 1, "world shots/query must be >= 1");

    require(c.sweep.batch >= 1, "sweep.batch must be >= 1");
    require(c.sweep.iterations >= 1, "sweep.iterations must be >= 1");
    require(c.sweep.seeds >= 1, "sweep.seeds must be >= 1");
    require(c.sweep.modes == "plain" || c.sweep.modes == "causal" || c.sweep.modes == "both",
            "sweep.modes must be plain, causal, or both");
    require(c.sweep.eval_pairs >= 1 && c.sweep.eval_holdout >= 1, "sweep eval sizes must be >= 1");

    require(c.theorem1.spec.d_i >= 1 && c.theorem1.spec.d_j >= 1, "theorem1 block sizes must be >= 1");
    require(c.theorem1.spec.sigma_i > 0.0 && c.theorem1.spec.sigma_j > 0.0,
            "theorem1 sigmas must be > 0");
    require(!c.theorem1.q_grid.empty(), "theorem1.q_grid must be non-empty");
    for (double q : c.theorem1.q_grid) require(q >= 0.0 && q <= 1.0, "theorem1.q_grid entries must lie in [0,1]");
    require(!c.theorem1.n_grid.empty(), "theorem1.n_grid must be non-empty");
    require(c.theorem1.resamples >= 1, "theorem1.resamples must be >= 1");

    if (c.task_kind == TaskKind::classification)
        require(c.encoder_widths.front() == c.world.ambient_dim,
                "classification needs encoder_widths to start at world.ambient_dim");
    else
        require(c.encoder_widths.front() == 1, "regression needs encoder_widths to start at 1");
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        require(!key.empty(), origin + ":" + std::to_string(lineno) + ": empty key");
        const Field* field = find_field(key);
        if (!field)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": unknown config key '" + key + "'");
        field->set(cfg, value);
    }
    validate(cfg);
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    std::ostringstream body;
    body << in.rdbuf();
    return parse_config_text(body.str(), path);
}

std::string dump_config(const ExperimentConfig& c) {
    ExperimentConfig copy = c;  // accessors hand out mutable references
    std::string out;
    for (const auto& f : schema()) {
        out += f.key;
        out += " = ";
        out += f.get(copy);
        out += '\n';
    }
    return out;
}

std::uint64_t config_hash(const ExperimentConfig& c) {
    const std::string dump = dump_config(c);
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char byte : dump) {
        h ^= byte;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace mcl
