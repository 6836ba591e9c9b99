#include "mcl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mcl {

namespace {

std::shared_ptr<const std::vector<double>> share(std::vector<double> v) {
    return std::make_shared<const std::vector<double>>(std::move(v));
}

std::shared_ptr<const std::vector<std::uint8_t>> share_mask(std::vector<std::uint8_t> v) {
    return std::make_shared<const std::vector<std::uint8_t>>(std::move(v));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// outer * extent * inner decomposition of a row-major tensor around one axis.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    r.extent = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

void check_axis(const Shape& s, int axis, const char* who) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= s.size())
        throw std::invalid_argument(std::string(who) + ": invalid axis " + std::to_string(axis) +
                                    " for shape " + shape_str(s));
}

Graph* common_graph(const Tensor& a, const Tensor& b) {
    if (a.tracked() && b.tracked() && a.graph != b.graph)
        throw std::invalid_argument("operands are tracked on different graphs");
    return a.tracked() ? a.graph : b.graph;
}

std::int64_t ensure_node(Graph* g, const Tensor& t) {
    if (t.tracked()) return t.node;
    Node n;
    n.op = Op::leaf;
    n.shape = t.shape;
    n.out = t.values;
    n.requires_grad = false;
    return g->record(std::move(n));
}

Tensor finish_unary(Op op, const Tensor& a, Shape shape, std::vector<double> out,
                    std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr,
                    double c = 0.0, int axis = -1, std::size_t extent = 0) {
    Tensor r;
    r.shape = std::move(shape);
    r.values = share(std::move(out));
    if (a.tracked()) {
        Graph* g = a.graph;
        Node n;
        n.op = op;
        n.a = a.node;
        n.shape = r.shape;
        n.out = r.values;
        n.c = c;
        n.axis = axis;
        n.extent = extent;
        n.mask = std::move(mask);
        n.requires_grad = g->node(a.node).requires_grad;
        r.graph = g;
        r.node = g->record(std::move(n));
    }
    return r;
}

Tensor finish_binary(Op op, const Tensor& a, const Tensor& b, Shape shape,
                     std::vector<double> out) {
    Tensor r;
    r.shape = std::move(shape);
    r.values = share(std::move(out));
    Graph* g = common_graph(a, b);
    if (g) {
        std::int64_t ia = ensure_node(g, a);
        std::int64_t ib = ensure_node(g, b);
        Node n;
        n.op = op;
        n.a = ia;
        n.b = ib;
        n.shape = r.shape;
        n.out = r.values;
        n.requires_grad = g->node(ia).requires_grad || g->node(ib).requires_grad;
        r.graph = g;
        r.node = g->record(std::move(n));
    }
    return r;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

double Tensor::scalar() const {
    if (size() != 1)
        throw std::logic_error("scalar() on tensor of shape " + shape_str(shape));
    return (*values)[0];
}

Tensor tensor(Shape shape, std::vector<double> values) {
    for (std::size_t e : shape)
        if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape));
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " wants " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(values.size()));
    Tensor t;
    t.shape = std::move(shape);
    t.values = share(std::move(values));
    return t;
}

Tensor full(const Shape& shape, double v) {
    return tensor(shape, std::vector<double>(shape_numel(shape), v));
}

Tensor zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor ones(const Shape& shape) { return full(shape, 1.0); }
Tensor scalar_tensor(double v) { return tensor({1}, {v}); }

Tensor Graph::leaf(const Tensor& value, bool requires_grad) {
    Node n;
    n.op = Op::leaf;
    n.shape = value.shape;
    n.out = value.values;
    n.requires_grad = requires_grad;
    Tensor t;
    t.shape = value.shape;
    t.values = value.values;
    t.graph = this;
    t.node = record(std::move(n));
    return t;
}

std::int64_t Graph::record(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<std::int64_t>(nodes_.size()) - 1;
}

Tensor Graph::wrap(std::int64_t id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Tensor t;
    t.shape = n.shape;
    t.values = n.out;
    t.graph = this;
    t.node = id;
    return t;
}

// ---- elementwise -----------------------------------------------------------

namespace {

Tensor add_core(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const auto& av = a.vals();
    const auto& bv = b.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return finish_binary(Op::add, a, b, a.shape, std::move(out));
}

Tensor mul_core(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const auto& av = a.vals();
    const auto& bv = b.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return finish_binary(Op::mul, a, b, a.shape, std::move(out));
}

}  // namespace

Tensor broadcast_to(const Tensor& a, const Shape& target) {
    if (a.shape == target) return a;
    if (a.size() != 1)
        throw std::invalid_argument("broadcast_to: only single-element tensors broadcast, got " +
                                    shape_str(a.shape) + " vs " + shape_str(target));
    Tensor t = reshape(a, Shape(target.size(), 1));
    for (std::size_t i = 0; i < target.size(); ++i)
        if (target[i] > 1) t = expand(t, static_cast<int>(i), target[i]);
    return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) return add_core(a, b);
    if (b.size() == 1) return add_core(a, broadcast_to(b, a.shape));
    if (a.size() == 1) return add_core(broadcast_to(a, b.shape), b);
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) return mul_core(a, b);
    if (b.size() == 1) return mul_core(a, broadcast_to(b, a.shape));
    if (a.size() == 1) return mul_core(broadcast_to(a, b.shape), b);
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor div(const Tensor& a, const Tensor& b) { return mul(a, recip(b)); }

Tensor neg(const Tensor& a) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = -av[i];
    return finish_unary(Op::neg, a, a.shape, std::move(out));
}

Tensor recip(const Tensor& a) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = 1.0 / av[i];
        if (!std::isfinite(out[i]))
            throw std::domain_error("recip of " + std::to_string(av[i]));
    }
    return finish_unary(Op::recip, a, a.shape, std::move(out));
}

Tensor exp(const Tensor& a) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = std::exp(av[i]);
        if (!std::isfinite(out[i]))
            throw std::overflow_error("exp overflow at input " + std::to_string(av[i]));
    }
    return finish_unary(Op::exp, a, a.shape, std::move(out));
}

Tensor log(const Tensor& a) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (!(av[i] > 0.0))
            throw std::domain_error("log of non-positive value " + std::to_string(av[i]));
        out[i] = std::log(av[i]);
    }
    return finish_unary(Op::log, a, a.shape, std::move(out));
}

Tensor tanh(const Tensor& a) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
    return finish_unary(Op::tanh, a, a.shape, std::move(out));
}

Tensor softplus(const Tensor& a) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = stable_softplus(av[i]);
    return finish_unary(Op::softplus, a, a.shape, std::move(out));
}

Tensor relu(const Tensor& a) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    std::vector<std::uint8_t> mask(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        mask[i] = av[i] > 0.0 ? 1 : 0;
        out[i] = mask[i] ? av[i] : 0.0;
    }
    return finish_unary(Op::relu, a, a.shape, std::move(out), share_mask(std::move(mask)));
}

Tensor sigmoid(const Tensor& a) { return recip(add_scalar(exp(neg(a)), 1.0)); }

Tensor add_scalar(const Tensor& a, double c) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
    return finish_unary(Op::add_scalar, a, a.shape, std::move(out), nullptr, c);
}

Tensor mul_scalar(const Tensor& a, double c) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    return finish_unary(Op::mul_scalar, a, a.shape, std::move(out), nullptr, c);
}

Tensor clamp_min(const Tensor& a, double c) {
    const auto& av = a.vals();
    std::vector<double> out(av.size());
    std::vector<std::uint8_t> mask(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        mask[i] = av[i] >= c ? 1 : 0;
        out[i] = mask[i] ? av[i] : c;
    }
    return finish_unary(Op::clamp_min, a, a.shape, std::move(out), share_mask(std::move(mask)), c);
}

// ---- shape ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                                    shape_str(b.shape));
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    const auto& av = a.vals();
    const auto& bv = b.vals();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = av.data() + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return finish_binary(Op::matmul, a, b, {m, n}, std::move(out));
}

Tensor transpose(const Tensor& a) {
    if (a.shape.size() != 2)
        throw std::invalid_argument("transpose: wants a 2-D tensor, got " + shape_str(a.shape));
    const std::size_t m = a.shape[0], n = a.shape[1];
    const auto& av = a.vals();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return finish_unary(Op::transpose, a, {n, m}, std::move(out));
}

Tensor reshape(const Tensor& a, Shape s) {
    if (shape_numel(s) != a.size())
        throw std::invalid_argument("reshape: " + shape_str(a.shape) + " to " + shape_str(s) +
                                    " changes element count");
    // Values are immutable, so the reshaped tensor shares them.
    Tensor r;
    r.shape = s;
    r.values = a.values;
    if (a.tracked()) {
        Graph* g = a.graph;
        Node n;
        n.op = Op::reshape;
        n.a = a.node;
        n.shape = std::move(s);
        n.out = r.values;
        n.requires_grad = g->node(a.node).requires_grad;
        r.graph = g;
        r.node = g->record(std::move(n));
    }
    return r;
}

Tensor expand(const Tensor& a, int axis, std::size_t n) {
    check_axis(a.shape, axis, "expand");
    if (a.shape[static_cast<std::size_t>(axis)] != 1)
        throw std::invalid_argument("expand: axis " + std::to_string(axis) + " of " +
                                    shape_str(a.shape) + " is not extent 1");
    if (n == 0) throw std::invalid_argument("expand: zero target extent");
    AxisSplit sp = split_axis(a.shape, axis);
    const auto& av = a.vals();
    std::vector<double> out(sp.outer * n * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[(o * n + j) * sp.inner + i] = av[o * sp.inner + i];
    Shape s = a.shape;
    s[static_cast<std::size_t>(axis)] = n;
    return finish_unary(Op::expand, a, std::move(s), std::move(out), nullptr, 0.0, axis, n);
}

Tensor reduce_sum_keep(const Tensor& a, int axis) {
    check_axis(a.shape, axis, "reduce");
    AxisSplit sp = split_axis(a.shape, axis);
    const auto& av = a.vals();
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.extent; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += av[(o * sp.extent + j) * sp.inner + i];
    Shape s = a.shape;
    s[static_cast<std::size_t>(axis)] = 1;
    return finish_unary(Op::reduce_sum_keep, a, std::move(s), std::move(out), nullptr, 0.0, axis,
                        sp.extent);
}

Tensor reduce_max_keep(const Tensor& a, int axis) {
    check_axis(a.shape, axis, "reduce");
    AxisSplit sp = split_axis(a.shape, axis);
    const auto& av = a.vals();
    std::vector<double> out(sp.outer * sp.inner);
    std::vector<std::uint8_t> mask(av.size(), 0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t best = (o * sp.extent) * sp.inner + i;
            double bv = av[best];
            for (std::size_t j = 1; j < sp.extent; ++j) {
                std::size_t idx = (o * sp.extent + j) * sp.inner + i;
                if (av[idx] > bv) {
                    bv = av[idx];
                    best = idx;
                }
            }
            out[o * sp.inner + i] = bv;
            mask[best] = 1;  // ties: first maximal element carries the gradient
        }
    Shape s = a.shape;
    s[static_cast<std::size_t>(axis)] = 1;
    return finish_unary(Op::reduce_max_keep, a, std::move(s), std::move(out),
                        share_mask(std::move(mask)), 0.0, axis, sp.extent);
}

Tensor reduce(Reduce op, const Tensor& a, std::vector<int> axes) {
    if (axes.empty()) throw std::invalid_argument("reduce: no axes given");
    std::sort(axes.begin(), axes.end());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        check_axis(a.shape, axes[i], "reduce");
        if (i && axes[i] == axes[i - 1])
            throw std::invalid_argument("reduce: duplicate axis " + std::to_string(axes[i]));
    }
    std::size_t count = 1;
    for (int ax : axes) count *= a.shape[static_cast<std::size_t>(ax)];
    Tensor t = a;
    for (int ax : axes)
        t = (op == Reduce::max) ? reduce_max_keep(t, ax) : reduce_sum_keep(t, ax);
    if (op == Reduce::mean) t = mul_scalar(t, 1.0 / static_cast<double>(count));
    Shape s;
    for (std::size_t i = 0; i < a.shape.size(); ++i)
        if (!std::binary_search(axes.begin(), axes.end(), static_cast<int>(i)))
            s.push_back(a.shape[i]);
    if (s.empty()) s.push_back(1);
    return reshape(t, std::move(s));
}

Tensor reduce_sum_all(const Tensor& a) {
    Tensor t = a;
    for (std::size_t ax = 0; ax < a.shape.size(); ++ax)
        t = reduce_sum_keep(t, static_cast<int>(ax));
    return reshape(t, {1});
}

Tensor mean_all(const Tensor& a) {
    return mul_scalar(reduce_sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// ---- losses ----------------------------------------------------------------

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "mse_loss");
    Tensor d = sub(pred, target);
    Tensor loss = mean_all(mul(d, d));
    if (!std::isfinite(loss.scalar())) throw std::runtime_error("mse_loss: non-finite loss");
    return loss;
}

Tensor nll_loss(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2)
        throw std::invalid_argument("nll_loss: logits must be [N,C], got " +
                                    shape_str(logits.shape));
    const std::size_t n = logits.shape[0], c = logits.shape[1];
    if (labels.size() != n)
        throw std::invalid_argument("nll_loss: " + std::to_string(n) + " rows but " +
                                    std::to_string(labels.size()) + " labels");
    std::vector<double> mx(n);
    std::vector<double> onehot(n * c, 0.0);
    const auto& lv = logits.vals();
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw std::out_of_range("nll_loss: label " + std::to_string(labels[i]) +
                                    " out of range [0," + std::to_string(c) + ")");
        onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
        double m = lv[i * c];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, lv[i * c + j]);
        mx[i] = m;
    }
    // The row max enters as a constant, so it stabilizes exp without touching
    // the gradient (softmax minus one-hot either way).
    Tensor shift = expand(tensor({n, 1}, std::move(mx)), 1, c);
    Tensor shifted = sub(logits, shift);
    Tensor denom = log(reduce_sum_keep(exp(shifted), 1));
    Tensor logp = sub(shifted, expand(denom, 1, c));
    Tensor picked = mul(logp, tensor({n, c}, std::move(onehot)));
    Tensor loss = mul_scalar(reduce_sum_all(picked), -1.0 / static_cast<double>(n));
    if (!std::isfinite(loss.scalar())) throw std::runtime_error("nll_loss: non-finite loss");
    return loss;
}

// ---- ParamSet --------------------------------------------------------------

void ParamSet::set(const std::string& name, Tensor t) {
    for (auto& [k, v] : items_)
        if (k == name) {
            v = std::move(t);
            return;
        }
    items_.emplace_back(name, std::move(t));
}

const Tensor& ParamSet::at(const std::string& name) const {
    for (const auto& [k, v] : items_)
        if (k == name) return v;
    throw std::out_of_range("no parameter named " + name);
}

bool ParamSet::contains(const std::string& name) const {
    for (const auto& [k, v] : items_)
        if (k == name) return true;
    return false;
}

ParamSet detach_all(const ParamSet& p) {
    ParamSet r;
    for (const auto& [k, v] : p) r.set(k, v.detach());
    return r;
}

ParamSet track_all(Graph& g, const ParamSet& p, bool requires_grad) {
    ParamSet r;
    for (const auto& [k, v] : p) r.set(k, g.leaf(v.detach(), requires_grad));
    return r;
}

// ---- reverse sweep ---------------------------------------------------------

namespace {

// Value-mode adjoint accumulation; one dense buffer per touched node.
struct ValueSweep {
    Graph* g;
    std::vector<std::vector<double>> adj;
    const std::vector<std::uint8_t>& need;

    std::vector<double>& buf(std::int64_t id) {
        auto& b = adj[static_cast<std::size_t>(id)];
        if (b.empty()) b.assign(shape_numel(g->node(id).shape), 0.0);
        return b;
    }

    bool wants(std::int64_t id) const {
        return id >= 0 && g->node(id).requires_grad && need[static_cast<std::size_t>(id)];
    }

    std::size_t visits_ = 0;

    void run(std::int64_t from) {
        for (std::int64_t i = from; i >= 0; --i) {
            if (!need[static_cast<std::size_t>(i)]) continue;
            auto& gy = adj[static_cast<std::size_t>(i)];
            if (gy.empty()) continue;
            ++visits_;
            step(g->node(i), gy);
        }
    }

    void step(const Node& nd, const std::vector<double>& gy) {
        const bool wa = wants(nd.a), wb = wants(nd.b);
        if (!wa && !wb) return;
        switch (nd.op) {
            case Op::leaf:
                break;
            case Op::add: {
                if (wa) {
                    auto& ga = buf(nd.a);
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                }
                if (wb) {
                    auto& gb = buf(nd.b);
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
                }
                break;
            }
            case Op::mul: {
                const auto& av = *g->node(nd.a).out;
                const auto& bv = *g->node(nd.b).out;
                if (wa) {
                    auto& ga = buf(nd.a);
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
                }
                if (wb) {
                    auto& gb = buf(nd.b);
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
                }
                break;
            }
            case Op::neg: {
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i) ga[i] -= gy[i];
                break;
            }
            case Op::recip: {
                const auto& ov = *nd.out;
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i) ga[i] -= gy[i] * ov[i] * ov[i];
                break;
            }
            case Op::exp: {
                const auto& ov = *nd.out;
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * ov[i];
                break;
            }
            case Op::log: {
                const auto& av = *g->node(nd.a).out;
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / av[i];
                break;
            }
            case Op::tanh: {
                const auto& ov = *nd.out;
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i)
                    ga[i] += gy[i] * (1.0 - ov[i] * ov[i]);
                break;
            }
            case Op::softplus: {
                const auto& av = *g->node(nd.a).out;
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i)
                    ga[i] += gy[i] * stable_sigmoid(av[i]);
                break;
            }
            case Op::relu:
            case Op::clamp_min: {
                const auto& m = *nd.mask;
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i)
                    if (m[i]) ga[i] += gy[i];
                break;
            }
            case Op::add_scalar: {
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                break;
            }
            case Op::mul_scalar: {
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * nd.c;
                break;
            }
            case Op::matmul: {
                const Node& na = g->node(nd.a);
                const Node& nb = g->node(nd.b);
                const std::size_t m = na.shape[0], k = na.shape[1], n = nb.shape[1];
                const auto& av = *na.out;
                const auto& bv = *nb.out;
                if (wa) {
                    auto& ga = buf(nd.a);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            const double* grow = gy.data() + i * n;
                            const double* brow = bv.data() + p * n;
                            double s = 0.0;
                            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                            ga[i * k + p] += s;
                        }
                }
                if (wb) {
                    auto& gb = buf(nd.b);
                    for (std::size_t i = 0; i < m; ++i) {
                        const double* arow = av.data() + i * k;
                        const double* grow = gy.data() + i * n;
                        for (std::size_t p = 0; p < k; ++p) {
                            const double aip = arow[p];
                            double* brow = gb.data() + p * n;
                            for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                        }
                    }
                }
                break;
            }
            case Op::transpose: {
                const Node& na = g->node(nd.a);
                const std::size_t m = na.shape[0], n = na.shape[1];
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
                break;
            }
            case Op::reshape: {
                auto& ga = buf(nd.a);
                for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                break;
            }
            case Op::expand: {
                AxisSplit sp = split_axis(nd.shape, nd.axis);
                auto& ga = buf(nd.a);
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t j = 0; j < sp.extent; ++j)
                        for (std::size_t i = 0; i < sp.inner; ++i)
                            ga[o * sp.inner + i] += gy[(o * sp.extent + j) * sp.inner + i];
                break;
            }
            case Op::reduce_sum_keep: {
                AxisSplit sp = split_axis(g->node(nd.a).shape, nd.axis);
                auto& ga = buf(nd.a);
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t j = 0; j < sp.extent; ++j)
                        for (std::size_t i = 0; i < sp.inner; ++i)
                            ga[(o * sp.extent + j) * sp.inner + i] += gy[o * sp.inner + i];
                break;
            }
            case Op::reduce_max_keep: {
                AxisSplit sp = split_axis(g->node(nd.a).shape, nd.axis);
                const auto& m = *nd.mask;
                auto& ga = buf(nd.a);
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t j = 0; j < sp.extent; ++j)
                        for (std::size_t i = 0; i < sp.inner; ++i) {
                            std::size_t idx = (o * sp.extent + j) * sp.inner + i;
                            if (m[idx]) ga[idx] += gy[o * sp.inner + i];
                        }
                break;
            }
        }
    }
};

// Graph-mode sweep: adjoints are tensors built from recorded ops, so the
// returned gradients stay differentiable.
struct GraphSweep {
    Graph* g;
    std::vector<Tensor> adj;
    const std::vector<std::uint8_t>& need;
    std::size_t visits_ = 0;

    bool wants(std::int64_t id) const {
        return id >= 0 && g->node(id).requires_grad && need[static_cast<std::size_t>(id)];
    }

    void acc(std::int64_t id, Tensor contrib) {
        if (!wants(id)) return;
        auto& slot = adj[static_cast<std::size_t>(id)];
        slot = slot.values ? add(slot, contrib) : std::move(contrib);
    }

    static Tensor mask_tensor(const Node& nd, const Shape& shape) {
        const auto& m = *nd.mask;
        std::vector<double> v(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 1.0 : 0.0;
        return tensor(shape, std::move(v));
    }

    void run(std::int64_t from) {
        for (std::int64_t i = from; i >= 0; --i) {
            if (!need[static_cast<std::size_t>(i)]) continue;
            Tensor gy = adj[static_cast<std::size_t>(i)];
            if (!gy.values) continue;
            ++visits_;
            const Node nd = g->node(i);  // copy: recording below may reallocate nodes_
            switch (nd.op) {
                case Op::leaf:
                    break;
                case Op::add:
                    acc(nd.a, gy);
                    acc(nd.b, gy);
                    break;
                case Op::mul:
                    acc(nd.a, mul(gy, g->wrap(nd.b)));
                    acc(nd.b, mul(gy, g->wrap(nd.a)));
                    break;
                case Op::neg:
                    acc(nd.a, neg(gy));
                    break;
                case Op::recip: {
                    Tensor o = g->wrap(i);
                    acc(nd.a, neg(mul(gy, mul(o, o))));
                    break;
                }
                case Op::exp:
                    acc(nd.a, mul(gy, g->wrap(i)));
                    break;
                case Op::log:
                    acc(nd.a, mul(gy, recip(g->wrap(nd.a))));
                    break;
                case Op::tanh: {
                    Tensor o = g->wrap(i);
                    acc(nd.a, mul(gy, add_scalar(neg(mul(o, o)), 1.0)));
                    break;
                }
                case Op::softplus:
                    acc(nd.a, mul(gy, sigmoid(g->wrap(nd.a))));
                    break;
                case Op::relu:
                case Op::clamp_min:
                    acc(nd.a, mul(gy, mask_tensor(nd, nd.shape)));
                    break;
                case Op::add_scalar:
                    acc(nd.a, gy);
                    break;
                case Op::mul_scalar:
                    acc(nd.a, mul_scalar(gy, nd.c));
                    break;
                case Op::matmul:
                    acc(nd.a, matmul(gy, transpose(g->wrap(nd.b))));
                    acc(nd.b, matmul(transpose(g->wrap(nd.a)), gy));
                    break;
                case Op::transpose:
                    acc(nd.a, transpose(gy));
                    break;
                case Op::reshape:
                    acc(nd.a, reshape(gy, g->node(nd.a).shape));
                    break;
                case Op::expand:
                    acc(nd.a, reduce_sum_keep(gy, nd.axis));
                    break;
                case Op::reduce_sum_keep:
                    acc(nd.a, expand(gy, nd.axis, nd.extent));
                    break;
                case Op::reduce_max_keep:
                    acc(nd.a, mul(expand(gy, nd.axis, nd.extent),
                                  mask_tensor(nd, g->node(nd.a).shape)));
                    break;
            }
        }
    }
};

}  // namespace

GradMap grad(const Tensor& loss, const ParamSet& params, bool create_graph) {
    if (!loss.tracked()) throw std::invalid_argument("grad: loss is not tracked on a graph");
    if (loss.size() != 1)
        throw std::invalid_argument("grad: loss must be scalar, got shape " +
                                    shape_str(loss.shape));
    Graph* g = loss.graph;
    for (const auto& [name, p] : params)
        if (!p.tracked() || p.graph != g)
            throw std::invalid_argument("grad: unreachable parameter " + name);

    const std::size_t n0 = g->size();
    std::vector<std::uint8_t> marked(n0, 0);
    std::vector<std::int64_t> stack{loss.node};
    marked[static_cast<std::size_t>(loss.node)] = 1;
    while (!stack.empty()) {
        std::int64_t id = stack.back();
        stack.pop_back();
        const Node& nd = g->node(id);
        for (std::int64_t p : {nd.a, nd.b})
            if (p >= 0 && !marked[static_cast<std::size_t>(p)]) {
                marked[static_cast<std::size_t>(p)] = 1;
                stack.push_back(p);
            }
    }
    // Restrict the sweep to nodes that can reach a gradient-bearing leaf.
    std::vector<std::uint8_t> need(n0, 0);
    for (std::size_t i = 0; i < n0; ++i) need[i] = marked[i] && g->node(i).requires_grad;

    GradMap out;
    if (create_graph) {
        GraphSweep sweep{g, std::vector<Tensor>(n0), need};
        if (need[static_cast<std::size_t>(loss.node)])
            sweep.adj[static_cast<std::size_t>(loss.node)] = ones({1});
        sweep.run(loss.node);
        for (const auto& [name, p] : params) {
            Tensor& slot = sweep.adj[static_cast<std::size_t>(p.node)];
            out.set(name, slot.values ? slot : zeros(p.shape));
        }
        g->last_sweep_visits_ = sweep.visits_;
    } else {
        ValueSweep sweep{g, std::vector<std::vector<double>>(n0), need};
        if (need[static_cast<std::size_t>(loss.node)])
            sweep.adj[static_cast<std::size_t>(loss.node)] = {1.0};
        sweep.run(loss.node);
        for (const auto& [name, p] : params) {
            auto& b = sweep.adj[static_cast<std::size_t>(p.node)];
            out.set(name, b.empty() ? zeros(p.shape) : tensor(p.shape, std::move(b)));
        }
        g->last_sweep_visits_ = sweep.visits_;
    }
    return out;
}

ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double lr, bool create_graph) {
    ParamSet out;
    for (const auto& [name, p] : params) {
        if (!grads.contains(name))
            throw std::invalid_argument("sgd_step: missing gradient for parameter " + name);
        const Tensor& gt = grads.at(name);
        if (gt.shape != p.shape)
            throw std::invalid_argument("sgd_step: gradient shape " + shape_str(gt.shape) +
                                        " != parameter shape " + shape_str(p.shape) + " for " +
                                        name);
        if (create_graph) {
            out.set(name, add(p, mul_scalar(gt, -lr)));
        } else {
            const auto& pv = p.vals();
            const auto& gv = gt.vals();
            std::vector<double> v(pv.size());
            for (std::size_t i = 0; i < pv.size(); ++i) v[i] = pv[i] - lr * gv[i];
            out.set(name, tensor(p.shape, std::move(v)));
        }
    }
    return out;
}

GradMap finite_diff_grad(const std::function<double(const ParamSet&)>& fn, const ParamSet& params,
                         double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    GradMap out;
    for (const auto& item : params.items()) {
        const std::string& pname = item.first;
        const Tensor& p = item.second;
        std::vector<double> gv(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto eval = [&](double delta) {
                std::vector<double> v = p.vals();
                v[i] += delta;
                ParamSet perturbed;
                for (const auto& [k2, p2] : params)
                    perturbed.set(k2, k2 == pname ? tensor(p.shape, v) : p2.detach());
                double f = fn(perturbed);
                if (!std::isfinite(f))
                    throw std::runtime_error("finite_diff_grad: non-finite objective perturbing " +
                                             pname + "[" + std::to_string(i) + "]");
                return f;
            };
            gv[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        out.set(pname, tensor(p.shape, std::move(gv)));
    }
    return out;
}

double rel_error(const GradMap& a, const GradMap& b, double floor) {
    double d2 = 0.0, a2 = 0.0, b2 = 0.0;
    for (const auto& [name, ta] : a) {
        const Tensor& tb = b.at(name);
        const auto& av = ta.vals();
        const auto& bv = tb.vals();
        for (std::size_t i = 0; i < av.size(); ++i) {
            double d = av[i] - bv[i];
            d2 += d * d;
            a2 += av[i] * av[i];
            b2 += bv[i] * bv[i];
        }
    }
    return std::sqrt(d2) / std::max({std::sqrt(a2), std::sqrt(b2), floor});
}

}  // namespace mcl
