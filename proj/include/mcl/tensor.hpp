#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mcl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Graph;
class ParamSet;
struct Tensor;
ParamSet grad(const Tensor& loss, const ParamSet& params, bool create_graph);

// Dense row-major 64-bit tensor. An untracked tensor is an immutable value;
// a tracked one additionally references a node on a Graph. Tracked tensors
// must not outlive their Graph (detach() first to keep the value).
struct Tensor {
    Shape shape;
    std::shared_ptr<const std::vector<double>> values;
    Graph* graph = nullptr;
    std::int64_t node = -1;

    bool tracked() const { return graph != nullptr; }
    std::size_t size() const { return values ? values->size() : 0; }
    const std::vector<double>& vals() const { return *values; }
    double scalar() const;  // requires size() == 1
    Tensor detach() const { return Tensor{shape, values, nullptr, -1}; }
};

Tensor tensor(Shape shape, std::vector<double> values);
Tensor full(const Shape& shape, double v);
Tensor zeros(const Shape& shape);
Tensor ones(const Shape& shape);
Tensor scalar_tensor(double v);  // shape [1]

enum class Op : std::uint8_t {
    leaf,
    add,
    mul,
    neg,
    recip,
    exp,
    log,
    tanh,
    softplus,
    relu,
    add_scalar,
    mul_scalar,
    clamp_min,
    matmul,
    transpose,
    reshape,
    expand,
    reduce_sum_keep,
    reduce_max_keep,
};

struct Node {
    Op op = Op::leaf;
    std::int64_t a = -1, b = -1;
    Shape shape;
    std::shared_ptr<const std::vector<double>> out;
    double c = 0.0;          // scalar payload (add_scalar / mul_scalar / clamp_min)
    int axis = -1;           // expand / keep-reductions
    std::size_t extent = 0;  // expand target extent
    std::shared_ptr<const std::vector<std::uint8_t>> mask;  // relu / clamp / max subgradient
    bool requires_grad = false;
};

// Append-only operation tape. Parents always precede children, so one reverse
// index sweep visits each node exactly once; recording during a sweep (the
// create-graph path) only appends past the sweep's snapshot and is safe.
class Graph {
  public:
    Tensor leaf(const Tensor& value, bool requires_grad = true);

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::int64_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t last_sweep_visits() const { return last_sweep_visits_; }

    std::int64_t record(Node n);
    Tensor wrap(std::int64_t id);

  private:
    std::vector<Node> nodes_;
    std::size_t last_sweep_visits_ = 0;

    friend ParamSet grad(const Tensor&, const ParamSet&, bool);
};

// Binary elementwise ops accept equal shapes or a single-element operand
// (broadcast); anything else throws with both shapes named.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor recip(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // throws std::domain_error on inputs <= 0
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor clamp_min(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // 2-D only
Tensor reshape(const Tensor& a, Shape s);
// Tiles an extent-1 axis up to n; the only broadcast primitive.
Tensor expand(const Tensor& a, int axis, std::size_t n);
Tensor broadcast_to(const Tensor& a, const Shape& target);  // single-element a

Tensor reduce_sum_keep(const Tensor& a, int axis);
Tensor reduce_max_keep(const Tensor& a, int axis);

enum class Reduce : std::uint8_t { sum, mean, max };
// Axis-dropping reduction; reducing every axis yields shape [1].
Tensor reduce(Reduce op, const Tensor& a, std::vector<int> axes);
Tensor reduce_sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor mse_loss(const Tensor& pred, const Tensor& target);
// Mean negative log-softmax of the true class; rows are shifted by their
// (constant) max before exponentiation, which leaves gradients unchanged.
Tensor nll_loss(const Tensor& logits, const std::vector<int>& labels);

// Ordered name -> Tensor map; insertion order is the iteration order, names
// unique. Reassigning an existing name keeps its position.
class ParamSet {
  public:
    void set(const std::string& name, Tensor t);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t size() const { return items_.size(); }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

using GradMap = ParamSet;

// Reverse sweep from a tracked scalar. Params not on the loss's graph are an
// error (reported by name); params on the graph the loss does not depend on
// get zero gradients. With create_graph the returned gradients are tracked,
// so they can be differentiated again.
GradMap grad(const Tensor& loss, const ParamSet& params, bool create_graph = false);

// theta' = theta - lr * grad, as fresh tensors. With create_graph the update
// is recorded, so theta' stays differentiable with respect to theta.
ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double lr,
                  bool create_graph = false);

// Central differences (fn(p+h) - fn(p-h)) / 2h per coordinate.
GradMap finite_diff_grad(const std::function<double(const ParamSet&)>& fn,
                         const ParamSet& params, double h = 1e-5);

ParamSet detach_all(const ParamSet& p);
ParamSet track_all(Graph& g, const ParamSet& p, bool requires_grad = true);

// ||a-b||_2 / max(||a||_2, ||b||_2, floor) over all entries of matching keys.
double rel_error(const GradMap& a, const GradMap& b, double floor = 1e-8);

}  // namespace mcl
