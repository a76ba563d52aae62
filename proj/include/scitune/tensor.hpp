#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace scitune {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);

// Dense row-major float64 tensor. `grad` is empty until something writes a
// gradient into it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  // uniform(-bound, bound)
  static Tensor uniform(Shape shape, double bound, Rng& rng);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_.front(); }
  std::size_t cols() const { return shape_.empty() ? 1 : data_.size() / rows(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty(); }
  std::vector<double>& grad();  // allocates zeros on first use
  const std::vector<double>& grad() const { return grad_; }
  void clear_grad() { grad_.clear(); }

  // Values only; requires_grad and grad are not compared.
  bool same_values(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

// Snapshot: uint32 rank, uint64 dims, then little-endian float64 values.
void write_snapshot(std::ostream& out, const Tensor& t);
// `offset` tracks the absolute stream position for error messages.
Tensor read_snapshot(std::istream& in, std::uint64_t& offset);

struct Var {
  std::size_t id = SIZE_MAX;
};

// Records operations in creation order (which is a topological order) so
// backward is one reverse sweep. With grad recording off, no adjoint
// closures are kept and the graph is a plain evaluator.
class Graph {
 public:
  explicit Graph(bool record_grad = true) : record_(record_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var constant(Tensor t);
  // Leaf bound to an external tensor; it receives gradient only if
  // `p.requires_grad()`. The tensor must outlive the graph.
  Var param(const Tensor& p);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  std::size_t node_count() const { return nodes_.size(); }

  // [m x k] * [k x n], or [m x k] * [n x k]^T when transpose_b.
  Var matmul(Var a, Var b, bool transpose_b = false);
  // Same shapes, or b's shape equal to a trailing part of a's shape
  // (broadcast over the leading dimensions).
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var gelu(Var a);
  // Normalizes each row of a 2-D input; gain/bias have the row width.
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var softmax(Var a);         // last axis
  Var causal_softmax(Var a);  // square input; row i only over columns <= i
  Var embedding(Var table, std::span<const int> ids);
  Var slice_rows(Var a, std::size_t start, std::size_t count);
  Var slice_cols(Var a, std::size_t start, std::size_t count);
  Var gather_rows(Var a, std::span<const std::size_t> rows);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var sum(Var a);
  // Mean over mask-true rows of -log softmax(logits)[target].
  Var cross_entropy(Var logits, std::span<const int> targets, const std::vector<bool>& mask);

  // Seeds d(loss)/d(loss) = 1 and sweeps every node once in reverse order.
  void backward(Var loss);
  // Adds weight * gradient of every leaf bound to one of `params` into
  // that tensor's grad buffer.
  void accumulate_param_grads(std::span<Tensor* const> params, double weight = 1.0) const;
  // Same, into caller-owned buffers (one per param, sized on demand).
  void accumulate_param_grads(std::span<Tensor* const> params, std::span<std::vector<double>> out,
                              double weight = 1.0) const;
  // Gradient buffer of a node after backward (empty when none flowed).
  const std::vector<double>& grad(Var v) const { return nodes_[v.id].grad; }

 private:
  struct Node {
    Tensor value;
    const Tensor* bound = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
    std::function<void(Graph&, std::size_t)> backward;
  };

  const Node& node(Var v) const;
  std::vector<double>& grad_buffer(std::size_t id);
  Var push(Tensor value, bool needs_grad, std::function<void(Graph&, std::size_t)> backward, const char* op);
  bool any_needs_grad(std::initializer_list<Var> vars) const;

  bool record_;
  std::vector<Node> nodes_;
};

// Worst relative error between reverse-mode and central-difference
// gradients over the coordinates of `params` (a seeded subsample of
// `max_coords` when there are more). Relative error per coordinate is
// |a - n| / max(|a|, |n|, abs_floor); a coordinate with both gradients
// zero contributes 0. `params` get requires_grad for the duration.
struct GradCheckOptions {
  double h = 1e-5;
  std::size_t max_coords = 1000;
  std::uint64_t seed = 0;
  double abs_floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

using ScalarFn = std::function<Var(Graph&)>;
GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor* const> params, const GradCheckOptions& opts = {});

// p <- p - lr * g for every tensor with requires_grad, after scaling all
// such gradients to global norm `clip` when they exceed it. Clears grads.
void sgd_step(std::span<Tensor* const> params, double lr, std::optional<double> clip = std::nullopt);

// Adam with bias correction behind the same contract as sgd_step.
class Adam {
 public:
  Adam() = default;
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<Tensor* const> params, double lr, std::optional<double> clip = std::nullopt);

  std::uint64_t steps() const { return t_; }
  // Moment buffers in parameter order (first, second), one pair per tensor.
  std::vector<Tensor>& moments() { return moments_; }
  const std::vector<Tensor>& moments() const { return moments_; }
  void restore(std::uint64_t t, std::vector<Tensor> moments) {
    t_ = t;
    moments_ = std::move(moments);
  }

 private:
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<Tensor> moments_;
};

// Global L2 norm of the gradients of tensors with requires_grad.
double grad_norm(std::span<Tensor* const> params);

}  // namespace scitune
