#include "scitune/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "scitune/error.hpp"
#include "scitune/rng.hpp"

namespace scitune {

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

namespace {

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline double dot(const double* x, const double* y, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw NumericError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

void require_2d(const char* op, const Tensor& t) {
  if (t.shape().size() != 2) throw NumericError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
}

}  // namespace

std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_)) {
    throw NumericError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }
}

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.uniform(-bound, bound);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw NumericError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

std::vector<double>& Tensor::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

// ---------------------------------------------------------------------------
// Snapshots

void write_snapshot(std::ostream& out, const Tensor& t) {
  const auto rank = static_cast<std::uint32_t>(t.shape().size());
  out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  for (std::size_t d : t.shape()) {
    const auto dim = static_cast<std::uint64_t>(d);
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  }
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_snapshot(std::istream& in, std::uint64_t& offset) {
  auto read = [&](void* dst, std::size_t n, const char* what) {
    if (!in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n))) {
      throw Error("corrupt tensor snapshot at offset " + std::to_string(offset) + ": truncated " + what);
    }
    offset += n;
  };
  std::uint32_t rank = 0;
  const std::uint64_t start = offset;
  read(&rank, sizeof(rank), "rank");
  if (rank > 8) throw Error("corrupt tensor snapshot at offset " + std::to_string(start) + ": rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t total = 1;
  for (auto& d : shape) {
    std::uint64_t dim = 0;
    read(&dim, sizeof(dim), "dimension");
    if (dim > (1ULL << 32)) throw Error("corrupt tensor snapshot at offset " + std::to_string(offset - 8) + ": dimension too large");
    total *= std::max<std::uint64_t>(dim, 1);
    if (total > (1ULL << 32)) throw Error("corrupt tensor snapshot at offset " + std::to_string(offset - 8) + ": tensor too large");
    d = static_cast<std::size_t>(dim);
  }
  Tensor t(std::move(shape));
  read(t.data().data(), t.size() * sizeof(double), "values");
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw Error("corrupt tensor snapshot at offset " + std::to_string(start) + ": non-finite value");
  }
  return t;
}

// ---------------------------------------------------------------------------
// Graph plumbing

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw NumericError("invalid graph variable");
  return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.bound ? *n.bound : n.value;
}

std::vector<double>& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  const std::size_t size = n.bound ? n.bound->size() : n.value.size();
  if (n.grad.size() != size) n.grad.assign(size, 0.0);
  return n.grad;
}

bool Graph::any_needs_grad(std::initializer_list<Var> vars) const {
  if (!record_) return false;
  return std::any_of(vars.begin(), vars.end(), [this](Var v) { return node(v).needs_grad; });
}

Var Graph::push(Tensor value, bool needs_grad, std::function<void(Graph&, std::size_t)> backward, const char* op) {
  for (double v : value.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value");
  }
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor t) { return push(std::move(t), false, nullptr, "constant"); }

Var Graph::param(const Tensor& p) {
  for (double v : p.data()) {
    if (!std::isfinite(v)) throw NumericError("param: non-finite value");
  }
  Node n;
  n.bound = &p;
  n.needs_grad = record_ && p.requires_grad();
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) throw NumericError("backward: loss must be a scalar, got " + shape_string(shape(loss)));
  if (!node(loss).needs_grad) return;
  grad_buffer(loss.id)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

void Graph::accumulate_param_grads(std::span<Tensor* const> params, double weight) const {
  for (const Node& n : nodes_) {
    if (!n.bound || n.grad.empty()) continue;
    for (Tensor* p : params) {
      if (p != n.bound) continue;
      auto& g = p->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += weight * n.grad[i];
    }
  }
}

void Graph::accumulate_param_grads(std::span<Tensor* const> params, std::span<std::vector<double>> out,
                                   double weight) const {
  if (out.size() != params.size()) throw NumericError("accumulate_param_grads: buffer count mismatch");
  for (const Node& n : nodes_) {
    if (!n.bound || n.grad.empty()) continue;
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k] != n.bound) continue;
      auto& g = out[k];
      if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += weight * n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Primitives

Var Graph::matmul(Var a, Var b, bool transpose_b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_2d("matmul", A);
  require_2d("matmul", B);
  const std::size_t m = A.shape()[0], k = A.shape()[1];
  const std::size_t n = transpose_b ? B.shape()[0] : B.shape()[1];
  if ((transpose_b ? B.shape()[1] : B.shape()[0]) != k) shape_error("matmul", A.shape(), B.shape());
  Tensor C({m, n});
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  double* pc = C.data().data();
  if (!transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = pa[i * k + p];
        if (aip != 0.0) axpy(aip, pb + p * n, pc + i * n, n);
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) pc[i * n + j] = dot(pa + i * k, pb + j * k, k);
    }
  }
  const bool ga = any_needs_grad({a}), gb = any_needs_grad({b});
  return push(std::move(C), ga || gb, [a, b, m, k, n, transpose_b, ga, gb](Graph& g, std::size_t self) {
    const double* pg = g.nodes_[self].grad.data();
    const double* pa = g.value(a).data().data();
    const double* pb = g.value(b).data().data();
    if (ga) {
      double* da = g.grad_buffer(a.id).data();
      for (std::size_t i = 0; i < m; ++i) {
        if (!transpose_b) {
          for (std::size_t p = 0; p < k; ++p) da[i * k + p] += dot(pg + i * n, pb + p * n, n);
        } else {
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = pg[i * n + j];
            if (gij != 0.0) axpy(gij, pb + j * k, da + i * k, k);
          }
        }
      }
    }
    if (gb) {
      double* db = g.grad_buffer(b.id).data();
      for (std::size_t i = 0; i < m; ++i) {
        if (!transpose_b) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip != 0.0) axpy(aip, pg + i * n, db + p * n, n);
          }
        } else {
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = pg[i * n + j];
            if (gij != 0.0) axpy(gij, pa + i * k, db + j * k, k);
          }
        }
      }
    }
  }, "matmul");
}

Var Graph::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const Shape& sa = A.shape();
  const Shape& sb = B.shape();
  const bool same = sa == sb;
  if (!same) {
    const bool trailing = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
    if (!trailing || B.size() == 0) shape_error("add", sa, sb);
  }
  Tensor C = A;
  C.set_requires_grad(false);
  C.clear_grad();
  const std::size_t nb = B.size();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i % nb];
  const bool ga = any_needs_grad({a}), gb = any_needs_grad({b});
  return push(std::move(C), ga || gb, [a, b, nb, ga, gb](Graph& g, std::size_t self) {
    const auto& gc = g.nodes_[self].grad;
    if (ga) {
      auto& da = g.grad_buffer(a.id);
      for (std::size_t i = 0; i < gc.size(); ++i) da[i] += gc[i];
    }
    if (gb) {
      auto& db = g.grad_buffer(b.id);
      for (std::size_t i = 0; i < gc.size(); ++i) db[i % nb] += gc[i];
    }
  }, "add");
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape() != B.shape()) shape_error("mul", A.shape(), B.shape());
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  const bool ga = any_needs_grad({a}), gb = any_needs_grad({b});
  return push(std::move(C), ga || gb, [a, b, ga, gb](Graph& g, std::size_t self) {
    const auto& gc = g.nodes_[self].grad;
    const Tensor& A = g.value(a);
    const Tensor& B = g.value(b);
    if (ga) {
      auto& da = g.grad_buffer(a.id);
      for (std::size_t i = 0; i < gc.size(); ++i) da[i] += gc[i] * B[i];
    }
    if (gb) {
      auto& db = g.grad_buffer(b.id);
      for (std::size_t i = 0; i < gc.size(); ++i) db[i] += gc[i] * A[i];
    }
  }, "mul");
}

Var Graph::scale(Var a, double s) {
  const Tensor& A = value(a);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = s * A[i];
  return push(std::move(C), any_needs_grad({a}), [a, s](Graph& g, std::size_t self) {
    const auto& gc = g.nodes_[self].grad;
    auto& da = g.grad_buffer(a.id);
    for (std::size_t i = 0; i < gc.size(); ++i) da[i] += s * gc[i];
  }, "scale");
}

Var Graph::gelu(Var a) {
  const Tensor& A = value(a);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = 0.5 * A[i] * (1.0 + std::erf(A[i] * std::numbers::sqrt2 / 2.0));
  return push(std::move(C), any_needs_grad({a}), [a](Graph& g, std::size_t self) {
    const auto& gc = g.nodes_[self].grad;
    const Tensor& A = g.value(a);
    auto& da = g.grad_buffer(a.id);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < gc.size(); ++i) {
      const double x = A[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      da[i] += gc[i] * (cdf + x * pdf);
    }
  }, "gelu");
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = value(x);
  require_2d("layer_norm", X);
  const std::size_t rows = X.shape()[0], cols = X.shape()[1];
  if (value(gain).size() != cols) shape_error("layer_norm", X.shape(), value(gain).shape());
  if (value(bias).size() != cols) shape_error("layer_norm", X.shape(), value(bias).shape());
  const Tensor& G = value(gain);
  const Tensor& Bv = value(bias);
  Tensor Y(X.shape());
  std::vector<double> xhat(X.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = X.data().data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += px[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (px[c] - mean) * (px[c] - mean);
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (px[c] - mean) * rstd[r];
      xhat[r * cols + c] = h;
      Y[r * cols + c] = h * G[c] + Bv[c];
    }
  }
  const bool gx = any_needs_grad({x}), gg = any_needs_grad({gain}), gbias = any_needs_grad({bias});
  if (!(gx || gg || gbias)) return push(std::move(Y), false, nullptr, "layer_norm");
  return push(std::move(Y), true,
              [x, gain, bias, rows, cols, gx, gg, gbias, xhat = std::move(xhat), rstd = std::move(rstd)](
                  Graph& g, std::size_t self) {
                const auto& gy = g.nodes_[self].grad;
                const Tensor& G = g.value(gain);
                if (gg) {
                  auto& dg = g.grad_buffer(gain.id);
                  for (std::size_t i = 0; i < gy.size(); ++i) dg[i % cols] += gy[i] * xhat[i];
                }
                if (gbias) {
                  auto& db = g.grad_buffer(bias.id);
                  for (std::size_t i = 0; i < gy.size(); ++i) db[i % cols] += gy[i];
                }
                if (gx) {
                  auto& dx = g.grad_buffer(x.id);
                  std::vector<double> dh(cols);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                      dh[c] = gy[r * cols + c] * G[c];
                      mean_dh += dh[c];
                      mean_dh_h += dh[c] * xhat[r * cols + c];
                    }
                    mean_dh /= static_cast<double>(cols);
                    mean_dh_h /= static_cast<double>(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                      dx[r * cols + c] += rstd[r] * (dh[c] - mean_dh - xhat[r * cols + c] * mean_dh_h);
                    }
                  }
                }
              },
              "layer_norm");
}

namespace {

// Softmax over the first `width` entries of a row; the rest are zeroed.
void softmax_row(const double* x, double* y, std::size_t width, std::size_t cols) {
  double m = x[0];
  for (std::size_t j = 1; j < width; ++j) m = std::max(m, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < width; ++j) s += (y[j] = std::exp(x[j] - m));
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < width; ++j) y[j] *= inv;
  for (std::size_t j = width; j < cols; ++j) y[j] = 0.0;
}

void softmax_row_backward(const double* y, const double* gy, double* dx, std::size_t width) {
  const double d = dot(gy, y, width);
  for (std::size_t j = 0; j < width; ++j) dx[j] += y[j] * (gy[j] - d);
}

}  // namespace

Var Graph::softmax(Var a) {
  const Tensor& A = value(a);
  if (A.shape().empty()) throw NumericError("softmax: scalar input");
  const std::size_t cols = A.shape().back();
  const std::size_t rows = A.size() / cols;
  Tensor Y(A.shape());
  for (std::size_t r = 0; r < rows; ++r) softmax_row(A.data().data() + r * cols, Y.data().data() + r * cols, cols, cols);
  return push(std::move(Y), any_needs_grad({a}), [a, rows, cols](Graph& g, std::size_t self) {
    const double* y = g.nodes_[self].value.data().data();
    const double* gy = g.nodes_[self].grad.data();
    double* dx = g.grad_buffer(a.id).data();
    for (std::size_t r = 0; r < rows; ++r) softmax_row_backward(y + r * cols, gy + r * cols, dx + r * cols, cols);
  }, "softmax");
}

Var Graph::causal_softmax(Var a) {
  const Tensor& A = value(a);
  require_2d("causal_softmax", A);
  const std::size_t n = A.shape()[0];
  if (A.shape()[1] != n) shape_error("causal_softmax", A.shape(), Shape{n, n});
  Tensor Y(A.shape());
  for (std::size_t r = 0; r < n; ++r) softmax_row(A.data().data() + r * n, Y.data().data() + r * n, r + 1, n);
  return push(std::move(Y), any_needs_grad({a}), [a, n](Graph& g, std::size_t self) {
    const double* y = g.nodes_[self].value.data().data();
    const double* gy = g.nodes_[self].grad.data();
    double* dx = g.grad_buffer(a.id).data();
    for (std::size_t r = 0; r < n; ++r) softmax_row_backward(y + r * n, gy + r * n, dx + r * n, r + 1);
  }, "causal_softmax");
}

Var Graph::embedding(Var table, std::span<const int> ids) {
  const Tensor& T = value(table);
  require_2d("embedding", T);
  const std::size_t vocab = T.shape()[0], dim = T.shape()[1];
  Tensor E({ids.size(), dim});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw NumericError("embedding: id " + std::to_string(ids[t]) + " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(T.data().data() + static_cast<std::size_t>(ids[t]) * dim, dim, E.data().data() + t * dim);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return push(std::move(E), any_needs_grad({table}), [table, dim, saved = std::move(saved)](Graph& g, std::size_t self) {
    const double* ge = g.nodes_[self].grad.data();
    double* dt = g.grad_buffer(table.id).data();
    for (std::size_t t = 0; t < saved.size(); ++t) axpy(1.0, ge + t * dim, dt + static_cast<std::size_t>(saved[t]) * dim, dim);
  }, "embedding");
}

Var Graph::slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = value(a);
  require_2d("slice_rows", A);
  const std::size_t cols = A.shape()[1];
  if (start + count > A.shape()[0]) shape_error("slice_rows", A.shape(), Shape{start + count, cols});
  Tensor S({count, cols});
  std::copy_n(A.data().data() + start * cols, count * cols, S.data().data());
  return push(std::move(S), any_needs_grad({a}), [a, start, count, cols](Graph& g, std::size_t self) {
    const auto& gs = g.nodes_[self].grad;
    double* da = g.grad_buffer(a.id).data() + start * cols;
    for (std::size_t i = 0; i < count * cols; ++i) da[i] += gs[i];
  }, "slice_rows");
}

Var Graph::slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = value(a);
  require_2d("slice_cols", A);
  const std::size_t rows = A.shape()[0], cols = A.shape()[1];
  if (start + count > cols) shape_error("slice_cols", A.shape(), Shape{rows, start + count});
  Tensor S({rows, count});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(A.data().data() + r * cols + start, count, S.data().data() + r * count);
  return push(std::move(S), any_needs_grad({a}), [a, start, count, rows, cols](Graph& g, std::size_t self) {
    const auto& gs = g.nodes_[self].grad;
    double* da = g.grad_buffer(a.id).data();
    for (std::size_t r = 0; r < rows; ++r) axpy(1.0, gs.data() + r * count, da + r * cols + start, count);
  }, "slice_cols");
}

Var Graph::gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& A = value(a);
  require_2d("gather_rows", A);
  const std::size_t cols = A.shape()[1];
  Tensor S({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= A.shape()[0]) shape_error("gather_rows", A.shape(), Shape{rows[i] + 1, cols});
    std::copy_n(A.data().data() + rows[i] * cols, cols, S.data().data() + i * cols);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return push(std::move(S), any_needs_grad({a}), [a, cols, saved = std::move(saved)](Graph& g, std::size_t self) {
    const double* gs = g.nodes_[self].grad.data();
    double* da = g.grad_buffer(a.id).data();
    for (std::size_t i = 0; i < saved.size(); ++i) axpy(1.0, gs + i * cols, da + saved[i] * cols, cols);
  }, "gather_rows");
}

Var Graph::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_rows: no inputs");
  const std::size_t cols = value(parts[0]).cols();
  std::size_t rows = 0;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& P = value(p);
    require_2d("concat_rows", P);
    if (P.shape()[1] != cols) shape_error("concat_rows", value(parts[0]).shape(), P.shape());
    rows += P.shape()[0];
    needs = needs || any_needs_grad({p});
  }
  Tensor C({rows, cols});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = value(p);
    std::copy(P.data().begin(), P.data().end(), C.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += P.size();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return push(std::move(C), needs, [saved = std::move(saved)](Graph& g, std::size_t self) {
    const auto& gc = g.nodes_[self].grad;
    std::size_t off = 0;
    for (Var p : saved) {
      const std::size_t n = g.value(p).size();
      if (g.nodes_[p.id].needs_grad) {
        auto& dp = g.grad_buffer(p.id);
        for (std::size_t i = 0; i < n; ++i) dp[i] += gc[off + i];
      }
      off += n;
    }
  }, "concat_rows");
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_cols: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& P = value(p);
    require_2d("concat_cols", P);
    if (P.shape()[0] != rows) shape_error("concat_cols", value(parts[0]).shape(), P.shape());
    cols += P.shape()[1];
    needs = needs || any_needs_grad({p});
  }
  Tensor C({rows, cols});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = value(p);
    const std::size_t w = P.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(P.data().data() + r * w, w, C.data().data() + r * cols + off);
    off += w;
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return push(std::move(C), needs, [saved = std::move(saved), rows, cols](Graph& g, std::size_t self) {
    const auto& gc = g.nodes_[self].grad;
    std::size_t off = 0;
    for (Var p : saved) {
      const std::size_t w = g.value(p).shape()[1];
      if (g.nodes_[p.id].needs_grad) {
        double* dp = g.grad_buffer(p.id).data();
        for (std::size_t r = 0; r < rows; ++r) axpy(1.0, gc.data() + r * cols + off, dp + r * w, w);
      }
      off += w;
    }
  }, "concat_cols");
}

Var Graph::sum(Var a) {
  const Tensor& A = value(a);
  double s = 0.0;
  for (double v : A.data()) s += v;
  return push(Tensor(Shape{}, std::vector<double>{s}), any_needs_grad({a}), [a](Graph& g, std::size_t self) {
    const double gs = g.nodes_[self].grad[0];
    for (double& d : g.grad_buffer(a.id)) d += gs;
  }, "sum");
}

Var Graph::cross_entropy(Var logits, std::span<const int> targets, const std::vector<bool>& mask) {
  const Tensor& L = value(logits);
  require_2d("cross_entropy", L);
  const std::size_t rows = L.shape()[0], vocab = L.shape()[1];
  if (targets.size() != rows || mask.size() != rows) {
    shape_error("cross_entropy", L.shape(), Shape{targets.size(), mask.size()});
  }
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (count == 0) throw Error("cross_entropy: loss mask has no true entries");
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw NumericError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    const double* x = L.data().data() + r * vocab;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(x, x + vocab) - x);
    const double m = x[arg];
    double rest = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      if (j != arg) rest += std::exp(x[j] - m);
    }
    total += (m - x[targets[r]]) + std::log1p(rest);
  }
  const double loss = total / static_cast<double>(count);
  std::vector<int> saved_targets(targets.begin(), targets.end());
  return push(Tensor(Shape{}, std::vector<double>{loss}), any_needs_grad({logits}),
              [logits, rows, vocab, count, mask, saved_targets = std::move(saved_targets)](Graph& g, std::size_t self) {
                const double scale = g.nodes_[self].grad[0] / static_cast<double>(count);
                const Tensor& L = g.value(logits);
                double* dl = g.grad_buffer(logits.id).data();
                std::vector<double> p(vocab);
                for (std::size_t r = 0; r < rows; ++r) {
                  if (!mask[r]) continue;
                  softmax_row(L.data().data() + r * vocab, p.data(), vocab, vocab);
                  p[static_cast<std::size_t>(saved_targets[r])] -= 1.0;
                  axpy(scale, p.data(), dl + r * vocab, vocab);
                }
              },
              "cross_entropy");
}

// ---------------------------------------------------------------------------
// Gradient checking and parameter updates

GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor* const> params, const GradCheckOptions& opts) {
  if (!(opts.h > 0.0)) throw Error("grad_check: step h must be positive");
  std::vector<bool> saved_flags;
  for (Tensor* p : params) {
    saved_flags.push_back(p->requires_grad());
    p->set_requires_grad(true);
    p->clear_grad();
  }
  auto restore = [&] {
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i]->set_requires_grad(saved_flags[i]);
      params[i]->clear_grad();
    }
  };
  auto evaluate = [&f]() {
    Graph g(false);
    const double v = g.value(f(g)).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
    return v;
  };

  GradCheckResult result;
  try {
    Graph g(true);
    Var loss = f(g);
    if (!std::isfinite(g.value(loss).item())) throw NumericError("grad_check: function value is not finite");
    g.backward(loss);
    g.accumulate_param_grads(params);

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t t = 0; t < params.size(); ++t) {
      for (std::size_t i = 0; i < params[t]->size(); ++i) coords.emplace_back(t, i);
    }
    if (coords.size() > opts.max_coords) {
      Rng rng(opts.seed);
      for (std::size_t i = 0; i < opts.max_coords; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(opts.max_coords);
    }
    for (auto [t, i] : coords) {
      Tensor& p = *params[t];
      const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
      const double orig = p[i];
      p[i] = orig + opts.h;
      const double fp = evaluate();
      p[i] = orig - opts.h;
      const double fm = evaluate();
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double diff = std::abs(analytic - numeric);
      if (diff > 0.0) {
        const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.abs_floor});
        result.max_rel_error = std::max(result.max_rel_error, diff / denom);
      }
      ++result.coords_checked;
    }
  } catch (...) {
    restore();
    throw;
  }
  restore();
  return result;
}

double grad_norm(std::span<Tensor* const> params) {
  double s = 0.0;
  for (Tensor* p : params) {
    if (!p->requires_grad() || !p->has_grad()) continue;
    for (double g : p->grad()) s += g * g;
  }
  return std::sqrt(s);
}

namespace {

double clip_factor(std::span<Tensor* const> params, std::optional<double> clip) {
  if (!clip) return 1.0;
  if (!(*clip > 0.0)) throw Error("gradient clip must be positive");
  const double norm = grad_norm(params);
  return norm > *clip ? *clip / norm : 1.0;
}

}  // namespace

void sgd_step(std::span<Tensor* const> params, double lr, std::optional<double> clip) {
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  const double factor = clip_factor(params, clip);
  for (Tensor* p : params) {
    if (p->requires_grad() && p->has_grad()) {
      const auto& g = p->grad();
      auto d = p->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * factor * g[i];
    }
    p->clear_grad();
  }
}

void Adam::step(std::span<Tensor* const> params, double lr, std::optional<double> clip) {
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  const double factor = clip_factor(params, clip);
  if (moments_.size() != 2 * params.size()) {
    moments_.clear();
    for (Tensor* p : params) {
      moments_.emplace_back(p->shape());
      moments_.emplace_back(p->shape());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor* p = params[k];
    if (p->requires_grad() && p->has_grad()) {
      const auto& g = p->grad();
      auto m = moments_[2 * k].data();
      auto v = moments_[2 * k + 1].data();
      auto d = p->data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double gi = factor * g[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        d[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
    p->clear_grad();
  }
}

}  // namespace scitune
