#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "scitune/error.hpp"
#include "scitune/rng.hpp"
#include "scitune/tensor.hpp"

using namespace scitune;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

using OpFn = std::function<Var(Graph&, const std::vector<Var>&)>;

// Compares the reverse sweep of sum(op(inputs) * probe) with central
// differences computed here, coordinate by coordinate. Returns the worst
// relative error.
double fd_error(std::vector<Tensor> inputs, const OpFn& op, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<Tensor*> ptrs;
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    ptrs.push_back(&t);
  }
  Tensor probe;
  auto eval = [&](bool grad) {
    Graph g(grad);
    std::vector<Var> vars;
    for (Tensor& t : inputs) vars.push_back(g.param(t));
    Var out = op(g, vars);
    if (probe.size() == 0) probe = random_tensor(g.shape(out), rng);
    Var loss = g.sum(g.mul(out, g.constant(probe)));
    if (grad) {
      g.backward(loss);
      g.accumulate_param_grads(ptrs);
    }
    return g.value(loss).item();
  };
  eval(true);
  const double h = 1e-5;
  double worst = 0.0;
  for (Tensor& t : inputs) {
    const std::vector<double> analytic = t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = eval(false);
      t[i] = orig - h;
      const double down = eval(false);
      t[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Graph g(false);
  Var x = g.constant(Tensor({2, 5}, 3.25));
  const Tensor& s = g.value(g.softmax(x));
  for (double v : s.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("matmul by identity") {
  Rng rng(3);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  Tensor a = random_tensor({4, 3}, rng);
  Graph g(false);
  CHECK(g.value(g.matmul(g.constant(eye), g.constant(a))).same_values(a));
}

TEST_CASE("adjoints match central differences") {
  Rng rng(11);
  const double tol = 1e-6;
  SUBCASE("matmul") {
    CHECK(fd_error({random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.matmul(v[0], v[1]); }) < tol);
  }
  SUBCASE("matmul transposed") {
    CHECK(fd_error({random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.matmul(v[0], v[1], true); }) < tol);
  }
  SUBCASE("add") {
    CHECK(fd_error({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); }) < tol);
  }
  SUBCASE("add broadcast") {
    CHECK(fd_error({random_tensor({3, 4}, rng), random_tensor({4}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); }) < tol);
  }
  SUBCASE("mul") {
    CHECK(fd_error({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.mul(v[0], v[1]); }) < tol);
  }
  SUBCASE("scale") {
    CHECK(fd_error({random_tensor({2, 3}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.scale(v[0], -1.7); }) < tol);
  }
  SUBCASE("gelu") {
    CHECK(fd_error({random_tensor({3, 6}, rng, -3.0, 3.0)},
                   [](Graph& g, const std::vector<Var>& v) { return g.gelu(v[0]); }) < tol);
  }
  SUBCASE("layer_norm") {
    CHECK(fd_error({random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.layer_norm(v[0], v[1], v[2]); }) < tol);
  }
  SUBCASE("softmax") {
    CHECK(fd_error({random_tensor({3, 5}, rng, -2.0, 2.0)},
                   [](Graph& g, const std::vector<Var>& v) { return g.softmax(v[0]); }) < tol);
  }
  SUBCASE("causal_softmax") {
    CHECK(fd_error({random_tensor({4, 4}, rng, -2.0, 2.0)},
                   [](Graph& g, const std::vector<Var>& v) { return g.causal_softmax(v[0]); }) < tol);
  }
  SUBCASE("embedding") {
    const std::vector<int> ids = {2, 0, 2, 4};
    CHECK(fd_error({random_tensor({5, 3}, rng)},
                   [&](Graph& g, const std::vector<Var>& v) { return g.embedding(v[0], ids); }) < tol);
  }
  SUBCASE("slice_rows") {
    CHECK(fd_error({random_tensor({5, 3}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.slice_rows(v[0], 1, 3); }) < tol);
  }
  SUBCASE("slice_cols") {
    CHECK(fd_error({random_tensor({3, 6}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.slice_cols(v[0], 2, 3); }) < tol);
  }
  SUBCASE("gather_rows") {
    const std::vector<std::size_t> rows = {3, 0, 3};
    CHECK(fd_error({random_tensor({4, 3}, rng)},
                   [&](Graph& g, const std::vector<Var>& v) { return g.gather_rows(v[0], rows); }) < tol);
  }
  SUBCASE("concat_rows") {
    CHECK(fd_error({random_tensor({2, 3}, rng), random_tensor({1, 3}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.concat_rows(v); }) < tol);
  }
  SUBCASE("concat_cols") {
    CHECK(fd_error({random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.concat_cols(v); }) < tol);
  }
  SUBCASE("sum") {
    CHECK(fd_error({random_tensor({3, 3}, rng)},
                   [](Graph& g, const std::vector<Var>& v) { return g.sum(v[0]); }) < tol);
  }
  SUBCASE("cross_entropy") {
    const std::vector<int> targets = {1, 4, 0, 2};
    const std::vector<bool> mask = {true, false, true, true};
    CHECK(fd_error({random_tensor({4, 5}, rng, -2.0, 2.0)},
                   [&](Graph& g, const std::vector<Var>& v) { return g.cross_entropy(v[0], targets, mask); }) <
          tol);
  }
}

TEST_CASE("cross_entropy values") {
  SUBCASE("uniform logits give ln V") {
    Graph g(false);
    const std::vector<int> targets = {3};
    Var l = g.cross_entropy(g.constant(Tensor({1, 8}, 0.0)), targets, {true});
    CHECK(g.value(l).item() == doctest::Approx(std::log(8.0)).epsilon(1e-15));
  }
  SUBCASE("saturated target") {
    Tensor logits({1, 8});
    logits[5] = 50.0;
    Graph g(false);
    const std::vector<int> targets = {5};
    CHECK(g.value(g.cross_entropy(g.constant(logits), targets, {true})).item() < 1e-20);
  }
  SUBCASE("matches direct softmax then log") {
    Rng rng(5);
    Tensor logits = random_tensor({3, 5}, rng, -3.0, 3.0);
    const std::vector<int> targets = {4, 0, 2};
    double expect = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      double z = 0.0;
      for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits[r * 5 + c]);
      expect += -std::log(std::exp(logits[r * 5 + targets[r]]) / z);
    }
    expect /= 3.0;
    Graph g(false);
    const double got = g.value(g.cross_entropy(g.constant(logits), targets, {true, true, true})).item();
    CHECK(std::abs(got - expect) < 1e-12);
  }
}

TEST_CASE("softmax rows sum to one and layer_norm rows are centered") {
  Rng rng(8);
  Graph g(false);
  Var x = g.constant(random_tensor({6, 9}, rng, -4.0, 4.0));
  const Tensor s = g.value(g.softmax(x));
  const Tensor n = g.value(g.layer_norm(x, g.constant(Tensor({9}, 1.0)), g.constant(Tensor({9}, 0.0))));
  for (std::size_t r = 0; r < 6; ++r) {
    double sum = 0.0, mean = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      sum += s[r * 9 + c];
      mean += n[r * 9 + c];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(std::abs(mean / 9.0) < 1e-10);
  }
}

TEST_CASE("non-finite values raise") {
  Graph g(false);
  Var x = g.constant(Tensor({2}, 1e300));
  CHECK_THROWS_AS(g.scale(x, 1e300), NumericError);
  CHECK_THROWS_AS(g.constant(Tensor({1}, std::nan(""))), NumericError);
}

TEST_CASE("shape mismatches raise") {
  Graph g(false);
  CHECK_THROWS_AS(g.matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3}))), NumericError);
  CHECK_THROWS_AS(g.add(g.constant(Tensor({2, 3})), g.constant(Tensor({2}))), NumericError);
}

TEST_CASE("grad_check") {
  SUBCASE("sum of squares") {
    Rng rng(2);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor* ps[] = {&x};
    auto r = grad_check([&](Graph& g) { Var v = g.param(x); return g.sum(g.mul(v, v)); }, ps);
    CHECK(r.coords_checked == 12);
    CHECK(r.max_rel_error < 1e-9);
    CHECK_FALSE(x.requires_grad());
  }
  SUBCASE("constant function") {
    Tensor x({3}, 1.0);
    Tensor* ps[] = {&x};
    auto r = grad_check([&](Graph& g) { g.param(x); return g.sum(g.constant(Tensor({1}, 4.0))); }, ps);
    CHECK(r.max_rel_error == 0.0);
  }
  SUBCASE("subsamples large tensors") {
    Tensor x({50, 50}, 0.5);
    Tensor* ps[] = {&x};
    GradCheckOptions o;
    o.max_coords = 40;
    auto r = grad_check([&](Graph& g) { Var v = g.param(x); return g.sum(g.mul(v, v)); }, ps, o);
    CHECK(r.coords_checked == 40);
  }
}

TEST_CASE("sgd_step") {
  SUBCASE("plain update") {
    Tensor p({1}, 1.0);
    p.set_requires_grad(true);
    p.grad()[0] = 2.0;
    Tensor* ps[] = {&p};
    sgd_step(ps, 0.1);
    CHECK(p[0] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK_FALSE(p.has_grad());
  }
  SUBCASE("frozen tensor is untouched") {
    Tensor p({3}, 1.5);
    p.grad() = {1.0, 2.0, 3.0};
    Tensor before = p;
    Tensor* ps[] = {&p};
    sgd_step(ps, 0.1);
    CHECK(p.same_values(before));
  }
  SUBCASE("clipping bounds the update norm") {
    Tensor a({2}, 0.0), b({1}, 0.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    a.grad() = {6.0, 0.0};
    b.grad() = {8.0};  // norm 10
    Tensor* ps[] = {&a, &b};
    CHECK(grad_norm(ps) == doctest::Approx(10.0));
    sgd_step(ps, 0.05, 1.0);
    const double norm = std::sqrt(a[0] * a[0] + a[1] * a[1] + b[0] * b[0]);
    CHECK(std::abs(norm - 0.05) < 1e-12);
  }
  SUBCASE("rejects non-positive lr") {
    Tensor p({1}, 1.0);
    Tensor* ps[] = {&p};
    CHECK_THROWS(sgd_step(ps, 0.0));
  }
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  Tensor p({3}, 0.0), frozen({2}, 1.0);
  p.set_requires_grad(true);
  p.grad() = {0.5, -2.0, 0.0};
  frozen.grad() = {1.0, 1.0};
  Tensor* ps[] = {&p, &frozen};
  Adam adam;
  adam.step(ps, 0.01);
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(p[2] == 0.0);
  CHECK(frozen[0] == 1.0);
  CHECK(adam.steps() == 1);
}

TEST_CASE("snapshot round trip and offsets") {
  Rng rng(4);
  Tensor t = random_tensor({2, 3}, rng);
  std::stringstream s;
  write_snapshot(s, t);
  std::uint64_t off = 0;
  Tensor back = read_snapshot(s, off);
  CHECK(back.same_values(t));
  CHECK(off == 4 + 2 * 8 + 6 * 8);

  std::string bytes = s.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  std::uint64_t off2 = 0;
  CHECK_THROWS(read_snapshot(cut, off2));
}
