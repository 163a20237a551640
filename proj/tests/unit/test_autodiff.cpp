#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "doctest.h"
#include "latentctl/autodiff.hpp"
#include "latentctl/errors.hpp"

using namespace latentctl;

namespace {

Tensor random_row(std::size_t d, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(1, d);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Random fixed weights keep weighted sums from having structurally zero gradients.
Var weighted_sum(Graph& g, Var y, std::uint64_t seed) {
  Tensor w = random_row(y.cols(), seed, 0.5, 1.5).reshaped(1, y.cols());
  if (y.rows() != 1) {
    Tensor full = Tensor::zeros(y.rows(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 0; c < y.cols(); ++c) full.at(r, c) = w[c] * (1.0 + 0.1 * static_cast<double>(r));
    w = full;
  }
  return sum(y * g.constant(w));
}

struct Case {
  std::string name;
  std::function<Var(Graph&, Var)> op;
  double lo = -2.0, hi = 2.0;
};

}  // namespace

TEST_CASE("sum of squares gives value and gradient") {
  const auto ev = evaluate_with_gradients([](Graph&, std::span<const Var> in) { return sum(square(in[0])); },
                                          {Tensor::vector({1.0, 2.0})});
  CHECK(ev.value.item() == 5.0);
  CHECK(ev.gradients[0][0] == 2.0);
  CHECK(ev.gradients[0][1] == 4.0);
}

TEST_CASE("identity function has unit gradient") {
  const auto ev =
      evaluate_with_gradients([](Graph&, std::span<const Var> in) { return in[0]; }, {Tensor::vector({3.0})});
  CHECK(ev.value.item() == 3.0);
  CHECK(ev.gradients[0][0] == 1.0);
}

TEST_CASE("finite difference check on simple functions") {
  CHECK(finite_difference_check([](Graph&, Var x) { return sum(square(x)); }, Tensor::vector({1.0, 2.0}), 1e-5) <
        1e-8);
  CHECK(finite_difference_check([](Graph&, Var x) { return sum(exp(x)); }, Tensor::vector({0.0}), 1e-5) < 1e-9);
  CHECK(finite_difference_check([](Graph& g, Var) { return g.constant(Tensor::scalar(4.0)); },
                                Tensor::vector({0.3, 0.1}), 1e-5) == 0.0);
  CHECK_THROWS_AS(finite_difference_check([](Graph&, Var x) { return sum(x); }, Tensor::vector({1e20}), 1e-5),
                  NumericalError);
  CHECK_THROWS(finite_difference_check([](Graph&, Var x) { return sum(x); }, Tensor::vector({1.0}), 0.0));
}

TEST_CASE("every primitive matches central differences") {
  const std::vector<Case> cases = {
      {"add", [](Graph& g, Var x) { return x + g.constant(Tensor({1, x.cols()}, 0.3)); }},
      {"sub", [](Graph&, Var x) { return x - x * 0.25; }},
      {"mul", [](Graph&, Var x) { return x * x; }},
      {"div", [](Graph&, Var x) { return x / (square(x) + 1.0); }},
      {"neg", [](Graph&, Var x) { return -x; }},
      {"matmul", [](Graph& g, Var x) {
         Tensor m = Tensor::zeros(x.cols(), 3);
         for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::sin(static_cast<double>(i) + 0.5);
         return matmul(x, g.constant(m));
       }},
      {"affine", [](Graph& g, Var x) {
         Tensor w = Tensor::zeros(3, x.cols());
         for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(static_cast<double>(i));
         return affine(x, g.constant(w), g.constant(Tensor::vector({0.1, -0.2, 0.3})));
       }},
      {"exp", [](Graph&, Var x) { return exp(x); }},
      {"log", [](Graph&, Var x) { return log(x); }, 0.2, 2.0},
      {"tanh", [](Graph&, Var x) { return tanh(x); }},
      {"sigmoid", [](Graph&, Var x) { return sigmoid(x); }},
      {"leaky_relu", [](Graph&, Var x) { return leaky_relu(x, 0.1); }, 0.1, 2.0},
      {"leaky_relu_neg", [](Graph&, Var x) { return leaky_relu(x, 0.1); }, -2.0, -0.1},
      {"softplus", [](Graph&, Var x) { return softplus(x); }},
      {"abs", [](Graph&, Var x) { return abs(x); }, 0.1, 2.0},
      {"log_abs", [](Graph&, Var x) { return log_abs(x); }, -2.0, -0.2},
      {"atan2", [](Graph&, Var x) { return atan2(x, square(x) + 0.5); }},
      {"clamp_min", [](Graph&, Var x) { return clamp_min(x, -5.0); }},
      {"softmax", [](Graph&, Var x) { return softmax(x); }},
      {"log_softmax", [](Graph&, Var x) { return log_softmax(x); }},
      {"logsumexp", [](Graph&, Var x) { return logsumexp(x); }},
      {"mean", [](Graph&, Var x) { return mean(square(x)); }},
      {"sum_rows", [](Graph&, Var x) { return sum_rows(x * x); }},
      {"sum_cols", [](Graph&, Var x) { return sum_cols(x * x); }},
      {"norm", [](Graph&, Var x) { return norm_rows(x); }},
      {"cosine", [](Graph& g, Var x) {
         Tensor b = Tensor::zeros(1, x.cols());
         for (std::size_t i = 0; i < b.size(); ++i) b[i] = 1.0 + 0.3 * static_cast<double>(i);
         return cosine_rows(x, g.constant(b));
       }},
      {"slice_concat", [](Graph&, Var x) {
         if (x.cols() < 2) return concat_cols({x, square(x)});
         return concat_cols({slice_cols(x, 1, x.cols()), exp(slice_cols(x, 0, 1))});
       }},
      {"repeat_transpose", [](Graph&, Var x) { return transpose(repeat_rows(x, 3)); }},
  };
  for (std::size_t d : {1u, 2u, 8u}) {
    for (const Case& c : cases) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const Tensor point = random_row(d, 100 * d + seed, c.lo, c.hi);
        const double err =
            finite_difference_check([&](Graph& g, Var x) { return weighted_sum(g, c.op(g, x), seed + 7); }, point,
                                    1e-5);
        INFO(c.name << " d=" << d << " seed=" << seed);
        CHECK(err < 1e-5);
      }
    }
  }
}

TEST_CASE("broadcast gradients reduce over expanded dimensions") {
  const Tensor a = Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}});
  const Tensor row = Tensor::vector({0.5, -1.0});
  const Tensor col = Tensor::matrix({{2.0}, {3.0}, {4.0}});
  const auto ev = evaluate_with_gradients(
      [](Graph&, std::span<const Var> in) { return sum((in[0] * in[1]) / in[2] - in[1]); }, {a, row, col});
  for (std::size_t j = 0; j < 2; ++j) {
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) expect += a.at(i, j) / col[i] - 1.0;
    CHECK(ev.gradients[1][j] == doctest::Approx(expect).epsilon(1e-14));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    double expect = 0.0;
    for (std::size_t j = 0; j < 2; ++j) expect -= a.at(i, j) * row[j] / (col[i] * col[i]);
    CHECK(ev.gradients[2][i] == doctest::Approx(expect).epsilon(1e-14));
  }
  CHECK(ev.gradients[1].same_shape(row));
}

TEST_CASE("backward pass is linear") {
  const Tensor x = random_row(8, 42);
  auto f = [](Graph&, Var v) { return sum(tanh(v) * exp(v)); };
  auto h = [](Graph&, Var v) { return sum(log_softmax(v)) + mean(square(v)); };
  const double a = 1.7, b = -0.4;
  const auto gf = evaluate_with_gradients([&](Graph& g, std::span<const Var> in) { return f(g, in[0]); }, {x});
  const auto gh = evaluate_with_gradients([&](Graph& g, std::span<const Var> in) { return h(g, in[0]); }, {x});
  const auto gc = evaluate_with_gradients(
      [&](Graph& g, std::span<const Var> in) { return a * f(g, in[0]) + b * h(g, in[0]); }, {x});
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::abs(gc.gradients[0][i] - (a * gf.gradients[0][i] + b * gh.gradients[0][i])) < 1e-12);
}

TEST_CASE("evaluation is deterministic") {
  const Tensor x = random_row(8, 3);
  auto f = [](Graph&, std::span<const Var> in) { return sum(softplus(in[0]) * sigmoid(in[0])); };
  const auto e1 = evaluate_with_gradients(f, {x});
  const auto e2 = evaluate_with_gradients(f, {x});
  CHECK(e1.value.item() == e2.value.item());
  CHECK(e1.gradients[0].storage() == e2.gradients[0].storage());
}

TEST_CASE("non-finite values name the offending node") {
  Graph g;
  const Var x = g.input(Tensor::vector({-1.0}));
  try {
    log(x);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("log") != std::string::npos);
    CHECK(std::string(e.what()).find("#1") != std::string::npos);
  }
}

TEST_CASE("infinite values are tolerated only when allowed") {
  Graph g(GraphOptions{.allow_infinite = true});
  const Var x = g.constant(Tensor::vector({1000.0}));
  CHECK(std::isinf(exp(x).value()[0]));
  Graph strict;
  CHECK_THROWS_AS(exp(strict.constant(Tensor::vector({1000.0}))), NumericalError);
}

TEST_CASE("gradient of non-scalar output is rejected") {
  CHECK_THROWS_AS(
      evaluate_with_gradients([](Graph&, std::span<const Var> in) { return square(in[0]); }, {Tensor::vector({1, 2})}),
      DimensionError);
}

TEST_CASE("constants do not receive gradients") {
  Graph g;
  const Var c = g.constant(Tensor::vector({2.0}));
  const Var x = g.input(Tensor::vector({3.0}));
  const Var y = sum(c * x);
  g.backward(y);
  CHECK(g.grad(x)[0] == 2.0);
  CHECK(g.grad(c)[0] == 0.0);
  CHECK_FALSE(g.requires_grad(c));
}
