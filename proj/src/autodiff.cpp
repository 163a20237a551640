#include "latentctl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "latentctl/errors.hpp"

namespace latentctl {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Affine: return "affine";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Softplus: return "softplus";
    case OpKind::Square: return "square";
    case OpKind::Abs: return "abs";
    case OpKind::LogAbs: return "log_abs";
    case OpKind::Atan2: return "atan2";
    case OpKind::ClampMin: return "clamp_min";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LogSumExp: return "logsumexp";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SumRows: return "sum_rows";
    case OpKind::SumCols: return "sum_cols";
    case OpKind::NormRows: return "norm_rows";
    case OpKind::CosineRows: return "cosine_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::RepeatRows: return "repeat_rows";
    case OpKind::Transpose: return "transpose";
  }
  return "unknown";
}

const Tensor& Var::value() const { return graph->value(id); }

Graph::Graph(GraphOptions options) : options_(options) { nodes_.reserve(256); }

Var Graph::input(Tensor value) {
  nodes_.push_back(Node{OpKind::Input, std::move(value), {}, {}, options_.record, false});
  check_value(nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::Constant, std::move(value), {}, {}, false, false});
  check_value(nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(OpKind kind, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  if (options_.record) {
    for (const Var& v : inputs) {
      if (v.graph != this) throw DimensionError("operands belong to different graphs");
      needs = needs || nodes_[v.id].requires_grad;
    }
  }
  nodes_.push_back(Node{kind, std::move(value), {}, needs ? std::move(backward) : Backward{}, needs,
                        false});
  check_value(nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(OpKind kind, Tensor value, const std::vector<Var>& inputs, Backward backward) {
  bool needs = false;
  if (options_.record) {
    for (const Var& v : inputs) {
      if (v.graph != this) throw DimensionError("operands belong to different graphs");
      needs = needs || nodes_[v.id].requires_grad;
    }
  }
  nodes_.push_back(Node{kind, std::move(value), {}, needs ? std::move(backward) : Backward{}, needs,
                        false});
  check_value(nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

void Graph::check_value(std::size_t id) const {
  if (!options_.check_finite) return;
  for (double v : nodes_[id].value.values()) {
    if (std::isnan(v) || (std::isinf(v) && !options_.allow_infinite)) {
      throw NumericalError("non-finite value produced by node #" + std::to_string(id) + " (" +
                           std::string(op_name(nodes_[id].kind)) + ")");
    }
  }
}

void Graph::accumulate(std::size_t id, Tensor delta) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = std::move(delta);
    n.has_grad = true;
    return;
  }
  if (n.grad.size() != delta.size()) throw DimensionError("gradient shape mismatch");
  double* g = n.grad.data();
  const double* d = delta.data();
  for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += d[i];
}

void Graph::backward(Var output) {
  if (output.graph != this) throw DimensionError("backward on a foreign node");
  if (nodes_[output.id].value.size() != 1) {
    throw DimensionError("gradient requested for non-scalar output of shape " +
                         nodes_[output.id].value.shape_string());
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (!nodes_[output.id].requires_grad) return;
  nodes_[output.id].grad = Tensor(nodes_[output.id].value.shape(), 1.0);
  nodes_[output.id].has_grad = true;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    if (options_.check_finite && !n.grad.all_finite()) {
      throw NumericalError("non-finite gradient at node #" + std::to_string(i) + " (" +
                           std::string(op_name(n.kind)) + ")");
    }
    // The closure may append to other nodes' grads but never to its own.
    const Tensor g = n.grad;
    n.backward(*this, g);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

// ---------------------------------------------------------------------------

namespace {

struct Broadcast {
  std::size_t rows, cols;
  std::size_t ar, ac, br, bc;
  bool same;
  std::vector<std::size_t> shape;
};

Broadcast broadcast_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  Broadcast s{};
  s.ar = a.rows();
  s.ac = a.cols();
  s.br = b.rows();
  s.bc = b.cols();
  s.same = a.same_shape(b);
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(std::string(op) + ": cannot broadcast " + a.shape_string() + " with " +
                         b.shape_string());
  };
  s.rows = dim(s.ar, s.br);
  s.cols = dim(s.ac, s.bc);
  s.shape = s.same ? a.shape() : std::vector<std::size_t>{s.rows, s.cols};
  return s;
}

template <class F>
void for_each_broadcast(const Broadcast& s, F&& f) {
  if (s.same || (s.ar == s.br && s.ac == s.bc)) {
    const std::size_t n = s.rows * s.cols;
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  std::size_t o = 0;
  for (std::size_t r = 0; r < s.rows; ++r) {
    const std::size_t ra = s.ar == 1 ? 0 : r;
    const std::size_t rb = s.br == 1 ? 0 : r;
    for (std::size_t c = 0; c < s.cols; ++c, ++o) {
      f(o, ra * s.ac + (s.ac == 1 ? 0 : c), rb * s.bc + (s.bc == 1 ? 0 : c));
    }
  }
}

// Sums a broadcast-shaped gradient back down to `like`'s shape.
Tensor reduce_to(const Tensor& g, const Broadcast& s, bool first, const Tensor& like) {
  if (s.same || (s.ar == s.br && s.ac == s.bc)) return Tensor(like.shape(), g.storage());
  Tensor out(like.shape(), 0.0);
  for_each_broadcast(s, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[first ? ia : ib] += g[o];
  });
  return out;
}

template <class F>
Tensor map_unary(const Tensor& a, F&& f) {
  Tensor out(a.shape(), 0.0);
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

// out_grad (.) elementwise derivative computed from input/output values.
template <class D>
Graph::Backward unary_backward(std::size_t in, std::size_t out, D&& deriv) {
  return [in, out, deriv](Graph& g, const Tensor& og) {
    const Tensor& x = g.value(in);
    const Tensor& y = g.value(out);
    Tensor d(x.shape(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = og[i] * deriv(x[i], y[i]);
    g.accumulate(in, std::move(d));
  };
}

template <class F, class D>
Var unary(OpKind kind, Var a, F&& f, D&& deriv) {
  Graph& g = *a.graph;
  Tensor out = map_unary(a.value(), f);
  const std::size_t next = g.node_count();
  return g.record(kind, std::move(out), {a}, unary_backward(a.id, next, std::forward<D>(deriv)));
}

// Gradient helpers for matrix products. All operands are in the matrix view.
Tensor matmul_nt(const Tensor& a, const Tensor& b) {  // a * b^T
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::zeros(m, n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = pb + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out.at(i, j) = s;
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {  // a^T * b
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros(m, n);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = pa + p * m;
    const double* br = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
    }
  }
  return out;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph || a.graph == nullptr) throw DimensionError("operands belong to different graphs");
  return *a.graph;
}

}  // namespace

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  const Broadcast s = broadcast_shape(va, vb, "add");
  Tensor out(s.shape, 0.0);
  for_each_broadcast(s, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = va[ia] + vb[ib]; });
  return g.record(OpKind::Add, std::move(out), {a, b}, [ia = a.id, ib = b.id, s](Graph& gr, const Tensor& og) {
    if (gr.requires_grad(ia)) gr.accumulate(ia, reduce_to(og, s, true, gr.value(ia)));
    if (gr.requires_grad(ib)) gr.accumulate(ib, reduce_to(og, s, false, gr.value(ib)));
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  const Broadcast s = broadcast_shape(va, vb, "sub");
  Tensor out(s.shape, 0.0);
  for_each_broadcast(s, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = va[ia] - vb[ib]; });
  return g.record(OpKind::Sub, std::move(out), {a, b}, [ia = a.id, ib = b.id, s](Graph& gr, const Tensor& og) {
    if (gr.requires_grad(ia)) gr.accumulate(ia, reduce_to(og, s, true, gr.value(ia)));
    if (gr.requires_grad(ib)) {
      Tensor r = reduce_to(og, s, false, gr.value(ib));
      for (double& v : r.values()) v = -v;
      gr.accumulate(ib, std::move(r));
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  const Broadcast s = broadcast_shape(va, vb, "mul");
  Tensor out(s.shape, 0.0);
  for_each_broadcast(s, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = va[ia] * vb[ib]; });
  return g.record(OpKind::Mul, std::move(out), {a, b}, [ia = a.id, ib = b.id, s](Graph& gr, const Tensor& og) {
    const Tensor& xa = gr.value(ia);
    const Tensor& xb = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Tensor t(og.shape(), 0.0);
      for_each_broadcast(s, [&](std::size_t o, std::size_t, std::size_t jb) { t[o] = og[o] * xb[jb]; });
      gr.accumulate(ia, reduce_to(t, s, true, xa));
    }
    if (gr.requires_grad(ib)) {
      Tensor t(og.shape(), 0.0);
      for_each_broadcast(s, [&](std::size_t o, std::size_t ja, std::size_t) { t[o] = og[o] * xa[ja]; });
      gr.accumulate(ib, reduce_to(t, s, false, xb));
    }
  });
}

Var div(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  const Broadcast s = broadcast_shape(va, vb, "div");
  Tensor out(s.shape, 0.0);
  for_each_broadcast(s, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = va[ia] / vb[ib]; });
  return g.record(OpKind::Div, std::move(out), {a, b}, [ia = a.id, ib = b.id, s](Graph& gr, const Tensor& og) {
    const Tensor& xa = gr.value(ia);
    const Tensor& xb = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Tensor t(og.shape(), 0.0);
      for_each_broadcast(s, [&](std::size_t o, std::size_t, std::size_t jb) { t[o] = og[o] / xb[jb]; });
      gr.accumulate(ia, reduce_to(t, s, true, xa));
    }
    if (gr.requires_grad(ib)) {
      Tensor t(og.shape(), 0.0);
      for_each_broadcast(s, [&](std::size_t o, std::size_t ja, std::size_t jb) {
        t[o] = -og[o] * xa[ja] / (xb[jb] * xb[jb]);
      });
      gr.accumulate(ib, reduce_to(t, s, false, xb));
    }
  });
}

Var neg(Var a) {
  return unary(OpKind::Neg, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(Var a, double c) {
  return unary(OpKind::Scale, a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(OpKind::AddScalar, a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  Tensor out = matmul(a.value(), b.value());
  return g.record(OpKind::MatMul, std::move(out), {a, b}, [ia = a.id, ib = b.id](Graph& gr, const Tensor& og) {
    const Tensor& xa = gr.value(ia);
    const Tensor& xb = gr.value(ib);
    if (gr.requires_grad(ia)) gr.accumulate(ia, Tensor(xa.shape(), matmul_nt(og, xb).storage()));
    if (gr.requires_grad(ib)) gr.accumulate(ib, Tensor(xb.shape(), matmul_tn(xa, og).storage()));
  });
}

Var affine(Var x, Var w, Var b) {
  Graph& g = graph_of(x, w);
  graph_of(x, b);
  const Tensor& vx = x.value();
  const Tensor& vw = w.value();
  const Tensor& vb = b.value();
  if (vw.rank() != 2 || vw.cols() != vx.cols() || vb.size() != vw.rows()) {
    throw DimensionError("affine shape mismatch: x " + vx.shape_string() + ", W " + vw.shape_string() +
                         ", b " + vb.shape_string());
  }
  Tensor out = matmul_nt(vx, vw);
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) += vb[c];
  return g.record(OpKind::Affine, std::move(out), {x, w, b},
                  [ix = x.id, iw = w.id, ib = b.id](Graph& gr, const Tensor& og) {
                    const Tensor& xv = gr.value(ix);
                    const Tensor& wv = gr.value(iw);
                    if (gr.requires_grad(ix)) gr.accumulate(ix, Tensor(xv.shape(), matmul(og, wv).storage()));
                    if (gr.requires_grad(iw)) gr.accumulate(iw, matmul_tn(og, xv));
                    if (gr.requires_grad(ib)) {
                      const Tensor& bv = gr.value(ib);
                      Tensor gb(bv.shape(), 0.0);
                      const std::size_t m = og.cols();
                      for (std::size_t r = 0; r < og.rows(); ++r)
                        for (std::size_t c = 0; c < m; ++c) gb[c] += og[r * m + c];
                      gr.accumulate(ib, std::move(gb));
                    }
                  });
}

Var exp(Var a) {
  return unary(OpKind::Exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(OpKind::Log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(OpKind::Tanh, a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      OpKind::Sigmoid, a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var leaky_relu(Var a, double slope) {
  return unary(OpKind::LeakyRelu, a, [slope](double x) { return x > 0 ? x : slope * x; },
               [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Var softplus(Var a) {
  return unary(
      OpKind::Softplus, a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Var square(Var a) {
  return unary(OpKind::Square, a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(Var a) {
  return unary(OpKind::Abs, a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var log_abs(Var a) {
  return unary(OpKind::LogAbs, a, [](double x) { return std::log(std::abs(x)); },
               [](double x, double) { return 1.0 / x; });
}

Var clamp_min(Var a, double lo) {
  return unary(OpKind::ClampMin, a, [lo](double x) { return x > lo ? x : lo; },
               [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Var atan2(Var y, Var x) {
  Graph& g = graph_of(y, x);
  const Tensor& vy = y.value();
  const Tensor& vx = x.value();
  if (!vy.same_shape(vx)) throw DimensionError("atan2 requires equal shapes");
  Tensor out(vy.shape(), 0.0);
  for (std::size_t i = 0; i < vy.size(); ++i) out[i] = std::atan2(vy[i], vx[i]);
  return g.record(OpKind::Atan2, std::move(out), {y, x}, [iy = y.id, ix = x.id](Graph& gr, const Tensor& og) {
    const Tensor& yv = gr.value(iy);
    const Tensor& xv = gr.value(ix);
    Tensor gy(yv.shape(), 0.0), gx(xv.shape(), 0.0);
    for (std::size_t i = 0; i < yv.size(); ++i) {
      const double r2 = xv[i] * xv[i] + yv[i] * yv[i];
      if (r2 == 0.0) continue;
      gy[i] = og[i] * xv[i] / r2;
      gx[i] = -og[i] * yv[i] / r2;
    }
    gr.accumulate(iy, std::move(gy));
    gr.accumulate(ix, std::move(gx));
  });
}

Var softmax(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    const double* xr = x.data() + r * C;
    double* yr = out.data() + r * C;
    const double m = *std::max_element(xr, xr + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (yr[c] = std::exp(xr[c] - m));
    for (std::size_t c = 0; c < C; ++c) yr[c] /= s;
  }
  const std::size_t self = g.node_count();
  return g.record(OpKind::Softmax, std::move(out), {a}, [ia = a.id, self, C](Graph& gr, const Tensor& og) {
    const Tensor& y = gr.value(self);
    Tensor d(y.shape(), 0.0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += og[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) d[r * C + c] = y[r * C + c] * (og[r * C + c] - dot);
    }
    gr.accumulate(ia, std::move(d));
  });
}

Var log_softmax(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    const double* xr = x.data() + r * C;
    const double m = *std::max_element(xr, xr + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(xr[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = xr[c] - lse;
  }
  const std::size_t self = g.node_count();
  return g.record(OpKind::LogSoftmax, std::move(out), {a}, [ia = a.id, self, C](Graph& gr, const Tensor& og) {
    const Tensor& y = gr.value(self);
    Tensor d(y.shape(), 0.0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < C; ++c) total += og[r * C + c];
      for (std::size_t c = 0; c < C; ++c) d[r * C + c] = og[r * C + c] - std::exp(y[r * C + c]) * total;
    }
    gr.accumulate(ia, std::move(d));
  });
}

Var logsumexp(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out = Tensor::zeros(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    const double* xr = x.data() + r * C;
    const double m = *std::max_element(xr, xr + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(xr[c] - m);
    out[r] = m + std::log(s);
  }
  const std::size_t self = g.node_count();
  return g.record(OpKind::LogSumExp, std::move(out), {a}, [ia = a.id, self, C](Graph& gr, const Tensor& og) {
    const Tensor& xv = gr.value(ia);
    const Tensor& y = gr.value(self);
    Tensor d(xv.shape(), 0.0);
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = 0; c < C; ++c) d[r * C + c] = og[r] * std::exp(xv[r * C + c] - y[r]);
    gr.accumulate(ia, std::move(d));
  });
}

Var sum(Var a) {
  Graph& g = *a.graph;
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return g.record(OpKind::Sum, Tensor::scalar(s), {a}, [ia = a.id](Graph& gr, const Tensor& og) {
    gr.accumulate(ia, Tensor(gr.value(ia).shape(), og.item()));
  });
}

Var mean(Var a) {
  Graph& g = *a.graph;
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return g.record(OpKind::Mean, Tensor::scalar(s / static_cast<double>(n)), {a},
                  [ia = a.id, n](Graph& gr, const Tensor& og) {
                    gr.accumulate(ia, Tensor(gr.value(ia).shape(), og.item() / static_cast<double>(n)));
                  });
}

Var sum_rows(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out = Tensor::zeros(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += x[r * C + c];
    out[r] = s;
  }
  return g.record(OpKind::SumRows, std::move(out), {a}, [ia = a.id, C](Graph& gr, const Tensor& og) {
    Tensor d(gr.value(ia).shape(), 0.0);
    for (std::size_t r = 0; r < og.size(); ++r)
      for (std::size_t c = 0; c < C; ++c) d[r * C + c] = og[r];
    gr.accumulate(ia, std::move(d));
  });
}

Var sum_cols(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out = Tensor::zeros(1, C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c] += x[r * C + c];
  return g.record(OpKind::SumCols, std::move(out), {a}, [ia = a.id, C](Graph& gr, const Tensor& og) {
    const Tensor& xv = gr.value(ia);
    Tensor d(xv.shape(), 0.0);
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = 0; c < C; ++c) d[r * C + c] = og[c];
    gr.accumulate(ia, std::move(d));
  });
}

Var norm_rows(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out = Tensor::zeros(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += x[r * C + c] * x[r * C + c];
    out[r] = std::sqrt(s);
  }
  const std::size_t self = g.node_count();
  return g.record(OpKind::NormRows, std::move(out), {a}, [ia = a.id, self, C](Graph& gr, const Tensor& og) {
    const Tensor& xv = gr.value(ia);
    const Tensor& n = gr.value(self);
    Tensor d(xv.shape(), 0.0);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      if (n[r] == 0.0) continue;  // subgradient 0 at the origin
      for (std::size_t c = 0; c < C; ++c) d[r * C + c] = og[r] * xv[r * C + c] / n[r];
    }
    gr.accumulate(ia, std::move(d));
  });
}

Var cosine_rows(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& xa = a.value();
  const Tensor& xb = b.value();
  const std::size_t R = xa.rows(), C = xa.cols();
  if (xb.cols() != C || (xb.rows() != R && xb.rows() != 1)) {
    throw DimensionError("cosine_rows shape mismatch " + xa.shape_string() + " vs " + xb.shape_string());
  }
  const bool bcast = xb.rows() != R;
  Tensor out = Tensor::zeros(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    const double* pa = xa.data() + r * C;
    const double* pb = xb.data() + (bcast ? 0 : r * C);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      dot += pa[c] * pb[c];
      na += pa[c] * pa[c];
      nb += pb[c] * pb[c];
    }
    if (na == 0.0 || nb == 0.0) throw NumericalError("cosine similarity of a zero-norm vector");
    out[r] = dot / std::sqrt(na * nb);
  }
  return g.record(OpKind::CosineRows, std::move(out), {a, b},
                  [ia = a.id, ib = b.id, bcast, C](Graph& gr, const Tensor& og) {
                    const Tensor& va = gr.value(ia);
                    const Tensor& vb = gr.value(ib);
                    Tensor da(va.shape(), 0.0), db(vb.shape(), 0.0);
                    for (std::size_t r = 0; r < va.rows(); ++r) {
                      const double* pa = va.data() + r * C;
                      const std::size_t ob = bcast ? 0 : r * C;
                      const double* pb = vb.data() + ob;
                      double dot = 0.0, na = 0.0, nb = 0.0;
                      for (std::size_t c = 0; c < C; ++c) {
                        dot += pa[c] * pb[c];
                        na += pa[c] * pa[c];
                        nb += pb[c] * pb[c];
                      }
                      const double nn = std::sqrt(na * nb);
                      const double cs = dot / nn;
                      for (std::size_t c = 0; c < C; ++c) {
                        da[r * C + c] = og[r] * (pb[c] / nn - cs * pa[c] / na);
                        db[ob + c] += og[r] * (pa[c] / nn - cs * pb[c] / nb);
                      }
                    }
                    gr.accumulate(ia, std::move(da));
                    gr.accumulate(ib, std::move(db));
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Graph& g = *a.graph;
  Tensor out = a.value().columns(begin, end);
  return g.record(OpKind::SliceCols, std::move(out), {a}, [ia = a.id, begin, end](Graph& gr, const Tensor& og) {
    const Tensor& x = gr.value(ia);
    const std::size_t C = x.cols(), w = end - begin;
    Tensor d(x.shape(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < w; ++c) d[r * C + begin + c] = og[r * w + c];
    gr.accumulate(ia, std::move(d));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Graph& g = *parts.front().graph;
  const std::size_t R = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.graph != &g) throw DimensionError("operands belong to different graphs");
    if (p.rows() != R) throw DimensionError("concat_cols row mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::zeros(R, total);
  std::vector<std::size_t> ids, widths;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t w = v.cols();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * total + off + c] = v[r * w + c];
    ids.push_back(p.id);
    widths.push_back(w);
    off += w;
  }
  return g.record(OpKind::ConcatCols, std::move(out), parts,
                  [ids, widths, total](Graph& gr, const Tensor& og) {
                    std::size_t o = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      const std::size_t w = widths[k];
                      if (gr.requires_grad(ids[k])) {
                        const Tensor& v = gr.value(ids[k]);
                        Tensor d(v.shape(), 0.0);
                        for (std::size_t r = 0; r < v.rows(); ++r)
                          for (std::size_t c = 0; c < w; ++c) d[r * w + c] = og[r * total + o + c];
                        gr.accumulate(ids[k], std::move(d));
                      }
                      o += w;
                    }
                  });
}

Var repeat_rows(Var a, std::size_t n) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  if (x.rows() != 1) throw DimensionError("repeat_rows expects a single row");
  const std::size_t C = x.cols();
  Tensor out = Tensor::zeros(n, C);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x[c];
  return g.record(OpKind::RepeatRows, std::move(out), {a}, [ia = a.id, C](Graph& gr, const Tensor& og) {
    Tensor d(gr.value(ia).shape(), 0.0);
    for (std::size_t r = 0; r < og.rows(); ++r)
      for (std::size_t c = 0; c < C; ++c) d[c] += og[r * C + c];
    gr.accumulate(ia, std::move(d));
  });
}

Var transpose(Var a) {
  Graph& g = *a.graph;
  return g.record(OpKind::Transpose, a.value().transposed(), {a}, [ia = a.id](Graph& gr, const Tensor& og) {
    gr.accumulate(ia, Tensor(gr.value(ia).shape(), og.transposed().storage()));
  });
}

// ---------------------------------------------------------------------------

Evaluation evaluate_with_gradients(const TensorFunction& f, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(g.input(t));
  const Var out = f(g, vars);
  if (out.value().size() != 1) {
    throw DimensionError("gradient requested for non-scalar output of shape " + out.value().shape_string());
  }
  g.backward(out);
  Evaluation ev{out.value(), {}};
  for (const Var& v : vars) ev.gradients.push_back(g.grad(v));
  return ev;
}

double finite_difference_check(const ScalarFunction& f, const Tensor& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  const Evaluation ev = evaluate_with_gradients(
      [&f](Graph& g, std::span<const Var> in) { return f(g, in[0]); }, {point});
  const Tensor& analytic = ev.gradients[0];
  auto value_at = [&f](const Tensor& x) {
    Graph g(GraphOptions{.record = false});
    const Var out = f(g, g.constant(x));
    return out.value().item();
  };
  double worst = 0.0;
  Tensor x = point;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = point[i];
    const double hi = x0 + step;
    const double lo = x0 - step;
    if (hi == x0 || lo == x0 || hi - lo == 0.0) {
      throw NumericalError("finite-difference step " + std::to_string(step) +
                           " underflows at coordinate " + std::to_string(i));
    }
    x[i] = hi;
    const double fp = value_at(x);
    x[i] = lo;
    const double fm = value_at(x);
    x[i] = x0;
    const double numeric = (fp - fm) / (hi - lo);
    const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace latentctl
