#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the output value, the ids of its inputs and a closure that maps the
// output adjoint into input adjoints. Nodes are appended in evaluation order,
// so iterating the tape backwards is a valid reverse topological order.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jamje/tensor.hpp"

namespace jamje::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

class BackwardContext {
 public:
  const Tensor& grad_out() const { return *grad_out_; }
  const Tensor& output() const { return *output_; }
  const Tensor& input(std::size_t k) const { return *inputs_[k]; }
  bool needs(std::size_t k) const { return input_grads_[k] != nullptr; }

  /// Adjoint buffer of input k; zero-initialized on first access.
  Tensor& grad_in(std::size_t k) {
    Tensor& g = *input_grads_[k];
    if (g.empty()) g = Tensor(inputs_[k]->shape());
    return g;
  }

 private:
  friend class Tape;
  const Tensor* grad_out_ = nullptr;
  const Tensor* output_ = nullptr;
  std::vector<const Tensor*> inputs_;
  std::vector<Tensor*> input_grads_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Result of Tape::backward: adjoint of the loss for every node.
class Gradients {
 public:
  /// Gradient for `v`; zeros when `v` does not influence the loss.
  const Tensor& operator[](Var v) const {
    Tensor& g = grads_.at(v.id);
    if (g.empty()) g = Tensor(shapes_.at(v.id));
    return g;
  }

  /// False when no path connects `v` to the loss (before any zero-fill by operator[]).
  bool has(Var v) const { return !grads_.at(v.id).empty(); }

 private:
  friend class Tape;
  mutable std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, "constant"); }

  /// Differentiable input.
  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true, "leaf"); }

  /// Appends an op result. The closure is dropped when no input is differentiable.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn fn) {
    bool any = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (Var v : inputs) {
      check_owned(v, op);
      ids.push_back(v.id);
      any = any || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), std::move(ids), any ? std::move(fn) : nullptr, any, op);
  }

  const Tensor& value(Var v) const {
    check_owned(v, "value");
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v, "requires_grad");
    return nodes_[v.id].requires_grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Frees all nodes; outstanding Vars become invalid.
  void reset() { nodes_.clear(); }

  Gradients backward(Var loss) const {
    if (loss.tape != this || loss.id >= nodes_.size())
      throw std::invalid_argument("backward: loss is not on this tape");
    if (nodes_[loss.id].value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " + to_string(nodes_[loss.id].value.shape()));

    Gradients out;
    out.grads_.resize(nodes_.size());
    out.shapes_.reserve(nodes_.size());
    for (const Node& n : nodes_) out.shapes_.push_back(n.value.shape());
    if (!nodes_[loss.id].requires_grad) return out;
    out.grads_[loss.id] = Tensor(nodes_[loss.id].value.shape(), 1.0);

    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!node.backward || out.grads_[i].empty()) continue;
      BackwardContext ctx;
      ctx.grad_out_ = &out.grads_[i];
      ctx.output_ = &node.value;
      for (std::size_t in : node.inputs) {
        ctx.inputs_.push_back(&nodes_[in].value);
        ctx.input_grads_.push_back(nodes_[in].requires_grad ? &out.grads_[in] : nullptr);
      }
      node.backward(ctx);
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad, const char* op) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite value on tape");
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  void check_owned(Var v, const char* op) const {
    if (v.tape != this || v.id >= nodes_.size())
      throw std::invalid_argument(std::string(op) + ": variable belongs to another tape");
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

// C[m x n] += op(A) * op(B); A is m x k (or k x m when ta), B is k x n (or n x k when tb).
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        if (av == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        c[i * n + j] += s;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = ap[i];
        if (av == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += s;
      }
  }
}

inline void require_same(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

inline void require_same_tape(const char* op, const Var& a, const Var& b) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

}  // namespace detail

/// Matrix product. Accepts (m,k)x(k,n) and batched (B,m,k)x(B,k,n).
inline Var matmul(Var a, Var b) {
  detail::require_same_tape("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  std::size_t batch = 1, m, k, n;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0], k = sa[1], n = sb[1];
    if (sb[0] != k) throw ShapeError("matmul", sa, sb);
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != batch || sb[1] != k) throw ShapeError("matmul", sa, sb);
    out_shape = {batch, m, n};
  } else {
    throw ShapeError("matmul", sa, sb);
  }
  Tensor out(out_shape);
  const double* av = a.value().data();
  const double* bv = b.value().data();
  for (std::size_t t = 0; t < batch; ++t)
    detail::gemm(false, false, m, n, k, av + t * m * k, bv + t * k * n, out.data() + t * m * n);
  return a.tape->record("matmul", std::move(out), {a, b}, [=](BackwardContext& ctx) {
    const double* g = ctx.grad_out().data();
    if (ctx.needs(0)) {
      double* ga = ctx.grad_in(0).data();
      const double* bb = ctx.input(1).data();
      for (std::size_t t = 0; t < batch; ++t)
        detail::gemm(false, true, m, k, n, g + t * m * n, bb + t * k * n, ga + t * m * k);
    }
    if (ctx.needs(1)) {
      double* gb = ctx.grad_in(1).data();
      const double* aa = ctx.input(0).data();
      for (std::size_t t = 0; t < batch; ++t)
        detail::gemm(true, false, k, n, m, aa + t * m * k, g + t * m * n, gb + t * k * n);
    }
  });
}

/// 1x1 convolution: mixes the trailing channel axis of x (..., C_in) with w (C_in, C_out).
inline Var conv1x1(Var x, Var w) {
  detail::require_same_tape("conv1x1", x, w);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sw.size() != 2 || sx.empty() || sx.back() != sw[0]) throw ShapeError("conv1x1", sx, sw);
  const std::size_t cin = sw[0], cout = sw[1], rows = x.size() / cin;
  Shape out_shape = sx;
  out_shape.back() = cout;
  Tensor out(out_shape);
  detail::gemm(false, false, rows, cout, cin, x.value().data(), w.value().data(), out.data());
  return x.tape->record("conv1x1", std::move(out), {x, w}, [=](BackwardContext& ctx) {
    const double* g = ctx.grad_out().data();
    if (ctx.needs(0)) detail::gemm(false, true, rows, cin, cout, g, ctx.input(1).data(), ctx.grad_in(0).data());
    if (ctx.needs(1)) detail::gemm(true, false, cin, cout, rows, ctx.input(0).data(), g, ctx.grad_in(1).data());
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape("add", a, b);
  detail::require_same("add", a, b);
  Tensor out = a.value();
  out += b.value();
  return a.tape->record("add", std::move(out), {a, b}, [](BackwardContext& ctx) {
    if (ctx.needs(0)) ctx.grad_in(0) += ctx.grad_out();
    if (ctx.needs(1)) ctx.grad_in(1) += ctx.grad_out();
  });
}

/// x (..., C) + bias (C), broadcast over leading axes.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_tape("add_bias", x, bias);
  const std::size_t c = bias.size();
  if (bias.shape().size() != 1 || x.shape().back() != c) throw ShapeError("add_bias", x.shape(), bias.shape());
  Tensor out = x.value();
  const double* bv = bias.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  return x.tape->record("add_bias", std::move(out), {x, bias}, [c](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (ctx.needs(0)) ctx.grad_in(0) += g;
    if (ctx.needs(1)) {
      double* gb = ctx.grad_in(1).data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    }
  });
}

inline Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return x.tape->record("scale", std::move(out), {x}, [factor](BackwardContext& ctx) {
    Tensor& gx = ctx.grad_in(0);
    const Tensor& g = ctx.grad_out();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

/// x * s where s is a one-element tensor on the tape.
inline Var mul_scalar(Var x, Var s) {
  detail::require_same_tape("mul_scalar", x, s);
  if (s.size() != 1) throw ShapeError("mul_scalar", x.shape(), s.shape());
  const double sv = s.value()[0];
  Tensor out = x.value();
  for (double& v : out.values()) v *= sv;
  return x.tape->record("mul_scalar", std::move(out), {x, s}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const Tensor& xv = ctx.input(0);
    const double sv = ctx.input(1)[0];
    if (ctx.needs(0)) {
      Tensor& gx = ctx.grad_in(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
    }
    if (ctx.needs(1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += xv[i] * g[i];
      ctx.grad_in(1)[0] += acc;
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_tape("mul", a, b);
  detail::require_same("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (ctx.needs(0)) {
      Tensor& ga = ctx.grad_in(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ctx.input(1)[i];
    }
    if (ctx.needs(1)) {
      Tensor& gb = ctx.grad_in(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ctx.input(0)[i];
    }
  });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return x.tape->record("relu", std::move(out), {x}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const Tensor& xv = ctx.input(0);
    Tensor& gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

/// Softmax over the trailing axis.
inline Var softmax_rows(Var x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  return x.tape->record("softmax_rows", std::move(out), {x}, [c, rows](BackwardContext& ctx) {
    const double* g = ctx.grad_out().data();
    const double* y = ctx.output().data();
    double* gx = ctx.grad_in(0).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[o + j] * y[o + j];
      for (std::size_t j = 0; j < c; ++j) gx[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->record("sum", Tensor::scalar(s), {x}, [](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0];
    for (double& v : ctx.grad_in(0).values()) v += g;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Natural log; input must be strictly positive.
inline Var log(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
    v = std::log(v);
  }
  return x.tape->record("log", std::move(out), {x}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const Tensor& xv = ctx.input(0);
    Tensor& gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

/// Scales each row (trailing axis) to unit Euclidean norm.
inline Var l2_normalize_rows(Var x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  Tensor out = x.value();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * c;
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += row[j] * row[j];
    if (!(s > 0.0)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(r));
    norms[r] = std::sqrt(s);
    for (std::size_t j = 0; j < c; ++j) row[j] /= norms[r];
  }
  return x.tape->record("l2_normalize_rows", std::move(out), {x},
                        [c, rows, norms = std::move(norms)](BackwardContext& ctx) {
                          const double* g = ctx.grad_out().data();
                          const double* y = ctx.output().data();
                          double* gx = ctx.grad_in(0).data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t o = r * c;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < c; ++j) dot += g[o + j] * y[o + j];
                            for (std::size_t j = 0; j < c; ++j) gx[o + j] += (g[o + j] - y[o + j] * dot) / norms[r];
                          }
                        });
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x},
                        [](BackwardContext& ctx) { ctx.grad_in(0) += ctx.grad_out().reshaped(ctx.input(0).shape()); });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Var transpose(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose: rank must be 2 or 3, got " + to_string(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t r = s[s.size() - 2], c = s.back();
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  const double* in = x.value().data();
  for (std::size_t t = 0; t < batch; ++t)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = in[t * r * c + i * c + j];
  return x.tape->record("transpose", std::move(out), {x}, [batch, r, c](BackwardContext& ctx) {
    const double* g = ctx.grad_out().data();
    double* gx = ctx.grad_in(0).data();
    for (std::size_t t = 0; t < batch; ++t)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[t * r * c + i * c + j] += g[t * r * c + j * r + i];
  });
}

/// Folds each factor x factor spatial patch of (B, H, W, C) into channels: (B, H/f, W/f, f*f*C).
inline Var space_to_depth(Var x, std::size_t factor) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] % factor || s[2] % factor)
    throw ShapeError("space_to_depth: need (B,H,W,C) divisible by " + std::to_string(factor) + ", got " + to_string(s));
  const std::size_t b = s[0], h = s[1], w = s[2], c = s[3];
  const std::size_t oh = h / factor, ow = w / factor, oc = c * factor * factor;
  std::vector<std::size_t> src(x.size());
  Tensor out(Shape{b, oh, ow, oc});
  std::size_t o = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t di = 0; di < factor; ++di)
          for (std::size_t dj = 0; dj < factor; ++dj)
            for (std::size_t k = 0; k < c; ++k, ++o) {
              src[o] = ((n * h + i * factor + di) * w + j * factor + dj) * c + k;
              out[o] = x.value()[src[o]];
            }
  return x.tape->record("space_to_depth", std::move(out), {x}, [src = std::move(src)](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    Tensor& gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
  });
}

/// Max over axis 1 of (B, N, C): a symmetric set pooling. Ties route to the first maximum.
inline Var max_over_points(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("max_over_points: need (B,N,C), got " + to_string(s));
  const std::size_t b = s[0], n = s[1], c = s[2];
  Tensor out(Shape{b, c});
  std::vector<std::size_t> arg(b * c);
  const double* in = x.value().data();
  for (std::size_t t = 0; t < b; ++t)
    for (std::size_t k = 0; k < c; ++k) {
      std::size_t best = t * n * c + k;
      for (std::size_t p = 1; p < n; ++p) {
        const std::size_t idx = (t * n + p) * c + k;
        if (in[idx] > in[best]) best = idx;
      }
      arg[t * c + k] = best;
      out[t * c + k] = in[best];
    }
  return x.tape->record("max_over_points", std::move(out), {x}, [arg = std::move(arg)](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    Tensor& gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
}

/// Selects x[r, index[r]] from a (R, C) matrix.
inline Var pick(Var x, std::vector<std::size_t> index) {
  const Shape& s = x.shape();
  if (s.size() != 2 || index.size() != s[0]) throw ShapeError("pick: need (R,C) with R indices, got " + to_string(s));
  const std::size_t c = s[1];
  Tensor out(Shape{s[0]});
  for (std::size_t r = 0; r < s[0]; ++r) {
    if (index[r] >= c) throw std::out_of_range("pick: index " + std::to_string(index[r]) + " >= " + std::to_string(c));
    out[r] = x.value()[r * c + index[r]];
  }
  return x.tape->record("pick", std::move(out), {x}, [c, index = std::move(index)](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    Tensor& gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < index.size(); ++r) gx[r * c + index[r]] += g[r];
  });
}

/// Contiguous block of `shape` elements of x starting at flat `offset`.
inline Var slice(Var x, std::size_t offset, Shape shape) {
  const std::size_t n = element_count(shape);
  if (offset + n > x.size()) throw ShapeError("slice: range exceeds " + to_string(x.shape()));
  std::vector<double> vals(x.value().data() + offset, x.value().data() + offset + n);
  return x.tape->record("slice", Tensor(std::move(shape), std::move(vals)), {x}, [offset, n](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    Tensor& gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < n; ++i) gx[offset + i] += g[i];
  });
}

}  // namespace jamje::ad
