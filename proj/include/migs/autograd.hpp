#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "migs/errors.hpp"
#include "migs/tensor.hpp"

namespace migs {

// Reverse-mode autodiff over Tensor<S>. A Tape owns the nodes of one forward
// pass; ops append a node, then attach a backward closure that scatters into
// the parents' grad buffers. Tapes are built per training step and discarded.
//
// The tape must stay at a fixed address while ops reference it (closures
// capture a pointer); it is neither copyable nor movable.

using Var = std::int32_t;
inline constexpr Var kNoVar = -1;

template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var push(Tensor<S> value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Tensor<S>(), needs_grad, nullptr});
    Node& n = nodes_.back();
    if (n.needs_grad) n.grad = Tensor<S>(n.value.shape(), S(0));
    return static_cast<Var>(nodes_.size() - 1);
  }

  Var leaf(Tensor<S> value, bool needs_grad = true) { return push(std::move(value), needs_grad); }
  Var constant(Tensor<S> value) { return push(std::move(value), false); }

  void set_back(Var v, std::function<void()> f) { nodes_[check(v)].back = std::move(f); }

  const Tensor<S>& val(Var v) const { return nodes_[check(v)].value; }
  Tensor<S>& grad(Var v) {
    Node& n = nodes_[check(v)];
    if (!n.needs_grad) throw ContractError("grad requested for non-differentiable node");
    return n.grad;
  }
  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

  // Adds g into the grad buffer of v if v participates in differentiation.
  void accum(Var v, std::int64_t flat_index, S g) {
    Node& n = nodes_[check(v)];
    if (n.needs_grad) n.grad[flat_index] += g;
  }

  // Seeds d(root)/d(root) = 1 and runs backward closures in reverse creation
  // order. `root` must be a scalar (one element).
  void backward(Var root) {
    if (val(root).numel() != 1) throw ContractError("backward root must be scalar");
    if (!nodes_[check(root)].needs_grad)
      throw ContractError("backward root does not require grad");
    grad(root)[0] = S(1);
    for (std::int64_t i = static_cast<std::int64_t>(root); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && n.back) n.back();
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  std::size_t check(Var v) const {
    if (v < 0 || static_cast<std::size_t>(v) >= nodes_.size())
      throw ContractError("invalid tape var");
    return static_cast<std::size_t>(v);
  }

  // deque: pushes never invalidate references handed out by val()/grad()
  std::deque<Node> nodes_;
};

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapM = Eigen::Map<const MatRM<S>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  const Tensor<S>&va = t.val(a), &vb = t.val(b);
  if (!va.same_shape(vb)) throw ContractError("add: shape mismatch");
  Tensor<S> out(va.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] + vb[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, b, o] {
      const Tensor<S>& g = t.grad(o);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        t.accum(a, i, g[i]);
        t.accum(b, i, g[i]);
      }
    });
  return o;
}

template <typename S>
Var sub(Tape<S>& t, Var a, Var b) {
  const Tensor<S>&va = t.val(a), &vb = t.val(b);
  if (!va.same_shape(vb)) throw ContractError("sub: shape mismatch");
  Tensor<S> out(va.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] - vb[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, b, o] {
      const Tensor<S>& g = t.grad(o);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        t.accum(a, i, g[i]);
        t.accum(b, i, -g[i]);
      }
    });
  return o;
}

template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  const Tensor<S>&va = t.val(a), &vb = t.val(b);
  if (!va.same_shape(vb)) throw ContractError("mul: shape mismatch");
  Tensor<S> out(va.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] * vb[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, b, o] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>&xa = t.val(a), &xb = t.val(b);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        t.accum(a, i, g[i] * xb[i]);
        t.accum(b, i, g[i] * xa[i]);
      }
    });
  return o;
}

template <typename S>
Var add_scalar(Tape<S>& t, Var a, S c) {
  Tensor<S> out = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o] {
      const Tensor<S>& g = t.grad(o);
      for (std::int64_t i = 0; i < g.numel(); ++i) t.accum(a, i, g[i]);
    });
  return o;
}

template <typename S>
Var mul_scalar(Tape<S>& t, Var a, S c) {
  Tensor<S> out = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o, c] {
      const Tensor<S>& g = t.grad(o);
      for (std::int64_t i = 0; i < g.numel(); ++i) t.accum(a, i, c * g[i]);
    });
  return o;
}

template <typename S>
Var sigmoid(Tape<S>& t, Var a) {
  Tensor<S> out = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const S x = out[i];
    if (x >= S(0)) {
      out[i] = S(1) / (S(1) + std::exp(-x));
    } else {
      const S e = std::exp(x);
      out[i] = e / (S(1) + e);
    }
  }
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>& y = t.val(o);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        t.accum(a, i, g[i] * y[i] * (S(1) - y[i]));
    });
  return o;
}

template <typename S>
Var tanh_op(Tape<S>& t, Var a) {
  Tensor<S> out = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>& y = t.val(o);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        t.accum(a, i, g[i] * (S(1) - y[i] * y[i]));
    });
  return o;
}

template <typename S>
Var leaky_relu(Tape<S>& t, Var a, S slope) {
  Tensor<S> out = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    if (out[i] < S(0)) out[i] *= slope;
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o, slope] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>& x = t.val(a);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        t.accum(a, i, x[i] >= S(0) ? g[i] : slope * g[i]);
    });
  return o;
}

// log(max(x, floor)). The clamp keeps GAN losses finite; gradient is zero in
// the clamped region.
template <typename S>
Var log_clamped(Tape<S>& t, Var a, S floor_v) {
  Tensor<S> out = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::log(std::max(out[i], floor_v));
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o, floor_v] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>& x = t.val(a);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        if (x[i] > floor_v) t.accum(a, i, g[i] / x[i]);
    });
  return o;
}

template <typename S>
Var abs_op(Tape<S>& t, Var a) {
  Tensor<S> out = t.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(out[i]);
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>& x = t.val(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        const S s = x[i] > S(0) ? S(1) : (x[i] < S(0) ? S(-1) : S(0));
        t.accum(a, i, g[i] * s);
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Var sum_all(Tape<S>& t, Var a) {
  S acc = S(0);
  const Tensor<S>& va = t.val(a);
  for (std::int64_t i = 0; i < va.numel(); ++i) acc += va[i];
  const bool ng = t.needs_grad(a);
  Var o = t.push(Tensor<S>::scalar(acc), ng);
  if (ng)
    t.set_back(o, [&t, a, o] {
      const S g = t.grad(o)[0];
      Tensor<S>& ga = t.grad(a);
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  return o;
}

template <typename S>
Var mean_all(Tape<S>& t, Var a) {
  const Tensor<S>& va = t.val(a);
  if (va.numel() == 0) throw ContractError("mean_all: empty tensor");
  S acc = S(0);
  for (std::int64_t i = 0; i < va.numel(); ++i) acc += va[i];
  const S inv = S(1) / static_cast<S>(va.numel());
  const bool ng = t.needs_grad(a);
  Var o = t.push(Tensor<S>::scalar(acc * inv), ng);
  if (ng)
    t.set_back(o, [&t, a, o, inv] {
      const S g = t.grad(o)[0] * inv;
      Tensor<S>& ga = t.grad(a);
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  return o;
}

// Weighted sum of scalar vars: sum_i w_i * v_i. Used for the task loss.
template <typename S>
Var wsum(Tape<S>& t, const std::vector<std::pair<S, Var>>& terms) {
  S acc = S(0);
  bool ng = false;
  for (const auto& [w, v] : terms) {
    if (t.val(v).numel() != 1) throw ContractError("wsum: non-scalar term");
    acc += w * t.val(v)[0];
    ng = ng || t.needs_grad(v);
  }
  Var o = t.push(Tensor<S>::scalar(acc), ng);
  if (ng)
    t.set_back(o, [&t, terms, o] {
      const S g = t.grad(o)[0];
      for (const auto& [w, v] : terms) t.accum(v, 0, w * g);
    });
  return o;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  const Tensor<S>&va = t.val(a), &vb = t.val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
    throw ContractError("matmul: shape mismatch");
  const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor<S> out({m, n});
  detail::CMapM<S> A(va.data(), m, k), B(vb.data(), k, n);
  detail::MapM<S> C(out.data(), m, n);
  C.noalias() = A * B;
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, b, o, m, k, n] {
      detail::CMapM<S> G(t.grad(o).data(), m, n);
      detail::CMapM<S> A(t.val(a).data(), m, k), B(t.val(b).data(), k, n);
      if (t.needs_grad(a)) {
        detail::MapM<S> GA(t.grad(a).data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (t.needs_grad(b)) {
        detail::MapM<S> GB(t.grad(b).data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  return o;
}

// X[m,k] * W[k,n] + bias[n] broadcast over rows.
template <typename S>
Var linear(Tape<S>& t, Var x, Var w, Var bias = kNoVar) {
  const Tensor<S>&vx = t.val(x), &vw = t.val(w);
  if (vx.ndim() != 2 || vw.ndim() != 2 || vx.dim(1) != vw.dim(0))
    throw ContractError("linear: shape mismatch");
  const int m = vx.dim(0), k = vx.dim(1), n = vw.dim(1);
  if (bias != kNoVar && (t.val(bias).ndim() != 1 || t.val(bias).dim(0) != n))
    throw ContractError("linear: bad bias shape");
  Tensor<S> out({m, n});
  detail::CMapM<S> X(vx.data(), m, k), W(vw.data(), k, n);
  detail::MapM<S> C(out.data(), m, n);
  C.noalias() = X * W;
  if (bias != kNoVar) {
    const Tensor<S>& vb = t.val(bias);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) += vb.at(j);
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(w) ||
                  (bias != kNoVar && t.needs_grad(bias));
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, x, w, bias, o, m, k, n] {
      detail::CMapM<S> G(t.grad(o).data(), m, n);
      detail::CMapM<S> X(t.val(x).data(), m, k), W(t.val(w).data(), k, n);
      if (t.needs_grad(x)) {
        detail::MapM<S> GX(t.grad(x).data(), m, k);
        GX.noalias() += G * W.transpose();
      }
      if (t.needs_grad(w)) {
        detail::MapM<S> GW(t.grad(w).data(), k, n);
        GW.noalias() += X.transpose() * G;
      }
      if (bias != kNoVar && t.needs_grad(bias)) {
        Tensor<S>& gb = t.grad(bias);
        const Tensor<S>& g = t.grad(o);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gb.at(j) += g.at(i, j);
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

template <typename S>
Var reshape(Tape<S>& t, Var a, std::vector<int> shape) {
  const Tensor<S>& va = t.val(a);
  if (Tensor<S>::count(shape) != va.numel()) throw ContractError("reshape: element count");
  Tensor<S> out(shape);
  for (std::int64_t i = 0; i < va.numel(); ++i) out[i] = va[i];
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o] {
      const Tensor<S>& g = t.grad(o);
      for (std::int64_t i = 0; i < g.numel(); ++i) t.accum(a, i, g[i]);
    });
  return o;
}

// Concatenate 2-d tensors along columns: [r, c1], [r, c2], ... -> [r, sum c].
template <typename S>
Var concat_cols(Tape<S>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const int rows = t.val(parts[0]).dim(0);
  int cols = 0;
  bool ng = false;
  for (Var p : parts) {
    const Tensor<S>& v = t.val(p);
    if (v.ndim() != 2 || v.dim(0) != rows) throw ContractError("concat_cols: shape");
    cols += v.dim(1);
    ng = ng || t.needs_grad(p);
  }
  Tensor<S> out({rows, cols});
  int off = 0;
  for (Var p : parts) {
    const Tensor<S>& v = t.val(p);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < v.dim(1); ++j) out.at(i, off + j) = v.at(i, j);
    off += v.dim(1);
  }
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, parts, o, rows] {
      const Tensor<S>& g = t.grad(o);
      int off = 0;
      for (Var p : parts) {
        const int c = t.val(p).dim(1);
        if (t.needs_grad(p)) {
          Tensor<S>& gp = t.grad(p);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < c; ++j) gp.at(i, j) += g.at(i, off + j);
        }
        off += c;
      }
    });
  return o;
}

template <typename S>
Var slice_cols(Tape<S>& t, Var a, int c0, int c1) {
  const Tensor<S>& va = t.val(a);
  if (va.ndim() != 2 || c0 < 0 || c1 > va.dim(1) || c0 >= c1)
    throw ContractError("slice_cols: bad range");
  const int rows = va.dim(0), c = c1 - c0;
  Tensor<S> out({rows, c});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = va.at(i, c0 + j);
  const bool ng = t.needs_grad(a);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, a, o, c0, rows, c] {
      const Tensor<S>& g = t.grad(o);
      Tensor<S>& ga = t.grad(a);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j) ga.at(i, c0 + j) += g.at(i, j);
    });
  return o;
}

// out[i] = X[idx[i]] for 2-d X; backward scatter-adds.
template <typename S>
Var gather_rows(Tape<S>& t, Var x, std::vector<int> idx) {
  const Tensor<S>& vx = t.val(x);
  if (vx.ndim() != 2) throw ContractError("gather_rows: need 2-d input");
  const int d = vx.dim(1);
  for (int i : idx)
    if (i < 0 || i >= vx.dim(0)) throw ConfigError("gather_rows: index out of range");
  Tensor<S> out({static_cast<int>(idx.size()), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int j = 0; j < d; ++j) out.at(static_cast<int>(r), j) = vx.at(idx[r], j);
  const bool ng = t.needs_grad(x);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, x, o, idx = std::move(idx), d] {
      const Tensor<S>& g = t.grad(o);
      Tensor<S>& gx = t.grad(x);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < d; ++j) gx.at(idx[r], j) += g.at(static_cast<int>(r), j);
    });
  return o;
}

// Stack k tensors of identical shape into [k, ...shape].
template <typename S>
Var stack0(Tape<S>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("stack0: no inputs");
  const Tensor<S>& first = t.val(parts[0]);
  std::vector<int> shape;
  shape.push_back(static_cast<int>(parts.size()));
  for (int i = 0; i < first.ndim(); ++i) shape.push_back(first.dim(i));
  const std::int64_t stride = first.numel();
  bool ng = false;
  Tensor<S> out(shape);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<S>& v = t.val(parts[p]);
    if (!v.same_shape(first)) throw ContractError("stack0: shape mismatch");
    ng = ng || t.needs_grad(parts[p]);
    for (std::int64_t i = 0; i < stride; ++i) out[static_cast<std::int64_t>(p) * stride + i] = v[i];
  }
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, parts, o, stride] {
      const Tensor<S>& g = t.grad(o);
      for (std::size_t p = 0; p < parts.size(); ++p) {
        if (!t.needs_grad(parts[p])) continue;
        Tensor<S>& gp = t.grad(parts[p]);
        for (std::int64_t i = 0; i < stride; ++i)
          gp[i] += g[static_cast<std::int64_t>(p) * stride + i];
      }
    });
  return o;
}

// Row-wise select: out[i] = pick[i] ? a[i] : b[i] for 2-d tensors.
template <typename S>
Var where_rows(Tape<S>& t, const std::vector<char>& pick, Var a, Var b) {
  const Tensor<S>&va = t.val(a), &vb = t.val(b);
  if (!va.same_shape(vb) || va.ndim() != 2 ||
      static_cast<int>(pick.size()) != va.dim(0))
    throw ContractError("where_rows: shape mismatch");
  const int rows = va.dim(0), d = va.dim(1);
  Tensor<S> out({rows, d});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = pick[static_cast<std::size_t>(i)] ? va.at(i, j) : vb.at(i, j);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, pick, a, b, o, rows, d] {
      const Tensor<S>& g = t.grad(o);
      for (int i = 0; i < rows; ++i) {
        const Var target = pick[static_cast<std::size_t>(i)] ? a : b;
        for (int j = 0; j < d; ++j)
          t.accum(target, static_cast<std::int64_t>(i) * d + j, g.at(i, j));
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy over rows of logits[n, c] against integer labels.
template <typename S>
Var softmax_cross_entropy(Tape<S>& t, Var logits, const std::vector<int>& labels) {
  const Tensor<S>& vl = t.val(logits);
  if (vl.ndim() != 2 || static_cast<int>(labels.size()) != vl.dim(0))
    throw ContractError("softmax_cross_entropy: shape mismatch");
  const int n = vl.dim(0), c = vl.dim(1);
  for (int y : labels)
    if (y < 0 || y >= c) throw ContractError("softmax_cross_entropy: label out of range");
  S total = S(0);
  for (int i = 0; i < n; ++i) {
    S mx = vl.at(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, vl.at(i, j));
    S lse = S(0);
    for (int j = 0; j < c; ++j) lse += std::exp(vl.at(i, j) - mx);
    lse = mx + std::log(lse);
    total += lse - vl.at(i, labels[static_cast<std::size_t>(i)]);
  }
  const S inv = S(1) / static_cast<S>(n);
  const bool ng = t.needs_grad(logits);
  Var o = t.push(Tensor<S>::scalar(total * inv), ng);
  if (ng)
    t.set_back(o, [&t, logits, o, labels, n, c, inv] {
      const S g = t.grad(o)[0] * inv;
      const Tensor<S>& vl = t.val(logits);
      Tensor<S>& gl = t.grad(logits);
      for (int i = 0; i < n; ++i) {
        S mx = vl.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, vl.at(i, j));
        S z = S(0);
        for (int j = 0; j < c; ++j) z += std::exp(vl.at(i, j) - mx);
        for (int j = 0; j < c; ++j) {
          S p = std::exp(vl.at(i, j) - mx) / z;
          if (j == labels[static_cast<std::size_t>(i)]) p -= S(1);
          gl.at(i, j) += g * p;
        }
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// graph aggregation
// ---------------------------------------------------------------------------

// Per-node arithmetic mean of the candidate vectors the node participates in:
// edge e contributes cand_subj[e] to node subj[e] and cand_obj[e] to node
// obj[e]. Nodes touched by no edge pass `prev` through unchanged. Returns
// [n_nodes, d] plus (via out param) the participation mask.
template <typename S>
Var segment_mean_pairs(Tape<S>& t, Var cand_subj, Var cand_obj,
                       const std::vector<int>& subj, const std::vector<int>& obj,
                       Var prev, std::vector<char>* participates = nullptr) {
  const Tensor<S>&cs = t.val(cand_subj), &co = t.val(cand_obj), &vp = t.val(prev);
  if (vp.ndim() != 2) throw ContractError("segment_mean_pairs: prev must be 2-d");
  const int n = vp.dim(0), d = vp.dim(1);
  const int e = cs.ndim() == 2 ? cs.dim(0) : 0;
  if (cs.ndim() != 2 || co.ndim() != 2 || cs.dim(1) != d || co.dim(1) != d ||
      co.dim(0) != e || static_cast<int>(subj.size()) != e ||
      static_cast<int>(obj.size()) != e)
    throw ContractError("segment_mean_pairs: shape mismatch");
  std::vector<int> count(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < e; ++k) {
    if (subj[k] < 0 || subj[k] >= n || obj[k] < 0 || obj[k] >= n)
      throw ContractError("segment_mean_pairs: node index out of range");
    ++count[static_cast<std::size_t>(subj[k])];
    ++count[static_cast<std::size_t>(obj[k])];
  }
  Tensor<S> out({n, d}, S(0));
  for (int k = 0; k < e; ++k) {
    for (int j = 0; j < d; ++j) {
      out.at(subj[k], j) += cs.at(k, j);
      out.at(obj[k], j) += co.at(k, j);
    }
  }
  for (int i = 0; i < n; ++i) {
    if (count[static_cast<std::size_t>(i)] > 0) {
      const S inv = S(1) / static_cast<S>(count[static_cast<std::size_t>(i)]);
      for (int j = 0; j < d; ++j) out.at(i, j) *= inv;
    } else {
      for (int j = 0; j < d; ++j) out.at(i, j) = vp.at(i, j);
    }
  }
  if (participates) {
    participates->resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      (*participates)[static_cast<std::size_t>(i)] = count[static_cast<std::size_t>(i)] > 0 ? 1 : 0;
  }
  const bool ng = t.needs_grad(cand_subj) || t.needs_grad(cand_obj) || t.needs_grad(prev);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, cand_subj, cand_obj, prev, o, subj, obj, count, n, d, e] {
      const Tensor<S>& g = t.grad(o);
      for (int k = 0; k < e; ++k) {
        const S inv_s = S(1) / static_cast<S>(count[static_cast<std::size_t>(subj[k])]);
        const S inv_o = S(1) / static_cast<S>(count[static_cast<std::size_t>(obj[k])]);
        for (int j = 0; j < d; ++j) {
          t.accum(cand_subj, static_cast<std::int64_t>(k) * d + j, g.at(subj[k], j) * inv_s);
          t.accum(cand_obj, static_cast<std::int64_t>(k) * d + j, g.at(obj[k], j) * inv_o);
        }
      }
      for (int i = 0; i < n; ++i)
        if (count[static_cast<std::size_t>(i)] == 0)
          for (int j = 0; j < d; ++j)
            t.accum(prev, static_cast<std::int64_t>(i) * d + j, g.at(i, j));
    });
  return o;
}

}  // namespace migs
