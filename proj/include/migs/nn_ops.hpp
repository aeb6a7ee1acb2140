#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "migs/autograd.hpp"
#include "migs/errors.hpp"
#include "migs/tensor.hpp"

// Image-shaped ops layered on the tape. Layout convention is NCHW throughout;
// convolution uses im2col + GEMM and recomputes the patch matrix in the
// backward pass instead of caching it.

namespace migs {

namespace detail {

template <typename S>
void im2col(const S* img, int C, int H, int W, int K, int stride, int pad,
            int Hout, int Wout, S* col) {
  const std::int64_t npix = static_cast<std::int64_t>(Hout) * Wout;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        S* row = col + (static_cast<std::int64_t>(c) * K * K + ky * K + kx) * npix;
        for (int oy = 0; oy < Hout; ++oy) {
          const int y = oy * stride - pad + ky;
          for (int ox = 0; ox < Wout; ++ox) {
            const int x = ox * stride - pad + kx;
            row[static_cast<std::int64_t>(oy) * Wout + ox] =
                (y >= 0 && y < H && x >= 0 && x < W)
                    ? img[(static_cast<std::int64_t>(c) * H + y) * W + x]
                    : S(0);
          }
        }
      }
}

template <typename S>
void col2im_add(const S* col, int C, int H, int W, int K, int stride, int pad,
                int Hout, int Wout, S* img) {
  const std::int64_t npix = static_cast<std::int64_t>(Hout) * Wout;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        const S* row = col + (static_cast<std::int64_t>(c) * K * K + ky * K + kx) * npix;
        for (int oy = 0; oy < Hout; ++oy) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= H) continue;
          for (int ox = 0; ox < Wout; ++ox) {
            const int x = ox * stride - pad + kx;
            if (x < 0 || x >= W) continue;
            img[(static_cast<std::int64_t>(c) * H + y) * W + x] +=
                row[static_cast<std::int64_t>(oy) * Wout + ox];
          }
        }
      }
}

}  // namespace detail

// x [N,Cin,H,W], w [Cout,Cin,K,K], bias [Cout] or kNoVar.
template <typename S>
Var conv2d(Tape<S>& t, Var x, Var w, Var bias, int stride, int pad) {
  const Tensor<S>&vx = t.val(x), &vw = t.val(w);
  if (vx.ndim() != 4 || vw.ndim() != 4 || vw.dim(1) != vx.dim(1))
    throw ContractError("conv2d: shape mismatch");
  if (vw.dim(2) != vw.dim(3)) throw ContractError("conv2d: non-square kernel");
  const int N = vx.dim(0), Cin = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const int Cout = vw.dim(0), K = vw.dim(2);
  if (stride < 1 || pad < 0) throw ContractError("conv2d: bad stride/pad");
  const int Hout = (H + 2 * pad - K) / stride + 1;
  const int Wout = (W + 2 * pad - K) / stride + 1;
  if (Hout < 1 || Wout < 1) throw ContractError("conv2d: empty output");
  if (bias != kNoVar && (t.val(bias).ndim() != 1 || t.val(bias).dim(0) != Cout))
    throw ContractError("conv2d: bad bias shape");

  const std::int64_t ckk = static_cast<std::int64_t>(Cin) * K * K;
  const std::int64_t npix = static_cast<std::int64_t>(Hout) * Wout;
  Tensor<S> out({N, Cout, Hout, Wout});
  std::vector<S> col(static_cast<std::size_t>(ckk * npix));
  detail::CMapM<S> Wm(vw.data(), Cout, static_cast<int>(ckk));
  for (int n = 0; n < N; ++n) {
    detail::im2col(vx.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, K,
                   stride, pad, Hout, Wout, col.data());
    detail::CMapM<S> Cm(col.data(), static_cast<int>(ckk), static_cast<int>(npix));
    detail::MapM<S> Om(out.data() + static_cast<std::int64_t>(n) * Cout * npix, Cout,
                       static_cast<int>(npix));
    Om.noalias() = Wm * Cm;
  }
  if (bias != kNoVar) {
    const Tensor<S>& vb = t.val(bias);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Cout; ++c) {
        S* p = out.data() + (static_cast<std::int64_t>(n) * Cout + c) * npix;
        for (std::int64_t i = 0; i < npix; ++i) p[i] += vb[c];
      }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(w) ||
                  (bias != kNoVar && t.needs_grad(bias));
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, x, w, bias, o, N, Cin, H, W, Cout, K, stride, pad, Hout,
                   Wout, ckk, npix] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>&vx = t.val(x), &vw = t.val(w);
      std::vector<S> col(static_cast<std::size_t>(ckk * npix));
      std::vector<S> gcol;
      const bool need_x = t.needs_grad(x), need_w = t.needs_grad(w);
      if (need_x) gcol.resize(static_cast<std::size_t>(ckk * npix));
      detail::CMapM<S> Wm(vw.data(), Cout, static_cast<int>(ckk));
      for (int n = 0; n < N; ++n) {
        detail::CMapM<S> Gm(g.data() + static_cast<std::int64_t>(n) * Cout * npix, Cout,
                            static_cast<int>(npix));
        if (need_w || need_x)
          detail::im2col(vx.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H,
                         W, K, stride, pad, Hout, Wout, col.data());
        if (need_w) {
          detail::CMapM<S> Cm(col.data(), static_cast<int>(ckk), static_cast<int>(npix));
          detail::MapM<S> GW(t.grad(w).data(), Cout, static_cast<int>(ckk));
          GW.noalias() += Gm * Cm.transpose();
        }
        if (need_x) {
          detail::MapM<S> GC(gcol.data(), static_cast<int>(ckk), static_cast<int>(npix));
          GC.noalias() = Wm.transpose() * Gm;
          detail::col2im_add(gcol.data(), Cin, H, W, K, stride, pad, Hout, Wout,
                             t.grad(x).data() + static_cast<std::int64_t>(n) * Cin * H * W);
        }
        if (bias != kNoVar && t.needs_grad(bias)) {
          Tensor<S>& gb = t.grad(bias);
          for (int c = 0; c < Cout; ++c) {
            const S* p = g.data() + (static_cast<std::int64_t>(n) * Cout + c) * npix;
            S acc = S(0);
            for (std::int64_t i = 0; i < npix; ++i) acc += p[i];
            gb[c] += acc;
          }
        }
      }
    });
  return o;
}

// Non-overlapping f×f mean pooling; H, W must be divisible by f.
template <typename S>
Var avg_pool(Tape<S>& t, Var x, int f) {
  const Tensor<S>& vx = t.val(x);
  if (vx.ndim() != 4) throw ContractError("avg_pool: need NCHW");
  const int N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  if (f < 1 || H % f != 0 || W % f != 0)
    throw ConfigError("avg_pool: resolution not divisible by factor");
  const int Ho = H / f, Wo = W / f;
  const S inv = S(1) / static_cast<S>(f * f);
  Tensor<S> out({N, C, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          S acc = S(0);
          for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx)
              acc += vx.at(n, c, oy * f + dy, ox * f + dx);
          out.at(n, c, oy, ox) = acc * inv;
        }
  const bool ng = t.needs_grad(x);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, x, o, N, C, Ho, Wo, f, inv] {
      const Tensor<S>& g = t.grad(o);
      Tensor<S>& gx = t.grad(x);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const S gv = g.at(n, c, oy, ox) * inv;
              for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                  gx.at(n, c, oy * f + dy, ox * f + dx) += gv;
            }
    });
  return o;
}

template <typename S>
Var upsample_nearest2x(Tape<S>& t, Var x) {
  const Tensor<S>& vx = t.val(x);
  if (vx.ndim() != 4) throw ContractError("upsample_nearest2x: need NCHW");
  const int N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  Tensor<S> out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int x2 = 0; x2 < 2 * W; ++x2)
          out.at(n, c, y, x2) = vx.at(n, c, y / 2, x2 / 2);
  const bool ng = t.needs_grad(x);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, x, o, N, C, H, W] {
      const Tensor<S>& g = t.grad(o);
      Tensor<S>& gx = t.grad(x);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < 2 * H; ++y)
            for (int x2 = 0; x2 < 2 * W; ++x2)
              gx.at(n, c, y / 2, x2 / 2) += g.at(n, c, y, x2);
    });
  return o;
}

// Channel-wise batch normalization over N,H,W. In training mode the batch
// statistics normalize and (when provided) update the running buffers
// in-place: run = (1-momentum)*run + momentum*batch. In eval mode the running
// buffers normalize and nothing is written. gamma/beta may be kNoVar for the
// parameter-free variant. Biased variance (1/m) is used everywhere so the
// buffers and the normalizer agree exactly.
template <typename S>
Var batch_norm(Tape<S>& t, Var x, Var gamma, Var beta,
               std::type_identity_t<Tensor<S>>* run_mean,
               std::type_identity_t<Tensor<S>>* run_var, bool training,
               S momentum = S(0.1), S eps = S(1e-5)) {
  const Tensor<S>& vx = t.val(x);
  if (vx.ndim() != 4) throw ContractError("batch_norm: need NCHW");
  const int N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const std::int64_t m = static_cast<std::int64_t>(N) * H * W;
  if (m == 0) throw ContractError("batch_norm: empty batch");
  if (gamma != kNoVar && (t.val(gamma).ndim() != 1 || t.val(gamma).dim(0) != C))
    throw ContractError("batch_norm: bad gamma shape");
  if (beta != kNoVar && (t.val(beta).ndim() != 1 || t.val(beta).dim(0) != C))
    throw ContractError("batch_norm: bad beta shape");
  if (!training && (!run_mean || !run_var))
    throw ContractError("batch_norm: eval mode requires running statistics");

  std::vector<S> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  if (training) {
    for (int c = 0; c < C; ++c) {
      S mu = S(0);
      for (int n = 0; n < N; ++n) {
        const S* p = vx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) mu += p[i];
      }
      mu /= static_cast<S>(m);
      S var = S(0);
      for (int n = 0; n < N; ++n) {
        const S* p = vx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const S d = p[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<S>(m);
      mean[static_cast<std::size_t>(c)] = mu;
      inv_std[static_cast<std::size_t>(c)] = S(1) / std::sqrt(var + eps);
      if (run_mean && run_var) {
        (*run_mean)[c] = (S(1) - momentum) * (*run_mean)[c] + momentum * mu;
        (*run_var)[c] = (S(1) - momentum) * (*run_var)[c] + momentum * var;
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = (*run_mean)[c];
      inv_std[static_cast<std::size_t>(c)] = S(1) / std::sqrt((*run_var)[c] + eps);
    }
  }

  Tensor<S> out({N, C, H, W});
  const Tensor<S>* vg = gamma != kNoVar ? &t.val(gamma) : nullptr;
  const Tensor<S>* vb = beta != kNoVar ? &t.val(beta) : nullptr;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S mu = mean[static_cast<std::size_t>(c)], is = inv_std[static_cast<std::size_t>(c)];
      const S gsc = vg ? (*vg)[c] : S(1);
      const S bsh = vb ? (*vb)[c] : S(0);
      const S* p = vx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      S* q = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is * gsc + bsh;
    }

  const bool ng = t.needs_grad(x) || (gamma != kNoVar && t.needs_grad(gamma)) ||
                  (beta != kNoVar && t.needs_grad(beta));
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, x, gamma, beta, o, N, C, hw, m, mean, inv_std, training] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>& vx = t.val(x);
      const Tensor<S>* vg = gamma != kNoVar ? &t.val(gamma) : nullptr;
      for (int c = 0; c < C; ++c) {
        const S mu = mean[static_cast<std::size_t>(c)], is = inv_std[static_cast<std::size_t>(c)];
        const S gsc = vg ? (*vg)[c] : S(1);
        S sum_g = S(0), sum_gx = S(0);
        for (int n = 0; n < N; ++n) {
          const S* gp = g.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
          const S* xp = vx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * (xp[i] - mu) * is;
          }
        }
        if (gamma != kNoVar && t.needs_grad(gamma)) t.grad(gamma)[c] += sum_gx;
        if (beta != kNoVar && t.needs_grad(beta)) t.grad(beta)[c] += sum_g;
        if (t.needs_grad(x)) {
          Tensor<S>& gx = t.grad(x);
          const S inv_m = S(1) / static_cast<S>(m);
          for (int n = 0; n < N; ++n) {
            const S* gp = g.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            const S* xp = vx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            S* op = gx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              const S xhat = (xp[i] - mu) * is;
              if (training)
                op[i] += gsc * is * (gp[i] - sum_g * inv_m - xhat * sum_gx * inv_m);
              else
                op[i] += gsc * is * gp[i];
            }
          }
        }
      }
    });
  return o;
}

// Mean over the two trailing spatial axes: [N,C,H,W] -> [N,C].
template <typename S>
Var mean_hw(Tape<S>& t, Var x) {
  const Tensor<S>& vx = t.val(x);
  if (vx.ndim() != 4) throw ContractError("mean_hw: need NCHW");
  const int N = vx.dim(0), C = vx.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(vx.dim(2)) * vx.dim(3);
  const S inv = S(1) / static_cast<S>(hw);
  Tensor<S> out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* p = vx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      S acc = S(0);
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      out.at(n, c) = acc * inv;
    }
  const bool ng = t.needs_grad(x);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, x, o, N, C, hw, inv] {
      const Tensor<S>& g = t.grad(o);
      Tensor<S>& gx = t.grad(x);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const S gv = g.at(n, c) * inv;
          S* p = gx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) p[i] += gv;
        }
    });
  return o;
}

// Concatenate NCHW tensors along the channel axis.
template <typename S>
Var concat_channels(Tape<S>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const Tensor<S>& first = t.val(parts[0]);
  if (first.ndim() != 4) throw ContractError("concat_channels: need NCHW");
  const int N = first.dim(0), H = first.dim(2), W = first.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  int Ctot = 0;
  bool ng = false;
  for (Var p : parts) {
    const Tensor<S>& v = t.val(p);
    if (v.ndim() != 4 || v.dim(0) != N || v.dim(2) != H || v.dim(3) != W)
      throw ContractError("concat_channels: shape mismatch");
    Ctot += v.dim(1);
    ng = ng || t.needs_grad(p);
  }
  Tensor<S> out({N, Ctot, H, W});
  for (int n = 0; n < N; ++n) {
    int coff = 0;
    for (Var p : parts) {
      const Tensor<S>& v = t.val(p);
      const int c = v.dim(1);
      std::copy(v.data() + static_cast<std::int64_t>(n) * c * hw,
                v.data() + static_cast<std::int64_t>(n + 1) * c * hw,
                out.data() + (static_cast<std::int64_t>(n) * Ctot + coff) * hw);
      coff += c;
    }
  }
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, parts, o, N, Ctot, hw] {
      const Tensor<S>& g = t.grad(o);
      for (int n = 0; n < N; ++n) {
        int coff = 0;
        for (Var p : parts) {
          const int c = t.val(p).dim(1);
          if (t.needs_grad(p)) {
            Tensor<S>& gp = t.grad(p);
            const S* src = g.data() + (static_cast<std::int64_t>(n) * Ctot + coff) * hw;
            S* dst = gp.data() + static_cast<std::int64_t>(n) * c * hw;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(c) * hw; ++i)
              dst[i] += src[i];
          }
          coff += c;
        }
      }
    });
  return o;
}

// Concatenate along axis 0; trailing dims must match.
template <typename S>
Var concat0(Tape<S>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat0: no inputs");
  const Tensor<S>& first = t.val(parts[0]);
  std::vector<int> shape(first.shape().begin(), first.shape().end());
  std::int64_t inner = 1;
  for (int i = 1; i < first.ndim(); ++i) inner *= first.dim(i);
  int total0 = 0;
  bool ng = false;
  for (Var p : parts) {
    const Tensor<S>& v = t.val(p);
    if (v.ndim() != first.ndim()) throw ContractError("concat0: rank mismatch");
    for (int i = 1; i < v.ndim(); ++i)
      if (v.dim(i) != first.dim(i)) throw ContractError("concat0: shape mismatch");
    total0 += v.dim(0);
    ng = ng || t.needs_grad(p);
  }
  shape[0] = total0;
  Tensor<S> out(shape);
  std::int64_t off = 0;
  for (Var p : parts) {
    const Tensor<S>& v = t.val(p);
    std::copy(v.data(), v.data() + v.numel(), out.data() + off);
    off += v.numel();
  }
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, parts, o] {
      const Tensor<S>& g = t.grad(o);
      std::int64_t off = 0;
      for (Var p : parts) {
        const std::int64_t n = t.val(p).numel();
        if (t.needs_grad(p)) {
          Tensor<S>& gp = t.grad(p);
          for (std::int64_t i = 0; i < n; ++i) gp[i] += g[off + i];
        }
        off += n;
      }
    });
  return o;
}

// Repairs raw logistic box outputs for layout use: per axis the pair is
// sorted, then widened to at least eps (shifting left if the box touches 1).
// The raw values stay on the tape for the box loss; this op only feeds
// compose_layout.
template <typename S>
Var repair_boxes(Tape<S>& t, Var raw, S eps = S(1e-3)) {
  const Tensor<S>& vr = t.val(raw);
  if (vr.ndim() != 2 || vr.dim(1) != 4) throw ContractError("repair_boxes: need [N,4]");
  const int N = vr.dim(0);
  Tensor<S> out({N, 4});
  // branch codes per axis: bit0 = swapped, bit1 = widened, bit2 = shifted
  std::vector<unsigned char> code(static_cast<std::size_t>(N) * 2);
  for (int i = 0; i < N; ++i)
    for (int axis = 0; axis < 2; ++axis) {
      const int a = axis, b = axis + 2;  // (x0,x1) or (y0,y1)
      S lo = vr.at(i, a), hi = vr.at(i, b);
      unsigned char cd = 0;
      if (hi < lo) {
        std::swap(lo, hi);
        cd |= 1;
      }
      if (hi - lo < eps) {
        cd |= 2;
        hi = lo + eps;
        if (hi > S(1)) {
          cd |= 4;
          hi = S(1);
          lo = S(1) - eps;
        }
      }
      out.at(i, a) = lo;
      out.at(i, b) = hi;
      code[static_cast<std::size_t>(i) * 2 + axis] = cd;
    }
  const bool ng = t.needs_grad(raw);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, raw, o, N, code = std::move(code)] {
      const Tensor<S>& g = t.grad(o);
      Tensor<S>& gr = t.grad(raw);
      for (int i = 0; i < N; ++i)
        for (int axis = 0; axis < 2; ++axis) {
          const int a = axis, b = axis + 2;
          const unsigned char cd = code[static_cast<std::size_t>(i) * 2 + axis];
          const int src_lo = (cd & 1) ? b : a;
          const int src_hi = (cd & 1) ? a : b;
          if (cd & 4) continue;  // fully clamped; constants
          if (cd & 2) {
            // hi = lo + eps: both outputs depend on lo only
            gr.at(i, src_lo) += g.at(i, a) + g.at(i, b);
          } else {
            gr.at(i, src_lo) += g.at(i, a);
            gr.at(i, src_hi) += g.at(i, b);
          }
        }
    });
  return o;
}

// Scene layout: paints each object's mask, bilinearly warped into its box on
// the H×W canvas, weighted by the object's feature vector. Boxes are
// normalized (x0,y0,x1,y1), already repaired. Pixels outside a box receive
// nothing from that object; the box-boundary indicator is treated as constant
// for gradients (standard ROI-style subgradient).
template <typename S>
Var paint_masks(Tape<S>& t, Var feats, Var boxes, Var masks, int H, int W) {
  const Tensor<S>&vf = t.val(feats), &vb = t.val(boxes), &vm = t.val(masks);
  if (vf.ndim() != 2 || vb.ndim() != 2 || vb.dim(1) != 4 || vm.ndim() != 3)
    throw ContractError("paint_masks: bad shapes");
  const int Nobj = vf.dim(0), D = vf.dim(1), M = vm.dim(1);
  if (vb.dim(0) != Nobj || vm.dim(0) != Nobj || vm.dim(2) != M)
    throw ContractError("paint_masks: length mismatch");
  Tensor<S> out({D, H, W}, S(0));
  auto sample = [&](int i, S fy, S fx, S& val, S& dfy, S& dfx) {
    const S cy = std::clamp(fy, S(0), S(M - 1));
    const S cx = std::clamp(fx, S(0), S(M - 1));
    const int iy0 = std::min(static_cast<int>(cy), M - 1);
    const int ix0 = std::min(static_cast<int>(cx), M - 1);
    const int iy1 = std::min(iy0 + 1, M - 1);
    const int ix1 = std::min(ix0 + 1, M - 1);
    const S wy = cy - static_cast<S>(iy0), wx = cx - static_cast<S>(ix0);
    const S m00 = vm.at(i, iy0, ix0), m01 = vm.at(i, iy0, ix1);
    const S m10 = vm.at(i, iy1, ix0), m11 = vm.at(i, iy1, ix1);
    val = (S(1) - wy) * ((S(1) - wx) * m00 + wx * m01) + wy * ((S(1) - wx) * m10 + wx * m11);
    const bool in_y = fy > S(0) && fy < S(M - 1);
    const bool in_x = fx > S(0) && fx < S(M - 1);
    dfy = in_y ? ((S(1) - wx) * (m10 - m00) + wx * (m11 - m01)) : S(0);
    dfx = in_x ? ((S(1) - wy) * (m01 - m00) + wy * (m11 - m10)) : S(0);
  };
  for (int i = 0; i < Nobj; ++i) {
    const S x0 = vb.at(i, 0), y0 = vb.at(i, 1), x1 = vb.at(i, 2), y1 = vb.at(i, 3);
    const S bw = x1 - x0, bh = y1 - y0;
    if (!(bw > S(0)) || !(bh > S(0))) throw ContractError("paint_masks: degenerate box");
    for (int py = 0; py < H; ++py) {
      const S v = (static_cast<S>(py) + S(0.5)) / static_cast<S>(H);
      if (v < y0 || v > y1) continue;
      const S fy = (v - y0) / bh * static_cast<S>(M) - S(0.5);
      for (int px = 0; px < W; ++px) {
        const S u = (static_cast<S>(px) + S(0.5)) / static_cast<S>(W);
        if (u < x0 || u > x1) continue;
        const S fx = (u - x0) / bw * static_cast<S>(M) - S(0.5);
        S mval, dfy, dfx;
        sample(i, fy, fx, mval, dfy, dfx);
        for (int c = 0; c < D; ++c) out.at(c, py, px) += vf.at(i, c) * mval;
      }
    }
  }
  const bool ng = t.needs_grad(feats) || t.needs_grad(boxes) || t.needs_grad(masks);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, feats, boxes, masks, o, Nobj, D, M, H, W] {
      const Tensor<S>& g = t.grad(o);
      const Tensor<S>&vf = t.val(feats), &vb = t.val(boxes), &vm = t.val(masks);
      for (int i = 0; i < Nobj; ++i) {
        const S x0 = vb.at(i, 0), y0 = vb.at(i, 1), x1 = vb.at(i, 2), y1 = vb.at(i, 3);
        const S bw = x1 - x0, bh = y1 - y0;
        for (int py = 0; py < H; ++py) {
          const S v = (static_cast<S>(py) + S(0.5)) / static_cast<S>(H);
          if (v < y0 || v > y1) continue;
          const S fy = (v - y0) / bh * static_cast<S>(M) - S(0.5);
          for (int px = 0; px < W; ++px) {
            const S u = (static_cast<S>(px) + S(0.5)) / static_cast<S>(W);
            if (u < x0 || u > x1) continue;
            const S fx = (u - x0) / bw * static_cast<S>(M) - S(0.5);
            const S cy = std::clamp(fy, S(0), S(M - 1));
            const S cx = std::clamp(fx, S(0), S(M - 1));
            const int iy0 = std::min(static_cast<int>(cy), M - 1);
            const int ix0 = std::min(static_cast<int>(cx), M - 1);
            const int iy1 = std::min(iy0 + 1, M - 1);
            const int ix1 = std::min(ix0 + 1, M - 1);
            const S wy = cy - static_cast<S>(iy0), wx = cx - static_cast<S>(ix0);
            const S m00 = vm.at(i, iy0, ix0), m01 = vm.at(i, iy0, ix1);
            const S m10 = vm.at(i, iy1, ix0), m11 = vm.at(i, iy1, ix1);
            const S mval = (S(1) - wy) * ((S(1) - wx) * m00 + wx * m01) +
                           wy * ((S(1) - wx) * m10 + wx * m11);
            S gm = S(0);  // dL/dmval aggregated over channels
            for (int c = 0; c < D; ++c) {
              const S gpix = g.at(c, py, px);
              t.accum(feats, static_cast<std::int64_t>(i) * D + c, gpix * mval);
              gm += gpix * vf.at(i, c);
            }
            if (t.needs_grad(masks)) {
              Tensor<S>& gmask = t.grad(masks);
              const std::int64_t base = static_cast<std::int64_t>(i) * M * M;
              gmask[base + iy0 * M + ix0] += gm * (S(1) - wy) * (S(1) - wx);
              gmask[base + iy0 * M + ix1] += gm * (S(1) - wy) * wx;
              gmask[base + iy1 * M + ix0] += gm * wy * (S(1) - wx);
              gmask[base + iy1 * M + ix1] += gm * wy * wx;
            }
            if (t.needs_grad(boxes)) {
              const bool in_y = fy > S(0) && fy < S(M - 1);
              const bool in_x = fx > S(0) && fx < S(M - 1);
              const S dfy = in_y ? ((S(1) - wx) * (m10 - m00) + wx * (m11 - m01)) : S(0);
              const S dfx = in_x ? ((S(1) - wy) * (m01 - m00) + wy * (m11 - m10)) : S(0);
              const S Mf = static_cast<S>(M);
              // fx = (u-x0)/bw*M - 0.5 ; fy analogous
              const S d_x0 = dfx * Mf * (u - x1) / (bw * bw);
              const S d_x1 = dfx * Mf * (x0 - u) / (bw * bw);
              const S d_y0 = dfy * Mf * (v - y1) / (bh * bh);
              const S d_y1 = dfy * Mf * (y0 - v) / (bh * bh);
              t.accum(boxes, static_cast<std::int64_t>(i) * 4 + 0, gm * d_x0);
              t.accum(boxes, static_cast<std::int64_t>(i) * 4 + 1, gm * d_y0);
              t.accum(boxes, static_cast<std::int64_t>(i) * 4 + 2, gm * d_x1);
              t.accum(boxes, static_cast<std::int64_t>(i) * 4 + 3, gm * d_y1);
            }
          }
        }
      }
    });
  return o;
}

// Bilinear crop-and-resize of box regions from a [3,H,W] image to [N,3,c,c].
// Boxes are plain values (normalized coords); gradients flow to the image.
template <typename S>
Var crop_resize(Tape<S>& t, Var image, const Tensor<S>& boxes, int c) {
  const Tensor<S>& vi = t.val(image);
  if (vi.ndim() != 3) throw ContractError("crop_resize: image must be [C,H,W]");
  if (boxes.ndim() != 2 || boxes.dim(1) != 4) throw ContractError("crop_resize: boxes [N,4]");
  if (c < 1) throw ContractError("crop_resize: bad crop size");
  const int Cc = vi.dim(0), H = vi.dim(1), W = vi.dim(2), N = boxes.dim(0);
  Tensor<S> out({N, Cc, c, c});
  auto corners = [&](S f, int limit, int& i0, int& i1, S& w) {
    const S cf = std::clamp(f, S(0), static_cast<S>(limit - 1));
    i0 = std::min(static_cast<int>(cf), limit - 1);
    i1 = std::min(i0 + 1, limit - 1);
    w = cf - static_cast<S>(i0);
  };
  for (int n = 0; n < N; ++n) {
    const S x0 = boxes.at(n, 0), y0 = boxes.at(n, 1), x1 = boxes.at(n, 2), y1 = boxes.at(n, 3);
    for (int oy = 0; oy < c; ++oy) {
      const S v = y0 + (static_cast<S>(oy) + S(0.5)) / static_cast<S>(c) * (y1 - y0);
      const S fy = v * static_cast<S>(H) - S(0.5);
      int iy0, iy1;
      S wy;
      corners(fy, H, iy0, iy1, wy);
      for (int ox = 0; ox < c; ++ox) {
        const S u = x0 + (static_cast<S>(ox) + S(0.5)) / static_cast<S>(c) * (x1 - x0);
        const S fx = u * static_cast<S>(W) - S(0.5);
        int ix0, ix1;
        S wx;
        corners(fx, W, ix0, ix1, wx);
        for (int ch = 0; ch < Cc; ++ch) {
          const S p00 = vi.at(ch, iy0, ix0), p01 = vi.at(ch, iy0, ix1);
          const S p10 = vi.at(ch, iy1, ix0), p11 = vi.at(ch, iy1, ix1);
          out.at(n, ch, oy, ox) = (S(1) - wy) * ((S(1) - wx) * p00 + wx * p01) +
                                  wy * ((S(1) - wx) * p10 + wx * p11);
        }
      }
    }
  }
  const bool ng = t.needs_grad(image);
  Var o = t.push(std::move(out), ng);
  if (ng)
    t.set_back(o, [&t, image, o, boxes, c, Cc, H, W, N] {
      const Tensor<S>& g = t.grad(o);
      Tensor<S>& gi = t.grad(image);
      auto corners = [](S f, int limit, int& i0, int& i1, S& w) {
        const S cf = std::clamp(f, S(0), static_cast<S>(limit - 1));
        i0 = std::min(static_cast<int>(cf), limit - 1);
        i1 = std::min(i0 + 1, limit - 1);
        w = cf - static_cast<S>(i0);
      };
      for (int n = 0; n < N; ++n) {
        const S x0 = boxes.at(n, 0), y0 = boxes.at(n, 1), x1 = boxes.at(n, 2), y1 = boxes.at(n, 3);
        for (int oy = 0; oy < c; ++oy) {
          const S v = y0 + (static_cast<S>(oy) + S(0.5)) / static_cast<S>(c) * (y1 - y0);
          int iy0, iy1;
          S wy;
          corners(v * static_cast<S>(H) - S(0.5), H, iy0, iy1, wy);
          for (int ox = 0; ox < c; ++ox) {
            const S u = x0 + (static_cast<S>(ox) + S(0.5)) / static_cast<S>(c) * (x1 - x0);
            int ix0, ix1;
            S wx;
            corners(u * static_cast<S>(W) - S(0.5), W, ix0, ix1, wx);
            for (int ch = 0; ch < Cc; ++ch) {
              const S gv = g.at(n, ch, oy, ox);
              gi.at(ch, iy0, ix0) += gv * (S(1) - wy) * (S(1) - wx);
              gi.at(ch, iy0, ix1) += gv * (S(1) - wy) * wx;
              gi.at(ch, iy1, ix0) += gv * wy * (S(1) - wx);
              gi.at(ch, iy1, ix1) += gv * wy * wx;
            }
          }
        }
      }
    });
  return o;
}

}  // namespace migs
