#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "migs/autograd.hpp"
#include "migs/errors.hpp"
#include "migs/graphnet.hpp"
#include "migs/nn_ops.hpp"
#include "migs/rng.hpp"
#include "migs/tensor.hpp"

namespace migs {

// Decoders work in [-1,1] image space; conversion to [0,1] happens only at
// I/O boundaries (PNG writing, metric extraction).

struct CrnConfig {
  int num_blocks = 5;
  std::vector<int> channels = {1024, 512, 256, 128, 64};
  double leaky_slope = 0.2;

  static CrnConfig desk() {
    CrnConfig c;
    c.channels = {128, 64, 32, 16, 16};
    return c;
  }

  void validate() const {
    if (num_blocks <= 0 ||
        static_cast<int>(channels.size()) != num_blocks)
      throw ConfigError("CrnConfig: need one channel width per block");
    for (int c : channels)
      if (c <= 0) throw ConfigError("CrnConfig: channels must be positive");
  }
};

struct SpadeConfig {
  int num_blocks = 5;
  std::vector<int> channels = {1024, 512, 256, 128, 64};
  int mod_width = 64;  // hidden width of the modulation convs
  int noise_dim = 64;
  double leaky_slope = 0.2;

  static SpadeConfig desk() {
    SpadeConfig c;
    c.channels = {128, 64, 32, 16, 16};
    return c;
  }

  void validate() const {
    if (num_blocks <= 0 ||
        static_cast<int>(channels.size()) != num_blocks)
      throw ConfigError("SpadeConfig: need one channel width per block");
    for (int c : channels)
      if (c <= 0) throw ConfigError("SpadeConfig: channels must be positive");
    if (mod_width <= 0 || noise_dim <= 0)
      throw ConfigError("SpadeConfig: mod_width and noise_dim must be positive");
  }
};

// ---------------------------------------------------------------------------
// CRN
// ---------------------------------------------------------------------------

template <typename T>
struct CrnParamsT {
  struct Block {
    T conv1_w{}, conv1_b{}, bn1_gamma{}, bn1_beta{};
    T conv2_w{}, conv2_b{}, bn2_gamma{}, bn2_beta{};
  };
  std::vector<Block> blocks;
  T out_w{}, out_b{};

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      auto& blk = self.blocks[b];
      f(p + "conv1_w", blk.conv1_w);
      f(p + "conv1_b", blk.conv1_b);
      f(p + "bn1_gamma", blk.bn1_gamma);
      f(p + "bn1_beta", blk.bn1_beta);
      f(p + "conv2_w", blk.conv2_w);
      f(p + "conv2_b", blk.conv2_b);
      f(p + "bn2_gamma", blk.bn2_gamma);
      f(p + "bn2_beta", blk.bn2_beta);
    }
    f("out_w", self.out_w);
    f("out_b", self.out_b);
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }
};

// Batch-norm running statistics; meta-learning treats these exactly like
// parameters (they average in the outer update) but forward passes mutate
// them in place, so they stay plain tensors rather than tape leaves.
template <typename S>
struct CrnState {
  struct Block {
    Tensor<S> bn1_mean, bn1_var, bn2_mean, bn2_var;
  };
  std::vector<Block> blocks;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      auto& blk = self.blocks[b];
      f(p + "bn1_mean", blk.bn1_mean);
      f(p + "bn1_var", blk.bn1_var);
      f(p + "bn2_mean", blk.bn2_mean);
      f(p + "bn2_var", blk.bn2_var);
    }
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }
};

namespace detail {

template <typename S>
void init_conv(Tensor<S>& w, Tensor<S>& b, int out_ch, int in_ch, int k,
               RngStream& rng) {
  w = Tensor<S>({out_ch, in_ch, k, k});
  fill_normal(w, rng, std::sqrt(2.0 / (in_ch * k * k)));
  b = Tensor<S>({out_ch}, S(0));
}

template <typename S>
void init_bn(Tensor<S>& gamma, Tensor<S>& beta, int ch) {
  gamma = Tensor<S>({ch}, S(1));
  beta = Tensor<S>({ch}, S(0));
}

}  // namespace detail

template <typename S>
CrnParamsT<Tensor<S>> init_crn_params(const CrnConfig& cfg, int layout_dim,
                                      RngStream& rng) {
  cfg.validate();
  if (layout_dim <= 0) throw ConfigError("init_crn_params: bad layout dim");
  CrnParamsT<Tensor<S>> p;
  p.blocks.resize(static_cast<std::size_t>(cfg.num_blocks));
  for (int b = 0; b < cfg.num_blocks; ++b) {
    auto& blk = p.blocks[static_cast<std::size_t>(b)];
    const int ch = cfg.channels[static_cast<std::size_t>(b)];
    const int in_ch =
        b == 0 ? layout_dim
               : cfg.channels[static_cast<std::size_t>(b - 1)] + layout_dim;
    detail::init_conv(blk.conv1_w, blk.conv1_b, ch, in_ch, 3, rng);
    detail::init_bn(blk.bn1_gamma, blk.bn1_beta, ch);
    detail::init_conv(blk.conv2_w, blk.conv2_b, ch, ch, 3, rng);
    detail::init_bn(blk.bn2_gamma, blk.bn2_beta, ch);
  }
  detail::init_conv(p.out_w, p.out_b, 3, cfg.channels.back(), 1, rng);
  return p;
}

template <typename S>
CrnState<S> init_crn_state(const CrnConfig& cfg) {
  cfg.validate();
  CrnState<S> st;
  st.blocks.resize(static_cast<std::size_t>(cfg.num_blocks));
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const int ch = cfg.channels[static_cast<std::size_t>(b)];
    auto& blk = st.blocks[static_cast<std::size_t>(b)];
    blk.bn1_mean = Tensor<S>({ch}, S(0));
    blk.bn1_var = Tensor<S>({ch}, S(1));
    blk.bn2_mean = Tensor<S>({ch}, S(0));
    blk.bn2_var = Tensor<S>({ch}, S(1));
  }
  return st;
}

template <typename S>
CrnParamsT<Var> lift_crn(Tape<S>& t, const CrnParamsT<Tensor<S>>& p,
                         bool needs_grad) {
  CrnParamsT<Var> out;
  out.blocks.resize(p.blocks.size());
  std::vector<Var*> dst;
  out.for_each([&dst](const std::string&, Var& v) { dst.push_back(&v); });
  std::size_t i = 0;
  p.for_each([&](const std::string&, const Tensor<S>& w) {
    *dst[i++] = t.leaf(w, needs_grad);
  });
  return out;
}

namespace detail {

template <typename S>
Var resize_layout(Tape<S>& t, Var layout, int factor) {
  return factor > 1 ? avg_pool(t, layout, factor) : layout;
}

inline std::vector<int> batched_shape(const std::vector<int>& s) {
  std::vector<int> out = {1};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace detail

// Cascaded refinement: block b runs at (H,W)/2^(num_blocks-1-b) on
// [upsampled previous output ∥ layout pooled to that resolution], applying
// conv3x3 -> batch norm -> leaky ReLU twice; 1x1 conv + tanh finishes.
// Accepts [D,H,W] or batched [N,D,H,W]. The noise argument exists for
// interface parity between decoders; the CRN path does not consume it.
template <typename S>
Var crn_forward(Tape<S>& t, Var layout, const CrnParamsT<Var>& p,
                std::type_identity_t<CrnState<S>>* state, const CrnConfig& cfg,
                bool training, Var noise = kNoVar) {
  (void)noise;
  cfg.validate();
  if (static_cast<int>(p.blocks.size()) != cfg.num_blocks)
    throw ConfigError("crn_forward: block count mismatch");
  const bool single = t.val(layout).ndim() == 3;
  Var lay = single
                ? reshape(t, layout, detail::batched_shape(t.val(layout).shape()))
                : layout;
  const Tensor<S>& vl = t.val(lay);
  if (vl.ndim() != 4) throw ContractError("crn_forward: layout must be [N,D,H,W]");
  const int H = vl.dim(2), W = vl.dim(3);
  const int factor = 1 << (cfg.num_blocks - 1);
  if (H % factor != 0 || W % factor != 0)
    throw ConfigError("crn_forward: H and W must be divisible by 2^(num_blocks-1)");

  const S slope = S(cfg.leaky_slope);
  Var x = kNoVar;
  for (int b = 0; b < cfg.num_blocks; ++b) {
    auto& blk = p.blocks[static_cast<std::size_t>(b)];
    auto* sb = state ? &state->blocks[static_cast<std::size_t>(b)] : nullptr;
    Var lay_b = detail::resize_layout(t, lay, 1 << (cfg.num_blocks - 1 - b));
    Var in = b == 0 ? lay_b
                    : concat_channels(t, {upsample_nearest2x(t, x), lay_b});
    x = conv2d(t, in, blk.conv1_w, blk.conv1_b, 1, 1);
    x = batch_norm(t, x, blk.bn1_gamma, blk.bn1_beta,
                   sb ? &sb->bn1_mean : nullptr, sb ? &sb->bn1_var : nullptr,
                   training);
    x = leaky_relu(t, x, slope);
    x = conv2d(t, x, blk.conv2_w, blk.conv2_b, 1, 1);
    x = batch_norm(t, x, blk.bn2_gamma, blk.bn2_beta,
                   sb ? &sb->bn2_mean : nullptr, sb ? &sb->bn2_var : nullptr,
                   training);
    x = leaky_relu(t, x, slope);
  }
  Var img = tanh_op(t, conv2d(t, x, p.out_w, p.out_b, 1, 0));
  if (single) {
    const Tensor<S>& vi = t.val(img);
    return reshape(t, img, {vi.dim(1), vi.dim(2), vi.dim(3)});
  }
  return img;
}

// ---------------------------------------------------------------------------
// SPADE
// ---------------------------------------------------------------------------

template <typename T>
struct SpadeParamsT {
  struct Mod {  // layout -> shared hidden -> per-pixel (gamma, beta)
    T w1{}, b1{}, gamma_w{}, gamma_b{}, beta_w{}, beta_b{};
  };
  struct Block {
    Mod norm1, norm2;
    T conv1_w{}, conv1_b{}, conv2_w{}, conv2_b{};
  };
  T proj_w{}, proj_b{};          // noise -> lowest-resolution tensor
  std::vector<T> trans_w, trans_b;  // channel transitions after upsampling
  std::vector<Block> blocks;
  T out_w{}, out_b{};

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("proj_w", self.proj_w);
    f("proj_b", self.proj_b);
    for (std::size_t i = 0; i < self.trans_w.size(); ++i) {
      f("trans" + std::to_string(i) + "_w", self.trans_w[i]);
      f("trans" + std::to_string(i) + "_b", self.trans_b[i]);
    }
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      auto& blk = self.blocks[b];
      auto mod = [&f, &p](const char* tag, auto& m) {
        const std::string q = p + tag;
        f(q + ".w1", m.w1);
        f(q + ".b1", m.b1);
        f(q + ".gamma_w", m.gamma_w);
        f(q + ".gamma_b", m.gamma_b);
        f(q + ".beta_w", m.beta_w);
        f(q + ".beta_b", m.beta_b);
      };
      mod("norm1", blk.norm1);
      f(p + "conv1_w", blk.conv1_w);
      f(p + "conv1_b", blk.conv1_b);
      mod("norm2", blk.norm2);
      f(p + "conv2_w", blk.conv2_w);
      f(p + "conv2_b", blk.conv2_b);
    }
    f("out_w", self.out_w);
    f("out_b", self.out_b);
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }
};

template <typename S>
struct SpadeState {
  struct Block {
    Tensor<S> n1_mean, n1_var, n2_mean, n2_var;
  };
  std::vector<Block> blocks;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      auto& blk = self.blocks[b];
      f(p + "n1_mean", blk.n1_mean);
      f(p + "n1_var", blk.n1_var);
      f(p + "n2_mean", blk.n2_mean);
      f(p + "n2_var", blk.n2_var);
    }
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }
};

// The noise projection fixes the lowest resolution, so SPADE parameters are
// tied to the target image size (recorded in the experiment config).
template <typename S>
SpadeParamsT<Tensor<S>> init_spade_params(const SpadeConfig& cfg,
                                          int layout_dim, int H, int W,
                                          RngStream& rng) {
  cfg.validate();
  if (layout_dim <= 0) throw ConfigError("init_spade_params: bad layout dim");
  const int factor = 1 << (cfg.num_blocks - 1);
  if (H % factor != 0 || W % factor != 0 || H <= 0 || W <= 0)
    throw ConfigError("init_spade_params: H and W must be divisible by 2^(num_blocks-1)");
  const int h0 = H / factor, w0 = W / factor;

  SpadeParamsT<Tensor<S>> p;
  const int ch0 = cfg.channels[0];
  p.proj_w = Tensor<S>({cfg.noise_dim, ch0 * h0 * w0});
  detail::fill_normal(p.proj_w, rng, std::sqrt(2.0 / cfg.noise_dim));
  p.proj_b = Tensor<S>({ch0 * h0 * w0}, S(0));
  p.trans_w.resize(static_cast<std::size_t>(cfg.num_blocks - 1));
  p.trans_b.resize(static_cast<std::size_t>(cfg.num_blocks - 1));
  for (int i = 1; i < cfg.num_blocks; ++i)
    detail::init_conv(p.trans_w[static_cast<std::size_t>(i - 1)],
                      p.trans_b[static_cast<std::size_t>(i - 1)],
                      cfg.channels[static_cast<std::size_t>(i)],
                      cfg.channels[static_cast<std::size_t>(i - 1)], 3, rng);
  p.blocks.resize(static_cast<std::size_t>(cfg.num_blocks));
  for (int b = 0; b < cfg.num_blocks; ++b) {
    auto& blk = p.blocks[static_cast<std::size_t>(b)];
    const int ch = cfg.channels[static_cast<std::size_t>(b)];
    auto init_mod = [&](typename SpadeParamsT<Tensor<S>>::Mod& m) {
      detail::init_conv(m.w1, m.b1, cfg.mod_width, layout_dim, 3, rng);
      detail::init_conv(m.gamma_w, m.gamma_b, ch, cfg.mod_width, 3, rng);
      detail::init_conv(m.beta_w, m.beta_b, ch, cfg.mod_width, 3, rng);
    };
    init_mod(blk.norm1);
    detail::init_conv(blk.conv1_w, blk.conv1_b, ch, ch, 3, rng);
    init_mod(blk.norm2);
    detail::init_conv(blk.conv2_w, blk.conv2_b, ch, ch, 3, rng);
  }
  detail::init_conv(p.out_w, p.out_b, 3, cfg.channels.back(), 1, rng);
  return p;
}

template <typename S>
SpadeState<S> init_spade_state(const SpadeConfig& cfg) {
  cfg.validate();
  SpadeState<S> st;
  st.blocks.resize(static_cast<std::size_t>(cfg.num_blocks));
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const int ch = cfg.channels[static_cast<std::size_t>(b)];
    auto& blk = st.blocks[static_cast<std::size_t>(b)];
    blk.n1_mean = Tensor<S>({ch}, S(0));
    blk.n1_var = Tensor<S>({ch}, S(1));
    blk.n2_mean = Tensor<S>({ch}, S(0));
    blk.n2_var = Tensor<S>({ch}, S(1));
  }
  return st;
}

template <typename S>
SpadeParamsT<Var> lift_spade(Tape<S>& t, const SpadeParamsT<Tensor<S>>& p,
                             bool needs_grad) {
  SpadeParamsT<Var> out;
  out.blocks.resize(p.blocks.size());
  out.trans_w.resize(p.trans_w.size());
  out.trans_b.resize(p.trans_b.size());
  std::vector<Var*> dst;
  out.for_each([&dst](const std::string&, Var& v) { dst.push_back(&v); });
  std::size_t i = 0;
  p.for_each([&](const std::string&, const Tensor<S>& w) {
    *dst[i++] = t.leaf(w, needs_grad);
  });
  return out;
}

namespace detail {

// Parameter-free normalization to zero mean / unit variance per channel,
// then the per-pixel (1 + gamma) * x + beta modulation computed from the
// resized layout.
template <typename S>
Var spade_norm(Tape<S>& t, Var x, Var layout_r,
               const typename SpadeParamsT<Var>::Mod& m,
               Tensor<S>* run_mean, Tensor<S>* run_var, bool training,
               S slope) {
  Var xn = batch_norm(t, x, kNoVar, kNoVar, run_mean, run_var, training);
  Var h = leaky_relu(t, conv2d(t, layout_r, m.w1, m.b1, 1, 1), slope);
  Var gamma = conv2d(t, h, m.gamma_w, m.gamma_b, 1, 1);
  Var beta = conv2d(t, h, m.beta_w, m.beta_b, 1, 1);
  return add(t, mul(t, xn, add_scalar(t, gamma, S(1))), beta);
}

}  // namespace detail

// Residual decoder: the noise projection seeds the lowest resolution; every
// block modulates normalized activations with per-pixel scale/shift derived
// from the layout at that block's resolution, with x2 upsampling + a channel
// transition conv between blocks.  Accepts [D,H,W] with noise [Z], or
// [N,D,H,W] with noise [N,Z].
template <typename S>
Var spade_forward(Tape<S>& t, Var layout, const SpadeParamsT<Var>& p,
                  std::type_identity_t<SpadeState<S>>* state,
                  const SpadeConfig& cfg, bool training, Var noise) {
  cfg.validate();
  if (static_cast<int>(p.blocks.size()) != cfg.num_blocks)
    throw ConfigError("spade_forward: block count mismatch");
  if (noise == kNoVar) throw ContractError("spade_forward: noise required");
  const bool single = t.val(layout).ndim() == 3;
  Var lay = single
                ? reshape(t, layout, detail::batched_shape(t.val(layout).shape()))
                : layout;
  Var nz = single && t.val(noise).ndim() == 1
               ? reshape(t, noise, detail::batched_shape(t.val(noise).shape()))
               : noise;
  const Tensor<S>& vl = t.val(lay);
  const Tensor<S>& vn = t.val(nz);
  if (vl.ndim() != 4) throw ContractError("spade_forward: layout must be [N,D,H,W]");
  if (vn.ndim() != 2 || vn.dim(0) != vl.dim(0) || vn.dim(1) != cfg.noise_dim)
    throw ContractError("spade_forward: noise must be [N, noise_dim]");
  const int N = vl.dim(0), H = vl.dim(2), W = vl.dim(3);
  const int factor = 1 << (cfg.num_blocks - 1);
  if (H % factor != 0 || W % factor != 0)
    throw ConfigError("spade_forward: H and W must be divisible by 2^(num_blocks-1)");
  const int h0 = H / factor, w0 = W / factor, ch0 = cfg.channels[0];
  if (t.val(p.proj_w).dim(1) != ch0 * h0 * w0)
    throw ConfigError("spade_forward: parameters were built for a different image size");

  const S slope = S(cfg.leaky_slope);
  Var x = reshape(t, linear(t, nz, p.proj_w, p.proj_b), {N, ch0, h0, w0});
  for (int b = 0; b < cfg.num_blocks; ++b) {
    auto& blk = p.blocks[static_cast<std::size_t>(b)];
    auto* sb = state ? &state->blocks[static_cast<std::size_t>(b)] : nullptr;
    if (b > 0) {
      x = upsample_nearest2x(t, x);
      x = leaky_relu(t,
                     conv2d(t, x, p.trans_w[static_cast<std::size_t>(b - 1)],
                            p.trans_b[static_cast<std::size_t>(b - 1)], 1, 1),
                     slope);
    }
    Var lay_b = detail::resize_layout(t, lay, 1 << (cfg.num_blocks - 1 - b));
    Var h = detail::spade_norm(t, x, lay_b, blk.norm1,
                               sb ? &sb->n1_mean : nullptr,
                               sb ? &sb->n1_var : nullptr, training, slope);
    h = conv2d(t, leaky_relu(t, h, slope), blk.conv1_w, blk.conv1_b, 1, 1);
    h = detail::spade_norm(t, h, lay_b, blk.norm2,
                           sb ? &sb->n2_mean : nullptr,
                           sb ? &sb->n2_var : nullptr, training, slope);
    h = conv2d(t, leaky_relu(t, h, slope), blk.conv2_w, blk.conv2_b, 1, 1);
    x = add(t, x, h);
  }
  Var img = tanh_op(t, conv2d(t, x, p.out_w, p.out_b, 1, 0));
  if (single) {
    const Tensor<S>& vi = t.val(img);
    return reshape(t, img, {vi.dim(1), vi.dim(2), vi.dim(3)});
  }
  return img;
}

}  // namespace migs
