#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "migs/autograd.hpp"
#include "migs/errors.hpp"
#include "migs/generators.hpp"
#include "migs/nn_ops.hpp"
#include "migs/rng.hpp"
#include "migs/scenegraph.hpp"
#include "migs/tensor.hpp"

namespace migs {

// Patch-style discriminators without normalization layers; both emit raw
// logits (maps for the global one, per-object rows for the object one).

struct DGlobalConfig {
  std::vector<int> channels = {64, 128};  // stride-2 conv widths per scale
  double leaky_slope = 0.2;

  static DGlobalConfig desk() {
    DGlobalConfig c;
    c.channels = {16, 32};
    return c;
  }

  void validate() const {
    if (channels.empty())
      throw ConfigError("DGlobalConfig: need at least one conv layer");
    for (int c : channels)
      if (c <= 0) throw ConfigError("DGlobalConfig: channels must be positive");
  }
};

struct DObjConfig {
  int crop_size = 32;
  std::vector<int> channels = {64, 128};
  int num_classes = 9;
  double leaky_slope = 0.2;

  static DObjConfig desk() {
    DObjConfig c;
    c.channels = {16, 32};
    c.crop_size = 16;
    return c;
  }

  void validate() const {
    if (crop_size <= 0 || (crop_size & (crop_size - 1)) != 0)
      throw ConfigError("DObjConfig: crop_size must be a power of two");
    if (channels.empty())
      throw ConfigError("DObjConfig: need at least one conv layer");
    for (int c : channels)
      if (c <= 0) throw ConfigError("DObjConfig: channels must be positive");
    if (num_classes <= 0)
      throw ConfigError("DObjConfig: class head needs a vocabulary");
  }
};

template <typename T>
struct DGlobalParamsT {
  struct Scale {
    std::vector<T> conv_w, conv_b;
    T out_w{}, out_b{};
  };
  Scale full, half;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    auto scale = [&f](const char* tag, auto& s) {
      for (std::size_t i = 0; i < s.conv_w.size(); ++i) {
        f(std::string(tag) + ".conv" + std::to_string(i) + "_w", s.conv_w[i]);
        f(std::string(tag) + ".conv" + std::to_string(i) + "_b", s.conv_b[i]);
      }
      f(std::string(tag) + ".out_w", s.out_w);
      f(std::string(tag) + ".out_b", s.out_b);
    };
    scale("full", self.full);
    scale("half", self.half);
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

template <typename T>
struct DObjParamsT {
  std::vector<T> conv_w, conv_b;
  T rf_w{}, rf_b{};    // real/fake logit head
  T cls_w{}, cls_b{};  // category logits head

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t i = 0; i < self.conv_w.size(); ++i) {
      f("conv" + std::to_string(i) + "_w", self.conv_w[i]);
      f("conv" + std::to_string(i) + "_b", self.conv_b[i]);
    }
    f("rf_w", self.rf_w);
    f("rf_b", self.rf_b);
    f("cls_w", self.cls_w);
    f("cls_b", self.cls_b);
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
void init_scale(typename DGlobalParamsT<Tensor<S>>::Scale& s,
                const std::vector<int>& channels, RngStream& rng) {
  int in_ch = 3;
  s.conv_w.resize(channels.size());
  s.conv_b.resize(channels.size());
  for (std::size_t i = 0; i < channels.size(); ++i) {
    init_conv(s.conv_w[i], s.conv_b[i], channels[i], in_ch, 3, rng);
    in_ch = channels[i];
  }
  init_conv(s.out_w, s.out_b, 1, in_ch, 1, rng);
}

}  // namespace detail

template <typename S>
DGlobalParamsT<Tensor<S>> init_dglobal_params(const DGlobalConfig& cfg,
                                              RngStream& rng) {
  cfg.validate();
  DGlobalParamsT<Tensor<S>> p;
  detail::init_scale<S>(p.full, cfg.channels, rng);
  detail::init_scale<S>(p.half, cfg.channels, rng);
  return p;
}

template <typename S>
DObjParamsT<Tensor<S>> init_dobj_params(const DObjConfig& cfg,
                                        RngStream& rng) {
  cfg.validate();
  DObjParamsT<Tensor<S>> p;
  int in_ch = 3;
  p.conv_w.resize(cfg.channels.size());
  p.conv_b.resize(cfg.channels.size());
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    detail::init_conv(p.conv_w[i], p.conv_b[i], cfg.channels[i], in_ch, 3, rng);
    in_ch = cfg.channels[i];
  }
  Tensor<S> rf_w({in_ch, 1});
  detail::fill_normal(rf_w, rng, std::sqrt(2.0 / in_ch));
  p.rf_w = rf_w;
  p.rf_b = Tensor<S>({1}, S(0));
  Tensor<S> cls_w({in_ch, cfg.num_classes});
  detail::fill_normal(cls_w, rng, std::sqrt(2.0 / in_ch));
  p.cls_w = cls_w;
  p.cls_b = Tensor<S>({cfg.num_classes}, S(0));
  return p;
}

template <typename S>
DGlobalParamsT<Var> lift_dglobal(Tape<S>& t, const DGlobalParamsT<Tensor<S>>& p,
                                 bool needs_grad) {
  DGlobalParamsT<Var> out;
  out.full.conv_w.resize(p.full.conv_w.size());
  out.full.conv_b.resize(p.full.conv_b.size());
  out.half.conv_w.resize(p.half.conv_w.size());
  out.half.conv_b.resize(p.half.conv_b.size());
  std::vector<Var*> dst;
  out.for_each([&dst](const std::string&, Var& v) { dst.push_back(&v); });
  std::size_t i = 0;
  p.for_each([&](const std::string&, const Tensor<S>& w) {
    *dst[i++] = t.leaf(w, needs_grad);
  });
  return out;
}

template <typename S>
DObjParamsT<Var> lift_dobj(Tape<S>& t, const DObjParamsT<Tensor<S>>& p,
                           bool needs_grad) {
  DObjParamsT<Var> out;
  out.conv_w.resize(p.conv_w.size());
  out.conv_b.resize(p.conv_b.size());
  std::vector<Var*> dst;
  out.for_each([&dst](const std::string&, Var& v) { dst.push_back(&v); });
  std::size_t i = 0;
  p.for_each([&](const std::string&, const Tensor<S>& w) {
    *dst[i++] = t.leaf(w, needs_grad);
  });
  return out;
}

// Bilinear crop-and-resize of each box region to crop_size x crop_size.
// Boxes act as constants here: gradients flow into the image only (the box
// head trains through the layout and the L1 box loss instead).
template <typename S>
Var crop_objects(Tape<S>& t, Var image, const Tensor<S>& boxes,
                 int crop_size) {
  if (boxes.ndim() != 2 || boxes.dim(1) != 4)
    throw ContractError("crop_objects: boxes must be [N,4]");
  for (int i = 0; i < boxes.dim(0); ++i) {
    const S x0 = boxes.at(i, 0), y0 = boxes.at(i, 1);
    const S x1 = boxes.at(i, 2), y1 = boxes.at(i, 3);
    if (!(x0 >= S(0) && y0 >= S(0) && x1 <= S(1) && y1 <= S(1) && x0 < x1 &&
          y0 < y1))
      throw ContractError("crop_objects: invalid box");
  }
  return crop_resize(t, image, boxes, crop_size);
}

template <typename S>
Var crop_objects(Tape<S>& t, Var image, const std::vector<BoundingBox>& boxes,
                 int crop_size) {
  Tensor<S> b({static_cast<int>(boxes.size()), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    b.at(static_cast<int>(i), 0) = static_cast<S>(boxes[i].x0);
    b.at(static_cast<int>(i), 1) = static_cast<S>(boxes[i].y0);
    b.at(static_cast<int>(i), 2) = static_cast<S>(boxes[i].x1);
    b.at(static_cast<int>(i), 3) = static_cast<S>(boxes[i].y1);
  }
  return crop_objects(t, image, b, crop_size);
}

namespace detail {

template <typename S>
Var score_stack(Tape<S>& t, Var x,
                const typename DGlobalParamsT<Var>::Scale& s, S slope) {
  Var h = x;
  for (std::size_t i = 0; i < s.conv_w.size(); ++i)
    h = leaky_relu(t, conv2d(t, h, s.conv_w[i], s.conv_b[i], 2, 1), slope);
  return conv2d(t, h, s.out_w, s.out_b, 1, 0);
}

}  // namespace detail

// Scale 1 scores the image; scale 2 scores the 2x area-downsampled copy.
// Accepts [3,H,W] or [N,3,H,W]; returns one logit map per scale.
template <typename S>
std::vector<Var> d_global_forward(Tape<S>& t, Var image,
                                  const DGlobalParamsT<Var>& p,
                                  const DGlobalConfig& cfg) {
  cfg.validate();
  const bool single = t.val(image).ndim() == 3;
  Var x = single
              ? reshape(t, image, detail::batched_shape(t.val(image).shape()))
              : image;
  if (t.val(x).ndim() != 4 || t.val(x).dim(1) != 3)
    throw ContractError("d_global_forward: image must be [N,3,H,W]");
  const S slope = S(cfg.leaky_slope);
  Var full = detail::score_stack(t, x, p.full, slope);
  Var half = detail::score_stack(t, avg_pool(t, x, 2), p.half, slope);
  return {full, half};
}

// Shared conv trunk + spatial mean, then the real/fake and category heads.
template <typename S>
std::pair<Var, Var> d_obj_forward(Tape<S>& t, Var crops,
                                  const DObjParamsT<Var>& p,
                                  const DObjConfig& cfg) {
  cfg.validate();
  if (t.val(crops).ndim() != 4 || t.val(crops).dim(1) != 3)
    throw ContractError("d_obj_forward: crops must be [N,3,c,c]");
  const int n = t.val(crops).dim(0);
  const S slope = S(cfg.leaky_slope);
  Var h = crops;
  for (std::size_t i = 0; i < p.conv_w.size(); ++i)
    h = leaky_relu(t, conv2d(t, h, p.conv_w[i], p.conv_b[i], 2, 1), slope);
  Var feat = mean_hw(t, h);  // [N, C]
  Var rf = linear(t, feat, p.rf_w, p.rf_b);
  Var cls = linear(t, feat, p.cls_w, p.cls_b);
  return {reshape(t, rf, {n}), cls};
}

}  // namespace migs
