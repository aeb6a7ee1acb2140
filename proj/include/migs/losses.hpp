#pragma once

#include <utility>
#include <vector>

#include "migs/autograd.hpp"
#include "migs/errors.hpp"
#include "migs/features.hpp"
#include "migs/tensor.hpp"

namespace migs {

inline constexpr double kGanLogFloor = 1e-7;

struct LossWeights {
  double box = 10.0;
  double gan_global = 0.01;
  double gan_obj = 0.01;
  double aux = 0.1;
  double perceptual = 1.0;
  double image_l1 = 1.0;

  void validate() const {
    const double v[] = {box, gan_global, gan_obj, aux, perceptual, image_l1};
    for (double w : v)
      if (!(w >= 0.0)) throw ConfigError("LossWeights: weights must be >= 0");
  }
};

struct LossBreakdown {
  double box = 0.0;
  double gan_global_g = 0.0;
  double gan_global_d = 0.0;
  double gan_obj_g = 0.0;
  double gan_obj_d = 0.0;
  double aux = 0.0;    // classification term on the generator side
  double aux_d = 0.0;  // classification term on the discriminator side
  double perceptual = 0.0;
  double image_l1 = 0.0;
  double total_g = 0.0;
  double total_d = 0.0;
};

// Fills the totals in place and returns (total_g, total_d).
inline std::pair<double, double> total_task_loss(LossBreakdown& b,
                                                 const LossWeights& w) {
  w.validate();
  b.total_g = w.box * b.box + w.gan_global * b.gan_global_g +
              w.gan_obj * b.gan_obj_g + w.aux * b.aux +
              w.perceptual * b.perceptual + w.image_l1 * b.image_l1;
  b.total_d = w.gan_global * b.gan_global_d + w.gan_obj * b.gan_obj_d +
              w.aux * b.aux_d;
  return {b.total_g, b.total_d};
}

namespace detail {

// mean over all cells of log D resp. log(1-D), with the log argument clamped
// at kGanLogFloor.  log(1-sigmoid(x)) is evaluated as log(sigmoid(-x)).
template <typename S>
Var mean_log_sigmoid(Tape<S>& t, Var logits, bool negate_logits) {
  Var x = negate_logits ? mul_scalar(t, logits, S(-1)) : logits;
  return mean_all(t, log_clamped(t, sigmoid(t, x), S(kGanLogFloor)));
}

template <typename S>
Var average_terms(Tape<S>& t, const std::vector<Var>& terms) {
  std::vector<std::pair<S, Var>> w;
  w.reserve(terms.size());
  const S c = S(1) / S(terms.size());
  for (Var v : terms) w.emplace_back(c, v);
  return wsum(t, w);
}

}  // namespace detail

// Discriminator objective: maximize E log D(real) + E log(1-D(fake)), so the
// minimized loss is that expression negated.  Each entry is one logit map
// (e.g. one scale); maps contribute equally via their per-map means.
template <typename S>
Var gan_loss_d(Tape<S>& t, const std::vector<Var>& real_logits,
               const std::vector<Var>& fake_logits) {
  if (real_logits.empty() || fake_logits.empty())
    throw ContractError("gan_loss_d: empty logit list");
  std::vector<Var> real_terms, fake_terms;
  for (Var r : real_logits)
    real_terms.push_back(detail::mean_log_sigmoid(t, r, false));
  for (Var f : fake_logits)
    fake_terms.push_back(detail::mean_log_sigmoid(t, f, true));
  Var gan = add(t, detail::average_terms(t, real_terms),
                detail::average_terms(t, fake_terms));
  return mul_scalar(t, gan, S(-1));
}

template <typename S>
Var gan_loss_d(Tape<S>& t, Var real_logits, Var fake_logits) {
  return gan_loss_d(t, std::vector<Var>{real_logits},
                    std::vector<Var>{fake_logits});
}

// Non-saturating generator loss -E log D(fake); d/dlogit = -sigmoid(-logit).
template <typename S>
Var gan_loss_g(Tape<S>& t, const std::vector<Var>& fake_logits) {
  if (fake_logits.empty()) throw ContractError("gan_loss_g: empty logit list");
  std::vector<Var> terms;
  for (Var f : fake_logits)
    terms.push_back(detail::mean_log_sigmoid(t, f, false));
  return mul_scalar(t, detail::average_terms(t, terms), S(-1));
}

template <typename S>
Var gan_loss_g(Tape<S>& t, Var fake_logits) {
  return gan_loss_g(t, std::vector<Var>{fake_logits});
}

// Mean |pred - gt| over all 4N coordinates; pred is the raw (unrepaired)
// box-head output.
template <typename S>
Var box_loss(Tape<S>& t, Var pred_boxes_raw, Var gt_boxes) {
  const Tensor<S>& p = t.val(pred_boxes_raw);
  const Tensor<S>& g = t.val(gt_boxes);
  if (!p.same_shape(g) || p.ndim() != 2 || p.dim(1) != 4)
    throw ContractError("box_loss: box lists must both be [N,4]");
  return mean_all(t, abs_op(t, sub(t, pred_boxes_raw, gt_boxes)));
}

template <typename S>
Var image_l1(Tape<S>& t, Var pred, Var gt) {
  if (!t.val(pred).same_shape(t.val(gt)))
    throw ContractError("image_l1: shape mismatch");
  return mean_all(t, abs_op(t, sub(t, pred, gt)));
}

// Sum over pyramid levels of the mean absolute feature difference.
template <typename S>
Var perceptual_loss(Tape<S>& t, const FeatureExtractor<S>& extractor, Var pred,
                    Var gt) {
  if (!t.val(pred).same_shape(t.val(gt)))
    throw ContractError("perceptual_loss: shape mismatch");
  const FeaturePyramid fp = features_forward(t, extractor, pred);
  const FeaturePyramid fg = features_forward(t, extractor, gt);
  std::vector<std::pair<S, Var>> terms;
  for (std::size_t l = 0; l < fp.levels.size(); ++l)
    terms.emplace_back(
        S(1), mean_all(t, abs_op(t, sub(t, fp.levels[l], fg.levels[l]))));
  return wsum(t, terms);
}

template <typename S>
Var aux_obj_loss(Tape<S>& t, Var class_logits, const std::vector<int>& labels) {
  const Tensor<S>& lg = t.val(class_logits);
  if (lg.ndim() != 2 || lg.dim(0) != static_cast<int>(labels.size()))
    throw ContractError("aux_obj_loss: logits must be [N,V] with N labels");
  for (int y : labels)
    if (y < 0 || y >= lg.dim(1))
      throw ContractError("aux_obj_loss: label out of range");
  return softmax_cross_entropy(t, class_logits, labels);
}

// Tape-level Eq. 1 combinations used by training; pass kNoVar to drop a term.
template <typename S>
Var weighted_total_g(Tape<S>& t, const LossWeights& w, Var box, Var gan_global,
                     Var gan_obj, Var aux, Var perceptual, Var image_l1_term) {
  w.validate();
  std::vector<std::pair<S, Var>> terms;
  auto put = [&terms](double lambda, Var v) {
    if (v != kNoVar) terms.emplace_back(S(lambda), v);
  };
  put(w.box, box);
  put(w.gan_global, gan_global);
  put(w.gan_obj, gan_obj);
  put(w.aux, aux);
  put(w.perceptual, perceptual);
  put(w.image_l1, image_l1_term);
  if (terms.empty()) throw ContractError("weighted_total_g: no terms");
  return wsum(t, terms);
}

template <typename S>
Var weighted_total_d(Tape<S>& t, const LossWeights& w, Var gan_global,
                     Var gan_obj, Var aux_d) {
  w.validate();
  std::vector<std::pair<S, Var>> terms;
  auto put = [&terms](double lambda, Var v) {
    if (v != kNoVar) terms.emplace_back(S(lambda), v);
  };
  put(w.gan_global, gan_global);
  put(w.gan_obj, gan_obj);
  put(w.aux, aux_d);
  if (terms.empty()) throw ContractError("weighted_total_d: no terms");
  return wsum(t, terms);
}

}  // namespace migs
