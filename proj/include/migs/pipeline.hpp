#pragma once

#include <cstdint>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "migs/discriminators.hpp"
#include "migs/features.hpp"
#include "migs/generators.hpp"
#include "migs/graphnet.hpp"
#include "migs/losses.hpp"
#include "migs/model_state.hpp"
#include "migs/optim.hpp"
#include "migs/rng.hpp"
#include "migs/scenegraph.hpp"

namespace migs {

struct PipelineOptions {
  bool use_gt_boxes = false;  // teacher-force the layout with GT boxes
  bool aux_on_g = true;       // classification loss on fake crops for G
  bool aux_on_d = true;       // classification loss on real+fake crops for D
};

// Per-scene constants, prepared once: the image moved to [-1,1] CHW and the
// annotation tensors the losses need.
template <typename S>
struct SceneTensors {
  SceneGraph graph;
  Tensor<S> image;     // [3,H,W] in [-1,1]
  Tensor<S> gt_boxes;  // [N,4] as (x0,y0,x1,y1)
  std::vector<int> labels;
};

template <typename S>
SceneTensors<S> prepare_scene(const AnnotatedScene& a, int height, int width) {
  if (a.graph.objects.empty())
    throw ContractError("prepare_scene: scene has no objects");
  if (a.boxes.size() != a.graph.objects.size())
    throw ContractError("prepare_scene: boxes and objects misaligned");
  if (a.image.ndim() != 3 || a.image.dim(0) != height ||
      a.image.dim(1) != width || a.image.dim(2) != 3)
    throw ContractError("prepare_scene: image is not [H,W,3] at the "
                        "configured resolution");
  SceneTensors<S> s;
  s.graph = a.graph;
  s.image = Tensor<S>({3, height, width});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        s.image.at(c, y, x) =
            static_cast<S>(a.image.at(y, x, c)) * S(2) - S(1);
  const int n = static_cast<int>(a.boxes.size());
  s.gt_boxes = Tensor<S>({n, 4});
  for (int i = 0; i < n; ++i) {
    if (!a.boxes[static_cast<std::size_t>(i)].valid())
      throw ContractError("prepare_scene: invalid ground-truth box");
    s.gt_boxes.at(i, 0) = static_cast<S>(a.boxes[i].x0);
    s.gt_boxes.at(i, 1) = static_cast<S>(a.boxes[i].y0);
    s.gt_boxes.at(i, 2) = static_cast<S>(a.boxes[i].x1);
    s.gt_boxes.at(i, 3) = static_cast<S>(a.boxes[i].y1);
  }
  s.labels = a.graph.objects;
  return s;
}

// Tape handles for one model; lift flags choose which side receives grads.
struct LiftedModel {
  GcnParamsT<Var> gcn;
  CrnParamsT<Var> crn;
  SpadeParamsT<Var> spade;
  DGlobalParamsT<Var> dglobal;
  DObjParamsT<Var> dobj;
};

template <typename S>
LiftedModel lift_model(Tape<S>& t, const ModelParams<S>& m,
                       const ModelConfig& cfg, bool grad_gen, bool grad_dg,
                       bool grad_do) {
  LiftedModel lm;
  lm.gcn = lift_gcn(t, m.gcn, grad_gen);
  if (cfg.decoder == DecoderKind::crn)
    lm.crn = lift_crn(t, m.crn, grad_gen);
  else
    lm.spade = lift_spade(t, m.spade, grad_gen);
  lm.dglobal = lift_dglobal(t, m.dglobal, grad_dg);
  lm.dobj = lift_dobj(t, m.dobj, grad_do);
  return lm;
}

namespace detail {

// Row i of a batched tensor, kept on the tape: [B, ...] -> [...].
template <typename S>
Var select0(Tape<S>& t, Var x, int i) {
  const std::vector<int> shape = t.val(x).shape();
  int rest = 1;
  for (std::size_t d = 1; d < shape.size(); ++d) rest *= shape[d];
  Var flat = reshape(t, x, {shape[0], rest});
  Var row = gather_rows(t, flat, {i});
  return reshape(t, row, std::vector<int>(shape.begin() + 1, shape.end()));
}

template <typename S>
Tensor<S> image_row(const Tensor<S>& batch, int i) {
  Tensor<S> out({batch.dim(1), batch.dim(2), batch.dim(3)});
  const std::int64_t n = out.numel();
  const S* src = batch.data() + n * i;
  for (std::int64_t j = 0; j < n; ++j) out[j] = src[j];
  return out;
}

template <typename S>
Tensor<S> stack_scene_images(const std::vector<const SceneTensors<S>*>& batch) {
  const Tensor<S>& first = batch.front()->image;
  Tensor<S> out({static_cast<int>(batch.size()), first.dim(0), first.dim(1),
                 first.dim(2)});
  std::int64_t off = 0;
  for (const SceneTensors<S>* s : batch) {
    if (!s->image.same_shape(first))
      throw ContractError("batch mixes image resolutions");
    for (std::int64_t j = 0; j < s->image.numel(); ++j)
      out[off + j] = s->image[j];
    off += s->image.numel();
  }
  return out;
}

}  // namespace detail

struct GeneratorForward {
  Var images = kNoVar;            // [B,3,H,W] in [-1,1]
  std::vector<Var> boxes_raw;     // per-scene [N,4] logistic outputs
  std::vector<Var> layout_boxes;  // repaired (or GT) boxes fed to the layout
};

// Scene graphs through GCN, boxes/masks, layout and decoder. `stats` owns
// the decoder's running statistics: pass the model to read them (and, in
// training, update them), or nullptr in training to use pure batch
// statistics without touching the stored state.
template <typename S>
GeneratorForward generator_forward(Tape<S>& t,
                                   const std::vector<const SceneTensors<S>*>& batch,
                                   const LiftedModel& lm,
                                   std::type_identity_t<ModelParams<S>>* stats,
                                   const ModelConfig& cfg,
                                   const PipelineOptions& opt, bool training,
                                   RngStream* noise_rng) {
  if (batch.empty()) throw ContractError("generator_forward: empty batch");
  if (!training && stats == nullptr)
    throw ContractError("generator_forward: evaluation needs running stats");
  const int H = cfg.image_size, W = cfg.image_size;
  GeneratorForward out;
  std::vector<Var> layouts;
  layouts.reserve(batch.size());
  for (const SceneTensors<S>* s : batch) {
    GraphFeatures f = gcn_forward(t, s->graph, lm.gcn, cfg.gcn);
    Var raw = predict_boxes(t, f.nodes, lm.gcn);
    Var lay_boxes;
    if (opt.use_gt_boxes) {
      if (s->gt_boxes.ndim() != 2)
        throw ContractError("generator_forward: teacher forcing without "
                            "ground-truth boxes");
      lay_boxes = t.constant(s->gt_boxes);
    } else {
      lay_boxes = repair_boxes(t, raw);
    }
    Var masks = sigmoid(t, predict_masks(t, f.nodes, lm.gcn, cfg.gcn));
    layouts.push_back(compose_layout(t, f.nodes, lay_boxes, masks, H, W));
    out.boxes_raw.push_back(raw);
    out.layout_boxes.push_back(lay_boxes);
  }
  Var layout_batch = stack0(t, layouts);
  if (cfg.decoder == DecoderKind::crn) {
    out.images = crn_forward(t, layout_batch, lm.crn,
                             stats ? &stats->crn_state : nullptr, cfg.crn,
                             training);
  } else {
    if (noise_rng == nullptr)
      throw ContractError("generator_forward: SPADE decoder needs a noise "
                          "stream");
    Tensor<S> z({static_cast<int>(batch.size()), cfg.spade.noise_dim});
    for (std::int64_t i = 0; i < z.numel(); ++i)
      z[i] = static_cast<S>(noise_rng->normal());
    out.images = spade_forward(t, layout_batch, lm.spade,
                               stats ? &stats->spade_state : nullptr,
                               cfg.spade, training, t.constant(z));
  }
  return out;
}

namespace detail {

template <typename S, typename Pack>
void collect_ptrs(Pack& pack, std::vector<Tensor<S>*>& out) {
  pack.for_each(
      [&out](const std::string&, Tensor<S>& w) { out.push_back(&w); });
}

inline void collect_vars(auto& pack, std::vector<Var>& out) {
  pack.for_each([&out](const std::string&, Var& v) { out.push_back(v); });
}

}  // namespace detail

// Generator-side trainables: GCN plus the active decoder (running stats are
// not gradient-updated and stay out of these groups).
template <typename S>
std::vector<Tensor<S>*> generator_group(ModelParams<S>& m,
                                        const ModelConfig& cfg) {
  std::vector<Tensor<S>*> out;
  detail::collect_ptrs(m.gcn, out);
  if (cfg.decoder == DecoderKind::crn)
    detail::collect_ptrs(m.crn, out);
  else
    detail::collect_ptrs(m.spade, out);
  return out;
}

inline std::vector<Var> generator_vars(LiftedModel& lm,
                                       const ModelConfig& cfg) {
  std::vector<Var> out;
  detail::collect_vars(lm.gcn, out);
  if (cfg.decoder == DecoderKind::crn)
    detail::collect_vars(lm.crn, out);
  else
    detail::collect_vars(lm.spade, out);
  return out;
}

template <typename S>
std::vector<Tensor<S>*> dglobal_group(ModelParams<S>& m) {
  std::vector<Tensor<S>*> out;
  detail::collect_ptrs(m.dglobal, out);
  return out;
}

template <typename S>
std::vector<Tensor<S>*> dobj_group(ModelParams<S>& m) {
  std::vector<Tensor<S>*> out;
  detail::collect_ptrs(m.dobj, out);
  return out;
}

// One adversarial iteration on a fixed batch: a generator step, then one
// step for each discriminator on freshly generated fakes. Mutates the model
// through the optimizers; returns the losses observed along the way.
template <typename S>
LossBreakdown train_inner_iteration(ModelParams<S>& model,
                                    const ModelConfig& cfg,
                                    const LossWeights& w,
                                    const PipelineOptions& opt,
                                    const FeatureExtractor<S>& fx,
                                    const std::vector<const SceneTensors<S>*>& batch,
                                    InnerOptimizer<S>& gen_opt,
                                    InnerOptimizer<S>& dg_opt,
                                    InnerOptimizer<S>& do_opt,
                                    RngStream& rng) {
  if (batch.empty()) throw ContractError("train_inner_iteration: empty batch");
  const Tensor<S> gt_batch = detail::stack_scene_images(batch);
  std::vector<int> all_labels;
  for (const SceneTensors<S>* s : batch)
    all_labels.insert(all_labels.end(), s->labels.begin(), s->labels.end());

  LossBreakdown bd;

  {  // generator step
    Tape<S> t;
    LiftedModel lm = lift_model(t, model, cfg, true, false, false);
    GeneratorForward gf =
        generator_forward(t, batch, lm, &model, cfg, opt, true, &rng);
    Var gt = t.constant(gt_batch);

    std::vector<Var> gt_box_vars, fake_crop_parts;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      gt_box_vars.push_back(t.constant(batch[i]->gt_boxes));
      Var img_i = detail::select0(t, gf.images, static_cast<int>(i));
      fake_crop_parts.push_back(crop_objects(
          t, img_i, t.val(gf.layout_boxes[i]), cfg.dobj.crop_size));
    }
    Var box = box_loss(t, concat0(t, gf.boxes_raw), concat0(t, gt_box_vars));
    Var gg = gan_loss_g(t, d_global_forward(t, gf.images, lm.dglobal,
                                            cfg.dglobal));
    Var fake_crops = concat0(t, fake_crop_parts);
    auto [rf_f, cls_f] = d_obj_forward(t, fake_crops, lm.dobj, cfg.dobj);
    Var go = gan_loss_g(t, rf_f);
    Var aux = opt.aux_on_g ? aux_obj_loss(t, cls_f, all_labels) : kNoVar;
    Var perc = perceptual_loss(t, fx, gf.images, gt);
    Var l1 = image_l1(t, gf.images, gt);
    Var total = weighted_total_g(t, w, box, gg, go, aux, perc, l1);

    bd.box = static_cast<double>(t.val(box)[0]);
    bd.gan_global_g = static_cast<double>(t.val(gg)[0]);
    bd.gan_obj_g = static_cast<double>(t.val(go)[0]);
    bd.aux = opt.aux_on_g ? static_cast<double>(t.val(aux)[0]) : 0.0;
    bd.perceptual = static_cast<double>(t.val(perc)[0]);
    bd.image_l1 = static_cast<double>(t.val(l1)[0]);
    bd.total_g = static_cast<double>(t.val(total)[0]);

    t.backward(total);
    gen_opt.step(t, generator_group(model, cfg), generator_vars(lm, cfg));
  }

  // Fakes for the discriminators come from the just-updated generator; batch
  // statistics are used without disturbing the stored running stats.
  Tensor<S> fake_batch;
  std::vector<Tensor<S>> fake_boxes;
  {
    Tape<S> t;
    LiftedModel lm = lift_model(t, model, cfg, false, false, false);
    GeneratorForward gf =
        generator_forward(t, batch, lm, nullptr, cfg, opt, true, &rng);
    fake_batch = t.val(gf.images);
    for (std::size_t i = 0; i < batch.size(); ++i)
      fake_boxes.push_back(t.val(gf.layout_boxes[i]));
  }

  {  // global discriminator step
    Tape<S> t;
    LiftedModel lm = lift_model(t, model, cfg, false, true, false);
    auto real = d_global_forward(t, t.constant(gt_batch), lm.dglobal,
                                 cfg.dglobal);
    auto fake = d_global_forward(t, t.constant(fake_batch), lm.dglobal,
                                 cfg.dglobal);
    Var loss = gan_loss_d(t, real, fake);
    Var total = weighted_total_d(t, w, loss, kNoVar, kNoVar);
    bd.gan_global_d = static_cast<double>(t.val(loss)[0]);
    bd.total_d = static_cast<double>(t.val(total)[0]);
    t.backward(total);
    std::vector<Var> vars;
    detail::collect_vars(lm.dglobal, vars);
    dg_opt.step(t, dglobal_group(model), vars);
  }

  {  // object discriminator step
    Tape<S> t;
    LiftedModel lm = lift_model(t, model, cfg, false, false, true);
    std::vector<Var> real_parts, fake_parts;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      real_parts.push_back(crop_objects(t, t.constant(batch[i]->image),
                                        batch[i]->gt_boxes,
                                        cfg.dobj.crop_size));
      fake_parts.push_back(
          crop_objects(t, t.constant(detail::image_row(fake_batch,
                                                       static_cast<int>(i))),
                       fake_boxes[i], cfg.dobj.crop_size));
    }
    auto [rf_r, cls_r] =
        d_obj_forward(t, concat0(t, real_parts), lm.dobj, cfg.dobj);
    auto [rf_f, cls_f] =
        d_obj_forward(t, concat0(t, fake_parts), lm.dobj, cfg.dobj);
    Var loss = gan_loss_d(t, rf_r, rf_f);
    Var aux_d = kNoVar;
    if (opt.aux_on_d) {
      Var ar = aux_obj_loss(t, cls_r, all_labels);
      Var af = aux_obj_loss(t, cls_f, all_labels);
      aux_d = wsum(t, {{S(0.5), ar}, {S(0.5), af}});
    }
    Var total = weighted_total_d(t, w, kNoVar, loss, aux_d);
    bd.gan_obj_d = static_cast<double>(t.val(loss)[0]);
    bd.aux_d = opt.aux_on_d ? static_cast<double>(t.val(aux_d)[0]) : 0.0;
    bd.total_d += static_cast<double>(t.val(total)[0]);
    t.backward(total);
    std::vector<Var> vars;
    detail::collect_vars(lm.dobj, vars);
    do_opt.step(t, dobj_group(model), vars);
  }

  return bd;
}

// Evaluation-mode image synthesis from one scene graph. Returns [H,W,3] in
// [0,1]; deterministic in (graph, seed).
template <typename S>
Tensor<S> generate(ModelParams<S>& model, const ModelConfig& cfg,
                   const SceneGraph& graph, int height, int width,
                   std::uint64_t seed) {
  if (height != cfg.image_size || width != cfg.image_size)
    throw ConfigError("generate: model is built for " +
                      std::to_string(cfg.image_size) + "x" +
                      std::to_string(cfg.image_size) + " images");
  SceneTensors<S> s;
  s.graph = graph;
  s.labels = graph.objects;
  Tape<S> t;
  LiftedModel lm = lift_model(t, model, cfg, false, false, false);
  PipelineOptions opt;  // predicted boxes; teacher forcing is train-only
  RngStream noise(derive_seed(seed, "generate"));
  std::vector<const SceneTensors<S>*> batch = {&s};
  GeneratorForward gf =
      generator_forward(t, batch, lm, &model, cfg, opt, false, &noise);
  const Tensor<S>& img = t.val(gf.images);  // [1,3,H,W]
  Tensor<S> out({height, width, 3});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = (img.at(0, c, y, x) + S(1)) * S(0.5);
  return out;
}

}  // namespace migs
