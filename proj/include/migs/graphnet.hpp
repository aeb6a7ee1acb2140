#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "migs/autograd.hpp"
#include "migs/errors.hpp"
#include "migs/nn_ops.hpp"
#include "migs/rng.hpp"
#include "migs/scenegraph.hpp"
#include "migs/tensor.hpp"

namespace migs {

struct GcnConfig {
  int embed_dim = 128;  // D, per-role feature width
  int num_layers = 5;
  int propagation_hidden = 512;
  int update_hidden = 512;
  int box_head_hidden = 128;
  int mask_size = 16;  // M

  void validate() const {
    const int v[] = {embed_dim,     num_layers,      propagation_hidden,
                     update_hidden, box_head_hidden, mask_size};
    for (int x : v)
      if (x <= 0) throw ConfigError("GcnConfig: all sizes must be positive");
    if ((mask_size & (mask_size - 1)) != 0)
      throw ConfigError("GcnConfig: mask_size must be a power of two");
  }
};

// One parameter pack usable both as storage (T = Tensor<S>) and as tape
// handles (T = Var).  for_each visits members in a fixed order with stable
// names, which the checkpoint registry and the lift helpers rely on.
template <typename T>
struct GcnParamsT {
  struct Layer {
    T prop_w1{}, prop_b1{}, prop_w2{}, prop_b2{};
    T upd_w1{}, upd_b1{}, upd_w2{}, upd_b2{};
  };

  T obj_embed{}, pred_embed{};
  std::vector<Layer> layers;
  T box_w1{}, box_b1{}, box_w2{}, box_b2{};
  T mask_w{}, mask_b{};

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("obj_embed", self.obj_embed);
    f("pred_embed", self.pred_embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& lay = self.layers[l];
      f(p + "prop_w1", lay.prop_w1);
      f(p + "prop_b1", lay.prop_b1);
      f(p + "prop_w2", lay.prop_w2);
      f(p + "prop_b2", lay.prop_b2);
      f(p + "upd_w1", lay.upd_w1);
      f(p + "upd_b1", lay.upd_b1);
      f(p + "upd_w2", lay.upd_w2);
      f(p + "upd_b2", lay.upd_b2);
    }
    f("box_w1", self.box_w1);
    f("box_b1", self.box_b1);
    f("box_w2", self.box_w2);
    f("box_b2", self.box_b2);
    f("mask_w", self.mask_w);
    f("mask_b", self.mask_b);
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
void fill_normal(Tensor<S>& t, RngStream& rng, double stddev) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<S>(rng.normal() * stddev);
}

template <typename S>
void init_linear(Tensor<S>& w, Tensor<S>& b, int fan_in, int fan_out,
                 RngStream& rng) {
  w = Tensor<S>({fan_in, fan_out});
  fill_normal(w, rng, std::sqrt(2.0 / fan_in));
  b = Tensor<S>({fan_out}, S(0));
}

}  // namespace detail

template <typename S>
GcnParamsT<Tensor<S>> init_gcn_params(const GcnConfig& cfg, int num_objects,
                                      int num_predicates, RngStream& rng) {
  cfg.validate();
  if (num_objects <= 0 || num_predicates <= 0)
    throw ConfigError("init_gcn_params: vocabulary must be non-empty");
  const int d = cfg.embed_dim;
  GcnParamsT<Tensor<S>> p;
  p.obj_embed = Tensor<S>({num_objects, d});
  detail::fill_normal(p.obj_embed, rng, 1.0 / std::sqrt(double(d)));
  p.pred_embed = Tensor<S>({num_predicates, d});
  detail::fill_normal(p.pred_embed, rng, 1.0 / std::sqrt(double(d)));
  p.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (auto& lay : p.layers) {
    detail::init_linear(lay.prop_w1, lay.prop_b1, 3 * d, cfg.propagation_hidden, rng);
    detail::init_linear(lay.prop_w2, lay.prop_b2, cfg.propagation_hidden, 3 * d, rng);
    detail::init_linear(lay.upd_w1, lay.upd_b1, d, cfg.update_hidden, rng);
    detail::init_linear(lay.upd_w2, lay.upd_b2, cfg.update_hidden, d, rng);
  }
  detail::init_linear(p.box_w1, p.box_b1, d, cfg.box_head_hidden, rng);
  detail::init_linear(p.box_w2, p.box_b2, cfg.box_head_hidden, 4, rng);
  detail::init_linear(p.mask_w, p.mask_b, d, cfg.mask_size * cfg.mask_size, rng);
  return p;
}

template <typename S>
GcnParamsT<Var> lift_gcn(Tape<S>& t, const GcnParamsT<Tensor<S>>& p,
                         bool needs_grad) {
  GcnParamsT<Var> out;
  out.layers.resize(p.layers.size());
  std::vector<Var*> dst;
  out.for_each([&dst](const std::string&, Var& v) { dst.push_back(&v); });
  std::size_t i = 0;
  p.for_each([&](const std::string&, const Tensor<S>& w) {
    *dst[i++] = t.leaf(w, needs_grad);
  });
  return out;
}

struct GraphFeatures {
  Var nodes = kNoVar;  // [N, D]
  Var edges = kNoVar;  // [E, D]; zero-row tensor when the graph has no edges
};

// Embedding-table lookup for object categories and edge predicates.
template <typename S>
GraphFeatures embed(Tape<S>& t, const SceneGraph& graph,
                    const GcnParamsT<Var>& p) {
  const Tensor<S>& ot = t.val(p.obj_embed);
  const Tensor<S>& pt = t.val(p.pred_embed);
  if (graph.objects.empty()) throw ContractError("embed: graph has no objects");
  for (int c : graph.objects)
    if (c < 0 || c >= ot.dim(0))
      throw ConfigError("embed: object category outside embedding table");
  std::vector<int> preds;
  preds.reserve(graph.edges.size());
  for (const EdgeTriplet& e : graph.edges) {
    if (e.predicate < 0 || e.predicate >= pt.dim(0))
      throw ConfigError("embed: predicate outside embedding table");
    const int n = static_cast<int>(graph.objects.size());
    if (e.subject < 0 || e.subject >= n || e.object < 0 || e.object >= n)
      throw ConfigError("embed: edge endpoint outside node list");
    preds.push_back(e.predicate);
  }
  GraphFeatures f;
  f.nodes = gather_rows(t, p.obj_embed, graph.objects);
  f.edges = gather_rows(t, p.pred_embed, preds);
  return f;
}

// num_layers rounds of propagate (two-layer MLP on [subj ∥ pred ∥ obj]) /
// aggregate (mean of the candidate vectors each node participates in) /
// update (two-layer MLP).  Nodes touched by no edge keep their feature.
template <typename S>
GraphFeatures gcn_forward(Tape<S>& t, const SceneGraph& graph,
                          const GcnParamsT<Var>& p, const GcnConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(p.layers.size()) != cfg.num_layers)
    throw ConfigError("gcn_forward: layer count mismatch");
  const int d = cfg.embed_dim;
  GraphFeatures f = embed(t, graph, p);
  if (graph.edges.empty()) return f;

  std::vector<int> subj, obj;
  for (const EdgeTriplet& e : graph.edges) {
    subj.push_back(e.subject);
    obj.push_back(e.object);
  }
  const S slope = S(0.2);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& lay = p.layers[static_cast<std::size_t>(l)];
    Var subj_f = gather_rows(t, f.nodes, subj);
    Var obj_f = gather_rows(t, f.nodes, obj);
    Var triplet = concat_cols(t, {subj_f, f.edges, obj_f});
    Var h = leaky_relu(t, linear(t, triplet, lay.prop_w1, lay.prop_b1), slope);
    Var prop = linear(t, h, lay.prop_w2, lay.prop_b2);
    Var cand_subj = slice_cols(t, prop, 0, d);
    Var new_edges = slice_cols(t, prop, d, 2 * d);
    Var cand_obj = slice_cols(t, prop, 2 * d, 3 * d);

    std::vector<char> participates;
    Var pooled = segment_mean_pairs(t, cand_subj, cand_obj, subj, obj, f.nodes,
                                    &participates);
    Var uh = leaky_relu(t, linear(t, pooled, lay.upd_w1, lay.upd_b1), slope);
    Var updated = linear(t, uh, lay.upd_w2, lay.upd_b2);
    Var new_nodes = where_rows(t, participates, updated, f.nodes);

    if (!t.val(new_nodes).all_finite() || !t.val(new_edges).all_finite())
      throw NumericError("gcn_forward: non-finite activations at layer " +
                         std::to_string(l));
    f.nodes = new_nodes;
    f.edges = new_edges;
  }
  return f;
}

// Two-layer MLP head; outputs logistic-squashed (x0,y0,x1,y1) in [0,1]^4.
// These raw boxes feed the L1 box loss directly; repair happens at layout
// composition time only.
template <typename S>
Var predict_boxes(Tape<S>& t, Var node_features, const GcnParamsT<Var>& p) {
  Var h = leaky_relu(t, linear(t, node_features, p.box_w1, p.box_b1), S(0.2));
  return sigmoid(t, linear(t, h, p.box_w2, p.box_b2));
}

// Single linear head to M*M logits per node, reshaped to [N, M, M].
template <typename S>
Var predict_masks(Tape<S>& t, Var node_features, const GcnParamsT<Var>& p,
                  const GcnConfig& cfg) {
  Var logits = linear(t, node_features, p.mask_w, p.mask_b);
  const int n = t.val(logits).dim(0);
  return reshape(t, logits, {n, cfg.mask_size, cfg.mask_size});
}

// Scatter each node's feature into the canvas, weighted by its mask warped
// bilinearly into the (already repaired) box; contributions sum per pixel.
template <typename S>
Var compose_layout(Tape<S>& t, Var node_features, Var boxes_repaired,
                   Var mask_probs, int H, int W) {
  const Tensor<S>& feats = t.val(node_features);
  if (feats.ndim() != 2) throw ContractError("compose_layout: features must be [N,D]");
  if (feats.dim(0) == 0)
    return t.constant(Tensor<S>({feats.dim(1), H, W}, S(0)));
  return paint_masks(t, node_features, boxes_repaired, mask_probs, H, W);
}

inline std::vector<BoundingBox> to_bounding_boxes(const Tensor<float>& boxes) {
  if (boxes.ndim() != 2 || boxes.dim(1) != 4)
    throw ContractError("to_bounding_boxes: need [N,4]");
  std::vector<BoundingBox> out;
  out.reserve(static_cast<std::size_t>(boxes.dim(0)));
  for (int i = 0; i < boxes.dim(0); ++i)
    out.push_back({boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)});
  return out;
}

}  // namespace migs
