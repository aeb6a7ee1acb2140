#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "migs/model_state.hpp"
#include "migs/optim.hpp"
#include "migs/pipeline.hpp"
#include "migs/rng.hpp"

namespace migs {

struct InnerConfig {
  int k = 10;
  double lr = 1e-4;
  int batch_size = 4;
  std::string optimizer = "adam";
  bool reset_moments = true;  // per-task moment reset

  void validate() const {
    if (k < 0) throw ConfigError("InnerConfig: k must be >= 0");
    if (!(lr > 0)) throw ConfigError("InnerConfig: lr must be positive");
    if (batch_size < 1) throw ConfigError("InnerConfig: batch_size >= 1");
    if (optimizer != "adam" && optimizer != "sgd")
      throw ConfigError("InnerConfig: optimizer must be adam or sgd");
  }
};

struct OuterConfig {
  double beta = 1.0;
  int iterations = 2000;
  int tasks_per_step = 1;  // L of Eq. 4
  int checkpoint_every = 200;
  double divergence_bound = 1e6;

  void validate() const {
    if (!(beta > 0.0 && beta <= 1.0))
      throw ConfigError("OuterConfig: beta must lie in (0,1]");
    if (iterations < 0) throw ConfigError("OuterConfig: iterations >= 0");
    if (tasks_per_step < 1) throw ConfigError("OuterConfig: tasks_per_step >= 1");
    if (checkpoint_every < 1)
      throw ConfigError("OuterConfig: checkpoint_every >= 1");
    if (!(divergence_bound > 0))
      throw ConfigError("OuterConfig: divergence_bound must be positive");
  }
};

// A task's scenes with an access log, so tests can assert exactly which
// scenes a fine-tuning run read.
template <typename S>
class ScenePool {
 public:
  ScenePool() = default;
  explicit ScenePool(std::vector<SceneTensors<S>> scenes)
      : scenes_(std::move(scenes)) {}

  int size() const { return static_cast<int>(scenes_.size()); }

  const SceneTensors<S>& get(int i) const {
    if (i < 0 || i >= size()) throw ContractError("ScenePool: index out of range");
    log_.push_back(i);
    return scenes_[static_cast<std::size_t>(i)];
  }

  // Raw view without logging (pool building, evaluation sweeps).
  const std::vector<SceneTensors<S>>& scenes() const { return scenes_; }

  const std::vector<int>& access_log() const { return log_; }
  void clear_log() { log_.clear(); }

 private:
  std::vector<SceneTensors<S>> scenes_;
  mutable std::vector<int> log_;
};

template <typename S>
ScenePool<S> pool_union(const std::vector<ScenePool<S>>& tasks) {
  std::vector<SceneTensors<S>> all;
  for (const ScenePool<S>& t : tasks)
    all.insert(all.end(), t.scenes().begin(), t.scenes().end());
  return ScenePool<S>(std::move(all));
}

// Everything that stays fixed across a training run.
template <typename S>
struct TrainContext {
  ModelConfig model;
  LossWeights weights;
  PipelineOptions options;
  const FeatureExtractor<S>* extractor = nullptr;

  void validate() const {
    model.validate();
    weights.validate();
    if (extractor == nullptr)
      throw ConfigError("TrainContext: perceptual extractor missing");
  }
};

template <typename S>
struct OptimizerTrio {
  InnerOptimizer<S> gen, dglobal, dobj;

  explicit OptimizerTrio(const InnerConfig& c)
      : gen(c.optimizer, c.lr),
        dglobal(c.optimizer, c.lr),
        dobj(c.optimizer, c.lr) {}

  void reset() {
    gen.reset();
    dglobal.reset();
    dobj.reset();
  }
};

template <typename S>
struct AdaptResult {
  ModelParams<S> params;
  LossBreakdown last;  // losses of the final iteration; zeros when k == 0
};

inline std::string describe_breakdown(const LossBreakdown& b) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "total_g=%.5g total_d=%.5g box=%.4g gan_g=%.4g/%.4g "
                "gan_d=%.4g/%.4g aux=%.4g/%.4g perc=%.4g l1=%.4g",
                b.total_g, b.total_d, b.box, b.gan_global_g, b.gan_obj_g,
                b.gan_global_d, b.gan_obj_d, b.aux, b.aux_d, b.perceptual,
                b.image_l1);
  return buf;
}

namespace detail {

template <typename S>
std::vector<const SceneTensors<S>*> draw_batch(const ScenePool<S>& pool,
                                               const std::vector<int>& ids,
                                               int batch_size,
                                               RngStream& rng) {
  std::vector<const SceneTensors<S>*> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    const int pick = ids[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(ids.size()) - 1))];
    batch.push_back(&pool.get(pick));
  }
  return batch;
}

template <typename S>
LossBreakdown guarded_iteration(const TrainContext<S>& ctx,
                                ModelParams<S>& params,
                                const std::vector<const SceneTensors<S>*>& batch,
                                OptimizerTrio<S>& opts, RngStream& rng,
                                const std::string& where) {
  LossBreakdown bd;
  try {
    bd = train_inner_iteration(params, ctx.model, ctx.weights, ctx.options,
                               *ctx.extractor, batch, opts.gen, opts.dglobal,
                               opts.dobj, rng);
  } catch (const NumericError& e) {
    throw NumericError(where + ": " + e.what());
  }
  if (!(std::isfinite(bd.total_g) && std::isfinite(bd.total_d)))
    throw NumericError(where + ": non-finite loss (" + describe_breakdown(bd) +
                       ")");
  return bd;
}

inline std::vector<int> all_ids(int n) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

}  // namespace detail

// Eq. 3: k adversarial iterations on a deep copy of theta; theta unchanged.
// `carried` supplies persistent optimizer moments; by default (and whenever
// cfg.reset_moments is set) each call starts from fresh moments.
template <typename S>
AdaptResult<S> inner_adapt(const TrainContext<S>& ctx,
                           const ModelParams<S>& theta,
                           const ScenePool<S>& pool, const InnerConfig& cfg,
                           RngStream& rng,
                           OptimizerTrio<S>* carried = nullptr) {
  ctx.validate();
  cfg.validate();
  if (pool.size() == 0) throw ContractError("inner_adapt: empty task pool");
  AdaptResult<S> r{theta, LossBreakdown{}};
  OptimizerTrio<S> local(cfg);
  OptimizerTrio<S>* opts = carried ? carried : &local;
  if (cfg.reset_moments) opts->reset();
  const std::vector<int> ids = detail::all_ids(pool.size());
  for (int it = 0; it < cfg.k; ++it)
    r.last = detail::guarded_iteration(
        ctx, r.params, detail::draw_batch(pool, ids, cfg.batch_size, rng),
        *opts, rng, "inner iteration " + std::to_string(it));
  return r;
}

// Eq. 4 on an explicit registry pair: theta += beta * mean_l(theta_l - theta).
template <typename S>
void reptile_step(TensorRegistry<S>& theta,
                  const std::vector<const TensorRegistry<S>*>& adapted,
                  double beta) {
  if (!(beta >= 0.0 && beta <= 1.0))
    throw ConfigError("reptile_step: beta must lie in [0,1]");
  if (adapted.empty()) throw ContractError("reptile_step: no adapted states");
  for (const TensorRegistry<S>* a : adapted) {
    if (a->items.size() != theta.items.size())
      throw ContractError("reptile_step: name sets differ");
    for (std::size_t i = 0; i < theta.items.size(); ++i) {
      if (a->items[i].first != theta.items[i].first)
        throw ContractError("reptile_step: name sets differ at '" +
                            theta.items[i].first + "'");
      if (!a->items[i].second->same_shape(*theta.items[i].second))
        throw ContractError("reptile_step: shape mismatch at '" +
                            theta.items[i].first + "'");
    }
  }
  const double scale = beta / static_cast<double>(adapted.size());
  for (std::size_t i = 0; i < theta.items.size(); ++i) {
    Tensor<S>& t = *theta.items[i].second;
    for (std::int64_t j = 0; j < t.numel(); ++j) {
      double acc = 0.0;
      for (const TensorRegistry<S>* a : adapted)
        acc += static_cast<double>((*a->items[i].second)[j]) -
               static_cast<double>(t[j]);
      t[j] = static_cast<S>(static_cast<double>(t[j]) + scale * acc);
    }
  }
}

template <typename S>
TensorRegistry<S> filter_registry(const TensorRegistry<S>& r,
                                  const std::vector<std::string>& prefixes) {
  TensorRegistry<S> out;
  for (const auto& item : r.items)
    for (const std::string& p : prefixes)
      if (item.first.rfind(p, 0) == 0) {
        out.items.push_back(item);
        break;
      }
  return out;
}

// Applies Eq. 4 separately to the generator subset and to each
// discriminator's subset, as the meta-training loop requires.
template <typename S>
void reptile_update(ModelParams<S>& theta, const ModelConfig& cfg,
                    const std::vector<ModelParams<S>*>& adapted, double beta) {
  TensorRegistry<S> treg = registry(theta, cfg);
  std::vector<TensorRegistry<S>> aregs;
  aregs.reserve(adapted.size());
  for (ModelParams<S>* a : adapted) aregs.push_back(registry(*a, cfg));
  const std::vector<std::vector<std::string>> groups = {
      {"gcn.", "decoder.", "decoder_state."}, {"dglobal."}, {"dobj."}};
  for (const auto& g : groups) {
    TensorRegistry<S> tg = filter_registry(treg, g);
    std::vector<TensorRegistry<S>> ags;
    std::vector<const TensorRegistry<S>*> ptrs;
    ags.reserve(aregs.size());
    for (auto& ar : aregs) ags.push_back(filter_registry(ar, g));
    for (auto& ar : ags) ptrs.push_back(&ar);
    reptile_step(tg, ptrs, beta);
  }
}

using CheckpointFn =
    std::function<void(std::uint64_t iteration, const std::string& rng_state)>;
using IterationFn =
    std::function<void(std::uint64_t iteration, const LossBreakdown&)>;

// Reptile outer loop. Each outer iteration samples tasks_per_step tasks,
// adapts each from the current theta, and interpolates. `start_iteration`
// and the caller-provided rng support exact checkpoint resumption.
template <typename S>
void meta_train(const TrainContext<S>& ctx, ModelParams<S>& theta,
                const std::vector<ScenePool<S>*>& tasks,
                const InnerConfig& inner, const OuterConfig& outer,
                RngStream& rng, std::uint64_t start_iteration = 0,
                const CheckpointFn& on_checkpoint = {},
                std::ostream* log = nullptr,
                const IterationFn& on_iteration = {}) {
  ctx.validate();
  inner.validate();
  outer.validate();
  if (tasks.empty()) throw ContractError("meta_train: no training tasks");
  for (const ScenePool<S>* p : tasks)
    if (p == nullptr || p->size() == 0)
      throw ContractError("meta_train: empty task pool");
  OptimizerTrio<S> carried(inner);
  const auto total = static_cast<std::uint64_t>(outer.iterations);
  for (std::uint64_t i = start_iteration; i < total; ++i) {
    std::vector<ModelParams<S>> adapted;
    adapted.reserve(static_cast<std::size_t>(outer.tasks_per_step));
    LossBreakdown last;
    for (int l = 0; l < outer.tasks_per_step; ++l) {
      const auto tix = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(tasks.size()) - 1));
      AdaptResult<S> r;
      try {
        r = inner_adapt(ctx, theta, *tasks[tix], inner, rng,
                        inner.reset_moments ? nullptr : &carried);
      } catch (const NumericError& e) {
        throw NumericError("outer iteration " + std::to_string(i) + ": " +
                           e.what());
      }
      if (r.last.total_g > outer.divergence_bound ||
          r.last.total_d > outer.divergence_bound)
        throw NumericError("diverged at outer iteration " + std::to_string(i) +
                           " (" + describe_breakdown(r.last) + ")");
      adapted.push_back(std::move(r.params));
      last = r.last;
    }
    std::vector<ModelParams<S>*> ptrs;
    for (auto& a : adapted) ptrs.push_back(&a);
    reptile_update(theta, ctx.model, ptrs, outer.beta);
    if (on_iteration) on_iteration(i + 1, last);
    if (log && ((i + 1) % 50 == 0 || i + 1 == total))
      *log << "outer " << (i + 1) << "/" << total << "  "
           << describe_breakdown(last) << "\n";
    if (on_checkpoint &&
        ((i + 1) % static_cast<std::uint64_t>(outer.checkpoint_every) == 0 ||
         i + 1 == total))
      on_checkpoint(i + 1, rng.serialize());
  }
}

// Few-shot adaptation: exactly `shots` distinct scenes are drawn once and
// reused for every step. theta is untouched; the adapted copy is returned.
template <typename S>
AdaptResult<S> finetune(const TrainContext<S>& ctx,
                        const ModelParams<S>& theta, const ScenePool<S>& pool,
                        int shots, int steps, const InnerConfig& cfg,
                        RngStream& rng) {
  ctx.validate();
  cfg.validate();
  if (shots < 1) throw ContractError("finetune: shots must be positive");
  if (steps < 0) throw ContractError("finetune: steps must be >= 0");
  if (pool.size() < shots)
    throw ContractError("finetune: task pool holds " +
                        std::to_string(pool.size()) + " scenes but " +
                        std::to_string(shots) + " shots were requested");
  std::vector<int> ids = detail::all_ids(pool.size());
  for (int i = 0; i < shots; ++i) {
    const auto j = static_cast<std::size_t>(
        rng.uniform_int(i, static_cast<std::int64_t>(ids.size()) - 1));
    std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
  }
  ids.resize(static_cast<std::size_t>(shots));
  AdaptResult<S> r{theta, LossBreakdown{}};
  if (steps == 0) return r;
  // Each shot is read from the pool exactly once; steps reuse the local set.
  std::vector<const SceneTensors<S>*> shot_set;
  shot_set.reserve(ids.size());
  for (int id : ids) shot_set.push_back(&pool.get(id));
  OptimizerTrio<S> opts(cfg);
  for (int it = 0; it < steps; ++it) {
    std::vector<const SceneTensors<S>*> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(shot_set[static_cast<std::size_t>(rng.uniform_int(
          0, static_cast<std::int64_t>(shot_set.size()) - 1))]);
    r.last = detail::guarded_iteration(ctx, r.params, batch, opts, rng,
                                       "finetune step " + std::to_string(it));
  }
  return r;
}

// Joint baseline: the same loop over the union of all training tasks, with
// Eq. 4 degenerate (L=1, beta=1), so each outer step is k plain adversarial
// iterations on the pooled data.
template <typename S>
void baseline_train(const TrainContext<S>& ctx, ModelParams<S>& phi,
                    ScenePool<S>& pooled, const InnerConfig& inner,
                    const OuterConfig& outer, RngStream& rng,
                    std::uint64_t start_iteration = 0,
                    const CheckpointFn& on_checkpoint = {},
                    std::ostream* log = nullptr,
                    const IterationFn& on_iteration = {}) {
  OuterConfig joint = outer;
  joint.beta = 1.0;
  joint.tasks_per_step = 1;
  meta_train(ctx, phi, std::vector<ScenePool<S>*>{&pooled}, inner, joint, rng,
             start_iteration, on_checkpoint, log, on_iteration);
}

}  // namespace migs
