#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "migs/errors.hpp"
#include "migs/features.hpp"
#include "migs/io.hpp"
#include "migs/losses.hpp"
#include "migs/meta.hpp"
#include "migs/model_state.hpp"
#include "migs/pipeline.hpp"
#include "migs/synthdata.hpp"

// Experiment configuration: one JSON document with a {desk, paper} profile
// switch that fills architecture widths and schedule defaults; any explicit
// key overrides its profile default.

namespace migs {

struct EvalConfig {
  std::vector<int> shots;  // profile default: desk [5,10], paper [5,10,160]
  std::vector<std::string> metrics = {"fid", "kid", "prd"};
  int test_scenes_per_task = 24;
  int finetune_steps = 50;
  int num_clusters = 20;
  int extractor_dim = 64;
  std::uint64_t extractor_seed = FeatureExtractor<float>::kDefaultSeed;

  void validate() const {
    if (finetune_steps < 0)
      throw ConfigError("eval: finetune_steps must be >= 0");
    if (shots.empty()) throw ConfigError("eval: shots list must be non-empty");
    for (int s : shots)
      if (s < 1) throw ConfigError("eval: shots must be positive");
    if (metrics.empty()) throw ConfigError("eval: metrics set must be non-empty");
    for (const std::string& m : metrics)
      if (m != "fid" && m != "kid" && m != "prd")
        throw ConfigError("eval: unknown metric: " + m);
    if (test_scenes_per_task < 2)
      throw ConfigError("eval: test_scenes_per_task must be >= 2");
    if (num_clusters < 1) throw ConfigError("eval: num_clusters must be >= 1");
    if (extractor_dim < 4 || extractor_dim % 4 != 0)
      throw ConfigError("eval: extractor_dim must be a positive multiple of 4");
  }
};

struct ExperimentConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  GenConfig dataset;
  ModelConfig model;
  LossWeights weights;
  PipelineOptions options;
  InnerConfig inner;
  OuterConfig outer;
  EvalConfig eval;

  void validate() const {
    if (profile != "desk" && profile != "paper")
      throw ConfigError("config: profile must be 'desk' or 'paper'");
    if (out_dir.empty()) throw ConfigError("config: out_dir must be set");
    if (dataset.height != model.image_size || dataset.width != model.image_size)
      throw ConfigError("config: dataset image size must match model.image_size");
    model.validate();
    weights.validate();
    inner.validate();
    outer.validate();
    eval.validate();
    const int max_shots = *std::max_element(eval.shots.begin(), eval.shots.end());
    if (dataset.scenes_per_task < max_shots + eval.test_scenes_per_task)
      throw ConfigError(
          "config: scenes_per_task must cover max(shots) + test scenes");
    if (eval.test_scenes_per_task < eval.num_clusters)
      throw ConfigError(
          "config: test_scenes_per_task must be >= eval.num_clusters for PRD");
  }
};

inline ExperimentConfig desk_profile() {
  ExperimentConfig c;
  c.profile = "desk";
  c.model.image_size = 16;
  c.model.gcn.embed_dim = 32;
  c.model.gcn.num_layers = 3;
  c.model.gcn.propagation_hidden = 128;
  c.model.gcn.update_hidden = 128;
  c.model.gcn.box_head_hidden = 64;
  c.model.gcn.mask_size = 8;
  c.model.crn = CrnConfig::desk();
  c.model.spade = SpadeConfig::desk();
  c.model.dglobal = DGlobalConfig::desk();
  c.model.dobj = DObjConfig::desk();
  c.model.dobj.num_classes = c.model.num_objects;
  c.dataset.height = c.dataset.width = c.model.image_size;
  c.outer.iterations = 2000;
  c.eval.shots = {5, 10};
  c.eval.num_clusters = 20;
  c.eval.test_scenes_per_task = 24;
  return c;
}

inline ExperimentConfig paper_profile() {
  ExperimentConfig c;
  c.profile = "paper";
  c.model.image_size = 64;  // VG-scale output
  c.dataset.height = c.dataset.width = c.model.image_size;
  c.dataset.scenes_per_task = 200;
  c.outer.iterations = 30000;  // BDD schedule
  c.eval.shots = {5, 10, 160};
  c.eval.test_scenes_per_task = 40;
  c.eval.finetune_steps = 200;
  return c;
}

namespace detail {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void apply_model(const nlohmann::json& j, ModelConfig& m) {
  if (j.contains("decoder")) m.decoder = parse_decoder(j.at("decoder").get<std::string>());
  maybe(j, "num_objects", m.num_objects);
  maybe(j, "num_predicates", m.num_predicates);
  maybe(j, "image_size", m.image_size);
  if (j.contains("gcn")) {
    const nlohmann::json& g = j.at("gcn");
    maybe(g, "embed_dim", m.gcn.embed_dim);
    maybe(g, "num_layers", m.gcn.num_layers);
    maybe(g, "propagation_hidden", m.gcn.propagation_hidden);
    maybe(g, "update_hidden", m.gcn.update_hidden);
    maybe(g, "box_head_hidden", m.gcn.box_head_hidden);
    maybe(g, "mask_size", m.gcn.mask_size);
  }
  if (j.contains("crn")) {
    const nlohmann::json& g = j.at("crn");
    maybe(g, "channels", m.crn.channels);
    m.crn.num_blocks = static_cast<int>(m.crn.channels.size());
    maybe(g, "num_blocks", m.crn.num_blocks);
    maybe(g, "leaky_slope", m.crn.leaky_slope);
  }
  if (j.contains("spade")) {
    const nlohmann::json& g = j.at("spade");
    maybe(g, "channels", m.spade.channels);
    m.spade.num_blocks = static_cast<int>(m.spade.channels.size());
    maybe(g, "num_blocks", m.spade.num_blocks);
    maybe(g, "mod_width", m.spade.mod_width);
    maybe(g, "noise_dim", m.spade.noise_dim);
    maybe(g, "leaky_slope", m.spade.leaky_slope);
  }
  if (j.contains("dglobal")) {
    const nlohmann::json& g = j.at("dglobal");
    maybe(g, "channels", m.dglobal.channels);
    maybe(g, "leaky_slope", m.dglobal.leaky_slope);
  }
  if (j.contains("dobj")) {
    const nlohmann::json& g = j.at("dobj");
    maybe(g, "channels", m.dobj.channels);
    maybe(g, "crop_size", m.dobj.crop_size);
    maybe(g, "leaky_slope", m.dobj.leaky_slope);
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: invalid JSON: ") + e.what(), 0);
  }
  try {
    std::string profile = "desk";
    detail::maybe(j, "profile", profile);
    ExperimentConfig c;
    if (profile == "desk") {
      c = desk_profile();
    } else if (profile == "paper") {
      c = paper_profile();
    } else {
      throw ConfigError("config: profile must be 'desk' or 'paper'");
    }
    detail::maybe(j, "seed", c.seed);
    detail::maybe(j, "out_dir", c.out_dir);
    if (j.contains("dataset")) {
      const nlohmann::json& d = j.at("dataset");
      detail::maybe(d, "seed", c.dataset.seed);
      detail::maybe(d, "num_train_tasks", c.dataset.num_train_tasks);
      detail::maybe(d, "num_test_tasks", c.dataset.num_test_tasks);
      detail::maybe(d, "scenes_per_task", c.dataset.scenes_per_task);
      detail::maybe(d, "height", c.dataset.height);
      detail::maybe(d, "width", c.dataset.width);
    }
    if (j.contains("model")) {
      detail::apply_model(j.at("model"), c.model);
      // the dataset renders at the model resolution unless overridden
      if (!j.contains("dataset") ||
          (!j.at("dataset").contains("height") && !j.at("dataset").contains("width"))) {
        c.dataset.height = c.dataset.width = c.model.image_size;
      }
    }
    c.model.dobj.num_classes = c.model.num_objects;
    if (j.contains("loss_weights")) {
      const nlohmann::json& w = j.at("loss_weights");
      detail::maybe(w, "box", c.weights.box);
      detail::maybe(w, "gan_global", c.weights.gan_global);
      detail::maybe(w, "gan_obj", c.weights.gan_obj);
      detail::maybe(w, "aux", c.weights.aux);
      detail::maybe(w, "perceptual", c.weights.perceptual);
      detail::maybe(w, "image_l1", c.weights.image_l1);
    }
    if (j.contains("options")) {
      const nlohmann::json& o = j.at("options");
      detail::maybe(o, "use_gt_boxes", c.options.use_gt_boxes);
      detail::maybe(o, "aux_on_g", c.options.aux_on_g);
      detail::maybe(o, "aux_on_d", c.options.aux_on_d);
    }
    if (j.contains("inner")) {
      const nlohmann::json& i = j.at("inner");
      detail::maybe(i, "k", c.inner.k);
      detail::maybe(i, "lr", c.inner.lr);
      detail::maybe(i, "batch_size", c.inner.batch_size);
      detail::maybe(i, "optimizer", c.inner.optimizer);
      detail::maybe(i, "reset_moments", c.inner.reset_moments);
    }
    if (j.contains("outer")) {
      const nlohmann::json& o = j.at("outer");
      detail::maybe(o, "beta", c.outer.beta);
      detail::maybe(o, "iterations", c.outer.iterations);
      detail::maybe(o, "tasks_per_step", c.outer.tasks_per_step);
      detail::maybe(o, "checkpoint_every", c.outer.checkpoint_every);
      detail::maybe(o, "divergence_bound", c.outer.divergence_bound);
    }
    if (j.contains("eval")) {
      const nlohmann::json& e = j.at("eval");
      detail::maybe(e, "shots", c.eval.shots);
      detail::maybe(e, "metrics", c.eval.metrics);
      detail::maybe(e, "test_scenes_per_task", c.eval.test_scenes_per_task);
      detail::maybe(e, "finetune_steps", c.eval.finetune_steps);
      detail::maybe(e, "num_clusters", c.eval.num_clusters);
      detail::maybe(e, "extractor_dim", c.eval.extractor_dim);
      detail::maybe(e, "extractor_seed", c.eval.extractor_seed);
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad field: ") + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(read_text_file(path));
}

// Canonical resolved form: every effective value, alphabetically ordered.
// The hash of this string identifies the experiment for checkpoints/reports.
inline std::string canonical_config_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["profile"] = c.profile;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["dataset"] = {{"seed", c.dataset.seed},
                  {"num_train_tasks", c.dataset.num_train_tasks},
                  {"num_test_tasks", c.dataset.num_test_tasks},
                  {"scenes_per_task", c.dataset.scenes_per_task},
                  {"height", c.dataset.height},
                  {"width", c.dataset.width}};
  j["model"] = {{"decoder", decoder_name(c.model.decoder)},
                {"num_objects", c.model.num_objects},
                {"num_predicates", c.model.num_predicates},
                {"image_size", c.model.image_size},
                {"gcn",
                 {{"embed_dim", c.model.gcn.embed_dim},
                  {"num_layers", c.model.gcn.num_layers},
                  {"propagation_hidden", c.model.gcn.propagation_hidden},
                  {"update_hidden", c.model.gcn.update_hidden},
                  {"box_head_hidden", c.model.gcn.box_head_hidden},
                  {"mask_size", c.model.gcn.mask_size}}},
                {"crn",
                 {{"num_blocks", c.model.crn.num_blocks},
                  {"channels", c.model.crn.channels},
                  {"leaky_slope", c.model.crn.leaky_slope}}},
                {"spade",
                 {{"num_blocks", c.model.spade.num_blocks},
                  {"channels", c.model.spade.channels},
                  {"mod_width", c.model.spade.mod_width},
                  {"noise_dim", c.model.spade.noise_dim},
                  {"leaky_slope", c.model.spade.leaky_slope}}},
                {"dglobal",
                 {{"channels", c.model.dglobal.channels},
                  {"leaky_slope", c.model.dglobal.leaky_slope}}},
                {"dobj",
                 {{"channels", c.model.dobj.channels},
                  {"crop_size", c.model.dobj.crop_size},
                  {"num_classes", c.model.dobj.num_classes},
                  {"leaky_slope", c.model.dobj.leaky_slope}}}};
  j["loss_weights"] = {{"box", c.weights.box},
                       {"gan_global", c.weights.gan_global},
                       {"gan_obj", c.weights.gan_obj},
                       {"aux", c.weights.aux},
                       {"perceptual", c.weights.perceptual},
                       {"image_l1", c.weights.image_l1}};
  j["options"] = {{"use_gt_boxes", c.options.use_gt_boxes},
                  {"aux_on_g", c.options.aux_on_g},
                  {"aux_on_d", c.options.aux_on_d}};
  j["inner"] = {{"k", c.inner.k},
                {"lr", c.inner.lr},
                {"batch_size", c.inner.batch_size},
                {"optimizer", c.inner.optimizer},
                {"reset_moments", c.inner.reset_moments}};
  j["outer"] = {{"beta", c.outer.beta},
                {"iterations", c.outer.iterations},
                {"tasks_per_step", c.outer.tasks_per_step},
                {"checkpoint_every", c.outer.checkpoint_every},
                {"divergence_bound", c.outer.divergence_bound}};
  j["eval"] = {{"shots", c.eval.shots},
               {"metrics", c.eval.metrics},
               {"test_scenes_per_task", c.eval.test_scenes_per_task},
               {"finetune_steps", c.eval.finetune_steps},
               {"num_clusters", c.eval.num_clusters},
               {"extractor_dim", c.eval.extractor_dim},
               {"extractor_seed", c.eval.extractor_seed}};
  return j.dump(2) + "\n";
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  const std::string s = canonical_config_json(c);
  return fnv1a64(s.data(), s.size());
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// run record
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string command;
  std::string config_text;       // exact bytes of the config used for the run
  std::string config_text_hash;  // fnv-1a of those bytes (hex)
  std::string config_hash;       // canonical resolved-config hash (hex)
  std::string revision = "unknown";
  std::string started_at, finished_at;  // UTC, second resolution
  std::vector<std::string> checkpoints;
  std::vector<std::string> reports;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return std::string(buf);
}

inline std::string source_revision(const std::string& start_dir = ".") {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::path dir = fs::absolute(start_dir, ec);
  for (int depth = 0; depth < 16 && !dir.empty(); ++depth) {
    const fs::path head = dir / ".git" / "HEAD";
    if (fs::exists(head, ec)) {
      try {
        std::string h = read_text_file(head.string());
        while (!h.empty() && (h.back() == '\n' || h.back() == '\r')) h.pop_back();
        if (h.rfind("ref: ", 0) == 0) {
          const fs::path ref = dir / ".git" / h.substr(5);
          if (!fs::exists(ref, ec)) return "unknown";
          std::string r = read_text_file(ref.string());
          while (!r.empty() && (r.back() == '\n' || r.back() == '\r')) r.pop_back();
          return r;
        }
        return h;
      } catch (const IoError&) {
        return "unknown";
      }
    }
    if (dir == dir.parent_path()) break;
    dir = dir.parent_path();
  }
  return "unknown";
}

inline std::string run_record_to_json(const RunRecord& r) {
  nlohmann::json j;
  j["command"] = r.command;
  j["config_text"] = r.config_text;
  j["config_text_hash"] = r.config_text_hash;
  j["config_hash"] = r.config_hash;
  j["revision"] = r.revision;
  j["started_at"] = r.started_at;
  j["finished_at"] = r.finished_at;
  j["checkpoints"] = r.checkpoints;
  j["reports"] = r.reports;
  return j.dump(2) + "\n";
}

inline RunRecord make_run_record(const std::string& command,
                                 const std::string& config_text,
                                 const ExperimentConfig& cfg) {
  RunRecord r;
  r.command = command;
  r.config_text = config_text;
  r.config_text_hash =
      hash_hex(fnv1a64(config_text.data(), config_text.size()));
  r.config_hash = hash_hex(config_hash(cfg));
  r.revision = source_revision();
  r.started_at = utc_timestamp();
  return r;
}

}  // namespace migs
