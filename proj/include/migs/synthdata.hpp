#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "migs/errors.hpp"
#include "migs/io.hpp"
#include "migs/rng.hpp"
#include "migs/scenegraph.hpp"

namespace migs {

inline const std::array<std::string, 3>& background_styles() {
  static const std::array<std::string, 3> v{"day", "dusk", "night"};
  return v;
}
inline const std::array<std::string, 3>& palettes() {
  static const std::array<std::string, 3> v{"warm", "cool", "mono"};
  return v;
}
inline const std::array<std::string, 2>& densities() {
  static const std::array<std::string, 2> v{"sparse", "dense"};
  return v;
}
inline const std::array<std::string, 3>& shape_names() {
  static const std::array<std::string, 3> v{"circle", "square", "triangle"};
  return v;
}

// Object vocabulary: shape x color-group, shape-major ("circle_warm", ...).
inline Vocabulary default_vocabulary() {
  Vocabulary v;
  for (const std::string& s : shape_names())
    for (const std::string& p : palettes()) v.object_categories.push_back(s + "_" + p);
  v.predicate_categories.assign(spatial_predicates().begin(), spatial_predicates().end());
  return v;
}

struct TaskSpec {
  std::string task_id;
  std::map<std::string, std::string> attributes;  // background_style, palette, density
  std::uint64_t seed = 0;

  const std::string& attr(const std::string& key) const {
    auto it = attributes.find(key);
    if (it == attributes.end()) throw ConfigError("task missing attribute: " + key);
    return it->second;
  }
};

struct ShapeSpec {
  int shape = 0;  // index into shape_names()
  std::array<float, 3> color{};
  BoundingBox box;
};

struct SceneSpec {
  std::vector<ShapeSpec> shapes;
  std::array<float, 3> bg_top{};
  std::array<float, 3> bg_bottom{};
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  int height = 64, width = 64;
  int scenes_per_task = 64;
  std::vector<TaskSpec> tasks;
  std::vector<std::string> train_task_ids, test_task_ids;

  const TaskSpec& task(const std::string& id) const {
    for (const TaskSpec& t : tasks)
      if (t.task_id == id) return t;
    throw ConfigError("unknown task id: " + id);
  }
};

struct GenConfig {
  std::uint64_t seed = 0;
  int num_train_tasks = 12;
  int num_test_tasks = 4;
  int scenes_per_task = 64;
  int height = 64, width = 64;
};

namespace detail {

inline int index_of(const std::string& v, const auto& list, const char* what) {
  for (std::size_t i = 0; i < list.size(); ++i)
    if (list[i] == v) return static_cast<int>(i);
  throw ConfigError(std::string("unknown ") + what + ": " + v);
}

inline std::array<float, 3> palette_color(int palette, RngStream& rng) {
  switch (palette) {
    case 0: {  // warm: red through amber
      const float r = static_cast<float>(rng.uniform(0.75, 1.0));
      const float g = static_cast<float>(rng.uniform(0.2, 0.65));
      const float b = static_cast<float>(rng.uniform(0.0, 0.2));
      return {r, g, b};
    }
    case 1: {  // cool: blue through teal
      const float r = static_cast<float>(rng.uniform(0.0, 0.25));
      const float g = static_cast<float>(rng.uniform(0.35, 0.75));
      const float b = static_cast<float>(rng.uniform(0.7, 1.0));
      return {r, g, b};
    }
    default: {  // mono: exact gray
      const float v = static_cast<float>(rng.uniform(0.25, 0.95));
      return {v, v, v};
    }
  }
}

inline void background_for(int style, RngStream& rng, std::array<float, 3>& top,
                           std::array<float, 3>& bottom) {
  const float j = static_cast<float>(rng.uniform(-0.04, 0.04));
  auto add = [j](std::array<float, 3> c) {
    for (float& v : c) v = std::clamp(v + j, 0.0f, 1.0f);
    return c;
  };
  switch (style) {
    case 0:  // day: bright sky fading to pale horizon
      top = add({0.45f, 0.67f, 0.92f});
      bottom = add({0.82f, 0.88f, 0.95f});
      break;
    case 1:  // dusk
      top = add({0.55f, 0.3f, 0.45f});
      bottom = add({0.95f, 0.55f, 0.25f});
      break;
    default:  // night
      top = add({0.03f, 0.04f, 0.12f});
      bottom = add({0.1f, 0.12f, 0.24f});
      break;
  }
}

inline bool point_in_shape(const ShapeSpec& s, double u, double v) {
  const BoundingBox& b = s.box;
  if (u < b.x0 || u > b.x1 || v < b.y0 || v > b.y1) return false;
  switch (s.shape) {
    case 0: {  // circle: ellipse inscribed in the box
      const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1);
      const double rx = 0.5 * (b.x1 - b.x0), ry = 0.5 * (b.y1 - b.y0);
      const double nx = (u - cx) / rx, ny = (v - cy) / ry;
      return nx * nx + ny * ny <= 1.0;
    }
    case 1:  // square fills the box
      return true;
    default: {  // triangle: apex top-center, base along the bottom edge
      const double cx = 0.5 * (b.x0 + b.x1);
      const double h = b.y1 - b.y0;
      if (h <= 0.0) return false;
      const double frac = (v - b.y0) / h;  // 0 at apex row, 1 at base
      const double half_w = 0.5 * (b.x1 - b.x0) * frac;
      return u >= cx - half_w && u <= cx + half_w;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// sampling and rendering
// ---------------------------------------------------------------------------

inline SceneSpec sample_scene(const TaskSpec& task, RngStream& rng) {
  const int style = detail::index_of(task.attr("background_style"), background_styles(),
                                     "background_style");
  const int palette = detail::index_of(task.attr("palette"), palettes(), "palette");
  const bool dense = task.attr("density") == "dense";
  if (!dense && task.attr("density") != "sparse")
    throw ConfigError("unknown density: " + task.attr("density"));

  SceneSpec scene;
  detail::background_for(style, rng, scene.bg_top, scene.bg_bottom);
  const int count = dense ? static_cast<int>(rng.uniform_int(4, 6))
                          : static_cast<int>(rng.uniform_int(2, 3));
  for (int i = 0; i < count; ++i) {
    ShapeSpec s;
    s.shape = static_cast<int>(rng.uniform_int(0, 2));
    s.color = detail::palette_color(palette, rng);
    const double w = rng.uniform(0.18, dense ? 0.32 : 0.45);
    const double h = rng.uniform(0.18, dense ? 0.32 : 0.45);
    const double x0 = rng.uniform(0.01, 0.99 - w);
    const double y0 = rng.uniform(0.01, 0.99 - h);
    s.box = {x0, y0, x0 + w, y0 + h};
    scene.shapes.push_back(s);
  }
  return scene;
}

inline Tensor<float> render(const SceneSpec& scene, int H, int W) {
  if (H < 16 || W < 16) throw ConfigError("render: image size must be at least 16x16");
  Tensor<float> img({H, W, 3});
  for (int y = 0; y < H; ++y) {
    const float t = (static_cast<float>(y) + 0.5f) / static_cast<float>(H);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = (1.0f - t) * scene.bg_top[static_cast<std::size_t>(c)] +
                          t * scene.bg_bottom[static_cast<std::size_t>(c)];
  }
  // painter's algorithm: later shapes overwrite earlier ones
  for (const ShapeSpec& s : scene.shapes) {
    const int y_lo = std::max(0, static_cast<int>(s.box.y0 * H - 1));
    const int y_hi = std::min(H - 1, static_cast<int>(s.box.y1 * H + 1));
    const int x_lo = std::max(0, static_cast<int>(s.box.x0 * W - 1));
    const int x_hi = std::min(W - 1, static_cast<int>(s.box.x1 * W + 1));
    for (int y = y_lo; y <= y_hi; ++y) {
      const double v = (y + 0.5) / H;
      for (int x = x_lo; x <= x_hi; ++x) {
        const double u = (x + 0.5) / W;
        if (detail::point_in_shape(s, u, v))
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = s.color[static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

inline AnnotatedScene build_annotated(const SceneSpec& scene, const TaskSpec& task,
                                      const Vocabulary& vocab, int H, int W) {
  const int palette = detail::index_of(task.attr("palette"), palettes(), "palette");
  AnnotatedScene s;
  s.image = render(scene, H, W);
  for (const ShapeSpec& sh : scene.shapes) {
    const std::string name =
        shape_names()[static_cast<std::size_t>(sh.shape)] + "_" +
        palettes()[static_cast<std::size_t>(palette)];
    const int cat = vocab.object_index(name);
    if (cat < 0) throw ConfigError("vocabulary is missing category: " + name);
    s.graph.objects.push_back(cat);
    s.boxes.push_back(sh.box);
  }
  s.graph.edges = infer_spatial_relations(s.boxes, vocab);
  s.attributes = task.attributes;
  return s;
}

// ---------------------------------------------------------------------------
// dataset generation and loading
// ---------------------------------------------------------------------------

inline std::string manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["height"] = m.height;
  j["width"] = m.width;
  j["scenes_per_task"] = m.scenes_per_task;
  nlohmann::json tasks = nlohmann::json::array();
  for (const TaskSpec& t : m.tasks) {
    nlohmann::json jt;
    jt["task_id"] = t.task_id;
    jt["attributes"] = t.attributes;
    jt["seed"] = t.seed;
    tasks.push_back(std::move(jt));
  }
  j["tasks"] = std::move(tasks);
  j["train_task_ids"] = m.train_task_ids;
  j["test_task_ids"] = m.test_task_ids;
  return j.dump(2) + "\n";
}

inline DatasetManifest manifest_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("manifest JSON: ") + e.what(), e.byte);
  }
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.scenes_per_task = j.at("scenes_per_task").get<int>();
    for (const auto& jt : j.at("tasks")) {
      TaskSpec t;
      t.task_id = jt.at("task_id").get<std::string>();
      t.attributes = jt.at("attributes").get<std::map<std::string, std::string>>();
      t.seed = jt.at("seed").get<std::uint64_t>();
      m.tasks.push_back(std::move(t));
    }
    m.train_task_ids = j.at("train_task_ids").get<std::vector<std::string>>();
    m.test_task_ids = j.at("test_task_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest JSON: ") + e.what(), 0);
  }
  return m;
}

// Enumerates all attribute combinations, shuffles them with the manifest
// seed, and claims the first train+test of them. Train/test are disjoint as
// attribute tuples by construction.
inline DatasetManifest plan_dataset(const GenConfig& cfg) {
  std::vector<TaskSpec> all;
  for (const std::string& s : background_styles())
    for (const std::string& p : palettes())
      for (const std::string& d : densities()) {
        TaskSpec t;
        t.task_id = s + "_" + p + "_" + d;
        t.attributes = {{"background_style", s}, {"palette", p}, {"density", d}};
        all.push_back(std::move(t));
      }
  const int want = cfg.num_train_tasks + cfg.num_test_tasks;
  if (want < 1 || want > static_cast<int>(all.size()))
    throw ConfigError("task count must be in [1, " + std::to_string(all.size()) + "]");

  RngStream rng(derive_seed(cfg.seed, "task-split"));
  for (std::size_t i = all.size(); i > 1; --i) {
    const std::size_t k = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(all[i - 1], all[k]);
  }

  DatasetManifest m;
  m.seed = cfg.seed;
  m.height = cfg.height;
  m.width = cfg.width;
  m.scenes_per_task = cfg.scenes_per_task;
  for (int i = 0; i < want; ++i) {
    TaskSpec t = all[static_cast<std::size_t>(i)];
    t.seed = derive_seed(cfg.seed, "task:" + t.task_id);
    if (i < cfg.num_train_tasks)
      m.train_task_ids.push_back(t.task_id);
    else
      m.test_task_ids.push_back(t.task_id);
    m.tasks.push_back(std::move(t));
  }
  return m;
}

inline DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const DatasetManifest m = plan_dataset(cfg);
  const Vocabulary vocab = default_vocabulary();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  for (const TaskSpec& task : m.tasks) {
    const fs::path task_dir = fs::path(out_dir) / task.task_id;
    fs::create_directories(task_dir, ec);
    if (ec) throw IoError("cannot create task directory: " + task_dir.string());
    RngStream rng(task.seed);
    for (int k = 0; k < m.scenes_per_task; ++k) {
      const SceneSpec scene = sample_scene(task, rng);
      AnnotatedScene ann = build_annotated(scene, task, vocab, m.height, m.width);
      ann.image_path = "scene_" + std::to_string(k) + ".png";
      write_png_rgb8((task_dir / ann.image_path).string(), ann.image);
      write_text_file((task_dir / ("scene_" + std::to_string(k) + ".json")).string(),
                      scene_to_json(ann));
    }
  }
  // manifest last: it doubles as the completion marker
  write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest_to_json(m));
  return m;
}

inline DatasetManifest load_manifest(const std::string& dataset_dir) {
  namespace fs = std::filesystem;
  return manifest_from_json(
      read_text_file((fs::path(dataset_dir) / "manifest.json").string()));
}

inline std::vector<AnnotatedScene> load_task_scenes(const std::string& dataset_dir,
                                                    const DatasetManifest& m,
                                                    const std::string& task_id) {
  namespace fs = std::filesystem;
  m.task(task_id);  // validates the id
  std::vector<AnnotatedScene> scenes;
  const fs::path task_dir = fs::path(dataset_dir) / task_id;
  for (int k = 0; k < m.scenes_per_task; ++k) {
    const fs::path jpath = task_dir / ("scene_" + std::to_string(k) + ".json");
    AnnotatedScene s = scene_from_json(read_text_file(jpath.string()));
    s.image = read_png_rgb8((task_dir / s.image_path).string());
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace migs
