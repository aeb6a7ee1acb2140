#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "migs/errors.hpp"
#include "migs/tensor.hpp"

namespace migs {

// The six spatial predicates, in canonical order. Every vocabulary must
// contain each of them exactly once (other predicates may follow).
inline const std::array<std::string, 6>& spatial_predicates() {
  static const std::array<std::string, 6> kNames{
      "left of", "right of", "above", "below", "inside", "surrounding"};
  return kNames;
}

struct Vocabulary {
  std::vector<std::string> object_categories;
  std::vector<std::string> predicate_categories;

  int object_index(const std::string& name) const {
    for (std::size_t i = 0; i < object_categories.size(); ++i)
      if (object_categories[i] == name) return static_cast<int>(i);
    return -1;
  }
  int predicate_index(const std::string& name) const {
    for (std::size_t i = 0; i < predicate_categories.size(); ++i)
      if (predicate_categories[i] == name) return static_cast<int>(i);
    return -1;
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> v;
    if (object_categories.empty()) v.push_back("empty object category list");
    if (predicate_categories.empty()) v.push_back("empty predicate list");
    auto dupes = [&v](const std::vector<std::string>& xs, const char* what) {
      for (std::size_t i = 0; i < xs.size(); ++i)
        for (std::size_t j = i + 1; j < xs.size(); ++j)
          if (xs[i] == xs[j]) v.push_back(std::string("duplicate ") + what + ": " + xs[i]);
    };
    dupes(object_categories, "object category");
    dupes(predicate_categories, "predicate");
    for (const std::string& p : spatial_predicates()) {
      int count = 0;
      for (const std::string& q : predicate_categories)
        if (p == q) ++count;
      if (count != 1) v.push_back("spatial predicate missing or repeated: " + p);
    }
    return v;
  }
};

struct BoundingBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool valid() const {
    return x0 >= 0.0 && x0 < x1 && x1 <= 1.0 && y0 >= 0.0 && y0 < y1 && y1 <= 1.0;
  }
};

struct EdgeTriplet {
  int subject = 0, predicate = 0, object = 0;
  friend bool operator==(const EdgeTriplet&, const EdgeTriplet&) = default;
};

struct SceneGraph {
  std::vector<int> objects;            // category indices
  std::vector<EdgeTriplet> edges;
};

struct AnnotatedScene {
  Tensor<float> image;                 // [H,W,3] in [0,1]; may be empty until loaded
  SceneGraph graph;
  std::vector<BoundingBox> boxes;      // aligned with graph.objects
  std::map<std::string, std::string> attributes;
  std::string image_path;              // relative reference stored in JSON
};

// ---------------------------------------------------------------------------
// automatic spatial relations
// ---------------------------------------------------------------------------

namespace detail {

// Strict containment with a margin that sends equal boxes to the angle rule.
inline bool strictly_contains(const BoundingBox& outer, const BoundingBox& inner,
                              double margin = 1e-6) {
  return inner.x0 - outer.x0 > margin && outer.x1 - inner.x1 > margin &&
         inner.y0 - outer.y0 > margin && outer.y1 - inner.y1 > margin;
}

// Sector classification of the center offset (image coordinates, y down):
// "left of" phi in [-45,45), "above" [45,135), "right of" |phi|>=135,
// "below" [-135,-45). Implemented with sign/ratio comparisons instead of
// atan2 so boundary cases are exact; a zero offset counts as "left of".
inline const char* sector_name(double dx, double dy) {
  if (dx == 0.0 && dy == 0.0) return "left of";
  if (dx > 0.0 && dy >= -dx && dy < dx) return "left of";
  if (dy > 0.0 && dx > -dy && dx <= dy) return "above";
  if (dy < 0.0 && dx >= dy && dx < -dy) return "below";
  return "right of";
}

}  // namespace detail

// Emits exactly one edge per unordered pair (i<j), directed i -> j.
inline std::vector<EdgeTriplet> infer_spatial_relations(
    const std::vector<BoundingBox>& boxes, const Vocabulary& vocab) {
  for (std::size_t i = 0; i < boxes.size(); ++i)
    if (!boxes[i].valid())
      throw ConfigError("invalid bounding box at index " + std::to_string(i));
  std::array<int, 6> pred_ids{};
  for (std::size_t k = 0; k < 6; ++k) {
    pred_ids[k] = vocab.predicate_index(spatial_predicates()[k]);
    if (pred_ids[k] < 0)
      throw ConfigError("vocabulary is missing spatial predicate: " +
                        spatial_predicates()[k]);
  }
  auto pred_id = [&](const char* name) {
    for (std::size_t k = 0; k < 6; ++k)
      if (spatial_predicates()[k] == name) return pred_ids[k];
    throw ContractError("unknown spatial predicate");
  };

  std::vector<EdgeTriplet> edges;
  const int n = static_cast<int>(boxes.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const char* name;
      if (detail::strictly_contains(boxes[i], boxes[j]))
        name = "surrounding";
      else if (detail::strictly_contains(boxes[j], boxes[i]))
        name = "inside";
      else
        name = detail::sector_name((boxes[j].x0 + boxes[j].x1) - (boxes[i].x0 + boxes[i].x1),
                                   (boxes[j].y0 + boxes[j].y1) - (boxes[i].y0 + boxes[i].y1));
      edges.push_back({i, pred_id(name), j});
    }
  return edges;
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

inline std::vector<std::string> validate(const SceneGraph& graph, const Vocabulary& vocab) {
  std::vector<std::string> v;
  if (graph.objects.empty()) v.push_back("graph has no objects");
  const int vo = static_cast<int>(vocab.object_categories.size());
  const int vp = static_cast<int>(vocab.predicate_categories.size());
  const int n = static_cast<int>(graph.objects.size());
  for (std::size_t i = 0; i < graph.objects.size(); ++i)
    if (graph.objects[i] < 0 || graph.objects[i] >= vo)
      v.push_back("unknown object category at node " + std::to_string(i));
  for (std::size_t e = 0; e < graph.edges.size(); ++e) {
    const EdgeTriplet& t = graph.edges[e];
    if (t.subject < 0 || t.subject >= n || t.object < 0 || t.object >= n)
      v.push_back("edge " + std::to_string(e) + ": node index out of range");
    else if (t.subject == t.object)
      v.push_back("edge " + std::to_string(e) + ": self-edge");
    if (t.predicate < 0 || t.predicate >= vp)
      v.push_back("edge " + std::to_string(e) + ": unknown predicate");
  }
  return v;
}

inline std::vector<std::string> validate_scene(const AnnotatedScene& s,
                                               const Vocabulary& vocab) {
  std::vector<std::string> v = validate(s.graph, vocab);
  if (s.boxes.size() != s.graph.objects.size())
    v.push_back("box count does not match object count");
  for (std::size_t i = 0; i < s.boxes.size(); ++i)
    if (!s.boxes[i].valid()) v.push_back("invalid box at index " + std::to_string(i));
  if (!s.image.empty()) {
    if (s.image.ndim() != 3 || s.image.dim(2) != 3 || s.image.dim(0) < 1 || s.image.dim(1) < 1)
      v.push_back("image must be [H,W,3]");
  }
  return v;
}

// ---------------------------------------------------------------------------
// JSON serialization (schema: objects / edges / boxes / attributes / image)
// ---------------------------------------------------------------------------

inline std::string scene_to_json(const AnnotatedScene& s) {
  nlohmann::json j;
  j["objects"] = s.graph.objects;
  nlohmann::json edges = nlohmann::json::array();
  for (const EdgeTriplet& e : s.graph.edges)
    edges.push_back({e.subject, e.predicate, e.object});
  j["edges"] = std::move(edges);
  nlohmann::json boxes = nlohmann::json::array();
  for (const BoundingBox& b : s.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
  j["boxes"] = std::move(boxes);
  j["attributes"] = s.attributes;
  j["image"] = s.image_path;
  return j.dump(2) + "\n";
}

inline AnnotatedScene scene_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("scene JSON: ") + e.what(), e.byte);
  }
  AnnotatedScene s;
  try {
    s.graph.objects = j.at("objects").get<std::vector<int>>();
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 3)
        throw ParseError("edge must be a [subject, predicate, object] triplet", 0);
      s.graph.edges.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<int>()});
    }
    for (const auto& b : j.at("boxes")) {
      if (!b.is_array() || b.size() != 4) throw ParseError("box must have 4 coordinates", 0);
      s.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                         b[3].get<double>()});
    }
    if (j.contains("attributes"))
      s.attributes = j.at("attributes").get<std::map<std::string, std::string>>();
    if (j.contains("image")) s.image_path = j.at("image").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("scene JSON: ") + e.what(), 0);
  }
  if (s.graph.objects.empty()) throw ParseError("scene has no objects", 0);
  if (s.boxes.size() != s.graph.objects.size())
    throw ParseError("box count does not match object count", 0);
  return s;
}

}  // namespace migs
