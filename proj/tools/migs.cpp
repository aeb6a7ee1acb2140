#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "migs/config.hpp"
#include "migs/meta.hpp"
#include "migs/metrics.hpp"
#include "migs/synthdata.hpp"

namespace fs = std::filesystem;

namespace {

struct Args {
  std::map<std::string, std::string> flags;
  bool has(const std::string& k) const { return flags.count(k) != 0; }
  const std::string& get(const std::string& k) const {
    auto it = flags.find(k);
    if (it == flags.end())
      throw migs::ConfigError("missing required flag --" + k);
    return it->second;
  }
  std::string get_or(const std::string& k, const std::string& dflt) const {
    auto it = flags.find(k);
    return it == flags.end() ? dflt : it->second;
  }
};

Args parse_args(int argc, char** argv, int first) {
  Args a;
  for (int i = first; i < argc; ++i) {
    std::string key = argv[i];
    if (key.rfind("--", 0) != 0)
      throw migs::ConfigError("unexpected argument: " + key);
    key = key.substr(2);
    if (key == "resume") {
      a.flags[key] = "1";
      continue;
    }
    if (i + 1 >= argc) throw migs::ConfigError("flag --" + key + " needs a value");
    a.flags[key] = argv[++i];
  }
  return a;
}

std::string read_config_text(const std::string& path) {
  try {
    return migs::read_text_file(path);
  } catch (const migs::IoError&) {
    throw migs::ConfigError("cannot read config file: " + path);
  }
}

std::vector<int> parse_shots_flag(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    try {
      out.push_back(std::stoi(s.substr(pos, next - pos)));
    } catch (const std::exception&) {
      throw migs::ConfigError("bad --shots value: " + s);
    }
    pos = next + 1;
  }
  if (out.empty()) throw migs::ConfigError("--shots list is empty");
  return out;
}

std::uint64_t parse_seed_flag(const std::string& s) {
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw migs::ConfigError("bad --seed value: " + s);
  }
}

int worker_count(std::size_t cells) {
  unsigned n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("MIGS_NUM_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(v));
    } catch (const std::exception&) {
      throw migs::ConfigError("MIGS_NUM_WORKERS must be a positive integer");
    }
  }
  return static_cast<int>(std::min<std::size_t>(n, cells));
}

// ---------------------------------------------------------------------------
// shared loading helpers
// ---------------------------------------------------------------------------

struct LoadedConfig {
  migs::ExperimentConfig cfg;
  std::string text;  // raw bytes, for the run record
};

LoadedConfig load_config(const Args& a) {
  LoadedConfig lc;
  lc.text = read_config_text(a.get("config"));
  lc.cfg = migs::parse_experiment_config(lc.text);
  return lc;
}

std::string dataset_dir(const Args& a, const migs::ExperimentConfig& cfg) {
  return a.get_or("data", (fs::path(cfg.out_dir) / "dataset").string());
}

migs::TrainContext<float> make_context(const migs::ExperimentConfig& cfg,
                                       const migs::FeatureExtractor<float>& ex) {
  migs::TrainContext<float> ctx;
  ctx.model = cfg.model;
  ctx.weights = cfg.weights;
  ctx.options = cfg.options;
  ctx.extractor = &ex;
  return ctx;
}

migs::ScenePool<float> make_pool(const std::vector<migs::AnnotatedScene>& scenes,
                                 int image_size, std::size_t begin,
                                 std::size_t end) {
  std::vector<migs::SceneTensors<float>> t;
  t.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i)
    t.push_back(migs::prepare_scene<float>(scenes[i], image_size, image_size));
  return migs::ScenePool<float>(std::move(t));
}

migs::ModelParams<float> load_model_checkpoint(const std::string& path,
                                               const migs::ExperimentConfig& cfg,
                                               std::uint64_t expected_hash,
                                               migs::CheckpointMeta* meta_out) {
  migs::ModelParams<float> model = migs::init_model<float>(cfg.model, 0);
  migs::CheckpointMeta meta = migs::load_checkpoint(path, model, cfg.model);
  if (meta.config_hash != expected_hash)
    throw migs::ConfigError(
        "checkpoint " + path +
        " was produced under a different configuration (hash mismatch)");
  if (meta_out) *meta_out = meta;
  return model;
}

void finish_record(migs::RunRecord rec, const std::string& out_dir) {
  rec.finished_at = migs::utc_timestamp();
  migs::write_text_file((fs::path(out_dir) / "run_record.json").string(),
                        migs::run_record_to_json(rec));
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const Args& a) {
  const LoadedConfig lc = load_config(a);
  const std::string out = a.get_or("out", dataset_dir(a, lc.cfg));
  migs::generate_dataset(lc.cfg.dataset, out);
  std::printf("dataset written to %s (%d tasks, %d scenes each)\n", out.c_str(),
              static_cast<int>(lc.cfg.dataset.num_train_tasks +
                               lc.cfg.dataset.num_test_tasks),
              lc.cfg.dataset.scenes_per_task);
  return 0;
}

int run_training(const Args& a, bool baseline) {
  const LoadedConfig lc = load_config(a);
  const migs::ExperimentConfig& cfg = lc.cfg;
  const std::string data = dataset_dir(a, cfg);
  const std::string out =
      a.get_or("out", (fs::path(cfg.out_dir) / (baseline ? "baseline" : "meta"))
                          .string());
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw migs::IoError("cannot create output directory: " + out);

  const migs::DatasetManifest manifest = migs::load_manifest(data);
  if (manifest.height != cfg.model.image_size ||
      manifest.width != cfg.model.image_size)
    throw migs::ConfigError("dataset resolution does not match model.image_size");

  std::vector<migs::ScenePool<float>> pools;
  if (baseline) {
    std::vector<migs::SceneTensors<float>> all;
    for (const std::string& id : manifest.train_task_ids) {
      const auto scenes = migs::load_task_scenes(data, manifest, id);
      for (const auto& s : scenes)
        all.push_back(
            migs::prepare_scene<float>(s, cfg.model.image_size, cfg.model.image_size));
    }
    pools.emplace_back(std::move(all));
  } else {
    for (const std::string& id : manifest.train_task_ids) {
      const auto scenes = migs::load_task_scenes(data, manifest, id);
      pools.push_back(
          make_pool(scenes, cfg.model.image_size, 0, scenes.size()));
    }
  }
  std::vector<migs::ScenePool<float>*> task_ptrs;
  for (auto& p : pools) task_ptrs.push_back(&p);

  const migs::FeatureExtractor<float> ex(cfg.eval.extractor_dim,
                                         cfg.eval.extractor_seed);
  const migs::TrainContext<float> ctx = make_context(cfg, ex);
  const char* label = baseline ? "baseline-train" : "meta-train";

  migs::ModelParams<float> model =
      migs::init_model<float>(cfg.model, migs::derive_seed(cfg.seed, "init"));
  migs::RngStream rng(migs::derive_seed(cfg.seed, label));
  std::uint64_t start = 0;

  const std::string latest = (fs::path(out) / "checkpoint_latest.ckpt").string();
  const std::string curve_path = (fs::path(out) / "curve.csv").string();
  bool fresh_curve = true;
  if (a.has("resume") && fs::exists(latest)) {
    migs::CheckpointMeta meta;
    model = load_model_checkpoint(latest, cfg, migs::config_hash(cfg), &meta);
    rng.deserialize(meta.rng_state);
    start = meta.outer_iteration;
    fresh_curve = !fs::exists(curve_path);
    std::printf("%s: resuming from outer iteration %llu\n", label,
                static_cast<unsigned long long>(start));
  }

  migs::RunRecord rec = migs::make_run_record(label, lc.text, cfg);

  std::ofstream curve(curve_path, fresh_curve ? std::ios::trunc : std::ios::app);
  if (!curve) throw migs::IoError("cannot open " + curve_path);
  if (fresh_curve)
    curve << "iteration,total_g,total_d,box,gan_global_g,gan_global_d,"
             "gan_obj_g,gan_obj_d,aux,aux_d,perceptual,image_l1\n";
  const migs::IterationFn on_iteration = [&curve](std::uint64_t it,
                                                  const migs::LossBreakdown& b) {
    char line[512];
    std::snprintf(line, sizeof(line),
                  "%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<unsigned long long>(it), b.total_g, b.total_d,
                  b.box, b.gan_global_g, b.gan_global_d, b.gan_obj_g,
                  b.gan_obj_d, b.aux, b.aux_d, b.perceptual, b.image_l1);
    curve << line;
  };

  const std::string cfg_json = migs::canonical_config_json(cfg);
  const std::uint64_t cfg_hash = migs::config_hash(cfg);
  const migs::CheckpointFn on_checkpoint =
      [&](std::uint64_t iteration, const std::string& rng_state) {
        migs::CheckpointMeta meta;
        meta.config_hash = cfg_hash;
        meta.outer_iteration = iteration;
        meta.rng_state = rng_state;
        meta.config_json = cfg_json;
        const std::string name =
            "checkpoint_" + std::to_string(iteration) + ".ckpt";
        const std::string path = (fs::path(out) / name).string();
        migs::save_checkpoint(path, model, cfg.model, meta);
        migs::save_checkpoint(latest, model, cfg.model, meta);
        rec.checkpoints.push_back(path);
        curve.flush();
      };

  if (baseline)
    migs::baseline_train(ctx, model, pools[0], cfg.inner, cfg.outer, rng, start,
                         on_checkpoint, &std::cout, on_iteration);
  else
    migs::meta_train(ctx, model, task_ptrs, cfg.inner, cfg.outer, rng, start,
                     on_checkpoint, &std::cout, on_iteration);
  finish_record(std::move(rec), out);
  std::printf("%s: finished at iteration %d; checkpoints in %s\n", label,
              cfg.outer.iterations, out.c_str());
  return 0;
}

struct EvalCell {
  std::string method;
  std::string task_id;
  int shots = 0;
};

int cmd_finetune_eval(const Args& a) {
  const LoadedConfig lc = load_config(a);
  migs::ExperimentConfig cfg = lc.cfg;
  // Hash of the config as trained; --shots narrows the eval protocol without
  // changing the experiment identity.
  const std::uint64_t base_hash = migs::config_hash(cfg);
  if (a.has("shots")) {
    cfg.eval.shots = parse_shots_flag(a.get("shots"));
    cfg.validate();
  }
  const std::string data = dataset_dir(a, cfg);
  const std::string out =
      a.get_or("out", (fs::path(cfg.out_dir) / "eval").string());
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw migs::IoError("cannot create output directory: " + out);

  std::vector<std::pair<std::string, std::string>> checkpoints;
  checkpoints.emplace_back("migs", a.get("checkpoint"));
  if (a.has("baseline-checkpoint"))
    checkpoints.emplace_back("baseline", a.get("baseline-checkpoint"));

  std::map<std::string, migs::ModelParams<float>> models;
  for (const auto& [method, path] : checkpoints)
    models.emplace(method, load_model_checkpoint(path, cfg, base_hash, nullptr));

  const migs::DatasetManifest manifest = migs::load_manifest(data);
  if (manifest.height != cfg.model.image_size ||
      manifest.width != cfg.model.image_size)
    throw migs::ConfigError("dataset resolution does not match model.image_size");

  const int test_count = cfg.eval.test_scenes_per_task;
  const int max_shots =
      *std::max_element(cfg.eval.shots.begin(), cfg.eval.shots.end());

  struct TaskData {
    std::string id;
    std::vector<migs::AnnotatedScene> train_scenes;
    std::vector<migs::AnnotatedScene> test_scenes;
  };
  std::vector<TaskData> tasks;
  for (const std::string& id : manifest.test_task_ids) {
    TaskData td;
    td.id = id;
    std::vector<migs::AnnotatedScene> scenes =
        migs::load_task_scenes(data, manifest, id);
    if (static_cast<int>(scenes.size()) < max_shots + test_count)
      throw migs::ConfigError("task " + id + " has too few scenes for " +
                              std::to_string(max_shots) + " shots + " +
                              std::to_string(test_count) + " test scenes");
    const std::size_t split = scenes.size() - static_cast<std::size_t>(test_count);
    td.test_scenes.assign(scenes.begin() + static_cast<std::ptrdiff_t>(split),
                          scenes.end());
    scenes.resize(split);
    td.train_scenes = std::move(scenes);
    tasks.push_back(std::move(td));
  }

  const migs::FeatureExtractor<float> ex(cfg.eval.extractor_dim,
                                         cfg.eval.extractor_seed);
  const migs::TrainContext<float> ctx = make_context(cfg, ex);

  std::vector<EvalCell> cells;
  for (const auto& [method, path] : checkpoints)
    for (const TaskData& td : tasks)
      for (int s : cfg.eval.shots) cells.push_back({method, td.id, s});

  std::vector<migs::MetricRow> rows(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  const auto run_cell = [&](std::size_t ci) {
    const EvalCell& cell = cells[ci];
    const TaskData* td = nullptr;
    for (const TaskData& t : tasks)
      if (t.id == cell.task_id) td = &t;
    migs::ScenePool<float> pool = make_pool(
        td->train_scenes, cfg.model.image_size, 0, td->train_scenes.size());
    migs::RngStream frng(migs::derive_seed(
        cfg.seed, "finetune-" + cell.method + "-" + cell.task_id + "-" +
                      std::to_string(cell.shots)));
    migs::AdaptResult<float> adapted =
        migs::finetune(ctx, models.at(cell.method), pool, cell.shots,
                       cfg.eval.finetune_steps, cfg.inner, frng);
    std::vector<std::string> shot_ids;
    for (int idx : pool.access_log()) {
      const std::string& p =
          td->train_scenes[static_cast<std::size_t>(idx)].image_path;
      if (std::find(shot_ids.begin(), shot_ids.end(), p) == shot_ids.end())
        shot_ids.push_back(p);
    }
    migs::RngStream erng(migs::derive_seed(
        cfg.seed, "eval-" + cell.method + "-" + cell.task_id + "-" +
                      std::to_string(cell.shots)));
    migs::MetricRow row =
        migs::evaluate_task(adapted.params, cfg.model, td->test_scenes,
                            shot_ids, ex, erng, cfg.eval.num_clusters);
    row.task_id = cell.task_id;
    row.method = cell.method;
    row.shots = cell.shots;
    rows[ci] = std::move(row);
  };
  const auto worker = [&] {
    for (;;) {
      const std::size_t ci = next.fetch_add(1);
      if (ci >= cells.size()) return;
      try {
        run_cell(ci);
      } catch (const std::exception& e) {
        errors[ci] = e.what();
      }
    }
  };
  const int workers = worker_count(cells.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!errors[i].empty())
      throw migs::NumericError("cell (" + cells[i].method + ", " +
                               cells[i].task_id + ", " +
                               std::to_string(cells[i].shots) +
                               ") failed: " + errors[i]);

  migs::MetricsReport report;
  report.extractor_fingerprint = ex.fingerprint_hex();
  report.extractor_dim = ex.embed_dim();
  report.config_hash = migs::hash_hex(base_hash);
  report.rows = std::move(rows);

  migs::RunRecord rec = migs::make_run_record("finetune-eval", lc.text, cfg);
  for (const auto& [method, path] : checkpoints) rec.checkpoints.push_back(path);

  const std::string json_path = (fs::path(out) / "report.json").string();
  const std::string csv_path = (fs::path(out) / "report.csv").string();
  migs::write_text_file(json_path, migs::report_to_json(report));
  migs::write_text_file(csv_path, migs::report_to_csv(report));

  // Table-1-style comparison: one row per method x decoder, metric means
  // over the test tasks at each shot count.
  std::string table = "method,decoder,shots,fid,kid,f8,f1_8,tasks\n";
  for (const auto& [method, path] : checkpoints) {
    for (int s : cfg.eval.shots) {
      double sfid = 0, skid = 0, sf8 = 0, sf18 = 0;
      int n = 0;
      for (const migs::MetricRow& r : report.rows)
        if (r.method == method && r.shots == s) {
          sfid += r.fid;
          skid += r.kid;
          sf8 += r.f8;
          sf18 += r.f1_8;
          ++n;
        }
      char line[256];
      std::snprintf(line, sizeof(line), "%s,%s,%d,%.9g,%.9g,%.9g,%.9g,%d\n",
                    method.c_str(), migs::decoder_name(cfg.model.decoder).c_str(),
                    s, sfid / n, skid / n, sf8 / n, sf18 / n, n);
      table += line;
    }
  }
  const std::string table_path = (fs::path(out) / "comparison.csv").string();
  migs::write_text_file(table_path, table);

  rec.reports = {json_path, csv_path, table_path};
  finish_record(std::move(rec), out);
  std::printf("finetune-eval: %zu cells evaluated; reports in %s\n",
              cells.size(), out.c_str());
  return 0;
}

migs::SceneGraph parse_graph_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw migs::ParseError(std::string("graph JSON: ") + e.what(), e.byte);
  }
  migs::SceneGraph g;
  try {
    g.objects = j.at("objects").get<std::vector<int>>();
    if (j.contains("edges"))
      for (const auto& e : j.at("edges")) {
        if (!e.is_array() || e.size() != 3)
          throw migs::ParseError(
              "edge must be a [subject, predicate, object] triplet", 0);
        g.edges.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<int>()});
      }
  } catch (const nlohmann::json::exception& e) {
    throw migs::ParseError(std::string("graph JSON: ") + e.what(), 0);
  }
  if (g.objects.empty()) throw migs::ParseError("graph has no objects", 0);
  return g;
}

int cmd_generate(const Args& a) {
  const std::string ckpt_path = a.get("checkpoint");
  const std::string blob = migs::read_binary_file(ckpt_path);
  const migs::CheckpointMeta meta = migs::peek_checkpoint_meta(blob);
  const migs::ExperimentConfig cfg =
      migs::parse_experiment_config(meta.config_json);
  migs::ModelParams<float> model = migs::init_model<float>(cfg.model, 0);
  migs::decode_checkpoint(blob, model, cfg.model);

  const migs::SceneGraph graph =
      parse_graph_json(migs::read_text_file(a.get("graph")));
  for (int obj : graph.objects)
    if (obj < 0 || obj >= cfg.model.num_objects)
      throw migs::ConfigError("object category " + std::to_string(obj) +
                              " is outside the model vocabulary [0, " +
                              std::to_string(cfg.model.num_objects) + ")");
  const int n = static_cast<int>(graph.objects.size());
  for (const migs::EdgeTriplet& e : graph.edges) {
    if (e.predicate < 0 || e.predicate >= cfg.model.num_predicates)
      throw migs::ConfigError("predicate " + std::to_string(e.predicate) +
                              " is outside the model vocabulary [0, " +
                              std::to_string(cfg.model.num_predicates) + ")");
    if (e.subject < 0 || e.subject >= n || e.object < 0 || e.object >= n)
      throw migs::ConfigError("edge endpoint out of range for " +
                              std::to_string(n) + " objects");
  }
  const std::uint64_t seed = parse_seed_flag(a.get_or("seed", "0"));
  const migs::Tensor<float> image =
      migs::generate(model, cfg.model, graph, cfg.model.image_size,
                     cfg.model.image_size, seed);
  const std::string out = a.get("out");
  if (const fs::path parent = fs::path(out).parent_path(); !parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
  }
  migs::write_png_rgb8(out, image);
  std::printf("generate: wrote %s (%dx%d)\n", out.c_str(), cfg.model.image_size,
              cfg.model.image_size);
  return 0;
}

int usage() {
  std::fprintf(stderr,
               "usage: migs <command> [flags]\n"
               "  gen-data       --config <json> [--out <dir>]\n"
               "  meta-train     --config <json> [--data <dir>] [--out <dir>] [--resume]\n"
               "  baseline-train --config <json> [--data <dir>] [--out <dir>] [--resume]\n"
               "  finetune-eval  --config <json> --checkpoint <ckpt>\n"
               "                 [--baseline-checkpoint <ckpt>] [--shots 5,10]\n"
               "                 [--data <dir>] [--out <dir>]\n"
               "  generate       --checkpoint <ckpt> --graph <json> [--seed <n>] --out <png>\n");
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  const std::string cmd = argv[1];
  try {
    const Args a = parse_args(argc, argv, 2);
    if (cmd == "gen-data") return cmd_gen_data(a);
    if (cmd == "meta-train") return run_training(a, false);
    if (cmd == "baseline-train") return run_training(a, true);
    if (cmd == "finetune-eval") return cmd_finetune_eval(a);
    if (cmd == "generate") return cmd_generate(a);
    std::fprintf(stderr, "unknown command: %s\n", cmd.c_str());
    return usage();
  } catch (const migs::VersionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const migs::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const migs::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {  // config, parse, contract
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
