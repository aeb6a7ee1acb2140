#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "migs/errors.hpp"
#include "migs/features.hpp"
#include "migs/pipeline.hpp"
#include "migs/rng.hpp"
#include "migs/scenegraph.hpp"

// Metric families over extracted feature matrices: FID, KID, and PRD
// F-scores. All internal arithmetic is double precision regardless of the
// feature scalar type.

namespace migs {

namespace detail {

template <typename S>
Eigen::MatrixXd feature_matrix(const Tensor<S>& x, const char* who) {
  if (x.ndim() != 2)
    throw ContractError(std::string(who) + ": features must be [N,d]");
  Eigen::MatrixXd m(x.dim(0), x.dim(1));
  for (int i = 0; i < x.dim(0); ++i)
    for (int j = 0; j < x.dim(1); ++j)
      m(i, j) = static_cast<double>(x.at(i, j));
  return m;
}

inline Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& x,
                                         const Eigen::RowVectorXd& mu) {
  const Eigen::MatrixXd c = x.rowwise() - mu;
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

// Symmetric PSD square root; negative eigenvalues are clamped at zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  Eigen::VectorXd w = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * w.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

template <typename S>
double fid(const Tensor<S>& x, const Tensor<S>& y) {
  const Eigen::MatrixXd X = detail::feature_matrix(x, "fid");
  const Eigen::MatrixXd Y = detail::feature_matrix(y, "fid");
  if (X.cols() != Y.cols()) throw ContractError("fid: feature dims differ");
  if (X.rows() < 2 || Y.rows() < 2)
    throw ContractError("fid: need at least 2 samples per side");
  static std::atomic<bool> warned{false};
  if ((X.rows() < X.cols() || Y.rows() < Y.cols()) && !warned.exchange(true))
    std::fprintf(stderr,
                 "fid: sample count below feature dimension; covariance "
                 "estimate is rank-deficient\n");
  const Eigen::RowVectorXd mx = X.colwise().mean(), my = Y.colwise().mean();
  const Eigen::MatrixXd sx = detail::sample_covariance(X, mx);
  const Eigen::MatrixXd sy = detail::sample_covariance(Y, my);
  const Eigen::MatrixXd a = detail::psd_sqrt(sx);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      Eigen::MatrixXd(0.5 * ((a * sy * a) + (a * sy * a).transpose())));
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double v =
      (mx - my).squaredNorm() + sx.trace() + sy.trace() - 2.0 * tr_sqrt;
  return v < 0.0 ? 0.0 : v;
}

struct KidEstimate {
  double mean = 0.0;
  double std_err = 0.0;  // over block estimates; 0 when only one block
  std::vector<double> block_values;
};

namespace detail {

// Polynomial-kernel unbiased MMD^2 between row blocks of X and Y.
inline double mmd2_unbiased(const Eigen::MatrixXd& X,
                            const Eigen::MatrixXd& Y) {
  const double d = static_cast<double>(X.cols());
  const auto kernel = [d](const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    return ((A * B.transpose() / d).array() + 1.0).cube().matrix();
  };
  const Eigen::MatrixXd kxx = kernel(X, X), kyy = kernel(Y, Y),
                        kxy = kernel(X, Y);
  const double n = static_cast<double>(X.rows());
  const double m = static_cast<double>(Y.rows());
  return (kxx.sum() - kxx.trace()) / (n * (n - 1.0)) +
         (kyy.sum() - kyy.trace()) / (m * (m - 1.0)) -
         2.0 * kxy.sum() / (n * m);
}

}  // namespace detail

template <typename S>
KidEstimate kid_estimate(const Tensor<S>& x, const Tensor<S>& y,
                         int block_size = 100) {
  if (block_size < 2) throw ConfigError("kid: block_size must be >= 2");
  const Eigen::MatrixXd X = detail::feature_matrix(x, "kid");
  const Eigen::MatrixXd Y = detail::feature_matrix(y, "kid");
  if (X.cols() != Y.cols()) throw ContractError("kid: feature dims differ");
  const std::int64_t n = X.rows(), m = Y.rows();
  if (n < 2 || m < 2) throw ContractError("kid: need at least 2 samples per side");
  const std::int64_t want = (std::max(n, m) + block_size - 1) / block_size;
  const std::int64_t nb = std::max<std::int64_t>(1, std::min({want, n / 2, m / 2}));
  KidEstimate e;
  for (std::int64_t i = 0; i < nb; ++i) {
    const std::int64_t xs = i * n / nb, xe = (i + 1) * n / nb;
    const std::int64_t ys = i * m / nb, ye = (i + 1) * m / nb;
    e.block_values.push_back(detail::mmd2_unbiased(
        X.middleRows(xs, xe - xs), Y.middleRows(ys, ye - ys)));
  }
  for (double v : e.block_values) e.mean += v;
  e.mean /= static_cast<double>(nb);
  if (nb > 1) {
    double ss = 0.0;
    for (double v : e.block_values) ss += (v - e.mean) * (v - e.mean);
    e.std_err = std::sqrt(ss / static_cast<double>(nb - 1)) /
                std::sqrt(static_cast<double>(nb));
  }
  return e;
}

template <typename S>
double kid(const Tensor<S>& x, const Tensor<S>& y, int block_size = 100) {
  return kid_estimate(x, y, block_size).mean;
}

// PRD curve sweep over the two cluster-frequency histograms; returns
// (F_8, F_{1/8}) — the recall-like and precision-like summary scores.
inline std::pair<double, double> prd_from_histograms(
    const std::vector<double>& eval_dist, const std::vector<double>& ref_dist,
    int num_angles = 1001) {
  if (eval_dist.size() != ref_dist.size() || eval_dist.empty())
    throw ContractError("prd: histograms must be non-empty and equal length");
  if (num_angles < 2) throw ConfigError("prd: num_angles must be >= 2");
  constexpr double kEps = 1e-10;
  constexpr double kPi = 3.14159265358979323846;
  const double step = (kPi / 2.0 - 2.0 * kEps) / (num_angles - 1);
  const auto f_beta = [](double beta, double p, double r) {
    const double den = beta * beta * p + r;
    return den > 0.0 ? (1.0 + beta * beta) * p * r / den : 0.0;
  };
  double f8 = 0.0, f18 = 0.0;
  for (int i = 0; i < num_angles; ++i) {
    const double slope = std::tan(kEps + step * i);
    double precision = 0.0;
    for (std::size_t j = 0; j < ref_dist.size(); ++j)
      precision += std::min(slope * ref_dist[j], eval_dist[j]);
    const double recall = precision / slope;
    f8 = std::max(f8, f_beta(8.0, precision, recall));
    f18 = std::max(f18, f_beta(0.125, precision, recall));
  }
  return {f8, f18};
}

namespace detail {

// Lloyd's algorithm with k-means++ seeding and `restarts` independent
// starts; deterministic for a given stream. Returns labels of the best run.
inline std::vector<int> kmeans_labels(const Eigen::MatrixXd& data, int k,
                                      int restarts, int max_iters,
                                      RngStream& rng) {
  const std::int64_t n = data.rows();
  std::vector<int> best;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Eigen::MatrixXd centers(k, data.cols());
    centers.row(0) = data.row(rng.uniform_int(0, n - 1));
    Eigen::VectorXd d2 =
        (data.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
      const double total = d2.sum();
      std::int64_t pick = n - 1;
      if (total > 0.0) {
        const double target = rng.uniform(0.0, total);
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          acc += d2[i];
          if (acc >= target) { pick = i; break; }
        }
      } else {
        pick = rng.uniform_int(0, n - 1);
      }
      centers.row(c) = data.row(pick);
      d2 = d2.cwiseMin(
          (data.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }
    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < max_iters; ++it) {
      bool changed = false;
      for (std::int64_t i = 0; i < n; ++i) {
        int arg = 0;
        double best_d = (data.row(i) - centers.row(0)).squaredNorm();
        for (int c = 1; c < k; ++c) {
          const double d = (data.row(i) - centers.row(c)).squaredNorm();
          if (d < best_d) { best_d = d; arg = c; }
        }
        if (labels[static_cast<std::size_t>(i)] != arg) {
          labels[static_cast<std::size_t>(i)] = arg;
          changed = true;
        }
      }
      if (!changed && it > 0) break;
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, data.cols());
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
      for (std::int64_t i = 0; i < n; ++i) {
        sums.row(labels[static_cast<std::size_t>(i)]) += data.row(i);
        counts[labels[static_cast<std::size_t>(i)]] += 1.0;
      }
      for (int c = 0; c < k; ++c)  // empty clusters keep their center
        if (counts[c] > 0.0) centers.row(c) = sums.row(c) / counts[c];
    }
    double inertia = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      inertia +=
          (data.row(i) - centers.row(labels[static_cast<std::size_t>(i)]))
              .squaredNorm();
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best = labels;
    }
  }
  return best;
}

// Canonical operand order so that swapping the two feature sets reproduces
// the identical clustering (exact precision/recall duality).
inline bool lex_after(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) return a.rows() > b.rows();
  if (a.cols() != b.cols()) return a.cols() > b.cols();
  for (std::int64_t i = 0; i < a.rows(); ++i)
    for (std::int64_t j = 0; j < a.cols(); ++j) {
      if (a(i, j) < b(i, j)) return false;
      if (a(i, j) > b(i, j)) return true;
    }
  return false;
}

}  // namespace detail

inline constexpr std::uint64_t kPrdSeed = 0x70726433u;  // fixed protocol seed

template <typename S>
std::pair<double, double> prd_f_scores(const Tensor<S>& eval_x,
                                       const Tensor<S>& ref_y,
                                       int num_clusters = 20,
                                       int num_angles = 1001,
                                       std::uint64_t seed = kPrdSeed) {
  if (num_clusters < 1) throw ConfigError("prd: num_clusters must be >= 1");
  const Eigen::MatrixXd E = detail::feature_matrix(eval_x, "prd");
  const Eigen::MatrixXd R = detail::feature_matrix(ref_y, "prd");
  if (E.cols() != R.cols()) throw ContractError("prd: feature dims differ");
  if (E.rows() < num_clusters || R.rows() < num_clusters)
    throw ContractError("prd: need at least num_clusters samples per side");
  const bool swapped = detail::lex_after(E, R);
  const Eigen::MatrixXd& first = swapped ? R : E;
  const Eigen::MatrixXd& second = swapped ? E : R;
  Eigen::MatrixXd data(first.rows() + second.rows(), first.cols());
  data << first, second;
  RngStream rng(derive_seed(seed, "prd-kmeans"));
  const std::vector<int> labels =
      detail::kmeans_labels(data, num_clusters, 10, 100, rng);
  std::vector<double> eval_hist(static_cast<std::size_t>(num_clusters), 0.0);
  std::vector<double> ref_hist(static_cast<std::size_t>(num_clusters), 0.0);
  const std::int64_t nf = first.rows();
  for (std::int64_t i = 0; i < data.rows(); ++i) {
    const bool in_first = i < nf;
    const bool is_eval = in_first != swapped;
    (is_eval ? eval_hist : ref_hist)[static_cast<std::size_t>(
        labels[static_cast<std::size_t>(i)])] += 1.0;
  }
  for (double& v : eval_hist) v /= static_cast<double>(E.rows());
  for (double& v : ref_hist) v /= static_cast<double>(R.rows());
  return prd_from_histograms(eval_hist, ref_hist, num_angles);
}

// ---------------------------------------------------------------------------
// per-task evaluation and report tables
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string task_id;
  std::string method;  // "migs" | "baseline"
  int shots = 0;
  double fid = 0.0, kid = 0.0, f8 = 0.0, f1_8 = 0.0;
  int n_real = 0, n_fake = 0;
};

template <typename S>
using SceneGenerator = std::function<Tensor<S>(const SceneGraph&, std::uint64_t)>;

template <typename S>
MetricRow evaluate_task(const SceneGenerator<S>& gen,
                        const std::vector<AnnotatedScene>& test_split,
                        const std::vector<std::string>& shot_ids,
                        const FeatureExtractor<S>& ex, RngStream& rng,
                        int num_clusters = 20) {
  if (!gen) throw ContractError("evaluate_task: null generator");
  if (test_split.empty())
    throw ContractError("evaluate_task: empty test split");
  const std::set<std::string> shots(shot_ids.begin(), shot_ids.end());
  for (const AnnotatedScene& s : test_split)
    if (shots.count(s.image_path))
      throw ContractError(
          "evaluate_task: test split overlaps fine-tuning shots: " +
          s.image_path);
  std::vector<Tensor<S>> real, fake;
  real.reserve(test_split.size());
  fake.reserve(test_split.size());
  for (const AnnotatedScene& s : test_split) {
    if (s.image.ndim() != 3 || s.image.dim(2) != 3)
      throw ContractError("evaluate_task: scene image missing or not [H,W,3]");
    Tensor<S> r(s.image.shape());
    for (std::int64_t i = 0; i < r.numel(); ++i)
      r.data()[i] = static_cast<S>(s.image.data()[i]);
    real.push_back(std::move(r));
    const std::uint64_t seed = static_cast<std::uint64_t>(
        rng.uniform_int(0, std::numeric_limits<std::int64_t>::max()));
    fake.push_back(gen(s.graph, seed));
  }
  const Tensor<S> fr = extract_features(real, ex);
  const Tensor<S> ff = extract_features(fake, ex);
  MetricRow row;
  row.n_real = static_cast<int>(real.size());
  row.n_fake = static_cast<int>(fake.size());
  row.fid = fid(ff, fr);
  row.kid = kid(ff, fr);
  const auto [f8, f18] = prd_f_scores(ff, fr, num_clusters);
  row.f8 = f8;
  row.f1_8 = f18;
  return row;
}

template <typename S>
MetricRow evaluate_task(ModelParams<S>& model, const ModelConfig& cfg,
                        const std::vector<AnnotatedScene>& test_split,
                        const std::vector<std::string>& shot_ids,
                        const FeatureExtractor<S>& ex, RngStream& rng,
                        int num_clusters = 20) {
  SceneGenerator<S> g = [&model, &cfg](const SceneGraph& sg,
                                       std::uint64_t seed) {
    return generate(model, cfg, sg, cfg.image_size, cfg.image_size, seed);
  };
  return evaluate_task(g, test_split, shot_ids, ex, rng, num_clusters);
}

struct MetricsReport {
  std::string extractor_fingerprint;
  int extractor_dim = 0;
  std::string config_hash;  // hex of the experiment config hash
  std::vector<MetricRow> rows;
};

inline std::string report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["extractor"]["fingerprint"] = r.extractor_fingerprint;
  j["extractor"]["embed_dim"] = r.extractor_dim;
  j["config_hash"] = r.config_hash;
  j["tasks"] = nlohmann::json::object();
  for (const MetricRow& row : r.rows) {
    nlohmann::json& cell =
        j["tasks"][row.task_id][row.method][std::to_string(row.shots)];
    cell["fid"] = row.fid;
    cell["kid"] = row.kid;
    cell["f8"] = row.f8;
    cell["f1_8"] = row.f1_8;
    cell["n_real"] = row.n_real;
    cell["n_fake"] = row.n_fake;
  }
  return j.dump(2) + "\n";
}

inline std::string report_to_csv(const MetricsReport& r) {
  std::string out = "task_id,method,shots,fid,kid,f8,f1_8,n_real,n_fake\n";
  char buf[256];
  for (const MetricRow& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.9g,%.9g,%.9g,%.9g,%d,%d\n",
                  row.task_id.c_str(), row.method.c_str(), row.shots, row.fid,
                  row.kid, row.f8, row.f1_8, row.n_real, row.n_fake);
    out += buf;
  }
  return out;
}

}  // namespace migs
