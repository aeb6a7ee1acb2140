#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "migs/autograd.hpp"
#include "migs/errors.hpp"
#include "migs/nn_ops.hpp"
#include "migs/rng.hpp"
#include "migs/tensor.hpp"

namespace migs {

// Frozen random conv pyramid used both as the perceptual-loss feature space
// and as the embedding front-end for FID/KID/PRD.  Weights depend only on
// (seed, embed_dim); the fingerprint is hashed from the double-precision
// weight stream before casting, so float and double instances of the same
// configuration report the same fingerprint.
template <typename S>
class FeatureExtractor {
 public:
  static constexpr std::uint64_t kDefaultSeed = 90210;

  explicit FeatureExtractor(int embed_dim = 64,
                            std::uint64_t seed = kDefaultSeed)
      : embed_dim_(embed_dim), seed_(seed) {
    if (embed_dim < 4 || embed_dim % 4 != 0)
      throw ConfigError("FeatureExtractor: embed_dim must be a positive multiple of 4");
    const int chans[4] = {3, embed_dim / 4, embed_dim / 2, embed_dim};
    std::uint64_t fp = fnv1a64(&embed_dim_, sizeof(embed_dim_));
    RngStream rng(derive_seed(seed, "feature-extractor"));
    for (int l = 0; l < 3; ++l) {
      const int ci = chans[l], co = chans[l + 1];
      const double wscale = std::sqrt(2.0 / (ci * 9));
      weights_[l] = Tensor<S>({co, ci, 3, 3});
      for (std::int64_t i = 0; i < weights_[l].numel(); ++i) {
        const double g = rng.normal() * wscale;
        fp = fnv1a64(&g, sizeof(g), fp);
        weights_[l].data()[i] = static_cast<S>(g);
      }
      biases_[l] = Tensor<S>({co});
      for (std::int64_t i = 0; i < biases_[l].numel(); ++i) {
        const double g = rng.normal() * 0.1;
        fp = fnv1a64(&g, sizeof(g), fp);
        biases_[l].data()[i] = static_cast<S>(g);
      }
    }
    fingerprint_ = fp;
  }

  int embed_dim() const { return embed_dim_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t fingerprint() const { return fingerprint_; }
  std::string fingerprint_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fingerprint_));
    return std::string(buf);
  }
  const Tensor<S>& weight(int layer) const { return weights_.at(layer); }
  const Tensor<S>& bias(int layer) const { return biases_.at(layer); }

 private:
  int embed_dim_;
  std::uint64_t seed_;
  std::array<Tensor<S>, 3> weights_;
  std::array<Tensor<S>, 3> biases_;
  std::uint64_t fingerprint_ = 0;
};

struct FeaturePyramid {
  std::vector<Var> levels;  // post-activation maps, coarser with depth
  Var embedding = kNoVar;   // [N, embed_dim]
};

template <typename S>
FeaturePyramid features_forward(Tape<S>& t, const FeatureExtractor<S>& ex,
                                Var x) {
  const Tensor<S>& vx = t.val(x);
  if (vx.ndim() != 4 || vx.dim(1) != 3)
    throw ContractError("features_forward: input must be [N,3,H,W]");
  if (vx.dim(2) % 4 != 0 || vx.dim(3) % 4 != 0)
    throw ContractError("features_forward: H and W must be multiples of 4");
  FeaturePyramid out;
  Var h = x;
  for (int l = 0; l < 3; ++l) {
    if (l > 0) h = avg_pool(t, h, 2);
    h = conv2d(t, h, t.constant(ex.weight(l)), t.constant(ex.bias(l)), 1, 1);
    h = leaky_relu(t, h, S(0.2));
    out.levels.push_back(h);
  }
  out.embedding = mean_hw(t, h);
  return out;
}

// Batch already packed as [N,3,H,W]; values expected in [0,1].
template <typename S>
Tensor<S> extract_features_nchw(const Tensor<S>& batch,
                                const FeatureExtractor<S>& ex) {
  if (batch.ndim() != 4 || batch.dim(0) < 1)
    throw ContractError("extract_features: empty input");
  for (std::int64_t i = 0; i < batch.numel(); ++i) {
    const S v = batch.data()[i];
    if (!(v >= S(-1e-6) && v <= S(1) + S(1e-6)))
      throw ContractError("extract_features: pixel values must lie in [0,1]");
  }
  Tape<S> t;
  const FeaturePyramid pyr = features_forward(t, ex, t.constant(batch));
  return t.val(pyr.embedding);
}

// Dataset-layout images, each [H,W,3] in [0,1]; returns [N, embed_dim].
template <typename S>
Tensor<S> extract_features(const std::vector<Tensor<S>>& images,
                           const FeatureExtractor<S>& ex) {
  if (images.empty()) throw ContractError("extract_features: empty input");
  const Tensor<S>& first = images.front();
  if (first.ndim() != 3 || first.dim(2) != 3)
    throw ContractError("extract_features: images must be [H,W,3]");
  const int H = first.dim(0), W = first.dim(1);
  Tensor<S> batch({static_cast<int>(images.size()), 3, H, W});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Tensor<S>& img = images[n];
    if (img.ndim() != 3 || img.dim(0) != H || img.dim(1) != W ||
        img.dim(2) != 3)
      throw ContractError("extract_features: inconsistent image shapes");
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c)
          batch.at(static_cast<int>(n), c, y, x) = img.at(y, x, c);
  }
  return extract_features_nchw(batch, ex);
}

}  // namespace migs
