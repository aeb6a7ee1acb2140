#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "migs/nn_ops.hpp"
#include "oracles.hpp"

using migs::Tape;
using migs::Tensor;
using migs::Var;
using oracle::fd_max_rel_err;
using oracle::fill_uniform;
using oracle::make_proj;
using oracle::project;

namespace {

const std::vector<std::uint64_t> kSeeds{21, 22, 23, 24, 25};
constexpr double kTol = 1e-4;

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                          const Tensor<double>* bias, int stride, int pad) {
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), K = w.dim(2);
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> out({N, Cout, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = bias ? (*bias)[co] : 0.0;
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int y = oy * stride - pad + ky, xx = ox * stride - pad + kx;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                acc += x.at(n, ci, y, xx) * w.at(co, ci, ky, kx);
              }
          out.at(n, co, oy, ox) = acc;
        }
  return out;
}

// Point-sampled layout reference: for every pixel and object, test box
// membership and bilinearly sample the mask, accumulating feature * mask.
Tensor<double> naive_layout(const Tensor<double>& feats, const Tensor<double>& boxes,
                            const Tensor<double>& masks, int H, int W) {
  const int N = feats.dim(0), D = feats.dim(1), M = masks.dim(1);
  Tensor<double> out({D, H, W}, 0.0);
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px) {
      const double v = (py + 0.5) / H, u = (px + 0.5) / W;
      for (int i = 0; i < N; ++i) {
        const double x0 = boxes.at(i, 0), y0 = boxes.at(i, 1);
        const double x1 = boxes.at(i, 2), y1 = boxes.at(i, 3);
        if (u < x0 || u > x1 || v < y0 || v > y1) continue;
        double fy = (v - y0) / (y1 - y0) * M - 0.5;
        double fx = (u - x0) / (x1 - x0) * M - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(M - 1));
        fx = std::min(std::max(fx, 0.0), static_cast<double>(M - 1));
        const int y_lo = std::min(static_cast<int>(fy), M - 1);
        const int x_lo = std::min(static_cast<int>(fx), M - 1);
        const int y_hi = std::min(y_lo + 1, M - 1), x_hi = std::min(x_lo + 1, M - 1);
        const double ay = fy - y_lo, ax = fx - x_lo;
        const double m = (1 - ay) * ((1 - ax) * masks.at(i, y_lo, x_lo) +
                                     ax * masks.at(i, y_lo, x_hi)) +
                         ay * ((1 - ax) * masks.at(i, y_hi, x_lo) +
                               ax * masks.at(i, y_hi, x_hi));
        for (int c = 0; c < D; ++c) out.at(c, py, px) += feats.at(i, c) * m;
      }
    }
  return out;
}

Tensor<double> naive_crop(const Tensor<double>& img, const Tensor<double>& boxes, int c) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2), N = boxes.dim(0);
  Tensor<double> out({N, C, c, c});
  for (int n = 0; n < N; ++n)
    for (int oy = 0; oy < c; ++oy)
      for (int ox = 0; ox < c; ++ox) {
        const double v = boxes.at(n, 1) + (oy + 0.5) / c * (boxes.at(n, 3) - boxes.at(n, 1));
        const double u = boxes.at(n, 0) + (ox + 0.5) / c * (boxes.at(n, 2) - boxes.at(n, 0));
        double fy = std::min(std::max(v * H - 0.5, 0.0), static_cast<double>(H - 1));
        double fx = std::min(std::max(u * W - 0.5, 0.0), static_cast<double>(W - 1));
        const int y_lo = std::min(static_cast<int>(fy), H - 1);
        const int x_lo = std::min(static_cast<int>(fx), W - 1);
        const int y_hi = std::min(y_lo + 1, H - 1), x_hi = std::min(x_lo + 1, W - 1);
        const double ay = fy - y_lo, ax = fx - x_lo;
        for (int ch = 0; ch < C; ++ch)
          out.at(n, ch, oy, ox) =
              (1 - ay) * ((1 - ax) * img.at(ch, y_lo, x_lo) + ax * img.at(ch, y_lo, x_hi)) +
              ay * ((1 - ax) * img.at(ch, y_hi, x_lo) + ax * img.at(ch, y_hi, x_hi));
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches the naive oracle", "[nnops]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> x({2, 3, 6, 6}), w({4, 3, 3, 3}), b({4});
    fill_uniform(x, rng, -1, 1);
    fill_uniform(w, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);

    for (auto [stride, pad] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 0}}) {
      Tape<double> t;
      Var xv = t.leaf(x, false), wv = t.leaf(w, false), bv = t.leaf(b, false);
      const Tensor<double>& got = t.val(migs::conv2d(t, xv, wv, bv, stride, pad));
      const Tensor<double> want = naive_conv(x, w, &b, stride, pad);
      REQUIRE(got.same_shape(want));
      for (std::int64_t i = 0; i < got.numel(); ++i)
        REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-10));
    }

    // 1x1 kernel degenerates to a per-pixel linear map
    Tensor<double> w1({2, 3, 1, 1});
    fill_uniform(w1, rng, -1, 1);
    Tape<double> t;
    const Tensor<double>& got =
        t.val(migs::conv2d(t, t.leaf(x, false), t.leaf(w1, false), migs::kNoVar, 1, 0));
    const Tensor<double> want = naive_conv(x, w1, nullptr, 1, 0);
    for (std::int64_t i = 0; i < got.numel(); ++i)
      REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-10));
  }
}

TEST_CASE("conv2d gradients", "[nnops][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> x({2, 2, 5, 5}), w({3, 2, 3, 3}), b({3});
    fill_uniform(x, rng, -1, 1);
    fill_uniform(w, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);

    const Tensor<double> p1 = make_proj({2, 3, 5, 5}, rng);
    auto build1 = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::conv2d(t, v[0], v[1], v[2], 1, 1), p1);
    };
    REQUIRE(fd_max_rel_err(build1, {x, w, b}) < kTol);

    const Tensor<double> p2 = make_proj({2, 3, 3, 3}, rng);
    auto build2 = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::conv2d(t, v[0], v[1], v[2], 2, 1), p2);
    };
    REQUIRE(fd_max_rel_err(build2, {x, w, b}) < kTol);
  }
}

TEST_CASE("avg_pool averages blocks exactly", "[nnops][fd]") {
  Tape<double> t;
  Tensor<double> x({1, 1, 2, 4});
  for (int i = 0; i < 8; ++i) x[i] = i;
  const Tensor<double>& y = t.val(migs::avg_pool(t, t.leaf(x, false), 2));
  REQUIRE(y.dim(2) == 1);
  REQUIRE(y.dim(3) == 2);
  REQUIRE(y.at(0, 0, 0, 0) == Catch::Approx((0 + 1 + 4 + 5) / 4.0));
  REQUIRE(y.at(0, 0, 0, 1) == Catch::Approx((2 + 3 + 6 + 7) / 4.0));

  REQUIRE_THROWS_AS(migs::avg_pool(t, t.leaf(Tensor<double>({1, 1, 3, 3}), false), 2),
                    migs::ConfigError);

  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({2, 3, 4, 4});
    fill_uniform(a, rng, -1, 1);
    const Tensor<double> p = make_proj({2, 3, 2, 2}, rng);
    auto build = [&](Tape<double>& tp, const std::vector<Var>& v) {
      return project(tp, migs::avg_pool(tp, v[0], 2), p);
    };
    REQUIRE(fd_max_rel_err(build, {a}) < kTol);
  }
}

TEST_CASE("upsample_nearest2x duplicates pixels", "[nnops][fd]") {
  Tape<double> t;
  Tensor<double> x({1, 1, 2, 2});
  x[0] = 1;
  x[1] = 2;
  x[2] = 3;
  x[3] = 4;
  const Tensor<double>& y = t.val(migs::upsample_nearest2x(t, t.leaf(x, false)));
  REQUIRE(y.at(0, 0, 0, 0) == 1.0);
  REQUIRE(y.at(0, 0, 0, 1) == 1.0);
  REQUIRE(y.at(0, 0, 1, 1) == 1.0);
  REQUIRE(y.at(0, 0, 0, 2) == 2.0);
  REQUIRE(y.at(0, 0, 3, 3) == 4.0);

  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({2, 2, 3, 3});
    fill_uniform(a, rng, -1, 1);
    const Tensor<double> p = make_proj({2, 2, 6, 6}, rng);
    auto build = [&](Tape<double>& tp, const std::vector<Var>& v) {
      return project(tp, migs::upsample_nearest2x(tp, v[0]), p);
    };
    REQUIRE(fd_max_rel_err(build, {a}) < kTol);
  }
}

TEST_CASE("batch_norm normalizes per channel and tracks running stats", "[nnops]") {
  migs::RngStream rng(31);
  Tensor<double> x({4, 3, 5, 5});
  fill_uniform(x, rng, -2, 3);
  Tensor<double> run_mean({3}, 0.0), run_var({3}, 1.0);

  Tape<double> t;
  Var y = migs::batch_norm(t, t.leaf(x, false), migs::kNoVar, migs::kNoVar,
                           &run_mean, &run_var, true);
  const Tensor<double>& vy = t.val(y);
  const std::int64_t m = 4 * 5 * 5;
  for (int c = 0; c < 3; ++c) {
    double mu = 0, var = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) mu += vy.at(n, c, i / 5, i % 5);
    mu /= m;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        const double d = vy.at(n, c, i / 5, i % 5) - mu;
        var += d * d;
      }
    var /= m;
    REQUIRE(mu == Catch::Approx(0.0).margin(1e-10));
    REQUIRE(var == Catch::Approx(1.0).margin(1e-3));  // eps shrinks it slightly

    // running update: 0.9 * init + 0.1 * batch
    double bmu = 0, bvar = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) bmu += x.at(n, c, i / 5, i % 5);
    bmu /= m;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        const double d = x.at(n, c, i / 5, i % 5) - bmu;
        bvar += d * d;
      }
    bvar /= m;
    REQUIRE(run_mean[c] == Catch::Approx(0.9 * 0.0 + 0.1 * bmu));
    REQUIRE(run_var[c] == Catch::Approx(0.9 * 1.0 + 0.1 * bvar));
  }

  // eval mode is deterministic given stored statistics
  Tape<double> t2;
  Var e1 = migs::batch_norm(t2, t2.leaf(x, false), migs::kNoVar, migs::kNoVar,
                            &run_mean, &run_var, false);
  Var e2 = migs::batch_norm(t2, t2.leaf(x, false), migs::kNoVar, migs::kNoVar,
                            &run_mean, &run_var, false);
  REQUIRE(t2.val(e1).bitwise_equal(t2.val(e2)));
}

TEST_CASE("batch_norm gradients", "[nnops][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> x({2, 2, 3, 3}), gamma({2}), beta({2});
    fill_uniform(x, rng, -1, 2);
    fill_uniform(gamma, rng, 0.5, 1.5);
    fill_uniform(beta, rng, -0.5, 0.5);
    const Tensor<double> p = make_proj({2, 2, 3, 3}, rng);

    auto train_affine = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::batch_norm(t, v[0], v[1], v[2], nullptr, nullptr, true), p);
    };
    REQUIRE(fd_max_rel_err(train_affine, {x, gamma, beta}) < kTol);

    auto train_plain = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(
          t, migs::batch_norm(t, v[0], migs::kNoVar, migs::kNoVar, nullptr, nullptr, true), p);
    };
    REQUIRE(fd_max_rel_err(train_plain, {x}) < kTol);

    Tensor<double> rm({2}), rv({2});
    fill_uniform(rm, rng, -0.5, 0.5);
    fill_uniform(rv, rng, 0.5, 1.5);
    auto eval_mode = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::batch_norm(t, v[0], v[1], v[2], &rm, &rv, false), p);
    };
    REQUIRE(fd_max_rel_err(eval_mode, {x, gamma, beta}) < kTol);
  }
}

TEST_CASE("mean_hw and channel concat", "[nnops][fd]") {
  Tape<double> t;
  Tensor<double> x({1, 2, 2, 2});
  for (int i = 0; i < 8; ++i) x[i] = i;
  const Tensor<double>& m = t.val(migs::mean_hw(t, t.leaf(x, false)));
  REQUIRE(m.at(0, 0) == Catch::Approx(1.5));
  REQUIRE(m.at(0, 1) == Catch::Approx(5.5));

  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({2, 2, 3, 3}), b({2, 1, 3, 3});
    fill_uniform(a, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);

    const Tensor<double> pm = make_proj({2, 2}, rng);
    auto build_mean = [&](Tape<double>& tp, const std::vector<Var>& v) {
      return project(tp, migs::mean_hw(tp, v[0]), pm);
    };
    REQUIRE(fd_max_rel_err(build_mean, {a}) < kTol);

    const Tensor<double> pc = make_proj({2, 3, 3, 3}, rng);
    auto build_cat = [&](Tape<double>& tp, const std::vector<Var>& v) {
      return project(tp, migs::concat_channels(tp, {v[0], v[1]}), pc);
    };
    REQUIRE(fd_max_rel_err(build_cat, {a, b}) < kTol);

    Tensor<double> c({3, 2}), d({1, 2});
    fill_uniform(c, rng, -1, 1);
    fill_uniform(d, rng, -1, 1);
    const Tensor<double> p0 = make_proj({4, 2}, rng);
    auto build_cat0 = [&](Tape<double>& tp, const std::vector<Var>& v) {
      return project(tp, migs::concat0(tp, {v[0], v[1]}), p0);
    };
    REQUIRE(fd_max_rel_err(build_cat0, {c, d}) < kTol);
  }
}

TEST_CASE("repair_boxes sorts, widens and clamps", "[nnops]") {
  Tape<double> t;
  Tensor<double> raw({4, 4});
  // row 0: already valid
  raw.at(0, 0) = 0.2;
  raw.at(0, 1) = 0.3;
  raw.at(0, 2) = 0.6;
  raw.at(0, 3) = 0.7;
  // row 1: x pair reversed
  raw.at(1, 0) = 0.6;
  raw.at(1, 1) = 0.3;
  raw.at(1, 2) = 0.2;
  raw.at(1, 3) = 0.7;
  // row 2: fully degenerate point box
  for (int j = 0; j < 4; ++j) raw.at(2, j) = 0.5;
  // row 3: degenerate at the upper-right corner
  for (int j = 0; j < 4; ++j) raw.at(3, j) = 1.0;

  const Tensor<double>& out = t.val(migs::repair_boxes(t, t.leaf(raw, false), 1e-3));
  REQUIRE(out.at(0, 0) == 0.2);
  REQUIRE(out.at(0, 2) == 0.6);
  REQUIRE(out.at(1, 0) == 0.2);
  REQUIRE(out.at(1, 2) == 0.6);
  REQUIRE(out.at(2, 0) == 0.5);
  REQUIRE(out.at(2, 2) == Catch::Approx(0.501));
  REQUIRE(out.at(2, 3) == Catch::Approx(0.501));
  REQUIRE(out.at(3, 0) == Catch::Approx(0.999));
  REQUIRE(out.at(3, 2) == 1.0);

  for (int i = 0; i < 4; ++i) {
    REQUIRE(out.at(i, 2) - out.at(i, 0) >= 1e-3 - 1e-12);
    REQUIRE(out.at(i, 3) - out.at(i, 1) >= 1e-3 - 1e-12);
  }
}

TEST_CASE("repair_boxes gradients", "[nnops][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    // keep each pair clearly apart so finite differences avoid branch edges
    Tensor<double> raw({3, 4});
    for (int i = 0; i < 3; ++i)
      for (int axis = 0; axis < 2; ++axis) {
        double a = rng.uniform(0.05, 0.4), b = rng.uniform(0.55, 0.95);
        if (rng.uniform() < 0.5) std::swap(a, b);
        raw.at(i, axis) = a;
        raw.at(i, axis + 2) = b;
      }
    const Tensor<double> p = make_proj({3, 4}, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::repair_boxes(t, v[0], 1e-3), p);
    };
    REQUIRE(fd_max_rel_err(build, {raw}) < kTol);
  }

  // widened branch: both outputs of the axis depend on the low input only
  Tape<double> t;
  Tensor<double> raw({1, 4});
  raw.at(0, 0) = 0.4;
  raw.at(0, 1) = 0.2;
  raw.at(0, 2) = 0.4;
  raw.at(0, 3) = 0.8;
  Var v = t.leaf(raw, true);
  Var rep = migs::repair_boxes(t, v, 1e-3);
  Var s = migs::sum_all(t, rep);
  t.backward(s);
  REQUIRE(t.grad(v).at(0, 0) == Catch::Approx(2.0));  // x0 drives both x0' and x1'
  REQUIRE(t.grad(v).at(0, 2) == Catch::Approx(0.0));
  REQUIRE(t.grad(v).at(0, 1) == Catch::Approx(1.0));
  REQUIRE(t.grad(v).at(0, 3) == Catch::Approx(1.0));
}

TEST_CASE("paint_masks trivial contracts", "[nnops]") {
  // single object, all-ones mask, full-canvas box -> feature everywhere
  Tape<double> t;
  Tensor<double> feats({1, 3});
  feats.at(0, 0) = 1.5;
  feats.at(0, 1) = -2.0;
  feats.at(0, 2) = 0.25;
  Tensor<double> boxes({1, 4});
  boxes.at(0, 0) = 0.0;
  boxes.at(0, 1) = 0.0;
  boxes.at(0, 2) = 1.0;
  boxes.at(0, 3) = 1.0;
  Tensor<double> masks({1, 4, 4}, 1.0);
  const Tensor<double>& layout =
      t.val(migs::paint_masks(t, t.leaf(feats, false), t.leaf(boxes, false),
                              t.leaf(masks, false), 8, 8));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        REQUIRE(layout.at(c, y, x) == Catch::Approx(feats.at(0, c)));

  // zero objects -> zero layout
  Tensor<double> f0({0, 3}), b0({0, 4}), m0({0, 4, 4});
  const Tensor<double>& empty = t.val(
      migs::paint_masks(t, t.leaf(f0, false), t.leaf(b0, false), t.leaf(m0, false), 8, 8));
  for (std::int64_t i = 0; i < empty.numel(); ++i) REQUIRE(empty[i] == 0.0);
}

TEST_CASE("paint_masks additivity over disjoint objects", "[nnops]") {
  migs::RngStream rng(41);
  Tensor<double> feats({2, 3}), masks({2, 4, 4});
  fill_uniform(feats, rng, -1, 1);
  fill_uniform(masks, rng, 0.1, 0.9);
  Tensor<double> boxes({2, 4});
  boxes.at(0, 0) = 0.05;
  boxes.at(0, 1) = 0.1;
  boxes.at(0, 2) = 0.4;
  boxes.at(0, 3) = 0.45;
  boxes.at(1, 0) = 0.55;
  boxes.at(1, 1) = 0.5;
  boxes.at(1, 2) = 0.9;
  boxes.at(1, 3) = 0.95;

  auto paint_subset = [&](const std::vector<int>& idx) {
    Tensor<double> f({static_cast<int>(idx.size()), 3});
    Tensor<double> b({static_cast<int>(idx.size()), 4});
    Tensor<double> m({static_cast<int>(idx.size()), 4, 4});
    for (std::size_t k = 0; k < idx.size(); ++k) {
      for (int j = 0; j < 3; ++j) f.at(static_cast<int>(k), j) = feats.at(idx[k], j);
      for (int j = 0; j < 4; ++j) b.at(static_cast<int>(k), j) = boxes.at(idx[k], j);
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) m.at(static_cast<int>(k), y, x) = masks.at(idx[k], y, x);
    }
    Tape<double> t;
    return t.val(migs::paint_masks(t, t.leaf(f, false), t.leaf(b, false),
                                   t.leaf(m, false), 16, 16));
  };

  const Tensor<double> both = paint_subset({0, 1});
  const Tensor<double> first = paint_subset({0});
  const Tensor<double> second = paint_subset({1});
  for (std::int64_t i = 0; i < both.numel(); ++i)
    REQUIRE(both[i] == Catch::Approx(first[i] + second[i]).margin(1e-12));
}

TEST_CASE("paint_masks matches the point-sampling oracle", "[nnops]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    const int n = static_cast<int>(rng.uniform_int(1, 4));
    Tensor<double> feats({n, 2}), masks({n, 4, 4}), boxes({n, 4});
    fill_uniform(feats, rng, -1, 1);
    fill_uniform(masks, rng, 0.05, 0.95);
    for (int i = 0; i < n; ++i) {
      const double x0 = rng.uniform(0.02, 0.55), y0 = rng.uniform(0.02, 0.55);
      boxes.at(i, 0) = x0;
      boxes.at(i, 1) = y0;
      boxes.at(i, 2) = x0 + rng.uniform(0.25, 0.43);
      boxes.at(i, 3) = y0 + rng.uniform(0.25, 0.43);
    }
    Tape<double> t;
    const Tensor<double>& got =
        t.val(migs::paint_masks(t, t.leaf(feats, false), t.leaf(boxes, false),
                                t.leaf(masks, false), 32, 32));
    const Tensor<double> want = naive_layout(feats, boxes, masks, 32, 32);
    for (std::int64_t i = 0; i < got.numel(); ++i)
      REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-6));
  }
}

TEST_CASE("paint_masks gradients", "[nnops][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> feats({2, 2}), masks({2, 4, 4}), boxes({2, 4});
    fill_uniform(feats, rng, -1, 1);
    fill_uniform(masks, rng, 0.1, 0.9);
    for (int i = 0; i < 2; ++i) {
      const double x0 = rng.uniform(0.05, 0.4), y0 = rng.uniform(0.05, 0.4);
      boxes.at(i, 0) = x0;
      boxes.at(i, 1) = y0;
      boxes.at(i, 2) = x0 + rng.uniform(0.3, 0.55);
      boxes.at(i, 3) = y0 + rng.uniform(0.3, 0.55);
    }
    const Tensor<double> p = make_proj({2, 16, 16}, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::paint_masks(t, v[0], v[1], v[2], 16, 16), p);
    };
    REQUIRE(fd_max_rel_err(build, {feats, boxes, masks}) < kTol);
  }
}

TEST_CASE("crop_resize matches the bilinear oracle", "[nnops]") {
  migs::RngStream rng(51);
  Tensor<double> img({3, 8, 8});
  fill_uniform(img, rng, -1, 1);

  // full-image box equals plain bilinear resize
  Tensor<double> full({1, 4});
  full.at(0, 0) = 0.0;
  full.at(0, 1) = 0.0;
  full.at(0, 2) = 1.0;
  full.at(0, 3) = 1.0;
  Tape<double> t;
  const Tensor<double>& crop = t.val(migs::crop_resize(t, t.leaf(img, false), full, 4));
  const Tensor<double> want = naive_crop(img, full, 4);
  for (std::int64_t i = 0; i < crop.numel(); ++i)
    REQUIRE(crop[i] == Catch::Approx(want[i]).margin(1e-6));

  // constant image -> constant crops
  Tensor<double> flat({3, 8, 8}, 0.75);
  Tensor<double> boxes({2, 4});
  boxes.at(0, 0) = 0.1;
  boxes.at(0, 1) = 0.2;
  boxes.at(0, 2) = 0.5;
  boxes.at(0, 3) = 0.9;
  boxes.at(1, 0) = 0.4;
  boxes.at(1, 1) = 0.05;
  boxes.at(1, 2) = 0.95;
  boxes.at(1, 3) = 0.6;
  const Tensor<double>& cc = t.val(migs::crop_resize(t, t.leaf(flat, false), boxes, 4));
  for (std::int64_t i = 0; i < cc.numel(); ++i) REQUIRE(cc[i] == Catch::Approx(0.75));

  // random boxes vs oracle
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream r2(seed);
    Tensor<double> bx({3, 4});
    for (int i = 0; i < 3; ++i) {
      const double x0 = r2.uniform(0.0, 0.5), y0 = r2.uniform(0.0, 0.5);
      bx.at(i, 0) = x0;
      bx.at(i, 1) = y0;
      bx.at(i, 2) = x0 + r2.uniform(0.2, 0.5);
      bx.at(i, 3) = y0 + r2.uniform(0.2, 0.5);
    }
    Tape<double> t2;
    const Tensor<double>& got = t2.val(migs::crop_resize(t2, t2.leaf(img, false), bx, 5));
    const Tensor<double> ref = naive_crop(img, bx, 5);
    for (std::int64_t i = 0; i < got.numel(); ++i)
      REQUIRE(got[i] == Catch::Approx(ref[i]).margin(1e-6));
  }
}

TEST_CASE("crop_resize gradients flow to the image", "[nnops][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> img({2, 6, 6});
    fill_uniform(img, rng, -1, 1);
    Tensor<double> boxes({2, 4});
    for (int i = 0; i < 2; ++i) {
      const double x0 = rng.uniform(0.0, 0.4), y0 = rng.uniform(0.0, 0.4);
      boxes.at(i, 0) = x0;
      boxes.at(i, 1) = y0;
      boxes.at(i, 2) = x0 + rng.uniform(0.3, 0.6);
      boxes.at(i, 3) = y0 + rng.uniform(0.3, 0.6);
    }
    const Tensor<double> p = make_proj({2, 2, 3, 3}, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::crop_resize(t, v[0], boxes, 3), p);
    };
    REQUIRE(fd_max_rel_err(build, {img}) < kTol);
  }
}
