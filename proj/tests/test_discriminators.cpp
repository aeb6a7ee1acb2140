#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "migs/discriminators.hpp"
#include "migs/losses.hpp"
#include "oracles.hpp"

using migs::BoundingBox;
using migs::DGlobalConfig;
using migs::DGlobalParamsT;
using migs::DObjConfig;
using migs::DObjParamsT;
using migs::Tape;
using migs::Tensor;
using migs::Var;

namespace {

DGlobalConfig toy_global() {
  DGlobalConfig cfg;
  cfg.channels = {2, 3};
  return cfg;
}

DObjConfig toy_obj() {
  DObjConfig cfg;
  cfg.channels = {2, 3};
  cfg.crop_size = 4;
  cfg.num_classes = 5;
  return cfg;
}

template <typename P>
std::vector<Tensor<double>> collect(const P& pack) {
  std::vector<Tensor<double>> v;
  pack.for_each(
      [&v](const std::string&, const Tensor<double>& w) { v.push_back(w); });
  return v;
}

Tensor<double> random_image(migs::RngStream& rng, int n, int h, int w) {
  Tensor<double> t({n, 3, h, w});
  oracle::fill_uniform(t, rng, -1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("global discriminator emits one logit map per scale",
          "[discriminators]") {
  const DGlobalConfig cfg = toy_global();
  migs::RngStream rng(61);
  auto pack = migs::init_dglobal_params<double>(cfg, rng);

  Tape<double> t;
  auto p = migs::lift_dglobal(t, pack, false);
  Var img = t.constant(random_image(rng, 2, 8, 8));
  auto maps = migs::d_global_forward(t, img, p, cfg);
  REQUIRE(maps.size() == 2);
  // Full scale: 8 -> 4 -> 2 through two stride-2 convs.
  REQUIRE(t.val(maps[0]).ndim() == 4);
  REQUIRE(t.val(maps[0]).dim(0) == 2);
  REQUIRE(t.val(maps[0]).dim(1) == 1);
  REQUIRE(t.val(maps[0]).dim(2) == 2);
  REQUIRE(t.val(maps[0]).dim(3) == 2);
  // Half scale starts from the pooled 4x4 copy.
  REQUIRE(t.val(maps[1]).dim(2) == 1);
  REQUIRE(t.val(maps[1]).dim(3) == 1);
  for (const Var m : maps) REQUIRE(t.val(m).all_finite());

  // A single [3,H,W] image batches itself.
  Tensor<double> one({3, 8, 8}, 0.25);
  auto single = migs::d_global_forward(t, t.constant(one), p, cfg);
  REQUIRE(t.val(single[0]).dim(0) == 1);

  Tensor<double> gray({2, 1, 8, 8}, 0.0);
  REQUIRE_THROWS_AS(migs::d_global_forward(t, t.constant(gray), p, cfg),
                    migs::ContractError);
}

TEST_CASE("zero-weight discriminators sit at logit zero", "[discriminators]") {
  const DGlobalConfig gcfg = toy_global();
  const DObjConfig ocfg = toy_obj();
  migs::RngStream rng(62);
  auto gpack = migs::init_dglobal_params<double>(gcfg, rng);
  auto opack = migs::init_dobj_params<double>(ocfg, rng);
  gpack.for_each([](const std::string&, Tensor<double>& w) { w.fill(0.0); });
  opack.for_each([](const std::string&, Tensor<double>& w) { w.fill(0.0); });

  Tape<double> t;
  auto gp = migs::lift_dglobal(t, gpack, false);
  auto op = migs::lift_dobj(t, opack, false);
  Var img = t.constant(random_image(rng, 2, 8, 8));
  for (const Var m : migs::d_global_forward(t, img, gp, gcfg)) {
    const auto& v = t.val(m);
    for (std::int64_t i = 0; i < v.numel(); ++i) REQUIRE(v[i] == 0.0);
  }
  Tensor<double> crops({3, 3, 4, 4});
  oracle::fill_uniform(crops, rng, -1.0, 1.0);
  auto [rf, cls] = migs::d_obj_forward(t, t.constant(crops), op, ocfg);
  REQUIRE(t.val(rf).ndim() == 1);
  REQUIRE(t.val(rf).dim(0) == 3);
  REQUIRE(t.val(cls).dim(0) == 3);
  REQUIRE(t.val(cls).dim(1) == 5);
  for (std::int64_t i = 0; i < 3; ++i) REQUIRE(t.val(rf)[i] == 0.0);
  for (std::int64_t i = 0; i < t.val(cls).numel(); ++i)
    REQUIRE(t.val(cls)[i] == 0.0);
}

TEST_CASE("half-scale stream ignores Nyquist-frequency detail",
          "[discriminators]") {
  const DGlobalConfig cfg = toy_global();
  migs::RngStream rng(63);
  auto pack = migs::init_dglobal_params<double>(cfg, rng);

  // Base image and checkerboard amplitude are dyadic, so 2x2 average pooling
  // of base +/- delta reproduces the pooled base bit for bit.
  Tensor<double> base({1, 3, 8, 8}, 0.5);
  Tensor<double> wiggly = base;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        wiggly.at(0, c, y, x) += ((x + y) % 2 == 0) ? 0.25 : -0.25;

  Tape<double> t;
  auto p = migs::lift_dglobal(t, pack, false);
  auto m0 = migs::d_global_forward(t, t.constant(base), p, cfg);
  auto m1 = migs::d_global_forward(t, t.constant(wiggly), p, cfg);
  REQUIRE(t.val(m0[1]).bitwise_equal(t.val(m1[1])));
  bool full_scale_sees_it = false;
  for (std::int64_t i = 0; i < t.val(m0[0]).numel(); ++i)
    if (t.val(m0[0])[i] != t.val(m1[0])[i]) full_scale_sees_it = true;
  REQUIRE(full_scale_sees_it);
}

TEST_CASE("object discriminator treats crops independently",
          "[discriminators]") {
  const DObjConfig cfg = toy_obj();
  migs::RngStream rng(64);
  auto pack = migs::init_dobj_params<double>(cfg, rng);

  Tensor<double> crops({3, 3, 4, 4});
  oracle::fill_uniform(crops, rng, -1.0, 1.0);
  // Make crop 2 a copy of crop 0.
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) crops.at(2, c, y, x) = crops.at(0, c, y, x);

  Tape<double> t;
  auto p = migs::lift_dobj(t, pack, false);
  auto [rf, cls] = migs::d_obj_forward(t, t.constant(crops), p, cfg);
  REQUIRE(t.val(rf)[0] == t.val(rf)[2]);
  REQUIRE(t.val(rf)[0] != t.val(rf)[1]);
  for (int k = 0; k < 5; ++k)
    REQUIRE(t.val(cls).at(0, k) == t.val(cls).at(2, k));

  Tensor<double> flat({3, 3, 4});
  REQUIRE_THROWS_AS(migs::d_obj_forward(t, t.constant(flat), p, cfg),
                    migs::ContractError);
}

TEST_CASE("crop_objects validates boxes and keeps constants constant",
          "[discriminators]") {
  migs::RngStream rng(65);
  Tape<double> t;
  Var img = t.constant(Tensor<double>({3, 8, 8}, 0.75));

  Tensor<double> boxes({3, 4});
  const double raw[3][4] = {{0.0, 0.0, 1.0, 1.0},
                            {0.25, 0.125, 0.75, 0.5},
                            {0.25, 0.125, 0.75, 0.5}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) boxes.at(i, j) = raw[i][j];
  Var crops = migs::crop_objects(t, img, boxes, 4);
  REQUIRE(t.val(crops).ndim() == 4);
  REQUIRE(t.val(crops).dim(0) == 3);
  REQUIRE(t.val(crops).dim(1) == 3);
  REQUIRE(t.val(crops).dim(2) == 4);
  REQUIRE(t.val(crops).dim(3) == 4);
  // Constant image: every sampled value is the constant.
  for (std::int64_t i = 0; i < t.val(crops).numel(); ++i)
    REQUIRE(t.val(crops)[i] == Catch::Approx(0.75).epsilon(1e-12));
  // Identical boxes, identical crops.
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        REQUIRE(t.val(crops).at(1, c, y, x) == t.val(crops).at(2, c, y, x));

  // BoundingBox overload agrees with the tensor overload bit for bit.
  std::vector<BoundingBox> bb = {{0.0, 0.0, 1.0, 1.0},
                                 {0.25, 0.125, 0.75, 0.5},
                                 {0.25, 0.125, 0.75, 0.5}};
  Var crops2 = migs::crop_objects(t, img, bb, 4);
  REQUIRE(t.val(crops2).bitwise_equal(t.val(crops)));

  auto bad = [&](double x0, double y0, double x1, double y1) {
    Tensor<double> b({1, 4});
    b.at(0, 0) = x0;
    b.at(0, 1) = y0;
    b.at(0, 2) = x1;
    b.at(0, 3) = y1;
    return b;
  };
  REQUIRE_THROWS_AS(migs::crop_objects(t, img, bad(-0.1, 0.0, 0.5, 0.5), 4),
                    migs::ContractError);
  REQUIRE_THROWS_AS(migs::crop_objects(t, img, bad(0.0, 0.0, 1.1, 0.5), 4),
                    migs::ContractError);
  REQUIRE_THROWS_AS(migs::crop_objects(t, img, bad(0.6, 0.0, 0.4, 0.5), 4),
                    migs::ContractError);
  REQUIRE_THROWS_AS(migs::crop_objects(t, img, bad(0.2, 0.5, 0.8, 0.5), 4),
                    migs::ContractError);
  Tensor<double> five({1, 5}, 0.1);
  REQUIRE_THROWS_AS(migs::crop_objects(t, img, five, 4),
                    migs::ContractError);
}

TEST_CASE("config validation rejects degenerate discriminators",
          "[discriminators]") {
  DGlobalConfig g;
  g.channels.clear();
  REQUIRE_THROWS_AS(g.validate(), migs::ConfigError);
  g.channels = {4, -1};
  REQUIRE_THROWS_AS(g.validate(), migs::ConfigError);
  REQUIRE_NOTHROW(DGlobalConfig::desk().validate());
  REQUIRE(DGlobalConfig::desk().channels == std::vector<int>{16, 32});

  DObjConfig o;
  o.crop_size = 3;
  REQUIRE_THROWS_AS(o.validate(), migs::ConfigError);
  o.crop_size = 0;
  REQUIRE_THROWS_AS(o.validate(), migs::ConfigError);
  o = DObjConfig();
  o.num_classes = 0;
  REQUIRE_THROWS_AS(o.validate(), migs::ConfigError);
  REQUIRE_NOTHROW(DObjConfig::desk().validate());
}

TEST_CASE("global discriminator gradients pass finite differences",
          "[discriminators]") {
  const DGlobalConfig cfg = toy_global();
  for (std::uint64_t seed : {71u, 72u, 73u}) {
    migs::RngStream rng(seed);
    auto pack = migs::init_dglobal_params<double>(cfg, rng);
    pack.for_each([&rng](const std::string&, Tensor<double>& w) {
      if (w.ndim() == 1)
        for (std::int64_t i = 0; i < w.numel(); ++i)
          w[i] += rng.uniform(-0.3, 0.3);
    });
    std::vector<Tensor<double>> inputs = {random_image(rng, 2, 8, 8),
                                          random_image(rng, 2, 8, 8)};
    for (auto& w : collect(pack)) inputs.push_back(w);
    const oracle::BuildFn f = [&cfg](Tape<double>& t,
                                     const std::vector<Var>& v) {
      DGlobalParamsT<Var> p;
      p.full.conv_w.resize(cfg.channels.size());
      p.full.conv_b.resize(cfg.channels.size());
      p.half.conv_w.resize(cfg.channels.size());
      p.half.conv_b.resize(cfg.channels.size());
      std::size_t i = 2;
      p.for_each([&](const std::string&, Var& slot) { slot = v[i++]; });
      auto real = migs::d_global_forward(t, v[0], p, cfg);
      auto fake = migs::d_global_forward(t, v[1], p, cfg);
      return migs::gan_loss_d(t, real, fake);
    };
    REQUIRE(oracle::fd_max_rel_err(f, inputs) < 1e-4);
  }
}

TEST_CASE("object discriminator gradients pass finite differences",
          "[discriminators]") {
  const DObjConfig cfg = toy_obj();
  const std::vector<int> labels = {1, 4};
  for (std::uint64_t seed : {81u, 82u, 83u}) {
    migs::RngStream rng(seed);
    auto pack = migs::init_dobj_params<double>(cfg, rng);
    pack.for_each([&rng](const std::string&, Tensor<double>& w) {
      if (w.ndim() == 1)
        for (std::int64_t i = 0; i < w.numel(); ++i)
          w[i] += rng.uniform(-0.3, 0.3);
    });
    Tensor<double> crops({2, 3, 4, 4});
    oracle::fill_uniform(crops, rng, -1.0, 1.0);
    std::vector<Tensor<double>> inputs = {crops};
    for (auto& w : collect(pack)) inputs.push_back(w);
    const oracle::BuildFn f = [&cfg, &labels](Tape<double>& t,
                                              const std::vector<Var>& v) {
      DObjParamsT<Var> p;
      p.conv_w.resize(cfg.channels.size());
      p.conv_b.resize(cfg.channels.size());
      std::size_t i = 1;
      p.for_each([&](const std::string&, Var& slot) { slot = v[i++]; });
      auto [rf, cls] = migs::d_obj_forward(t, v[0], p, cfg);
      Var gan = migs::gan_loss_g(t, {rf});
      Var aux = migs::aux_obj_loss(t, cls, labels);
      return migs::add(t, gan, aux);
    };
    REQUIRE(oracle::fd_max_rel_err(f, inputs) < 1e-4);
  }
}

TEST_CASE("crop gradients reach the image through the crops",
          "[discriminators]") {
  migs::RngStream rng(91);
  Tensor<double> img({3, 8, 8});
  oracle::fill_uniform(img, rng, -1.0, 1.0);
  Tensor<double> boxes({2, 4});
  boxes.at(0, 0) = 0.1;
  boxes.at(0, 1) = 0.2;
  boxes.at(0, 2) = 0.7;
  boxes.at(0, 3) = 0.9;
  boxes.at(1, 0) = 0.5;
  boxes.at(1, 1) = 0.25;
  boxes.at(1, 2) = 0.95;
  boxes.at(1, 3) = 0.75;
  std::vector<Tensor<double>> inputs = {img};
  const auto proj = oracle::make_proj({2, 3, 4, 4}, rng);
  const oracle::BuildFn f = [&boxes, &proj](Tape<double>& t,
                                            const std::vector<Var>& v) {
    Var crops = migs::crop_objects(t, v[0], boxes, 4);
    return oracle::project(t, crops, proj);
  };
  REQUIRE(oracle::fd_max_rel_err(f, inputs) < 1e-4);
}
