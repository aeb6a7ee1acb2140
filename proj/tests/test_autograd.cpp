#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "migs/autograd.hpp"
#include "oracles.hpp"

using migs::Tape;
using migs::Tensor;
using migs::Var;
using oracle::fd_max_rel_err;
using oracle::fill_away_from_zero;
using oracle::fill_uniform;
using oracle::make_proj;
using oracle::project;

namespace {
const std::vector<std::uint64_t> kSeeds{11, 12, 13, 14, 15};
constexpr double kTol = 1e-4;
}  // namespace

TEST_CASE("elementwise binary op gradients", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({3, 4}), b({3, 4});
    fill_uniform(a, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);
    const Tensor<double> w = make_proj({3, 4}, rng);

    auto check = [&](auto op) {
      auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
        return project(t, op(t, v[0], v[1]), w);
      };
      REQUIRE(fd_max_rel_err(build, {a, b}) < kTol);
    };
    check([](Tape<double>& t, Var x, Var y) { return migs::add(t, x, y); });
    check([](Tape<double>& t, Var x, Var y) { return migs::sub(t, x, y); });
    check([](Tape<double>& t, Var x, Var y) { return migs::mul(t, x, y); });
  }
}

TEST_CASE("scalar and unary op gradients", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({2, 5});
    fill_away_from_zero(a, rng, 0.05);
    const Tensor<double> w = make_proj({2, 5}, rng);

    auto check = [&](auto op) {
      auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
        return project(t, op(t, v[0]), w);
      };
      REQUIRE(fd_max_rel_err(build, {a}) < kTol);
    };
    check([](Tape<double>& t, Var x) { return migs::add_scalar(t, x, 0.7); });
    check([](Tape<double>& t, Var x) { return migs::mul_scalar(t, x, -1.3); });
    check([](Tape<double>& t, Var x) { return migs::sigmoid(t, x); });
    check([](Tape<double>& t, Var x) { return migs::tanh_op(t, x); });
    check([](Tape<double>& t, Var x) { return migs::leaky_relu(t, x, 0.2); });
    check([](Tape<double>& t, Var x) { return migs::abs_op(t, x); });

    Tensor<double> pos({2, 5});
    fill_uniform(pos, rng, 0.2, 1.0);
    auto build_log = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::log_clamped(t, v[0], 1e-7), w);
    };
    REQUIRE(fd_max_rel_err(build_log, {pos}) < kTol);
  }
}

TEST_CASE("log_clamped floors and kills gradient below the floor", "[autograd]") {
  Tape<double> t;
  Tensor<double> x({2});
  x[0] = 1e-12;  // below floor
  x[1] = 0.5;
  Var v = t.leaf(x, true);
  Var l = migs::log_clamped(t, v, 1e-7);
  REQUIRE(t.val(l)[0] == Catch::Approx(std::log(1e-7)));
  Var s = migs::sum_all(t, l);
  t.backward(s);
  REQUIRE(t.grad(v)[0] == 0.0);
  REQUIRE(t.grad(v)[1] == Catch::Approx(2.0));
}

TEST_CASE("reduction gradients", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({4, 3});
    fill_uniform(a, rng, -2, 2);
    auto sum_build = [](Tape<double>& t, const std::vector<Var>& v) {
      return migs::sum_all(t, v[0]);
    };
    auto mean_build = [](Tape<double>& t, const std::vector<Var>& v) {
      return migs::mean_all(t, v[0]);
    };
    REQUIRE(fd_max_rel_err(sum_build, {a}) < kTol);
    REQUIRE(fd_max_rel_err(mean_build, {a}) < kTol);
  }
}

TEST_CASE("wsum combines weighted scalar terms", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({3, 3}), b({3, 3});
    fill_uniform(a, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);
    auto build = [](Tape<double>& t, const std::vector<Var>& v) {
      Var m1 = migs::mean_all(t, v[0]);
      Var m2 = migs::mean_all(t, migs::mul(t, v[0], v[1]));
      return migs::wsum(t, {{10.0, m1}, {0.01, m2}});
    };
    REQUIRE(fd_max_rel_err(build, {a, b}) < kTol);
  }

  Tape<double> t;
  Var s1 = t.leaf(Tensor<double>::scalar(2.0), true);
  Var s2 = t.leaf(Tensor<double>::scalar(-3.0), true);
  Var w = migs::wsum(t, {{0.5, s1}, {2.0, s2}});
  REQUIRE(t.val(w)[0] == Catch::Approx(1.0 - 6.0));
}

TEST_CASE("matmul matches naive multiply and finite differences", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({3, 4}), b({4, 2});
    fill_uniform(a, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);

    Tape<double> t;
    Var va = t.leaf(a, false), vb = t.leaf(b, false);
    const Tensor<double>& c = t.val(migs::matmul(t, va, vb));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
        REQUIRE(c.at(i, j) == Catch::Approx(acc).margin(1e-12));
      }

    const Tensor<double> w = make_proj({3, 2}, rng);
    auto build = [&](Tape<double>& tp, const std::vector<Var>& v) {
      return project(tp, migs::matmul(tp, v[0], v[1]), w);
    };
    REQUIRE(fd_max_rel_err(build, {a, b}) < kTol);
  }
}

TEST_CASE("linear layer gradients", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> x({5, 3}), w({3, 4}), b({4});
    fill_uniform(x, rng, -1, 1);
    fill_uniform(w, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);
    const Tensor<double> proj = make_proj({5, 4}, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::linear(t, v[0], v[1], v[2]), proj);
    };
    REQUIRE(fd_max_rel_err(build, {x, w, b}) < kTol);

    auto build_nobias = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::linear(t, v[0], v[1]), proj);
    };
    REQUIRE(fd_max_rel_err(build_nobias, {x, w}) < kTol);
  }
}

TEST_CASE("structural op gradients", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({2, 3}), b({2, 2});
    fill_uniform(a, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);

    const Tensor<double> w5 = make_proj({2, 5}, rng);
    auto build_concat = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::concat_cols(t, {v[0], v[1]}), w5);
    };
    REQUIRE(fd_max_rel_err(build_concat, {a, b}) < kTol);

    const Tensor<double> w6 = make_proj({6}, rng);
    auto build_reshape = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::reshape(t, v[0], {6}), w6);
    };
    REQUIRE(fd_max_rel_err(build_reshape, {a}) < kTol);

    const Tensor<double> w2 = make_proj({2, 2}, rng);
    auto build_slice = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::slice_cols(t, v[0], 1, 3), w2);
    };
    REQUIRE(fd_max_rel_err(build_slice, {a}) < kTol);

    const Tensor<double> w43 = make_proj({4, 3}, rng);
    auto build_gather = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::gather_rows(t, v[0], {1, 0, 1, 1}), w43);
    };
    REQUIRE(fd_max_rel_err(build_gather, {a}) < kTol);

    const Tensor<double> w223 = make_proj({2, 2, 3}, rng);
    Tensor<double> a2({2, 3});
    fill_uniform(a2, rng, -1, 1);
    auto build_stack = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::stack0(t, {v[0], v[1]}), w223);
    };
    REQUIRE(fd_max_rel_err(build_stack, {a, a2}) < kTol);

    const Tensor<double> w23 = make_proj({2, 3}, rng);
    auto build_where = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::where_rows(t, {1, 0}, v[0], v[1]), w23);
    };
    REQUIRE(fd_max_rel_err(build_where, {a, a2}) < kTol);
  }
}

TEST_CASE("softmax cross-entropy value and gradients", "[autograd][fd]") {
  {
    // Uniform logits over 3 classes: loss is ln 3 regardless of the label.
    Tape<double> t;
    Tensor<double> logits({2, 3}, 0.0);
    Var v = t.leaf(logits, false);
    Var l = migs::softmax_cross_entropy(t, v, {0, 2});
    REQUIRE(t.val(l)[0] == Catch::Approx(std::log(3.0)));
  }
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> logits({4, 5});
    fill_uniform(logits, rng, -2, 2);
    auto build = [](Tape<double>& t, const std::vector<Var>& v) {
      return migs::softmax_cross_entropy(t, v[0], {3, 0, 4, 1});
    };
    REQUIRE(fd_max_rel_err(build, {logits}) < kTol);
  }
}

TEST_CASE("segment_mean_pairs pools by participation", "[autograd][fd]") {
  // Nodes 0,1,2; edges (0->1) and (0->2); node 3 isolated.
  const std::vector<int> subj{0, 0}, obj{1, 2};
  {
    Tape<double> t;
    Tensor<double> cs({2, 2}), co({2, 2}), prev({4, 2});
    cs.at(0, 0) = 2.0;
    cs.at(1, 0) = 4.0;
    co.at(0, 1) = 6.0;
    co.at(1, 1) = 8.0;
    for (int i = 0; i < 4; ++i) {
      prev.at(i, 0) = 10.0 + i;
      prev.at(i, 1) = 20.0 + i;
    }
    Var o = migs::segment_mean_pairs(t, t.leaf(cs, false), t.leaf(co, false),
                                     subj, obj, t.leaf(prev, false));
    // node 0 participates twice as subject: mean of (2,0) and (4,0)
    REQUIRE(t.val(o).at(0, 0) == Catch::Approx(3.0));
    REQUIRE(t.val(o).at(0, 1) == Catch::Approx(0.0));
    // node 1: only candidate (0,6)
    REQUIRE(t.val(o).at(1, 1) == Catch::Approx(6.0));
    // node 3 isolated: passes prev through
    REQUIRE(t.val(o).at(3, 0) == Catch::Approx(13.0));
    REQUIRE(t.val(o).at(3, 1) == Catch::Approx(23.0));
  }
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> cs({2, 3}), co({2, 3}), prev({4, 3});
    fill_uniform(cs, rng, -1, 1);
    fill_uniform(co, rng, -1, 1);
    fill_uniform(prev, rng, -1, 1);
    const Tensor<double> w = make_proj({4, 3}, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var>& v) {
      return project(t, migs::segment_mean_pairs(t, v[0], v[1], subj, obj, v[2]), w);
    };
    REQUIRE(fd_max_rel_err(build, {cs, co, prev}) < kTol);
  }
}

TEST_CASE("gradients accumulate across shared subexpressions", "[autograd][fd]") {
  for (std::uint64_t seed : kSeeds) {
    migs::RngStream rng(seed);
    Tensor<double> a({3, 3});
    fill_uniform(a, rng, 0.1, 1.0);
    auto build = [](Tape<double>& t, const std::vector<Var>& v) {
      Var s = migs::sigmoid(t, v[0]);
      Var m = migs::mul(t, s, v[0]);  // v[0] used twice
      Var u = migs::add(t, m, s);     // s used twice
      return migs::mean_all(t, u);
    };
    REQUIRE(fd_max_rel_err(build, {a}) < kTol);
  }
}

TEST_CASE("tape guards misuse", "[autograd]") {
  Tape<double> t;
  Var c = t.constant(Tensor<double>::scalar(1.0));
  REQUIRE_THROWS_AS(t.grad(c), migs::ContractError);
  REQUIRE_THROWS_AS(t.backward(c), migs::ContractError);
  Var v = t.leaf(Tensor<double>({2, 2}, 1.0), true);
  REQUIRE_THROWS_AS(t.backward(v), migs::ContractError);  // non-scalar root
  REQUIRE_THROWS_AS(t.val(static_cast<Var>(99)), migs::ContractError);
}
