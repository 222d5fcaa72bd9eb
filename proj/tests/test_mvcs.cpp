#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "pemvc/mvcs.hpp"
#include "support/ref_oracles.hpp"
#include "pemvc/ops.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

using namespace pemvc;
using Td = Tensor<double>;

namespace {

using refs::random_tensor;
using refs::ref_softmax_rows;
using refs::ref_mvcs_block;

}  // namespace

TEST_CASE("make_views shape law and index mapping") {
  Rng rng(5);
  // degenerate cube: every view collapses to (2,2,2,1)
  Td tiny = random_tensor({1, 1, 2, 2, 2}, rng);
  ViewSet<double> vt = make_views(tiny);
  for (int t = 0; t < 3; ++t) {
    REQUIRE(vt.views[static_cast<size_t>(t)].shape() == std::vector<int>{2, 2, 2, 1});
  }

  const int B = 2, C = 3, D = 4, H = 5, W = 6;
  Td x = random_tensor({B, C, D, H, W}, rng);
  ViewSet<double> vs = make_views(x);
  CHECK(vs.views[0].shape() == std::vector<int>{B * D, H, W, C});
  CHECK(vs.views[1].shape() == std::vector<int>{B * H, W, D, C});
  CHECK(vs.views[2].shape() == std::vector<int>{B * W, H, D, C});

  auto vat = [&](int t, int n, int i, int j, int c) {
    const Td& v = vs.views[static_cast<size_t>(t)];
    return v.data()[((static_cast<int64_t>(n) * v.dim(1) + i) * v.dim(2) + j) * v.dim(3) + c];
  };
  // every element of every view traces back to the canonical layout
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            double e = x.data()[(((static_cast<int64_t>(b) * C + c) * D + d) * H + h) * W + w];
            CHECK(vat(0, b * D + d, h, w, c) == e);
            CHECK(vat(1, b * H + h, w, d, c) == e);
            CHECK(vat(2, b * W + w, h, d, c) == e);
          }

  CHECK_THROWS_AS(make_views(random_tensor({2, 3, 4}, rng)), ShapeError);
}

TEST_CASE("unfold_view inverts make_views") {
  Rng rng(11);
  Td x = random_tensor({2, 3, 4, 3, 2}, rng);
  ViewSet<double> vs = make_views(x);
  for (int t = 0; t < 3; ++t) {
    Td back = unfold_view(vs, t, vs.views[static_cast<size_t>(t)]);
    REQUIRE(back.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
  }
}

TEST_CASE("qkv projection identity, zero, and matmul oracle") {
  Rng rng(3);
  const int C = 4;
  Td view = random_tensor({3, 2, 2, C}, rng);

  std::array<ChannelMap<double>, 3> ident;
  for (auto& m : ident) {
    m.w = Td({C, C});
    for (int c = 0; c < C; ++c) m.w.data()[c * C + c] = 1.0;
    m.b = Td({C});
  }
  QkvTriple<double> t = qkv_project(view, ident);
  for (int64_t i = 0; i < view.numel(); ++i) {
    CHECK(t.key.data()[i] == view.data()[i]);
    CHECK(t.query.data()[i] == view.data()[i]);
    CHECK(t.value.data()[i] == view.data()[i]);
  }

  std::array<ChannelMap<double>, 3> zero;
  for (auto& m : zero) {
    m.w = Td({C, 2});
    m.b = Td({2});
  }
  QkvTriple<double> z = qkv_project(view, zero);
  for (int64_t i = 0; i < z.key.numel(); ++i) {
    CHECK(z.key.data()[i] == 0.0);
    CHECK(z.value.data()[i] == 0.0);
  }

  // random map equals an explicit per-position matvec
  std::array<ChannelMap<double>, 3> rnd;
  for (auto& m : rnd) {
    m.w = random_tensor({C, 3}, rng);
    m.b = random_tensor({3}, rng);
  }
  QkvTriple<double> r = qkv_project(view, rnd);
  const Td* outs[3] = {&r.key, &r.query, &r.value};
  for (int which = 0; which < 3; ++which) {
    const auto& m = rnd[static_cast<size_t>(which)];
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          for (int cp = 0; cp < 3; ++cp) {
            double acc = m.b.data()[cp];
            for (int c = 0; c < C; ++c)
              acc += view.data()[((static_cast<int64_t>(n) * 2 + i) * 2 + j) * C + c] *
                     m.w.data()[static_cast<int64_t>(c) * 3 + cp];
            double got = outs[which]->data()[((static_cast<int64_t>(n) * 2 + i) * 2 + j) * 3 + cp];
            CHECK(got == doctest::Approx(acc).epsilon(1e-12));
          }
  }
}

TEST_CASE("spatial attention fixed points and loop oracle") {
  Rng rng(17);
  // 1x1 plane: the softmax is a single 1, output == value
  QkvTriple<double> one;
  one.key = random_tensor({3, 1, 1, 4}, rng);
  one.query = random_tensor({3, 1, 1, 4}, rng);
  one.value = random_tensor({3, 1, 1, 4}, rng);
  one.channels = 4;
  Td o1 = spatial_attention(one);
  for (int64_t i = 0; i < o1.numel(); ++i)
    CHECK(o1.data()[i] == doctest::Approx(one.value.data()[i]).epsilon(1e-12));

  // constant value field: row-stochastic mixing preserves constants
  QkvTriple<double> cst;
  cst.key = random_tensor({2, 3, 2, 2}, rng);
  cst.query = random_tensor({2, 3, 2, 2}, rng);
  cst.value = Td::full({2, 3, 2, 2}, 0.75);
  cst.channels = 2;
  Td oc = spatial_attention(cst);
  for (int64_t i = 0; i < oc.numel(); ++i)
    CHECK(oc.data()[i] == doctest::Approx(0.75).epsilon(1e-12));

  // random case vs explicit loops
  for (int trial = 0; trial < 20; ++trial) {
    Rng tr(100 + trial);
    const int N = 2, h = 2, w = 3, Cp = 2, S = h * w;
    QkvTriple<double> t;
    t.key = random_tensor({N, h, w, Cp}, tr);
    t.query = random_tensor({N, h, w, Cp}, tr);
    t.value = random_tensor({N, h, w, Cp}, tr);
    t.channels = Cp;
    Td got = spatial_attention(t);
    for (int n = 0; n < N; ++n) {
      std::vector<double> m(static_cast<size_t>(S) * S, 0.0);
      auto at = [&](const Td& x, int s, int c) {
        return x.data()[(static_cast<int64_t>(n) * S + s) * Cp + c];
      };
      for (int s1 = 0; s1 < S; ++s1)
        for (int s2 = 0; s2 < S; ++s2)
          for (int c = 0; c < Cp; ++c)
            m[static_cast<size_t>(s1) * S + s2] += at(t.query, s1, c) * at(t.key, s2, c);
      ref_softmax_rows(m, S, S);
      for (int s1 = 0; s1 < S; ++s1)
        for (int c = 0; c < Cp; ++c) {
          double acc = 0.0;
          for (int s2 = 0; s2 < S; ++s2)
            acc += m[static_cast<size_t>(s1) * S + s2] * at(t.value, s2, c);
          CHECK(std::abs(at(got, s1, c) - acc) < 1e-10);
        }
    }
  }
}

TEST_CASE("channel attention fixed points and loop oracle") {
  Rng rng(23);
  // single channel: scalar softmax is 1
  QkvTriple<double> one;
  one.key = random_tensor({2, 2, 2, 1}, rng);
  one.query = random_tensor({2, 2, 2, 1}, rng);
  one.value = random_tensor({2, 2, 2, 1}, rng);
  one.channels = 1;
  Td o1 = channel_attention(one);
  for (int64_t i = 0; i < o1.numel(); ++i)
    CHECK(o1.data()[i] == doctest::Approx(one.value.data()[i]).epsilon(1e-12));

  // value constant over channels: convex combination returns it unchanged
  QkvTriple<double> cst;
  cst.key = random_tensor({2, 2, 2, 3}, rng);
  cst.query = random_tensor({2, 2, 2, 3}, rng);
  cst.value = Td({2, 2, 2, 3});
  for (int s = 0; s < 8; ++s) {
    double v = rng.uniform();
    for (int c = 0; c < 3; ++c) cst.value.data()[s * 3 + c] = v;
  }
  cst.channels = 3;
  Td oc = channel_attention(cst);
  for (int64_t i = 0; i < oc.numel(); ++i)
    CHECK(oc.data()[i] == doctest::Approx(cst.value.data()[i]).epsilon(1e-12));

  // random case vs explicit loops: out[s][c] = sum_j v[s][j] A[c][j]
  for (int trial = 0; trial < 20; ++trial) {
    Rng tr(300 + trial);
    const int N = 2, h = 2, w = 2, Cp = 3, S = h * w;
    QkvTriple<double> t;
    t.key = random_tensor({N, h, w, Cp}, tr);
    t.query = random_tensor({N, h, w, Cp}, tr);
    t.value = random_tensor({N, h, w, Cp}, tr);
    t.channels = Cp;
    Td got = channel_attention(t);
    for (int n = 0; n < N; ++n) {
      auto at = [&](const Td& x, int s, int c) {
        return x.data()[(static_cast<int64_t>(n) * S + s) * Cp + c];
      };
      std::vector<double> m(static_cast<size_t>(Cp) * Cp, 0.0);
      for (int c1 = 0; c1 < Cp; ++c1)
        for (int c2 = 0; c2 < Cp; ++c2)
          for (int s = 0; s < S; ++s)
            m[static_cast<size_t>(c1) * Cp + c2] += at(t.key, s, c1) * at(t.query, s, c2);
      ref_softmax_rows(m, Cp, Cp);
      for (int s = 0; s < S; ++s)
        for (int c = 0; c < Cp; ++c) {
          double acc = 0.0;
          for (int j = 0; j < Cp; ++j)
            acc += at(t.value, s, j) * m[static_cast<size_t>(c) * Cp + j];
          CHECK(std::abs(at(got, s, c) - acc) < 1e-10);
        }
    }
  }
}

TEST_CASE("dimensional attention fixed points and loop oracle") {
  Rng rng(31);
  // single slice along the axis: softmax over one element
  {
    Td k = random_tensor({2, 3, 1, 2, 2}, rng);
    Td q = random_tensor({2, 3, 1, 2, 2}, rng);
    Td v = random_tensor({2, 3, 1, 2, 2}, rng);
    Td o = dimensional_attention(k, q, v, 2);
    for (int64_t i = 0; i < o.numel(); ++i)
      CHECK(o.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-12));
  }
  // value constant along the fold axis: mixing slices changes nothing
  {
    Td k = random_tensor({1, 2, 3, 2, 2}, rng);
    Td q = random_tensor({1, 2, 3, 2, 2}, rng);
    Td v = Td({1, 2, 3, 2, 2});
    for (int c = 0; c < 2; ++c)
      for (int h = 0; h < 2; ++h)
        for (int w = 0; w < 2; ++w) {
          double val = rng.uniform();
          for (int d = 0; d < 3; ++d)
            v.data()[((static_cast<int64_t>(c) * 3 + d) * 2 + h) * 2 + w] = val;
        }
    Td o = dimensional_attention(k, q, v, 2);
    for (int64_t i = 0; i < o.numel(); ++i)
      CHECK(o.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-11));
  }
  // D=3 random case vs a triple-loop oracle, every axis
  for (int axis = 2; axis <= 4; ++axis) {
    for (int trial = 0; trial < 10; ++trial) {
      Rng tr(axis * 1000 + trial);
      const int B = 2, C = 2, D = 3, H = 2, W = 2;
      Td k = random_tensor({B, C, D, H, W}, tr);
      Td q = random_tensor({B, C, D, H, W}, tr);
      Td v = random_tensor({B, C, D, H, W}, tr);
      Td got = dimensional_attention(k, q, v, axis);
      const int L = got.dim(axis);
      auto at = [&](const Td& x, int b, int c, int d, int h, int w) {
        return x.data()[(((static_cast<int64_t>(b) * C + c) * D + d) * H + h) * W + w];
      };
      auto pick = [&](const Td& x, int b, int c, int l, int a1, int a2) {
        if (axis == 2) return at(x, b, c, l, a1, a2);
        if (axis == 3) return at(x, b, c, a1, l, a2);
        return at(x, b, c, a1, a2, l);
      };
      const int n1 = axis == 2 ? H : D;
      const int n2 = axis == 4 ? H : W;
      for (int b = 0; b < B; ++b) {
        std::vector<double> m(static_cast<size_t>(L) * L, 0.0);
        for (int l1 = 0; l1 < L; ++l1)
          for (int l2 = 0; l2 < L; ++l2)
            for (int c = 0; c < C; ++c)
              for (int a1 = 0; a1 < n1; ++a1)
                for (int a2 = 0; a2 < n2; ++a2)
                  m[static_cast<size_t>(l1) * L + l2] +=
                      pick(q, b, c, l1, a1, a2) * pick(k, b, c, l2, a1, a2);
        ref_softmax_rows(m, L, L);
        for (int l = 0; l < L; ++l)
          for (int c = 0; c < C; ++c)
            for (int a1 = 0; a1 < n1; ++a1)
              for (int a2 = 0; a2 < n2; ++a2) {
                double acc = 0.0;
                for (int l2 = 0; l2 < L; ++l2)
                  acc += m[static_cast<size_t>(l) * L + l2] * pick(v, b, c, l2, a1, a2);
                CHECK(std::abs(pick(got, b, c, l, a1, a2) - acc) < 1e-10);
              }
      }
    }
  }
  Td bad = random_tensor({1, 1, 2, 2, 2}, rng);
  CHECK_THROWS_AS(dimensional_attention(bad, bad, bad, 1), ShapeError);
}

TEST_CASE("block identity and degenerate cases") {
  // one-element volume, identity projections: three views each contribute a
  // spatial, channel and dimensional softmax of size 1, so the sum is 9x
  MvcsParams<double> ident = identity_mvcs_params<double>(1);
  MvcsConfig cfg;
  cfg.residual = false;
  Td x({1, 1, 1, 1, 1}, {0.37});
  Td y = mvcs_block_forward(x, ident, cfg);
  CHECK(y.data()[0] == doctest::Approx(9 * 0.37).epsilon(1e-12));

  cfg.residual = true;
  Td yr = mvcs_block_forward(x, ident, cfg);
  CHECK(yr.data()[0] == doctest::Approx(10 * 0.37).epsilon(1e-12));

  // zero input with zero biases stays zero (attention mixes zero values)
  Rng rng(9);
  MvcsParams<double> rp = init_mvcs_params<double>(2, rng);
  cfg.residual = false;
  Td z({1, 2, 2, 2, 2});
  Td yz = mvcs_block_forward(z, rp, cfg);
  for (int64_t i = 0; i < yz.numel(); ++i) CHECK(yz.data()[i] == 0.0);

  // constant input through identity maps: every attention returns the input
  MvcsParams<double> ident3 = identity_mvcs_params<double>(3);
  Td c3 = Td::full({1, 3, 2, 2, 2}, -0.5);
  Td yc = mvcs_block_forward(c3, ident3, cfg);
  for (int64_t i = 0; i < yc.numel(); ++i)
    CHECK(yc.data()[i] == doctest::Approx(9 * -0.5).epsilon(1e-10));

  // C' != C cannot feed the nine-way sum
  MvcsParams<double> narrow;
  for (auto& view : narrow.view_maps)
    for (auto& m : view) {
      m.w = Td({4, 2});
      m.b = Td({2});
    }
  narrow.depth = identity_mvcs_params<double>(4).depth;
  Td x4 = random_tensor({1, 4, 2, 2, 2}, rng);
  CHECK_THROWS_AS(mvcs_block_forward(x4, narrow, cfg), ConfigError);

  Rng r2(1);
  CHECK_THROWS_AS(init_mvcs_params<double>(4, r2, 3), ConfigError);
}

TEST_CASE("block matches the straight-line reference") {
  double worst = refs::mvcs_block_worst(100);
  CHECK(worst < 1e-8);
  MESSAGE("block vs reference, max abs diff over 100 trials: " << worst);

  // residual flips the block between near-f(x) and x + f(x)
  MvcsConfig cfg;
  cfg.residual = false;
  Rng rng(424);
  Td x = random_tensor({1, 2, 3, 3, 3}, rng);
  MvcsParams<double> p = init_mvcs_params<double>(2, rng);
  Td off = mvcs_block_forward(x, p, cfg);
  cfg.residual = true;
  Td on = mvcs_block_forward(x, p, cfg);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(on.data()[i] == doctest::Approx(off.data()[i] + x.data()[i]).epsilon(1e-12));
}
