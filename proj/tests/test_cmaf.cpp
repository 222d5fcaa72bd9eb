#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pemvc/cmaf.hpp"
#include "support/ref_oracles.hpp"
#include "pemvc/gradcheck.hpp"
#include "pemvc/rng.hpp"

using namespace pemvc;
using Td = Tensor<double>;

namespace {

using refs::random_tensor;

CmafConfig small_config() {
  CmafConfig cfg;
  cfg.image_dim = 4;
  cfg.emr_dim = 3;
  cfg.common_dim = 4;
  cfg.tokens = 2;
  cfg.token_dim = 2;
  cfg.hidden = 5;
  cfg.dropout_p = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("token projection shape law, zero case, and reshape layout") {
  CmafConfig cfg;  // 64 -> 8 tokens x 8 dims
  Rng rng(2);
  CmafParams<double> p = init_cmaf_params<double>(cfg, rng);
  Td x = random_tensor({2, 64}, rng);
  Td y = random_tensor({2, 64}, rng);
  TokenPair<double> tok = project_common(x, y, p, cfg);
  CHECK(tok.x.shape() == std::vector<int>{2, 8, 8});
  CHECK(tok.y.shape() == std::vector<int>{2, 8, 8});

  // zero inputs with zero biases give zero token grids
  Td zx({2, 64}), zy({2, 64});
  TokenPair<double> zt = project_common(zx, zy, p, cfg);
  for (int64_t i = 0; i < zt.x.numel(); ++i) CHECK(zt.x.data()[i] == 0.0);
  for (int64_t i = 0; i < zt.y.numel(); ++i) CHECK(zt.y.data()[i] == 0.0);

  // identity first FC: tokenization is a pure row-major reshape
  CmafParams<double> ident = p;
  ident.img_w = Td({64, 64});
  for (int i = 0; i < 64; ++i) ident.img_w.data()[i * 64 + i] = 1.0;
  ident.img_b = Td({64});
  TokenPair<double> it = project_common(x, y, ident, cfg);
  for (int b = 0; b < 2; ++b)
    for (int s = 0; s < 8; ++s)
      for (int d = 0; d < 8; ++d)
        CHECK(it.x.data()[(static_cast<int64_t>(b) * 8 + s) * 8 + d] ==
              x.data()[static_cast<int64_t>(b) * 64 + s * 8 + d]);

  Td wrong({2, 32});
  CHECK_THROWS_AS(project_common(wrong, y, p, cfg), ShapeError);
}

TEST_CASE("match degrees: uniform case and row normalization") {
  CmafConfig cfg = small_config();
  Rng rng(5);
  CmafParams<double> p = init_cmaf_params<double>(cfg, rng);

  // zero tokens make every score equal, so beta and rho are uniform 1/S
  TokenPair<double> zero;
  zero.x = Td({2, cfg.tokens, cfg.token_dim});
  zero.y = Td({2, cfg.tokens, cfg.token_dim});
  MatchDegrees<double> mz = match_degrees(zero, p);
  const double u = 1.0 / cfg.tokens;
  for (int64_t i = 0; i < mz.beta.numel(); ++i)
    CHECK(mz.beta.data()[i] == doctest::Approx(u).epsilon(1e-12));
  for (int64_t i = 0; i < mz.rho.numel(); ++i)
    CHECK(mz.rho.data()[i] == doctest::Approx(u).epsilon(1e-12));

  // rows of beta and rho always sum to 1
  TokenPair<double> tok;
  tok.x = random_tensor({3, cfg.tokens, cfg.token_dim}, rng);
  tok.y = random_tensor({3, cfg.tokens, cfg.token_dim}, rng);
  MatchDegrees<double> m = match_degrees(tok, p);
  for (int b = 0; b < 3; ++b)
    for (int r = 0; r < cfg.tokens; ++r) {
      double bsum = 0.0, rsum = 0.0;
      for (int c = 0; c < cfg.tokens; ++c) {
        bsum += m.beta.data()[(static_cast<int64_t>(b) * cfg.tokens + r) * cfg.tokens + c];
        rsum += m.rho.data()[(static_cast<int64_t>(b) * cfg.tokens + r) * cfg.tokens + c];
      }
      CHECK(std::abs(bsum - 1.0) < 1e-6);
      CHECK(std::abs(rsum - 1.0) < 1e-6);
    }
}

TEST_CASE("match degrees and contexts agree with the double-loop reference") {
  refs::CmafRefStats st = refs::cmaf_match_worst(100);
  CHECK(st.worst < 1e-10);
  CHECK(st.worst_rowsum < 1e-6);
  MESSAGE("match/context vs reference, max abs diff over 100 trials: " << st.worst);
}

TEST_CASE("symmetric inputs give identical match degrees in both directions") {
  CmafConfig cfg = small_config();
  Rng rng(6);
  CmafParams<double> p = init_cmaf_params<double>(cfg, rng);
  p.q2_w = p.q1_w.clone();
  p.q2_b = p.q1_b.clone();
  p.k2_w = p.k1_w.clone();
  p.k2_b = p.k1_b.clone();
  TokenPair<double> tok;
  tok.x = random_tensor({2, cfg.tokens, cfg.token_dim}, rng);
  tok.y = tok.x.clone();
  MatchDegrees<double> m = match_degrees(tok, p);
  for (int64_t i = 0; i < m.beta.numel(); ++i)
    CHECK(m.beta.data()[i] == doctest::Approx(m.rho.data()[i]).epsilon(1e-12));
}

TEST_CASE("cross attention: uniform rows average, one-hot rows select") {
  const int B = 1, S = 3, d = 2;
  Rng rng(12);
  TokenPair<double> tok;
  tok.x = random_tensor({B, S, d}, rng);
  tok.y = random_tensor({B, S, d}, rng);
  MatchDegrees<double> m;
  m.beta = Td::full({B, S, S}, 1.0 / S);
  m.rho = Td({B, S, S});
  // one-hot rho: image token j attends only to text token (j+1) mod S
  for (int j = 0; j < S; ++j) m.rho.data()[j * S + (j + 1) % S] = 1.0;
  CrossContexts<double> ctx = cross_attention_apply(m, tok);
  for (int c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int i = 0; i < S; ++i) mean += tok.x.data()[i * d + c];
    mean /= S;
    for (int j = 0; j < S; ++j)
      CHECK(ctx.t2i.data()[j * d + c] == doctest::Approx(mean).epsilon(1e-12));
  }
  for (int j = 0; j < S; ++j)
    for (int c = 0; c < d; ++c)
      CHECK(ctx.i2t.data()[j * d + c] == tok.y.data()[((j + 1) % S) * d + c]);
}

TEST_CASE("fusion head: concat width, zero-weight logit, combine-add mode") {
  CmafConfig cfg;  // defaults: 64 + 2*64 = 192 into the fusion trunk
  Rng rng(9);
  CmafParams<double> p = init_cmaf_params<double>(cfg, rng);
  CHECK(p.fuse_w1.shape() == std::vector<int>{192, 64});
  CHECK(p.fuse_w2.shape() == std::vector<int>{64, 1});

  Rng rsmall(10);
  CmafConfig sc = small_config();
  CmafParams<double> sp = init_cmaf_params<double>(sc, rsmall);
  sp.fuse_w2 = Td({sc.hidden, 1});
  sp.fuse_b2 = Td({1}, {0.31});
  Td x = random_tensor({3, sc.image_dim}, rsmall);
  Td y = random_tensor({3, sc.emr_dim}, rsmall);
  Td logit = cmaf_forward(x, y, sp, sc, false, nullptr);
  REQUIRE(logit.shape() == std::vector<int>{3});
  for (int i = 0; i < 3; ++i)
    CHECK(logit.data()[i] == doctest::Approx(0.31).epsilon(1e-12));

  // combine_add requires matching widths and skips the concatenation
  CmafConfig ac = small_config();
  ac.combine_add = true;
  Rng ra(11);
  CmafParams<double> ap = init_cmaf_params<double>(ac, ra);
  CHECK(ap.fuse_w1.shape() == std::vector<int>{ac.common_dim, ac.hidden});
  Td lx = cmaf_forward(x, y, ap, ac, false, nullptr);
  CHECK(lx.shape() == std::vector<int>{3});

  CmafConfig bad;
  bad.tokens = 5;  // 5 * 8 != 64
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CmafConfig bad2;
  bad2.combine_add = true;
  bad2.image_dim = 32;
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
}

TEST_CASE("gradients flow through the whole stack") {
  CmafConfig cfg = small_config();
  Rng rng(31);
  CmafParams<double> p = init_cmaf_params<double>(cfg, rng);
  GradCheckCase c;
  c.name = "cmaf_small";
  Td x = random_leaf({2, cfg.image_dim}, rng);
  Td y = random_leaf({2, cfg.emr_dim}, rng);
  c.leaves = {x, y, p.img_w, p.emr_w, p.q1_w, p.k1_w, p.q2_w, p.k2_w,
              p.fuse_w1, p.fuse_b1, p.fuse_w2, p.fuse_b2};
  Td proj = Td({2}, {1.3, -0.6});
  c.forward = [=](Tape<double>* t) mutable {
    Td out = cmaf_forward(x, y, p, cfg, false, nullptr, t);
    return ops::sum_all(ops::mul(out, proj, t), t);
  };
  GradCheckResult r = check_gradients(c);
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-4);
}
