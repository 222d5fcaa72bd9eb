#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "pemvc/backbone.hpp"
#include "pemvc/gradcheck.hpp"
#include "pemvc/ops.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

using namespace pemvc;
using Td = Tensor<double>;

namespace {

Td random_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0,
                 double hi = 1.0) {
  Td t(shape);
  for (auto& v : t.vec()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Small config used where the default backbone would be needlessly heavy.
BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.stem_channels = 4;
  cfg.stage_channels = {4};
  cfg.stage_strides = {2};
  cfg.mvcs_after_stage = {true};
  cfg.feature_dim = 16;
  return cfg;
}

}  // namespace

TEST_CASE("residual block: zero weights pass the input through") {
  Rng rng(2);
  Td x = random_tensor({1, 3, 4, 4, 4}, rng);
  ResBlockParams<double> blk;
  blk.stride = 1;
  blk.conv1.w = Td({3, 3, 3, 3, 3});
  blk.conv1.b = Td({3});
  blk.conv2.w = Td({3, 3, 3, 3, 3});
  blk.conv2.b = Td({3});
  Td y = residual_block3d(x, blk);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("residual block: stride 2 rounds spatial extents up") {
  Rng rng(3);
  Td x = random_tensor({1, 2, 5, 6, 7}, rng);
  ResBlockParams<double> blk;
  blk.stride = 2;
  blk.conv1 = pemvc::detail::init_conv<double>(4, 2, 3, 3, 3, rng);
  blk.conv2 = pemvc::detail::init_conv<double>(4, 4, 3, 3, 3, rng);
  blk.proj = pemvc::detail::init_conv<double>(4, 2, 1, 1, 1, rng);
  Td y = residual_block3d(x, blk);
  // k=3, pad=1, stride=2 gives ceil(n/2) per axis
  CHECK(y.shape() == std::vector<int>{1, 4, 3, 3, 4});
}

TEST_CASE("residual block: gradients match finite differences") {
  Rng rng(7);
  GradCheckCase c;
  c.name = "res_block";
  Td x = random_leaf({1, 2, 4, 4, 4}, rng);
  Td w1 = random_leaf({2, 2, 3, 3, 3}, rng, -0.3, 0.3);
  Td b1 = random_leaf({2}, rng, -0.1, 0.1);
  Td w2 = random_leaf({2, 2, 3, 3, 3}, rng, -0.3, 0.3);
  Td b2 = random_leaf({2}, rng, -0.1, 0.1);
  c.leaves = {x, w1, b1, w2, b2};
  Td proj = random_tensor({1, 2, 4, 4, 4}, rng);
  c.forward = [=](Tape<double>* t) {
    ResBlockParams<double> blk;
    blk.stride = 1;
    blk.conv1.w = w1;
    blk.conv1.b = b1;
    blk.conv2.w = w2;
    blk.conv2.b = b2;
    Td y = residual_block3d(x, blk, t);
    return ops::sum_all(ops::mul(y, proj, t), t);
  };
  GradCheckResult r = check_gradients(c);
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("backbone forward obeys the shape law on the default config") {
  BackboneConfig cfg;  // 1 -> 8 -> {8,16}, feature 64
  Rng rng(11);
  BackboneParams<float> p = init_backbone_params<float>(cfg, rng);
  Tensor<float> vol({2, 1, 16, 32, 32});
  for (auto& v : vol.vec()) v = static_cast<float>(rng.normal() * 0.5);
  BackboneOut<float> out = backbone_forward(vol, p, cfg);
  CHECK(out.feature.shape() == std::vector<int>{2, 64});
  CHECK(out.logit.shape() == std::vector<int>{2});

  Tensor<float> bad({2, 3, 8, 8, 8});
  CHECK_THROWS_AS(backbone_forward(bad, p, cfg), ShapeError);
}

TEST_CASE("backbone treats batch items independently") {
  BackboneConfig cfg = small_config();
  Rng rng(13);
  BackboneParams<double> p = init_backbone_params<double>(cfg, rng);
  Td one = random_tensor({1, 1, 6, 8, 8}, rng);
  Td two({2, 1, 6, 8, 8});
  std::memcpy(two.data(), one.data(), sizeof(double) * one.numel());
  std::memcpy(two.data() + one.numel(), one.data(), sizeof(double) * one.numel());
  BackboneOut<double> out = backbone_forward(two, p, cfg);
  for (int f = 0; f < cfg.feature_dim; ++f)
    CHECK(out.feature.data()[f] == out.feature.data()[cfg.feature_dim + f]);
  CHECK(out.logit.data()[0] == out.logit.data()[1]);

  // and the single-item run sees the same numbers as the batched one
  BackboneOut<double> solo = backbone_forward(one, p, cfg);
  for (int f = 0; f < cfg.feature_dim; ++f)
    CHECK(solo.feature.data()[f] == out.feature.data()[f]);
}

TEST_CASE("backbone init and forward are deterministic in the seed") {
  BackboneConfig cfg = small_config();
  Rng ra(99), rb(99);
  BackboneParams<double> pa = init_backbone_params<double>(cfg, ra);
  BackboneParams<double> pb = init_backbone_params<double>(cfg, rb);
  Rng rx(5);
  Td x = random_tensor({1, 1, 4, 6, 6}, rx);
  Td ya = backbone_forward(x, pa, cfg).feature;
  Td yb = backbone_forward(x, pb, cfg).feature;
  for (int64_t i = 0; i < ya.numel(); ++i) CHECK(ya.data()[i] == yb.data()[i]);
}

TEST_CASE("one SGD step on a 4-sample batch reduces the BCE loss") {
  BackboneConfig cfg = small_config();
  Rng rng(21);
  BackboneParams<double> p = init_backbone_params<double>(cfg, rng);
  Td vol = random_tensor({4, 1, 4, 6, 6}, rng);
  Td labels({4}, {1.0, 0.0, 1.0, 0.0});

  auto loss_and_step = [&](bool step) {
    Tape<double> tape;
    std::vector<Td*> params;
    visit_backbone_params<double>(p, "bb", [&](const std::string&, Td& t) {
      t.set_requires_grad(true);
      params.push_back(&t);
    });
    BackboneOut<double> out = backbone_forward(vol, p, cfg, &tape);
    Td loss = ops::bce_with_logits(out.logit, labels, &tape);
    double v = loss.item();
    if (step) {
      tape.backward(loss);
      sgd_step<double>(params, 0.05);
    }
    return v;
  };
  double before = loss_and_step(true);
  double after = loss_and_step(false);
  CHECK(before == doctest::Approx(std::log(2.0)).epsilon(1e-9));  // zero head
  CHECK(after < before);
}

TEST_CASE("backbone config validation") {
  BackboneConfig cfg;
  cfg.stage_strides = {2};  // length mismatch with stage_channels
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  BackboneConfig cfg2;
  cfg2.stage_channels.clear();
  cfg2.stage_strides.clear();
  cfg2.mvcs_after_stage.clear();
  CHECK_THROWS_AS(cfg2.validate(), ConfigError);
  BackboneConfig cfg3;
  cfg3.feature_dim = 0;
  CHECK_THROWS_AS(cfg3.validate(), ConfigError);
}
