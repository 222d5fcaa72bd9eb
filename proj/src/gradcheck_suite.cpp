#include <algorithm>

#include "pemvc/backbone.hpp"
#include "pemvc/cmaf.hpp"
#include "pemvc/emr.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/harness.hpp"
#include "pemvc/mvcs.hpp"

namespace pemvc {
namespace {

using T = Tensor<double>;
using ops::add;
using ops::mul;
using ops::sum_all;

// Reduce an arbitrary output through a fixed random projection so element
// reorderings and sign errors cannot cancel in the scalar loss.
T fixed_weights(const std::vector<int>& shape, uint64_t seed) {
  Rng rng(seed);
  return random_leaf(shape, rng, -1.0, 1.0);
}

T project(const T& y, const T& w, Tape<double>* tape) {
  return sum_all(mul(y, w, tape), tape);
}

std::vector<GradCheckCase> build_cases() {
  std::vector<GradCheckCase> cases;
  Rng rng(20240517);

  {
    GradCheckCase c;
    c.name = "matmul";
    c.leaves = {random_leaf({3, 4}, rng), random_leaf({4, 2}, rng)};
    T w = fixed_weights({3, 2}, 1);
    c.forward = [a = c.leaves[0], b = c.leaves[1], w](Tape<double>* t) {
      return project(ops::matmul(a, b, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "matmul_batched";
    c.leaves = {random_leaf({2, 3, 4}, rng), random_leaf({2, 4, 2}, rng)};
    T w = fixed_weights({2, 3, 2}, 2);
    c.forward = [a = c.leaves[0], b = c.leaves[1], w](Tape<double>* t) {
      return project(ops::matmul(a, b, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "matmul_broadcast";
    c.leaves = {random_leaf({2, 3, 4}, rng), random_leaf({4, 2}, rng)};
    T w = fixed_weights({2, 3, 2}, 3);
    c.forward = [a = c.leaves[0], b = c.leaves[1], w](Tape<double>* t) {
      return project(ops::matmul(a, b, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "matmul_transpose";
    c.leaves = {random_leaf({4, 3}, rng), random_leaf({2, 4}, rng)};
    T w = fixed_weights({3, 2}, 4);
    c.forward = [a = c.leaves[0], b = c.leaves[1], w](Tape<double>* t) {
      return project(ops::matmul_tt(a, b, true, true, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "affine";
    c.leaves = {random_leaf({3, 4}, rng), random_leaf({4, 2}, rng),
                random_leaf({2}, rng)};
    T w = fixed_weights({3, 2}, 5);
    c.forward = [x = c.leaves[0], W = c.leaves[1], b = c.leaves[2], w](Tape<double>* t) {
      return project(ops::affine(x, W, b, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "conv3d_1x1x1";
    c.leaves = {random_leaf({2, 3, 2, 2, 2}, rng), random_leaf({2, 3, 1, 1, 1}, rng),
                random_leaf({2}, rng)};
    T w = fixed_weights({2, 2, 2, 2, 2}, 6);
    c.forward = [x = c.leaves[0], k = c.leaves[1], b = c.leaves[2], w](Tape<double>* t) {
      return project(ops::conv3d(x, k, b, {1, 1, 1}, {0, 0, 0}, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "conv3d_3x1x1";
    c.leaves = {random_leaf({1, 2, 4, 2, 2}, rng), random_leaf({2, 2, 3, 1, 1}, rng),
                random_leaf({2}, rng)};
    T w = fixed_weights({1, 2, 4, 2, 2}, 7);
    c.forward = [x = c.leaves[0], k = c.leaves[1], b = c.leaves[2], w](Tape<double>* t) {
      return project(ops::conv3d(x, k, b, {1, 1, 1}, {1, 0, 0}, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "conv3d_3x3x3";
    c.leaves = {random_leaf({1, 2, 4, 4, 4}, rng), random_leaf({2, 2, 3, 3, 3}, rng),
                random_leaf({2}, rng)};
    T w = fixed_weights({1, 2, 2, 2, 2}, 8);
    c.forward = [x = c.leaves[0], k = c.leaves[1], b = c.leaves[2], w](Tape<double>* t) {
      return project(ops::conv3d(x, k, b, {2, 2, 2}, {1, 1, 1}, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "softmax_rows";
    c.leaves = {random_leaf({3, 4}, rng, -2.0, 2.0)};
    T w = fixed_weights({3, 4}, 9);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      return project(ops::softmax_rows(x, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "relu";
    c.leaves = {random_leaf({3, 4}, rng, -1.0, 1.0, 0.05)};
    T w = fixed_weights({3, 4}, 10);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      return project(ops::relu(x, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "sigmoid";
    c.leaves = {random_leaf({3, 4}, rng, -3.0, 3.0)};
    T w = fixed_weights({3, 4}, 11);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      return project(ops::sigmoid(x, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "dropout";
    c.leaves = {random_leaf({4, 5}, rng)};
    T w = fixed_weights({4, 5}, 12);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      Rng mask_rng(99);  // fixed mask across finite-difference evaluations
      return project(ops::dropout(x, 0.3, true, &mask_rng, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "permute";
    c.leaves = {random_leaf({2, 3, 4}, rng)};
    T w = fixed_weights({4, 2, 3}, 13);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      return project(ops::permute(x, {2, 0, 1}, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "reshape";
    c.leaves = {random_leaf({2, 6}, rng)};
    T w = fixed_weights({3, 4}, 14);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      return project(ops::reshape(x, {3, 4}, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "add";
    c.leaves = {random_leaf({3, 4}, rng), random_leaf({3, 4}, rng)};
    T w = fixed_weights({3, 4}, 15);
    c.forward = [a = c.leaves[0], b = c.leaves[1], w](Tape<double>* t) {
      return project(add(a, b, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "mul";
    c.leaves = {random_leaf({3, 4}, rng), random_leaf({3, 4}, rng)};
    T w = fixed_weights({3, 4}, 16);
    c.forward = [a = c.leaves[0], b = c.leaves[1], w](Tape<double>* t) {
      return project(mul(a, b, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "scale";
    c.leaves = {random_leaf({3, 4}, rng)};
    T w = fixed_weights({3, 4}, 17);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      return project(ops::scale(x, 1.7, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "concat_cols";
    c.leaves = {random_leaf({3, 2}, rng), random_leaf({3, 3}, rng),
                random_leaf({3, 1}, rng)};
    T w = fixed_weights({3, 6}, 18);
    c.forward = [a = c.leaves[0], b = c.leaves[1], d = c.leaves[2], w](Tape<double>* t) {
      return project(ops::concat_cols<double>({a, b, d}, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "mean_spatial";
    c.leaves = {random_leaf({2, 3, 2, 2, 2}, rng)};
    T w = fixed_weights({2, 3}, 19);
    c.forward = [x = c.leaves[0], w](Tape<double>* t) {
      return project(ops::mean_spatial(x, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "bce_with_logits";
    c.leaves = {random_leaf({6}, rng, -2.0, 2.0)};
    T labels({6});
    const double lv[6] = {1, 0, 1, 1, 0, 0};
    for (int i = 0; i < 6; ++i) labels.data()[i] = lv[i];
    c.forward = [z = c.leaves[0], labels](Tape<double>* t) {
      return ops::bce_with_logits(z, labels, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "mvcs_block";
    Rng prng(7001);
    auto params = std::make_shared<MvcsParams<double>>(init_mvcs_params<double>(2, prng));
    c.leaves.push_back(random_leaf({1, 2, 3, 3, 3}, rng));
    visit_mvcs_params<double>(*params, "p", [&c](const std::string&, Tensor<double>& t) {
      c.leaves.push_back(t);
    });
    T w = fixed_weights({1, 2, 3, 3, 3}, 20);
    MvcsConfig cfg;  // residual on, no similarity scaling
    c.forward = [x = c.leaves[0], params, cfg, w](Tape<double>* t) {
      return project(mvcs_block_forward(x, *params, cfg, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "cmaf_stack";
    CmafConfig cfg;
    cfg.image_dim = 8;
    cfg.emr_dim = 8;
    cfg.common_dim = 8;
    cfg.tokens = 4;
    cfg.token_dim = 2;
    cfg.hidden = 6;
    Rng prng(7002);
    auto params = std::make_shared<CmafParams<double>>(init_cmaf_params<double>(cfg, prng));
    c.leaves.push_back(random_leaf({2, 8}, rng));
    c.leaves.push_back(random_leaf({2, 8}, rng));
    visit_cmaf_params<double>(*params, "p", [&c](const std::string&, Tensor<double>& t) {
      c.leaves.push_back(t);
    });
    T w = fixed_weights({2}, 21);
    c.forward = [x = c.leaves[0], y = c.leaves[1], params, cfg, w](Tape<double>* t) {
      return project(cmaf_forward(x, y, *params, cfg, false, nullptr, t), w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "image_head";
    BackboneConfig cfg;
    cfg.in_channels = 1;
    cfg.stem_channels = 2;
    cfg.stage_channels = {2};
    cfg.stage_strides = {2};
    cfg.mvcs_after_stage = {true};
    cfg.feature_dim = 4;
    Rng prng(7003);
    auto params =
        std::make_shared<BackboneParams<double>>(init_backbone_params<double>(cfg, prng));
    c.leaves.push_back(random_leaf({1, 1, 4, 4, 4}, rng));
    visit_backbone_params<double>(*params, "p",
                                  [&c](const std::string&, Tensor<double>& t) {
                                    c.leaves.push_back(t);
                                  });
    T w = fixed_weights({1}, 22);
    c.forward = [x = c.leaves[0], params, cfg, w](Tape<double>* t) {
      return project(backbone_forward(x, *params, cfg, t).logit, w, t);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "emr_head";
    Rng prng(7004);
    auto embed = std::make_shared<EmbedParams<double>>(init_embed_params<double>(5, 6, 7005));
    auto mlp = std::make_shared<MlpParams<double>>(init_mlp_params<double>(6, 8, 8, prng));
    c.leaves.push_back(random_leaf({4, 5}, rng));
    c.leaves.push_back(embed->w);
    c.leaves.push_back(embed->b);
    visit_mlp_params<double>(*mlp, "p", [&c](const std::string&, Tensor<double>& t) {
      c.leaves.push_back(t);
    });
    T w = fixed_weights({4}, 23);
    c.forward = [x = c.leaves[0], embed, mlp, w](Tape<double>* t) {
      Tensor<double> e = embed_records(x, *embed, t);
      return project(mlp_forward(e, *mlp, false, nullptr, t).logit, w, t);
    };
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace

std::vector<std::string> gradcheck_unit_names() {
  std::vector<std::string> names;
  for (const auto& c : build_cases()) names.push_back(c.name);
  return names;
}

std::vector<GradCheckResult> gradcheck_suite(const std::string& scope) {
  std::vector<GradCheckCase> cases = build_cases();
  if (scope != "all") {
    std::vector<GradCheckCase> filtered;
    for (auto& c : cases)
      if (c.name == scope) filtered.push_back(std::move(c));
    if (filtered.empty()) {
      std::string names;
      for (const auto& c : cases) names += " " + c.name;
      throw UsageError("unknown gradcheck unit '" + scope + "'; known units:" + names);
    }
    cases = std::move(filtered);
  }
  std::vector<GradCheckResult> results;
  for (auto& c : cases) results.push_back(check_gradients(c));
  return results;
}

}  // namespace pemvc
