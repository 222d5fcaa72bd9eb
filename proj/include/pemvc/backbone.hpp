#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pemvc/mvcs.hpp"
#include "pemvc/ops.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc {

// Toy 3D residual network: stem conv, a short stack of strided residual
// blocks with an MVCS block after each flagged stage, global average pool,
// then affines to the image feature vector and an image-only logit.

struct BackboneConfig {
  int in_channels = 1;
  int stem_channels = 8;
  std::vector<int> stage_channels = {8, 16};
  std::vector<int> stage_strides = {2, 2};
  std::vector<bool> mvcs_after_stage = {true, true};
  int feature_dim = 64;  // F_img
  MvcsConfig mvcs;

  void validate() const {
    if (stage_channels.empty()) throw ConfigError("backbone: stage list empty");
    if (stage_strides.size() != stage_channels.size() ||
        mvcs_after_stage.size() != stage_channels.size()) {
      throw ConfigError("backbone: per-stage lists must have equal length");
    }
    if (in_channels < 1 || stem_channels < 1 || feature_dim < 1)
      throw ConfigError("backbone: extents must be positive");
    for (int c : stage_channels)
      if (c < 1) throw ConfigError("backbone: stage channels must be positive");
    for (int s : stage_strides)
      if (s < 1) throw ConfigError("backbone: strides must be positive");
  }
};

template <typename S>
struct Conv3dParams {
  Tensor<S> w;  // Cout x Cin x kd x kh x kw
  Tensor<S> b;  // Cout
};

template <typename S>
struct ResBlockParams {
  Conv3dParams<S> conv1, conv2;
  std::optional<Conv3dParams<S>> proj;  // 1x1x1 shortcut when shape changes
  int stride = 1;
};

template <typename S>
struct BackboneParams {
  Conv3dParams<S> stem;
  std::vector<ResBlockParams<S>> blocks;
  std::vector<std::optional<MvcsParams<S>>> mvcs;  // aligned with blocks
  Tensor<S> feat_w, feat_b;  // C_last -> F_img
  Tensor<S> head_w, head_b;  // F_img -> 1
};

namespace detail {
template <typename S>
Conv3dParams<S> init_conv(int cout, int cin, int kd, int kh, int kw, Rng& rng) {
  Conv3dParams<S> p;
  p.w = Tensor<S>({cout, cin, kd, kh, kw});
  const double std = std::sqrt(2.0 / (static_cast<double>(cin) * kd * kh * kw));
  for (auto& v : p.w.vec()) v = static_cast<S>(rng.normal() * std);
  p.b = Tensor<S>({cout});
  return p;
}

template <typename S>
Tensor<S> init_affine_w(int fin, int fout, Rng& rng) {
  Tensor<S> w({fin, fout});
  const double std = std::sqrt(2.0 / fin);
  for (auto& v : w.vec()) v = static_cast<S>(rng.normal() * std);
  return w;
}
}  // namespace detail

template <typename S>
BackboneParams<S> init_backbone_params(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  BackboneParams<S> p;
  p.stem = detail::init_conv<S>(cfg.stem_channels, cfg.in_channels, 3, 3, 3, rng);
  int prev = cfg.stem_channels;
  for (size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    const int ch = cfg.stage_channels[i];
    ResBlockParams<S> blk;
    blk.stride = cfg.stage_strides[i];
    blk.conv1 = detail::init_conv<S>(ch, prev, 3, 3, 3, rng);
    blk.conv2 = detail::init_conv<S>(ch, ch, 3, 3, 3, rng);
    if (blk.stride != 1 || prev != ch)
      blk.proj = detail::init_conv<S>(ch, prev, 1, 1, 1, rng);
    p.blocks.push_back(std::move(blk));
    if (cfg.mvcs_after_stage[i])
      p.mvcs.emplace_back(init_mvcs_params<S>(ch, rng, cfg.mvcs.channel_ratio));
    else
      p.mvcs.emplace_back(std::nullopt);
    prev = ch;
  }
  p.feat_w = detail::init_affine_w<S>(prev, cfg.feature_dim, rng);
  p.feat_b = Tensor<S>({cfg.feature_dim});
  // Logit layer starts at zero: the first batches then see loss ln 2 and
  // bounded gradients instead of hot random logits that SGD overshoots.
  p.head_w = Tensor<S>({cfg.feature_dim, 1});
  p.head_b = Tensor<S>({1});
  return p;
}

// Two 3x3x3 convolutions with a ReLU between them, plus an identity shortcut
// (1x1x1-projected when the stride or channel count changes). No activation
// after the sum, so a zero-weight block is exactly the identity.
template <typename S>
Tensor<S> residual_block3d(const Tensor<S>& x, const ResBlockParams<S>& params,
                           Tape<S>* tape = nullptr) {
  const std::array<int, 3> s1{params.stride, params.stride, params.stride};
  const std::array<int, 3> s_unit{1, 1, 1};
  const std::array<int, 3> pad{1, 1, 1}, pad0{0, 0, 0};
  Tensor<S> h = ops::conv3d(x, params.conv1.w, params.conv1.b, s1, pad, tape);
  h = ops::relu(h, tape);
  h = ops::conv3d(h, params.conv2.w, params.conv2.b, s_unit, pad, tape);
  Tensor<S> shortcut = x;
  if (params.proj)
    shortcut = ops::conv3d(x, params.proj->w, params.proj->b, s1, pad0, tape);
  return ops::add(h, shortcut, tape);
}

template <typename S>
struct BackboneOut {
  Tensor<S> feature;  // B x F_img
  Tensor<S> logit;    // B
};

template <typename S>
BackboneOut<S> backbone_forward(const Tensor<S>& volume, BackboneParams<S>& params,
                                const BackboneConfig& cfg, Tape<S>* tape = nullptr) {
  if (volume.rank() != 5 || volume.dim(1) != cfg.in_channels) {
    throw ShapeError("backbone_forward: expected B x " +
                     std::to_string(cfg.in_channels) + " x D x H x W, got " +
                     shape_str(volume.shape()));
  }
  const std::array<int, 3> s_unit{1, 1, 1}, pad{1, 1, 1};
  Tensor<S> h = ops::conv3d(volume, params.stem.w, params.stem.b, s_unit, pad, tape);
  h = ops::relu(h, tape);
  for (size_t i = 0; i < params.blocks.size(); ++i) {
    h = residual_block3d(h, params.blocks[i], tape);
    if (params.mvcs[i]) h = mvcs_block_forward(h, *params.mvcs[i], cfg.mvcs, tape);
  }
  Tensor<S> pooled = ops::mean_spatial(h, tape);
  Tensor<S> feature = ops::affine(pooled, params.feat_w, params.feat_b, tape);
  Tensor<S> logit2d = ops::affine(feature, params.head_w, params.head_b, tape);
  BackboneOut<S> out;
  out.feature = feature;
  out.logit = ops::reshape(logit2d, {volume.dim(0)}, tape);
  return out;
}

template <typename S>
void visit_backbone_params(BackboneParams<S>& p, const std::string& prefix,
                           const std::function<void(const std::string&, Tensor<S>&)>& fn) {
  fn(prefix + ".stem.w", p.stem.w);
  fn(prefix + ".stem.b", p.stem.b);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    std::string base = prefix + ".stage" + std::to_string(i);
    auto& blk = p.blocks[i];
    fn(base + ".conv1.w", blk.conv1.w);
    fn(base + ".conv1.b", blk.conv1.b);
    fn(base + ".conv2.w", blk.conv2.w);
    fn(base + ".conv2.b", blk.conv2.b);
    if (blk.proj) {
      fn(base + ".proj.w", blk.proj->w);
      fn(base + ".proj.b", blk.proj->b);
    }
    if (p.mvcs[i]) visit_mvcs_params(*p.mvcs[i], base + ".mvcs", fn);
  }
  fn(prefix + ".feat.w", p.feat_w);
  fn(prefix + ".feat.b", p.feat_b);
  fn(prefix + ".head.w", p.head_w);
  fn(prefix + ".head.b", p.head_b);
}

}  // namespace pemvc
