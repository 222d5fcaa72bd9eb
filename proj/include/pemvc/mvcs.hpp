#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pemvc/ops.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc {

// Multi-View Coupled Self-Attention. A B x C x D x H x W volume is unfolded
// into three channels-last views, one per spatial axis folded into the batch:
//   view 0: (B*D) x H x W x C
//   view 1: (B*H) x W x D x C
//   view 2: (B*W) x H x D x C
// Each view gets spatial and channel attention from per-view 1x1 qkv
// projections; a shared 3x1x1 qkv triple drives attention along each view's
// fold axis. The nine attended tensors are summed in canonical layout.

template <typename S>
struct ViewSet {
  std::array<Tensor<S>, 3> views;
  std::vector<int> origin_shape;                  // B,C,D,H,W
  std::array<std::vector<int>, 3> forward_perm;   // canonical -> view axes
  std::array<std::vector<int>, 3> inverse_perm;
  std::array<int, 3> fold_extent;                 // D, H, W
};

template <typename S>
struct QkvTriple {
  Tensor<S> key, query, value;
  int channels = 0;  // C'
};

namespace detail {
inline std::vector<int> invert_perm(const std::vector<int>& order) {
  std::vector<int> inv(order.size());
  for (size_t i = 0; i < order.size(); ++i)
    inv[static_cast<size_t>(order[i])] = static_cast<int>(i);
  return inv;
}
}  // namespace detail

template <typename S>
ViewSet<S> make_views(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  if (x.rank() != 5) {
    throw ShapeError("make_views: expected B x C x D x H x W input, got " +
                     shape_str(x.shape()));
  }
  const int B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  ViewSet<S> vs;
  vs.origin_shape = {B, C, D, H, W};
  vs.forward_perm = {std::vector<int>{0, 2, 3, 4, 1},   // B,D,H,W,C
                     std::vector<int>{0, 3, 4, 2, 1},   // B,H,W,D,C
                     std::vector<int>{0, 4, 3, 2, 1}};  // B,W,H,D,C
  vs.fold_extent = {D, H, W};
  const std::array<std::vector<int>, 3> folded = {
      std::vector<int>{B * D, H, W, C}, std::vector<int>{B * H, W, D, C},
      std::vector<int>{B * W, H, D, C}};
  for (int t = 0; t < 3; ++t) {
    auto ti = static_cast<size_t>(t);
    vs.inverse_perm[ti] = detail::invert_perm(vs.forward_perm[ti]);
    Tensor<S> p = ops::permute(x, vs.forward_perm[ti], tape);
    vs.views[ti] = ops::reshape(p, folded[ti], tape);
  }
  return vs;
}

// Folds a view-layout tensor back to canonical B x C x D x H x W.
template <typename S>
Tensor<S> unfold_view(const ViewSet<S>& vs, int t, const Tensor<S>& view_tensor,
                      Tape<S>* tape = nullptr) {
  auto ti = static_cast<size_t>(t);
  const auto& os = vs.origin_shape;
  std::vector<int> staged(5);
  staged[0] = os[0];
  staged[1] = vs.fold_extent[ti];
  staged[2] = view_tensor.dim(1);
  staged[3] = view_tensor.dim(2);
  staged[4] = view_tensor.dim(3);
  Tensor<S> r = ops::reshape(view_tensor, staged, tape);
  return ops::permute(r, vs.inverse_perm[ti], tape);
}

// Pointwise C -> C' channel map; the 1x1 convolution of a channels-last view.
template <typename S>
struct ChannelMap {
  Tensor<S> w;  // C x C'
  Tensor<S> b;  // C'
};

template <typename S>
Tensor<S> apply_channel_map(const Tensor<S>& view, const ChannelMap<S>& map,
                            Tape<S>* tape = nullptr) {
  const int C = view.dim(view.rank() - 1);
  if (map.w.dim(0) != C) {
    throw ShapeError("channel map expects " + std::to_string(map.w.dim(0)) +
                     " input channels, view has " + std::to_string(C));
  }
  const int n = static_cast<int>(view.numel() / C);
  Tensor<S> flat = ops::reshape(view, {n, C}, tape);
  Tensor<S> mapped = ops::affine(flat, map.w, map.b, tape);
  std::vector<int> out_shape = view.shape();
  out_shape.back() = map.w.dim(1);
  return ops::reshape(mapped, out_shape, tape);
}

template <typename S>
QkvTriple<S> qkv_project(const Tensor<S>& view,
                         const std::array<ChannelMap<S>, 3>& maps,
                         Tape<S>* tape = nullptr) {
  QkvTriple<S> t;
  t.key = apply_channel_map(view, maps[0], tape);
  t.query = apply_channel_map(view, maps[1], tape);
  t.value = apply_channel_map(view, maps[2], tape);
  t.channels = t.key.dim(t.key.rank() - 1);
  return t;
}

// Per folded-batch slice: M_S = q (S x C') * k^T (C' x S), row-softmaxed and
// applied to the value rows. S is the in-plane element count of the view.
template <typename S>
Tensor<S> spatial_attention(const QkvTriple<S>& t, bool scale_similarity = false,
                            Tape<S>* tape = nullptr) {
  const int N = t.query.dim(0), h = t.query.dim(1), w = t.query.dim(2);
  const int Cp = t.channels, Sp = h * w;
  Tensor<S> q = ops::reshape(t.query, {N, Sp, Cp}, tape);
  Tensor<S> k = ops::reshape(t.key, {N, Sp, Cp}, tape);
  Tensor<S> v = ops::reshape(t.value, {N, Sp, Cp}, tape);
  Tensor<S> m = ops::matmul_tt(q, k, false, true, tape);
  if (scale_similarity)
    m = ops::scale(m, static_cast<S>(1.0 / std::sqrt(static_cast<double>(Cp))), tape);
  Tensor<S> a = ops::softmax_rows(m, tape);
  Tensor<S> out = ops::matmul(a, v, tape);
  return ops::reshape(out, {N, h, w, Cp}, tape);
}

// M_C = k^T (C' x S) * q (S x C'); each output channel is a convex mix of
// value channels.
template <typename S>
Tensor<S> channel_attention(const QkvTriple<S>& t, bool scale_similarity = false,
                            Tape<S>* tape = nullptr) {
  const int N = t.query.dim(0), h = t.query.dim(1), w = t.query.dim(2);
  const int Cp = t.channels, Sp = h * w;
  Tensor<S> q = ops::reshape(t.query, {N, Sp, Cp}, tape);
  Tensor<S> k = ops::reshape(t.key, {N, Sp, Cp}, tape);
  Tensor<S> v = ops::reshape(t.value, {N, Sp, Cp}, tape);
  Tensor<S> m = ops::matmul_tt(k, q, true, false, tape);
  if (scale_similarity)
    m = ops::scale(m, static_cast<S>(1.0 / std::sqrt(static_cast<double>(Sp))), tape);
  Tensor<S> a = ops::softmax_rows(m, tape);
  Tensor<S> out = ops::matmul_tt(v, a, false, true, tape);
  return ops::reshape(out, {N, h, w, Cp}, tape);
}

// Shared 3x1x1 depth-convolution triple feeding dimensional attention.
template <typename S>
struct DepthQkv {
  std::array<Tensor<S>, 3> w;  // k,q,v: C x C x 3 x 1 x 1
  std::array<Tensor<S>, 3> b;
};

template <typename S>
QkvTriple<S> depth_qkv(const Tensor<S>& x, const DepthQkv<S>& params,
                       Tape<S>* tape = nullptr) {
  const std::array<int, 3> stride{1, 1, 1}, pad{1, 0, 0};
  QkvTriple<S> t;
  t.key = ops::conv3d(x, params.w[0], params.b[0], stride, pad, tape);
  t.query = ops::conv3d(x, params.w[1], params.b[1], stride, pad, tape);
  t.value = ops::conv3d(x, params.w[2], params.b[2], stride, pad, tape);
  t.channels = t.key.dim(1);
  return t;
}

// Attention along one canonical axis (the fold axis of a view), driven by
// key/query/value tensors produced from 3x1x1 depth convolutions. Per batch
// item: M_D = q (L x rest) * k^T, softmaxed rows mix the value slices.
template <typename S>
Tensor<S> dimensional_attention(const Tensor<S>& key, const Tensor<S>& query,
                                const Tensor<S>& value, int axis,
                                bool scale_similarity = false,
                                Tape<S>* tape = nullptr) {
  if (axis < 2 || axis > 4) {
    throw ShapeError("dimensional_attention: axis must identify D, H or W");
  }
  std::vector<int> order{0, axis};
  for (int a = 1; a < 5; ++a)
    if (a != axis) order.push_back(a);
  const int B = query.dim(0), L = query.dim(axis);
  const int R = static_cast<int>(query.numel() / (static_cast<int64_t>(B) * L));

  auto fold = [&](const Tensor<S>& x) {
    Tensor<S> p = ops::permute(x, order, tape);
    return ops::reshape(p, {B, L, R}, tape);
  };
  Tensor<S> q = fold(query), k = fold(key), v = fold(value);
  Tensor<S> m = ops::matmul_tt(q, k, false, true, tape);
  if (scale_similarity)
    m = ops::scale(m, static_cast<S>(1.0 / std::sqrt(static_cast<double>(R))), tape);
  Tensor<S> a = ops::softmax_rows(m, tape);
  Tensor<S> out = ops::matmul(a, v, tape);

  std::vector<int> staged(5);
  for (int i = 0; i < 5; ++i)
    staged[static_cast<size_t>(i)] = query.dim(order[static_cast<size_t>(i)]);
  Tensor<S> r = ops::reshape(out, staged, tape);
  return ops::permute(r, detail::invert_perm(order), tape);
}

// Convenience form: run the depth convolutions, then attend along view t's
// fold axis (D, H, W for t = 0, 1, 2).
template <typename S>
Tensor<S> dimensional_attention(const Tensor<S>& x, const DepthQkv<S>& params,
                                int view_t, bool scale_similarity = false,
                                Tape<S>* tape = nullptr) {
  if (view_t < 0 || view_t > 2) throw UsageError("view index must be 0, 1 or 2");
  QkvTriple<S> t = depth_qkv(x, params, tape);
  return dimensional_attention(t.key, t.query, t.value, 2 + view_t,
                               scale_similarity, tape);
}

template <typename S>
struct MvcsParams {
  std::array<std::array<ChannelMap<S>, 3>, 3> view_maps;  // [view][k,q,v]
  DepthQkv<S> depth;
};

struct MvcsConfig {
  bool residual = true;          // skip connection around the block
  bool scale_similarity = false; // optional 1/sqrt(dim) on similarity scores
  int channel_ratio = 1;         // C' = C / ratio for the 1x1 projections
};

template <typename S>
MvcsParams<S> init_mvcs_params(int channels, Rng& rng, int channel_ratio = 1) {
  if (channel_ratio < 1 || channels % channel_ratio != 0) {
    throw ConfigError("mvcs: channel ratio must divide the channel count");
  }
  const int cp = channels / channel_ratio;
  MvcsParams<S> p;
  // He fan-in for key/query; value maps start an order of magnitude smaller
  // so the nine-way attention sum begins near zero and the residual keeps the
  // block near identity — otherwise activations grow ~4x per block and logits
  // overflow within one training step.
  const double std_1x1 = std::sqrt(2.0 / channels);
  const double kValueGain = 0.1;
  for (auto& view : p.view_maps) {
    for (int m = 0; m < 3; ++m) {
      const double sd = (m == 2) ? std_1x1 * kValueGain : std_1x1;
      auto& cm = view[static_cast<size_t>(m)];
      cm.w = Tensor<S>({channels, cp});
      for (auto& v : cm.w.vec()) v = static_cast<S>(rng.normal() * sd);
      cm.b = Tensor<S>({cp});
    }
  }
  const double std_depth = std::sqrt(2.0 / (3.0 * channels));
  for (int i = 0; i < 3; ++i) {
    auto ii = static_cast<size_t>(i);
    const double sd = (i == 2) ? std_depth * kValueGain : std_depth;
    p.depth.w[ii] = Tensor<S>({channels, channels, 3, 1, 1});
    for (auto& v : p.depth.w[ii].vec()) v = static_cast<S>(rng.normal() * sd);
    p.depth.b[ii] = Tensor<S>({channels});
  }
  return p;
}

// Identity-configured parameters: 1x1 maps are identity matrices and the
// depth convolutions are center-tap deltas, so every k/q/v equals its input.
template <typename S>
MvcsParams<S> identity_mvcs_params(int channels) {
  MvcsParams<S> p;
  for (auto& view : p.view_maps)
    for (auto& m : view) {
      m.w = Tensor<S>({channels, channels});
      for (int c = 0; c < channels; ++c) m.w.data()[c * channels + c] = S(1);
      m.b = Tensor<S>({channels});
    }
  for (int i = 0; i < 3; ++i) {
    auto ii = static_cast<size_t>(i);
    p.depth.w[ii] = Tensor<S>({channels, channels, 3, 1, 1});
    for (int c = 0; c < channels; ++c)
      p.depth.w[ii].data()[(static_cast<int64_t>(c) * channels + c) * 3 + 1] = S(1);
    p.depth.b[ii] = Tensor<S>({channels});
  }
  return p;
}

template <typename S>
void visit_mvcs_params(MvcsParams<S>& p, const std::string& prefix,
                       const std::function<void(const std::string&, Tensor<S>&)>& fn) {
  static const char* kMap[3] = {"k", "q", "v"};
  for (int t = 0; t < 3; ++t)
    for (int m = 0; m < 3; ++m) {
      auto& cm = p.view_maps[static_cast<size_t>(t)][static_cast<size_t>(m)];
      std::string base = prefix + ".view" + std::to_string(t) + "." + kMap[m];
      fn(base + ".w", cm.w);
      fn(base + ".b", cm.b);
    }
  for (int m = 0; m < 3; ++m) {
    std::string base = prefix + ".depth." + std::string(kMap[m]);
    fn(base + ".w", p.depth.w[static_cast<size_t>(m)]);
    fn(base + ".b", p.depth.b[static_cast<size_t>(m)]);
  }
}

// Full block: spatial + channel attention per view from the per-view 1x1
// triples, plus fold-axis attention per view from the shared 3x1x1 triple,
// all summed in canonical layout; optional residual input.
template <typename S>
Tensor<S> mvcs_block_forward(const Tensor<S>& x, MvcsParams<S>& params,
                             const MvcsConfig& cfg, Tape<S>* tape = nullptr) {
  const int C = x.dim(1);
  if (params.view_maps[0][0].w.dim(1) != C) {
    throw ConfigError(
        "mvcs_block_forward: C' must equal C for the three-way sum, got C'=" +
        std::to_string(params.view_maps[0][0].w.dim(1)) + " with C=" +
        std::to_string(C));
  }
  ViewSet<S> vs = make_views(x, tape);
  Tensor<S> acc;
  for (int t = 0; t < 3; ++t) {
    auto ti = static_cast<size_t>(t);
    QkvTriple<S> triple = qkv_project(vs.views[ti], params.view_maps[ti], tape);
    Tensor<S> sp = spatial_attention(triple, cfg.scale_similarity, tape);
    Tensor<S> ch = channel_attention(triple, cfg.scale_similarity, tape);
    Tensor<S> both = unfold_view(vs, t, ops::add(sp, ch, tape), tape);
    acc = acc.defined() ? ops::add(acc, both, tape) : both;
  }
  QkvTriple<S> depth = depth_qkv(x, params.depth, tape);
  for (int t = 0; t < 3; ++t) {
    Tensor<S> d = dimensional_attention(depth.key, depth.query, depth.value,
                                        2 + t, cfg.scale_similarity, tape);
    acc = ops::add(acc, d, tape);
  }
  if (cfg.residual) acc = ops::add(acc, x, tape);
  return acc;
}

}  // namespace pemvc
