#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "pemvc/ops.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc {

// Cross-Modal Attention Fusion. Both modality features are projected to a
// common D_f-dimensional space and re-tokenized as S tokens of width d
// (S*d = D_f). Token-level match degrees run in both directions:
//   s[i,j] = <q1(x_i), k2(y_j)>,  beta[j,i] = exp(s[i,j]) / sum_i exp(s[i,j])
//   t[i,j] = <q2(y_i), k1(x_j)>,  rho analogous
// so each text token j gathers image evidence (and vice versa). The image
// feature plus both flattened contexts feed a small FC classifier.

struct CmafConfig {
  int image_dim = 64;   // F_img
  int emr_dim = 64;     // F_emr
  int common_dim = 64;  // D_f
  int tokens = 8;       // S
  int token_dim = 8;    // d
  int hidden = 64;
  double dropout_p = 0.2;
  bool combine_add = false;  // add contexts to the image feature, not concat

  void validate() const {
    if (tokens * token_dim != common_dim)
      throw ConfigError("cmaf: S*d must equal D_f, got " + std::to_string(tokens) +
                        "*" + std::to_string(token_dim) + " vs " +
                        std::to_string(common_dim));
    if (image_dim < 1 || emr_dim < 1 || hidden < 1)
      throw ConfigError("cmaf: dimensions must be positive");
    if (combine_add && image_dim != common_dim)
      throw ConfigError("cmaf: combine=add needs F_img == D_f");
  }
};

template <typename S>
struct CmafParams {
  Tensor<S> img_w, img_b;  // F_img -> D_f
  Tensor<S> emr_w, emr_b;  // F_emr -> D_f
  Tensor<S> q1_w, q1_b, k1_w, k1_b;  // token maps on image tokens, d -> d
  Tensor<S> q2_w, q2_b, k2_w, k2_b;  // token maps on text tokens
  Tensor<S> fuse_w1, fuse_b1;
  Tensor<S> fuse_w2, fuse_b2;
};

template <typename S>
CmafParams<S> init_cmaf_params(const CmafConfig& cfg, Rng& rng) {
  cfg.validate();
  auto mk = [&rng](int fin, int fout) {
    Tensor<S> w({fin, fout});
    const double std = std::sqrt(2.0 / fin);
    for (auto& v : w.vec()) v = static_cast<S>(rng.normal() * std);
    return w;
  };
  CmafParams<S> p;
  p.img_w = mk(cfg.image_dim, cfg.common_dim);
  p.img_b = Tensor<S>({cfg.common_dim});
  p.emr_w = mk(cfg.emr_dim, cfg.common_dim);
  p.emr_b = Tensor<S>({cfg.common_dim});
  const int d = cfg.token_dim;
  p.q1_w = mk(d, d); p.q1_b = Tensor<S>({d});
  p.k1_w = mk(d, d); p.k1_b = Tensor<S>({d});
  p.q2_w = mk(d, d); p.q2_b = Tensor<S>({d});
  p.k2_w = mk(d, d); p.k2_b = Tensor<S>({d});
  const int fuse_in = cfg.combine_add ? cfg.common_dim : cfg.image_dim + 2 * cfg.common_dim;
  p.fuse_w1 = mk(fuse_in, cfg.hidden);
  p.fuse_b1 = Tensor<S>({cfg.hidden});
  p.fuse_w2 = Tensor<S>({cfg.hidden, 1});  // logit layer starts at zero
  p.fuse_b2 = Tensor<S>({1});
  return p;
}

namespace detail {
// Applies a d -> d map to every token of a B x S x d grid.
template <typename S>
Tensor<S> map_tokens(const Tensor<S>& tokens, const Tensor<S>& w,
                     const Tensor<S>& b, Tape<S>* tape) {
  const int B = tokens.dim(0), Sp = tokens.dim(1), d = tokens.dim(2);
  Tensor<S> flat = ops::reshape(tokens, {B * Sp, d}, tape);
  Tensor<S> mapped = ops::affine(flat, w, b, tape);
  return ops::reshape(mapped, {B, Sp, d}, tape);
}
}  // namespace detail

template <typename S>
struct TokenPair {
  Tensor<S> x, y;  // B x S x d each
};

template <typename S>
TokenPair<S> project_common(const Tensor<S>& x_img, const Tensor<S>& y_emr,
                            CmafParams<S>& params, const CmafConfig& cfg,
                            Tape<S>* tape = nullptr) {
  if (x_img.dim(1) != cfg.image_dim || y_emr.dim(1) != cfg.emr_dim)
    throw ShapeError("project_common: feature widths " + shape_str(x_img.shape()) +
                     ", " + shape_str(y_emr.shape()) + " do not match config");
  const int B = x_img.dim(0);
  TokenPair<S> out;
  Tensor<S> xc = ops::affine(x_img, params.img_w, params.img_b, tape);
  Tensor<S> yc = ops::affine(y_emr, params.emr_w, params.emr_b, tape);
  out.x = ops::reshape(xc, {B, cfg.tokens, cfg.token_dim}, tape);
  out.y = ops::reshape(yc, {B, cfg.tokens, cfg.token_dim}, tape);
  return out;
}

template <typename S>
struct MatchDegrees {
  Tensor<S> s, t;        // raw scores, B x S x S
  Tensor<S> beta, rho;   // row-stochastic match degrees, B x S x S
};

template <typename S>
MatchDegrees<S> match_degrees(const TokenPair<S>& tokens, CmafParams<S>& params,
                              Tape<S>* tape = nullptr) {
  Tensor<S> q1x = detail::map_tokens(tokens.x, params.q1_w, params.q1_b, tape);
  Tensor<S> k1x = detail::map_tokens(tokens.x, params.k1_w, params.k1_b, tape);
  Tensor<S> q2y = detail::map_tokens(tokens.y, params.q2_w, params.q2_b, tape);
  Tensor<S> k2y = detail::map_tokens(tokens.y, params.k2_w, params.k2_b, tape);
  MatchDegrees<S> m;
  m.s = ops::matmul_tt(q1x, k2y, false, true, tape);  // s[b,i,j]
  m.t = ops::matmul_tt(q2y, k1x, false, true, tape);  // t[b,i,j]
  // beta[j,i] normalizes over image tokens i for each text token j, so
  // softmax rows of the transposed score grid.
  m.beta = ops::softmax_rows(ops::permute(m.s, {0, 2, 1}, tape), tape);
  m.rho = ops::softmax_rows(ops::permute(m.t, {0, 2, 1}, tape), tape);
  return m;
}

template <typename S>
struct CrossContexts {
  Tensor<S> t2i;  // B x S x d: image evidence gathered per text token
  Tensor<S> i2t;  // B x S x d: text evidence gathered per image token
};

template <typename S>
CrossContexts<S> cross_attention_apply(const MatchDegrees<S>& match,
                                       const TokenPair<S>& tokens,
                                       Tape<S>* tape = nullptr) {
  CrossContexts<S> ctx;
  ctx.t2i = ops::matmul(match.beta, tokens.x, tape);
  ctx.i2t = ops::matmul(match.rho, tokens.y, tape);
  return ctx;
}

template <typename S>
Tensor<S> fuse_classify(const Tensor<S>& x_img_feature, const CrossContexts<S>& ctx,
                        CmafParams<S>& params, const CmafConfig& cfg, bool train,
                        Rng* rng, Tape<S>* tape = nullptr) {
  const int B = x_img_feature.dim(0);
  const int flat_dim = ctx.t2i.dim(1) * ctx.t2i.dim(2);
  Tensor<S> f_t2i = ops::reshape(ctx.t2i, {B, flat_dim}, tape);
  Tensor<S> f_i2t = ops::reshape(ctx.i2t, {B, flat_dim}, tape);
  Tensor<S> joined;
  if (cfg.combine_add) {
    joined = ops::add(ops::add(x_img_feature, f_t2i, tape), f_i2t, tape);
  } else {
    joined = ops::concat_cols<S>({x_img_feature, f_t2i, f_i2t}, tape);
  }
  Tensor<S> h = ops::relu(ops::affine(joined, params.fuse_w1, params.fuse_b1, tape), tape);
  h = ops::dropout(h, cfg.dropout_p, train, rng, tape);
  Tensor<S> logit2d = ops::affine(h, params.fuse_w2, params.fuse_b2, tape);
  return ops::reshape(logit2d, {B}, tape);
}

template <typename S>
Tensor<S> cmaf_forward(const Tensor<S>& x_img_feature, const Tensor<S>& y_emr_feature,
                       CmafParams<S>& params, const CmafConfig& cfg, bool train,
                       Rng* rng, Tape<S>* tape = nullptr) {
  TokenPair<S> tokens = project_common(x_img_feature, y_emr_feature, params, cfg, tape);
  MatchDegrees<S> match = match_degrees(tokens, params, tape);
  CrossContexts<S> ctx = cross_attention_apply(match, tokens, tape);
  return fuse_classify(x_img_feature, ctx, params, cfg, train, rng, tape);
}

template <typename S>
void visit_cmaf_params(CmafParams<S>& p, const std::string& prefix,
                       const std::function<void(const std::string&, Tensor<S>&)>& fn) {
  fn(prefix + ".img.w", p.img_w);
  fn(prefix + ".img.b", p.img_b);
  fn(prefix + ".emr.w", p.emr_w);
  fn(prefix + ".emr.b", p.emr_b);
  fn(prefix + ".q1.w", p.q1_w); fn(prefix + ".q1.b", p.q1_b);
  fn(prefix + ".k1.w", p.k1_w); fn(prefix + ".k1.b", p.k1_b);
  fn(prefix + ".q2.w", p.q2_w); fn(prefix + ".q2.b", p.q2_b);
  fn(prefix + ".k2.w", p.k2_w); fn(prefix + ".k2.b", p.k2_b);
  fn(prefix + ".fuse.w1", p.fuse_w1);
  fn(prefix + ".fuse.b1", p.fuse_b1);
  fn(prefix + ".fuse.w2", p.fuse_w2);
  fn(prefix + ".fuse.b2", p.fuse_b2);
}

}  // namespace pemvc
