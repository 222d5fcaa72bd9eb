#pragma once

#include <functional>
#include <optional>
#include <string>

#include "pemvc/backbone.hpp"
#include "pemvc/cmaf.hpp"
#include "pemvc/emr.hpp"
#include "pemvc/ops.hpp"

namespace pemvc {

// The four experimental arms. full: backbone+MVCS and the EMR MLP feed CMAF;
// image/emr: single-modality heads; nocmaf: both features concatenated into a
// plain FC head.

enum class Arm { full, image, emr, nocmaf };

inline Arm arm_from_string(const std::string& s) {
  if (s == "full") return Arm::full;
  if (s == "image") return Arm::image;
  if (s == "emr") return Arm::emr;
  if (s == "nocmaf") return Arm::nocmaf;
  throw ConfigError("unknown arm '" + s + "' (expected full|image|emr|nocmaf)");
}

inline std::string arm_name(Arm a) {
  switch (a) {
    case Arm::full: return "full";
    case Arm::image: return "image";
    case Arm::emr: return "emr";
    case Arm::nocmaf: return "nocmaf";
  }
  return "?";
}

inline bool arm_uses_image(Arm a) { return a != Arm::emr; }
inline bool arm_uses_emr(Arm a) { return a != Arm::image; }

struct ModelConfig {
  Arm arm = Arm::full;
  BackboneConfig backbone;
  int selected_k = 16;      // EMR columns after selection
  int embed_dim = 32;       // E
  int emr_hidden = 64;
  int emr_feature_dim = 64; // F_emr
  CmafConfig cmaf;
  int fusion_hidden = 64;   // nocmaf head width
  double dropout_p = 0.2;
};

// Salts keep the parameter, shuffle, dropout and frozen-embedding streams
// independent for one run seed.
inline constexpr uint64_t kSaltEmbed = 0x9e3779b97f4a7c15ull;
inline constexpr uint64_t kSaltOrder = 0xbf58476d1ce4e5b9ull;
inline constexpr uint64_t kSaltDropout = 0x94d049bb133111ebull;

template <typename S>
struct ModelParams {
  std::optional<BackboneParams<S>> backbone;
  std::optional<EmbedParams<S>> embed;  // frozen, excluded from SGD
  std::optional<MlpParams<S>> mlp;
  std::optional<CmafParams<S>> cmaf;
  Tensor<S> fusion_w1, fusion_b1, fusion_w2, fusion_b2;  // nocmaf head
};

template <typename S>
ModelParams<S> init_model_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.backbone.validate();
  Rng rng(seed);
  ModelParams<S> p;
  if (arm_uses_image(cfg.arm))
    p.backbone = init_backbone_params<S>(cfg.backbone, rng);
  if (arm_uses_emr(cfg.arm)) {
    p.embed = init_embed_params<S>(cfg.selected_k, cfg.embed_dim, seed ^ kSaltEmbed);
    Rng mlp_rng(seed);
    p.mlp = init_mlp_params<S>(cfg.embed_dim, cfg.emr_hidden, cfg.emr_feature_dim, mlp_rng);
  }
  if (cfg.arm == Arm::full) p.cmaf = init_cmaf_params<S>(cfg.cmaf, rng);
  if (cfg.arm == Arm::nocmaf) {
    const int in = cfg.backbone.feature_dim + cfg.emr_feature_dim;
    p.fusion_w1 = detail::init_affine_w<S>(in, cfg.fusion_hidden, rng);
    p.fusion_b1 = Tensor<S>({cfg.fusion_hidden});
    p.fusion_w2 = Tensor<S>({cfg.fusion_hidden, 1});  // logit layer starts at zero
    p.fusion_b2 = Tensor<S>({1});
  }
  return p;
}

template <typename S>
struct Batch {
  Tensor<S> volumes;       // B x C x D x H x W (image arms)
  Tensor<S> emr_selected;  // B x k (emr arms)
};

template <typename S>
Tensor<S> model_forward(const Batch<S>& batch, ModelParams<S>& p,
                        const ModelConfig& cfg, bool train, Rng* rng,
                        Tape<S>* tape = nullptr) {
  std::optional<BackboneOut<S>> img;
  if (arm_uses_image(cfg.arm)) {
    if (!batch.volumes.defined()) throw UsageError("arm needs volumes in the batch");
    img = backbone_forward(batch.volumes, *p.backbone, cfg.backbone, tape);
  }
  std::optional<MlpOut<S>> emr;
  if (arm_uses_emr(cfg.arm)) {
    if (!batch.emr_selected.defined())
      throw UsageError("arm needs EMR features in the batch");
    Tensor<S> e = embed_records(batch.emr_selected, *p.embed, tape);
    emr = mlp_forward(e, *p.mlp, train, rng, tape, cfg.dropout_p);
  }
  switch (cfg.arm) {
    case Arm::image:
      return img->logit;
    case Arm::emr:
      return emr->logit;
    case Arm::full:
      return cmaf_forward(img->feature, emr->feature, *p.cmaf, cfg.cmaf, train,
                          rng, tape);
    case Arm::nocmaf: {
      Tensor<S> joined = ops::concat_cols<S>({img->feature, emr->feature}, tape);
      Tensor<S> h = ops::relu(ops::affine(joined, p.fusion_w1, p.fusion_b1, tape), tape);
      h = ops::dropout(h, cfg.dropout_p, train, rng, tape);
      Tensor<S> logit2d = ops::affine(h, p.fusion_w2, p.fusion_b2, tape);
      return ops::reshape(logit2d, {joined.dim(0)}, tape);
    }
  }
  throw InternalError("unhandled arm");
}

// Visits every parameter tensor, frozen ones included (checkpoint order).
template <typename S>
void visit_model_params(ModelParams<S>& p,
                        const std::function<void(const std::string&, Tensor<S>&)>& fn) {
  if (p.backbone) visit_backbone_params(*p.backbone, "backbone", fn);
  if (p.embed) {
    fn("embed.w", p.embed->w);
    fn("embed.b", p.embed->b);
  }
  if (p.mlp) visit_mlp_params(*p.mlp, "mlp", fn);
  if (p.cmaf) visit_cmaf_params(*p.cmaf, "cmaf", fn);
  if (p.fusion_w1.defined()) {
    fn("fusion.w1", p.fusion_w1);
    fn("fusion.b1", p.fusion_b1);
    fn("fusion.w2", p.fusion_w2);
    fn("fusion.b2", p.fusion_b2);
  }
}

// SGD view: same order minus the frozen embedding and minus the per-modality
// logit heads when the arm routes the features into fusion instead (those
// layers sit outside the loss graph there and never receive gradients).
template <typename S>
void visit_trainable_params(ModelParams<S>& p, Arm arm,
                            const std::function<void(const std::string&, Tensor<S>&)>& fn) {
  const bool fused = arm == Arm::full || arm == Arm::nocmaf;
  visit_model_params<S>(p, [&fn, fused](const std::string& name, Tensor<S>& t) {
    if (name.rfind("embed.", 0) == 0) return;
    if (fused && (name.rfind("backbone.head.", 0) == 0 || name.rfind("mlp.head.", 0) == 0))
      return;
    fn(name, t);
  });
}

}  // namespace pemvc
