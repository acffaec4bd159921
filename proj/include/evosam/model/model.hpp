#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evosam/model/config.hpp"
#include "evosam/model/image.hpp"
#include "evosam/numkit/ops.hpp"
#include "evosam/numkit/params.hpp"

namespace evosam::model {

/// Output of the image encoder: the token grid plus the full-resolution pixel
/// features the mask head reads.
struct ImageEmbedding {
  nk::Tensor tokens;  // (grid*grid) x d
  nk::Tensor pixels;  // (S*S) x 3, centred RGB
};

/// Sparse corner tokens plus a dense in-box indicator map.
struct PromptEmbedding {
  nk::Tensor tokens;  // 2 x d
  nk::Tensor dense;   // (S*S) x 1
};

struct MaskLogits {
  nk::Tensor logits;  // S x S
  /// Foreground where logit > 0.
  Mask binarize() const;
};

class ConfigMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A ParamStore placed on a tape, one Var per tensor in store order.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(nk::Tape& tape, const nk::ParamStore& store, bool requires_grad);
  BoundParams(nk::Tape& tape, const nk::ParamStore& store, const std::function<bool(int)>& requires_grad);

  nk::Var operator[](int i) const { return vars_.at(static_cast<std::size_t>(i)); }
  int size() const { return static_cast<int>(vars_.size()); }
  const std::vector<nk::Var>& vars() const { return vars_; }

 private:
  std::vector<nk::Var> vars_;
};

struct AttentionWeights {
  nk::Var wq, wk, wv, wo;
};

struct LoraVars {
  nk::Var a, b;
};

/// softmax(Q K^T / sqrt(d_head)) V W_o with Q = Q_in W_q, K = K_in W_k,
/// V = V_in W_v. An attached pair adds Q_in A B (resp. V_in A B), which is
/// the same as projecting with W + A B.
nk::Var attention(nk::Var q_in, nk::Var k_in, nk::Var v_in, const AttentionWeights& w, const LoraVars* q_lora,
                  const LoraVars* v_lora, int heads);

/// Plain ViT encoder, frozen Fourier prompt encoder, two-way decoder and an
/// upsampling mask head.
class MiniSam {
 public:
  explicit MiniSam(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  /// Fresh base parameters (the pretraining starting point).
  nk::ParamStore init_params(std::uint64_t seed) const;
  /// Throws ConfigMismatch unless `base` has this model's layout.
  void check_params(const nk::ParamStore& base) const;
  void check_adapter(const nk::ParamStore& adapter, bool encoder) const;

  static bool is_prompt_encoder_param(const std::string& name) { return name.rfind("pr.", 0) == 0; }

  // Differentiable path.
  nk::Var encode(nk::Tape& tape, const BoundParams& base, const BoundParams* enc_lora, const Image& x) const;
  nk::Var decode(nk::Tape& tape, const BoundParams& base, const BoundParams* dec_lora, nk::Var image_tokens,
                 const nk::Tensor& pixels, const PromptEmbedding& prompt) const;
  /// Full forward; returns the (S*S) x 1 logit column.
  nk::Var forward(nk::Tape& tape, const BoundParams& base, const BoundParams* enc_lora, const BoundParams* dec_lora,
                  const Image& x, const BoxPrompt& box) const;

  // Inference path.
  ImageEmbedding encode_image(const nk::ParamStore& base, const Image& x, const nk::ParamStore* enc_lora) const;
  PromptEmbedding encode_prompt(const nk::ParamStore& base, const BoxPrompt& box) const;
  MaskLogits decode_mask(const nk::ParamStore& base, const ImageEmbedding& emb, const PromptEmbedding& prompt,
                         const nk::ParamStore* dec_lora) const;
  MaskLogits predict(const nk::ParamStore& base, const Image& x, const BoxPrompt& box, const nk::ParamStore* enc_lora,
                     const nk::ParamStore* dec_lora) const;

  /// Fourier features [sin 2pi c.F, cos 2pi c.F] of a normalized (x, y) point.
  std::vector<nk::real> fourier(const nk::Tensor& freq, double x, double y) const;
  nk::Tensor pixel_features(const Image& x) const;
  /// Image patches flattened to (grid*grid) x (patch*patch*3), centred.
  nk::Tensor patchify(const Image& x) const;

 private:
  struct AttnIdx {
    int wq, wk, wv, wo;
  };
  struct NormIdx {
    int g, b;
  };
  struct MlpIdx {
    int w1, b1, w2, b2;
  };
  struct EncLayer {
    NormIdx ln1;
    AttnIdx attn;
    NormIdx ln2;
    MlpIdx mlp;
  };
  struct DecBlock {
    AttnIdx self_attn, t2i, i2t;
    NormIdx ln1, ln2, ln3, ln4;
    MlpIdx mlp;
  };
  struct Spec {
    std::string name;
    nk::Shape shape;
    enum Init { normal, zeros, ones } init;
    double std;
  };

  int declare(std::string name, nk::Shape shape, Spec::Init init, double std = 0.0);
  AttnIdx declare_attn(const std::string& prefix);
  NormIdx declare_norm(const std::string& prefix);
  MlpIdx declare_mlp(const std::string& prefix, int hidden);

  AttentionWeights attn_vars(const BoundParams& p, const AttnIdx& a) const;
  nk::Var mlp(const BoundParams& p, const MlpIdx& m, nk::Var x) const;
  nk::Var norm(const BoundParams& p, const NormIdx& n, nk::Var x) const;
  nk::Var adapted_attention(const BoundParams& base, const AttnIdx& idx, const BoundParams* lora, int slot, nk::Var q,
                            nk::Var k, nk::Var v) const;
  nk::Tensor image_pe(const nk::Tensor& freq) const;
  PromptEmbedding prompt_from(const nk::Tensor& freq, const nk::Tensor& corner, const BoxPrompt& box) const;

  ModelConfig cfg_;
  std::vector<Spec> specs_;
  int patch_w_ = -1, patch_b_ = -1, pos_ = -1;
  std::vector<EncLayer> enc_;
  NormIdx enc_norm_{};
  int freq_ = -1, corner_ = -1;
  int mask_token_ = -1;
  std::vector<DecBlock> dec_;
  int up1_w_ = -1, up1_b_ = -1, up2_w_ = -1, up2_b_ = -1, skip_w_ = -1, skip_b_ = -1, fine_w_ = -1, fine_b_ = -1, film_w_ = -1,
      hyper_w_ = -1, hyper_b_ = -1;
};

}  // namespace evosam::model
