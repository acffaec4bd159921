#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evosam/lora/lora.hpp"
#include "evosam/model/model.hpp"
#include "evosam/numkit/rng.hpp"
#include "evosam/taskforge/taskforge.hpp"
#include "json.hpp"

namespace evosam::trainer {

using taskforge::Sample;

struct TrainConfig {
  int epochs = 20;
  int batch = 8;
  double lr_lora = 1e-3;
  double lr_full = 1e-4;
  int jitter_max = 8;
  bool augment = true;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Tight box of the mask, each side pushed outward by an independent uniform
/// integer in [0, jitter_max] and clipped to the image.
BoxPrompt simulate_prompt(const Mask& gt, int jitter_max, nk::Rng& rng);

/// One draw of the augmentation pipeline. A default-constructed value is the identity.
struct AugmentParams {
  bool crop = false;
  int crop_x = 0, crop_y = 0, crop_size = 0;
  bool hflip = false;
  bool vflip = false;
  int rot90 = 0;  // quarter turns counter-clockwise: 0, 1 or 3
  bool color = false;
  double brightness = 1, contrast = 1, saturation = 1, hue = 0;

  bool identity() const { return !crop && !hflip && !vflip && rot90 == 0 && !color; }
};

/// Each transform is drawn independently with probability `p`. Colour factors
/// lie in [0.8, 1.2]; the hue shift in [-0.1, 0.1] turns.
AugmentParams draw_augment(nk::Rng& rng, int image_size, double p = 0.5);
/// Geometric transforms move image and mask together. A crop that would
/// leave fewer than 10 foreground pixels is skipped.
Sample apply_augment(const Sample& s, const AugmentParams& a);
inline Sample augment(const Sample& s, nk::Rng& rng) { return apply_augment(s, draw_augment(rng, s.image.width)); }

/// (stage, epoch, loss) rows; epoch 0 is measured before the first update.
struct LossCurve {
  struct Row {
    int stage;
    int epoch;
    double loss;
  };
  std::vector<Row> rows;

  void append_csv(const std::filesystem::path& path) const;
};

/// A training example as seen by an optimizer step.
struct Example {
  const Image* image;
  const Mask* mask;
  BoxPrompt box;
};

/// Adds d(loss)/d(param) of one example into `grads` and returns the loss.
using SampleGrad = std::function<double(const Example&, std::span<nk::Tensor> grads)>;
/// Loss of one example without gradients (used for the fixed-batch curve).
using SampleLoss = std::function<double(const Example&)>;
/// Optional whole-parameter term: adds its gradient into `grads` and returns its value.
using Regularizer = std::function<double(std::span<nk::Tensor> grads)>;

/// Mini-batch Adam over `data`: per epoch a seeded shuffle, then for every
/// example augmentation (if enabled) and a freshly simulated prompt. Batch
/// gradients are averaged before the regularizer is added. Loss on a fixed,
/// unaugmented batch is logged before training and after every epoch.
LossCurve optimize(const std::vector<const Sample*>& data, const TrainConfig& cfg, double lr,
                   std::span<nk::Tensor* const> params, const SampleGrad& sample_grad, const SampleLoss& sample_loss,
                   int stage, const Regularizer& regularizer = {});

/// Trains a fresh encoder expert and first decoder expert; both are frozen on
/// return and pushed into `pool`, which must be empty.
LossCurve train_first_task(const std::vector<const Sample*>& data, const model::MiniSam& model,
                           const nk::ParamStore& base, lora::ExpertPool& pool, const TrainConfig& cfg);

/// Clones the newest decoder expert, trains only the clone, freezes and appends it.
LossCurve train_subsequent_task(const std::vector<const Sample*>& data, const model::MiniSam& model,
                                const nk::ParamStore& base, lora::ExpertPool& pool, const TrainConfig& cfg);

/// True for every base parameter a fine-tuning method may update (all but the prompt encoder).
bool is_finetunable(const std::string& param_name);

/// Full-parameter training of the base model from scratch on the generic set.
struct PretrainConfig {
  int epochs = 30;
  int batch = 8;
  double lr = 1e-3;
  int jitter_max = 6;
  std::uint64_t seed = 11;
};
nk::ParamStore pretrain(const std::vector<const Sample*>& data, const model::MiniSam& model, const PretrainConfig& cfg,
                        LossCurve* curve = nullptr);

std::vector<const Sample*> pointers(const std::vector<Sample>& v);

}  // namespace evosam::trainer
