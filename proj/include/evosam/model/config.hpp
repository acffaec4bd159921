#pragma once

#include "json.hpp"

namespace evosam {

struct ModelConfig {
  int image_size = 64;
  int channels = 3;
  int patch = 8;
  int d_model = 64;
  int heads = 4;
  int enc_layers = 4;
  int dec_layers = 2;
  int lora_rank = 4;
  int mlp_ratio = 4;
  /// Channel width of the full-resolution features in the mask head.
  int head_channels = 32;

  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid(); }
  int pixels() const { return image_size * image_size; }

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace evosam
