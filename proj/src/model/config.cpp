#include "evosam/model/config.hpp"

#include <stdexcept>
#include <string>

namespace evosam {

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("ModelConfig: " + why); };
  if (image_size <= 0 || patch <= 0 || channels != 3) fail("image_size/patch must be positive and channels 3");
  if (image_size % patch != 0) fail("image_size must be divisible by patch");
  if (patch != 8) fail("mask head upsamples 8x: patch must be 8");
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (d_model % 2 != 0) fail("d_model must be even for Fourier features");
  if (lora_rank <= 0 || lora_rank >= d_model) fail("lora_rank must satisfy 0 < r < d_model");
  if (enc_layers <= 0 || dec_layers <= 0 || mlp_ratio <= 0 || head_channels <= 0) fail("layer counts must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_size", c.image_size}, {"channels", c.channels},   {"patch", c.patch},
       {"d_model", c.d_model},       {"heads", c.heads},         {"enc_layers", c.enc_layers},
       {"dec_layers", c.dec_layers}, {"lora_rank", c.lora_rank}, {"mlp_ratio", c.mlp_ratio},
       {"head_channels", c.head_channels}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.channels = j.value("channels", d.channels);
  c.patch = j.value("patch", d.patch);
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.enc_layers = j.value("enc_layers", d.enc_layers);
  c.dec_layers = j.value("dec_layers", d.dec_layers);
  c.lora_rank = j.value("lora_rank", d.lora_rank);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.head_channels = j.value("head_channels", d.head_channels);
}

}  // namespace evosam
