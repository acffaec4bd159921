#include "evosam/lora/lora.hpp"

#include <fstream>

#include "evosam/numkit/ops.hpp"
#include "evosam/numkit/rng.hpp"
#include "json.hpp"

namespace evosam::lora {

std::string to_string(ExpertKind k) { return k == ExpertKind::encoder ? "encoder" : "decoder"; }

int attention_slots(const ModelConfig& cfg, ExpertKind kind) {
  return kind == ExpertKind::encoder ? cfg.enc_layers : 3 * cfg.dec_layers;
}

nk::Tensor merged_weight(const nk::Tensor& w, const nk::Tensor& a, const nk::Tensor& b) {
  nk::Tensor ab = nk::matmul(a, b);
  if (ab.shape() != w.shape()) {
    throw nk::ShapeError("merged_weight: A*B is " + nk::shape_str(ab.shape()) + " but W is " + nk::shape_str(w.shape()));
  }
  for (std::size_t i = 0; i < ab.size(); ++i) ab[i] += w[i];
  return ab;
}

Expert Expert::init(const ModelConfig& cfg, ExpertKind kind, int task_index, std::uint64_t seed) {
  cfg.validate();
  const int d = cfg.d_model, r = cfg.lora_rank;
  nk::Rng rng(seed);
  nk::ParamStore ps;
  const std::string prefix = kind == ExpertKind::encoder ? "enc." : "dec.";
  for (int s = 0; s < attention_slots(cfg, kind); ++s) {
    for (const char* proj : {"q", "v"}) {
      nk::Tensor a({d, r});
      for (auto& v : a.data()) v = static_cast<nk::real>(rng.normal(0.0, kInitStd));
      const std::string base = prefix + std::to_string(s) + "." + proj;
      ps.add(base + ".A", std::move(a));
      ps.add(base + ".B", nk::Tensor({r, d}));
    }
  }
  return Expert(kind, task_index, std::move(ps));
}

nk::ParamStore& Expert::trainable_params() {
  if (frozen_) {
    throw FrozenExpertError("expert for task " + std::to_string(task_index_) + " (" + to_string(kind_) +
                            ") is frozen");
  }
  return params_;
}

Expert Expert::clone_for_task(int task_index) const {
  if (!frozen_) throw std::logic_error("clone_for_task: source expert must be frozen");
  return Expert(kind_, task_index, params_);
}

Expert Expert::load(const std::filesystem::path& path, ExpertKind kind, int task_index, bool frozen) {
  Expert e(kind, task_index, nk::load_checkpoint(path));
  if (frozen) e.freeze();
  return e;
}

const Expert& ExpertPool::encoder() const {
  if (!encoder_) throw std::logic_error("expert pool has no encoder expert");
  return *encoder_;
}

Expert& ExpertPool::encoder_mut() {
  if (!encoder_) throw std::logic_error("expert pool has no encoder expert");
  return *encoder_;
}

void ExpertPool::set_encoder(Expert e) {
  if (e.kind() != ExpertKind::encoder) throw std::invalid_argument("set_encoder: not an encoder expert");
  if (encoder_ && encoder_->frozen()) throw FrozenExpertError("encoder expert is frozen and cannot be replaced");
  encoder_ = std::move(e);
}

const Expert& ExpertPool::decoder(int task_index) const {
  if (task_index < 1 || task_index > size()) {
    throw std::out_of_range("no decoder expert for task " + std::to_string(task_index));
  }
  return decoders_[static_cast<std::size_t>(task_index - 1)];
}

Expert& ExpertPool::decoder_mut(int task_index) {
  if (task_index < 1 || task_index > size()) {
    throw std::out_of_range("no decoder expert for task " + std::to_string(task_index));
  }
  return decoders_[static_cast<std::size_t>(task_index - 1)];
}

void ExpertPool::push_decoder(Expert e) {
  if (e.kind() != ExpertKind::decoder) throw std::invalid_argument("push_decoder: not a decoder expert");
  if (e.task_index() != size() + 1) {
    throw std::invalid_argument("push_decoder: expected task " + std::to_string(size() + 1) + ", got " +
                                std::to_string(e.task_index()));
  }
  decoders_.push_back(std::move(e));
}

void ExpertPool::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["experts"] = nlohmann::json::array();
  if (encoder_) {
    encoder_->save(dir / "encoder.bin");
    manifest["experts"].push_back(
        {{"kind", "encoder"}, {"file", "encoder.bin"}, {"task", encoder_->task_index()}, {"frozen", encoder_->frozen()}});
  }
  for (const auto& e : decoders_) {
    const std::string file = "decoder_" + std::to_string(e.task_index()) + ".bin";
    e.save(dir / file);
    manifest["experts"].push_back({{"kind", "decoder"}, {"file", file}, {"task", e.task_index()}, {"frozen", e.frozen()}});
  }
  std::ofstream f(dir / "pool.json", std::ios::trunc);
  f << manifest.dump(2) << "\n";
}

ExpertPool ExpertPool::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "pool.json");
  if (!f) throw nk::CheckpointError("missing pool manifest in " + dir.string());
  nlohmann::json manifest;
  f >> manifest;
  ExpertPool pool;
  for (const auto& e : manifest.at("experts")) {
    const bool is_enc = e.at("kind").get<std::string>() == "encoder";
    Expert ex = Expert::load(dir / e.at("file").get<std::string>(), is_enc ? ExpertKind::encoder : ExpertKind::decoder,
                             e.at("task").get<int>(), e.at("frozen").get<bool>());
    if (is_enc) {
      pool.encoder_ = std::move(ex);
    } else {
      pool.push_decoder(std::move(ex));
    }
  }
  return pool;
}

}  // namespace evosam::lora
