#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evosam/model/config.hpp"
#include "evosam/numkit/params.hpp"

namespace evosam::lora {

enum class ExpertKind { encoder, decoder };

std::string to_string(ExpertKind k);

/// Standard deviation of the Gaussian used for A; B starts at zero.
inline constexpr double kInitStd = 0.02;

/// Number of adapted attention instances: one per encoder layer, or three per
/// decoder block (token self-attention and both cross-attention directions).
int attention_slots(const ModelConfig& cfg, ExpertKind kind);

/// Tensor indices of one slot inside an expert's ParamStore.
struct SlotIndex {
  int q_a, q_b, v_a, v_b;
};
inline SlotIndex slot_index(int slot) { return {4 * slot, 4 * slot + 1, 4 * slot + 2, 4 * slot + 3}; }

/// W + A B. Throws nk::ShapeError on incompatible shapes.
nk::Tensor merged_weight(const nk::Tensor& w, const nk::Tensor& a, const nk::Tensor& b);

class FrozenExpertError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// One set of (A, B) pairs for the Q and V projections of every adapted
/// attention layer. Once frozen an expert is read-only for good.
class Expert {
 public:
  static Expert init(const ModelConfig& cfg, ExpertKind kind, int task_index, std::uint64_t seed);

  ExpertKind kind() const { return kind_; }
  int task_index() const { return task_index_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  const nk::ParamStore& params() const { return params_; }
  /// Throws FrozenExpertError once frozen.
  nk::ParamStore& trainable_params();

  /// Deep copy assigned to `task_index`, trainable. The source must be frozen.
  Expert clone_for_task(int task_index) const;

  std::size_t parameter_count() const { return params_.total_elements(); }

  void save(const std::filesystem::path& path) const { nk::save_checkpoint(params_, path); }
  static Expert load(const std::filesystem::path& path, ExpertKind kind, int task_index, bool frozen);

 private:
  Expert(ExpertKind kind, int task_index, nk::ParamStore params)
      : kind_(kind), task_index_(task_index), params_(std::move(params)) {}

  ExpertKind kind_;
  int task_index_;
  bool frozen_ = false;
  nk::ParamStore params_;
};

/// The encoder expert (trained on the first task only) plus one decoder
/// expert per task, in task order (task indices start at 1).
class ExpertPool {
 public:
  bool has_encoder() const { return encoder_.has_value(); }
  const Expert& encoder() const;
  Expert& encoder_mut();
  void set_encoder(Expert e);

  int size() const { return static_cast<int>(decoders_.size()); }
  bool empty() const { return decoders_.empty(); }
  const Expert& decoder(int task_index) const;
  Expert& decoder_mut(int task_index);
  /// Appends; the expert's task index must be size()+1.
  void push_decoder(Expert e);

  /// Writes one checkpoint per expert plus `pool.json` listing files, task
  /// indices and freeze status.
  void save(const std::filesystem::path& dir) const;
  static ExpertPool load(const std::filesystem::path& dir);

 private:
  std::optional<Expert> encoder_;
  std::vector<Expert> decoders_;
};

}  // namespace evosam::lora
