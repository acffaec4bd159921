#pragma once

#include <functional>
#include <string>
#include <vector>

#include "evosam/lora/lora.hpp"
#include "evosam/model/model.hpp"
#include "evosam/numkit/tape.hpp"
#include "evosam/trainer/trainer.hpp"
#include "json.hpp"

namespace evosam::baselines {

using taskforge::Sample;

/// Every method a protocol run knows about. `base` is the untouched pretrained
/// model (zero-shot reference row).
enum class Method { base, seq_ft, ewc, distill, er, evosam, joint };

std::string to_string(Method m);
/// Throws std::invalid_argument for an unknown name.
Method method_from_string(const std::string& s);
/// The row order of the comparison table.
const std::vector<Method>& table_order();
/// True for the methods that fine-tune all (non-prompt) base weights.
bool is_full_finetune(Method m);

struct BaselineConfig {
  double er_ratio = 0.25;
  double distill_w = 1e-5;
  /// Soft-target BCE at temperature `lwf_temperature` instead of logit MSE.
  bool distill_lwf = false;
  double lwf_temperature = 2.0;
  double ewc_w = 100.0;

  void validate() const;
};
void to_json(nlohmann::json& j, const BaselineConfig& c);
void from_json(const nlohmann::json& j, BaselineConfig& c);

/// round(ratio * n) with halves rounded away from zero.
std::size_t replay_count(std::size_t n, double ratio);
/// A seeded choice of replay_count(train.size(), ratio) samples, copied verbatim
/// and kept in their original order.
std::vector<Sample> replay_select(const std::vector<Sample>& train, double ratio, std::uint64_t seed);

/// Per-parameter diagonal importance with the anchor it was measured at.
/// Indices refer to the base ParamStore.
struct FisherDiag {
  std::vector<int> index;
  std::vector<nk::Tensor> fisher;
  std::vector<nk::Tensor> anchor;
};

/// Mean over `data` of squared per-sample loss gradients (unaugmented, one
/// seeded prompt per sample) for the fine-tunable parameters.
FisherDiag estimate_fisher(const std::vector<const Sample*>& data, const model::MiniSam& model,
                           const nk::ParamStore& params, int jitter_max, std::uint64_t seed);

/// (w/2) sum_k sum F_k (theta - theta*_k)^2 over every stored task. When
/// `grads` is given (one tensor per FisherDiag index, same order), the
/// gradient w F_k (theta - theta*_k) is added into it.
double ewc_penalty(const std::vector<FisherDiag>& tasks, const nk::ParamStore& params, double w,
                   std::vector<nk::Tensor>* grads = nullptr);

/// Mean squared difference between student logits and a fixed teacher.
nk::Var distill_mse(nk::Var student, const nk::Tensor& teacher);
/// Mean binary cross-entropy of sigmoid(student/T) against sigmoid(teacher/T).
nk::Var distill_lwf(nk::Var student, const nk::Tensor& teacher, double temperature);

/// Called after every completed stage with the weights the stage produced.
using StageFn = std::function<void(int stage, const nk::ParamStore& params, const trainer::LossCurve& curve)>;

/// Full fine-tuning of encoder and decoder over the stream (the training sets
/// in sequence order), starting from a copy of `base`. `method` is one of
/// seq_ft, er, distill, ewc. `first_stage` > 1 resumes from `start` (the
/// weights after stage first_stage-1); the replay buffers and EWC statistics
/// of the skipped stages are rebuilt from their stored weights via `weights_of`.
struct ResumeState {
  int first_stage = 1;
  nk::ParamStore start;
  std::function<nk::ParamStore(int stage)> weights_of;
};
void run_finetune(Method method, const std::vector<const std::vector<Sample>*>& stream, const model::MiniSam& model,
                  const nk::ParamStore& base, const trainer::TrainConfig& cfg, const BaselineConfig& bc,
                  const StageFn& on_stage, const ResumeState* resume = nullptr);

/// One encoder and one decoder expert trained on the union of the training
/// sets (concatenated in task-index order).
trainer::LossCurve joint(const std::vector<const std::vector<Sample>*>& tasks, const model::MiniSam& model,
                         const nk::ParamStore& base, lora::ExpertPool& pool, const trainer::TrainConfig& cfg);

}  // namespace evosam::baselines
