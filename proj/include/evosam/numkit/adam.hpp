#pragma once

#include <span>

#include "evosam/numkit/tensor.hpp"

namespace evosam::nk {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  explicit AdamState(double learning_rate = 1e-3) : lr(learning_rate) {}
};

/// One bias-corrected Adam update. Moments are created lazily on the first
/// call and must keep matching the parameter shapes afterwards.
/// Throws NumericError if any gradient entry is NaN or infinite.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& st);

}  // namespace evosam::nk
