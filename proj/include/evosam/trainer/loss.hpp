#pragma once

#include "evosam/model/image.hpp"
#include "evosam/numkit/tape.hpp"

namespace evosam::trainer {

inline constexpr double kDiceEps = 1e-6;

struct LossParts {
  double dice = 0;
  double bce = 0;
  double total() const { return dice + bce; }
};

/// Soft dice + mean BCE on sigmoid(logits), equal weights. `logits` holds one
/// value per pixel in row-major order.
LossParts dice_bce(const nk::Tensor& logits, const Mask& gt, double eps = kDiceEps);

/// Differentiable version of dice_bce; returns a 1-element Var.
nk::Var dice_bce_loss(nk::Var logits, const Mask& gt, double eps = kDiceEps);

}  // namespace evosam::trainer
