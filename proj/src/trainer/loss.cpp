#include "evosam/trainer/loss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

namespace evosam::trainer {

namespace {

struct Forward {
  LossParts parts;
  std::vector<double> prob;
  double inter = 0, denom = 0;
};

Forward evaluate(const nk::Tensor& logits, const Mask& gt, double eps) {
  if (logits.size() != gt.px.size()) {
    throw nk::ShapeError("loss: " + std::to_string(logits.size()) + " logits vs " + std::to_string(gt.px.size()) +
                         " mask pixels");
  }
  const std::size_t n = logits.size();
  Forward f;
  f.prob.resize(n);
  double sp = 0, sg = 0, bce = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits[i];
    const double g = gt.px[i] ? 1.0 : 0.0;
    const double p = 1.0 / (1.0 + std::exp(-z));
    f.prob[i] = p;
    f.inter += p * g;
    sp += p;
    sg += g;
    // -(g log p + (1-g) log(1-p)) = softplus(z) - g z, stable for large |z|.
    bce += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - g * z;
  }
  if (!std::isfinite(bce) || !std::isfinite(sp)) throw nk::NumericError("loss: non-finite logits");
  f.denom = sp + sg;
  f.parts.dice = 1.0 - (2.0 * f.inter + eps) / (f.denom + eps);
  f.parts.bce = bce / static_cast<double>(n);
  return f;
}

}  // namespace

LossParts dice_bce(const nk::Tensor& logits, const Mask& gt, double eps) { return evaluate(logits, gt, eps).parts; }

nk::Var dice_bce_loss(nk::Var logits, const Mask& gt, double eps) {
  auto f = std::make_shared<Forward>(evaluate(logits.value(), gt, eps));
  auto g = std::make_shared<std::vector<std::uint8_t>>(gt.px);
  const nk::real total = static_cast<nk::real>(f->parts.total());
  return logits.tape->record(nk::Tensor({1}, total), {logits}, [il = logits.id, f, g, eps](nk::Tape& t, int self) {
    const double seed = t.grad_of(self)[0];
    nk::Tensor& gl = t.grad_acc(il);
    const std::size_t n = f->prob.size();
    const double num = 2.0 * f->inter + eps;
    const double den = f->denom + eps;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = f->prob[i];
      const double gi = (*g)[i] ? 1.0 : 0.0;
      const double d_dice_dp = -(2.0 * gi * den - num) / (den * den);
      const double d_dz = d_dice_dp * p * (1.0 - p) + (p - gi) / static_cast<double>(n);
      gl[i] += static_cast<nk::real>(seed * d_dz);
    }
  });
}

}  // namespace evosam::trainer
