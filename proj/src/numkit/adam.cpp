#include "evosam/numkit/adam.hpp"

#include <cmath>

namespace evosam::nk {

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& st) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("adam_step: grad shape " + shape_str(grads[i].shape()) + " vs param " +
                       shape_str(params[i]->shape()));
    }
    if (!grads[i].all_finite()) {
      throw NumericError("adam_step: non-finite gradient in parameter slot " + std::to_string(i) + " at step " +
                         std::to_string(st.step + 1));
    }
  }
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam_step: state built for a different parameter set");

  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const real b1 = static_cast<real>(st.beta1), b2 = static_cast<real>(st.beta2);
  const real step_size = static_cast<real>(st.lr / bc1);
  const real inv_sqrt_bc2 = static_cast<real>(1.0 / std::sqrt(bc2));
  const real eps = static_cast<real>(st.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    real* p = params[i]->ptr();
    const real* g = grads[i].ptr();
    real* m = st.m[i].ptr();
    real* v = st.v[i].ptr();
    const std::size_t n = grads[i].size();
    for (std::size_t k = 0; k < n; ++k) {
      m[k] = b1 * m[k] + (real(1) - b1) * g[k];
      v[k] = b2 * v[k] + (real(1) - b2) * g[k] * g[k];
      p[k] -= step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
    }
  }
}

}  // namespace evosam::nk
