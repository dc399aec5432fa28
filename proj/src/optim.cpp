#include "fedmeta/optim.hpp"

#include <cmath>

#include "fedmeta/errors.hpp"

namespace fedmeta {

ParamSet adam_step(const ParamSet &params, const ParamSet &grad,
                   AdamState &state, double lr, double weight_decay,
                   const AdamHyper &hyper) {
  params.require_same_layout(grad, "adam_step");
  if (!grad.all_finite())
    throw NonFiniteError("adam_step: non-finite gradient");
  const std::size_t n = params.size();
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
    state.step = 0;
  } else if (state.m.size() != n) {
    throw LayoutError("adam_step: optimizer state sized for another layout");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);

  ParamSet out = params;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    out[i] -= lr * (mhat / (std::sqrt(vhat) + hyper.eps) + weight_decay * params[i]);
  }
  if (!out.all_finite())
    throw NonFiniteError("adam_step: update produced non-finite parameters");
  return out;
}

ParamSet sgd_step(const ParamSet &params, const ParamSet &grad, double lr) {
  params.require_same_layout(grad, "sgd_step");
  ParamSet out = params;
  out.axpy(-lr, grad);
  if (!out.all_finite())
    throw NonFiniteError("sgd_step: update produced non-finite parameters");
  return out;
}

} // namespace fedmeta
