#pragma once

#include <cstdint>
#include <vector>

#include "fedmeta/param_set.hpp"

namespace fedmeta {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments plus step count. Single owner.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// Adam with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
// Throws NonFiniteError on a non-finite gradient.
ParamSet adam_step(const ParamSet &params, const ParamSet &grad,
                   AdamState &state, double lr, double weight_decay,
                   const AdamHyper &hyper = {});

// p - lr * g
ParamSet sgd_step(const ParamSet &params, const ParamSet &grad, double lr);

} // namespace fedmeta
