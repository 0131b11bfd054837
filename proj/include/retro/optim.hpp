#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retro/tensor.hpp"

namespace retro::optim {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments, one pair per parameter in registration order.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update at step state.step + 1. Parameters without a
/// gradient are treated as having a zero gradient. Throws "non-finite
/// gradient" before touching anything if any gradient entry is NaN or inf.
template <typename T>
void adam_step(std::vector<tensor::Tensor<T>>& params, AdamState<T>& state,
               const AdamConfig& cfg);

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<tensor::Tensor<T>>& params, double max_norm);

}  // namespace retro::optim
