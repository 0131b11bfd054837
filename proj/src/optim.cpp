#include "retro/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace retro::optim {

template <typename T>
void adam_step(std::vector<tensor::Tensor<T>>& params, AdamState<T>& state,
               const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("Adam state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) {
      throw std::invalid_argument("Adam state shape mismatch for parameter " +
                                  std::to_string(i));
    }
    for (T g : params[i].grad()) {
      if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient");
    }
  }
  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto g = p.grad();  // empty means zero gradient
    auto w = p.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g.empty() ? T(0) : g[j];
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      const double mhat = double(m[j]) / bc1;
      const double vhat = double(v[j]) / bc2;
      w[j] -= T(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  state.step = t;
}

template <typename T>
double clip_grad_norm(std::vector<tensor::Tensor<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (T g : p.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = T(max_norm / (norm + 1e-6));
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.grad_mut()) g *= s;
    }
  }
  return norm;
}

template void adam_step(std::vector<tensor::Tensor<float>>&, AdamState<float>&,
                        const AdamConfig&);
template void adam_step(std::vector<tensor::Tensor<double>>&, AdamState<double>&,
                        const AdamConfig&);
template double clip_grad_norm(std::vector<tensor::Tensor<float>>&, double);
template double clip_grad_norm(std::vector<tensor::Tensor<double>>&, double);

}  // namespace retro::optim
