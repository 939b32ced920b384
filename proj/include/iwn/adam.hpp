#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "iwn/tape.hpp"

namespace iwn {

// First/second moment buffers per parameter plus the shared step counter.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;

  template <typename Params>
  static AdamState init(const Params& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
    return s;
  }
};

// Standard bias-corrected Adam update using each param's grad buffer.
// Returns false (and leaves params and moments untouched) if any gradient
// is non-finite; the step counter still advances only on applied steps.
template <typename T>
bool adam_step(std::vector<Param<T>>& params, AdamState<T>& state, T lr,
               T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
  if (params.size() != state.m.size())
    throw std::invalid_argument("adam_step: state does not match params");
  for (const auto& p : params)
    for (const T g : p.grad)
      if (!std::isfinite(static_cast<double>(g))) return false;

  state.t += 1;
  const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1),
                                               static_cast<double>(state.t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2),
                                               static_cast<double>(state.t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const T g = p.grad[j];
      m[j] = beta1 * m[j] + (T(1) - beta1) * g;
      v[j] = beta2 * v[j] + (T(1) - beta2) * g * g;
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  return true;
}

}  // namespace iwn
