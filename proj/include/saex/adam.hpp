#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "saex/error.hpp"

namespace saex {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 6.25e-10;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam step: params -= lr * m_hat / (sqrt(v_hat) + eps).
template <typename T>
void adam_step(std::span<T> params, std::span<const double> grad, AdamState& state, const AdamConfig& cfg) {
  require(params.size() == grad.size() && state.m.size() == params.size() && state.v.size() == params.size(),
          ErrorKind::DimensionMismatch, "adam_step: parameter, gradient and moment sizes differ");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

}  // namespace saex
