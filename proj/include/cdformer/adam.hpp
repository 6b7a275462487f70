#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdformer/tensor.hpp"

namespace cdformer {

struct AdamState {
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update of `params` with explicit gradients.
// Moments are allocated on the first call.
inline void adam_step(std::span<const Tensor> params, std::span<const std::vector<double>> grads,
                      AdamState& state) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " +
                     std::to_string(state.first_moment.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].size() || state.first_moment[k].size() != params[k].size()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k) + " " +
                       shape_str(params[k].shape()));
    }
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_values();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
// returns the norm before clipping.
inline double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= f;
  }
  return norm;
}

// Uses each parameter's accumulated gradient (zero where none was recorded).
inline void adam_step(std::span<const Tensor> params, AdamState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adam_step(params, grads, state);
}

}  // namespace cdformer
