#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cdformer/tensor.hpp"

namespace cdformer {

// Central-difference estimate of d f / d x, one coordinate at a time.
// `x` is perturbed in place and restored, so f must read it afresh on every
// call.
inline std::vector<double> finite_diff_gradient(const std::function<double()>& f,
                                                const Tensor& x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_gradient: step must be positive");
  auto values = x.mutable_values();
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double fp = f();
    values[i] = saved - h;
    const double fm = f();
    values[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_gradient: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Overload for a function of a tensor value: f receives a fresh leaf holding
// the perturbed values.
inline std::vector<double> finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                                                const Tensor& x, double h) {
  Tensor probe = Tensor::from(x.shape(), x.to_vector());
  return finite_diff_gradient([&] { return f(probe.detach()); }, probe, h);
}

struct GradCompare {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;  // |a - b| / max(|a|, |b|, atol)
  bool ok = true;
};

// Elementwise |a - b| <= atol + rtol * max(|a|, |b|).
inline GradCompare compare_gradients(const std::vector<double>& analytic,
                                     const std::vector<double>& numeric, double rtol,
                                     double atol) {
  GradCompare c;
  if (analytic.size() != numeric.size()) {
    c.ok = false;
    return c;
  }
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - numeric[i]);
    const double mag = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
    c.max_abs_error = std::max(c.max_abs_error, diff);
    c.max_rel_error = std::max(c.max_rel_error, diff / std::max({mag, atol, 1e-300}));
    if (!(diff <= atol + rtol * mag)) c.ok = false;
  }
  return c;
}

}  // namespace cdformer
