#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cdformer/tensor.hpp"

namespace cdformer {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

inline void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input value");
  }
}

// Elementwise unary op given f(x) and df/dx expressed through (x, y).
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xin = self.parents[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      (*gx)[i] += self.grad[i] * df(xin[i], self.value[i]);
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = detail::parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] / bv[i];
    }
    if (auto* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        (*g)[i] -= self.grad[i] * self.value[i] / bv[i];
      }
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::abs(x); },
                       [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

// GELU, tanh approximation.
inline Tensor gelu(const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return detail::unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(k * (x + c * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "minimum");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a[i], b[i]);
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    auto* ga = detail::parent_grad(self, 0);
    auto* gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (av[i] <= bv[i]) {
        if (ga) (*ga)[i] += self.grad[i];
      } else if (gb) {
        (*gb)[i] += self.grad[i];
      }
    }
  });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "maximum");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a[i], b[i]);
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    auto* ga = detail::parent_grad(self, 0);
    auto* gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (av[i] >= bv[i]) {
        if (ga) (*ga)[i] += self.grad[i];
      } else if (gb) {
        (*gb)[i] += self.grad[i];
      }
    }
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result(std::move(shape), a.to_vector(), {a}, [](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return detail::make_result({}, {s}, {a}, [](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (double& x : *g) x += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) return Tensor::scalar(0.0);
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& go = self.grad;
    if (auto* ga = detail::parent_grad(self, 0)) {
      // dA = dO * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * bv[p * n + j];
          (*ga)[i * k + p] += s;
        }
      }
    }
    if (auto* gb = detail::parent_grad(self, 1)) {
      // dB = A^T * dO
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * go[i * n + j];
        }
      }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
    }
  });
}

// x[m x n] + bias broadcast over rows; bias is [n] or [1 x n].
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_row_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) {
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(x.to_vector());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias[j];
  return detail::make_result(x.shape(), std::move(out), {x, bias}, [m, n](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
    }
  });
}

// Row-wise softmax, stabilized by subtracting each row's maximum.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("softmax_rows: rows must have at least one column");
  detail::require_finite(x.values(), "softmax_rows");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &x.values()[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [m, n](detail::Node& self) {
    auto* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        (*g)[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
      }
    }
  });
}

inline Tensor log_softmax_rows(const Tensor& x) {
  detail::require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("log_softmax_rows: rows must have at least one column");
  detail::require_finite(x.values(), "log_softmax_rows");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &x.values()[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [m, n](detail::Node& self) {
    auto* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        (*g)[i * n + j] += self.grad[i * n + j] - std::exp(self.value[i * n + j]) * gs;
      }
    }
  });
}

// Each row normalized to zero mean and unit variance (no affine part).
inline Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &x.values()[i * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mu) * inv_std[i];
  }
  return detail::make_result(
      x.shape(), std::move(out), {x}, [m, n, inv_std = std::move(inv_std)](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        if (!g) return;
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double gsum = 0.0, gdot = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            gsum += self.grad[i * n + j];
            gdot += self.grad[i * n + j] * self.value[i * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            (*g)[i * n + j] += inv_std[i] * (self.grad[i * n + j] - inv_n * gsum -
                                             self.value[i * n + j] * inv_n * gdot);
          }
        }
      });
}

// [m x d1] ++ [m x d2] -> [m x (d1 + d2)]
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "concat_channels");
  detail::require_matrix(b, "concat_channels");
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_channels: leading extents differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), d1 = a.cols(), d2 = b.cols(), d = d1 + d2;
  std::vector<double> out(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d1; ++j) out[i * d + j] = a[i * d1 + j];
    for (std::size_t j = 0; j < d2; ++j) out[i * d + d1 + j] = b[i * d2 + j];
  }
  return detail::make_result({m, d}, std::move(out), {a, b}, [m, d1, d2, d](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d1; ++j) (*g)[i * d1 + j] += self.grad[i * d + j];
    }
    if (auto* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d2; ++j) (*g)[i * d2 + j] += self.grad[i * d + d1 + j];
    }
  });
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Tensor out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat_channels(out, parts[i]);
  return out;
}

// Columns [begin, begin + count) of a matrix.
inline Tensor slice_columns(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_columns");
  const std::size_t m = x.rows(), n = x.cols();
  if (begin + count > n) {
    throw ShapeError("slice_columns: range exceeds " + shape_str(x.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + begin + j];
  return detail::make_result({m, count}, std::move(out), {x},
                             [m, n, begin, count](detail::Node& self) {
                               auto* g = detail::parent_grad(self, 0);
                               if (!g) return;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < count; ++j)
                                   (*g)[i * n + begin + j] += self.grad[i * count + j];
                             });
}

// One output row: a row of some source tensor, or an exact zero row when
// `source` is undefined.
struct RowSource {
  Tensor source;
  std::size_t row = 0;
};

// Assembles a [rows x width] matrix from row sources. Vectors count as a
// single row. Zero rows have no inputs and therefore no gradient.
inline Tensor stack_rows(const std::vector<RowSource>& rows, std::size_t width) {
  std::vector<Tensor> inputs;
  std::vector<std::pair<std::size_t, std::size_t>> link(rows.size(), {SIZE_MAX, 0});
  std::vector<double> out(rows.size() * width, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& src = rows[r];
    if (!src.source.defined()) continue;
    if (src.source.cols() != width || src.row >= src.source.rows()) {
      throw ShapeError("stack_rows: source " + shape_str(src.source.shape()) + " row " +
                       std::to_string(src.row) + " incompatible with width " +
                       std::to_string(width));
    }
    std::size_t k = 0;
    for (; k < inputs.size(); ++k)
      if (inputs[k].node() == src.source.node()) break;
    if (k == inputs.size()) inputs.push_back(src.source);
    link[r] = {k, src.row};
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = src.source[src.row * width + j];
  }
  return detail::make_result({rows.size(), width}, std::move(out), inputs,
                             [link = std::move(link), width](detail::Node& self) {
                               for (std::size_t r = 0; r < link.size(); ++r) {
                                 if (link[r].first == SIZE_MAX) continue;
                                 auto* g = detail::parent_grad(self, link[r].first);
                                 if (!g) continue;
                                 for (std::size_t j = 0; j < width; ++j)
                                   (*g)[link[r].second * width + j] += self.grad[r * width + j];
                               }
                             });
}

// Sum of elementwise binary cross-entropy between sigmoid(logits) and fixed
// targets, computed in the stable log-sum-exp form.
inline Tensor bce_with_logits_sum(const Tensor& logits, const std::vector<double>& targets) {
  if (targets.size() != logits.size()) {
    throw ShapeError("bce_with_logits_sum: " + std::to_string(targets.size()) +
                     " targets for " + shape_str(logits.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return detail::make_result({}, {total}, {logits}, [targets](detail::Node& self) {
    auto* g = detail::parent_grad(self, 0);
    if (!g) return;
    const auto& z = self.parents[0]->value;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double p = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i]))
                                 : std::exp(z[i]) / (1.0 + std::exp(z[i]));
      (*g)[i] += self.grad[0] * (p - targets[i]);
    }
  });
}

// Kernel-width-1 convolution over a sequence: per-row channel mixing
// x * kernel + bias.
inline Tensor pointwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() == 2 && kernel.rank() == 2 && x.cols() != kernel.rows()) {
    throw ShapeError("pointwise_conv1d: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  }
  return add_row_bias(matmul(x, kernel), bias);
}

}  // namespace cdformer
