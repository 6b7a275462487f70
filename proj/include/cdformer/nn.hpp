#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cdformer/ops.hpp"

namespace cdformer {

using Rng = std::mt19937_64;

inline Tensor normal_parameter(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), /*requires_grad=*/true);
}

inline Tensor zero_parameter(Shape shape) { return Tensor::zeros(std::move(shape), true); }

// Xavier-style uniform init for a [in x out] weight.
inline Tensor xavier_parameter(std::size_t in, std::size_t out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<double> v(in * out);
  for (double& x : v) x = dist(rng);
  return Tensor::matrix(in, out, std::move(v), true);
}

// Applies w to every row: row_i -> w * row_i, i.e. X * w^T.
inline Tensor project_rows(const Tensor& x, const Tensor& w) {
  if (x.cols() != w.cols()) {
    throw ShapeError("project_rows: rows of width " + std::to_string(x.cols()) +
                     " cannot be projected by " + shape_str(w.shape()));
  }
  return matmul(x, transpose(w));
}

// Affine map X * weight + bias with weight [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Tensor operator()(const Tensor& x) const {
    if (x.cols() != weight.rows()) {
      throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                       shape_str(weight.shape()));
    }
    return add_row_bias(matmul(x, weight), bias);
  }
};

inline Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {xavier_parameter(in, out, rng), zero_parameter({out})};
}

// Two affine layers with a GELU between them, plus a residual connection
// when `residual` is set.
struct FfnParams {
  Linear inner;
  Linear outer;
  bool residual = true;
};

inline FfnParams make_ffn(std::size_t d, std::size_t hidden, Rng& rng) {
  return {make_linear(d, hidden, rng), make_linear(hidden, d, rng), true};
}

inline Tensor ffn_apply(const Tensor& x, const FfnParams& p) {
  if (x.rank() == 2 && x.cols() != p.inner.weight.rows()) {
    throw ShapeError("ffn_apply: input " + shape_str(x.shape()) + " vs FFN width " +
                     std::to_string(p.inner.weight.rows()));
  }
  if (x.rows() == 0 || x.size() == 0) return Tensor::zeros(x.shape());
  Tensor y = p.outer(gelu(p.inner(x)));
  return p.residual ? add(x, y) : y;
}

// softmax(q k^T / sqrt(d_head)) per head over equal column slices; returns
// the merged output and the per-head attention maps.
struct AttentionResult {
  Tensor output;
  std::vector<Tensor> attention;
};

inline AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                            std::size_t heads, const Tensor& logit_bias = {}) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("multi_head_attention: width " + std::to_string(d) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  if (k.cols() != d || v.rows() != k.rows()) {
    throw ShapeError("multi_head_attention: q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t dh = d / heads;
  const std::size_t dv = v.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionResult r;
  std::vector<Tensor> outputs;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : slice_columns(q, h * dh, dh);
    Tensor kh = heads == 1 ? k : slice_columns(k, h * dh, dh);
    Tensor vh = heads == 1 ? v : slice_columns(v, h * dv, dv);
    Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (logit_bias.defined()) logits = add(logits, logit_bias);
    Tensor att = softmax_rows(logits);
    outputs.push_back(matmul(att, vh));
    r.attention.push_back(att);
  }
  r.output = heads == 1 ? outputs.front() : concat_channels(outputs);
  return r;
}

}  // namespace cdformer
