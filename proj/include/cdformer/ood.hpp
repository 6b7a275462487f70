#pragma once

#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "cdformer/nn.hpp"
#include "cdformer/ops.hpp"

namespace cdformer {

// Learnable per-class embeddings T, indexed by class id, plus the InfoNCE
// temperature.
struct ClassFeatureSpace {
  Tensor embeddings;  // [C_max x d]
  double temperature = 0.1;

  static ClassFeatureSpace init(std::size_t max_classes, std::size_t d, double temperature,
                                Rng& rng) {
    return {normal_parameter({max_classes, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng),
            temperature};
  }
};

// -(1/C) sum_i log softmax_j(f_i . t_j / tau)[i], with j over the C selected
// embedding rows. `features` is [C x d]; row i pairs with class_ids[i].
inline Tensor infonce_loss(const Tensor& features, const ClassFeatureSpace& space,
                           const std::vector<int>& class_ids) {
  if (!(space.temperature > 0.0)) {
    throw ConfigError("infonce_loss: temperature must be positive, got " +
                      std::to_string(space.temperature));
  }
  const std::size_t c = class_ids.size();
  if (c == 0) throw ShapeError("infonce_loss: need at least one class");
  if (features.rank() != 2 || features.rows() != c) {
    throw ShapeError("infonce_loss: features " + shape_str(features.shape()) + " for " +
                     std::to_string(c) + " classes");
  }
  if (features.cols() != space.embeddings.cols()) {
    throw ShapeError("infonce_loss: feature width " + std::to_string(features.cols()) +
                     " vs embedding width " + std::to_string(space.embeddings.cols()));
  }
  std::set<int> seen;
  std::vector<RowSource> rows;
  for (int id : class_ids) {
    if (!seen.insert(id).second) {
      throw ConfigError("infonce_loss: duplicate class id " + std::to_string(id));
    }
    if (id < 0 || static_cast<std::size_t>(id) >= space.embeddings.rows()) {
      throw ShapeError("infonce_loss: class id " + std::to_string(id) + " outside embedding table");
    }
    rows.push_back({space.embeddings, static_cast<std::size_t>(id)});
  }
  Tensor selected = stack_rows(rows, features.cols());
  Tensor logits = scale(matmul(features, transpose(selected)), 1.0 / space.temperature);
  Tensor log_probs = log_softmax_rows(logits);
  Tensor diag_mask = Tensor::identity(c);
  return scale(sum(mul(log_probs, diag_mask)), -1.0 / static_cast<double>(c));
}

// Smallest pairwise cosine distance (1 - cos) between rows.
inline double min_interclass_separation(const Tensor& features) {
  const std::size_t c = features.rows(), d = features.cols();
  if (features.rank() != 2 || c < 2) {
    throw ShapeError("min_interclass_separation: need at least two rows, got " +
                     shape_str(features.shape()));
  }
  std::vector<double> norms(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t k = 0; k < d; ++k) norms[i] += features.at(i, k) * features.at(i, k);
    norms[i] = std::sqrt(norms[i]);
    if (norms[i] == 0.0) {
      throw NumericError("min_interclass_separation: row " + std::to_string(i) + " has zero norm");
    }
  }
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i + 1; j < c; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += features.at(i, k) * features.at(j, k);
      best = std::min(best, 1.0 - dot / (norms[i] * norms[j]));
    }
  }
  return best;
}

}  // namespace cdformer
