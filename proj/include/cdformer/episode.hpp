#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cdformer/error.hpp"
#include "cdformer/set_head.hpp"

namespace cdformer {

// Which class vocabulary an episode draws from. Base classes are for
// episodic training, novel classes for fine-tuning and evaluation.
enum class Split : std::uint32_t { kBase = 0, kNovel = 1 };

inline const char* split_name(Split s) { return s == Split::kBase ? "base" : "novel"; }

// Parameters of the synthetic benchmark. `bg_overlap` pulls the background
// distribution toward the class prototypes; `oo_overlap` is the pairwise
// cosine similarity between class prototypes.
struct BenchmarkSpec {
  std::size_t class_count = 4;
  std::size_t shots = 10;
  std::size_t sequence_capacity = 5;
  std::size_t grid_rows = 8;
  std::size_t grid_cols = 8;
  std::size_t feature_dim = 32;
  std::size_t objects_min = 1;
  std::size_t objects_max = 3;
  std::size_t object_extent_max = 3;  // patches per side
  double bg_overlap = 0.0;
  double oo_overlap = 0.0;
  double patch_noise = 0.1;
  double shot_noise = 0.3;
  std::size_t base_classes = 8;
  std::size_t novel_classes = 8;
  std::uint64_t seed = 0;

  std::size_t vocabulary() const { return base_classes + novel_classes; }
  std::size_t patches() const { return grid_rows * grid_cols; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("benchmark spec: " + m); };
    if (class_count == 0) fail("class_count must be >= 1");
    if (class_count > sequence_capacity) fail("class_count exceeds sequence_capacity");
    if (class_count > base_classes || class_count > novel_classes) {
      fail("class_count exceeds a class vocabulary");
    }
    if (shots == 0) fail("shots must be >= 1");
    if (grid_rows < 2 || grid_cols < 2) fail("grid extents must be >= 2");
    if (objects_min > objects_max) fail("objects_min exceeds objects_max");
    if (object_extent_max == 0) fail("object_extent_max must be >= 1");
    if (!(bg_overlap >= 0.0 && bg_overlap <= 1.0)) fail("bg_overlap must lie in [0, 1]");
    if (!(oo_overlap >= 0.0 && oo_overlap <= 1.0)) fail("oo_overlap must lie in [0, 1]");
    if (!(patch_noise >= 0.0) || !(shot_noise >= 0.0)) fail("noise levels must be >= 0");
    if (vocabulary() + 2 > feature_dim) {
      fail("feature_dim must be at least the class vocabulary size + 2 (orthogonal construction)");
    }
  }
};

struct Episode {
  std::uint64_t index = 0;
  Split split = Split::kBase;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::size_t feature_dim = 0;
  std::vector<int> class_ids;       // C, global vocabulary ids
  std::vector<double> prototypes;   // C x feature_dim, mean of the k shots
  std::vector<double> patches;      // P x feature_dim, row-major over the grid
  std::vector<int> patch_labels;    // P, class id or -1 for background
  GroundTruth gt;

  std::size_t class_count() const { return class_ids.size(); }
  std::size_t patch_count() const { return grid_rows * grid_cols; }

  bool operator==(const Episode& o) const {
    return index == o.index && split == o.split && grid_rows == o.grid_rows &&
           grid_cols == o.grid_cols && feature_dim == o.feature_dim && class_ids == o.class_ids &&
           prototypes == o.prototypes && patches == o.patches && patch_labels == o.patch_labels &&
           gt.boxes == o.gt.boxes && gt.labels == o.gt.labels;
  }

  // Same image restricted to one class: single-class support, ground truth
  // filtered to that class. Other objects become background for the task.
  Episode restricted_to(std::size_t class_row) const {
    Episode e = *this;
    e.class_ids = {class_ids.at(class_row)};
    e.prototypes.assign(prototypes.begin() + static_cast<std::ptrdiff_t>(class_row * feature_dim),
                        prototypes.begin() +
                            static_cast<std::ptrdiff_t>((class_row + 1) * feature_dim));
    e.gt = {};
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt.labels[g] == e.class_ids[0]) {
        e.gt.boxes.push_back(gt.boxes[g]);
        e.gt.labels.push_back(gt.labels[g]);
      }
    }
    return e;
  }
};

namespace detail {

inline Rng seeded_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

// Orthonormal rows from Gram-Schmidt on Gaussian draws.
inline std::vector<std::vector<double>> orthonormal_set(std::size_t count, std::size_t dim,
                                                        Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = normal(rng);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

}  // namespace detail

namespace detail {

// Orthonormal {u, e_0 .. e_{V-1}, b} shared by the benchmark.
inline std::vector<std::vector<double>> benchmark_basis(const BenchmarkSpec& spec) {
  spec.validate();
  Rng rng = seeded_rng(spec.seed, 0x70726f74, 0);
  return orthonormal_set(spec.vocabulary() + 2, spec.feature_dim, rng);
}

inline std::vector<std::vector<double>> prototypes_from(const BenchmarkSpec& spec,
                                                        const std::vector<std::vector<double>>& basis) {
  const double a = std::sqrt(spec.oo_overlap), b = std::sqrt(1.0 - spec.oo_overlap);
  std::vector<std::vector<double>> protos(spec.vocabulary(), std::vector<double>(spec.feature_dim));
  for (std::size_t c = 0; c < spec.vocabulary(); ++c)
    for (std::size_t i = 0; i < spec.feature_dim; ++i)
      protos[c][i] = a * basis[0][i] + b * basis[c + 1][i];
  return protos;
}

}  // namespace detail

// Unit-norm class prototypes for the whole vocabulary (base ids first):
// p_c = sqrt(oo) * u + sqrt(1 - oo) * e_c with {u, e_c} orthonormal, so every
// pair has cosine similarity exactly `oo_overlap`.
inline std::vector<std::vector<double>> class_prototypes(const BenchmarkSpec& spec) {
  return detail::prototypes_from(spec, detail::benchmark_basis(spec));
}

// Direction of the benchmark's background distribution, orthogonal to every
// prototype.
inline std::vector<double> background_direction(const BenchmarkSpec& spec) {
  return detail::benchmark_basis(spec)[spec.vocabulary() + 1];
}

// Deterministic in (spec, index, split).
inline Episode generate_episode(const BenchmarkSpec& spec, std::uint64_t index,
                                Split split = Split::kBase) {
  spec.validate();
  const auto protos = class_prototypes(spec);
  Rng rng = detail::seeded_rng(spec.seed, 1 + static_cast<std::uint64_t>(split), index);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = spec.feature_dim;

  Episode e;
  e.index = index;
  e.split = split;
  e.grid_rows = spec.grid_rows;
  e.grid_cols = spec.grid_cols;
  e.feature_dim = d;

  // Classes from the split's vocabulary.
  const std::size_t first = split == Split::kBase ? 0 : spec.base_classes;
  const std::size_t vocab = split == Split::kBase ? spec.base_classes : spec.novel_classes;
  std::vector<int> pool(vocab);
  for (std::size_t i = 0; i < vocab; ++i) pool[i] = static_cast<int>(first + i);
  for (std::size_t i = 0; i < spec.class_count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, vocab - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  e.class_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.class_count));

  // Support prototypes: mean of k noisy shots.
  e.prototypes.assign(spec.class_count * d, 0.0);
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    const auto& p = protos[static_cast<std::size_t>(e.class_ids[c])];
    for (std::size_t s = 0; s < spec.shots; ++s)
      for (std::size_t i = 0; i < d; ++i)
        e.prototypes[c * d + i] += p[i] + spec.shot_noise * normal(rng);
    for (std::size_t i = 0; i < d; ++i) e.prototypes[c * d + i] /= static_cast<double>(spec.shots);
  }

  // Background mean: the benchmark direction blended with the episode's
  // prototype mix.
  const auto dir = background_direction(spec);
  std::vector<double> bg_mean(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double mix = 0.0;
    for (int id : e.class_ids) mix += protos[static_cast<std::size_t>(id)][i];
    mix /= static_cast<double>(spec.class_count);
    bg_mean[i] = (1.0 - spec.bg_overlap) * dir[i] + spec.bg_overlap * mix;
  }

  // Object placement: non-overlapping patch rectangles.
  const std::size_t rows = spec.grid_rows, cols = spec.grid_cols;
  e.patch_labels.assign(rows * cols, -1);
  std::uniform_int_distribution<std::size_t> count_dist(spec.objects_min, spec.objects_max);
  const std::size_t objects = count_dist(rng);
  const std::size_t max_extent = std::min({spec.object_extent_max, rows, cols});
  std::uniform_int_distribution<std::size_t> extent(1, max_extent);
  std::uniform_int_distribution<std::size_t> which(0, spec.class_count - 1);
  for (std::size_t o = 0; o < objects; ++o) {
    const int label = e.class_ids[which(rng)];
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const std::size_t h = extent(rng), w = extent(rng);
      std::uniform_int_distribution<std::size_t> r0d(0, rows - h), c0d(0, cols - w);
      const std::size_t r0 = r0d(rng), c0 = c0d(rng);
      bool free = true;
      for (std::size_t r = r0; r < r0 + h && free; ++r)
        for (std::size_t c = c0; c < c0 + w && free; ++c)
          free = e.patch_labels[r * cols + c] < 0;
      if (!free) continue;
      for (std::size_t r = r0; r < r0 + h; ++r)
        for (std::size_t c = c0; c < c0 + w; ++c) e.patch_labels[r * cols + c] = label;
      e.gt.boxes.push_back(Box::from_corners(
          static_cast<double>(c0) / static_cast<double>(cols),
          static_cast<double>(r0) / static_cast<double>(rows),
          static_cast<double>(c0 + w) / static_cast<double>(cols),
          static_cast<double>(r0 + h) / static_cast<double>(rows)));
      e.gt.labels.push_back(label);
      placed = true;
    }
    if (!placed) {
      throw ConfigError("generate_episode: cannot place object " + std::to_string(o + 1) + " of " +
                        std::to_string(objects) + " on a " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " grid");
    }
  }

  e.patches.assign(rows * cols * d, 0.0);
  for (std::size_t p = 0; p < rows * cols; ++p) {
    const int label = e.patch_labels[p];
    const std::vector<double>& mean =
        label < 0 ? bg_mean : protos[static_cast<std::size_t>(label)];
    for (std::size_t i = 0; i < d; ++i) e.patches[p * d + i] = mean[i] + spec.patch_noise * normal(rng);
  }
  return e;
}

}  // namespace cdformer
