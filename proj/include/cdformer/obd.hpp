#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "cdformer/nn.hpp"
#include "cdformer/ops.hpp"

namespace cdformer {

// Object-background distinguishing: support self-interaction and query
// cross-interaction where background placeholders contribute a learnable
// key and a zero value.

struct BackgroundToken {
  Tensor vector;  // [d]

  static BackgroundToken init(std::size_t d, Rng& rng) {
    return {normal_parameter({d}, 0.02, rng)};
  }
  std::size_t dim() const { return vector.size(); }
};

// One support position. Placeholders carry no class.
struct Slot {
  static constexpr int kPlaceholder = -1;
  int class_id = kPlaceholder;
  std::size_t feature_row = 0;  // row in SupportSequence::class_features

  bool is_placeholder() const { return class_id == kPlaceholder; }
};

struct SupportSequence {
  std::vector<Slot> slots;
  Tensor class_features;  // [C x d], one row per class slot

  std::size_t length() const { return slots.size(); }
  std::size_t class_count() const {
    return static_cast<std::size_t>(std::count_if(
        slots.begin(), slots.end(), [](const Slot& s) { return !s.is_placeholder(); }));
  }
  std::size_t dim() const { return class_features.defined() ? class_features.cols() : 0; }

  // Class ids in feature-row order.
  std::vector<int> class_ids() const {
    std::vector<int> ids(class_count(), Slot::kPlaceholder);
    for (const auto& s : slots)
      if (!s.is_placeholder()) ids[s.feature_row] = s.class_id;
    return ids;
  }

  // Position of the slot holding `class_id`, or -1.
  int position_of(int class_id) const {
    for (std::size_t n = 0; n < slots.size(); ++n)
      if (slots[n].class_id == class_id && !slots[n].is_placeholder()) return static_cast<int>(n);
    return -1;
  }

  // Class slots first (in the given order), then placeholders up to `length`.
  static SupportSequence padded(const std::vector<int>& class_ids, Tensor features,
                                std::size_t length) {
    if (class_ids.size() > length) {
      throw ShapeError("support sequence: " + std::to_string(class_ids.size()) +
                       " classes exceed capacity " + std::to_string(length));
    }
    SupportSequence s;
    for (std::size_t i = 0; i < class_ids.size(); ++i) s.slots.push_back({class_ids[i], i});
    s.slots.resize(length);
    s.class_features = std::move(features);
    s.validate();
    return s;
  }

  SupportSequence with_features(Tensor features) const {
    SupportSequence s{slots, std::move(features)};
    s.validate();
    return s;
  }

  void validate() const {
    const std::size_t c = class_count();
    if (c > 0 && (!class_features.defined() || class_features.rank() != 2 ||
                  class_features.rows() != c)) {
      throw ShapeError("support sequence: " + std::to_string(c) +
                       " class slots need a [C x d] feature matrix");
    }
    std::set<int> ids;
    std::set<std::size_t> rows;
    for (const auto& s : slots) {
      if (s.is_placeholder()) continue;
      if (s.class_id < 0) throw ShapeError("support sequence: negative class id");
      if (!ids.insert(s.class_id).second) {
        throw ShapeError("support sequence: duplicate class id " + std::to_string(s.class_id));
      }
      if (s.feature_row >= c || !rows.insert(s.feature_row).second) {
        throw ShapeError("support sequence: bad feature row " + std::to_string(s.feature_row));
      }
    }
  }
};

// w1 projects query patches, w2 the key-side classes, w3 the value-side
// classes. All d x d, applied as row -> w * row.
struct OfeProjections {
  Tensor w1;
  Tensor w2;
  Tensor w3;

  static OfeProjections init(std::size_t d, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    return {normal_parameter({d, d}, s, rng), normal_parameter({d, d}, s, rng),
            normal_parameter({d, d}, s, rng)};
  }
};

// Channel fusion after the query-branch interaction: Conv1D from 2d to d
// channels, then the residual FFN.
struct FusionParams {
  Tensor kernel;  // [2d x d]
  Tensor bias;    // [d]
  FfnParams ffn;

  static FusionParams init(std::size_t d, std::size_t hidden, Rng& rng) {
    return {xavier_parameter(2 * d, d, rng), zero_parameter({d}), make_ffn(d, hidden, rng)};
  }
};

struct RefinedFeatures {
  Tensor per_position_output;  // F_out
  Tensor refined;              // query branch only
  Tensor attention;            // head-averaged, rows sum to 1
  std::vector<Tensor> head_attention;
};

namespace detail {

inline void require_square(const Tensor& w, std::size_t d, const char* what) {
  if (w.rank() != 2 || w.rows() != d || w.cols() != d) {
    throw ShapeError(std::string(what) + ": projection " + shape_str(w.shape()) +
                     " does not match feature dimension " + std::to_string(d));
  }
}

inline Tensor average_heads(const std::vector<Tensor>& heads) {
  if (heads.size() == 1) return heads.front();
  Tensor acc = heads.front();
  for (std::size_t h = 1; h < heads.size(); ++h) acc = add(acc, heads[h]);
  return scale(acc, 1.0 / static_cast<double>(heads.size()));
}

}  // namespace detail

// Row n is w_key * c_n for class slots and the raw background token for
// placeholders.
inline Tensor build_key_sequence(const SupportSequence& s, const Tensor& w_key,
                                 const BackgroundToken& token) {
  const std::size_t d = token.dim();
  detail::require_square(w_key, d, "build_key_sequence");
  if (s.class_count() > 0 && s.dim() != d) {
    throw ShapeError("build_key_sequence: class features of width " + std::to_string(s.dim()) +
                     " vs token width " + std::to_string(d));
  }
  Tensor projected = s.class_count() > 0 ? project_rows(s.class_features, w_key) : Tensor{};
  std::vector<RowSource> rows;
  rows.reserve(s.length());
  for (const auto& slot : s.slots) {
    rows.push_back(slot.is_placeholder() ? RowSource{token.vector, 0}
                                         : RowSource{projected, slot.feature_row});
  }
  return stack_rows(rows, d);
}

// Row n is w3 * c_n for class slots and an exact zero row for placeholders.
inline Tensor build_value_sequence(const SupportSequence& s, const Tensor& w3) {
  const std::size_t d = w3.rows();
  detail::require_square(w3, d, "build_value_sequence");
  if (s.class_count() > 0 && s.dim() != d) {
    throw ShapeError("build_value_sequence: class features of width " +
                     std::to_string(s.dim()) + " vs projection " + shape_str(w3.shape()));
  }
  Tensor projected = s.class_count() > 0 ? project_rows(s.class_features, w3) : Tensor{};
  std::vector<RowSource> rows;
  rows.reserve(s.length());
  for (const auto& slot : s.slots) {
    rows.push_back(slot.is_placeholder() ? RowSource{} : RowSource{projected, slot.feature_row});
  }
  return stack_rows(rows, d);
}

// Support branch: keys and queries are the same sequence S'; values S''.
inline RefinedFeatures ofe_support(const SupportSequence& s, const OfeProjections& proj,
                                   const BackgroundToken& token, std::size_t heads = 1) {
  if (s.length() == 0) throw ShapeError("ofe_support: empty support sequence");
  Tensor keys = build_key_sequence(s, proj.w2, token);
  Tensor values = build_value_sequence(s, proj.w3);
  auto att = multi_head_attention(keys, keys, values, heads);
  RefinedFeatures r;
  r.per_position_output = att.output;
  r.head_attention = std::move(att.attention);
  r.attention = detail::average_heads(r.head_attention);
  return r;
}

// Query branch: patches attend over the support keys; the attended values are
// fused with the original patches through Conv1D and the FFN.
inline RefinedFeatures ofe_query(const Tensor& q_patches, const SupportSequence& s,
                                 const OfeProjections& proj, const BackgroundToken& token,
                                 const FusionParams& fusion, std::size_t heads = 1) {
  if (q_patches.rank() != 2 || q_patches.rows() == 0) {
    throw ShapeError("ofe_query: need at least one query patch, got " +
                     shape_str(q_patches.shape()));
  }
  if (s.length() == 0) throw ShapeError("ofe_query: empty support sequence");
  const std::size_t d = token.dim();
  detail::require_square(proj.w1, d, "ofe_query");
  Tensor q_proj = project_rows(q_patches, proj.w1);
  Tensor keys = build_key_sequence(s, proj.w2, token);
  Tensor values = build_value_sequence(s, proj.w3);
  auto att = multi_head_attention(q_proj, keys, values, heads);
  RefinedFeatures r;
  r.per_position_output = att.output;
  r.head_attention = std::move(att.attention);
  r.attention = detail::average_heads(r.head_attention);
  Tensor fused = pointwise_conv1d(concat_channels(q_patches, r.per_position_output),
                                  fusion.kernel, fusion.bias);
  r.refined = ffn_apply(fused, fusion.ffn);
  return r;
}

// Per patch, the attention mass that lands on placeholder positions.
inline std::vector<double> background_attention_mass(const Tensor& attention,
                                                     const SupportSequence& s) {
  if (attention.cols() != s.length()) {
    throw ShapeError("background_attention_mass: attention " + shape_str(attention.shape()) +
                     " vs sequence length " + std::to_string(s.length()));
  }
  std::vector<double> mass(attention.rows(), 0.0);
  for (std::size_t p = 0; p < attention.rows(); ++p)
    for (std::size_t n = 0; n < s.length(); ++n)
      if (s.slots[n].is_placeholder()) mass[p] += attention.at(p, n);
  return mass;
}

}  // namespace cdformer
