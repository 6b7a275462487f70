#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cdformer/adam.hpp"
#include "cdformer/config.hpp"
#include "cdformer/episode.hpp"
#include "cdformer/nn.hpp"
#include "cdformer/obd.hpp"
#include "cdformer/ood.hpp"
#include "cdformer/serialize.hpp"
#include "cdformer/set_head.hpp"

namespace cdformer {

struct ObdLayer {
  OfeProjections proj;
  FusionParams fusion;
};

// Projections applied as X * W.
struct AttentionParams {
  Tensor wq, wk, wv, wo;

  static AttentionParams init(std::size_t d, Rng& rng) {
    return {xavier_parameter(d, d, rng), xavier_parameter(d, d, rng), xavier_parameter(d, d, rng),
            xavier_parameter(d, d, rng)};
  }
};

struct DecoderLayer {
  AttentionParams self_attn;
  AttentionParams cross_attn;
  FfnParams ffn;
};

// Every learnable tensor of the detector. The name set depends only on the
// ModelConfig.
struct ModelState {
  Linear embed;  // raw_dim -> dim, shared by patches and support prototypes
  BackgroundToken background;
  std::vector<ObdLayer> obd;
  ClassFeatureSpace ood;
  Tensor query_embed;  // [M x d]
  std::vector<DecoderLayer> decoder;
  Linear class_query;  // decoder output -> matching space
  Linear class_key;    // support position -> matching space
  Tensor class_bias;   // [1]
  Linear box_hidden;
  Linear box_out;
  Linear pointer_query;
  Linear pointer_key;

  static ModelState init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 17);
    const std::size_t d = cfg.dim;
    ModelState s;
    s.embed = make_linear(cfg.raw_dim, d, rng);
    s.background = BackgroundToken::init(d, rng);
    for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
      s.obd.push_back({OfeProjections::init(d, rng), FusionParams::init(d, cfg.ffn_hidden, rng)});
    }
    s.ood = ClassFeatureSpace::init(cfg.max_classes, d, cfg.temperature, rng);
    s.query_embed = normal_parameter({cfg.num_queries, d}, 1.0, rng);
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
      s.decoder.push_back({AttentionParams::init(d, rng), AttentionParams::init(d, rng),
                           make_ffn(d, cfg.ffn_hidden, rng)});
    }
    s.class_query = make_linear(d, d, rng);
    s.class_key = make_linear(d, d, rng);
    s.class_bias = zero_parameter({1});
    s.box_hidden = make_linear(d, d, rng);
    s.box_out = make_linear(d, 4, rng);
    s.pointer_query = make_linear(d, d, rng);
    s.pointer_key = make_linear(d, d, rng);
    return s;
  }

  NamedTensors named() const {
    NamedTensors out;
    auto put = [&](std::string name, const Tensor& t) { out.emplace_back(std::move(name), t); };
    auto put_linear = [&](const std::string& name, const Linear& l) {
      put(name + ".weight", l.weight);
      put(name + ".bias", l.bias);
    };
    auto put_ffn = [&](const std::string& name, const FfnParams& f) {
      put_linear(name + ".inner", f.inner);
      put_linear(name + ".outer", f.outer);
    };
    auto put_attn = [&](const std::string& name, const AttentionParams& a) {
      put(name + ".wq", a.wq);
      put(name + ".wk", a.wk);
      put(name + ".wv", a.wv);
      put(name + ".wo", a.wo);
    };
    put_linear("embed", embed);
    put("obd.background_token", background.vector);
    for (std::size_t l = 0; l < obd.size(); ++l) {
      const std::string p = "obd.layer" + std::to_string(l);
      put(p + ".w1", obd[l].proj.w1);
      put(p + ".w2", obd[l].proj.w2);
      put(p + ".w3", obd[l].proj.w3);
      put(p + ".conv.kernel", obd[l].fusion.kernel);
      put(p + ".conv.bias", obd[l].fusion.bias);
      put_ffn(p + ".ffn", obd[l].fusion.ffn);
    }
    put("ood.embeddings", ood.embeddings);
    put("decoder.query_embed", query_embed);
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "decoder.layer" + std::to_string(l);
      put_attn(p + ".self", decoder[l].self_attn);
      put_attn(p + ".cross", decoder[l].cross_attn);
      put_ffn(p + ".ffn", decoder[l].ffn);
    }
    put_linear("head.class_query", class_query);
    put_linear("head.class_key", class_key);
    put("head.class_bias", class_bias);
    put_linear("head.box_hidden", box_hidden);
    put_linear("head.box_out", box_out);
    put_linear("head.pointer_query", pointer_query);
    put_linear("head.pointer_key", pointer_key);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    for (auto& [name, t] : named()) p.push_back(t);
    return p;
  }

  void zero_grad() const {
    for (auto& [name, t] : named()) t.zero_grad();
  }

  // Copies values by name; names and shapes must match exactly.
  void load(const NamedTensors& source) const {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : source) by_name[name] = &t;
    const auto mine = named();
    if (by_name.size() != mine.size()) {
      throw ConfigError("checkpoint holds " + std::to_string(by_name.size()) +
                        " tensors, model expects " + std::to_string(mine.size()));
    }
    for (const auto& [name, t] : mine) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("checkpoint lacks tensor '" + name + "'");
      if (it->second->shape() != t.shape()) {
        throw ConfigError("checkpoint tensor '" + name + "' has shape " +
                          shape_str(it->second->shape()) + ", model expects " +
                          shape_str(t.shape()));
      }
      auto dst = t.mutable_values();
      auto src = it->second->values();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
};

struct QueryPatchFeatures {
  Tensor patches;  // [P x d]
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
};

// Fixed 2-D sinusoidal encoding of (row, col) coordinates in patch units:
// the first half of the channels encodes the row, the second half the column.
inline Tensor sinusoid_encoding(const std::vector<std::array<double, 2>>& coords, std::size_t d) {
  std::vector<double> pe(coords.size() * d, 0.0);
  const std::size_t half = d / 2;
  auto encode = [&](double pos, std::size_t offset, std::size_t width, double* out) {
    for (std::size_t i = 0; i + 1 < width; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
      out[offset + i] = std::sin(pos * freq);
      out[offset + i + 1] = std::cos(pos * freq);
    }
  };
  for (std::size_t k = 0; k < coords.size(); ++k) {
    encode(coords[k][0], 0, half, &pe[k * d]);
    encode(coords[k][1], half, d - half, &pe[k * d]);
  }
  return Tensor::matrix(coords.size(), d, std::move(pe));
}

inline Tensor positional_encoding(std::size_t rows, std::size_t cols, std::size_t d) {
  std::vector<std::array<double, 2>> coords;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      coords.push_back({static_cast<double>(r), static_cast<double>(c)});
  return sinusoid_encoding(coords, d);
}

// Reference points of the object queries: the first M points of a square
// lattice over the unit image, as normalized (cx, cy).
inline std::vector<std::array<double, 2>> query_anchors(std::size_t m) {
  std::size_t k = 1;
  while (k * k < m) ++k;
  std::vector<std::array<double, 2>> a;
  for (std::size_t i = 0; i < k && a.size() < m; ++i)
    for (std::size_t j = 0; j < k && a.size() < m; ++j)
      a.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(k),
                   (static_cast<double>(i) + 0.5) / static_cast<double>(k)});
  return a;
}

// Embeds patches and support prototypes through the shared affine map; the
// support sequence is padded with placeholders to the configured capacity.
// Patch positions enter later, on the decoder's memory keys.
inline std::pair<QueryPatchFeatures, SupportSequence> extract_features(const Episode& e,
                                                                       const ModelState& state,
                                                                       const ModelConfig& cfg) {
  if (e.feature_dim != state.embed.weight.rows()) {
    throw ShapeError("extract_features: episode features have width " +
                     std::to_string(e.feature_dim) + ", embedder expects " +
                     std::to_string(state.embed.weight.rows()));
  }
  if (e.class_count() == 0 || e.class_count() > cfg.sequence_capacity) {
    throw ShapeError("extract_features: " + std::to_string(e.class_count()) +
                     " classes for a sequence capacity of " +
                     std::to_string(cfg.sequence_capacity));
  }
  const std::size_t p = e.patch_count();
  Tensor raw = Tensor::matrix(p, e.feature_dim, e.patches);
  QueryPatchFeatures q{state.embed(raw), e.grid_rows, e.grid_cols};
  Tensor protos = Tensor::matrix(e.class_count(), e.feature_dim, e.prototypes);
  auto seq = SupportSequence::padded(e.class_ids, state.embed(protos), cfg.sequence_capacity);
  return {std::move(q), std::move(seq)};
}

struct ForwardDiagnostics {
  // Per encoder layer, per patch: query-branch attention on placeholders.
  std::vector<std::vector<double>> background_mass;
};

struct ForwardResult {
  DetectionOutput output;
  Tensor support_features;  // [C x d], final support-branch class rows
  SupportSequence support;  // final support sequence
  ForwardDiagnostics diagnostics;
};

namespace detail {

inline Tensor attention_block(const Tensor& query, const Tensor& key, const Tensor& value,
                              const AttentionParams& a, std::size_t heads,
                              const Tensor& logit_bias = {}) {
  auto r = multi_head_attention(matmul(query, a.wq), matmul(key, a.wk), matmul(value, a.wv), heads,
                                logit_bias);
  return matmul(r.output, a.wo);
}

// Rows of `per_position` at class slots, in feature-row order.
inline Tensor class_rows(const Tensor& per_position, const SupportSequence& s) {
  std::vector<RowSource> rows(s.class_count());
  for (std::size_t n = 0; n < s.length(); ++n) {
    if (!s.slots[n].is_placeholder()) rows[s.slots[n].feature_row] = {per_position, n};
  }
  return stack_rows(rows, per_position.cols());
}

}  // namespace detail

inline ForwardResult forward(const QueryPatchFeatures& query, const SupportSequence& support,
                             const ModelState& state, const ModelConfig& cfg) {
  const std::size_t heads = cfg.heads;
  ForwardResult r;
  SupportSequence s = support;
  Tensor q = query.patches;
  for (const auto& layer : state.obd) {
    auto sup = ofe_support(s, layer.proj, state.background, heads);
    s = s.with_features(add(s.class_features, detail::class_rows(sup.per_position_output, s)));
    auto qry = ofe_query(q, s, layer.proj, state.background, layer.fusion, heads);
    r.diagnostics.background_mass.push_back(background_attention_mass(qry.attention, s));
    q = qry.refined;
  }
  r.support_features = s.class_features;
  r.support = s;

  // Anchored decoder: each query carries the encoding of its reference
  // point; memory keys carry the patch encoding.
  const std::size_t rows = query.grid_rows, cols = query.grid_cols;
  const std::size_t m = cfg.num_queries;
  const auto anchors = query_anchors(m);
  std::vector<std::array<double, 2>> anchor_cells;
  for (const auto& [cx, cy] : anchors) {
    anchor_cells.push_back({cy * static_cast<double>(rows) - 0.5,
                            cx * static_cast<double>(cols) - 0.5});
  }
  const Tensor query_pos = add(sinusoid_encoding(anchor_cells, cfg.dim), state.query_embed);
  const Tensor memory_keys = add(q, positional_encoding(rows, cols, cfg.dim));

  // Normalized patch centres and their squares, for the pointer box prior.
  std::vector<double> centres, centres_sq;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double px = (static_cast<double>(c) + 0.5) / static_cast<double>(cols);
      const double py = (static_cast<double>(r) + 0.5) / static_cast<double>(rows);
      centres.insert(centres.end(), {px, py});
      centres_sq.insert(centres_sq.end(), {px * px, py * py});
    }

  // Gaussian locality bias between each anchor and each patch centre.
  Tensor locality;
  if (cfg.locality_sigma > 0.0) {
    const double two_var = 2.0 * cfg.locality_sigma * cfg.locality_sigma;
    std::vector<double> b;
    for (const auto& [cx, cy] : anchors)
      for (std::size_t p = 0; p < rows * cols; ++p) {
        const double dx = centres[2 * p] - cx, dy = centres[2 * p + 1] - cy;
        b.push_back(-(dx * dx + dy * dy) / two_var);
      }
    locality = Tensor::matrix(m, rows * cols, std::move(b));
  }

  // Pre-norm layers from a zero target.
  Tensor x = Tensor::zeros({m, cfg.dim});
  for (const auto& layer : state.decoder) {
    Tensor h = layer_norm_rows(x);
    Tensor hp = add(h, query_pos);
    x = add(x, detail::attention_block(hp, hp, h, layer.self_attn, heads));
    h = layer_norm_rows(x);
    x = add(x, detail::attention_block(add(h, query_pos), memory_keys, q, layer.cross_attn, heads,
                                       locality));
    x = ffn_apply(layer_norm_rows(x), layer.ffn);
  }
  x = layer_norm_rows(x);

  // Each query points at memory patches. The pointed-at features feed the
  // classifier; the attention's centroid and spread give a box prior that
  // the box MLP refines in logit space.
  Tensor pointer_logits =
      scale(matmul(state.pointer_query(x), transpose(state.pointer_key(memory_keys))),
            1.0 / std::sqrt(static_cast<double>(cfg.dim)));
  if (locality.defined()) pointer_logits = add(pointer_logits, locality);
  const Tensor pointer = softmax_rows(pointer_logits);
  const Tensor pointed = matmul(pointer, q);
  const Tensor mean = matmul(pointer, Tensor::matrix(rows * cols, 2, centres));
  const Tensor var = relu(sub(matmul(pointer, Tensor::matrix(rows * cols, 2, centres_sq)),
                              mul(mean, mean)));
  // A uniform spread over an extent w has variance w^2 / 12; the floor is one
  // cell.
  std::vector<double> cell;
  for (std::size_t i = 0; i < m; ++i) {
    cell.push_back(1.0 / static_cast<double>(cols * cols));
    cell.push_back(1.0 / static_cast<double>(rows * rows));
  }
  Tensor extent = exp(scale(log(add(scale(var, 12.0), Tensor::matrix(m, 2, cell))), 0.5));
  extent = minimum(extent, Tensor::full({m, 2}, 0.98));
  const Tensor prior = concat_channels(mean, extent);
  const Tensor prior_logit = sub(log(prior), log(add_scalar(neg(prior), 1.0)));
  const Tensor box_logits = add(state.box_out(gelu(state.box_hidden(x))), prior_logit);

  // Position-mapped classification: one logit per support position; class
  // slots use the refined class feature, placeholders the background token.
  std::vector<RowSource> keys;
  for (const auto& slot : s.slots) {
    keys.push_back(slot.is_placeholder() ? RowSource{state.background.vector, 0}
                                         : RowSource{s.class_features, slot.feature_row});
  }
  const Tensor support_keys = state.class_key(stack_rows(keys, cfg.dim));
  Tensor logits = matmul(state.class_query(pointed), transpose(support_keys));
  std::vector<RowSource> bias_rows(logits.size(), RowSource{state.class_bias, 0});
  logits = add(logits, reshape(stack_rows(bias_rows, 1), logits.shape()));
  Tensor boxes = sigmoid(box_logits);
  r.output = DetectionOutput::from_logits(boxes, logits);
  return r;
}

inline ForwardResult forward(const Episode& e, const ModelState& state, const ModelConfig& cfg) {
  auto [q, s] = extract_features(e, state, cfg);
  return forward(q, s, state, cfg);
}

struct LossBreakdown {
  double cls = 0.0;
  double box = 0.0;
  double giou = 0.0;
  double ood = 0.0;
  double total = 0.0;
};

struct LossEvaluation {
  Tensor total;
  LossBreakdown parts;
  MatchResult match;
  ForwardResult forward;
};

// Full objective set_loss + w_ood * InfoNCE. The matching is computed from
// the current predictions unless `fixed_match` is given.
inline LossEvaluation compute_loss(const Episode& e, const ModelState& state,
                                   const ModelConfig& cfg,
                                   const MatchResult* fixed_match = nullptr) {
  LossEvaluation ev;
  ev.forward = forward(e, state, cfg);
  const auto& out = ev.forward.output;
  if (fixed_match) {
    ev.match = *fixed_match;
  } else {
    auto cost = match_cost(out, e.gt, ev.forward.support, cfg.loss);
    ev.match = hungarian_match(cost, out.queries(), e.gt.size());
  }
  auto sl = set_loss(out, e.gt, ev.forward.support, ev.match, cfg.loss);
  ev.parts.cls = sl.cls;
  ev.parts.box = sl.l1;
  ev.parts.giou = sl.giou;
  Tensor total = sl.total;
  if (cfg.ood_weight > 0.0) {
    ClassFeatureSpace space{state.ood.embeddings, cfg.temperature};
    Tensor ood = infonce_loss(ev.forward.support_features, space, ev.forward.support.class_ids());
    ev.parts.ood = ood.item();
    total = add(total, scale(ood, cfg.ood_weight));
  }
  ev.parts.total = total.item();
  ev.total = total;
  return ev;
}

// One backward pass and one Adam update. Non-finite losses abort with the
// loss breakdown in the message and leave the parameters untouched.
inline LossBreakdown train_step(const Episode& e, const ModelState& state, AdamState& adam,
                                const ModelConfig& cfg) {
  state.zero_grad();
  auto ev = compute_loss(e, state, cfg);
  if (!std::isfinite(ev.parts.total)) {
    std::ostringstream os;
    os << "train_step: non-finite loss on episode " << e.index << " (cls=" << ev.parts.cls
       << " box=" << ev.parts.box << " giou=" << ev.parts.giou << " ood=" << ev.parts.ood << ")";
    throw NumericError(os.str());
  }
  ev.total.backward();
  const auto params = state.parameters();
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  clip_global_norm(grads, cfg.grad_clip);
  adam.learning_rate = cfg.learning_rate;
  adam_step(params, grads, adam);
  state.zero_grad();
  return ev.parts;
}

// The episodes one support pass at a time: the episode itself, or one
// single-class view per class when the model runs one class per pass.
inline std::vector<Episode> support_passes(const Episode& e, const ModelConfig& cfg) {
  if (e.class_count() <= cfg.sequence_capacity) return {e};
  if (!cfg.single_class()) {
    throw ShapeError("episode has " + std::to_string(e.class_count()) +
                     " classes but the support sequence holds " +
                     std::to_string(cfg.sequence_capacity));
  }
  std::vector<Episode> passes;
  for (std::size_t c = 0; c < e.class_count(); ++c) passes.push_back(e.restricted_to(c));
  return passes;
}

inline std::vector<Detection> run_inference(const Episode& e, const ModelState& state,
                                            const ModelConfig& cfg, double threshold) {
  NoGradGuard no_grad;
  std::vector<Detection> dets;
  for (const auto& pass : support_passes(e, cfg)) {
    auto r = forward(pass, state, cfg);
    auto d = decode_detections(r.output, r.support, threshold);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return dets;
}

}  // namespace cdformer
