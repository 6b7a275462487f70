#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdformer/episode.hpp"
#include "cdformer/set_head.hpp"

namespace cdformer {

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t num_queries = 25;
  std::size_t sequence_capacity = 5;  // N_max
  std::size_t ffn_hidden = 128;
  std::size_t raw_dim = 32;           // episode feature width
  std::size_t max_classes = 16;       // rows of the class feature space
  double temperature = 0.1;
  double ood_weight = 1.0;
  LossWeights loss;
  double learning_rate = 1e-3;
  double grad_clip = 0.1;  // global gradient-norm bound; 0 disables
  // Width of the decoder's Gaussian locality prior around each query's
  // reference point, in image units; 0 disables.
  double locality_sigma = 0.15;
  std::uint64_t seed = 0;

  // One class per support pass: the sequence holds a single class and no
  // placeholder. Only the baseline ablation uses this.
  bool single_class() const { return sequence_capacity == 1; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (dim == 0 || heads == 0 || dim % heads != 0) fail("dim must be a positive multiple of heads");
    if (encoder_layers == 0 || decoder_layers == 0) fail("layer counts must be >= 1");
    if (num_queries == 0) fail("num_queries must be >= 1");
    if (sequence_capacity == 0) fail("sequence_capacity must be >= 1");
    if (ffn_hidden == 0 || raw_dim == 0 || max_classes == 0) fail("extents must be >= 1");
    if (!(temperature > 0.0)) fail("ood temperature must be positive");
    if (!(ood_weight >= 0.0)) fail("ood weight must be >= 0");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
    if (!(locality_sigma >= 0.0)) fail("locality_sigma must be >= 0");
  }
};

enum class Variant { kBaseline, kObd, kFull };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kObd: return "+OBD";
    case Variant::kFull: return "+OBD+OOD";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "obd" || s == "+OBD") return Variant::kObd;
  if (s == "full" || s == "+OBD+OOD") return Variant::kFull;
  throw ConfigError("unknown ablation variant '" + s + "' (expected baseline, obd or full)");
}

// baseline: one class per pass, no placeholder, no OOD loss.
// +OBD: full sequence with placeholders, no OOD loss. +OBD+OOD: unchanged.
inline ModelConfig ablation_variant(ModelConfig cfg, Variant variant) {
  switch (variant) {
    case Variant::kBaseline:
      cfg.sequence_capacity = 1;
      cfg.ood_weight = 0.0;
      break;
    case Variant::kObd:
      cfg.ood_weight = 0.0;
      break;
    case Variant::kFull:
      break;
  }
  return cfg;
}

struct TrainConfig {
  std::size_t steps = 4000;            // episodic steps on base classes
  std::size_t finetune_steps = 300;    // steps on the k-shot novel pool
  std::size_t eval_episodes = 50;
  std::size_t log_interval = 50;
  std::size_t checkpoint_interval = 0;  // 0: final checkpoint only
  double score_threshold = 0.05;       // detections kept for mAP
  bool overfit = false;                // train on a single fixed episode
  std::uint64_t overfit_episode = 0;
  std::string variant = "full";
};

struct RunConfig {
  ModelConfig model;
  BenchmarkSpec benchmark;
  TrainConfig train;
  std::string output_dir = "run";
  std::uint64_t seed = 0;

  // Derived model extents follow the benchmark.
  void sync() {
    model.raw_dim = benchmark.feature_dim;
    model.max_classes = benchmark.vocabulary();
    model.seed = seed;
  }

  void validate() const {
    model.validate();
    benchmark.validate();
    if (benchmark.sequence_capacity != model.sequence_capacity) {
      throw ConfigError("benchmark.sequence_capacity must equal model.sequence_capacity");
    }
    if (!(train.score_threshold >= 0.0 && train.score_threshold <= 1.0)) {
      throw ConfigError("train.score_threshold must lie in [0, 1]");
    }
    parse_variant(train.variant);
  }
};

namespace detail {

using nlohmann::json;

// Copies known keys from `j` into fields, rejecting anything unknown.
class JsonFields {
 public:
  JsonFields(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config: '" + prefix_ + "' must be an object");
  }
  template <typename T>
  JsonFields& field(const char* key, T& out) {
    known_.emplace_back(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
          if (!it->is_number_unsigned()) throw ConfigError("expected a non-negative integer");
        }
        out = it->template get<T>();
      } catch (const std::exception& e) {
        throw ConfigError("config: bad value for '" + prefix_ + key + "': " + e.what());
      }
    }
    return *this;
  }
  const json* child(const char* key) {
    known_.emplace_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(known_.begin(), known_.end(), it.key()) == known_.end()) {
        throw ConfigError("config: unknown key '" + prefix_ + it.key() + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string prefix_;
  std::vector<std::string> known_;
};

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& m = c.model;
  const auto& b = c.benchmark;
  const auto& t = c.train;
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"model",
       {{"dim", m.dim},
        {"heads", m.heads},
        {"encoder_layers", m.encoder_layers},
        {"decoder_layers", m.decoder_layers},
        {"queries", m.num_queries},
        {"sequence_capacity", m.sequence_capacity},
        {"ffn_hidden", m.ffn_hidden},
        {"learning_rate", m.learning_rate},
        {"grad_clip", m.grad_clip},
        {"locality_sigma", m.locality_sigma}}},
      {"ood", {{"temperature", m.temperature}, {"weight", m.ood_weight}}},
      {"loss", {{"cls", m.loss.cls}, {"l1", m.loss.l1}, {"giou", m.loss.giou}}},
      {"benchmark",
       {{"class_count", b.class_count},
        {"shots", b.shots},
        {"grid_rows", b.grid_rows},
        {"grid_cols", b.grid_cols},
        {"feature_dim", b.feature_dim},
        {"objects_min", b.objects_min},
        {"objects_max", b.objects_max},
        {"object_extent_max", b.object_extent_max},
        {"bg_overlap", b.bg_overlap},
        {"oo_overlap", b.oo_overlap},
        {"patch_noise", b.patch_noise},
        {"shot_noise", b.shot_noise},
        {"base_classes", b.base_classes},
        {"novel_classes", b.novel_classes},
        {"seed", b.seed}}},
      {"train",
       {{"steps", t.steps},
        {"finetune_steps", t.finetune_steps},
        {"eval_episodes", t.eval_episodes},
        {"log_interval", t.log_interval},
        {"checkpoint_interval", t.checkpoint_interval},
        {"score_threshold", t.score_threshold},
        {"overfit", t.overfit},
        {"overfit_episode", t.overfit_episode},
        {"variant", t.variant}}},
  };
}

// Overlays `j` onto `c`. Unknown keys are errors.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  detail::JsonFields top(j, "");
  top.field("seed", c.seed).field("output_dir", c.output_dir);
  if (auto* m = top.child("model")) {
    detail::JsonFields f(*m, "model.");
    f.field("dim", c.model.dim)
        .field("heads", c.model.heads)
        .field("encoder_layers", c.model.encoder_layers)
        .field("decoder_layers", c.model.decoder_layers)
        .field("queries", c.model.num_queries)
        .field("sequence_capacity", c.model.sequence_capacity)
        .field("ffn_hidden", c.model.ffn_hidden)
        .field("learning_rate", c.model.learning_rate)
        .field("grad_clip", c.model.grad_clip)
        .field("locality_sigma", c.model.locality_sigma);
    f.finish();
  }
  if (auto* o = top.child("ood")) {
    detail::JsonFields f(*o, "ood.");
    f.field("temperature", c.model.temperature).field("weight", c.model.ood_weight);
    f.finish();
  }
  if (auto* l = top.child("loss")) {
    detail::JsonFields f(*l, "loss.");
    f.field("cls", c.model.loss.cls).field("l1", c.model.loss.l1).field("giou", c.model.loss.giou);
    f.finish();
  }
  if (auto* b = top.child("benchmark")) {
    auto& s = c.benchmark;
    detail::JsonFields f(*b, "benchmark.");
    f.field("class_count", s.class_count)
        .field("shots", s.shots)
        .field("grid_rows", s.grid_rows)
        .field("grid_cols", s.grid_cols)
        .field("feature_dim", s.feature_dim)
        .field("objects_min", s.objects_min)
        .field("objects_max", s.objects_max)
        .field("object_extent_max", s.object_extent_max)
        .field("bg_overlap", s.bg_overlap)
        .field("oo_overlap", s.oo_overlap)
        .field("patch_noise", s.patch_noise)
        .field("shot_noise", s.shot_noise)
        .field("base_classes", s.base_classes)
        .field("novel_classes", s.novel_classes)
        .field("seed", s.seed);
    f.finish();
  }
  if (auto* t = top.child("train")) {
    auto& s = c.train;
    detail::JsonFields f(*t, "train.");
    f.field("steps", s.steps)
        .field("finetune_steps", s.finetune_steps)
        .field("eval_episodes", s.eval_episodes)
        .field("log_interval", s.log_interval)
        .field("checkpoint_interval", s.checkpoint_interval)
        .field("score_threshold", s.score_threshold)
        .field("overfit", s.overfit)
        .field("overfit_episode", s.overfit_episode)
        .field("variant", s.variant);
    f.finish();
  }
  top.finish();
  c.benchmark.sequence_capacity = c.model.sequence_capacity;
  c.sync();
}

// "a.b=value" override; the value is parsed as JSON, falling back to a
// plain string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    parts.push_back(rest.substr(0, pos));
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  apply_json(c, patch);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

inline RunConfig default_run_config() {
  RunConfig c;
  c.sync();
  return c;
}

}  // namespace cdformer
