#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cdformer/checkpoint.hpp"
#include "cdformer/config.hpp"
#include "cdformer/episode.hpp"
#include "cdformer/metrics.hpp"
#include "cdformer/model.hpp"

namespace cdformer {

// Fine-tune pool episodes live far from the evaluation indices so the two
// never overlap.
inline constexpr std::uint64_t kFinetuneIndexOffset = 1'000'000;

// One model being trained under a run configuration and ablation variant.
struct Experiment {
  RunConfig run;
  Variant variant = Variant::kFull;
  ModelConfig model;  // run.model with the variant applied
  ModelState state;
  AdamState adam;
  std::uint64_t step = 0;  // completed optimizer steps

  static Experiment create(const RunConfig& run, Variant variant) {
    run.validate();
    Experiment e;
    e.run = run;
    e.run.train.variant = variant_name(variant);
    e.variant = variant;
    e.model = ablation_variant(run.model, variant);
    e.state = ModelState::init(e.model);
    e.adam.learning_rate = e.model.learning_rate;
    return e;
  }

  static Experiment from_checkpoint(const Checkpoint& ck) {
    Experiment e = create(ck.config, parse_variant(ck.config.train.variant));
    e.state.load(ck.parameters);
    e.adam = ck.adam;
    e.step = ck.step;
    return e;
  }

  std::size_t total_steps() const {
    return run.train.overfit ? run.train.steps : run.train.steps + run.train.finetune_steps;
  }
};

inline const char* phase_of(const Experiment& x, std::uint64_t step) {
  if (x.run.train.overfit) return "overfit";
  return step < x.run.train.steps ? "pretrain" : "finetune";
}

// Episode consumed at `step`: a fresh base episode while pretraining, the
// k-shot novel pool while fine-tuning, or the fixed episode when overfitting.
// Single-class models see one class of the episode per step.
inline Episode training_episode(const Experiment& x, std::uint64_t step) {
  const auto& t = x.run.train;
  Episode e;
  if (t.overfit) {
    e = generate_episode(x.run.benchmark, t.overfit_episode, Split::kBase);
  } else if (step < t.steps) {
    e = generate_episode(x.run.benchmark, x.run.seed * 1'000'003ULL + step, Split::kBase);
  } else {
    const std::uint64_t k = x.run.benchmark.shots;
    e = generate_episode(x.run.benchmark, kFinetuneIndexOffset + (step - t.steps) % k,
                         Split::kNovel);
  }
  if (x.model.single_class() && e.class_count() > 1) {
    e = e.restricted_to(static_cast<std::size_t>(step % e.class_count()));
  }
  return e;
}

inline std::vector<Episode> evaluation_episodes(const RunConfig& run) {
  if (run.train.overfit) return {generate_episode(run.benchmark, run.train.overfit_episode)};
  std::vector<Episode> eps;
  for (std::size_t i = 0; i < run.train.eval_episodes; ++i) {
    eps.push_back(generate_episode(run.benchmark, i, Split::kNovel));
  }
  return eps;
}

struct StepLog {
  std::uint64_t step = 0;
  std::string phase;
  LossBreakdown loss;
};

// Trains until `x.step == until` (or the schedule's end).
inline void train_until(Experiment& x, std::uint64_t until,
                        const std::function<void(const StepLog&)>& on_step = {}) {
  until = std::min<std::uint64_t>(until, x.total_steps());
  while (x.step < until) {
    const Episode e = training_episode(x, x.step);
    const auto loss = train_step(e, x.state, x.adam, x.model);
    if (on_step) on_step({x.step, phase_of(x, x.step), loss});
    ++x.step;
  }
}

struct EvalResult {
  EvalReport report;
  std::vector<ScoredDetection> detections;
  std::vector<GtObject> ground_truth;
  // Final encoder layer, averaged per episode over background / object
  // patches. Empty for single-class models (no placeholder).
  std::vector<double> bg_mass_background;
  std::vector<double> bg_mass_object;
  double mean_min_separation = 0.0;  // over episodes with >= 2 classes
};

inline EvalResult evaluate(const ModelState& state, const ModelConfig& cfg,
                           const std::vector<Episode>& episodes, double score_threshold) {
  NoGradGuard no_grad;
  EvalResult r;
  double sep_sum = 0.0;
  std::size_t sep_count = 0;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    for (const auto& d : run_inference(e, state, cfg, score_threshold)) {
      r.detections.push_back({i, d.class_id, d.score, d.box});
    }
    for (std::size_t g = 0; g < e.gt.size(); ++g) {
      r.ground_truth.push_back({i, e.gt.labels[g], e.gt.boxes[g]});
    }
    if (cfg.single_class()) continue;
    auto fr = forward(e, state, cfg);
    const auto& mass = fr.diagnostics.background_mass.back();
    double bg = 0.0, obj = 0.0;
    std::size_t nbg = 0, nobj = 0;
    for (std::size_t p = 0; p < mass.size(); ++p) {
      if (e.patch_labels[p] < 0) {
        bg += mass[p];
        ++nbg;
      } else {
        obj += mass[p];
        ++nobj;
      }
    }
    if (nbg > 0 && nobj > 0) {
      r.bg_mass_background.push_back(bg / static_cast<double>(nbg));
      r.bg_mass_object.push_back(obj / static_cast<double>(nobj));
    }
    if (e.class_count() >= 2) {
      sep_sum += min_interclass_separation(fr.support_features);
      ++sep_count;
    }
  }
  r.mean_min_separation = sep_count ? sep_sum / static_cast<double>(sep_count) : 0.0;
  r.report = evaluate_detections(r.detections, r.ground_truth, episodes.size());
  return r;
}

inline EvalResult evaluate(const Experiment& x) {
  return evaluate(x.state, x.model, evaluation_episodes(x.run), x.run.train.score_threshold);
}

}  // namespace cdformer
