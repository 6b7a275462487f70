#pragma once

#include <chrono>
#include <functional>
#include <vector>

#include "cdformer/harness.hpp"

namespace cdformer {

inline constexpr Variant kAblationVariants[] = {Variant::kBaseline, Variant::kObd, Variant::kFull};

struct AblationRun {
  Variant variant = Variant::kFull;
  std::uint64_t seed = 0;
  double map = 0.0;
  double map50 = 0.0;
  double separation = 0.0;
  // Per evaluation episode, final encoder layer; empty for the baseline.
  std::vector<double> bg_mass_background;
  std::vector<double> bg_mass_object;
  double seconds = 0.0;
};

struct AblationRow {
  Variant variant = Variant::kFull;
  double map = 0.0;  // means over seeds
  double map50 = 0.0;
  double separation = 0.0;
};

// Trains and evaluates every variant for every seed. The benchmark is fixed
// by `run.benchmark.seed`; the run seed drives initialization and the
// training stream.
inline std::vector<AblationRun> run_ablation(
    RunConfig run, const std::vector<std::uint64_t>& seeds,
    const std::function<void(const AblationRun&)>& on_done = {}) {
  std::vector<AblationRun> out;
  for (std::uint64_t seed : seeds) {
    run.seed = seed;
    run.sync();
    for (Variant v : kAblationVariants) {
      const auto t0 = std::chrono::steady_clock::now();
      auto x = Experiment::create(run, v);
      train_until(x, x.total_steps());
      const auto r = evaluate(x);
      AblationRun a{v,
                    seed,
                    r.report.map,
                    r.report.map50,
                    r.mean_min_separation,
                    r.bg_mass_background,
                    r.bg_mass_object,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      if (on_done) on_done(a);
      out.push_back(std::move(a));
    }
  }
  return out;
}

inline std::vector<AblationRow> summarize_ablation(const std::vector<AblationRun>& runs) {
  std::vector<AblationRow> rows;
  for (Variant v : kAblationVariants) {
    AblationRow row{v};
    std::size_t n = 0;
    for (const auto& r : runs) {
      if (r.variant != v) continue;
      row.map += r.map;
      row.map50 += r.map50;
      row.separation += r.separation;
      ++n;
    }
    if (n > 0) {
      row.map /= static_cast<double>(n);
      row.map50 /= static_cast<double>(n);
      row.separation /= static_cast<double>(n);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace cdformer
