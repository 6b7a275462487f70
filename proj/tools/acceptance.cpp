// Acceptance run: one PASS/FAIL line per criterion. Exit status is non-zero
// when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <unistd.h>

#include <CLI11.hpp>

#include "cdformer/cdformer.hpp"
#include "cdformer/cli.hpp"

namespace {

using namespace cdformer;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// Every primitive and the full loss against central differences.
Verdict gradient_oracle() {
  const auto t0 = Clock::now();
  std::ostringstream out, err;
  const int code = run_cli({"gradcheck"}, out, err);
  const double secs = seconds_since(t0);
  const GradcheckOptions opt;
  const auto reports = run_gradcheck(opt);
  std::size_t bad = 0;
  for (const auto& r : reports) bad += !r.ok;
  const bool tolerances = opt.primitive_rtol == 1e-5 && opt.loss_rtol == 1e-4;
  return {code == 0 && bad == 0 && secs < 60.0 && tolerances,
          std::to_string(reports.size()) + " checks, " + std::to_string(bad) +
              " failed, exit " + std::to_string(code) + ", " + fmt(secs, 3) + " s"};
}

// Hungarian matcher against exhaustive permutations.
Verdict matcher_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(1, 7);
  std::uniform_real_distribution<double> entry(-5.0, 5.0);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = size(rng);
    std::vector<double> cost(n * n);
    for (double& c : cost) c = entry(rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
      double total = 0.0;
      for (std::size_t q = 0; q < n; ++q) total += cost[q * n + perm[q]];
      best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    const auto m = hungarian_match(cost, n, n);
    mismatches += m.pairs.size() != n || std::abs(m.total_cost - best) > 1e-9;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 5.0,
          "200 matrices, " + std::to_string(mismatches) + " mismatches, " + fmt(secs, 3) + " s"};
}

Verdict closed_forms() {
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  Rng rng(5);
  std::normal_distribution<double> normal;
  std::vector<double> t(8 * 4), f(4);
  for (double& v : t) v = normal(rng);
  for (double& v : f) v = normal(rng);
  const double single =
      infonce_loss(Tensor::from({1, 4}, f), {Tensor::from({8, 4}, t), 0.1}, {6}).item();
  check(std::abs(single) <= 1e-12, "InfoNCE C=1 = " + fmt(single, 17));
  for (std::size_t c : {2u, 3u, 5u}) {
    // Identical class embeddings: every logit in a row is equal.
    std::vector<double> same(c * 4), feats(c * 4);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        same[i * 4 + k] = t[k];
        feats[i * 4 + k] = normal(rng);
      }
    std::vector<int> ids(c);
    std::iota(ids.begin(), ids.end(), 0);
    const double l =
        infonce_loss(Tensor::from({c, 4}, feats), {Tensor::from({c, 4}, same), 0.1}, ids).item();
    check(std::abs(l - std::log(static_cast<double>(c))) <= 1e-9,
          "InfoNCE uniform C=" + std::to_string(c) + " = " + fmt(l, 17));
  }
  const Box unit = Box::from_corners(0, 0, 1, 1);
  const double touching = giou(unit, Box::from_corners(1, 0, 2, 1));
  const double gap = giou(unit, Box::from_corners(2, 0, 3, 1));
  check(std::abs(touching) <= 1e-9, "GIoU touching = " + fmt(touching, 17));
  check(std::abs(gap + 1.0 / 3.0) <= 1e-9, "GIoU gap = " + fmt(gap, 17));

  const std::vector<GtObject> gts = {{0, 1, unit}};
  const Box miss = Box::from_corners(3, 3, 4, 4);
  for (double thr : coco_iou_thresholds())
    check(average_precision({{0, 1, 0.5, unit}}, gts, thr) == 1.0, "AP perfect");
  check(average_precision({}, gts, 0.5) == 0.0, "AP without detections");
  check(average_precision({{0, 1, 0.9, unit}, {0, 1, 0.8, miss}}, gts, 0.5) == 1.0,
        "AP TP then FP");
  check(average_precision({{0, 1, 0.8, unit}, {0, 1, 0.9, miss}}, gts, 0.5) == 0.5,
        "AP FP then TP");
  std::string detail = failures.empty() ? "InfoNCE, GIoU and AP edge cases exact" : "";
  for (const auto& s : failures) detail += (detail.empty() ? "" : "; ") + s;
  return {failures.empty(), detail};
}

// Support branch without placeholders against plain self-attention.
Verdict obd_equivalence() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(300 + seed);
    std::normal_distribution<double> normal;
    const std::size_t c = 1 + seed % 6, d = 8;
    auto random = [&](std::size_t r, std::size_t k) {
      std::vector<double> v(r * k);
      for (double& x : v) x = normal(rng);
      return v;
    };
    const auto feats = random(c, d), w2 = random(d, d), w3 = random(d, d), w1 = random(d, d);
    std::vector<int> ids(c);
    std::iota(ids.begin(), ids.end(), 0);
    const auto seq = SupportSequence::padded(ids, Tensor::from({c, d}, feats), c);
    const OfeProjections proj{Tensor::from({d, d}, w1), Tensor::from({d, d}, w2),
                              Tensor::from({d, d}, w3)};
    const auto out = ofe_support(seq, proj, {Tensor::from({d}, random(1, d))});

    // k_i = W2 c_i, v_i = W3 c_i, out_i = sum_j softmax_j(k_i.k_j / sqrt d) v_j.
    auto apply = [&](const std::vector<double>& w, std::size_t i) {
      std::vector<double> r(d, 0.0);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) r[a] += w[a * d + b] * feats[i * d + b];
      return r;
    };
    std::vector<std::vector<double>> k, v;
    for (std::size_t i = 0; i < c; ++i) {
      k.push_back(apply(w2, i));
      v.push_back(apply(w3, i));
    }
    for (std::size_t i = 0; i < c; ++i) {
      std::vector<double> logits(c);
      for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t a = 0; a < d; ++a) logits[j] += k[i][a] * k[j][a];
        logits[j] /= std::sqrt(static_cast<double>(d));
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t a = 0; a < d; ++a) {
        double expect = 0.0;
        for (std::size_t j = 0; j < c; ++j) expect += logits[j] / z * v[j][a];
        worst = std::max(worst, std::abs(expect - out.per_position_output.at(i, a)));
      }
    }
  }
  return {worst < 1e-10, "50 sequences, max abs diff " + fmt(worst, 3)};
}

struct AblationVerdicts {
  Verdict ordering, background, separation;
};

AblationVerdicts ablation(const std::vector<std::uint64_t>& seeds) {
  RunConfig run = default_run_config();
  run.benchmark.bg_overlap = 0.6;
  run.benchmark.oo_overlap = 0.6;
  run.benchmark.class_count = 4;
  run.benchmark.shots = 10;
  run.validate();
  const bool protocol = run.train.steps >= 2000 && run.train.eval_episodes >= 50 &&
                        seeds.size() >= 3;

  const auto t0 = Clock::now();
  const auto runs = run_ablation(run, seeds, [](const AblationRun& a) {
    std::cout << "  " << std::left << std::setw(9) << variant_name(a.variant) << " seed "
              << a.seed << "  mAP " << fmt(a.map) << "  mAP50 " << fmt(a.map50)
              << "  separation " << fmt(a.separation) << "  (" << fmt(a.seconds, 4) << " s)"
              << std::endl;
  });
  const double secs = seconds_since(t0);
  const auto rows = summarize_ablation(runs);
  const auto& base = rows[0];
  const auto& obd = rows[1];
  const auto& full = rows[2];

  AblationVerdicts v;
  const double gap = full.map - base.map;
  v.ordering = {protocol && full.map >= obd.map && obd.map >= base.map && gap >= 0.03 &&
                    secs < 1800.0,
                "mean mAP baseline " + fmt(base.map) + ", +OBD " + fmt(obd.map) + ", full " +
                    fmt(full.map) + "; full - baseline = " + fmt(100.0 * gap, 3) +
                    " points; " + fmt(secs / 60.0, 3) + " min"};

  std::size_t wins = 0, episodes = 0;
  double mass_bg = 0.0, mass_obj = 0.0;
  for (const auto& r : runs) {
    if (r.variant != Variant::kFull) continue;
    for (std::size_t i = 0; i < r.bg_mass_background.size(); ++i) {
      wins += r.bg_mass_background[i] > r.bg_mass_object[i];
      mass_bg += r.bg_mass_background[i];
      mass_obj += r.bg_mass_object[i];
      ++episodes;
    }
  }
  const double frac = episodes ? static_cast<double>(wins) / static_cast<double>(episodes) : 0.0;
  v.background = {episodes > 0 && frac >= 0.9,
                  "background patches put more mass on placeholders in " + std::to_string(wins) +
                      "/" + std::to_string(episodes) + " episodes (" + fmt(100.0 * frac, 3) +
                      "%); mean mass background " + fmt(mass_bg / std::max<std::size_t>(episodes, 1)) +
                      " vs object " + fmt(mass_obj / std::max<std::size_t>(episodes, 1))};

  v.separation = {full.separation > obd.separation,
                  "mean min separation with OOD " + fmt(full.separation) + ", without " +
                      fmt(obd.separation)};
  return v;
}

Verdict overfit_oracle() {
  RunConfig run = default_run_config();
  run.benchmark.bg_overlap = 0.6;
  run.benchmark.oo_overlap = 0.6;
  run.train.overfit = true;
  run.train.steps = 1000;
  run.validate();
  const auto t0 = Clock::now();
  auto x = Experiment::create(run, Variant::kFull);
  train_until(x, 1000);
  const auto r = evaluate(x);
  return {x.step == 1000 && r.report.map50 >= 0.9,
          "mAP@.5 " + fmt(r.report.map50) + " after " + std::to_string(x.step) + " steps (" +
              fmt(seconds_since(t0), 3) + " s)"};
}

Verdict persistence() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("cdformer_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  try {
    RunConfig run = default_run_config();
    run.model.dim = 32;
    run.model.ffn_hidden = 64;
    run.train.steps = 20;
    run.train.finetune_steps = 5;
    run.output_dir = dir.string();
    run.validate();
    auto x = Experiment::create(run, Variant::kFull);
    train_until(x, x.total_steps());
    const std::string ck_path = (dir / "model.cdfk").string();
    save_checkpoint(ck_path, x.run, x.step, x.state, x.adam);
    const std::string bytes = read_file(ck_path);
    auto y = Experiment::from_checkpoint(load_checkpoint(ck_path));
    check(encode_checkpoint(y.run, y.step, y.state, y.adam) == bytes, "checkpoint re-encode");
    bool same = true;
    const auto a = x.state.named(), b = y.state.named();
    for (std::size_t i = 0; i < a.size(); ++i)
      same &= a[i].first == b[i].first && a[i].second.to_vector() == b[i].second.to_vector();
    check(same, "checkpoint tensors");
    const Episode e = generate_episode(run.benchmark, 7, Split::kNovel);
    check(forward(e, x.state, x.model).output.position_logits.to_vector() ==
              forward(e, y.state, y.model).output.position_logits.to_vector(),
          "checkpoint forward");

    const std::string ep_path = (dir / "episodes.cdfe").string();
    write_episodes(run.benchmark, 5, ep_path, Split::kNovel);
    const auto file = read_episodes(ep_path);
    bool eps = file.episodes.size() == 5;
    for (std::size_t i = 0; eps && i < 5; ++i)
      eps = file.episodes[i] == generate_episode(run.benchmark, i, Split::kNovel);
    check(eps, "episode round trip");
    check(encode_episode_file(file.spec, file.split, file.episodes) == read_file(ep_path),
          "episode re-encode");

    // Damaged files through the command line: exit code 3, never a crash.
    const std::string ep_bytes = read_file(ep_path);
    std::size_t damaged = 0, rejected = 0;
    auto try_file = [&](const std::string& name, const std::string& content, bool checkpoint) {
      const std::string p = (dir / name).string();
      write_file(p, content);
      std::ostringstream out, err;
      std::vector<std::string> args = {"eval", "--out", (dir / "ev").string()};
      if (checkpoint) {
        args.insert(args.end(), {"--checkpoint", p});
      } else {
        args.insert(args.end(), {"--checkpoint", ck_path, "--episodes", p});
      }
      ++damaged;
      rejected += run_cli(args, out, err) == static_cast<int>(ExitCode::kIo);
    };
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, bytes.size() / 2, bytes.size() - 1})
      try_file("cut.cdfk", bytes.substr(0, cut), true);
    for (std::size_t pos = 0; pos < bytes.size(); pos += bytes.size() / 16) {
      std::string bad = bytes;
      bad[pos] = static_cast<char>(bad[pos] ^ 0x40);
      try_file("flip.cdfk", bad, true);
    }
    for (std::size_t cut : {std::size_t{2}, ep_bytes.size() / 3, ep_bytes.size() - 8})
      try_file("cut.cdfe", ep_bytes.substr(0, cut), false);
    for (std::size_t pos = 0; pos < ep_bytes.size(); pos += ep_bytes.size() / 16) {
      std::string bad = ep_bytes;
      bad[pos] = static_cast<char>(bad[pos] ^ 0x40);
      try_file("flip.cdfe", bad, false);
    }
    check(rejected == damaged, std::to_string(damaged - rejected) + " of " +
                                   std::to_string(damaged) + " damaged files not rejected");
    if (failures.empty()) {
      fs::remove_all(dir);
      return {true, "checkpoint and episode files bit-exact; " + std::to_string(damaged) +
                        " damaged files exit 3"};
    }
  } catch (const std::exception& ex) {
    failures.push_back(std::string("exception: ") + ex.what());
  }
  fs::remove_all(dir);
  std::string detail;
  for (const auto& s : failures) detail += (detail.empty() ? "" : "; ") + s;
  return {false, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  app.add_option("--only", only, "run only these criteria (comma-separated)")->delimiter(',');
  app.add_option("--seeds", seeds, "ablation seeds")->delimiter(',')->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int n) { return selected.empty() || selected.count(n) > 0; };
  int failed = 0;
  auto report = [&](int n, const char* name, const Verdict& v) {
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name
              << "): " << v.detail << std::endl;
    failed += !v.pass;
  };

  try {
    if (wanted(1)) report(1, "gradient oracle", gradient_oracle());
    if (wanted(2)) report(2, "matcher oracle", matcher_oracle());
    if (wanted(3)) report(3, "closed forms", closed_forms());
    if (wanted(4)) report(4, "OBD equivalence", obd_equivalence());
    if (wanted(5) || wanted(6) || wanted(7)) {
      const auto v = ablation(seeds);
      if (wanted(5)) report(5, "ablation ordering", v.ordering);
      if (wanted(6)) report(6, "background token", v.background);
      if (wanted(7)) report(7, "OOD separation", v.separation);
    }
    if (wanted(8)) report(8, "overfit oracle", overfit_oracle());
    if (wanted(9)) report(9, "persistence", persistence());
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
