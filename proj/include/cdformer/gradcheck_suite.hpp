#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cdformer/boxes.hpp"
#include "cdformer/gradcheck.hpp"
#include "cdformer/harness.hpp"
#include "cdformer/obd.hpp"
#include "cdformer/ood.hpp"
#include "cdformer/set_head.hpp"

namespace cdformer {

struct OpGradReport {
  std::string op;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double rtol = 0.0;
  bool ok = true;
};

struct GradcheckOptions {
  double primitive_rtol = 1e-5;
  double loss_rtol = 1e-4;
  double atol = 1e-8;
  double step = 1e-6;
  std::uint64_t seed = 7;
  // Test hook: negate the analytic gradient of this op before comparing.
  std::string sign_flip_op;
};

namespace detail {

// Inputs of one gradient case; `loss` builds a scalar from them.
struct GradCase {
  std::string op;
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> loss;
};

inline Tensor random_input(Shape shape, Rng& rng, double lo, double hi, double min_magnitude = 0.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) {
    do x = dist(rng);
    while (std::abs(x) < min_magnitude);
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

// sum(y * w) with fixed pseudo-random weights, so every output coordinate
// reaches the scalar.
inline Tensor probe_sum(const Tensor& y, std::uint64_t salt) {
  Rng rng(0xC0FFEE + salt);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(y.size());
  for (double& x : w) x = dist(rng);
  return sum(mul(y, Tensor::from(y.shape(), std::move(w))));
}

inline OpGradReport check_case(const GradCase& c, double rtol, const GradcheckOptions& opt) {
  OpGradReport rep{c.op, 0.0, 0.0, rtol, true};
  std::vector<Tensor> leaves;
  for (const auto& t : c.inputs) leaves.push_back(Tensor::from(t.shape(), t.to_vector(), true));
  c.loss(leaves).backward();
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto analytic = leaves[i].grad();
    if (c.op == opt.sign_flip_op)
      for (double& g : analytic) g = -g;
    const auto numeric = finite_diff_gradient(
        [&] {
          NoGradGuard no_grad;
          return c.loss(leaves).item();
        },
        leaves[i], opt.step);
    const auto cmp = compare_gradients(analytic, numeric, rtol, opt.atol);
    rep.max_rel_error = std::max(rep.max_rel_error, cmp.max_rel_error);
    rep.max_abs_error = std::max(rep.max_abs_error, cmp.max_abs_error);
    rep.ok = rep.ok && cmp.ok;
  }
  return rep;
}

inline std::vector<GradCase> primitive_cases(Rng& rng) {
  using V = std::vector<Tensor>;
  std::vector<GradCase> cases;
  std::uint64_t salt = 0;
  auto unary = [&](std::string op, std::function<Tensor(const Tensor&)> f, double lo, double hi,
                   double min_mag = 0.0) {
    const std::uint64_t s = ++salt;
    cases.push_back({std::move(op), {random_input({3, 4}, rng, lo, hi, min_mag)},
                     [f, s](const V& x) { return probe_sum(f(x[0]), s); }});
  };
  auto binary = [&](std::string op, std::function<Tensor(const Tensor&, const Tensor&)> f,
                    Tensor a, Tensor b) {
    const std::uint64_t s = ++salt;
    cases.push_back({std::move(op), {std::move(a), std::move(b)},
                     [f, s](const V& x) { return probe_sum(f(x[0], x[1]), s); }});
  };
  auto mat = [&](std::size_t r, std::size_t c) { return random_input({r, c}, rng, -1.0, 1.0); };

  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, mat(3, 4), mat(3, 4));
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, mat(3, 4), mat(3, 4));
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, mat(3, 4), mat(3, 4));
  binary("div", [](const Tensor& a, const Tensor& b) { return div(a, b); }, mat(3, 4),
         random_input({3, 4}, rng, 0.5, 2.0));
  // Kinked ops get operands at least 0.05 apart.
  {
    Tensor a = mat(3, 4);
    std::vector<double> bv = a.to_vector();
    std::uniform_real_distribution<double> gap(0.05, 0.5), sign(-1.0, 1.0);
    for (double& x : bv) x += sign(rng) < 0 ? -gap(rng) : gap(rng);
    Tensor b = Tensor::from({3, 4}, bv, true);
    binary("minimum", [](const Tensor& p, const Tensor& q) { return minimum(p, q); }, a, b);
    binary("maximum", [](const Tensor& p, const Tensor& q) { return maximum(p, q); }, a, b);
  }
  binary("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, mat(3, 4),
         mat(4, 2));
  binary("add_row_bias", [](const Tensor& a, const Tensor& b) { return add_row_bias(a, b); },
         mat(3, 4), random_input({4}, rng, -1.0, 1.0));
  binary("concat_channels",
         [](const Tensor& a, const Tensor& b) { return concat_channels(a, b); }, mat(3, 4),
         mat(3, 2));
  binary("stack_rows",
         [](const Tensor& a, const Tensor& b) {
           return stack_rows({{a, 2}, {}, {b, 0}, {a, 0}, {b, 1}}, 4);
         },
         mat(3, 4), mat(2, 4));

  unary("scale", [](const Tensor& x) { return scale(x, -1.7); }, -1.0, 1.0);
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, -1.0, 1.0);
  unary("neg", [](const Tensor& x) { return neg(x); }, -1.0, 1.0);
  unary("exp", [](const Tensor& x) { return exp(x); }, -1.0, 1.0);
  unary("log", [](const Tensor& x) { return log(x); }, 0.2, 2.0);
  unary("abs", [](const Tensor& x) { return abs(x); }, -1.0, 1.0, 0.05);
  unary("relu", [](const Tensor& x) { return relu(x); }, -1.0, 1.0, 0.05);
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, -3.0, 3.0);
  unary("tanh", [](const Tensor& x) { return tanh(x); }, -2.0, 2.0);
  unary("gelu", [](const Tensor& x) { return gelu(x); }, -2.0, 2.0);
  unary("reshape", [](const Tensor& x) { return reshape(x, {2, 6}); }, -1.0, 1.0);
  unary("sum", [](const Tensor& x) { return scale(sum(x), 1.0); }, -1.0, 1.0);
  unary("mean", [](const Tensor& x) { return mean(x); }, -1.0, 1.0);
  unary("transpose", [](const Tensor& x) { return transpose(x); }, -1.0, 1.0);
  unary("softmax_rows", [](const Tensor& x) { return softmax_rows(x); }, -2.0, 2.0);
  unary("log_softmax_rows", [](const Tensor& x) { return log_softmax_rows(x); }, -2.0, 2.0);
  unary("layer_norm_rows", [](const Tensor& x) { return layer_norm_rows(x); }, -2.0, 2.0);
  unary("slice_columns", [](const Tensor& x) { return slice_columns(x, 1, 2); }, -1.0, 1.0);
  {
    const std::vector<double> targets = {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1};
    cases.push_back({"bce_with_logits_sum", {random_input({3, 4}, rng, -3.0, 3.0)},
                     [targets](const V& x) { return bce_with_logits_sum(x[0], targets); }});
  }
  {
    const std::uint64_t s = ++salt;
    cases.push_back({"pointwise_conv1d",
                     {mat(5, 4), mat(4, 3), random_input({3}, rng, -1.0, 1.0)},
                     [s](const V& x) { return probe_sum(pointwise_conv1d(x[0], x[1], x[2]), s); }});
  }
  {
    const std::uint64_t s = ++salt;
    cases.push_back({"multi_head_attention", {mat(3, 4), mat(5, 4), mat(5, 4)},
                     [s](const V& x) {
                       return probe_sum(multi_head_attention(x[0], x[1], x[2], 2).output, s);
                     }});
  }
  {
    // Overlapping but distinct boxes keep every min/max branch strict.
    Tensor a = Tensor::from({2, 4}, {0.40, 0.45, 0.30, 0.20, 0.55, 0.50, 0.25, 0.40}, true);
    Tensor b = Tensor::from({2, 4}, {0.47, 0.41, 0.22, 0.33, 0.62, 0.58, 0.35, 0.18}, true);
    binary("giou_rows", [](const Tensor& p, const Tensor& q) { return giou_rows(p, q); }, a, b);
  }
  return cases;
}

// Micro model for the module-level and full-loss checks.
inline RunConfig micro_run_config() {
  RunConfig run = default_run_config();
  run.benchmark.grid_rows = 2;
  run.benchmark.grid_cols = 2;
  run.benchmark.class_count = 2;
  run.benchmark.sequence_capacity = 3;
  run.benchmark.objects_max = 1;
  run.benchmark.object_extent_max = 1;
  run.benchmark.feature_dim = 10;
  run.benchmark.base_classes = 4;
  run.benchmark.novel_classes = 4;
  run.model.sequence_capacity = 3;
  run.model.dim = 8;
  run.model.heads = 2;
  run.model.num_queries = 3;
  run.model.ffn_hidden = 8;
  run.sync();
  return run;
}

inline std::vector<GradCase> module_cases(Rng& rng) {
  using V = std::vector<Tensor>;
  std::vector<GradCase> cases;
  const std::size_t d = 4;
  auto mat = [&](std::size_t r, std::size_t c) { return random_input({r, c}, rng, -1.0, 1.0); };
  const std::vector<Slot> slots = {{3, 0}, {}, {1, 1}};
  cases.push_back({"ofe_support", {mat(2, d), mat(d, d), mat(d, d), random_input({d}, rng, -1.0, 1.0)},
                   [slots](const V& x) {
                     SupportSequence s{slots, x[0]};
                     OfeProjections p{x[1], x[1], x[2]};
                     return probe_sum(ofe_support(s, p, BackgroundToken{x[3]}, 2).per_position_output, 11);
                   }});
  {
    Rng frng(5);
    FusionParams fusion = FusionParams::init(d, 6, frng);
    cases.push_back({"ofe_query",
                     {mat(3, d), mat(2, d), mat(d, d), mat(d, d), mat(d, d),
                      random_input({d}, rng, -1.0, 1.0)},
                     [slots, fusion](const V& x) {
                       SupportSequence s{slots, x[1]};
                       OfeProjections p{x[2], x[3], x[4]};
                       return probe_sum(ofe_query(x[0], s, p, BackgroundToken{x[5]}, fusion, 2).refined, 12);
                     }});
  }
  cases.push_back({"infonce_loss", {mat(3, d), mat(6, d)}, [](const V& x) {
                     ClassFeatureSpace space{x[1], 0.5};
                     return infonce_loss(x[0], space, {4, 0, 2});
                   }});
  {
    GroundTruth gt{{Box{0.3, 0.4, 0.2, 0.3}, Box{0.7, 0.6, 0.3, 0.2}}, {3, 1}};
    MatchResult match;
    match.pairs = {{0, 1}, {2, 0}};
    match.unmatched_queries = {1, 3};
    cases.push_back({"set_loss",
                     {random_input({4, 4}, rng, -1.0, 1.0), random_input({4, 3}, rng, -2.0, 2.0)},
                     [slots, gt, match](const V& x) {
                       SupportSequence s{slots, Tensor::zeros({2, 1})};
                       auto out = DetectionOutput::from_logits(sigmoid(x[0]), x[1]);
                       return set_loss(out, gt, s, match, LossWeights{}).total;
                     }});
  }
  return cases;
}

}  // namespace detail

// Full training loss of a micro model against central differences, per named
// parameter, with the Hungarian matching held fixed.
inline std::vector<OpGradReport> check_training_loss(const GradcheckOptions& opt) {
  const RunConfig run = detail::micro_run_config();
  auto x = Experiment::create(run, Variant::kFull);
  const Episode e = generate_episode(run.benchmark, 3);
  auto ev = compute_loss(e, x.state, x.model);
  const MatchResult match = ev.match;
  x.state.zero_grad();
  ev.total.backward();
  std::vector<OpGradReport> out;
  OpGradReport total{"train_step_loss", 0.0, 0.0, opt.loss_rtol, true};
  for (const auto& [name, t] : x.state.named()) {
    auto analytic = t.grad();
    if (opt.sign_flip_op == "train_step_loss")
      for (double& g : analytic) g = -g;
    const auto numeric = finite_diff_gradient(
        [&] {
          NoGradGuard no_grad;
          return compute_loss(e, x.state, x.model, &match).total.item();
        },
        t, opt.step);
    const auto cmp = compare_gradients(analytic, numeric, opt.loss_rtol, opt.atol);
    total.max_rel_error = std::max(total.max_rel_error, cmp.max_rel_error);
    total.max_abs_error = std::max(total.max_abs_error, cmp.max_abs_error);
    if (!cmp.ok) {
      total.ok = false;
      out.push_back({"train_step_loss:" + name, cmp.max_rel_error, cmp.max_abs_error,
                     opt.loss_rtol, false});
    }
  }
  out.insert(out.begin(), total);
  return out;
}

// Every differentiable primitive, the module-level compositions and the full
// training loss.
inline std::vector<OpGradReport> run_gradcheck(const GradcheckOptions& opt = {}) {
  Rng rng(opt.seed);
  std::vector<OpGradReport> reports;
  for (const auto& c : detail::primitive_cases(rng))
    reports.push_back(detail::check_case(c, opt.primitive_rtol, opt));
  for (const auto& c : detail::module_cases(rng))
    reports.push_back(detail::check_case(c, opt.primitive_rtol, opt));
  for (auto& r : check_training_loss(opt)) reports.push_back(std::move(r));
  return reports;
}

}  // namespace cdformer
