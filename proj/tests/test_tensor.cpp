#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace cdformer {
namespace {

using testing::check_gradient;
using testing::random_tensor;
using testing::weighted_sum;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor y = matmul(Tensor::identity(3), x);
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(Matmul, HandArithmetic) {
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor b = Tensor::matrix(2, 1, {5, 6});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c[0], 17.0);
  EXPECT_DOUBLE_EQ(c[1], 39.0);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(2);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5, 3}, rng);
  EXPECT_TRUE(check_gradient([&](const Tensor& p) { return sum(matmul(p, b)); }, a).ok);
  EXPECT_TRUE(check_gradient([&](const Tensor& p) { return sum(matmul(a, p)); }, b).ok);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST(SoftmaxRows, SingleColumnIsOne) {
  Tensor y = softmax_rows(Tensor::matrix(3, 1, {-5, 0, 7}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(SoftmaxRows, UniformRow) {
  Tensor y = softmax_rows(Tensor::matrix(1, 3, {0, 0, 0}));
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxRows, LogRatiosRecoverWeights) {
  Tensor y = softmax_rows(Tensor::matrix(1, 3, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  EXPECT_NEAR(y[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(y[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(y[2], 3.0 / 6.0, 1e-15);
}

TEST(SoftmaxRows, RowsSumToOneAndShiftInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 6}, rng, -20, 20, false);
    Tensor y = softmax_rows(x);
    std::vector<double> shifted = x.to_vector();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 6; ++j) shifted[i * 6 + j] += 3.5 * static_cast<double>(i) - 40;
    Tensor ys = softmax_rows(Tensor::matrix(4, 6, shifted));
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        s += y.at(i, j);
        EXPECT_NEAR(y.at(i, j), ys.at(i, j), 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(SoftmaxRows, NonFiniteInputRaises) {
  EXPECT_THROW(softmax_rows(Tensor::matrix(1, 2, {0.0, std::nan("")})), NumericError);
}

TEST(Sigmoid, ClosedForms) {
  Tensor y = sigmoid(Tensor::from({3}, {0.0, -1000.0, std::log(3.0)}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_GE(y[1], 0.0);
  EXPECT_LT(y[1], 1e-300);
  EXPECT_NEAR(y[2], 0.75, 1e-15);
}

TEST(ConcatChannels, EmptySecondOperandIsIdentity) {
  Rng rng(4);
  Tensor x = random_tensor({3, 2}, rng);
  Tensor y = concat_channels(x, Tensor::zeros({3, 0}));
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(ConcatChannels, Scalars) {
  Tensor y = concat_channels(Tensor::matrix(1, 1, {1}), Tensor::matrix(1, 1, {2}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{1, 2}));
}

TEST(ConcatChannels, GradientSplitsBackLosslessly) {
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  EXPECT_TRUE(check_gradient([&](const Tensor& p) { return weighted_sum(concat_channels(p, b)); }, a).ok);
  EXPECT_TRUE(check_gradient([&](const Tensor& p) { return weighted_sum(concat_channels(a, p)); }, b).ok);

  // The split of an upstream gradient is exactly the upstream gradient.
  Tensor g = random_tensor({3, 6}, rng, -1, 1, false);
  Tensor la = Tensor::from(a.shape(), a.to_vector(), true);
  Tensor lb = Tensor::from(b.shape(), b.to_vector(), true);
  sum(mul(concat_channels(la, lb), g)).backward();
  std::vector<double> joined;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) joined.push_back(la.grad()[i * 4 + j]);
    for (std::size_t j = 0; j < 2; ++j) joined.push_back(lb.grad()[i * 2 + j]);
  }
  EXPECT_EQ(joined, g.to_vector());
}

TEST(ConcatChannels, LeadingExtentMismatch) {
  EXPECT_THROW(concat_channels(Tensor::zeros({2, 1}), Tensor::zeros({3, 1})), ShapeError);
}

TEST(PointwiseConv1d, IdentityKernelIsIdentity) {
  Rng rng(6);
  Tensor x = random_tensor({5, 3}, rng);
  Tensor y = pointwise_conv1d(x, Tensor::identity(3), Tensor::zeros({3}));
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(PointwiseConv1d, SingleRowIsVectorMatrixProductPlusBias) {
  Tensor x = Tensor::matrix(1, 2, {1, 2});
  Tensor k = Tensor::matrix(2, 3, {1, 0, 2, 0, 1, -1});
  Tensor b = Tensor::from({3}, {0.5, 0.25, 0});
  Tensor y = pointwise_conv1d(x, k, b);
  EXPECT_EQ(y.to_vector(), (std::vector<double>{1.5, 2.25, 0.0}));
}

TEST(PointwiseConv1d, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor k = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({5}, rng);
  EXPECT_TRUE(check_gradient([&](const Tensor& p) { return weighted_sum(pointwise_conv1d(p, k, b)); }, x).ok);
  EXPECT_TRUE(check_gradient([&](const Tensor& p) { return weighted_sum(pointwise_conv1d(x, p, b)); }, k).ok);
  EXPECT_TRUE(check_gradient([&](const Tensor& p) { return weighted_sum(pointwise_conv1d(x, k, p)); }, b).ok);
  EXPECT_THROW(pointwise_conv1d(x, Tensor::zeros({4, 5}), b), ShapeError);
}

TEST(Ffn, ZeroWeightsWithResidualIsIdentity) {
  Rng rng(8);
  FfnParams p{{Tensor::zeros({4, 8}), Tensor::zeros({8})}, {Tensor::zeros({8, 4}), Tensor::zeros({4})}, true};
  Tensor x = random_tensor({3, 4}, rng);
  EXPECT_EQ(ffn_apply(x, p).to_vector(), x.to_vector());
}

TEST(Ffn, EmptyInputGivesEmptyOutput) {
  Rng rng(9);
  auto p = make_ffn(4, 8, rng);
  Tensor y = ffn_apply(Tensor::zeros({0, 4}), p);
  EXPECT_EQ(y.size(), 0u);
}

TEST(Ffn, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  auto p = make_ffn(4, 6, rng);
  Tensor x = random_tensor({3, 4}, rng);
  EXPECT_TRUE(check_gradient([&](const Tensor& t) { return weighted_sum(ffn_apply(t, p)); }, x).ok);
  for (int k = 0; k < 4; ++k) {
    auto with = [&](const Tensor& t) {
      FfnParams q = p;
      Tensor* slots[] = {&q.inner.weight, &q.inner.bias, &q.outer.weight, &q.outer.bias};
      *slots[k] = t;
      return weighted_sum(ffn_apply(x, q));
    };
    const Tensor* orig[] = {&p.inner.weight, &p.inner.bias, &p.outer.weight, &p.outer.bias};
    EXPECT_TRUE(check_gradient(with, *orig[k]).ok) << "parameter " << k;
  }
  EXPECT_THROW(ffn_apply(Tensor::zeros({2, 5}), p), ShapeError);
}

TEST(FiniteDiff, SumHasUnitGradient) {
  Rng rng(11);
  Tensor x = random_tensor({2, 3}, rng);
  auto g = finite_diff_gradient([](const Tensor& t) { return sum(t).item(); }, x, 1e-5);
  for (double v : g) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, Square) {
  Tensor x = Tensor::scalar(3.0);
  auto g = finite_diff_gradient([](const Tensor& t) { return t.item() * t.item(); }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDiff, RejectsNonPositiveStepAndNonFiniteValues) {
  Tensor x = Tensor::scalar(1.0);
  EXPECT_THROW(finite_diff_gradient([](const Tensor&) { return 0.0; }, x, 0.0), ConfigError);
  EXPECT_THROW(finite_diff_gradient([](const Tensor&) { return std::nan(""); }, x, 1e-3),
               NumericError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor w = Tensor::from({3}, {1, 2, 3}, true);
  AdamState st;
  std::vector<Tensor> params{w};
  std::vector<std::vector<double>> grads{{0, 0, 0}};
  adam_step(params, grads, st);
  EXPECT_EQ(w.to_vector(), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(st.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // f(x) = x, gradient 1: m_hat = 1, v_hat = 1, step = lr / (1 + eps).
  Tensor w = Tensor::from({1}, {1.0}, true);
  AdamState st;
  st.learning_rate = 0.1;
  std::vector<Tensor> params{w};
  std::vector<std::vector<double>> grads{{1.0}};
  adam_step(params, grads, st);
  EXPECT_NEAR(w[0], 0.9, 1e-8);
}

TEST(Adam, ShapeMismatchRaises) {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  AdamState st;
  std::vector<Tensor> params{w};
  std::vector<std::vector<double>> grads{{1.0}};
  EXPECT_THROW(adam_step(params, grads, st), ShapeError);
}

TEST(Adam, ConvexQuadraticConverges) {
  Rng rng(12);
  Tensor target = random_tensor({6}, rng, -1, 1, false);
  Tensor w = Tensor::zeros({6}, true);
  AdamState st;
  st.learning_rate = 0.01;
  std::vector<Tensor> params{w};
  auto loss_at = [&] {
    Tensor diff = sub(w, target);
    return sum(mul(diff, diff));
  };
  const double initial = loss_at().item();
  for (int step = 0; step < 200; ++step) {
    w.zero_grad();
    loss_at().backward();
    adam_step(params, st);
  }
  EXPECT_EQ(st.step_count, 200u);
  EXPECT_LT(loss_at().item(), 1e-3 * initial);
}

TEST(Backward, ReusedInputsAccumulate) {
  Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
  sum(add(mul(x, x), x)).backward();  // d/dx (x^2 + x) = 2x + 1
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = sum(mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Forward, BitReproducible) {
  Rng rng(13);
  Tensor a = random_tensor({5, 7}, rng);
  Tensor b = random_tensor({7, 3}, rng);
  auto run = [&] { return softmax_rows(gelu(matmul(a, b))).to_vector(); };
  EXPECT_EQ(run(), run());
}

// Randomized primitive sweep: reverse mode against central differences on
// random shapes, 140 cases.
TEST(GradientProperty, EveryPrimitiveMatchesFiniteDifferences) {
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> ext(1, 5);
  using Op = std::function<Tensor(const Tensor&, std::size_t, std::size_t, Rng&)>;
  struct Case {
    const char* name;
    double lo, hi;
    Op op;
  };
  auto other = [](std::size_t m, std::size_t n, Rng& r, double lo = -1, double hi = 1) {
    return random_tensor({m, n}, r, lo, hi, false);
  };
  std::vector<Case> cases = {
      {"add", -1, 1, [&](const Tensor& x, auto m, auto n, Rng& r) { return add(x, other(m, n, r)); }},
      {"sub", -1, 1, [&](const Tensor& x, auto m, auto n, Rng& r) { return sub(other(m, n, r), x); }},
      {"mul", -1, 1, [&](const Tensor& x, auto m, auto n, Rng& r) { return mul(x, other(m, n, r)); }},
      {"div_num", -1, 1, [&](const Tensor& x, auto m, auto n, Rng& r) { return div(x, other(m, n, r, 0.5, 2)); }},
      {"div_den", 0.5, 2, [&](const Tensor& x, auto m, auto n, Rng& r) { return div(other(m, n, r), x); }},
      {"matmul_l", -1, 1, [&](const Tensor& x, auto, auto n, Rng& r) { return matmul(x, other(n, 3, r)); }},
      {"matmul_r", -1, 1, [&](const Tensor& x, auto m, auto, Rng& r) { return matmul(other(2, m, r), x); }},
      {"transpose", -1, 1, [](const Tensor& x, auto, auto, Rng&) { return transpose(x); }},
      {"softmax", -3, 3, [](const Tensor& x, auto, auto, Rng&) { return softmax_rows(x); }},
      {"log_softmax", -3, 3, [](const Tensor& x, auto, auto, Rng&) { return log_softmax_rows(x); }},
      {"sigmoid", -4, 4, [](const Tensor& x, auto, auto, Rng&) { return sigmoid(x); }},
      {"gelu", -3, 3, [](const Tensor& x, auto, auto, Rng&) { return gelu(x); }},
      {"tanh", -2, 2, [](const Tensor& x, auto, auto, Rng&) { return tanh(x); }},
      {"exp", -2, 2, [](const Tensor& x, auto, auto, Rng&) { return exp(x); }},
      {"log", 0.5, 3, [](const Tensor& x, auto, auto, Rng&) { return log(x); }},
      {"abs", 0.1, 1, [](const Tensor& x, auto, auto, Rng&) { return abs(neg(x)); }},
      {"relu", 0.1, 1, [](const Tensor& x, auto, auto, Rng&) { return relu(x); }},
      {"minimum", -1, 1, [&](const Tensor& x, auto m, auto n, Rng& r) { return minimum(x, other(m, n, r)); }},
      {"maximum", -1, 1, [&](const Tensor& x, auto m, auto n, Rng& r) { return maximum(x, other(m, n, r)); }},
      {"row_bias", -1, 1, [&](const Tensor& x, auto, auto, Rng& r) { return add_row_bias(other(3, x.size(), r), reshape(x, {x.size()})); }},
      {"layer_norm", -2, 2, [](const Tensor& x, auto, auto, Rng&) { return layer_norm_rows(x); }},
      {"concat", -1, 1, [&](const Tensor& x, auto m, auto, Rng& r) { return concat_channels(other(m, 2, r), x); }},
      {"slice", -1, 1, [](const Tensor& x, auto, auto n, Rng&) { return slice_columns(x, n / 2, n - n / 2); }},
      {"stack_rows", -1, 1, [](const Tensor& x, auto m, auto n, Rng&) {
         return stack_rows({{x, m - 1}, {}, {x, 0}, {x, m - 1}}, n);
       }},
      {"scale_shift", -1, 1, [](const Tensor& x, auto, auto, Rng&) { return add_scalar(scale(x, -2.5), 0.3); }},
      {"bce", -3, 3, [&](const Tensor& x, auto, auto, Rng& r) {
         std::bernoulli_distribution coin(0.5);
         std::vector<double> t(x.size());
         for (double& v : t) v = coin(r) ? 1.0 : 0.0;
         return bce_with_logits_sum(x, t);
       }},
      {"mean", -1, 1, [](const Tensor& x, auto, auto, Rng&) { return mean(x); }},
      {"giou_rows", 0.2, 0.6, [&](const Tensor& x, auto, auto, Rng& r) {
         Tensor boxes = reshape(x, {x.size() / 4, 4});
         return giou_rows(boxes, random_tensor(boxes.shape(), r, 0.2, 0.6, false));
       }},
  };
  int total = 0;
  for (int round = 0; round < 5; ++round) {
    for (const auto& c : cases) {
      std::size_t m = ext(rng), n = ext(rng);
      if (std::string(c.name) == "giou_rows") n = 4;
      Tensor x = random_tensor({m, n}, rng, c.lo, c.hi, false);
      const std::uint64_t op_seed = rng();
      auto loss = [&](const Tensor& p) {
        Rng local(op_seed);
        Tensor y = c.op(p, m, n, local);
        return y.size() == 1 ? y : weighted_sum(y);
      };
      auto r = check_gradient(loss, x, 1e-5, 1e-7);
      EXPECT_TRUE(r.ok) << c.name << " " << m << "x" << n << " max rel " << r.max_rel_error
                        << " max abs " << r.max_abs_error;
      ++total;
    }
  }
  EXPECT_GE(total, 100);
}

}  // namespace
}  // namespace cdformer
