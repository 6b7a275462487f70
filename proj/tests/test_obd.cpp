#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"

namespace cdformer {
namespace {

using testing::Matrix;
using testing::mat_mul;
using testing::mat_t;
using testing::random_tensor;
using testing::softmax_plain;
using testing::to_matrix;

SupportSequence sequence(const std::vector<int>& slot_classes, const Tensor& features) {
  // slot_classes: class id per position, -1 for a placeholder; feature rows
  // follow the order in which classes appear.
  SupportSequence s;
  std::size_t row = 0;
  for (int c : slot_classes) {
    if (c < 0) {
      s.slots.push_back({});
    } else {
      s.slots.push_back({c, row++});
    }
  }
  s.class_features = features;
  s.validate();
  return s;
}

// Every row mapped by w: row -> w * row.
Matrix project(const Matrix& x, const Matrix& w) { return mat_mul(x, mat_t(w)); }

TEST(KeySequence, NoPlaceholdersGivesProjectedClassesOnly) {
  Rng rng(1);
  Tensor c = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({4, 4}, rng);
  BackgroundToken t{random_tensor({4}, rng)};
  auto keys = to_matrix(build_key_sequence(sequence({0, 1, 2}, c), w, t));
  auto expect = project(to_matrix(c), to_matrix(w));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(keys[i][j], expect[i][j], 1e-14);
}

TEST(KeySequence, SinglePlaceholderIsTheTokenVerbatim) {
  Rng rng(2);
  Tensor w = random_tensor({4, 4}, rng);
  BackgroundToken t{random_tensor({4}, rng)};
  SupportSequence s;
  s.slots = {Slot{}};
  auto keys = build_key_sequence(s, w, t);
  EXPECT_EQ(keys.to_vector(), t.vector.to_vector());
}

TEST(KeySequence, PlaceholderInTheMiddleIsUnprojected) {
  Rng rng(3);
  Tensor c = random_tensor({4, 6}, rng);
  Tensor w = random_tensor({6, 6}, rng);
  BackgroundToken t{random_tensor({6}, rng)};
  auto keys = to_matrix(build_key_sequence(sequence({0, 1, -1, 2, 3}, c), w, t));
  auto proj = project(to_matrix(c), to_matrix(w));
  const std::vector<int> row_of = {0, 1, -1, 2, 3};
  for (std::size_t n = 0; n < 5; ++n) {
    for (std::size_t j = 0; j < 6; ++j) {
      const double want = row_of[n] < 0 ? t.vector[j] : proj[static_cast<std::size_t>(row_of[n])][j];
      EXPECT_EQ(keys[n][j], want) << "position " << n;
    }
  }
}

TEST(KeySequence, DimensionMismatchThrows) {
  Rng rng(4);
  Tensor c = random_tensor({2, 4}, rng);
  BackgroundToken t{random_tensor({5}, rng)};
  EXPECT_THROW(build_key_sequence(sequence({0, 1}, c), random_tensor({5, 5}, rng), t), ShapeError);
  EXPECT_THROW(build_value_sequence(sequence({0, 1}, c), random_tensor({5, 5}, rng)), ShapeError);
}

TEST(ValueSequence, AllPlaceholdersIsZero) {
  Rng rng(5);
  SupportSequence s;
  s.slots = {Slot{}, Slot{}, Slot{}};
  auto v = build_value_sequence(s, random_tensor({4, 4}, rng));
  EXPECT_EQ(v.shape(), (Shape{3, 4}));
  for (double x : v.to_vector()) EXPECT_EQ(x, 0.0);
}

TEST(ValueSequence, IdentityProjectionReturnsClassRows) {
  Rng rng(6);
  Tensor c = random_tensor({2, 4}, rng);
  auto v = to_matrix(build_value_sequence(sequence({7, -1, 3}, c), Tensor::identity(4)));
  auto cm = to_matrix(c);
  EXPECT_EQ(v[0], cm[0]);
  EXPECT_EQ(v[1], std::vector<double>(4, 0.0));
  EXPECT_EQ(v[2], cm[1]);
}

TEST(ValueSequence, ZeroRowsReceiveNoGradient) {
  Rng rng(7);
  Tensor c = random_tensor({2, 4}, rng);
  Tensor w = random_tensor({4, 4}, rng);
  BackgroundToken t{random_tensor({4}, rng)};
  auto s = sequence({0, -1, 1}, c);
  testing::weighted_sum(build_value_sequence(s, w)).backward();
  for (double g : t.vector.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_TRUE(c.has_grad());
}

TEST(OfeSupport, SingleClassAttendsItself) {
  Rng rng(8);
  Tensor c = random_tensor({1, 4}, rng);
  OfeProjections p{random_tensor({4, 4}, rng), random_tensor({4, 4}, rng),
                   random_tensor({4, 4}, rng)};
  BackgroundToken t{random_tensor({4}, rng)};
  auto r = ofe_support(sequence({5}, c), p, t);
  EXPECT_DOUBLE_EQ(r.attention.item(), 1.0);
  auto expect = project(to_matrix(c), to_matrix(p.w3));
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_NEAR(r.per_position_output.at(0, j), expect[0][j], 1e-14);
}

// One class c orthogonal to T_b with |c|^2 = sqrt(d), w2 = w3 = I: the class
// row's logits are [1, 0].
TEST(OfeSupport, ClassAndPlaceholderHandEvaluation) {
  const std::size_t d = 4;
  const double a = std::sqrt(std::sqrt(static_cast<double>(d)));  // |c| = d^(1/4)
  Tensor c = Tensor::matrix(1, d, {a, 0, 0, 0});
  BackgroundToken t{Tensor::from({d}, {0, 0.7, -0.2, 0.5})};
  OfeProjections p{Tensor::identity(d), Tensor::identity(d), Tensor::identity(d)};
  auto r = ofe_support(sequence({0, -1}, c), p, t);
  const double e = std::exp(1.0);
  EXPECT_NEAR(r.attention.at(0, 0), e / (e + 1.0), 1e-12);
  EXPECT_NEAR(r.attention.at(0, 1), 1.0 / (e + 1.0), 1e-12);
  EXPECT_NEAR(r.per_position_output.at(0, 0), e / (e + 1.0) * a, 1e-12);
  for (std::size_t j = 1; j < d; ++j) EXPECT_NEAR(r.per_position_output.at(0, j), 0.0, 1e-15);
}

TEST(OfeSupport, IdenticalKeysGiveUniformAttention) {
  Tensor c = Tensor::matrix(3, 4, {0.3, -0.1, 0.8, 0.2, 0.3, -0.1, 0.8, 0.2, 0.3, -0.1, 0.8, 0.2});
  BackgroundToken t{Tensor::from({4}, {0.3, -0.1, 0.8, 0.2})};
  OfeProjections p{Tensor::identity(4), Tensor::identity(4), Tensor::identity(4)};
  auto r = ofe_support(sequence({0, -1, 1, 2, -1}, c), p, t);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(r.attention.at(i, j), 0.2, 1e-14);
}

// With no placeholders the support branch is plain scaled dot-product
// self-attention over the projected class features.
TEST(OfeSupport, NoPlaceholdersEqualsSelfAttentionOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const std::size_t c = 1 + seed % 5, d = 6;
    Tensor feats = random_tensor({c, d}, rng);
    OfeProjections p{random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                     random_tensor({d, d}, rng)};
    BackgroundToken t{random_tensor({d}, rng)};
    std::vector<int> ids(c);
    std::iota(ids.begin(), ids.end(), 0);
    auto r = ofe_support(sequence(ids, feats), p, t);

    const Matrix k = project(to_matrix(feats), to_matrix(p.w2));
    const Matrix v = project(to_matrix(feats), to_matrix(p.w3));
    Matrix logits = mat_mul(k, mat_t(k));
    for (auto& row : logits)
      for (double& x : row) x /= std::sqrt(static_cast<double>(d));
    const Matrix out = mat_mul(softmax_plain(logits), v);
    double worst = 0.0;
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < d; ++j)
        worst = std::max(worst, std::abs(out[i][j] - r.per_position_output.at(i, j)));
    EXPECT_LT(worst, 1e-10) << "seed " << seed;
  }
}

TEST(OfeQuery, ZeroQueryProjectionGivesUniformAttention) {
  Rng rng(9);
  const std::size_t d = 4;
  Tensor feats = random_tensor({2, d}, rng);
  OfeProjections p{Tensor::zeros({d, d}), random_tensor({d, d}, rng), random_tensor({d, d}, rng)};
  BackgroundToken t{random_tensor({d}, rng)};
  FusionParams f = FusionParams::init(d, 8, rng);
  auto s = sequence({0, -1, 1}, feats);
  auto r = ofe_query(Tensor::zeros({3, d}), s, p, t, f);
  const auto values = to_matrix(build_value_sequence(s, p.w3));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(r.attention.at(i, n), 1.0 / 3.0, 1e-14);
    for (std::size_t j = 0; j < d; ++j) {
      const double col_mean = (values[0][j] + values[1][j] + values[2][j]) / 3.0;
      EXPECT_NEAR(r.per_position_output.at(i, j), col_mean, 1e-14);
    }
  }
}

TEST(OfeQuery, DominantKeySaturatesAttention) {
  const std::size_t d = 4;
  Tensor feats = Tensor::matrix(2, d, {40, 0, 0, 0, 0, 40, 0, 0});
  OfeProjections p{Tensor::identity(d), Tensor::identity(d), Tensor::identity(d)};
  BackgroundToken t{Tensor::zeros({d})};
  Rng rng(10);
  FusionParams f = FusionParams::init(d, 8, rng);
  Tensor q = Tensor::matrix(1, d, {0, 3, 0, 0});
  auto r = ofe_query(q, sequence({0, 1, -1}, feats), p, t, f);
  EXPECT_GT(r.attention.at(0, 1), 1.0 - 1e-12);
  EXPECT_NEAR(r.per_position_output.at(0, 1), 40.0, 1e-9);
}

// Straight-line reimplementation of the query branch: Q' = Q w1, S' = keys,
// M = softmax(Q' S'^T / sqrt d), F_out = M S'', refined =
// FFN(Conv1D([Q, F_out])).
TEST(OfeQuery, MatchesStraightLineOracle) {
  Rng rng(11);
  const std::size_t d = 4, p_count = 3;
  Tensor feats = random_tensor({1, d}, rng);
  OfeProjections p{random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                   random_tensor({d, d}, rng)};
  BackgroundToken t{random_tensor({d}, rng)};
  FusionParams f = FusionParams::init(d, 5, rng);
  Tensor q = random_tensor({p_count, d}, rng);
  auto r = ofe_query(q, sequence({2, -1}, feats), p, t, f);

  const Matrix qm = to_matrix(q);
  const Matrix qp = project(qm, to_matrix(p.w1));
  Matrix keys = project(to_matrix(feats), to_matrix(p.w2));
  keys.push_back(t.vector.to_vector());
  Matrix values = project(to_matrix(feats), to_matrix(p.w3));
  values.push_back(std::vector<double>(d, 0.0));
  Matrix logits = mat_mul(qp, mat_t(keys));
  for (auto& row : logits)
    for (double& x : row) x /= 2.0;  // sqrt(4)
  const Matrix att = softmax_plain(logits);
  const Matrix fout = mat_mul(att, values);

  auto linear = [](const Matrix& x, const Linear& l) {
    Matrix y = mat_mul(x, to_matrix(l.weight));
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += l.bias[j];
    return y;
  };
  Matrix cat(p_count);
  for (std::size_t i = 0; i < p_count; ++i) {
    cat[i] = qm[i];
    cat[i].insert(cat[i].end(), fout[i].begin(), fout[i].end());
  }
  Matrix fused = mat_mul(cat, to_matrix(f.kernel));
  for (auto& row : fused)
    for (std::size_t j = 0; j < d; ++j) row[j] += f.bias[j];
  Matrix hidden = linear(fused, f.ffn.inner);
  for (auto& row : hidden)
    for (double& x : row)
      x = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  Matrix refined = linear(hidden, f.ffn.outer);
  for (std::size_t i = 0; i < p_count; ++i)
    for (std::size_t j = 0; j < d; ++j) refined[i][j] += fused[i][j];

  for (std::size_t i = 0; i < p_count; ++i) {
    for (std::size_t n = 0; n < 2; ++n) EXPECT_NEAR(r.attention.at(i, n), att[i][n], 1e-12);
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_NEAR(r.per_position_output.at(i, j), fout[i][j], 1e-12);
      EXPECT_NEAR(r.refined.at(i, j), refined[i][j], 1e-10);
    }
  }
}

TEST(OfeQuery, RefinedShapeIndependentOfSequenceLength) {
  Rng rng(12);
  const std::size_t d = 8;
  OfeProjections p{random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                   random_tensor({d, d}, rng)};
  BackgroundToken t{random_tensor({d}, rng)};
  FusionParams f = FusionParams::init(d, 8, rng);
  Tensor q = random_tensor({6, d}, rng);
  for (std::size_t n = 1; n <= 6; ++n) {
    std::vector<int> slots(n, -1);
    slots[0] = 0;
    auto r = ofe_query(q, sequence(slots, random_tensor({1, d}, rng)), p, t, f, 2);
    EXPECT_EQ(r.refined.shape(), (Shape{6, d}));
    EXPECT_EQ(r.attention.shape(), (Shape{6, n}));
  }
}

TEST(ObdProperties, AttentionRowsAreStochastic) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(200 + seed);
    const std::size_t d = 8;
    OfeProjections p{random_tensor({d, d}, rng, -3, 3), random_tensor({d, d}, rng, -3, 3),
                     random_tensor({d, d}, rng, -3, 3)};
    BackgroundToken t{random_tensor({d}, rng)};
    FusionParams f = FusionParams::init(d, 8, rng);
    auto s = sequence({0, -1, 1, -1}, random_tensor({2, d}, rng));
    auto rs = ofe_support(s, p, t, 2);
    auto rq = ofe_query(random_tensor({5, d}, rng), s, p, t, f, 2);
    for (const Tensor& a : {rs.attention, rq.attention, rq.head_attention[1]}) {
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) row += a.at(i, j);
        EXPECT_NEAR(row, 1.0, 1e-9);
      }
    }
  }
}

// With the attention held fixed, T_b only reaches the output through the
// values, which are constant zero rows.
TEST(ObdProperties, TokenGetsNoGradientThroughValues) {
  Rng rng(13);
  const std::size_t d = 4;
  Tensor feats = random_tensor({2, d}, rng);
  OfeProjections p{random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                   random_tensor({d, d}, rng)};
  BackgroundToken t{random_tensor({d}, rng)};
  auto s = sequence({0, -1, 1}, feats);
  Tensor frozen;
  {
    NoGradGuard no_grad;
    frozen = ofe_support(s, p, t).attention.detach();
  }
  testing::weighted_sum(matmul(frozen, build_value_sequence(s, p.w3))).backward();
  for (double g : t.vector.grad()) EXPECT_EQ(g, 0.0);

  // Through the live attention the token does receive gradient.
  testing::weighted_sum(ofe_support(s, p, t).per_position_output).backward();
  const auto g = t.vector.grad();
  EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; }));
}

TEST(ObdProperties, PermutingPositionsPermutesOutputs) {
  Rng rng(14);
  const std::size_t d = 6;
  Tensor feats = random_tensor({3, d}, rng);
  OfeProjections p{random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                   random_tensor({d, d}, rng)};
  BackgroundToken t{random_tensor({d}, rng)};
  FusionParams f = FusionParams::init(d, 8, rng);
  Tensor q = random_tensor({4, d}, rng);
  auto base = sequence({0, 1, -1, 2}, feats);
  // Position n of `perm` holds position order[n] of `base`.
  const std::vector<std::size_t> order = {2, 0, 3, 1};
  SupportSequence perm{{}, feats};
  for (std::size_t n : order) perm.slots.push_back(base.slots[n]);

  auto a = ofe_support(base, p, t, 2), b = ofe_support(perm, p, t, 2);
  auto qa = ofe_query(q, base, p, t, f, 2), qb = ofe_query(q, perm, p, t, f, 2);
  for (std::size_t n = 0; n < order.size(); ++n) {
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_NEAR(b.per_position_output.at(n, j), a.per_position_output.at(order[n], j), 1e-12);
    }
    for (std::size_t i = 0; i < 4; ++i)
      EXPECT_NEAR(qb.attention.at(i, n), qa.attention.at(i, order[n]), 1e-12);
  }
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(qa.refined[i], qb.refined[i], 1e-12);
}

TEST(BackgroundMass, Examples) {
  SupportSequence none = sequence({0, 1}, Tensor::zeros({2, 3}));
  for (double m : background_attention_mass(Tensor::full({4, 2}, 0.5), none)) EXPECT_EQ(m, 0.0);

  SupportSequence all;
  all.slots = {Slot{}, Slot{}, Slot{}};
  for (double m : background_attention_mass(Tensor::full({2, 3}, 1.0 / 3.0), all))
    EXPECT_NEAR(m, 1.0, 1e-15);

  SupportSequence one = sequence({0, 1, -1, 2, 3}, Tensor::zeros({4, 3}));
  for (double m : background_attention_mass(Tensor::full({3, 5}, 0.2), one))
    EXPECT_NEAR(m, 0.2, 1e-15);

  EXPECT_THROW(background_attention_mass(Tensor::full({3, 4}, 0.25), one), ShapeError);
}

}  // namespace
}  // namespace cdformer
