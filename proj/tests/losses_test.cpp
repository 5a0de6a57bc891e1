#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "mobe/gradcheck_suite.hpp"
#include "mobe/losses.hpp"
#include "test_util.hpp"

namespace mobe {
namespace {

using testing::one_hot_rows;
using testing::random_tensor;

Tensor unit_rows(Tensor t) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < t.cols(); ++c) n += t(r, c) * t(r, c);
    n = std::sqrt(n);
    for (std::size_t c = 0; c < t.cols(); ++c) t(r, c) /= n;
  }
  return t;
}

double retrieval_value(const Tensor& hf, const Tensor& y, double tau = 1.0) {
  ad::Tape tape;
  return loss::retrieval_loss(tape.constant(hf), tape.constant(y), tau).value().item();
}

double sra_value(const Tensor& f, const Tensor& y, const Tensor& id) {
  ad::Tape tape;
  return loss::sra_loss(tape.constant(f), tape.constant(y), id).value().item();
}

std::vector<std::size_t> mixed_subjects(std::size_t n, std::size_t s) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i % s;
  return out;
}

TEST(RouterLoss, UniformLogitsGiveLogS) {
  ad::Tape tape;
  const Tensor id = one_hot_rows({0, 1, 2, 3, 1}, 4);
  const double v = loss::router_loss(tape.constant(Tensor(Shape{5, 4})), id).value().item();
  EXPECT_NEAR(v, std::log(4.0), 1e-12);
}

TEST(RouterLoss, LargeMarginTendsToZero) {
  ad::Tape tape;
  Tensor logits(Shape{2, 3});
  logits(0, 1) = 60.0;
  logits(1, 2) = 60.0;
  EXPECT_LT(loss::router_loss(tape.constant(logits), one_hot_rows({1, 2}, 3)).value().item(), 1e-20);
}

TEST(RouterLoss, MatchesScalarLoop) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng() % 9, S = 2 + rng() % 4;
    const Tensor logits = random_tensor({n, S}, rng, 2.0);
    std::vector<std::size_t> cls(n);
    for (auto& c : cls) c = rng() % S;
    double expect = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double z = 0.0;
      for (std::size_t k = 0; k < S; ++k) z += std::exp(logits(r, k));
      expect -= std::log(std::exp(logits(r, cls[r])) / z);
    }
    ad::Tape tape;
    EXPECT_NEAR(loss::router_loss(tape.constant(logits), one_hot_rows(cls, S)).value().item(), expect / n, 1e-12);
  }
}

TEST(ClassificationLoss, ZeroLogitsGiveLn2) {
  Rng rng(2);
  Tensor labels(Shape{6, 5});
  for (auto& v : labels.data()) v = rng() % 2;
  ad::Tape tape;
  EXPECT_NEAR(loss::classification_loss(tape.constant(Tensor(Shape{6, 5})), labels).value().item(),
              std::log(2.0), 1e-12);
}

TEST(ClassificationLoss, SaturatedIsNearZero) {
  Tensor labels = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor logits = Tensor::matrix(2, 2, {10, -10, -10, 10});
  ad::Tape tape;
  EXPECT_LT(loss::classification_loss(tape.constant(logits), labels).value().item(), 1e-4);
}

TEST(ClassificationLoss, MatchesScalarLoopAndRejectsSoftLabels) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng() % 8, c = 1 + rng() % 6;
    const Tensor z = random_tensor({n, c}, rng, 3.0);
    Tensor y(Shape{n, c});
    for (auto& v : y.data()) v = rng() % 2;
    double expect = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-z[i]));
      expect -= y[i] * std::log(p) + (1 - y[i]) * std::log(1 - p);
    }
    ad::Tape tape;
    EXPECT_NEAR(loss::classification_loss(tape.constant(z), y).value().item(), expect / z.size(), 1e-12);
  }
  ad::Tape tape;
  EXPECT_THROW(loss::classification_loss(tape.constant(Tensor(Shape{1, 2})), Tensor::matrix(1, 2, {0.5, 1})),
               DomainError);
}

TEST(RetrievalLoss, SingleSampleIsZero) {
  Rng rng(4);
  const Tensor a = unit_rows(random_tensor({1, 5}, rng)), b = unit_rows(random_tensor({1, 5}, rng));
  EXPECT_EQ(retrieval_value(a, b), 0.0);
}

TEST(RetrievalLoss, TwoByTwoIdentityLogits) {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(retrieval_value(eye, eye), 4.0 * std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(retrieval_value(eye, eye), 1.2530, 5e-5);
}

// Softmax over rows (fMRI to image) and over columns (image to fMRI).
TEST(RetrievalLoss, MatchesDoubleLoop) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng() % 8, e = 2 + rng() % 6;
    const double tau = trial % 2 ? 1.0 : 0.1;
    const Tensor h = unit_rows(random_tensor({n, e}, rng)), y = unit_rows(random_tensor({n, e}, rng));
    std::vector<double> logit(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < e; ++k) d += h(i, k) * y(j, k);
        logit[i * n + j] = d / tau;
      }
    double expect = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0, col = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row += std::exp(logit[i * n + j]);
        col += std::exp(logit[j * n + i]);
      }
      expect -= std::log(std::exp(logit[i * n + i]) / row) + std::log(std::exp(logit[i * n + i]) / col);
    }
    EXPECT_NEAR(retrieval_value(h, y, tau), expect, 1e-10);
  }
}

TEST(RetrievalLoss, InvariantToJointPermutation) {
  Rng rng(6);
  const Tensor h = unit_rows(random_tensor({7, 4}, rng)), y = unit_rows(random_tensor({7, 4}, rng));
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  EXPECT_NEAR(retrieval_value(h, y), retrieval_value(h.gather_rows(perm), y.gather_rows(perm)), 1e-12);
  EXPECT_GE(retrieval_value(h, y), 0.0);
}

TEST(RetrievalLoss, RejectsBadTemperature) {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  EXPECT_THROW(retrieval_value(eye, eye, 0.0), DomainError);
  EXPECT_THROW(retrieval_value(eye, eye, -1.0), DomainError);
}

TEST(ReconstructionLoss, PerfectPriorSingleSampleIsZero) {
  Rng rng(7);
  const Tensor y = unit_rows(random_tensor({1, 6}, rng));
  ad::Tape tape;
  EXPECT_EQ(loss::reconstruction_loss(tape.constant(y), tape.constant(y), tape.constant(y)).value().item(), 0.0);
}

TEST(ReconstructionLoss, ShiftedPriorAddsOne) {
  Rng rng(8);
  const Tensor y = unit_rows(random_tensor({4, 6}, rng)), h = unit_rows(random_tensor({4, 6}, rng));
  Tensor shifted = y;
  for (auto& v : shifted.data()) v += 1.0;
  ad::Tape tape;
  const double v = loss::reconstruction_loss(tape.constant(shifted), tape.constant(y), tape.constant(h)).value().item();
  EXPECT_NEAR(v, 1.0 + retrieval_value(h, y), 1e-12);
}

TEST(ReconstructionLoss, SumOfComponents) {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor p = random_tensor({5, 3}, rng), y = unit_rows(random_tensor({5, 3}, rng));
    const Tensor h = unit_rows(random_tensor({5, 3}, rng));
    double sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) sq += (p[i] - y[i]) * (p[i] - y[i]);
    ad::Tape tape;
    const double v = loss::reconstruction_loss(tape.constant(p), tape.constant(y), tape.constant(h)).value().item();
    EXPECT_NEAR(v, sq / p.size() + retrieval_value(h, y), 1e-12);
  }
}

TEST(Sra, BalancedSimilaritiesGiveLn2) {
  for (double s : {0.1, 0.5, 0.9}) {
    ad::Tape tape;
    const auto a = tape.constant(Tensor::scalar(s));
    EXPECT_NEAR(loss::sra_from_similarities(a, a).value().item(), std::log(2.0), 1e-12);
  }
}

TEST(Sra, ClampedIdentitySimilarityIsNearZero) {
  ad::Tape tape;
  const double v = loss::sra_from_similarities(tape.constant(Tensor::scalar(1.0)),
                                               tape.constant(Tensor::scalar(-0.3)))
                       .value()
                       .item();
  EXPECT_NEAR(v, std::log1p(loss::kSraEpsilon), 1e-15);
  EXPECT_NEAR(v, 1e-6, 1e-9);
}

TEST(Sra, MonotoneInImageSimilarity) {
  double prev = 1e300;
  for (double a = 0.05; a < 1.0; a += 0.05) {
    ad::Tape tape;
    const double v = loss::sra_from_similarities(tape.constant(Tensor::scalar(a)),
                                                 tape.constant(Tensor::scalar(0.4)))
                         .value()
                         .item();
    EXPECT_LT(v, prev);
    EXPECT_GE(v, 0.0);
    prev = v;
  }
}

// Explicit Gram loops over normalized rows and an explicit flattened cosine.
TEST(Sra, MatchesScalarRecomputation) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6;
    const Tensor f = random_tensor({n, 5}, rng), y = random_tensor({n, 4}, rng);
    const Tensor id = one_hot_rows(mixed_subjects(n, 2), 2);
    const Tensor fn = unit_rows(f), yn = unit_rows(y);
    auto gram = [&](const Tensor& m) {
      std::vector<double> g(n * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double d = 0.0;
          for (std::size_t k = 0; k < m.cols(); ++k) d += m(i, k) * m(j, k);
          g[i * n + j] = d;
        }
      return g;
    };
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
      double d = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
      return d / std::sqrt(na * nb);
    };
    const auto mf = gram(fn), my = gram(yn), mi = gram(id);
    const double a = std::max(cosine(mf, my), loss::kSraEpsilon);
    const double b = std::max(cosine(mf, mi), loss::kSraEpsilon);
    EXPECT_NEAR(sra_value(f, y, id), -std::log(a / (a + b)), 1e-12);
  }
}

TEST(Sra, InvariantToRotationOfF) {
  Rng rng(11);
  const Tensor f = random_tensor({8, 2}, rng), y = random_tensor({8, 3}, rng);
  const Tensor id = one_hot_rows(mixed_subjects(8, 3), 3);
  const double theta = 0.7;
  Tensor rot = f;
  for (std::size_t r = 0; r < 8; ++r) {
    rot(r, 0) = std::cos(theta) * f(r, 0) - std::sin(theta) * f(r, 1);
    rot(r, 1) = std::sin(theta) * f(r, 0) + std::cos(theta) * f(r, 1);
  }
  EXPECT_NEAR(sra_value(f, y, id), sra_value(rot, y, id), 1e-12);
}

TEST(Sra, RejectsSingleSubjectBatch) {
  Rng rng(12);
  const Tensor f = random_tensor({4, 3}, rng), y = random_tensor({4, 3}, rng);
  EXPECT_THROW(sra_value(f, y, one_hot_rows({1, 1, 1, 1}, 3)), DomainError);
  EXPECT_THROW(sra_value(f.slice_rows(0, 1), y.slice_rows(0, 1), one_hot_rows({0}, 2)), DomainError);
}

TEST(Losses, GradcheckEveryLoss) {
  const auto reports = run_gradcheck_suite("losses", 20, 2);
  ASSERT_GE(reports.size(), 8u);
  for (const auto& r : reports) EXPECT_TRUE(r.pass) << r.name << " worst " << r.worst;
}

}  // namespace
}  // namespace mobe
