#include "doctest.h"

#include <cmath>
#include <random>
#include <stdexcept>

#include "oracles.hpp"
#include "segkd/kd.hpp"

using namespace segkd;

namespace {

Tensor random_logits(std::vector<int64_t> shape, uint64_t seed, double scale = 2.0) {
  std::mt19937_64 eng(seed);
  Tensor t(std::move(shape));
  oracle::fill_random(t, eng, scale);
  return t;
}

LabelMap random_labels(const std::array<int64_t, 3>& shape, int32_t classes, uint64_t seed) {
  LabelMap lm;
  lm.shape = shape;
  lm.labels.resize(static_cast<size_t>(shape[0] * shape[1] * shape[2]));
  std::mt19937_64 eng(seed);
  for (auto& v : lm.labels) v = static_cast<int32_t>(eng() % static_cast<uint64_t>(classes));
  return lm;
}

}  // namespace

TEST_CASE("kd_loss is zero with zero gradient when student equals teacher") {
  Tensor z = random_logits({3, 2, 2, 2}, 1);
  auto [loss, grad] = kd_loss(z, z, DistillConfig{2.0f, 1.0f});
  CHECK(std::fabs(loss) < 1e-9);
  for (int64_t i = 0; i < grad.numel(); ++i) CHECK(std::fabs(grad[i]) < 1e-9);
}

TEST_CASE("kd_loss single-voxel scalar case matches the hand-computed value") {
  // teacher (2,0), student (0,0), tau=1: p_T = (e^2/(e^2+1), 1/(e^2+1)),
  // loss = sum p_T ln(p_T / 0.5), computed independently below.
  Tensor t({2, 1, 1, 1});
  t[0] = 2.0f;
  t[1] = 0.0f;
  Tensor s({2, 1, 1, 1});
  const double e2 = std::exp(2.0);
  const double pt0 = e2 / (e2 + 1.0), pt1 = 1.0 / (e2 + 1.0);
  const double expected = pt0 * std::log(pt0 / 0.5) + pt1 * std::log(pt1 / 0.5);
  auto [loss, grad] = kd_loss(s, t, DistillConfig{1.0f, 1.0f});
  CHECK(loss == doctest::Approx(expected).epsilon(1e-6));
  CHECK(grad[0] == doctest::Approx(0.5 - pt0).epsilon(1e-5));
  CHECK(grad[1] == doctest::Approx(0.5 - pt1).epsilon(1e-5));
}

TEST_CASE("kd_loss gradient matches finite differences") {
  std::mt19937_64 seeds(555);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor s = random_logits({2, 2, 2, 2}, seeds());
    Tensor t = random_logits({2, 2, 2, 2}, seeds());
    DistillConfig cfg{1.5f, 1.0f};
    auto [loss, grad] = kd_loss(s, t, cfg);
    auto fd = oracle::finite_diff(s, [&]() { return kd_loss(s, t, cfg).first; }, 1e-3);
    CHECK(oracle::scaled_max_err(grad, fd) < 1e-4);
  }
}

TEST_CASE("kd_loss rejects mismatched shapes and bad temperature") {
  Tensor a = random_logits({2, 2, 2, 2}, 3);
  Tensor b = random_logits({2, 2, 2, 4}, 4);
  CHECK_THROWS_AS(kd_loss(a, b, DistillConfig{}), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss(a, a, DistillConfig{0.0f, 1.0f}), std::invalid_argument);
}

TEST_CASE("kd_loss is non-negative and shift invariant") {
  std::mt19937_64 seeds(777);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor s = random_logits({3, 2, 2, 2}, seeds(), 3.0);
    Tensor t = random_logits({3, 2, 2, 2}, seeds(), 3.0);
    auto [loss, grad] = kd_loss(s, t, DistillConfig{2.0f, 1.0f});
    CHECK(loss >= -1e-7);
    // Per-voxel constant shift of every class leaves the loss unchanged.
    Tensor s2 = s;
    const int64_t nvox = 8;
    for (int64_t v = 0; v < nvox; ++v)
      for (int64_t c = 0; c < 3; ++c) s2[c * nvox + v] += 4.25f;
    CHECK(kd_loss(s2, t, DistillConfig{2.0f, 1.0f}).first == doctest::Approx(loss).epsilon(1e-5));
  }
}

TEST_CASE("the raw KL gradient vanishes as temperature grows") {
  // d KL / d z_S = (1/(tau N)) (p_S - p_T) goes to 0 like 1/tau^2; the
  // exposed gradient carries the extra tau^2 loss factor, so divide it out.
  Tensor s = random_logits({3, 2, 2, 2}, 10, 3.0);
  Tensor t = random_logits({3, 2, 2, 2}, 11, 3.0);
  auto g1 = kd_loss(s, t, DistillConfig{1.0f, 1.0f}).second;
  auto g2 = kd_loss(s, t, DistillConfig{1e4f, 1.0f}).second;
  double n1 = 0.0, n2 = 0.0;
  for (int64_t i = 0; i < g1.numel(); ++i) {
    n1 += double(g1[i]) * double(g1[i]);
    n2 += double(g2[i]) / 1e8 * (double(g2[i]) / 1e8);
  }
  CHECK(std::sqrt(n2) / std::sqrt(n1) < 1e-2);

  // The tau^2-scaled gradient itself converges to a finite soft-matching
  // limit instead: doubling a large tau barely changes it.
  auto g3 = kd_loss(s, t, DistillConfig{2e4f, 1.0f}).second;
  CHECK(oracle::scaled_max_err(g2, g3) < 1e-3);
}

TEST_CASE("a small gradient step on the student strictly decreases kd_loss") {
  std::mt19937_64 seeds(901);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor s = random_logits({3, 2, 2, 2}, seeds(), 2.0);
    Tensor t = random_logits({3, 2, 2, 2}, seeds(), 2.0);
    DistillConfig cfg{2.0f, 1.0f};
    auto [before, grad] = kd_loss(s, t, cfg);
    if (before < 1e-8) continue;
    for (int64_t i = 0; i < s.numel(); ++i) s[i] -= 0.1f * grad[i];
    CHECK(kd_loss(s, t, cfg).first < before);
  }
}

TEST_CASE("seg_loss: strongly peaked logits on the truth give near-zero loss") {
  LabelMap lm = random_labels({2, 2, 2}, 3, 12);
  Tensor z({3, 2, 2, 2});
  const int64_t nvox = 8;
  for (int64_t v = 0; v < nvox; ++v)
    for (int64_t c = 0; c < 3; ++c) z[c * nvox + v] = (c == lm.labels[size_t(v)]) ? 20.0f : -20.0f;
  auto [loss, grad] = seg_loss(z, lm, DistillConfig{});
  CHECK(loss < 0.01);
}

TEST_CASE("seg_loss: uniform logits give a cross-entropy term of ln 2 for C=2") {
  LabelMap lm = random_labels({2, 2, 2}, 2, 13);
  Tensor z({2, 2, 2, 2});
  DistillConfig cfg;
  auto [loss, grad] = seg_loss(z, lm, cfg);
  // Subtract the Dice part computed from probabilities of exactly 0.5.
  const double eps = cfg.dice_smooth;
  const int64_t nvox = 8;
  double dice_term = 0.0;
  for (int64_t c = 0; c < 2; ++c) {
    int64_t ysum = 0;
    for (auto v : lm.labels) ysum += v == c;
    dice_term += 1.0 - (2.0 * 0.5 * ysum + eps) / (0.5 * nvox + ysum + eps);
  }
  dice_term /= 2.0;
  CHECK(loss - dice_term == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("seg_loss rejects out-of-range labels with the voxel index") {
  LabelMap lm = random_labels({2, 2, 2}, 2, 14);
  lm.labels[5] = 7;
  Tensor z({2, 2, 2, 2});
  CHECK_THROWS_WITH_AS(seg_loss(z, lm, DistillConfig{}), doctest::Contains("voxel 5"), std::invalid_argument);
}

TEST_CASE("seg_loss gradient matches finite differences") {
  std::mt19937_64 seeds(606);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor z = random_logits({3, 2, 2, 2}, seeds());
    LabelMap lm = random_labels({2, 2, 2}, 3, seeds());
    DistillConfig cfg;
    auto [loss, grad] = seg_loss(z, lm, cfg);
    auto fd = oracle::finite_diff(z, [&]() { return seg_loss(z, lm, cfg).first; }, 1e-3);
    CHECK(oracle::scaled_max_err(grad, fd) < 1e-3);
  }
}

TEST_CASE("total_loss: lambda 0 equals seg_loss with the same gradient") {
  Tensor s = random_logits({2, 2, 2, 2}, 21);
  Tensor t = random_logits({2, 2, 2, 2}, 22);
  LabelMap lm = random_labels({2, 2, 2}, 2, 23);
  DistillConfig cfg{2.0f, 0.0f};
  LossBreakdown lb = total_loss(s, &t, lm, cfg);
  auto [sl, sg] = seg_loss(s, lm, cfg);
  CHECK(lb.total == doctest::Approx(sl));
  for (int64_t i = 0; i < sg.numel(); ++i) CHECK(lb.grad_logits[i] == doctest::Approx(sg[i]).epsilon(1e-7));
}

TEST_CASE("total_loss: student equal to teacher reduces to seg_loss at lambda 1") {
  Tensor s = random_logits({2, 2, 2, 2}, 31);
  LabelMap lm = random_labels({2, 2, 2}, 2, 32);
  DistillConfig cfg{2.0f, 1.0f};
  LossBreakdown lb = total_loss(s, &s, lm, cfg);
  CHECK(lb.kd_loss == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(lb.total == doctest::Approx(lb.seg_loss));
}

TEST_CASE("total_loss is linear in lambda") {
  Tensor s = random_logits({3, 2, 2, 2}, 41);
  Tensor t = random_logits({3, 2, 2, 2}, 42);
  LabelMap lm = random_labels({2, 2, 2}, 3, 43);
  DistillConfig c0{2.0f, 0.0f}, c2{2.0f, 2.0f};
  const double l0 = total_loss(s, &t, lm, c0).total;
  const double l2 = total_loss(s, &t, lm, c2).total;
  const double kd = kd_loss(s, t, c2).first;
  CHECK(l2 - l0 == doctest::Approx(2.0 * kd).epsilon(1e-6));
}

TEST_CASE("total_loss breakdown invariant: total = seg + lambda * kd, kd >= 0") {
  std::mt19937_64 seeds(3003);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor s = random_logits({3, 2, 2, 2}, seeds());
    Tensor t = random_logits({3, 2, 2, 2}, seeds());
    LabelMap lm = random_labels({2, 2, 2}, 3, seeds());
    DistillConfig cfg{3.0f, 0.7f};
    LossBreakdown lb = total_loss(s, &t, lm, cfg);
    CHECK(lb.kd_loss >= -1e-7);
    CHECK(std::fabs(lb.total - (lb.seg_loss + 0.7 * lb.kd_loss)) < 1e-6);
  }
}
