#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ternkit/quantizer.hpp"

using namespace ternkit;

TEST_CASE("weight quantizer hand examples, unit steps") {
  const QuantThresholds t{1.0f, 1.0f};
  CHECK(quantize_weight_value(0.6f, t) == 1);
  CHECK(quantize_weight_value(-0.3f, t) == 0);
  CHECK(quantize_weight_value(-0.7f, t) == -1);
  CHECK(quantize_weight_value(0.0f, t) == 0);
}

TEST_CASE("bankers rounding sends the half-step tie to zero") {
  const QuantThresholds t{1.0f, 1.0f};
  CHECK(quantize_weight_value(0.5f, t) == 0);
  CHECK(quantize_weight_value(-0.5f, t) == 0);
}

TEST_CASE("activation quantizer hand examples") {
  const QuantThresholds t{0.5f, 1.0f};
  CHECK(quantize_activation_value(0.4f, t) == 1);
  CHECK(quantize_activation_value(1.6f, t) == 2);
  CHECK(quantize_activation_value(0.1f, t) == 0);
  CHECK(quantize_activation_value(0.0f, t) == 0);
}

TEST_CASE("activation quantizer rejects negative input") {
  CHECK_THROWS_AS(quantize_activation_value(-0.1f, {1.0f, 1.0f}),
                  std::invalid_argument);
}

TEST_CASE("invalid step sizes are rejected") {
  const std::vector<float> x{0.1f};
  CHECK_THROWS_AS(quantize_weight(x, {0.0f, 1.0f}), std::invalid_argument);
  CHECK_THROWS_AS(quantize_weight(x, {1.0f, -1.0f}), std::invalid_argument);
}

TEST_CASE("weight quantizer matches the threshold-comparison oracle") {
  std::mt19937 rng(20);
  std::uniform_real_distribution<float> au(0.2f, 2.5f), pu(-3.0f, 3.0f);
  for (int it = 0; it < 100000; ++it) {
    const QuantThresholds t{au(rng), au(rng)};
    const float p = pu(rng);
    // skip exact-tie neighborhoods; bankers tie handling is tested separately
    if (std::abs(p + t.alpha1 / 2) < 1e-5f || std::abs(p - t.alpha2 / 2) < 1e-5f) {
      continue;
    }
    int want = 0;
    if (p > t.alpha2 / 2) want = 1;
    if (p < -t.alpha1 / 2) want = -1;
    REQUIRE(quantize_weight_value(p, t) == want);
  }
}

TEST_CASE("activation quantizer matches the threshold-comparison oracle") {
  std::mt19937 rng(21);
  std::uniform_real_distribution<float> au(0.2f, 2.5f), pu(0.0f, 5.0f);
  for (int it = 0; it < 100000; ++it) {
    const QuantThresholds t{au(rng), au(rng)};
    const float p = pu(rng);
    const float th1 = t.alpha1 / 2, th2 = t.alpha1 + t.alpha2 / 2;
    if (std::abs(p - th1) < 1e-5f || std::abs(p - th2) < 1e-5f) continue;
    int want = 0;
    if (p > th1) want = 1;
    if (p > th2) want = 2;
    REQUIRE(quantize_activation_value(p, t) == want);
  }
}

TEST_CASE("both quantizers are nondecreasing in p") {
  const QuantThresholds t{0.8f, 1.3f};
  int prev_w = -2, prev_a = -1;
  for (float p = -3.0f; p <= 3.0f; p += 0.01f) {
    const int q = quantize_weight_value(p, t);
    CHECK(q >= prev_w);
    prev_w = q;
  }
  for (float p = 0.0f; p <= 5.0f; p += 0.01f) {
    const int q = quantize_activation_value(p, t);
    CHECK(q >= prev_a);
    prev_a = q;
  }
}

TEST_CASE("equal step sizes reduce to the uniform ternary quantizer") {
  const float s = 0.9f;
  const QuantThresholds t{s, s};
  for (float p = -3.0f; p <= 3.0f; p += 0.013f) {
    if (std::abs(std::abs(p) - s / 2) < 1e-4f) continue;
    int want = 0;
    if (p > s / 2) want = 1;
    if (p < -s / 2) want = -1;
    CHECK(quantize_weight_value(p, t) == want);
  }
}

namespace {

// double precision so finite differences are not dominated by f32 rounding
double surrogate(double p, const QuantThresholds& t, QuantMode mode) {
  auto clip = [](double v, double lo, double hi) {
    return v < lo ? lo : (v > hi ? hi : v);
  };
  const double a1 = t.alpha1, a2 = t.alpha2;
  if (mode == QuantMode::kWeight) {
    return clip(p / a1, -1.0, 0.0) + clip(p / a2, 0.0, 1.0);
  }
  return clip(p / a1, 0.0, 1.0) + clip((p - a1) / a2, 0.0, 1.0);
}

bool near_knee(float p, const QuantThresholds& t, QuantMode mode, float margin) {
  std::vector<float> knees;
  if (mode == QuantMode::kWeight) {
    knees = {-t.alpha1, 0.0f, t.alpha2};
  } else {
    knees = {0.0f, t.alpha1, t.alpha1 + t.alpha2};
  }
  for (float k : knees) {
    if (std::abs(p - k) < margin) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("input gradients match finite differences of the surrogate") {
  std::mt19937 rng(22);
  std::uniform_real_distribution<float> au(0.4f, 1.8f);
  const float h = 1e-3f;
  for (QuantMode mode : {QuantMode::kWeight, QuantMode::kActivationNonneg}) {
    std::uniform_real_distribution<float> pu(
        mode == QuantMode::kWeight ? -2.5f : 0.0f, 3.0f);
    int checked = 0;
    for (int it = 0; it < 20000 && checked < 1200; ++it) {
      const QuantThresholds t{au(rng), au(rng)};
      const float p = pu(rng);
      const float margin = 0.05f * std::min(t.alpha1, t.alpha2);
      if (near_knee(p, t, mode, margin + h)) continue;
      std::vector<float> pv{p}, uv{1.0f};
      QuantGrad g = quantize_backward(pv, t, uv, mode);
      const float fd = (surrogate(p + h, t, mode) - surrogate(p - h, t, mode)) / (2 * h);
      const float scale = std::max({std::abs(fd), std::abs(g.d_input[0]), 1.0f});
      REQUIRE(std::abs(g.d_input[0] - fd) / scale < 1e-4f);
      ++checked;
    }
    CHECK(checked >= 1200);
  }
}

TEST_CASE("step-size gradients match finite differences of the surrogate") {
  std::mt19937 rng(23);
  std::uniform_real_distribution<float> au(0.5f, 1.5f);
  const float h = 1e-3f;
  for (QuantMode mode : {QuantMode::kWeight, QuantMode::kActivationNonneg}) {
    std::uniform_real_distribution<float> pu(
        mode == QuantMode::kWeight ? -2.0f : 0.0f, 2.5f);
    int checked = 0;
    for (int it = 0; it < 20000 && checked < 1000; ++it) {
      const QuantThresholds t{au(rng), au(rng)};
      const float p = pu(rng);
      const float margin = 0.05f * std::min(t.alpha1, t.alpha2);
      // perturbing alpha moves the knees, so keep a wider guard band
      if (near_knee(p, t, mode, 4 * margin)) continue;
      std::vector<float> pv{p}, uv{1.0f};
      QuantGrad g = quantize_backward(pv, t, uv, mode);
      const float fd1 = (surrogate(p, {t.alpha1 + h, t.alpha2}, mode) -
                         surrogate(p, {t.alpha1 - h, t.alpha2}, mode)) /
                        (2 * h);
      const float fd2 = (surrogate(p, {t.alpha1, t.alpha2 + h}, mode) -
                         surrogate(p, {t.alpha1, t.alpha2 - h}, mode)) /
                        (2 * h);
      const float s1 = std::max({std::abs(fd1), std::abs(g.d_alpha1), 1.0f});
      const float s2 = std::max({std::abs(fd2), std::abs(g.d_alpha2), 1.0f});
      REQUIRE(std::abs(g.d_alpha1 - fd1) / s1 < 1e-3f);
      REQUIRE(std::abs(g.d_alpha2 - fd2) / s2 < 1e-3f);
      ++checked;
    }
    CHECK(checked >= 1000);
  }
}

TEST_CASE("fully clipped inputs get zero input gradient") {
  const QuantThresholds t{1.0f, 1.0f};
  std::vector<float> pv{5.0f}, uv{1.0f};
  QuantGrad g = quantize_backward(pv, t, uv, QuantMode::kWeight);
  CHECK(g.d_input[0] == 0.0f);
  pv[0] = -5.0f;
  g = quantize_backward(pv, t, uv, QuantMode::kWeight);
  CHECK(g.d_input[0] == 0.0f);
}

TEST_CASE("weight-mode step gradients obey d_alpha1(p) = -d_alpha2(-p)") {
  const QuantThresholds t{0.9f, 0.9f};
  for (float p : {0.2f, 0.45f, 0.8f}) {
    std::vector<float> pos{p}, neg{-p}, uv{1.0f};
    QuantGrad gp = quantize_backward(pos, t, uv, QuantMode::kWeight);
    QuantGrad gn = quantize_backward(neg, t, uv, QuantMode::kWeight);
    CHECK(gn.d_alpha1 == Catch::Approx(-gp.d_alpha2).margin(1e-6));
  }
}

TEST_CASE("dequantize maps levels to the step values") {
  const QuantThresholds t{0.8f, 1.0f};
  CHECK(dequantize_value(-1, t, QuantMode::kWeight) == Catch::Approx(-0.8f));
  CHECK(dequantize_value(0, t, QuantMode::kWeight) == 0.0f);
  CHECK(dequantize_value(1, t, QuantMode::kWeight) == Catch::Approx(1.0f));
  const QuantThresholds ta{0.5f, 1.0f};
  CHECK(dequantize_value(2, ta, QuantMode::kActivationNonneg) == Catch::Approx(1.5f));
  CHECK_THROWS_AS(dequantize_value(3, t, QuantMode::kWeight), std::invalid_argument);
}

TEST_CASE("quantize of dequantize is the identity on levels") {
  std::mt19937 rng(24);
  std::uniform_real_distribution<float> au(0.3f, 2.0f);
  for (int it = 0; it < 500; ++it) {
    const QuantThresholds t{au(rng), au(rng)};
    for (int q : {-1, 0, 1}) {
      CHECK(quantize_weight_value(dequantize_value(q, t, QuantMode::kWeight), t) == q);
    }
    for (int q : {0, 1, 2}) {
      CHECK(quantize_activation_value(
                dequantize_value(q, t, QuantMode::kActivationNonneg), t) == q);
    }
  }
}

TEST_CASE("backward rejects mismatched shapes") {
  std::vector<float> p{0.1f, 0.2f}, u{1.0f};
  CHECK_THROWS_AS(quantize_backward(p, {1.0f, 1.0f}, u, QuantMode::kWeight),
                  std::invalid_argument);
}
