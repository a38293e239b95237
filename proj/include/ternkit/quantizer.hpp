#pragma once

// Non-uniform ternary quantizers with learnable step sizes.
//
// Weight mode (real domain, output in {-1, 0, 1}):
//     Q_w(p) = round(clip(p / a1, -1, 0)) + round(clip(p / a2, 0, 1))
// thresholds sit at {-a1/2, a2/2}.
//
// Non-negative activation mode (post-ReLU, output in {0, 1, 2}):
//     Q_a(p) = round(clip(p / a1, 0, 1)) + round(clip((p - a1) / a2, 0, 1))
//
// round is bankers rounding (half to even). Gradients treat round as a
// pass-through and differentiate the clipped normalization, so d_input gates
// outside the clip intervals and the step-size gradients follow from the
// round-removed surrogate. Clip boundaries count as inside.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "ternkit/codec.hpp"

namespace ternkit {

enum class QuantMode { kWeight, kActivationNonneg };

namespace detail {
inline float clipf(float v, float lo, float hi) noexcept {
  return v < lo ? lo : (v > hi ? hi : v);
}
inline float bankers_round(float v) noexcept {
  // The default FP environment rounds to nearest-even.
  return std::nearbyintf(v);
}
inline void require_finite(float p) {
  if (!std::isfinite(p)) {
    throw std::invalid_argument("quantizer input is not finite");
  }
}
}  // namespace detail

inline int quantize_weight_value(float p, const QuantThresholds& t) {
  detail::require_finite(p);
  const float lo = detail::bankers_round(detail::clipf(p / t.alpha1, -1.f, 0.f));
  const float hi = detail::bankers_round(detail::clipf(p / t.alpha2, 0.f, 1.f));
  return static_cast<int>(lo) + static_cast<int>(hi);
}

inline int quantize_activation_value(float p, const QuantThresholds& t) {
  detail::require_finite(p);
  if (p < 0.0f) {
    throw std::invalid_argument("activation quantizer requires p >= 0");
  }
  const float lo = detail::bankers_round(detail::clipf(p / t.alpha1, 0.f, 1.f));
  const float hi =
      detail::bankers_round(detail::clipf((p - t.alpha1) / t.alpha2, 0.f, 1.f));
  return static_cast<int>(lo) + static_cast<int>(hi);
}

inline std::vector<std::int8_t> quantize_weight(std::span<const float> p,
                                                const QuantThresholds& t) {
  t.validate();
  std::vector<std::int8_t> q(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    q[i] = static_cast<std::int8_t>(quantize_weight_value(p[i], t));
  }
  return q;
}

inline std::vector<std::int8_t> quantize_activation_nonneg(
    std::span<const float> p, const QuantThresholds& t) {
  t.validate();
  std::vector<std::int8_t> q(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    q[i] = static_cast<std::int8_t>(quantize_activation_value(p[i], t));
  }
  return q;
}

/// STE gradients of the quantizer w.r.t. its input and both step sizes.
struct QuantGrad {
  std::vector<float> d_input;
  float d_alpha1 = 0.0f;
  float d_alpha2 = 0.0f;
};

inline QuantGrad quantize_backward(std::span<const float> p,
                                   const QuantThresholds& t,
                                   std::span<const float> upstream,
                                   QuantMode mode) {
  t.validate();
  if (p.size() != upstream.size()) {
    throw std::invalid_argument("quantize_backward: shape mismatch");
  }
  QuantGrad g;
  g.d_input.assign(p.size(), 0.0f);
  const float a1 = t.alpha1, a2 = t.alpha2;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float u = upstream[i];
    const float x = p[i];
    float din = 0.0f;
    if (mode == QuantMode::kWeight) {
      if (x >= -a1 && x <= 0.0f) {
        din += 1.0f / a1;
        g.d_alpha1 += u * (-x / (a1 * a1));
      }
      if (x >= 0.0f && x <= a2) {
        din += 1.0f / a2;
        g.d_alpha2 += u * (-x / (a2 * a2));
      }
    } else {
      if (x >= 0.0f && x <= a1) {
        din += 1.0f / a1;
        g.d_alpha1 += u * (-x / (a1 * a1));
      }
      if (x >= a1 && x <= a1 + a2) {
        din += 1.0f / a2;
        g.d_alpha1 += u * (-1.0f / a2);
        g.d_alpha2 += u * (-(x - a1) / (a2 * a2));
      }
    }
    g.d_input[i] = u * din;
  }
  return g;
}

/// Real value of a quantization level: -1/0/1 -> -a1/0/a2 in weight mode,
/// 0/1/2 -> 0/a1/a1+a2 in activation mode.
inline float dequantize_value(int q, const QuantThresholds& t, QuantMode mode) {
  if (mode == QuantMode::kWeight) {
    switch (q) {
      case -1: return -t.alpha1;
      case 0: return 0.0f;
      case 1: return t.alpha2;
    }
  } else {
    switch (q) {
      case 0: return 0.0f;
      case 1: return t.alpha1;
      case 2: return t.alpha1 + t.alpha2;
    }
  }
  throw std::invalid_argument("dequantize: level out of range");
}

inline std::vector<float> dequantize(std::span<const std::int8_t> q,
                                     const QuantThresholds& t, QuantMode mode) {
  std::vector<float> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    out[i] = dequantize_value(q[i], t, mode);
  }
  return out;
}

/// Quantize-then-pack. Activation mode stores (q - 1) lanes and sets the
/// nonneg offset flag on the result.
inline PackedTernaryVector quantize_and_pack(std::span<const float> x,
                                             const QuantThresholds& t,
                                             QuantMode mode) {
  if (mode == QuantMode::kWeight) {
    return pack(quantize_weight(x, t));
  }
  std::vector<std::int8_t> stored = quantize_activation_nonneg(x, t);
  for (auto& v : stored) v = static_cast<std::int8_t>(v - 1);
  PackedTernaryVector packed = pack(stored);
  packed.nonneg_offset = true;
  return packed;
}

}  // namespace ternkit
