#pragma once

// Word-parallel inner-product kernels.
//
// ternary_dot:  x . y = sum_i popcount(TM(x_i, y_i)) - lane_capacity
// binary_dot:   x . y = 2 * popcount(xnor(x, y)) - N        (pad corrected)
// multibit_dot: x . y = sum_{m,k} alpha_m beta_k (x_m (.) y_k)
//
// TM is xnor on the codec lanes with zero-operand lanes forced back to a
// zero code. The zero mask is derived from the second operand only, so for
// weight operands it can be precomputed once (see ternary_zero_seed).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "ternkit/codec.hpp"

namespace ternkit {

// Word-op counters for complexity accounting. Compiled in only when
// TERNKIT_OP_COUNTERS is defined; the hot loops are untouched otherwise.
struct OpCounters {
  std::uint64_t tm_words = 0;
  std::uint64_t xnor_words = 0;
  std::uint64_t popcount_words = 0;
};

#ifdef TERNKIT_OP_COUNTERS
inline constexpr bool kOpCountersEnabled = true;
namespace detail {
inline thread_local OpCounters tl_op_counters;
}
inline OpCounters op_counters() noexcept { return detail::tl_op_counters; }
inline void reset_op_counters() noexcept { detail::tl_op_counters = {}; }
#define TERNKIT_COUNT_OP(field) (++::ternkit::detail::tl_op_counters.field)
#else
inline constexpr bool kOpCountersEnabled = false;
inline OpCounters op_counters() noexcept { return {}; }
inline void reset_op_counters() noexcept {}
#define TERNKIT_COUNT_OP(field) ((void)0)
#endif

/// Per-lane seed of the zero mask: bit 2i set iff lane i of `yw` is a zero
/// code (its two bits differ). The full 0b11 mask is d | (d << 1).
inline std::uint64_t ternary_zero_seed(std::uint64_t yw) noexcept {
  return (yw ^ (yw >> 1)) & kAuxi;
}

/// Lane-wise ternary multiply in codec space:
/// decode(result) == decode(x) * decode(y) for every lane, and lanes whose
/// product is nonzero come out bit-exact (0b11 for +1, 0b00 for -1).
/// Zero-operand lanes (detected on y only) are forced to the canonical 0b01.
inline std::uint64_t ternary_multiply_word(std::uint64_t xw,
                                           std::uint64_t yw) noexcept {
  TERNKIT_COUNT_OP(tm_words);
  const std::uint64_t xnor = ~(xw ^ yw);
  const std::uint64_t d = ternary_zero_seed(yw);
  // Equivalent to (mask & auxi) | (~mask & xnor) with mask = d | (d << 1):
  // setting the low bit and clearing the high bit of each masked lane.
  return (xnor | d) & ~(d << 1);
}

/// Same multiply with the zero seed supplied from a precomputed buffer.
inline std::uint64_t ternary_multiply_word_premask(std::uint64_t xw,
                                                   std::uint64_t yw,
                                                   std::uint64_t d) noexcept {
  TERNKIT_COUNT_OP(tm_words);
  const std::uint64_t xnor = ~(xw ^ yw);
  return (xnor | d) & ~(d << 1);
}

namespace detail {

inline std::int64_t ternary_dot_words(const std::uint64_t* x,
                                      const std::uint64_t* y,
                                      std::size_t words) noexcept {
  std::int64_t acc = 0;
  for (std::size_t i = 0; i < words; ++i) {
    TERNKIT_COUNT_OP(popcount_words);
    acc += std::popcount(ternary_multiply_word(x[i], y[i]));
  }
  return acc - static_cast<std::int64_t>(words) * kLanesPerWord;
}

inline std::int64_t ternary_dot_words_premask(const std::uint64_t* x,
                                              const std::uint64_t* y,
                                              const std::uint64_t* seed,
                                              std::size_t words) noexcept {
  std::int64_t acc = 0;
  for (std::size_t i = 0; i < words; ++i) {
    TERNKIT_COUNT_OP(popcount_words);
    acc += std::popcount(ternary_multiply_word_premask(x[i], y[i], seed[i]));
  }
  return acc - static_cast<std::int64_t>(words) * kLanesPerWord;
}

inline std::int64_t binary_dot_words(const std::uint64_t* x,
                                     const std::uint64_t* y, std::size_t words,
                                     std::size_t logical_len) noexcept {
  std::int64_t pop = 0;
  for (std::size_t i = 0; i < words; ++i) {
    TERNKIT_COUNT_OP(xnor_words);
    TERNKIT_COUNT_OP(popcount_words);
    pop += std::popcount(~(x[i] ^ y[i]));
  }
  // Padding bits are 0 in both operands, so each contributes one xnor match.
  return 2 * pop - 2 * static_cast<std::int64_t>(words) * 64 +
         static_cast<std::int64_t>(logical_len);
}

}  // namespace detail

/// Signed ternary inner product over packed codec vectors.
inline std::int64_t ternary_dot(const PackedTernaryVector& x,
                                const PackedTernaryVector& y) {
  if (x.logical_len != y.logical_len) {
    throw std::invalid_argument("ternary_dot: length mismatch");
  }
  return detail::ternary_dot_words(x.words.data(), y.words.data(),
                                   x.words.size());
}

/// Zero-mask seeds for every word of a weight vector, for the
/// precomputed-mask dot variant.
inline std::vector<std::uint64_t> make_zero_seeds(
    const PackedTernaryVector& y) {
  std::vector<std::uint64_t> seeds(y.words.size());
  for (std::size_t i = 0; i < y.words.size(); ++i) {
    seeds[i] = ternary_zero_seed(y.words[i]);
  }
  return seeds;
}

inline std::int64_t ternary_dot_premask(const PackedTernaryVector& x,
                                        const PackedTernaryVector& y,
                                        std::span<const std::uint64_t> seeds) {
  if (x.logical_len != y.logical_len) {
    throw std::invalid_argument("ternary_dot_premask: length mismatch");
  }
  if (seeds.size() != y.words.size()) {
    throw std::invalid_argument("ternary_dot_premask: seed buffer mismatch");
  }
  return detail::ternary_dot_words_premask(x.words.data(), y.words.data(),
                                           seeds.data(), x.words.size());
}

/// Inner product over {0,1,2} activations stored with the -1 offset:
/// sum_i a_i * w_i = ternary_dot(a - 1, w) + sum_i w_i.
inline std::int64_t ternary_dot_nonneg(const PackedTernaryVector& a_packed,
                                       const PackedTernaryVector& w_packed,
                                       std::int64_t w_sum) {
  if (!a_packed.nonneg_offset) {
    throw std::invalid_argument(
        "ternary_dot_nonneg: activation vector lacks the nonneg offset flag");
  }
  return ternary_dot(a_packed, w_packed) + w_sum;
}

/// Bit-packed {-1,+1} vector, 1 bit per element (1 -> 1, -1 -> 0),
/// little-endian bit order, zero-padded final word.
struct PackedBinaryVector {
  std::vector<std::uint64_t> words;
  std::size_t logical_len = 0;
};

inline PackedBinaryVector pack_binary(std::span<const std::int8_t> values) {
  PackedBinaryVector out;
  out.logical_len = values.size();
  out.words.assign((values.size() + 63) / 64, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] != 1 && values[i] != -1) {
      throw std::invalid_argument("binary value out of range {-1,1}");
    }
    if (values[i] == 1) out.words[i / 64] |= 1ull << (i % 64);
  }
  return out;
}

inline std::int64_t binary_dot(const PackedBinaryVector& x,
                               const PackedBinaryVector& y) {
  if (x.logical_len != y.logical_len) {
    throw std::invalid_argument("binary_dot: length mismatch");
  }
  return detail::binary_dot_words(x.words.data(), y.words.data(),
                                  x.words.size(), x.logical_len);
}

/// Bit-plane decomposition of a multi-bit vector: value = sum_m scale_m *
/// plane_m with plane entries in {-1, +1}.
struct MultiBitVector {
  std::vector<PackedBinaryVector> planes;
  std::vector<double> scales;

  std::size_t logical_len() const {
    return planes.empty() ? 0 : planes.front().logical_len;
  }
};

/// Decomposed multi-bit inner product: one binary_dot per plane pair,
/// O(M*K*N) word operations.
inline double multibit_dot(const MultiBitVector& x, const MultiBitVector& y) {
  if (x.planes.empty() || y.planes.empty() ||
      x.planes.size() != x.scales.size() ||
      y.planes.size() != y.scales.size()) {
    throw std::invalid_argument("multibit_dot: malformed operand");
  }
  const std::size_t n = x.logical_len();
  for (const auto& p : x.planes) {
    if (p.logical_len != n) throw std::invalid_argument("multibit_dot: plane length mismatch");
  }
  for (const auto& p : y.planes) {
    if (p.logical_len != n) throw std::invalid_argument("multibit_dot: plane length mismatch");
  }
  double acc = 0.0;
  for (std::size_t m = 0; m < x.planes.size(); ++m) {
    for (std::size_t k = 0; k < y.planes.size(); ++k) {
      acc += x.scales[m] * y.scales[k] *
             static_cast<double>(binary_dot(x.planes[m], y.planes[k]));
    }
  }
  return acc;
}

}  // namespace ternkit
