#pragma once

// 2-bit ternary codec and bit-packed storage.
//
// Logical values {-1, 0, +1} map to 2-bit codes as
//
//     value  -1    0    0   +1
//     code  0b00 0b01 0b10 0b11
//
// Both 0b01 and 0b10 decode to zero; the packer always emits the canonical
// 0b01. The code space is chosen so that popcount(code) == value + 1 for
// every code, which is what lets a word-wide popcount act as the accumulator
// in the packed dot products (see bitkernels.hpp).
//
// Word layout: 64-bit words, 32 lanes per word, little-endian lane order.
// Logical element i lives in bits [2*(i mod 32), 2*(i mod 32)+1] of word
// i div 32. Trailing lanes of the last word are padded with 0b01 (value 0,
// popcount 1); the dot kernels subtract the full lane capacity so padding
// cancels exactly. The same layout is written verbatim into model files
// (docs/format.md).

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ternkit {

inline constexpr int kLanesPerWord = 32;

/// Constant word with every lane set to the canonical zero code 0b01.
inline constexpr std::uint64_t kAuxi = 0x5555555555555555ull;

/// Decode one 2-bit lane. All four patterns are valid.
inline int decode_lane(unsigned code) noexcept {
  return std::popcount(code & 3u) - 1;
}

/// Encode one ternary value; zero always becomes the canonical 0b01.
inline unsigned encode_lane(int value) {
  switch (value) {
    case -1: return 0b00u;
    case 0: return 0b01u;
    case 1: return 0b11u;
    default:
      throw std::invalid_argument("ternary value out of range {-1,0,1}: " +
                                  std::to_string(value));
  }
}

/// Learnable step sizes of the non-uniform ternary quantizer. alpha1 scales
/// the negative (or lower) branch, alpha2 the positive (or upper) branch;
/// alpha1 == alpha2 reduces to a uniform quantizer.
struct QuantThresholds {
  float alpha1 = 1.0f;
  float alpha2 = 1.0f;

  void validate() const {
    if (!(alpha1 > 0.0f) || !(alpha2 > 0.0f)) {
      throw std::invalid_argument("quantizer step sizes must be positive");
    }
  }
};

/// Codec-packed ternary vector, 2 bits per element.
///
/// When `nonneg_offset` is set the lanes store (a - 1) for activation levels
/// a in {0, 1, 2}; the +1 offset is reapplied downstream through the
/// precomputed weight sum (ternary_dot_nonneg). It is a storage flag, never
/// a fourth lane state.
struct PackedTernaryVector {
  std::vector<std::uint64_t> words;
  std::size_t logical_len = 0;
  bool nonneg_offset = false;

  std::size_t lane_capacity() const noexcept {
    return words.size() * static_cast<std::size_t>(kLanesPerWord);
  }
};

inline std::size_t words_for_lanes(std::size_t n) noexcept {
  return (n + kLanesPerWord - 1) / kLanesPerWord;
}

/// Pack logical ternary values. Rejects anything outside {-1,0,1}.
inline PackedTernaryVector pack(std::span<const std::int8_t> values) {
  PackedTernaryVector out;
  out.logical_len = values.size();
  out.words.assign(words_for_lanes(values.size()), kAuxi);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint64_t code = encode_lane(values[i]);
    const int shift = 2 * static_cast<int>(i % kLanesPerWord);
    std::uint64_t& w = out.words[i / kLanesPerWord];
    w = (w & ~(3ull << shift)) | (code << shift);
  }
  return out;
}

inline PackedTernaryVector pack(const std::vector<std::int8_t>& values) {
  return pack(std::span<const std::int8_t>(values));
}

/// Decode back to logical values. Accepts both zero codes.
inline std::vector<std::int8_t> unpack(const PackedTernaryVector& v) {
  std::vector<std::int8_t> out(v.logical_len);
  for (std::size_t i = 0; i < v.logical_len; ++i) {
    const unsigned code =
        static_cast<unsigned>(v.words[i / kLanesPerWord] >>
                              (2 * (i % kLanesPerWord))) &
        3u;
    out[i] = static_cast<std::int8_t>(decode_lane(code));
  }
  return out;
}

}  // namespace ternkit
