#pragma once

// Packed convolution and fully-connected layers: im2col with fused
// quantize+pack, integer gemm over codec words, batch-norm folding.
//
// Layout: tensors are NCHW. Inside an im2col row the receptive field is
// ordered kernel-position-major with the input channel varying fastest:
// lane((ky, kx), c) = (ky * kw + kx) * in_c + c. Weight rows are packed in
// the same order, one packed vector per output channel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "ternkit/bitkernels.hpp"
#include "ternkit/codec.hpp"
#include "ternkit/quantizer.hpp"

namespace ternkit {

struct TensorShape {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
};

struct ConvGeometry {
  int in_c = 0, out_c = 0;
  int kh = 3, kw = 3;
  int stride = 1, pad = 1;

  int patch_len() const noexcept { return in_c * kh * kw; }

  void validate(const TensorShape& x) const {
    if (in_c <= 0 || out_c <= 0 || kh <= 0 || kw <= 0 || stride <= 0 ||
        pad < 0) {
      throw std::invalid_argument("conv geometry: nonpositive dimension");
    }
    if (x.c != in_c) {
      throw std::invalid_argument("conv geometry: channel count mismatch");
    }
    if (x.h + 2 * pad < kh || x.w + 2 * pad < kw) {
      throw std::invalid_argument("conv geometry: kernel exceeds padded input");
    }
  }

  int out_h(int h) const noexcept { return (h + 2 * pad - kh) / stride + 1; }
  int out_w(int w) const noexcept { return (w + 2 * pad - kw) / stride + 1; }
};

/// Per-channel affine y = gain * x + bias, e.g. folded batch norm.
struct ChannelAffine {
  std::vector<float> gain;
  std::vector<float> bias;

  static ChannelAffine identity(int channels) {
    return {std::vector<float>(channels, 1.0f),
            std::vector<float>(channels, 0.0f)};
  }
};

/// Fold batch-norm statistics into a per-channel affine so that
/// affine(conv(x)) == bn(conv(x)) exactly in the float reference.
inline ChannelAffine fuse_bn(std::span<const float> mean,
                             std::span<const float> var,
                             std::span<const float> gamma,
                             std::span<const float> beta, float eps) {
  const std::size_t c = mean.size();
  if (var.size() != c || gamma.size() != c || beta.size() != c) {
    throw std::invalid_argument("fuse_bn: per-channel stat size mismatch");
  }
  ChannelAffine out;
  out.gain.resize(c);
  out.bias.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    const float denom = var[i] + eps;
    if (!(denom > 0.0f)) {
      throw std::invalid_argument("fuse_bn: var + eps must be positive");
    }
    const float inv_std = 1.0f / std::sqrt(denom);
    out.gain[i] = gamma[i] * inv_std;
    out.bias[i] = beta[i] - mean[i] * gamma[i] * inv_std;
  }
  return out;
}

/// Packed weights plus everything needed to run the layer: quantizer state,
/// the single real output scale, and the folded batch-norm affine.
struct PackedConvLayer {
  ConvGeometry geom;
  std::vector<PackedTernaryVector> weights;  // one per output channel
  std::vector<std::int32_t> weight_sums;     // sum of decoded weights per row
  std::vector<std::vector<std::uint64_t>> weight_mask_seeds;  // optional
  QuantThresholds thr_w, thr_a;
  float out_scale = 1.0f;
  ChannelAffine fused;
  bool activation_nonneg = true;

  bool masks_ready() const noexcept {
    return weight_mask_seeds.size() == weights.size();
  }

  void precompute_masks() {
    weight_mask_seeds.clear();
    weight_mask_seeds.reserve(weights.size());
    for (const auto& w : weights) weight_mask_seeds.push_back(make_zero_seeds(w));
  }
};

/// Build a layer from already-ternary weights, one row of length
/// in_c*kh*kw per output channel.
inline PackedConvLayer make_packed_conv_layer(
    std::span<const std::int8_t> ternary_weights, const ConvGeometry& geom,
    QuantThresholds thr_w, QuantThresholds thr_a, bool activation_nonneg,
    ChannelAffine fused = {}, float out_scale = 1.0f) {
  const std::size_t k = static_cast<std::size_t>(geom.patch_len());
  if (ternary_weights.size() != k * geom.out_c) {
    throw std::invalid_argument("make_packed_conv_layer: weight size mismatch");
  }
  PackedConvLayer layer;
  layer.geom = geom;
  layer.thr_w = thr_w;
  layer.thr_a = thr_a;
  layer.out_scale = out_scale;
  layer.activation_nonneg = activation_nonneg;
  layer.fused = fused.gain.empty() ? ChannelAffine::identity(geom.out_c)
                                   : std::move(fused);
  layer.weights.reserve(geom.out_c);
  layer.weight_sums.reserve(geom.out_c);
  for (int o = 0; o < geom.out_c; ++o) {
    std::span<const std::int8_t> row = ternary_weights.subspan(o * k, k);
    layer.weights.push_back(pack(row));
    std::int32_t s = 0;
    for (std::int8_t v : row) s += v;
    layer.weight_sums.push_back(s);
  }
  return layer;
}

/// Quantize float weights with the layer's weight thresholds, then pack.
inline PackedConvLayer make_packed_conv_layer_from_float(
    std::span<const float> weights, const ConvGeometry& geom,
    QuantThresholds thr_w, QuantThresholds thr_a, bool activation_nonneg,
    ChannelAffine fused = {}, float out_scale = 1.0f) {
  std::vector<std::int8_t> q = quantize_weight(weights, thr_w);
  return make_packed_conv_layer(q, geom, thr_w, thr_a, activation_nonneg,
                                std::move(fused), out_scale);
}

/// Packed patch matrix: row r is the quantized receptive field of output
/// position r, stored as contiguous codec words.
struct Im2colBuffer {
  std::vector<std::uint64_t> words;
  std::size_t words_per_row = 0;
  std::size_t row_count = 0;
  std::size_t row_len = 0;  // logical lanes per row
  bool nonneg_offset = false;
  int batch = 0, out_h = 0, out_w = 0;

  std::span<const std::uint64_t> row(std::size_t r) const {
    return {words.data() + r * words_per_row, words_per_row};
  }
};

/// Expand, quantize and pack in one pass. Zero padding enters the quantizer
/// as the real value 0 (level 0 in both modes).
inline Im2colBuffer im2col_quantize_pack(std::span<const float> x,
                                         const TensorShape& shape,
                                         const QuantThresholds& t,
                                         const ConvGeometry& geom,
                                         QuantMode mode) {
  geom.validate(shape);
  t.validate();
  if (x.size() != shape.count()) {
    throw std::invalid_argument("im2col: input size does not match shape");
  }
  const int oh = geom.out_h(shape.h), ow = geom.out_w(shape.w);
  const std::size_t k = static_cast<std::size_t>(geom.patch_len());

  Im2colBuffer buf;
  buf.batch = shape.n;
  buf.out_h = oh;
  buf.out_w = ow;
  buf.row_len = k;
  buf.words_per_row = words_for_lanes(k);
  buf.row_count = static_cast<std::size_t>(shape.n) * oh * ow;
  buf.nonneg_offset = (mode == QuantMode::kActivationNonneg);
  buf.words.resize(buf.row_count * buf.words_per_row);

  std::vector<float> patch(k);
  std::size_t r = 0;
  for (int n = 0; n < shape.n; ++n) {
    const float* img = x.data() + static_cast<std::size_t>(n) * shape.c *
                                      shape.h * shape.w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++r) {
        const int y0 = oy * geom.stride - geom.pad;
        const int x0 = ox * geom.stride - geom.pad;
        for (int ky = 0; ky < geom.kh; ++ky) {
          for (int kx = 0; kx < geom.kw; ++kx) {
            const int iy = y0 + ky, ix = x0 + kx;
            const bool in = iy >= 0 && iy < shape.h && ix >= 0 && ix < shape.w;
            float* dst = patch.data() + (ky * geom.kw + kx) * geom.in_c;
            for (int c = 0; c < geom.in_c; ++c) {
              dst[c] = in ? img[(static_cast<std::size_t>(c) * shape.h + iy) *
                                    shape.w +
                                ix]
                          : 0.0f;
            }
          }
        }
        PackedTernaryVector packed = quantize_and_pack(patch, t, mode);
        std::copy(packed.words.begin(), packed.words.end(),
                  buf.words.begin() + r * buf.words_per_row);
      }
    }
  }
  return buf;
}

enum class MaskMode { kOnTheFly, kPrecomputed };

/// Integer gemm: entry (r, o) is the ternary inner product of im2col row r
/// with weight row o, offset-corrected when the activations carry the
/// nonneg offset. Output is row-major [row][out_c].
inline std::vector<std::int32_t> packed_gemm(
    const Im2colBuffer& a, const PackedConvLayer& layer,
    MaskMode mask_mode = MaskMode::kOnTheFly, int workers = 1) {
  const int oc = layer.geom.out_c;
  if (static_cast<int>(layer.weights.size()) != oc) {
    throw std::invalid_argument("packed_gemm: layer weight rows != out_c");
  }
  if (a.row_len != static_cast<std::size_t>(layer.geom.patch_len())) {
    throw std::invalid_argument("packed_gemm: inner dimension mismatch");
  }
  if (mask_mode == MaskMode::kPrecomputed && !layer.masks_ready()) {
    throw std::invalid_argument("packed_gemm: masks not precomputed");
  }
  const bool offset = a.nonneg_offset;
  if (offset && !layer.activation_nonneg) {
    throw std::invalid_argument(
        "packed_gemm: offset activations fed to a symmetric layer");
  }
  const std::size_t wpr = a.words_per_row;
  std::vector<std::int32_t> out(a.row_count * oc);

  auto run_range = [&](std::size_t r_begin, std::size_t r_end) {
    constexpr std::size_t kTile = 48;
    for (std::size_t r0 = r_begin; r0 < r_end; r0 += kTile) {
      const std::size_t r1 = std::min(r_end, r0 + kTile);
      for (int o = 0; o < oc; ++o) {
        const std::uint64_t* wrow = layer.weights[o].words.data();
        const std::int64_t base = offset ? layer.weight_sums[o] : 0;
        if (mask_mode == MaskMode::kPrecomputed) {
          const std::uint64_t* seeds = layer.weight_mask_seeds[o].data();
          for (std::size_t r = r0; r < r1; ++r) {
            out[r * oc + o] = static_cast<std::int32_t>(
                base + detail::ternary_dot_words_premask(
                           a.words.data() + r * wpr, wrow, seeds, wpr));
          }
        } else {
          for (std::size_t r = r0; r < r1; ++r) {
            out[r * oc + o] = static_cast<std::int32_t>(
                base + detail::ternary_dot_words(a.words.data() + r * wpr,
                                                 wrow, wpr));
          }
        }
      }
    }
  };

  if (workers <= 1 || a.row_count < 2) {
    run_range(0, a.row_count);
  } else {
    const int nw = std::min<std::size_t>(workers, a.row_count);
    std::vector<std::thread> pool;
    pool.reserve(nw);
    const std::size_t chunk = (a.row_count + nw - 1) / nw;
    for (int t = 0; t < nw; ++t) {
      const std::size_t b = t * chunk;
      const std::size_t e = std::min(a.row_count, b + chunk);
      if (b < e) pool.emplace_back(run_range, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

struct ConvResult {
  std::vector<float> data;
  TensorShape shape;
};

/// Full packed convolution: im2col + gemm + out_scale + folded affine.
inline ConvResult conv2d_ternary(std::span<const float> x,
                                 const TensorShape& shape,
                                 const PackedConvLayer& layer,
                                 MaskMode mask_mode = MaskMode::kOnTheFly,
                                 int workers = 1) {
  const QuantMode mode = layer.activation_nonneg ? QuantMode::kActivationNonneg
                                                 : QuantMode::kWeight;
  Im2colBuffer buf =
      im2col_quantize_pack(x, shape, layer.thr_a, layer.geom, mode);
  std::vector<std::int32_t> acc = packed_gemm(buf, layer, mask_mode, workers);

  ConvResult out;
  out.shape = {shape.n, layer.geom.out_c, buf.out_h, buf.out_w};
  out.data.resize(out.shape.count());
  const int oc = layer.geom.out_c;
  const std::size_t plane = static_cast<std::size_t>(buf.out_h) * buf.out_w;
  for (int n = 0; n < shape.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t r = static_cast<std::size_t>(n) * plane + p;
      for (int o = 0; o < oc; ++o) {
        out.data[(static_cast<std::size_t>(n) * oc + o) * plane + p] =
            layer.fused.gain[o] * (layer.out_scale * acc[r * oc + o]) +
            layer.fused.bias[o];
      }
    }
  }
  return out;
}

/// Fully-connected layer: convolution with the kernel covering the whole
/// feature map. `x` holds `batch` rows of length in_c.
inline std::vector<float> fully_connected_ternary(std::span<const float> x,
                                                  int batch,
                                                  const PackedConvLayer& layer,
                                                  MaskMode mask_mode =
                                                      MaskMode::kOnTheFly) {
  if (layer.geom.kh != 1 || layer.geom.kw != 1 || layer.geom.pad != 0) {
    throw std::invalid_argument("fully_connected_ternary: expects 1x1 geometry");
  }
  const TensorShape shape{batch, layer.geom.in_c, 1, 1};
  ConvResult r = conv2d_ternary(x, shape, layer, mask_mode);
  return std::move(r.data);
}

}  // namespace ternkit
