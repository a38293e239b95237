#pragma once

// Binary model and checkpoint files. Byte layouts are documented in
// docs/format.md; everything is little-endian and written field by field so
// a save/load/save round trip is byte-identical.
//
//   "FATN"  packed inference model (codec weights + folded affines)
//   "FATC"  trainer checkpoint (float master weights + quantizer/BN state)

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ternkit/tinynet.hpp"

namespace ternkit {

inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

namespace io {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f32s(const std::vector<float>& vs) {
    for (float v : vs) f32(v);
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::vector<float> f32s(std::size_t n) {
    std::vector<float> out(n);
    for (auto& v : out) v = f32();
    return out;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw ParseError("unexpected end of file", pos_);
    }
  }
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) throw std::runtime_error("read failed: " + path);
  return bytes;
}

inline void write_packed_words(Writer& w, const std::vector<std::uint64_t>& words) {
  for (std::uint64_t word : words) w.u64(word);
}

}  // namespace io

enum class LayerTag : std::uint8_t {
  kFloatFc = 0,
  kQuantizedFc = 1,
};

inline constexpr std::uint8_t kFlagNonnegOffset = 1u << 0;
inline constexpr std::uint8_t kFlagCalibration = 1u << 1;

// --------------------------------------------------------------------------
// Packed inference model ("FATN").

inline std::vector<std::uint8_t> serialize_model(const PackedModel& m) {
  io::Writer w;
  w.raw("FATN", 4);
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(m.blocks.size()) + 2);  // stem + blocks + head

  auto write_float_fc = [&](const std::vector<float>& wt,
                            const std::vector<float>& bias, int in_dim,
                            int out_dim) {
    w.u8(static_cast<std::uint8_t>(LayerTag::kFloatFc));
    w.u8(0);
    w.u32(static_cast<std::uint32_t>(in_dim));
    w.u32(static_cast<std::uint32_t>(out_dim));
    w.u32(1); w.u32(1); w.u32(1); w.u32(0);  // kh kw stride pad
    w.f32s(wt);
    w.f32s(bias);
  };

  write_float_fc(m.stem_w, m.stem_b, m.in_dim, m.hidden);

  for (const auto& pb : m.blocks) {
    const PackedConvLayer& l = pb.layer;
    w.u8(static_cast<std::uint8_t>(LayerTag::kQuantizedFc));
    std::uint8_t flags = 0;
    if (l.activation_nonneg) flags |= kFlagNonnegOffset;
    if (pb.has_calibration) flags |= kFlagCalibration;
    w.u8(flags);
    w.u32(static_cast<std::uint32_t>(l.geom.in_c));
    w.u32(static_cast<std::uint32_t>(l.geom.out_c));
    w.u32(static_cast<std::uint32_t>(l.geom.kh));
    w.u32(static_cast<std::uint32_t>(l.geom.kw));
    w.u32(static_cast<std::uint32_t>(l.geom.stride));
    w.u32(static_cast<std::uint32_t>(l.geom.pad));
    w.f32(l.thr_w.alpha1);
    w.f32(l.thr_w.alpha2);
    w.f32(l.thr_a.alpha1);
    w.f32(l.thr_a.alpha2);
    w.f32(l.out_scale);
    w.f32s(l.fused.gain);
    w.f32s(l.fused.bias);
    if (pb.has_calibration) {
      w.f32s(pb.cal_gain);
      w.f32s(pb.cal_bias);
    }
    for (std::int32_t s : l.weight_sums) w.i32(s);
    const std::size_t words_per_row = words_for_lanes(l.geom.patch_len());
    w.u64(static_cast<std::uint64_t>(l.geom.out_c) * words_per_row * 8);
    for (const auto& row : l.weights) io::write_packed_words(w, row.words);
  }

  write_float_fc(m.head_w, m.head_b, m.hidden, m.n_classes);
  return w.bytes();
}

inline void save_model(const PackedModel& m, const std::string& path) {
  io::write_file(path, serialize_model(m));
}

inline PackedModel deserialize_model(std::vector<std::uint8_t> bytes) {
  io::Reader r(std::move(bytes));
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "FATN", 4) != 0) {
    throw ParseError("bad model magic", 0);
  }
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) {
    throw ParseError("unsupported model version " + std::to_string(version) +
                         " (expected " + std::to_string(kModelVersion) + ")",
                     r.offset() - 4);
  }
  const std::uint32_t layer_count = r.u32();
  if (layer_count < 2) throw ParseError("model needs stem and head", r.offset() - 4);

  PackedModel m;
  bool have_stem = false;
  for (std::uint32_t li = 0; li < layer_count; ++li) {
    const auto tag = static_cast<LayerTag>(r.u8());
    const std::uint8_t flags = r.u8();
    const int in_c = static_cast<int>(r.u32());
    const int out_c = static_cast<int>(r.u32());
    const int kh = static_cast<int>(r.u32());
    const int kw = static_cast<int>(r.u32());
    const int stride = static_cast<int>(r.u32());
    const int pad = static_cast<int>(r.u32());
    if (in_c <= 0 || out_c <= 0) {
      throw ParseError("nonpositive layer dimension", r.offset());
    }

    if (tag == LayerTag::kFloatFc) {
      std::vector<float> wt = r.f32s(static_cast<std::size_t>(in_c) * out_c);
      std::vector<float> bias = r.f32s(static_cast<std::size_t>(out_c));
      if (!have_stem) {
        m.in_dim = in_c;
        m.hidden = out_c;
        m.stem_w = std::move(wt);
        m.stem_b = std::move(bias);
        have_stem = true;
      } else {
        m.n_classes = out_c;
        m.head_w = std::move(wt);
        m.head_b = std::move(bias);
      }
    } else if (tag == LayerTag::kQuantizedFc) {
      PackedBlock pb;
      PackedConvLayer& l = pb.layer;
      l.geom = {in_c, out_c, kh, kw, stride, pad};
      l.activation_nonneg = (flags & kFlagNonnegOffset) != 0;
      pb.has_calibration = (flags & kFlagCalibration) != 0;
      l.thr_w.alpha1 = r.f32();
      l.thr_w.alpha2 = r.f32();
      l.thr_a.alpha1 = r.f32();
      l.thr_a.alpha2 = r.f32();
      l.out_scale = r.f32();
      l.fused.gain = r.f32s(static_cast<std::size_t>(out_c));
      l.fused.bias = r.f32s(static_cast<std::size_t>(out_c));
      if (pb.has_calibration) {
        pb.cal_gain = r.f32s(static_cast<std::size_t>(in_c));
        pb.cal_bias = r.f32s(static_cast<std::size_t>(in_c));
      }
      l.weight_sums.resize(out_c);
      for (auto& s : l.weight_sums) s = r.i32();
      const std::size_t patch = static_cast<std::size_t>(l.geom.patch_len());
      const std::size_t words_per_row = words_for_lanes(patch);
      const std::uint64_t nbytes = r.u64();
      if (nbytes != static_cast<std::uint64_t>(out_c) * words_per_row * 8) {
        throw ParseError("packed weight byte count mismatch", r.offset() - 8);
      }
      l.weights.resize(out_c);
      for (auto& row : l.weights) {
        row.logical_len = patch;
        row.words.resize(words_per_row);
        for (auto& word : row.words) word = r.u64();
      }
      m.blocks.push_back(std::move(pb));
    } else {
      throw ParseError("unknown layer tag", r.offset() - 2);
    }
  }
  if (!have_stem || m.head_w.empty()) {
    throw ParseError("model missing stem or head", r.offset());
  }
  if (!r.at_end()) {
    throw ParseError("trailing bytes after last layer", r.offset());
  }
  return m;
}

inline PackedModel load_model(const std::string& path) {
  return deserialize_model(io::read_file(path));
}

// --------------------------------------------------------------------------
// Trainer checkpoint ("FATC").

inline std::vector<std::uint8_t> serialize_checkpoint(const TinyNet& net) {
  io::Writer w;
  w.raw("FATC", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(net.in_dim));
  w.u32(static_cast<std::uint32_t>(net.hidden));
  w.u32(static_cast<std::uint32_t>(net.blocks.size()));
  w.u32(static_cast<std::uint32_t>(net.n_classes));
  w.u8(net.quantized ? 1 : 0);
  w.u8(net.calibration ? 1 : 0);
  w.f32s(net.stem_w);
  w.f32s(net.stem_b);
  auto write_bn = [&](const BatchNorm& bn) {
    w.f32s(bn.gamma);
    w.f32s(bn.beta);
    w.f32s(bn.running_mean);
    w.f32s(bn.running_var);
    w.f32(bn.eps);
  };
  for (const auto& b : net.blocks) {
    w.f32s(b.w);
    w.f32(b.thr_w.alpha1);
    w.f32(b.thr_w.alpha2);
    w.f32(b.thr_a.alpha1);
    w.f32(b.thr_a.alpha2);
    write_bn(b.bn);
    write_bn(b.cal_bn);
  }
  w.f32s(net.head_w);
  w.f32s(net.head_b);
  return w.bytes();
}

inline void save_checkpoint(const TinyNet& net, const std::string& path) {
  io::write_file(path, serialize_checkpoint(net));
}

inline TinyNet deserialize_checkpoint(std::vector<std::uint8_t> bytes) {
  io::Reader r(std::move(bytes));
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "FATC", 4) != 0) {
    throw ParseError("bad checkpoint magic", 0);
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version),
                     r.offset() - 4);
  }
  TinyNet net;
  net.in_dim = static_cast<int>(r.u32());
  net.hidden = static_cast<int>(r.u32());
  const std::uint32_t n_blocks = r.u32();
  net.n_classes = static_cast<int>(r.u32());
  net.quantized = r.u8() != 0;
  net.calibration = r.u8() != 0;
  if (net.in_dim <= 0 || net.hidden <= 0 || net.n_classes <= 0) {
    throw ParseError("nonpositive checkpoint dimension", r.offset());
  }
  net.stem_w = r.f32s(static_cast<std::size_t>(net.hidden) * net.in_dim);
  net.stem_b = r.f32s(static_cast<std::size_t>(net.hidden));
  auto read_bn = [&](int f) {
    BatchNorm bn(f);
    bn.gamma = r.f32s(f);
    bn.beta = r.f32s(f);
    bn.running_mean = r.f32s(f);
    bn.running_var = r.f32s(f);
    bn.eps = r.f32();
    return bn;
  };
  net.blocks.resize(n_blocks);
  for (auto& b : net.blocks) {
    b.w = r.f32s(static_cast<std::size_t>(net.hidden) * net.hidden);
    b.thr_w.alpha1 = r.f32();
    b.thr_w.alpha2 = r.f32();
    b.thr_a.alpha1 = r.f32();
    b.thr_a.alpha2 = r.f32();
    b.bn = read_bn(net.hidden);
    b.cal_bn = read_bn(net.hidden);
  }
  net.head_w = r.f32s(static_cast<std::size_t>(net.n_classes) * net.hidden);
  net.head_b = r.f32s(static_cast<std::size_t>(net.n_classes));
  if (!r.at_end()) {
    throw ParseError("trailing bytes after checkpoint payload", r.offset());
  }
  return net;
}

inline TinyNet load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(io::read_file(path));
}

}  // namespace ternkit
