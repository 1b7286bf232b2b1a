#pragma once

// Binary checkpoint layout, all integers and floats little-endian:
//
//   "JMCK"                       4-byte magic
//   u32 format_version           currently 1
//   u32 input_dim
//   u32 n_hidden, u32 width[n_hidden]
//   u32 time_embed_dim
//   u8  activation               0 = tanh, 1 = silu
//   u32 T
//   u8  schedule kind            0 = linear, 1 = cosine
//   f64 beta_min, f64 beta_max
//   u64 n_params, f64 params[n_params]
//   u8  has_masks, then per hidden layer: u8 mask[width]

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "jacmatch/diffusion.hpp"
#include "jacmatch/scorenet.hpp"

namespace jacmatch {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 100;
  double beta_min = 1e-3;
  double beta_max = 0.2;

  NoiseSchedule make() const { return make_schedule(kind, T, beta_min, beta_max); }
  bool operator==(const ScheduleConfig&) const = default;
};

struct Checkpoint {
  ScoreNetwork net;
  ScheduleConfig schedule;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ck.net.validate();
  const auto& a = ck.net.arch;
  detail::ByteWriter w;
  w.raw("JMCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(a.input_dim));
  w.u32(static_cast<std::uint32_t>(a.hidden_widths.size()));
  for (auto width : a.hidden_widths) w.u32(static_cast<std::uint32_t>(width));
  w.u32(static_cast<std::uint32_t>(a.time_embed_dim));
  w.u8(a.activation == Activation::tanh ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(ck.schedule.T));
  w.u8(ck.schedule.kind == ScheduleKind::linear ? 0 : 1);
  w.f64(ck.schedule.beta_min);
  w.f64(ck.schedule.beta_max);
  w.u64(ck.net.params.size());
  for (double v : ck.net.params.values()) w.f64(v);
  w.u8(ck.net.has_masks() ? 1 : 0);
  for (const auto& m : ck.net.masks)
    for (auto bit : m) w.u8(bit ? 1 : 0);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(4) != "JMCK") throw Error("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto& a = ck.net.arch;
  a.input_dim = r.u32();
  a.hidden_widths.resize(r.u32());
  for (auto& width : a.hidden_widths) width = r.u32();
  a.time_embed_dim = r.u32();
  const auto act = r.u8();
  if (act > 1) throw Error("bad activation code in checkpoint");
  a.activation = act == 0 ? Activation::tanh : Activation::silu;
  ck.schedule.T = static_cast<int>(r.u32());
  const auto kind = r.u8();
  if (kind > 1) throw Error("bad schedule code in checkpoint");
  ck.schedule.kind = kind == 0 ? ScheduleKind::linear : ScheduleKind::cosine;
  ck.schedule.beta_min = r.f64();
  ck.schedule.beta_max = r.f64();
  const auto n = r.u64();
  if (n != param_count(a)) throw Error("checkpoint parameter count does not match its architecture");
  ck.net.params = Tensor(Shape{static_cast<std::size_t>(n)});
  for (double& v : ck.net.params.values()) v = r.f64();
  if (r.u8()) {
    for (auto width : a.hidden_widths) {
      std::vector<std::uint8_t> m(width);
      for (auto& bit : m) bit = r.u8();
      ck.net.masks.push_back(std::move(m));
    }
  }
  if (!r.done()) throw Error("trailing bytes after checkpoint");
  ck.net.validate();
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace jacmatch
