#pragma once

// Binary checkpoint, all integers little-endian:
//
//   "DEPN"  u32 version=1  u64 fingerprint  u32 tensor_count
//   tensor_count x { u16 name_len, name, u8 rank, u32 dims[rank], f32 data[] }
//   u32 velocity_count, velocity_count x (same record layout, parameter order)
//   u32 epoch  u64 rng_state[4]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "network.hpp"

namespace epinet {

inline constexpr std::array<char, 4> kCheckpointMagic = {'D', 'E', 'P', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct CheckpointData {
  std::uint64_t fingerprint = 0;
  std::vector<StoredTensor> params;
  std::vector<StoredTensor> velocities;
  std::uint32_t epoch = 0;
  Rng::State rng{};
  friend bool operator==(const CheckpointData&, const CheckpointData&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const StoredTensor& t) {
  if (t.name.size() > 0xffff) throw CheckpointError("tensor name too long");
  w.u16(static_cast<std::uint16_t>(t.name.size()));
  w.raw(t.name.data(), t.name.size());
  w.u8(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) w.u32(d);
  for (float v : t.data) w.f32(v);
}

inline StoredTensor read_tensor(ByteReader& r) {
  StoredTensor t;
  t.name = r.str(r.u16());
  const std::size_t rank = r.u8();
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    t.dims.push_back(r.u32());
    count *= t.dims.back();
  }
  if (count > (std::size_t{1} << 34)) throw CheckpointError("tensor '" + t.name + "' is implausibly large");
  t.data.reserve(count);
  for (std::size_t i = 0; i < count; ++i) t.data.push_back(r.f32());
  return t;
}

template <class T>
StoredTensor store(const std::string& name, const std::vector<std::size_t>& dims, const Tensor<T>& t) {
  StoredTensor s;
  s.name = name;
  for (auto d : dims) s.dims.push_back(static_cast<std::uint32_t>(d));
  s.data.reserve(t.size());
  for (auto v : t.values()) s.data.push_back(static_cast<float>(v));
  return s;
}

template <class T>
void restore(const StoredTensor& s, const std::string& name, const std::vector<std::size_t>& dims, Tensor<T>& into) {
  if (s.name != name) throw CheckpointError("checkpoint holds '" + s.name + "' where '" + name + "' was expected");
  std::vector<std::uint32_t> want(dims.begin(), dims.end());
  if (s.dims != want || s.data.size() != into.size())
    throw CheckpointError("checkpoint tensor '" + name + "' has mismatched dimensions");
  for (std::size_t i = 0; i < s.data.size(); ++i) into[i] = static_cast<T>(s.data[i]);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& c) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic.data(), 4);
  w.u32(kCheckpointVersion);
  w.u64(c.fingerprint);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& t : c.params) detail::write_tensor(w, t);
  w.u32(static_cast<std::uint32_t>(c.velocities.size()));
  for (const auto& t : c.velocities) detail::write_tensor(w, t);
  w.u32(c.epoch);
  for (auto s : c.rng) w.u64(s);
  return w.take();
}

inline CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const std::string magic = r.str(4);
  if (magic != std::string(kCheckpointMagic.data(), 4)) throw CheckpointError("not a checkpoint: bad magic bytes");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData c;
  c.fingerprint = r.u64();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) c.params.push_back(detail::read_tensor(r));
  const auto nv = r.u32();
  for (std::uint32_t i = 0; i < nv; ++i) c.velocities.push_back(detail::read_tensor(r));
  c.epoch = r.u32();
  for (auto& s : c.rng) s = r.u64();
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

template <class T>
CheckpointData snapshot(Network<T>& net, const SgdOptimizer<T>* opt, std::uint32_t epoch) {
  CheckpointData c;
  c.fingerprint = fingerprint(net.config());
  auto ps = net.params();
  for (auto* p : ps) c.params.push_back(detail::store(p->name, p->dims(), p->value));
  if (opt) {
    if (opt->velocities().size() != ps.size()) throw StateError("optimizer does not belong to this network");
    for (std::size_t i = 0; i < ps.size(); ++i)
      c.velocities.push_back(detail::store(ps[i]->name, ps[i]->dims(), opt->velocities()[i]));
  }
  c.epoch = epoch;
  c.rng = net.rng().state();
  return c;
}

/// Writes parameters, velocities, epoch and RNG state into net / opt.
template <class T>
void restore(const CheckpointData& c, Network<T>& net, SgdOptimizer<T>* opt) {
  if (c.fingerprint != fingerprint(net.config()))
    throw CheckpointError("checkpoint fingerprint does not match the network configuration");
  auto ps = net.params();
  if (c.params.size() != ps.size())
    throw CheckpointError("checkpoint has " + std::to_string(c.params.size()) + " tensors, network has " +
                          std::to_string(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) detail::restore(c.params[i], ps[i]->name, ps[i]->dims(), ps[i]->value);
  if (opt) {
    if (c.velocities.size() != ps.size()) throw CheckpointError("checkpoint optimizer section does not match");
    for (std::size_t i = 0; i < ps.size(); ++i)
      detail::restore(c.velocities[i], ps[i]->name, ps[i]->dims(), opt->velocities()[i]);
  }
  net.rng().set_state(c.rng);
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write to '" + path + "' failed");
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <class T>
void save_checkpoint(const std::string& path, Network<T>& net, const SgdOptimizer<T>& opt, std::uint32_t epoch) {
  write_file(path, encode_checkpoint(snapshot(net, &opt, epoch)));
}

inline CheckpointData read_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  return decode_checkpoint(bytes);
}

struct LoadedCheckpoint {
  Network<float> net;
  SgdOptimizer<float> optimizer;
  std::uint32_t epoch;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path, const NetworkConfig& cfg, SgdConfig sgd = {}) {
  const auto data = read_checkpoint(path);
  Network<float> net(cfg);
  SgdOptimizer<float> opt(net, std::move(sgd));
  restore(data, net, data.velocities.empty() ? nullptr : &opt);
  return {std::move(net), std::move(opt), data.epoch};
}

}  // namespace epinet
