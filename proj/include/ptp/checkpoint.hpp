// Named-tensor checkpoints ("PTPC" for the encoder-decoder model, "PTPA" for
// the autoregressive one).
//
// Layout (little-endian): 4-byte magic, u16 version, u32-length-prefixed UTF-8
// config snapshot of key=value lines, u32 tensor count, then per tensor a
// u32-length-prefixed name, u8 rank, rank x u32 dims and float32 payload.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ptp/common.hpp"
#include "ptp/nn.hpp"

namespace ptp {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

/// Ordered key=value snapshot.
using ConfigSnapshot = std::vector<std::pair<std::string, std::string>>;

inline std::string snapshot_get(const ConfigSnapshot& snap, const std::string& key) {
  for (const auto& [k, v] : snap) {
    if (k == key) return v;
  }
  throw Error("config snapshot has no key '" + key + "'");
}

struct Checkpoint {
  std::string magic = "PTPC";
  ConfigSnapshot config;  // includes train.step
  std::vector<NamedTensor> tensors;

  std::int64_t step() const { return std::stoll(snapshot_get(config, "train.step")); }
  bool operator==(const Checkpoint&) const = default;
};

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck) {
  if (ck.magic.size() != 4) throw Error("checkpoint magic must be 4 bytes");
  ByteWriter w;
  w.put_bytes(ck.magic.data(), 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  std::string snap;
  for (const auto& [k, v] : ck.config) snap += k + "=" + v + "\n";
  w.put_string(snap);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    w.put_string(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (const auto d : t.dims) w.put<std::uint32_t>(d);
    for (const float f : t.data) w.put<float>(f);
  }
  return w.bytes();
}

inline Checkpoint parse_checkpoint(std::vector<unsigned char> bytes, const std::string& expected_magic) {
  ByteReader r(std::move(bytes));
  Checkpoint ck;
  ck.magic.resize(4);
  r.get_bytes(ck.magic.data(), 4, "checkpoint header");
  if (ck.magic != expected_magic) {
    throw ParseError("checkpoint magic '" + ck.magic + "' (expected '" + expected_magic + "')", 0);
  }
  const auto version = r.get<std::uint16_t>("checkpoint header");
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto snap = r.get_string("config snapshot");
  for (const auto& line : split(snap, '\n')) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config line without '=': " + line, 6);
    ck.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.get_string("tensor name");
    const auto rank = r.get<std::uint8_t>("tensor rank");
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      t.dims.push_back(r.get<std::uint32_t>("tensor dims"));
      n *= t.dims.back();
    }
    r.require(n * sizeof(float), "tensor payload");
    t.data.resize(n);
    for (auto& f : t.data) f = r.get<float>("tensor payload");
    ck.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw ParseError("trailing bytes after tensors", r.offset());
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file_bytes(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path, const std::string& expected_magic) {
  return parse_checkpoint(read_file_bytes(path), expected_magic);
}

template <typename T>
std::vector<NamedTensor> export_params(const ParamStore<T>& ps) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : ps.entries()) {
    out.push_back({name,
                   {static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())},
                   std::vector<float>(t.data().begin(), t.data().end())});
  }
  return out;
}

/// Copies checkpoint tensors into `ps`. With `strict`, the tensor lists must
/// match exactly (names, order, shapes); otherwise tensors are matched by
/// name and missing/extra ones are skipped. Returns the number copied.
template <typename T>
std::size_t import_params(ParamStore<T>& ps, const std::vector<NamedTensor>& tensors, bool strict = true) {
  if (strict && tensors.size() != ps.size()) {
    const std::size_t k = std::min(tensors.size(), ps.size());
    const std::string first = k < ps.size() ? ps.entries()[k].first : tensors[k].name;
    throw Error("checkpoint has " + std::to_string(tensors.size()) + " tensors, model has " +
                std::to_string(ps.size()) + "; first unmatched tensor: " + first);
  }
  std::size_t copied = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& src = tensors[i];
    if (strict && ps.entries()[i].first != src.name) {
      throw Error("tensor " + std::to_string(i) + " name mismatch: checkpoint '" + src.name + "' vs model '" +
                  ps.entries()[i].first + "'");
    }
    if (!ps.contains(src.name)) continue;
    auto dst = ps.get(src.name);
    const bool shape_ok = src.dims.size() == 2 && static_cast<int>(src.dims[0]) == dst.rows() &&
                          static_cast<int>(src.dims[1]) == dst.cols();
    if (!shape_ok) {
      if (!strict) continue;
      throw Error("tensor '" + src.name + "' shape mismatch against model config");
    }
    for (std::size_t k = 0; k < src.data.size(); ++k) dst.values()[k] = static_cast<T>(src.data[k]);
    ++copied;
  }
  return copied;
}

}  // namespace ptp
