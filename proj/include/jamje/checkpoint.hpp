#pragma once

// Binary checkpoint, little-endian:
//
//   8 bytes  magic "JAMJECKP"
//   u32      format version
//   u64      config hash
//   u64      metadata length, then that many bytes of JSON
//   u32      tensor count, then per tensor:
//              u32 name length, name bytes, u32 rank, rank x u64 dims, f64 values
//
// Tensors are stored by parameter name; optimizer buffers use "momentum/<name>".

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "jamje/io.hpp"
#include "jamje/model.hpp"

namespace jamje {

inline constexpr char kCheckpointMagic[8] = {'J', 'A', 'M', 'J', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t config_hash = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  return lo | (static_cast<std::uint64_t>(get_u32(is)) << 32);
}

inline std::string get_bytes(std::istream& is, std::uint64_t n) {
  if (n > (1ULL << 30)) throw IoError("checkpoint: implausible length");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("checkpoint: truncated");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const fs::path& p, const Checkpoint& ck) {
  const fs::path tmp = p.string() + ".tmp";
  {
    auto os = detail::open_out(tmp);
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u64(os, ck.config_hash);
    const std::string meta = ck.meta.dump();
    detail::put_u64(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
      detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) detail::put_u64(os, d);
      for (double v : t.values()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

inline Checkpoint load_checkpoint(const fs::path& p) {
  auto is = detail::open_in(p);
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw IoError("not a checkpoint: " + p.string());
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint " + p.string() + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_hash = detail::get_u64(is);
  try {
    ck.meta = nlohmann::json::parse(detail::get_bytes(is, detail::get_u64(is)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + p.string() + ": bad metadata: " + e.what());
  }
  const std::uint32_t count = detail::get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = detail::get_bytes(is, detail::get_u32(is));
    const std::uint32_t rank = detail::get_u32(is);
    if (rank == 0 || rank > 8) throw IoError("checkpoint: bad rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u64(is);
    Tensor t(shape);
    for (double& v : t.values()) v = std::bit_cast<double>(detail::get_u64(is));
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

inline void store_parameters(Checkpoint& ck, const std::vector<ParamPtr>& params, const std::string& prefix = "") {
  for (const ParamPtr& p : params) ck.tensors[prefix + p->name] = p->value;
}

/// Copies stored values into `params`. Missing names are an error.
inline void restore_parameters(const Checkpoint& ck, const std::vector<ParamPtr>& params, const std::string& prefix = "") {
  for (const ParamPtr& p : params) {
    const auto it = ck.tensors.find(prefix + p->name);
    if (it == ck.tensors.end()) throw IoError("checkpoint: missing tensor " + prefix + p->name);
    if (it->second.shape() != p->value.shape())
      throw ShapeError("checkpoint tensor " + p->name, it->second.shape(), p->value.shape());
    p->value = it->second;
  }
}

/// Parameters read by the 2D inference path.
inline std::vector<ParamPtr> inference_parameters(const FaceModel& m, bool use_jam) {
  std::vector<ParamPtr> out = m.enc2d.parameters();
  if (use_jam)
    for (const ParamPtr& p : {m.jam.query_2d, m.jam.key_2d, m.jam.value_2d, m.jam.gamma_2d}) append_unique(out, p);
  for (const ParamPtr& p : m.compression.parameters()) append_unique(out, p);
  return out;
}

}  // namespace jamje
