#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsup/tensor.hpp"

namespace fedsup {

// Checkpoint file layout:
//   8-byte magic "FSUPCKPT", u32 version (little endian), u64 manifest length,
//   UTF-8 JSON manifest, then the concatenated raw tensor values.
// The manifest lists name/shape/dtype/offset/length per tensor; values are
// little-endian IEEE-754. Round trips are bit-exact.
inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'U', 'P', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t read_u32(std::istream& is, uint64_t offset) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError("checkpoint truncated at byte " + std::to_string(offset));
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline uint64_t read_u64(std::istream& is, uint64_t offset) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw FormatError("checkpoint truncated at byte " + std::to_string(offset));
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

// Serialization assumes a little-endian host (checked once at startup cost).
inline bool host_is_little_endian() {
  uint32_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ParamSet<T>& params) {
  if (!detail::host_is_little_endian()) throw FormatError("big-endian hosts are unsupported");
  nlohmann::json manifest;
  manifest["dtype"] = detail::dtype_name<T>();
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& p : params) {
    nlohmann::json e;
    e["name"] = p.name;
    e["shape"] = p.tensor.shape();
    e["offset"] = offset;
    e["count"] = static_cast<uint64_t>(p.tensor.size());
    tensors.push_back(e);
    offset += static_cast<uint64_t>(p.tensor.size()) * sizeof(T);
  }
  manifest["tensors"] = tensors;
  const std::string mstr = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u64(os, mstr.size());
  os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& p : params)
    os.write(reinterpret_cast<const char*>(p.tensor.data().data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(T)));
  if (!os) throw FormatError("write failure on checkpoint: " + path);
}

template <typename T>
ParamSet<T> load_checkpoint(const std::string& path) {
  if (!detail::host_is_little_endian()) throw FormatError("big-endian hosts are unsupported");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8)) throw FormatError("checkpoint truncated at byte 0");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("bad checkpoint magic at byte 0");
  const uint32_t version = detail::read_u32(is, 8);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const uint64_t mlen = detail::read_u64(is, 12);
  std::string mstr(mlen, '\0');
  if (!is.read(mstr.data(), static_cast<std::streamsize>(mlen)))
    throw FormatError("checkpoint truncated at byte 20");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.at("dtype").get<std::string>() != detail::dtype_name<T>())
    throw FormatError("checkpoint dtype " + manifest.at("dtype").get<std::string>() +
                      " does not match requested " + detail::dtype_name<T>());
  const uint64_t data_base = 20 + mlen;
  ParamSet<T> params;
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto count = e.at("count").get<uint64_t>();
    if (static_cast<int64_t>(count) != shape_numel(shape))
      throw FormatError("manifest count mismatch for tensor " + name);
    std::vector<T> values(count);
    if (!is.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(count * sizeof(T))))
      throw FormatError("checkpoint truncated at byte " +
                        std::to_string(data_base + e.at("offset").get<uint64_t>()));
    params.push_back({name, Tensor<T>(shape, std::move(values))});
  }
  return params;
}

}  // namespace fedsup
