#pragma once
// Versioned binary checkpoint:
//   "MMCK" | u32 version | u64 header_len | header JSON (backbone spec, tensor table, meta) |
//   little-endian float32 payload in tensor-table order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "motormeta/error.hpp"
#include "motormeta/net/backbone.hpp"
#include "motormeta/net/loss.hpp"

namespace motormeta::net {

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  EmbeddingParams<float> backbone;
  std::optional<Dense<float>> head;
  nlohmann::json meta = nlohmann::json::object();

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.backbone == b.backbone && a.head == b.head && a.meta == b.meta;
  }
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw RuntimeFailure("checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  nlohmann::json header;
  header["backbone"] = {{"input_side", ck.backbone.spec.input_side},
                        {"channels", ck.backbone.spec.channels},
                        {"blocks", ck.backbone.spec.blocks}};
  std::vector<std::span<const float>> payload;
  nlohmann::json table = nlohmann::json::array();
  const auto names = ck.backbone.tensor_names();
  const auto shapes = ck.backbone.tensor_shapes();
  const auto tensors = ck.backbone.tensors();
  for (std::size_t i = 0; i < names.size(); ++i) {
    table.push_back({{"name", names[i]}, {"shape", shapes[i]}});
    payload.push_back(tensors[i]);
  }
  if (ck.head) {
    table.push_back({{"name", "head.weight"}, {"shape", ck.head->weight.shape}});
    table.push_back({{"name", "head.bias"}, {"shape", ck.head->bias.shape}});
    payload.push_back(ck.head->weight.span());
    payload.push_back(ck.head->bias.span());
  }
  header["tensors"] = table;
  header["meta"] = ck.meta;
  const std::string hjson = header.dump();

  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, hjson.size());
  out += hjson;
  for (auto t : payload)
    for (float v : t) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw ValidationError("not a checkpoint file (bad magic)");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw ValidationError("checkpoint header truncated");
  const auto header = nlohmann::json::parse(bytes.substr(pos, hlen));
  pos += hlen;

  BackboneSpec spec;
  spec.input_side = header.at("backbone").at("input_side").get<int>();
  spec.channels = header.at("backbone").at("channels").get<int>();
  spec.blocks = header.at("backbone").at("blocks").get<int>();
  Checkpoint ck;
  ck.backbone = EmbeddingParams<float>::zeros(spec);
  ck.meta = header.value("meta", nlohmann::json::object());

  const auto& table = header.at("tensors");
  const auto expected = ck.backbone.tensor_shapes();
  auto targets = ck.backbone.tensors();
  const bool has_head = table.size() == expected.size() + 2;
  if (table.size() != expected.size() && !has_head) throw ValidationError("checkpoint tensor table has unexpected length");
  if (has_head) {
    const auto ws = table[expected.size()].at("shape").get<Shape>();
    if (ws.size() != 2) throw ValidationError("checkpoint head weight must be 2-D");
    ck.head = Dense<float>::zeros(static_cast<int>(ws[0]), static_cast<int>(ws[1]));
    targets.push_back(ck.head->weight.span());
    targets.push_back(ck.head->bias.span());
  }
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto shape = table[i].at("shape").get<Shape>();
    if (shape_size(shape) != targets[i].size())
      throw ValidationError("checkpoint tensor " + table[i].at("name").get<std::string>() + " has shape " +
                            shape_string(shape) + " inconsistent with the backbone");
    for (auto& v : targets[i]) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
  }
  if (pos != bytes.size()) throw ValidationError("checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write checkpoint " + path);
  const auto bytes = serialize(ck);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw RuntimeFailure("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("checkpoint not found: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

}  // namespace motormeta::net
