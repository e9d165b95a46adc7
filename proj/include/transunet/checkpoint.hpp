// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, version 1. Byte layout:
//
//   0   8   magic "TUNETCKP"
//   8   4   format version, u32 little-endian (= 1)
//   12  4   manifest length M in bytes, u32 little-endian
//   16  M   manifest, UTF-8 text, one entry per line:
//             iteration <n>
//             fingerprint <16 hex digits>
//             config <key>: <value>            (repeated, config order)
//             tensor <name> <rank> <d0 ...> <byte offset> <element count>
//   16+M    payload: float32 little-endian values; each tensor starts at its
//           byte offset relative to the payload start, in manifest order
//
// Tensor names prefixed "opt." hold optimizer state (momentum buffers).
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "transunet/config.hpp"
#include "transunet/params.hpp"

namespace transunet {

constexpr char kCheckpointMagic[8] = {'T', 'U', 'N', 'E', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::size_t iteration = 0;
  std::string fingerprint;
  std::vector<std::pair<std::string, std::string>> config;  // key, value
  Parameters<float> weights;
  Parameters<float> optimizer;  // names without the "opt." prefix

  RunConfig run_config() const {
    RunConfig cfg;
    for (const auto& [k, v] : config) set_config_value(cfg, k, v);
    return cfg;
  }
};

namespace ckpt_detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream man;
  man << "iteration " << ck.iteration << "\n";
  man << "fingerprint " << ck.fingerprint << "\n";
  for (const auto& [k, v] : ck.config) man << "config " << k << ": " << v << "\n";
  std::string payload;
  auto emit = [&](const std::string& name, const Tensor<float>& t) {
    man << "tensor " << name << " " << t.rank();
    for (auto d : t.shape()) man << " " << d;
    man << " " << payload.size() << " " << t.size() << "\n";
    for (float f : t.data()) ckpt_detail::put_f32(payload, f);
  };
  for (const auto& [name, t] : ck.weights.map()) emit(name, t);
  for (const auto& [name, t] : ck.optimizer.map()) emit("opt." + name, t);
  const std::string manifest = man.str();
  std::string out(kCheckpointMagic, 8);
  ckpt_detail::put_u32(out, kCheckpointVersion);
  ckpt_detail::put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  out += manifest;
  out += payload;
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "<checkpoint>") {
  auto fail = [&](const std::string& msg) { return FormatError(origin + ": " + msg); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw fail("not a checkpoint (bad magic)");
  const auto version = ckpt_detail::get_u32(bytes, 8);
  if (version != kCheckpointVersion) throw fail("unsupported checkpoint version " + std::to_string(version));
  const std::size_t mlen = ckpt_detail::get_u32(bytes, 12);
  if (16 + mlen > bytes.size()) throw fail("manifest length " + std::to_string(mlen) + " exceeds file size");
  const std::size_t payload_at = 16 + mlen;
  const std::size_t payload_size = bytes.size() - payload_at;
  Checkpoint ck;
  std::istringstream man(bytes.substr(16, mlen));
  std::string line;
  std::size_t lineno = 0, expected_end = 0;
  bool have_iter = false, have_fp = false;
  while (std::getline(man, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    const std::string where = "manifest line " + std::to_string(lineno);
    if (kind == "iteration") {
      if (!(ls >> ck.iteration)) throw fail(where + ": bad iteration");
      have_iter = true;
    } else if (kind == "fingerprint") {
      if (!(ls >> ck.fingerprint)) throw fail(where + ": bad fingerprint");
      have_fp = true;
    } else if (kind == "config") {
      const auto rest = line.substr(7);
      const auto colon = rest.find(':');
      if (colon == std::string::npos) throw fail(where + ": bad config entry");
      auto value = rest.substr(colon + 1);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      ck.config.emplace_back(rest.substr(0, colon), value);
    } else if (kind == "tensor") {
      std::string name;
      std::size_t rank = 0, offset = 0, count = 0;
      if (!(ls >> name >> rank) || rank == 0 || rank > 8) throw fail(where + ": bad tensor entry");
      Shape shape(rank);
      for (auto& d : shape)
        if (!(ls >> d) || d == 0) throw fail(where + ": bad extent for tensor '" + name + "'");
      if (!(ls >> offset >> count)) throw fail(where + ": missing offset/count for tensor '" + name + "'");
      if (count != numel(shape)) throw fail(where + ": element count does not match shape of '" + name + "'");
      if (offset != expected_end)
        throw fail(where + ": tensor '" + name + "' at byte offset " + std::to_string(offset) + ", expected " +
                   std::to_string(expected_end));
      if (offset + 4 * count > payload_size)
        throw fail("payload truncated: tensor '" + name + "' needs bytes [" + std::to_string(offset) + ", " +
                   std::to_string(offset + 4 * count) + ") of " + std::to_string(payload_size));
      std::vector<float> buf(count);
      for (std::size_t i = 0; i < count; ++i)
        buf[i] = std::bit_cast<float>(ckpt_detail::get_u32(bytes, payload_at + offset + 4 * i));
      Tensor<float> t(std::move(shape), std::move(buf));
      if (name.rfind("opt.", 0) == 0) ck.optimizer.add(name.substr(4), std::move(t));
      else ck.weights.add(name, std::move(t));
      expected_end = offset + 4 * count;
    } else {
      throw fail(where + ": unknown entry '" + kind + "'");
    }
  }
  if (!have_iter || !have_fp) throw fail("manifest lacks iteration or fingerprint");
  if (expected_end != payload_size)
    throw fail("payload has " + std::to_string(payload_size - expected_end) + " trailing bytes");
  return ck;
}

// Written to a temporary file and renamed into place.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp);
    const auto bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

// Copies checkpoint weights into `target`, requiring identical names/shapes.
inline void restore_weights(Parameters<float>& target, const Parameters<float>& source) {
  for (const auto& [name, t] : target.map())
    if (!source.contains(name)) throw FormatError("checkpoint lacks parameter '" + name + "'");
  for (const auto& [name, t] : source.map()) {
    if (!target.contains(name)) throw FormatError("checkpoint has unexpected parameter '" + name + "'");
    target.set(name, t);
  }
}

}  // namespace transunet
