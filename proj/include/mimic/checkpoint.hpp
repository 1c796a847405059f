#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/encoder.hpp"

namespace mimic {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

/// Checkpoint container: magic, a JSON metadata block
/// {arch_id, feature_dim, seed, stage_tag, ...}, then named f32 tensors
/// (name, shape, row-major little-endian data). Round-trips bit-exactly.
namespace ckpt {

inline constexpr char kMagic[8] = {'M', 'I', 'M', 'C', 'K', 'P', 'T', '1'};

template <class T>
inline void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
inline T read_pod(std::istream& in, const std::string& what) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw IngestionError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace ckpt

inline void save_checkpoint(const std::filesystem::path& path, EncoderState& enc,
                            const std::string& stage_tag, nlohmann::json extra_meta = {}) {
  nlohmann::json meta = std::move(extra_meta);
  meta["arch_id"] = enc.arch_id;
  meta["feature_dim"] = enc.feature_dim;
  meta["seed"] = enc.seed;
  meta["stage_tag"] = stage_tag;
  const std::string meta_str = meta.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write checkpoint " + tmp.string());
    out.write(ckpt::kMagic, sizeof(ckpt::kMagic));
    ckpt::write_pod<uint32_t>(out, uint32_t(meta_str.size()));
    out.write(meta_str.data(), std::streamsize(meta_str.size()));
    auto params = enc.state_tensors();
    ckpt::write_pod<uint32_t>(out, uint32_t(params.size()));
    for (const auto& p : params) {
      ckpt::write_pod<uint32_t>(out, uint32_t(p.name.size()));
      out.write(p.name.data(), std::streamsize(p.name.size()));
      ckpt::write_pod<uint32_t>(out, uint32_t(p.shape.size()));
      for (int64_t d : p.shape) ckpt::write_pod<uint64_t>(out, uint64_t(d));
      out.write(reinterpret_cast<const char*>(p.data), std::streamsize(sizeof(float) * p.size));
    }
    if (!out) throw IngestionError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  EncoderState enc;
  nlohmann::json meta;
  std::string stage_tag;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, ckpt::kMagic, 8) != 0)
    throw IngestionError("bad checkpoint magic in " + path.string());
  auto meta_len = ckpt::read_pod<uint32_t>(in, "metadata length");
  std::string meta_str(meta_len, '\0');
  if (!in.read(meta_str.data(), meta_len))
    throw IngestionError("checkpoint truncated in metadata: " + path.string());
  nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
  if (meta.is_discarded()) throw IngestionError("corrupt checkpoint metadata: " + path.string());

  LoadedCheckpoint out;
  out.meta = meta;
  out.stage_tag = meta.value("stage_tag", "");
  out.enc = make_encoder_shell<float>(meta.at("arch_id").get<std::string>(),
                                      meta.at("feature_dim").get<int>());
  out.enc.seed = meta.value("seed", uint64_t(0));

  auto count = ckpt::read_pod<uint32_t>(in, "tensor count");
  auto params = out.enc.state_tensors();
  if (count != params.size())
    throw IngestionError("checkpoint tensor count mismatch in " + path.string());
  for (auto& p : params) {
    auto name_len = ckpt::read_pod<uint32_t>(in, "tensor name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
      throw IngestionError("checkpoint truncated in tensor name: " + path.string());
    if (name != p.name)
      throw IngestionError("unexpected tensor '" + name + "' (want '" + p.name + "') in " +
                           path.string());
    auto ndim = ckpt::read_pod<uint32_t>(in, "tensor rank");
    int64_t total = 1;
    std::vector<int64_t> shape(ndim);
    for (auto& d : shape) {
      d = int64_t(ckpt::read_pod<uint64_t>(in, "tensor dim"));
      total *= d;
    }
    if (shape != p.shape)
      throw IngestionError("shape mismatch for tensor '" + name + "' in " + path.string());
    if (!in.read(reinterpret_cast<char*>(p.data), std::streamsize(sizeof(float) * total)))
      throw IngestionError("checkpoint truncated in tensor data: " + path.string());
  }
  return out;
}

}  // namespace mimic
