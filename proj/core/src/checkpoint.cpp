#include <bit>
#include <cmath>
#include <cstring>

#include "pforge/model.hpp"

namespace pforge::model {
namespace {

constexpr char kMagic[4] = {'M', 'C', 'F', 'K'};
constexpr std::size_t kHeaderSize = 4 + 4 + 5 * 4;

}  // namespace

Bytes encode_checkpoint(const ModelParams& params) {
  params.cfg.validate();
  Bytes out(kMagic, kMagic + 4);
  append_u32(out, kCheckpointVersion);
  for (int v : {params.cfg.alphabet, params.cfg.embed_dim, params.cfg.window, params.cfg.filters, params.cfg.hidden}) {
    append_u32(out, static_cast<std::uint32_t>(v));
  }
  out.reserve(kHeaderSize + params.parameter_count() * 4 + 4);
  for (const auto& t : params.tensors()) {
    for (double v : t.values) append_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  append_u32(out, crc32(out));
  return out;
}

ModelParams decode_checkpoint(ByteView bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(K::BadMagic, "not a checkpoint (bad magic)");
  }
  if (bytes.size() < kHeaderSize + 4) throw CheckpointError(K::Truncated, "checkpoint header truncated");
  const std::uint32_t version = load_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::BadVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.alphabet = static_cast<int>(load_u32(bytes, 8));
  cfg.embed_dim = static_cast<int>(load_u32(bytes, 12));
  cfg.window = static_cast<int>(load_u32(bytes, 16));
  cfg.filters = static_cast<int>(load_u32(bytes, 20));
  cfg.hidden = static_cast<int>(load_u32(bytes, 24));
  try {
    cfg.validate();
  } catch (const ModelError& e) {
    throw CheckpointError(K::Shape, std::string("checkpoint config invalid: ") + e.what());
  }
  ModelParams p = zeros_like(cfg);
  const std::size_t expected = kHeaderSize + p.parameter_count() * 4 + 4;
  if (bytes.size() < expected) throw CheckpointError(K::Truncated, "checkpoint truncated");
  if (bytes.size() > expected) throw CheckpointError(K::Shape, "trailing bytes after checkpoint");

  const std::uint32_t stored = load_u32(bytes, expected - 4);
  if (crc32(bytes.first(expected - 4)) != stored) throw CheckpointError(K::Crc, "checkpoint CRC mismatch");

  std::size_t off = kHeaderSize;
  for (auto& t : p.tensors()) {
    for (auto& v : t.values) {
      const float f = std::bit_cast<float>(load_u32(bytes, off));
      if (!std::isfinite(f)) throw CheckpointError(K::Shape, std::string("non-finite value in ") + t.name);
      v = static_cast<double>(f);
      off += 4;
    }
  }
  return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace pforge::model
