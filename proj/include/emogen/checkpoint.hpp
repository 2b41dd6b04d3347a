#pragma once

// Checkpoint layout, all integers little-endian:
//   magic "EMOGCKPT" | u32 version | u32 scalar bytes (4 or 8) | u64 vocab hash
//   | 7 x i64 config (vocab, context, layers, heads, dim, mlp, seed)
//   | u32 tensor count | per tensor: u32 name length, name, u32 rows, u32 cols,
//   rows*cols scalars in row-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>

#include "emogen/errors.hpp"
#include "emogen/model.hpp"
#include "emogen/random.hpp"

namespace emogen {

inline constexpr char kCheckpointMagic[8] = {'E', 'M', 'O', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void write_le(std::ostream& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(bytes[i], bytes[sizeof(U) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw DataError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(bytes[i], bytes[sizeof(U) - 1 - i]);
  }
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

}  // namespace detail

template <typename T>
void write_checkpoint(std::ostream& out, const ParameterSet<T>& params, std::uint64_t vocab_hash) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  const auto& c = params.config;
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::uint32_t>(out, sizeof(T));
  detail::write_le<std::uint64_t>(out, vocab_hash);
  for (std::int64_t v : {std::int64_t{c.vocab_size}, std::int64_t{c.context_length},
                         std::int64_t{c.num_layers}, std::int64_t{c.num_heads},
                         std::int64_t{c.model_dim}, std::int64_t{c.mlp_dim},
                         static_cast<std::int64_t>(c.seed)}) {
    detail::write_le<std::int64_t>(out, v);
  }
  const auto list = tensors(params);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(list.size()));
  for (const auto& t : list) {
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value->rows()));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value->cols()));
    for (Eigen::Index i = 0; i < t.value->size(); ++i) detail::write_le<T>(out, t.value->data()[i]);
  }
}

struct CheckpointHeader {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  std::uint32_t scalar_bytes = 0;
};

// Loads into scalar type T, converting if the file holds the other width.
// A vocabulary hash different from `expected_vocab_hash` is an error.
template <typename T>
ParameterSet<T> read_checkpoint(std::istream& in, std::uint64_t expected_vocab_hash,
                                CheckpointHeader* header_out = nullptr) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw DataError("not a checkpoint file");
  }
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  CheckpointHeader h;
  h.scalar_bytes = detail::read_le<std::uint32_t>(in);
  if (h.scalar_bytes != 4 && h.scalar_bytes != 8) throw DataError("checkpoint: bad scalar width");
  h.vocab_hash = detail::read_le<std::uint64_t>(in);
  if (h.vocab_hash != expected_vocab_hash) {
    throw DataError("checkpoint was trained with a different vocabulary (hash " + hex64(h.vocab_hash) +
                    ", expected " + hex64(expected_vocab_hash) + ")");
  }
  std::int64_t cfg[7];
  for (auto& v : cfg) v = detail::read_le<std::int64_t>(in);
  h.config = {static_cast<int>(cfg[0]), static_cast<int>(cfg[1]), static_cast<int>(cfg[2]),
              static_cast<int>(cfg[3]), static_cast<int>(cfg[4]), static_cast<int>(cfg[5]),
              static_cast<std::uint64_t>(cfg[6])};
  try {
    h.config.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }

  auto params = zero_params<T>(h.config);
  auto list = tensors(params);
  const auto count = detail::read_le<std::uint32_t>(in);
  if (count != list.size()) throw DataError("checkpoint: tensor count does not match config");
  for (auto& t : list) {
    const auto len = detail::read_le<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError("checkpoint truncated");
    const auto rows = detail::read_le<std::uint32_t>(in);
    const auto cols = detail::read_le<std::uint32_t>(in);
    if (name != t.name || rows != t.value->rows() || cols != t.value->cols()) {
      throw DataError("checkpoint: unexpected tensor '" + name + "'");
    }
    for (Eigen::Index i = 0; i < t.value->size(); ++i) {
      t.value->data()[i] = h.scalar_bytes == 4 ? static_cast<T>(detail::read_le<float>(in))
                                               : static_cast<T>(detail::read_le<double>(in));
    }
  }
  if (header_out) *header_out = h;
  return params;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParameterSet<T>& params, std::uint64_t vocab_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, params, vocab_hash);
  if (!out) throw RuntimeFailure("failed writing checkpoint '" + path + "'");
}

template <typename T>
ParameterSet<T> load_checkpoint(const std::string& path, std::uint64_t expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  return read_checkpoint<T>(in, expected_vocab_hash);
}

// Content hash of the serialized parameters, used to tag reports.
template <typename T>
std::string checkpoint_hash(const ParameterSet<T>& params, std::uint64_t vocab_hash) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, params, vocab_hash);
  return hex64(fnv1a64(os.str()));
}

}  // namespace emogen
