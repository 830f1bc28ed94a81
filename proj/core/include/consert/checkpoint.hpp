#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "consert/data.hpp"
#include "consert/encoder.hpp"

namespace consert {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Encoder weights plus the vocabulary needed to tokenize its inputs.
struct Checkpoint {
  EncoderParams params;
  Vocab vocab;
};

/// Layout (all integers u32 little-endian, floats IEEE-754 binary32 LE):
///   "CSRT" | version | config block | vocab block | parameter blocks | CRC32
/// config block:    field count (7), vocab_size, max_len, d_model, n_layers,
///                  n_heads, d_ff, pooling (0 = last layer, 1 = last two)
/// vocab block:     token count, then (byte length, UTF-8 bytes) per token
/// parameter block: block count, then per block (name length, name, rank,
///                  dims..., values)
/// The CRC32 covers every preceding byte.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace consert
