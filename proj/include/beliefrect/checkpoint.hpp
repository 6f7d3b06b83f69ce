#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "beliefrect/transformer.hpp"

namespace beliefrect {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (little-endian):
///   "BRCKPT\0\0"  u32 version
///   str vocab_hash   str architecture_json
///   u32 n_words, n_words x str
///   u64 n_params, n_params x f64
/// where str = u32 length + bytes.
void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path);

/// Fails with CheckpointMismatch if the stored vocabulary does not hash to
/// the recorded value, or differs from `expected_vocab_hash` when given.
TransformerLM load_checkpoint(const std::filesystem::path& path,
                              const std::optional<std::string>& expected_vocab_hash = std::nullopt);

}  // namespace beliefrect
