#include "beliefrect/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "beliefrect/error.hpp"

namespace beliefrect {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::array<char, 8> kMagic{'B', 'R', 'C', 'K', 'P', 'T', '\0', '\0'};

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_str(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) fail(ErrorCode::CheckpointMismatch, "truncated checkpoint");
  return value;
}

std::string get_str(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 26)) fail(ErrorCode::CheckpointMismatch, "corrupt string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) fail(ErrorCode::CheckpointMismatch, "truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put_str(out, model.vocabulary().hash());
  nlohmann::json arch = {{"model", "transformer"}, {"config", model.config()}};
  put_str(out, arch.dump());
  const auto& words = model.vocabulary().words();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(words.size()));
  for (const auto& w : words) put_str(out, w);
  const auto params = model.parameters();
  put<std::uint64_t>(out, params.size());
  out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(params.size_bytes()));
  if (!out) fail(ErrorCode::IoError, "failed writing " + path.string());
}

TransformerLM load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) fail(ErrorCode::CheckpointMismatch, path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    fail(ErrorCode::CheckpointMismatch, "unsupported checkpoint version " + std::to_string(version));
  const std::string stored_hash = get_str(in);
  const auto arch = nlohmann::json::parse(get_str(in));
  if (arch.value("model", "") != "transformer") fail(ErrorCode::CheckpointMismatch, "unknown architecture");
  const auto n_words = get<std::uint32_t>(in);
  std::vector<std::string> words;
  words.reserve(n_words);
  for (std::uint32_t i = 0; i < n_words; ++i) words.push_back(get_str(in));
  if (words.size() < Vocabulary::kReserved) fail(ErrorCode::CheckpointMismatch, "vocabulary too small");
  Vocabulary vocab(std::span<const std::string>(words).subspan(Vocabulary::kReserved));
  if (vocab.words() != words) fail(ErrorCode::CheckpointMismatch, "vocabulary has duplicate or reserved words");
  if (vocab.hash() != stored_hash) fail(ErrorCode::CheckpointMismatch, "vocabulary hash does not match header");
  if (expected_vocab_hash && *expected_vocab_hash != stored_hash)
    fail(ErrorCode::CheckpointMismatch, "vocabulary hash " + stored_hash + " differs from expected " + *expected_vocab_hash);
  const auto n_params = get<std::uint64_t>(in);
  std::vector<double> params(n_params);
  in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(n_params * sizeof(double)));
  if (!in) fail(ErrorCode::CheckpointMismatch, "truncated parameter block");
  return TransformerLM(std::move(vocab), arch.at("config").get<TransformerConfig>(), std::move(params));
}

}  // namespace beliefrect
