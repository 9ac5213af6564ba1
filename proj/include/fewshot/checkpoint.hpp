#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewshot/nn.hpp"

namespace fewshot::checkpoint {

/// What the container holds; a reader can insist on one kind.
enum class Kind : std::uint32_t {
  objectness = 1,
  extractor = 2,
  comparison = 3,
};

std::string to_string(Kind k);

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

/// Versioned binary container: preset name, parameter tensors, epoch
/// counter, RNG state and a free-form JSON metadata block.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  Kind kind = Kind::objectness;
  std::string preset;
  int epoch = 0;
  std::string rng_state;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  /// FNV-1a over the tensor names, shapes and value bytes only.
  std::uint64_t parameter_digest() const;
};

/// Atomic write (temporary file + rename).
void write(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws IoError on a missing/corrupt file and ConfigError on a kind mismatch.
Checkpoint read(const std::filesystem::path& path, std::optional<Kind> expected = std::nullopt);

Checkpoint capture(Kind kind, const std::string& preset, const nn::ParamRefs<float>& params);
/// Copies values into params; names and shapes must match one to one.
void restore(const Checkpoint& ckpt, const nn::ParamRefs<float>& params);

std::string digest_hex(std::uint64_t digest);

}  // namespace fewshot::checkpoint
