#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "unrollcs/model.hpp"
#include "unrollcs/training.hpp"

namespace unrollcs {

struct Checkpoint {
  ModelConfig model;
  // TrainConfig::to_text() of the producing run (informational).
  std::string train_text;
  std::uint64_t seed = 0;
  TrainState state;
};

// FNV-1a 64 of ModelConfig::to_text().
std::uint64_t config_hash(const ModelConfig& config);

// Parses "key = value" lines produced by ModelConfig::to_text().
ModelConfig model_config_from_text(const std::string& text);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& what = "checkpoint");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also rejects a checkpoint whose config hash differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace unrollcs
