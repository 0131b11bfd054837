#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retro/tensor.hpp"

namespace retro {

struct NamedArray {
  std::string name;
  tensor::Shape shape;
  std::vector<float> data;
};

/// `RCK1` file: magic, u64 config hash, u64 step, then records of
/// {u32 name length, name, u32 rank, u64 dims..., f32 data} until EOF.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::vector<NamedArray> records;

  const NamedArray* find(std::string_view name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace retro
