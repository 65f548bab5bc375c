#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "infobottle/tensor.hpp"

namespace infobottle {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, checksum, truncated, missing_tensor };
  CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Versioned container of named tensors plus a config snapshot and a step
// counter. On disk (all integers little-endian):
//
//   "IBRT" | u32 version | u64 step | u32 len + config text |
//   u32 count | count x { u32 len + name | u32 rank | rank x u64 dim | f64 data } |
//   u32 crc32 of every preceding byte
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<NamedTensor> tensors;
  std::string config;
  std::uint64_t step = 0;

  const Tensor* find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  // Throws CheckpointError(missing_tensor) listing every expected name.
  void require(const std::vector<std::string>& names) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);
std::uint32_t crc32_of_file(const std::string& path);

}  // namespace infobottle
