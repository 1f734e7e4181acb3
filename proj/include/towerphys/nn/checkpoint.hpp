#pragma once

// Parameter checkpoints.
//
//   "TWRCKPT\0"  magic
//   u32          format version
//   u32 + bytes  metadata, UTF-8 JSON (model kind, config, training summary)
//   u32          tensor count
//   per tensor:  u32 + bytes name, u8 element size (4 or 8), u32 rank,
//                u32 x rank dims, raw little-endian elements
//   u32          CRC-32 of everything above

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "towerphys/nn/layers.hpp"

namespace towerphys::nn {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct StoredTensor {
  std::string name;
  int element_size = 4;
  std::vector<int> shape;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct Checkpoint {
  std::string metadata;  // JSON text
  std::vector<StoredTensor> tensors;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Parameters first, then buffers, in collection order.
template <class T>
Checkpoint make_checkpoint(const ParameterList<T>& params, std::string metadata);

// Names, count and shapes must match exactly. Element types may differ
// (values are converted); same-type loads are bit-exact.
template <class T>
void restore_checkpoint(const Checkpoint& checkpoint, const ParameterList<T>& params);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> file, const std::string& what);

// SHA-256 of the encoded checkpoint.
std::string checkpoint_digest(const Checkpoint& checkpoint);

}  // namespace towerphys::nn
