#pragma once
#include <string>
#include <vector>

#include "maskseg/tensor.hpp"

namespace maskseg {

// Little-endian binary checkpoint container.
//
//   magic   "M2FCKPT1" (8 bytes)
//   u32     version (currently 1)
//   u32     header text length, then that many UTF-8 bytes (key=value lines)
//   u32     parameter count
//   record  per parameter:
//             u32 name length, name bytes
//             u32 rank, rank x u64 extents
//             f64 row-major payload
struct CheckpointEntry {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::string header_text;
  std::vector<CheckpointEntry> entries;
};

void save_checkpoint(const std::string& path, const std::string& header_text,
                     const std::vector<CheckpointEntry>& entries);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace maskseg
