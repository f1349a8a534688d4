#pragma once

// Binary checkpoints: magic "MFGE", version, config hash, epoch, then named
// tensors as (name length, name bytes, rank, dims, raw little-endian f32).

#include <string>

#include "metafew/tensor.hpp"

namespace metafew {

struct Checkpoint {
  static constexpr char kMagic[5] = "MFGE";
  static constexpr uint32_t kVersion = 1;

  uint32_t version = kVersion;
  uint64_t config_hash = 0;
  int64_t epoch = 0;
  ParamSet tensors;    // model parameters, role-prefixed names
  ParamSet opt_state;  // optimizer blobs, same encoding
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace metafew
