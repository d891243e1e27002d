#pragma once

#include "vqmoe/model.hpp"

#include <cstdint>
#include <string>

namespace vqmoe {

inline constexpr uint32_t kCheckpointVersion = 1;

// Binary image of a training state: "VQMO" magic, format version, config
// digest and canonical config text, step, mode flags, RNG state, the named
// parameter table with Adam moments, and one codebook blob per vqmoe layer.
// Written atomically; load(save(s)) evaluates bit-identically to s.
void save_checkpoint(const std::string& path, const TrainState& st);
TrainState load_checkpoint(const std::string& path);

}  // namespace vqmoe
