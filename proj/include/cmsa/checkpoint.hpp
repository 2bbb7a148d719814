#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "cmsa/config.hpp"
#include "cmsa/network.hpp"
#include "cmsa/optim.hpp"

namespace cmsa {

// Little-endian binary layout:
//   "CMSA"  u32 format version  u64 model config digest
//   u8 layer mode  u64 completed epochs
//   u32 length + run configuration JSON
//   u32 count, then parameter records
//   u64 optimizer step  u32 count, then (first moment, second moment) record pairs
// A record is u32 name length, name, u8 trainable, u32 rank, u64 dims, f32 values.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    RunConfig config;
    LayerMode mode = LayerMode::training;
    ParamStore<float> params;
    OptimState optim;
    std::int64_t epoch = 0;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws IoError naming the offset on truncation, DataError on a bad magic,
/// version or inconsistent content, and CompatibilityError when `expected`
/// is given and its digest differs from the stored one.
Checkpoint parse_checkpoint(std::string_view bytes, const ModelConfig* expected = nullptr);

/// Writes through a temporary file renamed into place.
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace cmsa
