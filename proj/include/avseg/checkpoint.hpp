#pragma once

// Binary checkpoint, all integers and doubles little-endian:
//   "AVSEGCKP" | u32 version | u64 n + n bytes config text | u64 step |
//   u64 optimizer steps | u64 count, then per parameter:
//   u32 n + name | u64 rank | u64 dims[rank] | f64 values | f64 m | f64 v

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avseg/config.hpp"
#include "avseg/model.hpp"
#include "avseg/optimizer.hpp"

namespace avseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamRecord {
    std::string name;
    Shape shape;
    std::vector<double> values, m, v;
};

struct Checkpoint {
    RunConfig config;
    std::uint64_t step = 0;
    std::uint64_t optimizer_steps = 0;
    std::vector<ParamRecord> params;
};

Checkpoint capture_checkpoint(const RunConfig& cfg, std::uint64_t step, AdamW& opt);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies values (and moments, when an optimizer is given) into live tensors.
// Names, order and shapes must match exactly, else LoadError.
void restore_parameters(const Checkpoint& ckpt, const NamedTensors& params);
void restore_optimizer(const Checkpoint& ckpt, AdamW& opt);

}  // namespace avseg
