// "LBR1" checkpoint format: a diffable text header (magic, version, config
// hash, model architecture, step, tensor name/shape table) followed by raw
// little-endian float32 payloads in header order. Round-trips are bitwise.

#pragma once

#include <cstdint>
#include <string>

#include "lbr/model.hpp"
#include "lbr/optimizer.hpp"

namespace lbr {

inline constexpr const char* kCheckpointMagic = "LBR1";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  int version = kCheckpointVersion;
  std::string config_hash;  // "unknown" when not supplied
  ModelConfig model_config; // architecture only; seed is not persisted
  std::int64_t step = 0;
  bool has_optimizer_state = false;
};

void save_checkpoint(const std::string& path, const TransformerModel& model, std::int64_t step,
                     const std::string& config_hash = "unknown",
                     const AdamW<float>* optimizer = nullptr);

// Loads parameters into an existing model (shapes must match the registry
// exactly; extra or missing tensors are errors). When `optimizer` is given,
// its state is restored from the adam.* entries (error if absent).
CheckpointInfo load_checkpoint(const std::string& path, TransformerModel& model,
                               AdamW<float>* optimizer = nullptr);

// Header-only read (cheap hash/step/arch inspection).
CheckpointInfo peek_checkpoint(const std::string& path);

// Builds a model from the embedded architecture, then loads into it.
TransformerModel load_checkpoint_model(const std::string& path, CheckpointInfo* info = nullptr);

}  // namespace lbr
