#ifndef CHAMTOY_CHECKPOINT_HPP_
#define CHAMTOY_CHECKPOINT_HPP_

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "chamtoy/kv_config.hpp"
#include "chamtoy/model.hpp"

namespace chamtoy {

inline constexpr int kCheckpointVersion = 1;

// A checkpoint directory holds three files:
//   manifest    - header line, then `name shape dtype offset length` per tensor
//   weights.bin - the tensors' little-endian buffers, concatenated
//   config      - flat key=value: model config, step, and trainer metadata
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::uint64_t step = 0;
  KvMap extra;  // trainer state; keys must not start with "model." or "checkpoint."

  const Tensor* find(std::string_view name) const;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Model parameters only (no optimizer state), step 0.
Checkpoint checkpoint_from_model(const Transformer& model);
// Copies parameter values out of the checkpoint into a fresh model.
Transformer model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace chamtoy

#endif  // CHAMTOY_CHECKPOINT_HPP_
