// Binary checkpoint format: model weights, BN statistics, optimizer moments,
// and training progress, stored as little-endian float32 payloads keyed by
// parameter name. The file embeds the SHA-256 digest of the canonical config
// text so a resumed run can prove it uses the same configuration.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dpnet/model.hpp"
#include "dpnet/optim.hpp"

namespace dpnet {

struct TrainProgress {
  std::uint64_t step = 0;   // completed optimizer steps (Adam bias timebase)
  std::uint64_t epoch = 0;  // completed epochs
  std::array<std::uint64_t, 4> rng_state{};
};

// Which stored tensors a load applies to the model.
enum class LoadScope { All, EnhanceOnly };

struct LoadReport {
  bool digest_match = false;
  bool has_optimizer = false;
  bool has_progress = false;
  TrainProgress progress;
  std::vector<std::string> skipped;  // entries present in file but not applied
};

// Serializes weights + BN buffers, plus optimizer moments and progress when
// provided. Writes atomically via a temp file.
void save_checkpoint(const std::string& path, const Model& m,
                     const AdamState* adam, const TrainProgress* progress,
                     const std::array<unsigned char, 32>& config_digest);

// Loads a checkpoint into an already-constructed model. Every tensor selected
// by `scope` must be present with the exact stored shape; violations raise
// DataError naming the parameter. With `require_digest_match`, a config
// digest mismatch raises ConfigError; otherwise the report flags it.
LoadReport load_checkpoint(const std::string& path, Model& m, AdamState* adam,
                           const std::array<unsigned char, 32>& config_digest,
                           bool require_digest_match,
                           LoadScope scope = LoadScope::All);

// Rounds parameters, BN buffers, and optimizer moments through float32 in
// place, so the in-memory state equals what a save/load cycle would produce.
void quantize_state_f32(Model& m, AdamState* adam);

}  // namespace dpnet
