#pragma once

#include <filesystem>
#include <optional>

#include "aulab/model.hpp"
#include "aulab/optim.hpp"

namespace aulab {

// Checkpoint directory layout:
//   manifest.json  format_version, model config, ordered tensor table
//                  (name / shape / dtype / byte_offset), optional optimizer
//                  block with its own tensor entries
//   weights.bin    concatenated little-endian f32 in manifest order
//
// Values are stored single precision; save -> load -> save reproduces the
// exact same bytes. Loading validates the version, every shape against the
// config, and the exact byte length of weights.bin.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir,
                     const AdamState* optimizer = nullptr);

struct LoadedCheckpoint {
    ModelParams params;
    std::optional<AdamState> optimizer;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace aulab
