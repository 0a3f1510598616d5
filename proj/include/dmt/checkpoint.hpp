#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "dmt/model.hpp"
#include "dmt/objectives.hpp"

namespace dmt {

/// A checkpoint is a directory of one DMT1 file per tensor plus a
/// manifest.json recording the config, seed, episode counter, and the
/// tensor names/files.
struct Checkpoint {
    Model model;
    AdamState optim;
    long episodes_done = 0;
    std::string source_data_dir;  // as used during training, may be empty
};

void save_checkpoint(const std::filesystem::path& dir, Model& model, const AdamState& optim,
                     long episodes_done, const std::string& source_data_dir);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dmt
