#pragma once

// Model checkpoints: a directory holding manifest.json and one VTNS file per
// weight tensor under tensors/.

#include <filesystem>

#include <json.hpp>

#include "ditflow/model.hpp"

namespace ditflow {

inline constexpr const char* kCheckpointFormat = "ditflow-checkpoint/1";

nlohmann::json config_to_json(const ModelConfig& cfg);
/// Throws ConfigError on missing fields or an invalid configuration.
ModelConfig config_from_json(const nlohmann::json& j);

/// Writes weights as f32. `extra` is stored under "info" in the manifest.
void save_checkpoint(const std::filesystem::path& dir, const DiTModel<float>& model,
                     const nlohmann::json& extra = nlohmann::json::object());

/// Throws FormatError when the manifest or a tensor file is missing or
/// malformed, ShapeError when a tensor disagrees with the stored config.
DiTModel<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace ditflow
