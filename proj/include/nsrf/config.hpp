#pragma once

// JSON run configuration with full defaulting.

#include <string>

#include "nsrf/training.hpp"

namespace nsrf {

struct RunConfig {
  std::string scene;
  std::string out;
  /// Optional cameras.json used as the starting cameras instead of internal noise injection.
  std::string init_cameras;
  int mesh_resolution = 256;
  TrainConfig train;
};

/// Parses a config document; missing keys keep their defaults, unknown keys are rejected.
RunConfig parse_run_config(const std::string& json_text);
/// Every field, defaults included.
std::string run_config_to_json(const RunConfig& config);

/// Training-relevant subset (no paths) as canonical JSON.
std::string train_config_to_json(const TrainConfig& config);

}  // namespace nsrf
