#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"

#include "psumml/label_algebra.hpp"
#include "psumml/model.hpp"
#include "psumml/selftrain.hpp"

// Checkpoint container: magic, version, a JSON directory (scenario, layouts,
// architecture, snapshot schedule, tensor names/sizes, config echo), then raw
// float32 blobs. Round-trips bit-exactly.
namespace psumml {

struct Checkpoint {
  int version = 1;
  ScenarioSpec scenario;
  SegNetConfig seg_cfg;
  int step = 0;
  SegNet<float> model;
  bool disc_exists[2] = {false, false};
  DiscriminatorConfig disc_cfg[2];
  Discriminator<float> disc[2];
  std::vector<std::vector<float>> vel_seg;
  std::vector<std::vector<float>> vel_disc[2];
  SnapshotStore<float> store;
  nlohmann::json config_echo;
};

void save_checkpoint(const std::filesystem::path& path, Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace psumml
