#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "psumml/label_algebra.hpp"
#include "psumml/synth_data.hpp"
#include "psumml/trainer.hpp"

// Static run configuration: one JSON document with scenario / data / train /
// eval / output sections. Unknown keys are rejected with their path; absent
// keys fall back to the documented defaults. CLI flags override the file.
namespace psumml {

struct EvalSettings {
  std::string split = "test";
  double spacing = 1.0;
  int overlays = 8;
};

struct RunConfig {
  int version = 1;
  ScenarioSpec scenario;
  PhantomConfig phantom;
  ModalityStyle style_a;
  ModalityStyle style_b;
  int n_per_modality = 200;
  std::uint64_t data_seed = 0;
  TrainConfig train;
  EvalSettings eval;
  std::filesystem::path out_dir = "runs/default";
};

// The documented defaults: 64x64, 4 organs, scenario (1) with A labeled
// {1,3} and B labeled {2,4}.
RunConfig default_run_config();

RunConfig parse_run_config(const nlohmann::json& doc);

// Throws ConfigError with line/column on malformed JSON.
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace psumml
