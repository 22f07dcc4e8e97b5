#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psumml/checkpoint.hpp"
#include "psumml/label_algebra.hpp"
#include "psumml/losses.hpp"
#include "psumml/model.hpp"
#include "psumml/selftrain.hpp"
#include "psumml/synth_data.hpp"

// The alternating three-player optimization: each step runs one phase-D
// update (every existing discriminator, segmentation frozen) and one phase-S
// update (encoder+classifier on the marginal loss, the lambda-weighted
// adversarial term and, after the snapshot window, self-training; the
// discriminators frozen).
namespace psumml {

struct TrainConfig {
  int total_steps = 2000;
  int batch_size = 8;  // per modality
  double lr_seg = 1e-3;
  double lr_disc = 1e-3;
  double momentum = 0.9;
  double lambda_dpca = 0.01;
  int k_snapshots = 4;
  double t0_frac = 0.5;
  double tk_frac = 0.75;
  double tau = 0.5;
  std::uint64_t seed = 0;
  int eval_every = 500;
  std::filesystem::path out_dir;

  // Variant switches (Table-style ablations).
  bool dpca_enabled = true;
  bool sest_enabled = true;
  bool modulation_enabled = true;

  int base_width = 16;
  int disc_width = 32;
  int disc_stride = 2;

  void validate() const;
};

struct TrainLogRecord {
  int step = 0;
  double pcl = 0.0;
  double dpca_a = 0.0;  // encoder-side adversarial terms
  double dpca_b = 0.0;
  double d_a = 0.0;  // discriminator losses
  double d_b = 0.0;
  double sest = 0.0;
  double total = 0.0;
  bool evaluated = false;
  double val_dice_a = 0.0;
  double val_dice_b = 0.0;
  double wall_ms = 0.0;
};

struct TrainBatch {
  Tensor<float> images;    // [B,1,H,W]
  MaskBatch partial;       // global class ids
  Tensor<float> psl;       // cached ensembled soft labels, when active
  bool has_psl = false;
};

// Mutable optimization state; train_step advances it by exactly one update
// per player.
struct TrainState {
  ScenarioSpec scenario;
  TrainConfig cfg;
  SegNet<float> model;
  bool disc_exists[2] = {false, false};
  Discriminator<float> disc[2];
  SgdMomentum<float> opt_seg;
  SgdMomentum<float> opt_disc[2];
  SnapshotStore<float> store;
  kernels::Workspace<float> ws;
  int t0 = 0, tk = 0;
  std::vector<int> snap_times;

  int discriminator_count() const { return (disc_exists[0] ? 1 : 0) + (disc_exists[1] ? 1 : 0); }
};

TrainState make_train_state(const ScenarioSpec& scenario, const TrainConfig& cfg);

// Phase D: one optimizer step for every existing discriminator on its own
// loss; the segmentation network is read-only. Fills d_a / d_b of the record.
void train_phase_d(TrainState& st, const TrainBatch& batch_a, const TrainBatch& batch_b,
                   TrainLogRecord& rec);

// Phase S: one optimizer step for encoder+classifier; discriminators are
// read-only. Fills the remaining loss fields.
void train_phase_s(TrainState& st, const TrainBatch& batch_a, const TrainBatch& batch_b,
                   int step, TrainLogRecord& rec);

TrainLogRecord train_step(TrainState& st, const TrainBatch& batch_a, const TrainBatch& batch_b,
                          int step);

struct TrainResult {
  TrainState state;
  std::vector<TrainLogRecord> logs;
  std::filesystem::path final_checkpoint;
};

TrainResult train(const Dataset& dataset, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& resume_from = std::nullopt);

// Table-style ablation: PCL, +DPCA, DEST w/o modulation, DEST K in {1,2,4,8},
// all sharing one seed and data order.
struct AblationRow {
  std::string name;
  bool failed = false;
  double dice_a = 0.0;  // mean organ dice, modality A (the MRI analogue)
  double dice_b = 0.0;
};

std::vector<AblationRow> ablation_suite(const Dataset& dataset, const TrainConfig& base_cfg);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);
void write_ablation_markdown(const std::vector<AblationRow>& rows,
                             const std::filesystem::path& path);

std::string log_record_to_json(const TrainLogRecord& rec);

// Batch assembly helper shared by trainer and tests: samples indexed from a
// modality's train split.
TrainBatch make_batch(const std::vector<SampleRecord>& samples, const std::vector<int>& indices,
                      const std::vector<Tensor<float>>* psl_cache);

}  // namespace psumml
