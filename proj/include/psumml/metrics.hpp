#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psumml/label_algebra.hpp"
#include "psumml/model.hpp"
#include "psumml/synth_data.hpp"
#include "psumml/tensor.hpp"

// Dice and average symmetric surface distance, plus per-class / per-modality
// report assembly. Conventions (the usual segmentation-toolkit ones): Dice is
// 1 when both masks are empty and 0 when exactly one is; ASD is absent when
// either surface is empty. Surfaces use 4-connectivity with the image border
// counting as outside.
namespace psumml {

double dice_score(const Mask& pred, const Mask& gt, int class_id);

// Returns the distance in `spacing` units, or nullopt with a reason
// ("empty-pred", "empty-gt", "both-empty").
std::optional<double> asd(const Mask& pred, const Mask& gt, int class_id, double spacing,
                          std::string* reason = nullptr);

struct ClassMetrics {
  int n_samples = 0;
  double dice_mean = 0.0;
  bool dice_present = false;
  double asd_mean = 0.0;
  int asd_count = 0;
  bool asd_present = false;
  std::string reason;  // set when asd absent for every sample
};

struct MetricsReport {
  // (modality, organ class) -> metrics
  std::map<std::pair<int, int>, ClassMetrics> per_class;
  double mean_dice[2] = {0.0, 0.0};
  double mean_asd[2] = {0.0, 0.0};
  bool mean_asd_present[2] = {false, false};
  int sample_count[2] = {0, 0};
  double spacing = 1.0;

  // Mean test dice over a chosen class subset (e.g. a modality's partially
  // labeled classes).
  double mean_dice_over(int modality, const std::vector<int>& classes) const;
};

// Argmax segmentation of every sample (eval mode, the sample's modality
// bank), scored against the full masks over the whole label set.
MetricsReport evaluate(SegNet<float>& model, const std::vector<SampleRecord>& samples_a,
                       const std::vector<SampleRecord>& samples_b, const ScenarioSpec& scenario,
                       double spacing = 1.0);

// Scoring core behind evaluate: predictions aligned 1:1 with the samples.
MetricsReport score_predictions(const std::vector<Mask>& preds_a,
                                const std::vector<SampleRecord>& samples_a,
                                const std::vector<Mask>& preds_b,
                                const std::vector<SampleRecord>& samples_b,
                                const ScenarioSpec& scenario, double spacing = 1.0);

// Per-pixel argmax decoded through the global channel layout.
Mask predict_mask(SegNet<float>& model, const SampleRecord& sample, const ScenarioSpec& scenario);

void write_metrics_json(const MetricsReport& report, const ScenarioSpec& scenario,
                        const std::filesystem::path& path);
void write_metrics_csv(const MetricsReport& report, const ScenarioSpec& scenario,
                       const std::filesystem::path& path);

}  // namespace psumml
