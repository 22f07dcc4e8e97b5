#include "psumml/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "psumml/errors.hpp"
#include "psumml/kernels.hpp"

namespace psumml {

namespace {

std::vector<std::pair<int, int>> surface_pixels(const Mask& mask, int class_id) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) {
      if (mask.at(y, x) != class_id) continue;
      const bool boundary = y == 0 || y == mask.h - 1 || x == 0 || x == mask.w - 1 ||
                            mask.at(y - 1, x) != class_id || mask.at(y + 1, x) != class_id ||
                            mask.at(y, x - 1) != class_id || mask.at(y, x + 1) != class_id;
      if (boundary) out.emplace_back(y, x);
    }
  }
  return out;
}

double mean_min_distance(const std::vector<std::pair<int, int>>& from,
                         const std::vector<std::pair<int, int>>& to) {
  double sum = 0.0;
#ifdef _OPENMP
#pragma omp parallel for reduction(+ : sum) schedule(static)
#endif
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(from.size()); ++i) {
    long long best = std::numeric_limits<long long>::max();
    for (const auto& [ty, tx] : to) {
      const long long dy = from[i].first - ty;
      const long long dx = from[i].second - tx;
      best = std::min(best, dy * dy + dx * dx);
    }
    sum += std::sqrt(static_cast<double>(best));
  }
  return sum / static_cast<double>(from.size());
}

}  // namespace

double dice_score(const Mask& pred, const Mask& gt, int class_id) {
  if (pred.h != gt.h || pred.w != gt.w) throw std::invalid_argument("dice_score: shape mismatch");
  long long p = 0, g = 0, inter = 0;
  for (std::size_t q = 0; q < pred.v.size(); ++q) {
    const bool ip = pred.v[q] == class_id;
    const bool ig = gt.v[q] == class_id;
    p += ip;
    g += ig;
    inter += (ip && ig);
  }
  if (p == 0 && g == 0) return 1.0;
  if (p == 0 || g == 0) return 0.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

std::optional<double> asd(const Mask& pred, const Mask& gt, int class_id, double spacing,
                          std::string* reason) {
  if (pred.h != gt.h || pred.w != gt.w) throw std::invalid_argument("asd: shape mismatch");
  if (spacing <= 0.0) throw std::invalid_argument("asd: spacing must be positive");
  const auto sp = surface_pixels(pred, class_id);
  const auto sg = surface_pixels(gt, class_id);
  if (sp.empty() || sg.empty()) {
    if (reason) {
      if (sp.empty() && sg.empty())
        *reason = "both-empty";
      else if (sp.empty())
        *reason = "empty-pred";
      else
        *reason = "empty-gt";
    }
    return std::nullopt;
  }
  const double d = 0.5 * (mean_min_distance(sp, sg) + mean_min_distance(sg, sp));
  return d * spacing;
}

Mask predict_mask(SegNet<float>& model, const SampleRecord& sample,
                  const ScenarioSpec& scenario) {
  Tensor<float> x(1, 1, sample.h, sample.w);
  std::copy(sample.image.begin(), sample.image.end(), x.data());
  kernels::Workspace<float> ws;
  typename SegNet<float>::Cache cache;
  model.forward(x, sample.modality, /*train=*/false, cache, ws, kernels::default_backend());

  const ChannelLayout layout = ChannelLayout::for_label_set(scenario.global);
  Mask out(sample.h, sample.w);
  const std::size_t plane = static_cast<std::size_t>(sample.h) * sample.w;
  for (std::size_t q = 0; q < plane; ++q) {
    int best = 0;
    float bv = cache.probs.v[q];
    for (int ch = 1; ch < cache.probs.c; ++ch) {
      const float v = cache.probs.v[static_cast<std::size_t>(ch) * plane + q];
      if (v > bv) {
        bv = v;
        best = ch;
      }
    }
    out.v[q] = static_cast<std::uint8_t>(layout.channel_to_class[best]);
  }
  return out;
}

MetricsReport evaluate(SegNet<float>& model, const std::vector<SampleRecord>& samples_a,
                       const std::vector<SampleRecord>& samples_b, const ScenarioSpec& scenario,
                       double spacing) {
  if (model.cfg.num_classes != scenario.num_classes())
    throw EvalError("evaluate: model channel count does not match the scenario label set");
  std::vector<Mask> preds_a, preds_b;
  for (const SampleRecord& s : samples_a) preds_a.push_back(predict_mask(model, s, scenario));
  for (const SampleRecord& s : samples_b) preds_b.push_back(predict_mask(model, s, scenario));
  return score_predictions(preds_a, samples_a, preds_b, samples_b, scenario, spacing);
}

MetricsReport score_predictions(const std::vector<Mask>& preds_a,
                                const std::vector<SampleRecord>& samples_a,
                                const std::vector<Mask>& preds_b,
                                const std::vector<SampleRecord>& samples_b,
                                const ScenarioSpec& scenario, double spacing) {
  if (preds_a.size() != samples_a.size() || preds_b.size() != samples_b.size())
    throw std::invalid_argument("score_predictions: prediction/sample count mismatch");
  MetricsReport rep;
  rep.spacing = spacing;
  const std::vector<int> organs = scenario.global.organs();

  for (int m = 0; m < 2; ++m) {
    const auto& samples = (m == 0) ? samples_a : samples_b;
    const auto& preds = (m == 0) ? preds_a : preds_b;
    rep.sample_count[m] = static_cast<int>(samples.size());
    std::map<int, std::map<std::string, int>> reasons;
    for (std::size_t si = 0; si < samples.size(); ++si) {
      const SampleRecord& s = samples[si];
      const Mask& pred = preds[si];
      for (int cls : organs) {
        ClassMetrics& cm = rep.per_class[{m, cls}];
        cm.n_samples += 1;
        cm.dice_mean += dice_score(pred, s.full_mask, cls);
        cm.dice_present = true;
        std::string reason;
        if (auto d = asd(pred, s.full_mask, cls, spacing, &reason)) {
          cm.asd_mean += *d;
          cm.asd_count += 1;
        } else {
          reasons[cls][reason] += 1;
        }
      }
    }
    double dice_sum = 0.0, asd_sum = 0.0;
    int dice_n = 0, asd_n = 0;
    for (int cls : organs) {
      ClassMetrics& cm = rep.per_class[{m, cls}];
      if (cm.n_samples > 0) cm.dice_mean /= cm.n_samples;
      if (cm.asd_count > 0) {
        cm.asd_mean /= cm.asd_count;
        cm.asd_present = true;
      } else {
        cm.asd_mean = 0.0;
        // Dominant reason, ties by name for determinism.
        int best = -1;
        for (const auto& [r, n] : reasons[cls])
          if (n > best) {
            best = n;
            cm.reason = r;
          }
      }
      if (cm.dice_present) {
        dice_sum += cm.dice_mean;
        dice_n += 1;
      }
      if (cm.asd_present) {
        asd_sum += cm.asd_mean;
        asd_n += 1;
      }
    }
    rep.mean_dice[m] = dice_n > 0 ? dice_sum / dice_n : 0.0;
    rep.mean_asd[m] = asd_n > 0 ? asd_sum / asd_n : 0.0;
    rep.mean_asd_present[m] = asd_n > 0;
  }
  return rep;
}

double MetricsReport::mean_dice_over(int modality, const std::vector<int>& classes) const {
  double sum = 0.0;
  int n = 0;
  for (int cls : classes) {
    const auto it = per_class.find({modality, cls});
    if (it != per_class.end() && it->second.dice_present) {
      sum += it->second.dice_mean;
      n += 1;
    }
  }
  return n > 0 ? sum / n : 0.0;
}

void write_metrics_json(const MetricsReport& report, const ScenarioSpec& scenario,
                        const std::filesystem::path& path) {
  nlohmann::json j;
  j["spacing"] = report.spacing;
  for (int m = 0; m < 2; ++m) {
    nlohmann::json jm;
    jm["samples"] = report.sample_count[m];
    jm["mean_dice"] = report.mean_dice[m];
    if (report.mean_asd_present[m]) jm["mean_asd"] = report.mean_asd[m];
    nlohmann::json classes = nlohmann::json::object();
    for (int cls : scenario.global.organs()) {
      const auto it = report.per_class.find({m, cls});
      if (it == report.per_class.end()) continue;
      nlohmann::json jc;
      jc["dice"] = it->second.dice_mean;
      if (it->second.asd_present)
        jc["asd"] = it->second.asd_mean;
      else
        jc["asd_absent_reason"] = it->second.reason;
      classes[std::to_string(cls)] = jc;
    }
    jm["classes"] = classes;
    j[m == 0 ? "modality_a" : "modality_b"] = jm;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void write_metrics_csv(const MetricsReport& report, const ScenarioSpec& scenario,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "modality,class,dice,asd,reason\n";
  char buf[128];
  for (int m = 0; m < 2; ++m) {
    for (int cls : scenario.global.organs()) {
      const auto it = report.per_class.find({m, cls});
      if (it == report.per_class.end()) continue;
      const ClassMetrics& cm = it->second;
      std::snprintf(buf, sizeof(buf), "%.6f", cm.dice_mean);
      out << (m == 0 ? "a" : "b") << "," << cls << "," << buf << ",";
      if (cm.asd_present) {
        std::snprintf(buf, sizeof(buf), "%.6f", cm.asd_mean);
        out << buf;
      }
      out << "," << cm.reason << "\n";
    }
  }
}

}  // namespace psumml
