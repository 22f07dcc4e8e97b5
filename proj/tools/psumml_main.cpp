// psumml: phantom-data generation, training, evaluation, ablation and
// reporting for partially supervised unpaired multi-modal segmentation.
//
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training error,
// 5 evaluation error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "psumml/checkpoint.hpp"
#include "psumml/config.hpp"
#include "psumml/errors.hpp"
#include "psumml/kernels.hpp"
#include "psumml/metrics.hpp"
#include "psumml/png_io.hpp"
#include "psumml/synth_data.hpp"
#include "psumml/trainer.hpp"

namespace fs = std::filesystem;
using namespace psumml;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const GlobalArgs& g) {
  RunConfig cfg = g.config_path.empty() ? default_run_config() : load_run_config(g.config_path);
  if (g.seed) {
    cfg.data_seed = *g.seed;
    cfg.phantom.seed = *g.seed;
    cfg.train.seed = *g.seed;
  }
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  return cfg;
}

int cmd_gen_data(const GlobalArgs& g) {
  const RunConfig cfg = resolve_config(g);
  if (g.out_dir.empty()) throw ConfigError("gen-data: --out is required");
  const DatasetManifest mf = build_dataset(cfg.scenario, cfg.phantom, cfg.style_a, cfg.style_b,
                                           cfg.n_per_modality, cfg.data_seed, cfg.out_dir);
  for (const std::string& w : mf.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << (fs::path(cfg.out_dir) / "manifest.json").string() << "\n";
  return 0;
}

TrainConfig variant_config(TrainConfig cfg, const std::string& variant, int k_override) {
  if (variant == "pcl") {
    cfg.dpca_enabled = false;
    cfg.sest_enabled = false;
  } else if (variant == "dpca") {
    cfg.dpca_enabled = true;
    cfg.sest_enabled = false;
  } else if (variant == "dest") {
    cfg.dpca_enabled = true;
    cfg.sest_enabled = true;
    cfg.modulation_enabled = true;
  } else if (variant == "dest-nomod") {
    cfg.dpca_enabled = true;
    cfg.sest_enabled = true;
    cfg.modulation_enabled = false;
  } else {
    throw ConfigError("train: unknown variant \"" + variant + "\"");
  }
  if (k_override > 0) cfg.k_snapshots = k_override;
  return cfg;
}

int cmd_train(const GlobalArgs& g, const std::string& data_dir, const std::string& variant,
              int k_override, const std::string& resume) {
  RunConfig cfg = resolve_config(g);
  if (g.out_dir.empty()) throw ConfigError("train: --out is required");
  const Dataset ds = load_dataset(data_dir);
  TrainConfig tc = variant_config(cfg.train, variant, k_override);
  tc.out_dir = cfg.out_dir;
  std::optional<fs::path> resume_from;
  if (!resume.empty()) resume_from = fs::path(resume);
  const TrainResult res = train(ds, tc, resume_from);
  std::cout << res.final_checkpoint.string() << "\n";
  return 0;
}

void write_overlay(const SampleRecord& s, const Mask& pred, const ScenarioSpec& scenario,
                   const fs::path& path) {
  const int h = s.h, w = s.w;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  for (std::size_t q = 0; q < s.image.size(); ++q) {
    const auto v = static_cast<std::uint8_t>(std::min(1.0f, std::max(0.0f, s.image[q])) * 255.0f);
    rgb[q * 3 + 0] = rgb[q * 3 + 1] = rgb[q * 3 + 2] = v;
  }
  auto contour = [&](const Mask& m, int ch) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::uint8_t c = m.at(y, x);
        if (c == kBackgroundClass) continue;
        const bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1 ||
                          m.at(y - 1, x) != c || m.at(y + 1, x) != c || m.at(y, x - 1) != c ||
                          m.at(y, x + 1) != c;
        if (edge) {
          const std::size_t q = (static_cast<std::size_t>(y) * w + x) * 3;
          rgb[q + 0] = ch == 0 ? 255 : 0;
          rgb[q + 1] = ch == 1 ? 255 : 0;
          rgb[q + 2] = 0;
        }
      }
  };
  (void)scenario;
  contour(s.full_mask, 1);  // ground truth in green
  contour(pred, 0);         // prediction in red
  write_png(path, w, h, 3, rgb);
}

int cmd_eval(const GlobalArgs& g, const std::string& ckpt_path, const std::string& data_dir) {
  const RunConfig cfg = resolve_config(g);
  if (g.out_dir.empty()) throw ConfigError("eval: --out is required");
  Checkpoint ck;
  try {
    ck = load_checkpoint(ckpt_path);
  } catch (const IoError& e) {
    throw EvalError(e.what());
  }
  const Dataset ds = load_dataset(data_dir);
  if (!(ck.scenario.modality_a == ds.manifest.scenario.modality_a &&
        ck.scenario.modality_b == ds.manifest.scenario.modality_b))
    throw EvalError("eval: checkpoint scenario does not match the dataset");

  const bool use_test = cfg.eval.split == "test";
  const auto& sa = use_test ? ds.test[0] : ds.train[0];
  const auto& sb = use_test ? ds.test[1] : ds.train[1];
  const MetricsReport rep = evaluate(ck.model, sa, sb, ds.manifest.scenario, cfg.eval.spacing);

  fs::create_directories(g.out_dir);
  write_metrics_json(rep, ds.manifest.scenario, fs::path(g.out_dir) / "metrics.json");
  write_metrics_csv(rep, ds.manifest.scenario, fs::path(g.out_dir) / "metrics.csv");

  int budget = cfg.eval.overlays;
  for (int m = 0; m < 2 && budget > 0; ++m) {
    const auto& samples = (m == 0) ? sa : sb;
    const int take = std::min<int>(static_cast<int>(samples.size()), (cfg.eval.overlays + 1) / 2);
    for (int i = 0; i < take && budget > 0; ++i, --budget) {
      const Mask pred = predict_mask(ck.model, samples[i], ds.manifest.scenario);
      write_overlay(samples[i], pred, ds.manifest.scenario,
                    fs::path(g.out_dir) / ("overlay_" + samples[i].id + ".png"));
    }
  }
  std::cout << (fs::path(g.out_dir) / "metrics.json").string() << "\n";
  return 0;
}

int cmd_ablate(const GlobalArgs& g, const std::string& data_dir) {
  RunConfig cfg = resolve_config(g);
  if (g.out_dir.empty()) throw ConfigError("ablate: --out is required");
  const Dataset ds = load_dataset(data_dir);
  TrainConfig tc = cfg.train;
  tc.out_dir = cfg.out_dir;
  const std::vector<AblationRow> rows = ablation_suite(ds, tc);
  fs::create_directories(g.out_dir);
  write_ablation_csv(rows, fs::path(g.out_dir) / "ablation_table.csv");
  write_ablation_markdown(rows, fs::path(g.out_dir) / "ablation_table.md");
  int ok = 0;
  for (const auto& r : rows) ok += r.failed ? 0 : 1;
  std::cout << (fs::path(g.out_dir) / "ablation_table.csv").string() << "\n";
  return ok > 0 ? 0 : 4;
}

// Loss-curve plot rendered straight into an RGB canvas.
void plot_losses(const std::vector<nlohmann::json>& records, const fs::path& path) {
  const int w = 800, h = 400, margin = 40;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3, 255);
  auto put = [&](int x, int y, int r, int gch, int b) {
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    const std::size_t q = (static_cast<std::size_t>(y) * w + x) * 3;
    rgb[q] = static_cast<std::uint8_t>(r);
    rgb[q + 1] = static_cast<std::uint8_t>(gch);
    rgb[q + 2] = static_cast<std::uint8_t>(b);
  };
  for (int x = margin; x < w - margin; ++x) put(x, h - margin, 0, 0, 0);
  for (int y = margin; y < h - margin; ++y) put(margin, y, 0, 0, 0);

  const char* keys[4] = {"pcl", "d_a", "d_b", "sest"};
  const int colors[4][3] = {{200, 30, 30}, {30, 30, 200}, {30, 160, 200}, {30, 160, 30}};
  double vmax = 1e-9;
  for (const auto& r : records)
    for (const char* k : keys)
      if (r.contains(k)) vmax = std::max(vmax, r.at(k).get<double>());
  const int n = static_cast<int>(records.size());
  for (int ki = 0; ki < 4; ++ki) {
    int px = -1, py = -1;
    for (int i = 0; i < n; ++i) {
      if (!records[i].contains(keys[ki])) continue;
      const double v = records[i].at(keys[ki]).get<double>();
      const int x = margin + static_cast<int>((w - 2.0 * margin) * i / std::max(1, n - 1));
      const int y = h - margin - static_cast<int>((h - 2.0 * margin) * (v / vmax));
      if (px >= 0) {
        const int steps = std::max(std::abs(x - px), std::abs(y - py)) + 1;
        for (int s = 0; s <= steps; ++s)
          put(px + (x - px) * s / steps, py + (y - py) * s / steps, colors[ki][0], colors[ki][1],
              colors[ki][2]);
      }
      px = x;
      py = y;
    }
  }
  write_png(path, w, h, 3, rgb);
}

int cmd_report(const GlobalArgs& g) {
  if (g.out_dir.empty()) throw ConfigError("report: --out is required");
  const fs::path dir(g.out_dir);
  std::ofstream md(dir / "report.md", std::ios::trunc);
  if (!md) throw IoError("cannot write " + (dir / "report.md").string());
  md << "# Run report\n\n";

  const fs::path log_path = dir / "train_log.jsonl";
  if (fs::exists(log_path)) {
    std::ifstream in(log_path);
    std::vector<nlohmann::json> records;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      records.push_back(nlohmann::json::parse(line));
    }
    if (!records.empty()) {
      plot_losses(records, dir / "loss_curves.png");
      const auto& last = records.back();
      md << "## Training\n\n";
      md << "- steps: " << last.value("step", 0) << "\n";
      md << "- final total loss: " << last.value("total", 0.0) << "\n";
      if (last.contains("val_dice_a"))
        md << "- final val dice (A/B): " << last.at("val_dice_a").get<double>() << " / "
           << last.at("val_dice_b").get<double>() << "\n";
      md << "\n![loss curves](loss_curves.png)\n\n";
    }
  }

  const fs::path metrics_path = dir / "metrics.json";
  if (fs::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    nlohmann::json j = nlohmann::json::parse(in);
    md << "## Evaluation\n\n";
    md << "| modality | mean dice | mean asd |\n|---|---|---|\n";
    for (const char* m : {"modality_a", "modality_b"}) {
      if (!j.contains(m)) continue;
      md << "| " << m << " | " << j[m].value("mean_dice", 0.0) << " | ";
      if (j[m].contains("mean_asd"))
        md << j[m]["mean_asd"].get<double>();
      else
        md << "absent";
      md << " |\n";
    }
    md << "\n";
  }

  const fs::path ab_path = dir / "ablation_table.md";
  if (fs::exists(ab_path)) {
    std::ifstream in(ab_path);
    md << "## Ablation\n\n" << in.rdbuf() << "\n";
  }
  std::cout << (dir / "report.md").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* th = std::getenv("PSUMML_THREADS")) {
    const int n = std::atoi(th);
    if (n > 0) kernels::set_num_threads(n);
  }

  CLI::App app{"partially supervised unpaired multi-modal segmentation workbench"};
  app.require_subcommand(1);
  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON run configuration")->configurable(false);
  std::uint64_t seed_val = 0;
  bool seed_set = false;
  app.add_option("--seed", seed_val, "override data and training seeds")
      ->each([&](const std::string&) { seed_set = true; });
  app.add_option("--out", g.out_dir, "output directory");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
  auto* tr = app.add_subcommand("train", "train a model");
  std::string data_dir, variant = "dest", resume, ckpt_path;
  int k_override = 0;
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--variant", variant, "pcl | dpca | dest | dest-nomod");
  tr->add_option("--k", k_override, "snapshot count override");
  tr->add_option("--resume", resume, "checkpoint to resume from");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  auto* ab = app.add_subcommand("ablate", "run the ablation suite");
  ab->add_option("--data", data_dir, "dataset directory")->required();
  auto* rp = app.add_subcommand("report", "summarize artifacts in --out");

  try {
    app.parse(argc, argv);
    if (seed_set) g.seed = seed_val;
    if (gen->parsed()) return cmd_gen_data(g);
    if (tr->parsed()) return cmd_train(g, data_dir, variant, k_override, resume);
    if (ev->parsed()) return cmd_eval(g, ckpt_path, data_dir);
    if (ab->parsed()) return cmd_ablate(g, data_dir);
    if (rp->parsed()) return cmd_report(g);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const EvalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
