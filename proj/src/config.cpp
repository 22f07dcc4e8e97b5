#include "psumml/config.hpp"

#include <fstream>
#include <set>

#include "psumml/errors.hpp"

namespace psumml {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key \"" + key + "\" in " + where);
}

template <class T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for \"" + key + "\": " + e.what());
  }
}

ModalityStyle parse_style(const json& j, const ModalityStyle& defaults, const std::string& where) {
  reject_unknown(j, {"intensity_lut", "noise_sigma", "bias_amplitude", "contrast_gamma"}, where);
  ModalityStyle s = defaults;
  s.intensity_lut = get_or(j, "intensity_lut", defaults.intensity_lut);
  s.noise_sigma = get_or(j, "noise_sigma", defaults.noise_sigma);
  s.bias_amplitude = get_or(j, "bias_amplitude", defaults.bias_amplitude);
  s.contrast_gamma = get_or(j, "contrast_gamma", defaults.contrast_gamma);
  return s;
}

}  // namespace

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.scenario = ScenarioSpec::make(LabelSet::from({0, 1, 3}), LabelSet::from({0, 2, 4}));
  cfg.phantom = PhantomConfig{};
  cfg.style_a = default_style(0, cfg.phantom.organ_count);
  cfg.style_b = default_style(1, cfg.phantom.organ_count);
  return cfg;
}

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  reject_unknown(doc, {"version", "scenario", "data", "train", "eval", "output"}, "top level");

  RunConfig cfg = default_run_config();
  cfg.version = get_or(doc, "version", 1);
  if (cfg.version != 1)
    throw ConfigError("config: unsupported schema version " + std::to_string(cfg.version));

  if (doc.contains("scenario")) {
    const json& js = doc.at("scenario");
    reject_unknown(js, {"modality_a", "modality_b", "global"}, "scenario");
    LabelSet la = LabelSet::from(get_or<std::vector<int>>(js, "modality_a", {0, 1, 3}));
    LabelSet lb = LabelSet::from(get_or<std::vector<int>>(js, "modality_b", {0, 2, 4}));
    try {
      cfg.scenario = ScenarioSpec::make(la, lb);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: bad scenario: ") + e.what());
    }
    if (js.contains("global")) {
      const LabelSet g = LabelSet::from(js.at("global").get<std::vector<int>>());
      if (!(g == cfg.scenario.global))
        throw ConfigError("config: declared global label set is not the union of the modalities");
    }
  }

  if (doc.contains("data")) {
    const json& jd = doc.at("data");
    reject_unknown(jd,
                   {"image_size", "organ_count", "shapes_per_class", "size_range",
                    "n_per_modality", "seed", "style_a", "style_b"},
                   "data");
    cfg.phantom.image_size = get_or(jd, "image_size", cfg.phantom.image_size);
    cfg.phantom.organ_count = get_or(jd, "organ_count", cfg.phantom.organ_count);
    if (jd.contains("shapes_per_class")) {
      const auto v = jd.at("shapes_per_class").get<std::vector<int>>();
      if (v.size() != 2) throw ConfigError("config: shapes_per_class must be [min, max]");
      cfg.phantom.shapes_min = v[0];
      cfg.phantom.shapes_max = v[1];
    }
    if (jd.contains("size_range")) {
      const auto v = jd.at("size_range").get<std::vector<double>>();
      if (v.size() != 2) throw ConfigError("config: size_range must be [min, max]");
      cfg.phantom.size_min = v[0];
      cfg.phantom.size_max = v[1];
    }
    cfg.n_per_modality = get_or(jd, "n_per_modality", cfg.n_per_modality);
    cfg.data_seed = get_or(jd, "seed", cfg.data_seed);
    cfg.phantom.seed = cfg.data_seed;
    cfg.style_a = default_style(0, cfg.phantom.organ_count);
    cfg.style_b = default_style(1, cfg.phantom.organ_count);
    if (jd.contains("style_a")) cfg.style_a = parse_style(jd.at("style_a"), cfg.style_a, "data.style_a");
    if (jd.contains("style_b")) cfg.style_b = parse_style(jd.at("style_b"), cfg.style_b, "data.style_b");
    if (static_cast<int>(cfg.style_a.intensity_lut.size()) != cfg.phantom.organ_count + 1 ||
        static_cast<int>(cfg.style_b.intensity_lut.size()) != cfg.phantom.organ_count + 1)
      throw ConfigError("config: intensity_lut must have organ_count + 1 entries");
    cfg.style_b.modality_id = 1;
  }

  if (doc.contains("train")) {
    const json& jt = doc.at("train");
    reject_unknown(jt,
                   {"total_steps", "batch_size", "lr_seg", "lr_disc", "momentum", "lambda_dpca",
                    "k_snapshots", "t0_frac", "tk_frac", "tau", "seed", "eval_every",
                    "base_width", "disc_width", "disc_stride"},
                   "train");
    TrainConfig& t = cfg.train;
    t.total_steps = get_or(jt, "total_steps", t.total_steps);
    t.batch_size = get_or(jt, "batch_size", t.batch_size);
    t.lr_seg = get_or(jt, "lr_seg", t.lr_seg);
    t.lr_disc = get_or(jt, "lr_disc", t.lr_disc);
    t.momentum = get_or(jt, "momentum", t.momentum);
    t.lambda_dpca = get_or(jt, "lambda_dpca", t.lambda_dpca);
    t.k_snapshots = get_or(jt, "k_snapshots", t.k_snapshots);
    t.t0_frac = get_or(jt, "t0_frac", t.t0_frac);
    t.tk_frac = get_or(jt, "tk_frac", t.tk_frac);
    t.tau = get_or(jt, "tau", t.tau);
    t.seed = get_or(jt, "seed", t.seed);
    t.eval_every = get_or(jt, "eval_every", t.eval_every);
    t.base_width = get_or(jt, "base_width", t.base_width);
    t.disc_width = get_or(jt, "disc_width", t.disc_width);
    t.disc_stride = get_or(jt, "disc_stride", t.disc_stride);
    try {
      t.validate();
    } catch (const ConfigError&) {
      throw;
    }
  }

  if (doc.contains("eval")) {
    const json& je = doc.at("eval");
    reject_unknown(je, {"split", "spacing", "overlays"}, "eval");
    cfg.eval.split = get_or<std::string>(je, "split", cfg.eval.split);
    cfg.eval.spacing = get_or(je, "spacing", cfg.eval.spacing);
    cfg.eval.overlays = get_or(je, "overlays", cfg.eval.overlays);
    if (cfg.eval.split != "test" && cfg.eval.split != "train")
      throw ConfigError("config: eval.split must be \"train\" or \"test\"");
    if (cfg.eval.spacing <= 0.0) throw ConfigError("config: eval.spacing must be > 0");
  }

  if (doc.contains("output")) {
    const json& jo = doc.at("output");
    reject_unknown(jo, {"out_dir"}, "output");
    cfg.out_dir = get_or<std::string>(jo, "out_dir", cfg.out_dir.string());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // Recover line/column from the byte offset for a usable message.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(e.byte, text.size()); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("config: parse error in " + path.string() + " at line " +
                      std::to_string(line) + ", column " + std::to_string(col));
  }
  return parse_run_config(doc);
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["version"] = cfg.version;
  j["scenario"] = {{"modality_a", cfg.scenario.modality_a.classes()},
                   {"modality_b", cfg.scenario.modality_b.classes()}};
  j["data"] = {{"image_size", cfg.phantom.image_size},
               {"organ_count", cfg.phantom.organ_count},
               {"shapes_per_class", {cfg.phantom.shapes_min, cfg.phantom.shapes_max}},
               {"size_range", {cfg.phantom.size_min, cfg.phantom.size_max}},
               {"n_per_modality", cfg.n_per_modality},
               {"seed", cfg.data_seed}};
  j["train"] = {{"total_steps", cfg.train.total_steps},
                {"batch_size", cfg.train.batch_size},
                {"lr_seg", cfg.train.lr_seg},
                {"lr_disc", cfg.train.lr_disc},
                {"momentum", cfg.train.momentum},
                {"lambda_dpca", cfg.train.lambda_dpca},
                {"k_snapshots", cfg.train.k_snapshots},
                {"t0_frac", cfg.train.t0_frac},
                {"tk_frac", cfg.train.tk_frac},
                {"tau", cfg.train.tau},
                {"seed", cfg.train.seed},
                {"eval_every", cfg.train.eval_every}};
  j["eval"] = {{"split", cfg.eval.split},
               {"spacing", cfg.eval.spacing},
               {"overlays", cfg.eval.overlays}};
  j["output"] = {{"out_dir", cfg.out_dir.string()}};
  return j;
}

}  // namespace psumml
