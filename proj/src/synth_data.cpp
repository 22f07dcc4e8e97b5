#include "psumml/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <zlib.h>

#include "json.hpp"

#include "psumml/errors.hpp"

namespace psumml {

namespace {

using nlohmann::json;

constexpr char kImgMagic[8] = {'P', 'S', 'M', 'L', 'I', 'M', 'G', '1'};
constexpr char kMskMagic[8] = {'P', 'S', 'M', 'L', 'M', 'S', 'K', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

struct Ellipse {
  double cx, cy, a, b, theta;
};

void rasterize(Mask& mask, const Ellipse& e, std::uint8_t cls) {
  const double ct = std::cos(e.theta), st = std::sin(e.theta);
  const double rmax = std::max(e.a, e.b);
  const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - rmax)));
  const int y1 = std::min(mask.h - 1, static_cast<int>(std::ceil(e.cy + rmax)));
  const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - rmax)));
  const int x1 = std::min(mask.w - 1, static_cast<int>(std::ceil(e.cx + rmax)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = (x + 0.5) - e.cx;
      const double dy = (y + 0.5) - e.cy;
      const double u = (dx * ct + dy * st) / e.a;
      const double v = (-dx * st + dy * ct) / e.b;
      if (u * u + v * v <= 1.0) mask.at(y, x) = cls;
    }
  }
}

// One organ shape. Classes carry structure that survives the modality
// change: centers live in a per-class quadrant and sizes come from a
// per-class slice of the configured range.
Ellipse draw_ellipse(const PhantomConfig& cfg, rng::Stream& rs, int cls) {
  const double w = cfg.image_size;
  const int quadrant = (cls - 1) % 4;
  const double margin = 0.08 * w;
  const double qx = (quadrant % 2 == 0) ? 0.0 : 0.5;
  const double qy = (quadrant < 2) ? 0.0 : 0.5;
  Ellipse e;
  e.cx = rs.uniform(qx * w + margin, (qx + 0.5) * w - margin);
  e.cy = rs.uniform(qy * w + margin, (qy + 0.5) * w - margin);
  const double bin = (cfg.size_max - cfg.size_min) / cfg.organ_count;
  const double lo = cfg.size_min + bin * ((cls - 1) % cfg.organ_count);
  const double size = rs.uniform(lo, lo + bin);
  e.a = 0.5 * size * w;
  e.b = e.a * rs.uniform(0.55, 1.0);
  e.theta = rs.uniform(0.0, std::numbers::pi);
  return e;
}

bool class_present(const Mask& mask, std::uint8_t cls) {
  return std::find(mask.v.begin(), mask.v.end(), cls) != mask.v.end();
}

json style_to_json(const ModalityStyle& s) {
  return json{{"modality_id", s.modality_id},
              {"intensity_lut", s.intensity_lut},
              {"noise_sigma", s.noise_sigma},
              {"bias_amplitude", s.bias_amplitude},
              {"contrast_gamma", s.contrast_gamma}};
}

ModalityStyle style_from_json(const json& j) {
  ModalityStyle s;
  s.modality_id = j.at("modality_id").get<int>();
  s.intensity_lut = j.at("intensity_lut").get<std::vector<double>>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.bias_amplitude = j.at("bias_amplitude").get<double>();
  s.contrast_gamma = j.at("contrast_gamma").get<double>();
  return s;
}

json phantom_to_json(const PhantomConfig& c) {
  return json{{"image_size", c.image_size},   {"organ_count", c.organ_count},
              {"shapes_min", c.shapes_min},   {"shapes_max", c.shapes_max},
              {"size_min", c.size_min},       {"size_max", c.size_max},
              {"seed", c.seed}};
}

PhantomConfig phantom_from_json(const json& j) {
  PhantomConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.organ_count = j.at("organ_count").get<int>();
  c.shapes_min = j.at("shapes_min").get<int>();
  c.shapes_max = j.at("shapes_max").get<int>();
  c.size_min = j.at("size_min").get<double>();
  c.size_max = j.at("size_max").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::string sample_file_img(const std::string& id) { return id + ".img"; }
std::string sample_file_msk(const std::string& id) { return id + ".msk"; }

SampleRecord make_sample(const std::string& id, int modality, const ScenarioSpec& scenario,
                         const PhantomConfig& cfg, const ModalityStyle& style,
                         std::uint64_t seed, std::vector<std::string>* warnings) {
  SampleRecord rec;
  rec.id = id;
  rec.modality = modality;
  rec.h = rec.w = cfg.image_size;
  rng::Stream ph = rng::derive(seed, "phantom", rng::hash_str(id));
  rec.full_mask = generate_phantom(cfg, ph, warnings);
  rng::Stream rd = rng::derive(seed, "render", rng::hash_str(id));
  rec.image = render_modality(rec.full_mask, style, rd);
  rec.partial_mask = partialize_mask(rec.full_mask, scenario.modality(modality), scenario.global);
  return rec;
}

}  // namespace

ModalityStyle default_style(int modality, int organ_count) {
  ModalityStyle s;
  s.modality_id = modality;
  s.intensity_lut.resize(organ_count + 1);
  if (modality == 0) {
    s.intensity_lut[0] = 0.10;
    for (int c = 1; c <= organ_count; ++c)
      s.intensity_lut[c] = 0.85 - 0.6 * (c - 1) / std::max(1, organ_count - 1);
    s.contrast_gamma = 1.0;
  } else {
    // Reversed organ ordering on a bright background.
    s.intensity_lut[0] = 0.90;
    for (int c = 1; c <= organ_count; ++c)
      s.intensity_lut[c] = 0.20 + 0.55 * (c - 1) / std::max(1, organ_count - 1);
    s.contrast_gamma = 0.9;
  }
  s.noise_sigma = 0.03;
  s.bias_amplitude = 0.1;
  return s;
}

Mask generate_phantom(const PhantomConfig& cfg, rng::Stream& rs,
                      std::vector<std::string>* warnings) {
  if (cfg.organ_count < 1) throw std::invalid_argument("generate_phantom: organ_count >= 1");
  if (!(cfg.size_min > 0.0 && cfg.size_max < 0.5 && cfg.size_min <= cfg.size_max))
    throw std::invalid_argument("generate_phantom: size range must lie in (0, 0.5)");
  if (cfg.shapes_min < 1 || cfg.shapes_max < cfg.shapes_min)
    throw std::invalid_argument("generate_phantom: bad shapes_per_class range");

  Mask mask(cfg.image_size, cfg.image_size);
  for (int cls = 1; cls <= cfg.organ_count; ++cls) {
    const int count = static_cast<int>(rs.uniform_int(cfg.shapes_min, cfg.shapes_max));
    for (int s = 0; s < count; ++s)
      rasterize(mask, draw_ellipse(cfg, rs, cls), static_cast<std::uint8_t>(cls));
  }
  // Later classes may have covered an earlier one entirely; redraw on top.
  for (int cls = 1; cls <= cfg.organ_count; ++cls) {
    int attempts = 0;
    while (!class_present(mask, static_cast<std::uint8_t>(cls)) && attempts < 100) {
      rasterize(mask, draw_ellipse(cfg, rs, cls), static_cast<std::uint8_t>(cls));
      ++attempts;
    }
    if (!class_present(mask, static_cast<std::uint8_t>(cls)) && warnings)
      warnings->push_back("organ class " + std::to_string(cls) +
                          " absent after 100 placement retries");
  }
  return mask;
}

std::vector<float> render_modality(const Mask& mask, const ModalityStyle& style,
                                   rng::Stream& rs) {
  for (std::uint8_t v : mask.v)
    if (v >= style.intensity_lut.size())
      throw std::invalid_argument("render_modality: mask class outside intensity LUT");

  // Bias field: two low-frequency sinusoids, parameters drawn first so the
  // per-pixel noise stream is stable.
  const double f1x = rs.uniform(0.5, 1.5), f1y = rs.uniform(0.5, 1.5);
  const double p1 = rs.uniform(0.0, 2.0 * std::numbers::pi);
  const double f2x = rs.uniform(0.5, 1.5), f2y = rs.uniform(0.5, 1.5);
  const double p2 = rs.uniform(0.0, 2.0 * std::numbers::pi);

  std::vector<float> img(mask.v.size());
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) {
      const double fx = static_cast<double>(x) / mask.w;
      const double fy = static_cast<double>(y) / mask.h;
      const double field =
          0.5 * (std::sin(2.0 * std::numbers::pi * (f1x * fx + f1y * fy) + p1) +
                 std::sin(2.0 * std::numbers::pi * (f2x * fx - f2y * fy) + p2));
      const double bias = 1.0 + style.bias_amplitude * field;
      double t = style.intensity_lut[mask.at(y, x)] * bias +
                 style.noise_sigma * rs.normal();
      t = std::max(t, 0.0);
      if (style.contrast_gamma != 1.0) t = std::pow(t, style.contrast_gamma);
      img[static_cast<std::size_t>(y) * mask.w + x] = static_cast<float>(std::min(t, 1.0));
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_img(const std::vector<float>& image, int w, int h) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + image.size() * 4);
  out.insert(out.end(), kImgMagic, kImgMagic + 8);
  put_u32(out, static_cast<std::uint32_t>(w));
  put_u32(out, static_cast<std::uint32_t>(h));
  for (float f : image) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  return out;
}

void decode_img(const std::vector<std::uint8_t>& bytes, std::vector<float>& image, int& w,
                int& h) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kImgMagic, 8) != 0)
    throw IoError("bad .img magic");
  w = static_cast<int>(get_u32(bytes.data() + 8));
  h = static_cast<int>(get_u32(bytes.data() + 12));
  const std::size_t count = static_cast<std::size_t>(w) * h;
  if (bytes.size() != 16 + count * 4) throw IoError("bad .img payload size");
  image.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = get_u32(bytes.data() + 16 + i * 4);
    std::memcpy(&image[i], &bits, 4);
  }
}

std::vector<std::uint8_t> encode_msk(const Mask& full, const Mask& partial) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + full.v.size() * 2);
  out.insert(out.end(), kMskMagic, kMskMagic + 8);
  put_u32(out, static_cast<std::uint32_t>(full.w));
  put_u32(out, static_cast<std::uint32_t>(full.h));
  out.insert(out.end(), full.v.begin(), full.v.end());
  out.insert(out.end(), partial.v.begin(), partial.v.end());
  return out;
}

void decode_msk(const std::vector<std::uint8_t>& bytes, Mask& full, Mask& partial) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMskMagic, 8) != 0)
    throw IoError("bad .msk magic");
  const int w = static_cast<int>(get_u32(bytes.data() + 8));
  const int h = static_cast<int>(get_u32(bytes.data() + 12));
  const std::size_t count = static_cast<std::size_t>(w) * h;
  if (bytes.size() != 16 + 2 * count) throw IoError("bad .msk payload size");
  full = Mask(h, w);
  partial = Mask(h, w);
  std::copy(bytes.begin() + 16, bytes.begin() + 16 + count, full.v.begin());
  std::copy(bytes.begin() + 16 + count, bytes.end(), partial.v.begin());
}

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetMissingFileError("missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

DatasetManifest build_dataset(const ScenarioSpec& scenario, const PhantomConfig& cfg,
                              const ModalityStyle& style_a, const ModalityStyle& style_b,
                              int n_per_modality, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
  if (n_per_modality < 1) throw std::invalid_argument("build_dataset: n_per_modality >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory: " + out_dir.string());

  DatasetManifest mf;
  mf.scenario = scenario;
  mf.n_per_modality = n_per_modality;
  mf.seed = seed;
  mf.phantom = cfg;
  mf.styles[0] = style_a;
  mf.styles[1] = style_b;

  for (int m = 0; m < 2; ++m) {
    const ModalityStyle& style = (m == 0) ? style_a : style_b;
    const char tag = (m == 0) ? 'a' : 'b';
    std::vector<std::string> ids;
    for (int i = 0; i < n_per_modality; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%c_%04d", tag, i);
      ids.emplace_back(buf);
    }

    std::vector<SampleRecord> recs(ids.size());
    std::vector<std::vector<std::string>> warns(ids.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(ids.size()); ++i)
      recs[i] = make_sample(ids[i], m, scenario, cfg, style, seed, &warns[i]);

    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (const std::string& w : warns[i]) mf.warnings.push_back(ids[i] + ": " + w);
      const auto img = encode_img(recs[i].image, recs[i].w, recs[i].h);
      const auto msk = encode_msk(recs[i].full_mask, recs[i].partial_mask);
      write_file_bytes(out_dir / sample_file_img(ids[i]), img);
      write_file_bytes(out_dir / sample_file_msk(ids[i]), msk);
      mf.checksums[sample_file_img(ids[i])] = crc32_of(img);
      mf.checksums[sample_file_msk(ids[i])] = crc32_of(msk);
    }

    rng::Stream split = rng::derive(seed, m == 0 ? "split_a" : "split_b");
    split.shuffle(ids);
    const int n_train = static_cast<int>(std::llround(0.8 * n_per_modality));
    mf.train_ids[m].assign(ids.begin(), ids.begin() + n_train);
    mf.test_ids[m].assign(ids.begin() + n_train, ids.end());
    std::sort(mf.train_ids[m].begin(), mf.train_ids[m].end());
    std::sort(mf.test_ids[m].begin(), mf.test_ids[m].end());
  }

  json j;
  j["version"] = mf.version;
  j["scenario"] = {{"modality_a", scenario.modality_a.classes()},
                   {"modality_b", scenario.modality_b.classes()},
                   {"global", scenario.global.classes()},
                   {"kind", static_cast<int>(scenario.kind)}};
  j["modalities"] = {{"a", {{"train", mf.train_ids[0]}, {"test", mf.test_ids[0]}}},
                     {"b", {{"train", mf.train_ids[1]}, {"test", mf.test_ids[1]}}}};
  j["counts"] = {{"a", n_per_modality}, {"b", n_per_modality}};
  j["config"] = {{"phantom", phantom_to_json(cfg)},
                 {"style_a", style_to_json(style_a)},
                 {"style_b", style_to_json(style_b)},
                 {"n_per_modality", n_per_modality},
                 {"seed", seed}};
  j["checksums"] = mf.checksums;
  j["warnings"] = mf.warnings;
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(out_dir / "manifest.json",
                   std::vector<std::uint8_t>(text.begin(), text.end()));
  return mf;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto mf_path = dir / "manifest.json";
  if (!std::filesystem::exists(mf_path))
    throw DatasetMissingFileError("missing file: " + mf_path.string());
  json j;
  try {
    const auto bytes = read_file_bytes(mf_path);
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw IoError("manifest parse error: " + std::string(e.what()));
  }

  const int version = j.at("version").get<int>();
  if (version != 1)
    throw DatasetVersionError("unsupported dataset version " + std::to_string(version));

  Dataset ds;
  ds.manifest.version = version;
  const LabelSet la = LabelSet::from(j.at("scenario").at("modality_a").get<std::vector<int>>());
  const LabelSet lb = LabelSet::from(j.at("scenario").at("modality_b").get<std::vector<int>>());
  ds.manifest.scenario = ScenarioSpec::make(la, lb);
  ds.manifest.n_per_modality = j.at("counts").at("a").get<int>();
  ds.manifest.seed = j.at("config").at("seed").get<std::uint64_t>();
  ds.manifest.phantom = phantom_from_json(j.at("config").at("phantom"));
  ds.manifest.styles[0] = style_from_json(j.at("config").at("style_a"));
  ds.manifest.styles[1] = style_from_json(j.at("config").at("style_b"));
  ds.manifest.checksums = j.at("checksums").get<std::map<std::string, std::uint32_t>>();
  if (j.contains("warnings"))
    ds.manifest.warnings = j.at("warnings").get<std::vector<std::string>>();

  auto load_sample = [&](const std::string& id, int m) {
    SampleRecord rec;
    rec.id = id;
    rec.modality = m;
    for (const std::string& file : {sample_file_img(id), sample_file_msk(id)}) {
      const auto bytes = read_file_bytes(dir / file);
      const auto it = ds.manifest.checksums.find(file);
      if (it == ds.manifest.checksums.end() || crc32_of(bytes) != it->second)
        throw DatasetChecksumError("checksum mismatch: " + (dir / file).string());
      if (file.ends_with(".img")) {
        decode_img(bytes, rec.image, rec.w, rec.h);
      } else {
        decode_msk(bytes, rec.full_mask, rec.partial_mask);
      }
    }
    const Mask rederived = partialize_mask(rec.full_mask, ds.manifest.scenario.modality(m),
                                           ds.manifest.scenario.global);
    if (rederived.v != rec.partial_mask.v)
      throw IoError("partial mask not derivable from full mask: " + id);
    return rec;
  };

  const json& mods = j.at("modalities");
  for (int m = 0; m < 2; ++m) {
    const json& jm = mods.at(m == 0 ? "a" : "b");
    ds.manifest.train_ids[m] = jm.at("train").get<std::vector<std::string>>();
    ds.manifest.test_ids[m] = jm.at("test").get<std::vector<std::string>>();
    for (const std::string& id : ds.manifest.train_ids[m])
      ds.train[m].push_back(load_sample(id, m));
    for (const std::string& id : ds.manifest.test_ids[m])
      ds.test[m].push_back(load_sample(id, m));
  }
  return ds;
}

}  // namespace psumml
