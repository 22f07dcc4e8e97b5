#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "psumml/label_algebra.hpp"
#include "psumml/rng.hpp"
#include "psumml/tensor.hpp"

// Two-modality 2-D phantom generator. Phantoms share one anatomy
// distribution (elliptical organs with class-specific position and size
// statistics) while each modality renders them with its own intensity
// mapping, so there is real appearance shift but also structure a model can
// transfer. Samples across modalities come from independent draws; nothing
// is pixel-paired.
namespace psumml {

struct PhantomConfig {
  int image_size = 64;
  int organ_count = 4;
  int shapes_min = 1;
  int shapes_max = 2;
  double size_min = 0.08;  // shape extent as a fraction of image size
  double size_max = 0.25;
  std::uint64_t seed = 0;
};

struct ModalityStyle {
  int modality_id = 0;
  std::vector<double> intensity_lut;  // indexed by class id
  double noise_sigma = 0.03;
  double bias_amplitude = 0.1;
  double contrast_gamma = 1.0;
};

// Built-in styles: modality A is bright-organs-on-dark, modality B inverts
// the per-class ordering, which is what makes naive cross-modality transfer
// hard.
ModalityStyle default_style(int modality, int organ_count);

struct SampleRecord {
  std::string id;
  int modality = 0;
  int h = 0, w = 0;
  std::vector<float> image;  // [0,1], row-major
  Mask full_mask;
  Mask partial_mask;
};

struct DatasetManifest {
  int version = 1;
  ScenarioSpec scenario;
  std::vector<std::string> train_ids[2];
  std::vector<std::string> test_ids[2];
  int n_per_modality = 0;
  std::uint64_t seed = 0;
  PhantomConfig phantom;
  ModalityStyle styles[2];
  std::map<std::string, std::uint32_t> checksums;  // file name -> crc32
  std::vector<std::string> warnings;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SampleRecord> train[2];
  std::vector<SampleRecord> test[2];
};

// Draws one full mask. Every organ class 1..organ_count is retried onto the
// canvas (up to 100 placements) if later classes covered it; a class that
// still ends up absent is reported through `warnings`.
Mask generate_phantom(const PhantomConfig& cfg, rng::Stream& rs,
                      std::vector<std::string>* warnings = nullptr);

// image = min(pow(max(lut[mask] * bias + noise, 0), gamma), 1).
std::vector<float> render_modality(const Mask& mask, const ModalityStyle& style,
                                   rng::Stream& rs);

// Generates, partializes, splits 80/20 and writes the on-disk dataset.
DatasetManifest build_dataset(const ScenarioSpec& scenario, const PhantomConfig& cfg,
                              const ModalityStyle& style_a, const ModalityStyle& style_b,
                              int n_per_modality, std::uint64_t seed,
                              const std::filesystem::path& out_dir);

// Reads a dataset back, verifying version, per-file checksums and that each
// stored partial mask re-derives from its full mask.
Dataset load_dataset(const std::filesystem::path& dir);

// --- binary formats (fixed little-endian layouts) ---------------------------
// .img: "PSMLIMG1", u32 w, u32 h, then w*h float32, row-major.
// .msk: "PSMLMSK1", u32 w, u32 h, then w*h u8 full mask, w*h u8 partial mask.
std::vector<std::uint8_t> encode_img(const std::vector<float>& image, int w, int h);
std::vector<std::uint8_t> encode_msk(const Mask& full, const Mask& partial);
void decode_img(const std::vector<std::uint8_t>& bytes, std::vector<float>& image, int& w,
                int& h);
void decode_msk(const std::vector<std::uint8_t>& bytes, Mask& full, Mask& partial);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace psumml
