#pragma once

// Labeled clip datasets: generation, the binary container, per-image contrast
// normalization, and training-time augmentation.
//
// Container layout (all integers little-endian):
//
//   "TWRDATA\0"                         8-byte magic
//   u32 format version                  kDatasetFormatVersion
//   u32 + bytes                         manifest, UTF-8 JSON
//   u32 frames per clip, u32 bytes per frame, u32 prediction floats (0 if none)
//   u64 x 3                             record counts: train, valid, test
//   records, split by split:
//     u8 stable, u8 n_blocks, u16 fallen_count, u64 sampler_seed, u64 draw_index
//     frames (frames per clip x bytes per frame)
//     prediction (float32 x prediction floats), when present
//   u32 CRC-32 of everything above

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "towerphys/io.hpp"
#include "towerphys/physics.hpp"
#include "towerphys/random.hpp"
#include "towerphys/render.hpp"
#include "towerphys/scenegen.hpp"

namespace towerphys {

inline constexpr std::uint32_t kDatasetFormatVersion = 1;
inline constexpr std::size_t kImageValues = kFrameBytes;  // 3 x 64 x 64

enum class Split : int { train = 0, valid = 1, test = 2 };
inline constexpr std::array<Split, 3> kSplits{Split::train, Split::valid, Split::test};
const char* to_string(Split split);
Split parse_split(const std::string& name);

// Frames of the 39-frame clip used for the 5-step recurrent subsequence.
inline constexpr std::array<int, 5> kSubsequenceFrames{0, 9, 19, 29, 38};
inline constexpr int kFirstFrame = 0;
inline constexpr int kLastFrame = kClipLength - 1;

struct SplitSizes {
  int train = 8000;
  int valid = 1000;
  int test = 3000;

  int operator[](Split s) const {
    return s == Split::train ? train : s == Split::valid ? valid : test;
  }
  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

// Where predicted last frames came from, for augmented datasets.
struct PredictionInfo {
  std::string predictor_kind;  // "cd" or "cld"
  int predictor_height = 0;
  std::string checkpoint_digest;
  friend bool operator==(const PredictionInfo&, const PredictionInfo&) = default;
};

// Everything needed to regenerate a dataset bit-for-bit.
struct DatasetManifest {
  std::uint32_t format_version = kDatasetFormatVersion;
  int n_blocks = 3;
  SplitSizes sizes;
  std::uint64_t seed = 0;
  double offset_fraction = 0.0;
  Scene physics;  // constants only; no blocks
  SolverSettings solver;
  FallCriterion criterion;
  CameraConfig camera;
  std::string generator;
  std::optional<PredictionInfo> predictions;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
  friend bool operator==(const DatasetManifest&, const DatasetManifest&);
};

struct Record {
  VideoClip clip;
  bool stable = true;
  int fallen_count = 0;
  int n_blocks = 0;
  std::uint64_t sampler_seed = 0;
  std::uint64_t draw_index = 0;
  std::vector<float> predicted_last_frame;  // normalized CHW, empty if absent

  friend bool operator==(const Record&, const Record&) = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::array<std::vector<Record>, 3> splits;

  std::vector<Record>& operator[](Split s) { return splits[static_cast<int>(s)]; }
  const std::vector<Record>& operator[](Split s) const { return splits[static_cast<int>(s)]; }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GenerationOptions {
  int n_blocks = 3;
  SplitSizes sizes;
  std::uint64_t seed = 0;
  int workers = 1;
};

TowerSamplerConfig sampler_config(const GenerationOptions& options, Split split);
DatasetManifest make_manifest(const GenerationOptions& options);

// Generates every split in memory. Splits use distinct RNG streams.
Dataset build_dataset(const GenerationOptions& options);

// Same content as serialize(build_dataset(options), path), streamed to disk.
void generate_dataset_file(const GenerationOptions& options, const std::filesystem::path& path);

void serialize(const Dataset& dataset, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);

// Streaming writer. Record counts are fixed by the manifest's split sizes.
class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& path, const DatasetManifest& manifest,
                bool with_predictions);
  ~DatasetWriter();
  void append(Split split, const Record& record);
  // Raw form used when copying records between files.
  void append_raw(Split split, const Record& labels, std::span<const std::uint8_t> clip_bytes,
                  std::span<const float> prediction);
  void finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Random access into a verified, memory-mapped dataset file.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path);
  ~DatasetReader();

  const DatasetManifest& manifest() const;
  std::size_t size(Split split) const;
  bool has_predictions() const;
  // Labels and metadata only; clip and prediction left empty.
  Record labels(Split split, std::size_t index) const;
  Frame frame(Split split, std::size_t index, int frame_index) const;
  std::span<const std::uint8_t> clip_bytes(Split split, std::size_t index) const;
  std::vector<float> prediction(Split split, std::size_t index) const;
  Record record(Split split, std::size_t index) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// (pixels / 255 - mean) / max(std, 1e-6) over all pixels and channels of this
// image; output is channel-major (3 x 64 x 64).
std::vector<float> contrast_normalize(const Frame& frame);

struct AugmentRanges {
  double flip_probability = 0.5;
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double brightness_min = -0.2;
  double brightness_max = 0.2;
};

struct AugmentParams {
  bool flip = false;
  double contrast = 1.0;
  double brightness = 0.0;
  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

// Draw order is flip, contrast, brightness.
AugmentParams draw_augmentation(CounterRng& rng, const AugmentRanges& ranges = {});
// In place on a normalized channel-major image.
void apply_augmentation(const AugmentParams& params, std::span<float> image);
// One draw applied to every image of the group (e.g. first and last frame).
AugmentParams augment(std::span<const std::span<float>> images, CounterRng& rng,
                      const AugmentRanges& ranges = {});

void flip_image(std::span<float> image);

}  // namespace towerphys
