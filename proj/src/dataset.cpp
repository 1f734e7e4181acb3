#include "towerphys/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "json.hpp"

#include "towerphys/error.hpp"

namespace towerphys {
namespace {

using nlohmann::json;

constexpr std::array<std::uint8_t, 8> kMagic{'T', 'W', 'R', 'D', 'A', 'T', 'A', 0};
constexpr std::size_t kLabelBytes = 1 + 1 + 2 + 8 + 8;
constexpr std::size_t kClipBytes = kClipLength * kFrameBytes;
constexpr std::uint64_t kSplitStreamBase = 0x53504c4954ULL;  // "SPLIT"

json rgb_json(const Rgb& c) { return json::array({c[0], c[1], c[2]}); }

Rgb rgb_from(const json& j) {
  return {j.at(0).get<std::uint8_t>(), j.at(1).get<std::uint8_t>(), j.at(2).get<std::uint8_t>()};
}

json manifest_json(const DatasetManifest& m) {
  json palette = json::array();
  for (const Rgb& c : m.camera.palette) palette.push_back(rgb_json(c));
  json j = {
      {"format_version", m.format_version},
      {"n_blocks", m.n_blocks},
      {"split_sizes", {{"train", m.sizes.train}, {"valid", m.sizes.valid}, {"test", m.sizes.test}}},
      {"seed", m.seed},
      {"offset_fraction", m.offset_fraction},
      {"physics",
       {{"block_side", m.physics.block_side},
        {"gravity", m.physics.gravity},
        {"friction_coefficient", m.physics.friction_coefficient},
        {"restitution", m.physics.restitution},
        {"ground_height", m.physics.ground_height}}},
      {"solver",
       {{"timestep", m.solver.timestep},
        {"iterations", m.solver.iterations},
        {"contact_slop", m.solver.contact_slop},
        {"baumgarte", m.solver.baumgarte},
        {"contact_margin", m.solver.contact_margin},
        {"horizon", m.solver.horizon}}},
      {"fall_criterion",
       {{"displacement_fraction", m.criterion.displacement_fraction},
        {"tilt_degrees", m.criterion.tilt_degrees}}},
      {"camera",
       {{"x_min", m.camera.x_min},
        {"x_max", m.camera.x_max},
        {"y_min", m.camera.y_min},
        {"y_max", m.camera.y_max},
        {"ground_height", m.camera.ground_height},
        {"block_side", m.camera.block_side},
        {"background", rgb_json(m.camera.background)},
        {"ground", rgb_json(m.camera.ground)},
        {"palette", palette}}},
      {"clip", {{"frames", kClipLength}, {"width", kFrameSize}, {"height", kFrameSize}, {"channels", kChannels}}},
      {"generator", m.generator},
  };
  if (m.predictions) {
    j["predictions"] = {{"predictor_kind", m.predictions->predictor_kind},
                        {"predictor_height", m.predictions->predictor_height},
                        {"checkpoint_digest", m.predictions->checkpoint_digest}};
  } else {
    j["predictions"] = nullptr;
  }
  return j;
}

DatasetManifest manifest_from(const json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<std::uint32_t>();
  m.n_blocks = j.at("n_blocks").get<int>();
  const json& s = j.at("split_sizes");
  m.sizes = {s.at("train").get<int>(), s.at("valid").get<int>(), s.at("test").get<int>()};
  m.seed = j.at("seed").get<std::uint64_t>();
  m.offset_fraction = j.at("offset_fraction").get<double>();
  const json& p = j.at("physics");
  m.physics.block_side = p.at("block_side").get<double>();
  m.physics.gravity = p.at("gravity").get<double>();
  m.physics.friction_coefficient = p.at("friction_coefficient").get<double>();
  m.physics.restitution = p.at("restitution").get<double>();
  m.physics.ground_height = p.at("ground_height").get<double>();
  const json& v = j.at("solver");
  m.solver.timestep = v.at("timestep").get<double>();
  m.solver.iterations = v.at("iterations").get<int>();
  m.solver.contact_slop = v.at("contact_slop").get<double>();
  m.solver.baumgarte = v.at("baumgarte").get<double>();
  m.solver.contact_margin = v.at("contact_margin").get<double>();
  m.solver.horizon = v.at("horizon").get<double>();
  const json& f = j.at("fall_criterion");
  m.criterion.displacement_fraction = f.at("displacement_fraction").get<double>();
  m.criterion.tilt_degrees = f.at("tilt_degrees").get<double>();
  const json& c = j.at("camera");
  m.camera.x_min = c.at("x_min").get<double>();
  m.camera.x_max = c.at("x_max").get<double>();
  m.camera.y_min = c.at("y_min").get<double>();
  m.camera.y_max = c.at("y_max").get<double>();
  m.camera.ground_height = c.at("ground_height").get<double>();
  m.camera.block_side = c.at("block_side").get<double>();
  m.camera.background = rgb_from(c.at("background"));
  m.camera.ground = rgb_from(c.at("ground"));
  m.camera.palette.clear();
  for (const json& col : c.at("palette")) m.camera.palette.push_back(rgb_from(col));
  m.generator = j.at("generator").get<std::string>();
  const json& pred = j.at("predictions");
  if (!pred.is_null()) {
    m.predictions = PredictionInfo{pred.at("predictor_kind").get<std::string>(),
                                   pred.at("predictor_height").get<int>(),
                                   pred.at("checkpoint_digest").get<std::string>()};
  }
  return m;
}

void check_record(const Record& r, int n_blocks) {
  require(r.stable == (r.fallen_count == 0),
          "dataset record: stable flag disagrees with fallen_count");
  require(r.fallen_count >= 0 && r.fallen_count <= r.n_blocks,
          "dataset record: fallen_count out of range");
  require(r.n_blocks == n_blocks, "dataset record: n_blocks differs from manifest");
}

std::size_t record_bytes(bool with_predictions) {
  return kLabelBytes + kClipBytes + (with_predictions ? kImageValues * sizeof(float) : 0);
}

}  // namespace

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  for (Split s : kSplits) {
    if (name == to_string(s)) return s;
  }
  fail(ErrorKind::invalid_argument, "unknown split '" + name + "' (expected train, valid, test)");
}

std::string DatasetManifest::to_json() const { return manifest_json(*this).dump(2); }

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  try {
    return manifest_from(json::parse(text));
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("dataset manifest: ") + e.what());
  }
}

bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
  return manifest_json(a) == manifest_json(b);
}

TowerSamplerConfig sampler_config(const GenerationOptions& options, Split split) {
  TowerSamplerConfig config;
  config.n_blocks = options.n_blocks;
  config.rng_seed = options.seed;
  config.stream = mix_key(kSplitStreamBase, static_cast<std::uint64_t>(split));
  return config;
}

DatasetManifest make_manifest(const GenerationOptions& options) {
  require(options.n_blocks >= 1, "dataset: n_blocks must be positive");
  for (Split s : kSplits) {
    require(options.sizes[s] >= 0 && options.sizes[s] % 2 == 0,
            std::string("dataset: ") + to_string(s) + " size must be even and non-negative");
  }
  const TowerSamplerConfig config = sampler_config(options, Split::train);
  DatasetManifest m;
  m.n_blocks = options.n_blocks;
  m.sizes = options.sizes;
  m.seed = options.seed;
  m.offset_fraction = config.max_offset_fraction(options.n_blocks);
  m.physics.block_side = config.block_side;
  m.solver = config.solver;
  m.criterion = config.criterion;
  m.generator = "towerphys-dataset-1";
  return m;
}

namespace {

// Renders the accepted scenes of one split in chunks, handing each finished
// record to `sink` in order.
template <class Sink>
void produce_split(const GenerationOptions& options, Split split, const CameraConfig& camera,
                   Sink&& sink) {
  const TowerSamplerConfig config = sampler_config(options, split);
  const std::vector<LabeledScene> scenes =
      generate_balanced(config, options.sizes[split], options.workers);
  const int workers = std::max(1, options.workers);
  const std::size_t chunk = static_cast<std::size_t>(std::max(16, 4 * workers));
  std::vector<Record> batch;
  for (std::size_t begin = 0; begin < scenes.size(); begin += chunk) {
    const std::size_t end = std::min(scenes.size(), begin + chunk);
    batch.assign(end - begin, Record{});
    auto work = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t k = lo; k < hi; ++k) {
        const LabeledScene& s = scenes[begin + k];
        Record& r = batch[k];
        r.clip = render_clip(simulate(s.scene, config.solver.horizon, config.solver), camera);
        r.stable = s.outcome.stable;
        r.fallen_count = s.outcome.fallen_count;
        r.n_blocks = config.n_blocks;
        r.sampler_seed = s.sampler_seed;
        r.draw_index = s.draw_index;
      }
    };
    if (workers == 1) {
      work(0, batch.size());
    } else {
      std::vector<std::thread> pool;
      const std::size_t per = (batch.size() + workers - 1) / workers;
      for (std::size_t b = 0; b < batch.size(); b += per) {
        pool.emplace_back(work, b, std::min(batch.size(), b + per));
      }
      for (auto& t : pool) t.join();
    }
    for (Record& r : batch) sink(r);
  }
}

}  // namespace

Dataset build_dataset(const GenerationOptions& options) {
  Dataset d;
  d.manifest = make_manifest(options);
  for (Split s : kSplits) {
    d[s].reserve(static_cast<std::size_t>(options.sizes[s]));
    produce_split(options, s, d.manifest.camera, [&](Record& r) { d[s].push_back(std::move(r)); });
  }
  return d;
}

void generate_dataset_file(const GenerationOptions& options, const std::filesystem::path& path) {
  const DatasetManifest manifest = make_manifest(options);
  DatasetWriter writer(path, manifest, false);
  for (Split s : kSplits) {
    produce_split(options, s, manifest.camera, [&](Record& r) { writer.append(s, r); });
  }
  writer.finish();
}

// ---------------------------------------------------------------------------
// Writer

struct DatasetWriter::Impl {
  io::AtomicFile file;
  DatasetManifest manifest;
  bool with_predictions;
  std::uint32_t crc = 0;
  int current_split = 0;
  std::array<std::uint64_t, 3> written{};
  bool finished = false;

  Impl(const std::filesystem::path& path, DatasetManifest m, bool preds)
      : file(path), manifest(std::move(m)), with_predictions(preds) {}

  void put(std::span<const std::uint8_t> bytes) {
    crc = io::crc32(bytes, crc);
    file.write(bytes);
  }
};

DatasetWriter::DatasetWriter(const std::filesystem::path& path, const DatasetManifest& manifest,
                             bool with_predictions)
    : impl_(std::make_unique<Impl>(path, manifest, with_predictions)) {
  require(with_predictions == manifest.predictions.has_value(),
          "dataset writer: prediction flag disagrees with manifest");
  io::ByteWriter w;
  w.bytes(kMagic);
  w.u32(manifest.format_version);
  w.string(manifest.to_json());
  w.u32(kClipLength);
  w.u32(static_cast<std::uint32_t>(kFrameBytes));
  w.u32(with_predictions ? static_cast<std::uint32_t>(kImageValues) : 0);
  for (Split s : kSplits) w.u64(static_cast<std::uint64_t>(manifest.sizes[s]));
  impl_->put(w.buffer());
}

DatasetWriter::~DatasetWriter() = default;

void DatasetWriter::append(Split split, const Record& record) {
  require(record.clip.frames.size() == static_cast<std::size_t>(kClipLength),
          "dataset writer: clip must have 39 frames");
  std::vector<std::uint8_t> clip(kClipBytes);
  for (int k = 0; k < kClipLength; ++k) {
    std::copy(record.clip.frames[k].pixels.begin(), record.clip.frames[k].pixels.end(),
              clip.begin() + static_cast<std::ptrdiff_t>(k * kFrameBytes));
  }
  append_raw(split, record, clip, record.predicted_last_frame);
}

void DatasetWriter::append_raw(Split split, const Record& labels,
                               std::span<const std::uint8_t> clip_bytes,
                               std::span<const float> prediction) {
  Impl& s = *impl_;
  require(!s.finished, "dataset writer: already finished");
  const int idx = static_cast<int>(split);
  require(idx >= s.current_split, "dataset writer: splits must be written in order");
  while (s.current_split < idx) {
    require(s.written[s.current_split] ==
                static_cast<std::uint64_t>(s.manifest.sizes[static_cast<Split>(s.current_split)]),
            "dataset writer: split closed before reaching its size");
    ++s.current_split;
  }
  require(s.written[idx] < static_cast<std::uint64_t>(s.manifest.sizes[split]),
          std::string("dataset writer: too many records for split ") + to_string(split));
  check_record(labels, s.manifest.n_blocks);
  require(clip_bytes.size() == kClipBytes, "dataset writer: clip byte size mismatch");
  require(prediction.size() == (s.with_predictions ? kImageValues : 0),
          "dataset writer: predicted frame presence or size mismatch");

  io::ByteWriter w;
  w.u8(labels.stable ? 1 : 0);
  w.u8(static_cast<std::uint8_t>(labels.n_blocks));
  w.u16(static_cast<std::uint16_t>(labels.fallen_count));
  w.u64(labels.sampler_seed);
  w.u64(labels.draw_index);
  s.put(w.buffer());
  s.put(clip_bytes);
  if (!prediction.empty()) {
    w.clear();
    for (float v : prediction) w.f32(v);
    s.put(w.buffer());
  }
  ++s.written[idx];
}

void DatasetWriter::finish() {
  Impl& s = *impl_;
  require(!s.finished, "dataset writer: already finished");
  for (Split sp : kSplits) {
    require(s.written[static_cast<int>(sp)] == static_cast<std::uint64_t>(s.manifest.sizes[sp]),
            std::string("dataset writer: split ") + to_string(sp) + " incomplete");
  }
  io::ByteWriter w;
  w.u32(s.crc);
  s.file.write(w.buffer());
  s.file.commit();
  s.finished = true;
}

// ---------------------------------------------------------------------------
// Reader

struct DatasetReader::Impl {
  io::MappedFile file;
  DatasetManifest manifest;
  bool with_predictions = false;
  std::size_t stride = 0;
  std::array<std::size_t, 3> counts{};
  std::array<std::size_t, 3> first{};  // byte offset of each split's first record
  std::string name;

  explicit Impl(const std::filesystem::path& path) : file(path), name(path.string()) {}

  std::span<const std::uint8_t> at(Split split, std::size_t index) const {
    const int s = static_cast<int>(split);
    require(index < counts[s], "dataset: record index " + std::to_string(index) +
                                   " out of range for split " + to_string(split));
    return file.bytes().subspan(first[s] + index * stride, stride);
  }
};

DatasetReader::DatasetReader(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorKind::io, "dataset file not found: " + path.string());
  }
  impl_ = std::make_unique<Impl>(path);
  Impl& s = *impl_;
  const std::string what = "dataset " + s.name;
  const auto all = s.file.bytes();
  if (all.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), all.begin())) {
    fail(ErrorKind::format, what + ": not a dataset file (bad magic)");
  }
  const auto payload = io::verify_checksum(all, what);
  io::ByteReader r(payload, what);
  r.bytes(kMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kDatasetFormatVersion) {
    fail(ErrorKind::format, what + ": format version " + std::to_string(version) +
                                " not supported (expected " +
                                std::to_string(kDatasetFormatVersion) + ")");
  }
  s.manifest = DatasetManifest::from_json(r.string());
  const std::uint32_t frames = r.u32();
  const std::uint32_t frame_bytes = r.u32();
  const std::uint32_t pred = r.u32();
  if (frames != kClipLength || frame_bytes != kFrameBytes ||
      (pred != 0 && pred != kImageValues)) {
    fail(ErrorKind::format, what + ": unexpected clip geometry");
  }
  s.with_predictions = pred != 0;
  if (s.with_predictions != s.manifest.predictions.has_value()) {
    fail(ErrorKind::format, what + ": prediction flag disagrees with manifest");
  }
  s.stride = record_bytes(s.with_predictions);
  std::size_t offset = payload.size() - r.remaining() + 3 * 8;
  for (Split sp : kSplits) {
    const std::uint64_t n = r.u64();
    if (n != static_cast<std::uint64_t>(s.manifest.sizes[sp])) {
      fail(ErrorKind::format, what + ": record count disagrees with manifest");
    }
    s.counts[static_cast<int>(sp)] = n;
  }
  for (Split sp : kSplits) {
    s.first[static_cast<int>(sp)] = offset;
    offset += s.counts[static_cast<int>(sp)] * s.stride;
  }
  if (offset != payload.size()) {
    fail(ErrorKind::format, what + ": size disagrees with record counts");
  }
}

DatasetReader::~DatasetReader() = default;

const DatasetManifest& DatasetReader::manifest() const { return impl_->manifest; }
std::size_t DatasetReader::size(Split split) const { return impl_->counts[static_cast<int>(split)]; }
bool DatasetReader::has_predictions() const { return impl_->with_predictions; }

Record DatasetReader::labels(Split split, std::size_t index) const {
  io::ByteReader r(impl_->at(split, index).first(kLabelBytes), "dataset record");
  Record out;
  out.stable = r.u8() != 0;
  out.n_blocks = r.u8();
  out.fallen_count = r.u16();
  out.sampler_seed = r.u64();
  out.draw_index = r.u64();
  if (out.stable != (out.fallen_count == 0) || out.fallen_count > out.n_blocks) {
    fail(ErrorKind::format, "dataset record: inconsistent labels");
  }
  return out;
}

std::span<const std::uint8_t> DatasetReader::clip_bytes(Split split, std::size_t index) const {
  return impl_->at(split, index).subspan(kLabelBytes, kClipBytes);
}

Frame DatasetReader::frame(Split split, std::size_t index, int frame_index) const {
  require(frame_index >= 0 && frame_index < kClipLength, "dataset: frame index out of range");
  const auto bytes = clip_bytes(split, index).subspan(frame_index * kFrameBytes, kFrameBytes);
  Frame f;
  std::copy(bytes.begin(), bytes.end(), f.pixels.begin());
  return f;
}

std::vector<float> DatasetReader::prediction(Split split, std::size_t index) const {
  if (!impl_->with_predictions) return {};
  io::ByteReader r(impl_->at(split, index).subspan(kLabelBytes + kClipBytes), "dataset record");
  std::vector<float> out(kImageValues);
  for (float& v : out) v = r.f32();
  return out;
}

Record DatasetReader::record(Split split, std::size_t index) const {
  Record out = labels(split, index);
  out.clip.frames.resize(kClipLength);
  for (int k = 0; k < kClipLength; ++k) out.clip.frames[k] = frame(split, index, k);
  out.predicted_last_frame = prediction(split, index);
  return out;
}

void serialize(const Dataset& dataset, const std::filesystem::path& path) {
  for (Split s : kSplits) {
    require(dataset[s].size() == static_cast<std::size_t>(dataset.manifest.sizes[s]),
            "serialize: split size disagrees with manifest");
  }
  DatasetWriter writer(path, dataset.manifest, dataset.manifest.predictions.has_value());
  for (Split s : kSplits) {
    for (const Record& r : dataset[s]) writer.append(s, r);
  }
  writer.finish();
}

Dataset load(const std::filesystem::path& path) {
  DatasetReader reader(path);
  Dataset d;
  d.manifest = reader.manifest();
  for (Split s : kSplits) {
    d[s].reserve(reader.size(s));
    for (std::size_t i = 0; i < reader.size(s); ++i) d[s].push_back(reader.record(s, i));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Normalization and augmentation

std::vector<float> contrast_normalize(const Frame& frame) {
  constexpr std::size_t plane = kFrameSize * kFrameSize;
  double sum = 0.0;
  for (std::uint8_t p : frame.pixels) sum += p;
  const double n = static_cast<double>(kFrameBytes);
  const double mean = sum / n / 255.0;
  double sq = 0.0;
  for (std::uint8_t p : frame.pixels) {
    const double d = p / 255.0 - mean;
    sq += d * d;
  }
  const double scale = 1.0 / std::max(std::sqrt(sq / n), 1e-6);
  std::vector<float> out(kImageValues);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < kChannels; ++c) {
      const double v = frame.pixels[i * kChannels + c] / 255.0;
      out[c * plane + i] = static_cast<float>((v - mean) * scale);
    }
  }
  return out;
}

AugmentParams draw_augmentation(CounterRng& rng, const AugmentRanges& ranges) {
  AugmentParams p;
  p.flip = rng.bernoulli(ranges.flip_probability);
  p.contrast = rng.uniform(ranges.contrast_min, ranges.contrast_max);
  p.brightness = rng.uniform(ranges.brightness_min, ranges.brightness_max);
  return p;
}

void flip_image(std::span<float> image) {
  require(image.size() % kFrameSize == 0, "flip_image: size is not a multiple of the row width");
  for (std::size_t row = 0; row < image.size(); row += kFrameSize) {
    std::reverse(image.begin() + static_cast<std::ptrdiff_t>(row),
                 image.begin() + static_cast<std::ptrdiff_t>(row + kFrameSize));
  }
}

void apply_augmentation(const AugmentParams& params, std::span<float> image) {
  if (params.flip) flip_image(image);
  const auto c = static_cast<float>(params.contrast);
  const auto b = static_cast<float>(params.brightness);
  if (c == 1.0f && b == 0.0f) return;
  for (float& v : image) v = v * c + b;
}

AugmentParams augment(std::span<const std::span<float>> images, CounterRng& rng,
                      const AugmentRanges& ranges) {
  const AugmentParams p = draw_augmentation(rng, ranges);
  for (std::span<float> img : images) apply_augmentation(p, img);
  return p;
}

}  // namespace towerphys
