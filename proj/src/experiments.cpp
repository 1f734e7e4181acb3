#include "towerphys/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <tuple>

#include "json_util.hpp"
#include "towerphys/io.hpp"
#include "towerphys/nn/optim.hpp"

namespace towerphys {

using detail::parse_object;
using detail::read_opt;
using nlohmann::json;
using nn::Mode;
using nn::Tensor;

namespace {

constexpr std::uint64_t kShuffleStream = 0x53485546ULL;  // "SHUF"
constexpr std::uint64_t kAugmentStream = 0x4155474dULL;  // "AUGM"
constexpr int kEvalBatch = 64;
// Mixed into every stage digest; bump when code changes alter stage outputs
// so stale cache entries are not reused.
constexpr int kStageRevision = 2;

std::string format(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

void note(const Logger& log, const std::string& message) {
  if (log) log(message);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<float> image_batch(std::size_t n) {
  return Tensor<float>({static_cast<int>(n), kChannels, kFrameSize, kFrameSize});
}

Tensor<float> frame_batch(const DatasetReader& data, Split split,
                          std::span<const std::size_t> indices, int frame) {
  Tensor<float> out = image_batch(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::vector<float> img = contrast_normalize(data.frame(split, indices[k], frame));
    std::copy(img.begin(), img.end(), out.data() + k * kImageValues);
  }
  return out;
}

// Fisher-Yates driven by the counter RNG so orders match across platforms.
std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng(seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::size_t> in_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  return order;
}

// Consecutive batches; a lone trailing example joins the previous batch so
// batchnorm never sees a batch of one in training.
std::vector<std::span<const std::size_t>> batches(const std::vector<std::size_t>& order,
                                                  int batch_size) {
  std::vector<std::span<const std::size_t>> out;
  const std::size_t n = order.size(), b = static_cast<std::size_t>(batch_size);
  std::size_t i = 0;
  while (i < n) {
    std::size_t end = std::min(n, i + b);
    if (n - end == 1) end = n;
    out.emplace_back(order.data() + i, end - i);
    i = end;
  }
  return out;
}

void check_training(const TrainingConfig& c, const DatasetReader& data, const char* what) {
  require(c.learning_rate > 0 && c.batch_size >= 2 && c.max_epochs >= 1 && c.patience >= 1,
          std::string(what) + ": learning_rate > 0, batch_size >= 2, max_epochs >= 1 and "
                              "patience >= 1 are required");
  require(data.size(Split::train) >= 2 && data.size(Split::valid) >= 1,
          std::string(what) + ": needs at least 2 training and 1 validation record");
}

[[noreturn]] void diverged(const char* what, int epoch, std::size_t step, const std::string& detail) {
  fail(ErrorKind::divergence, format("%s: diverged at epoch %d, step %zu: ", what, epoch, step) +
                                  detail);
}

// ---------------------------------------------------------------------------
// Frame predictors

double convdeconv_batch(ConvDeconvNet<float>& net, const DatasetReader& data, Split split,
                        std::span<const std::size_t> idx, bool train) {
  const Tensor<float> x = frame_batch(data, split, idx, kFirstFrame);
  const Tensor<float> y = frame_batch(data, split, idx, kLastFrame);
  const Tensor<float> p = net.forward(x, train ? Mode::train : Mode::eval);
  const nn::Loss<float> loss = nn::mse_loss(p, y);
  if (train && std::isfinite(loss.value)) net.backward(loss.grad);
  return loss.value;
}

double convlstm_batch(ConvLSTMDeconvNet<float>& net, const DatasetReader& data, Split split,
                      std::span<const std::size_t> idx, bool train) {
  std::vector<Tensor<float>> frames;
  for (int k : kSubsequenceFrames) frames.push_back(frame_batch(data, split, idx, k));
  const std::vector<Tensor<float>> preds =
      net.teacher_forced(frames, train ? Mode::train : Mode::eval);
  const auto steps = static_cast<float>(preds.size());
  double total = 0;
  std::vector<Tensor<float>> grads;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    nn::Loss<float> loss = nn::mse_loss(preds[t], frames[t + 1]);
    total += loss.value;
    for (float& g : loss.grad.values()) g /= steps;
    grads.push_back(std::move(loss.grad));
  }
  total /= steps;
  if (train && std::isfinite(total)) net.backward(grads);
  return total;
}

template <class Net, class BatchFn>
TrainResult fit_frame_predictor(Net& net, const char* model_name, const std::string& config_json,
                                const DatasetReader& data, const TrainingConfig& training,
                                std::uint64_t seed, const Logger& log, BatchFn run_batch) {
  check_training(training, data, "train-frames");
  nn::ParameterList<float> params = net.parameters();
  nn::Adam<float> opt(params, {training.learning_rate});
  nn::EarlyStopper<float> stopper(params, training.patience,
                                  nn::EarlyStopper<float>::Goal::minimize);
  TrainingCurve curve;
  curve.metric = "valid_mse";
  const int height = data.manifest().n_blocks;

  for (int epoch = 1; epoch <= training.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = shuffled(data.size(Split::train), seed, epoch);
    double sum = 0;
    std::size_t seen = 0, step = 0;
    for (std::span<const std::size_t> b : batches(order, training.batch_size)) {
      ++step;
      params.zero_grad();
      const double loss = run_batch(net, data, Split::train, b, true);
      if (!std::isfinite(loss)) {
        net.clear_tape();
        diverged(model_name, epoch, step, "non-finite training loss");
      }
      try {
        opt.step();
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::divergence) throw;
        diverged(model_name, epoch, step, e.what());
      }
      sum += loss * static_cast<double>(b.size());
      seen += b.size();
    }
    const std::vector<std::size_t> valid = in_order(data.size(Split::valid));
    double vsum = 0;
    for (std::span<const std::size_t> b : batches(valid, kEvalBatch)) {
      vsum += run_batch(net, data, Split::valid, b, false) * static_cast<double>(b.size());
    }
    const double vmse = vsum / static_cast<double>(valid.size());
    if (!std::isfinite(vmse)) diverged(model_name, epoch, step, "non-finite validation loss");
    curve.epochs.push_back({epoch, sum / static_cast<double>(seen), vmse, seconds_since(t0)});
    const bool stop = stopper.observe(vmse);
    note(log, format("%s h%d epoch %d: train mse %.5f, valid mse %.5f (best %.5f @%d), %.1fs",
                     model_name, height, epoch, curve.epochs.back().train_loss, vmse,
                     stopper.best(), stopper.best_epoch() + 1, curve.epochs.back().seconds));
    if (stop) break;
  }
  stopper.restore();
  curve.best_epoch = stopper.best_epoch() + 1;
  curve.best_metric = stopper.best();

  const json meta{{"model", model_name},
                  {"config", json::parse(config_json)},
                  {"training", json::parse(training.to_json())},
                  {"seed", seed},
                  {"height", height},
                  {"epochs", curve.epochs.size()},
                  {"best_epoch", curve.best_epoch},
                  {"best_valid_mse", curve.best_metric}};
  return {nn::make_checkpoint(params, meta.dump()), std::move(curve)};
}

json checkpoint_meta(const nn::Checkpoint& c) {
  try {
    json j = json::parse(c.metadata);
    if (!j.is_object()) fail(ErrorKind::format, "checkpoint metadata is not an object");
    return j;
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint metadata: ") + e.what());
  }
}

std::string meta_string(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    fail(ErrorKind::format, std::string("checkpoint metadata: missing '") + key + "'");
  }
  return j.at(key).get<std::string>();
}

template <class V>
V meta_value(const json& j, const char* key) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    fail(ErrorKind::format, std::string("checkpoint metadata: missing or bad '") + key + "'");
  }
}

// Which inputs a classifier kind reads, and whether the file provides them.
void check_inputs(ClassifierKind kind, const DatasetReader& data) {
  if (kind != ClassifierKind::cd && kind != ClassifierKind::cld) return;
  const auto& info = data.manifest().predictions;
  if (!data.has_predictions() || !info) {
    fail(ErrorKind::invalid_argument,
         std::string("classifier kind ") + to_string(kind) +
             " needs a dataset with predicted last frames (run predict-frames first)");
  }
  if (info->predictor_kind != to_string(kind)) {
    fail(ErrorKind::invalid_argument, std::string("classifier kind ") + to_string(kind) +
                                          " given predictions from a " + info->predictor_kind +
                                          " model");
  }
}

int label_of(const DatasetReader& data, Split split, std::size_t i) {
  return data.labels(split, i).stable ? 0 : 1;
}

std::vector<int> decide(const Tensor<float>& logits) {
  require(logits.rank() == 2 && logits.dim(1) == 2, "classifier: expected binary logits");
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (int i = 0; i < logits.dim(0); ++i) out[i] = logits[2 * i + 1] > logits[2 * i] ? 1 : 0;
  return out;
}

int kind_order(ClassifierKind k) {
  switch (k) {
    case ClassifierKind::s: return 0;
    case ClassifierKind::cd: return 1;
    case ClassifierKind::cld: return 2;
    case ClassifierKind::gt: return 3;
  }
  return 4;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Names and configs

const char* to_string(FramePredictorKind kind) {
  return kind == FramePredictorKind::cd ? "cd" : "cld";
}

const char* to_string(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::s: return "s";
    case ClassifierKind::cd: return "cd";
    case ClassifierKind::cld: return "cld";
    case ClassifierKind::gt: return "gt";
  }
  return "?";
}

const char* display_name(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::s: return "S";
    case ClassifierKind::cd: return "CD";
    case ClassifierKind::cld: return "CLD";
    case ClassifierKind::gt: return "GT";
  }
  return "?";
}

FramePredictorKind parse_frame_predictor_kind(const std::string& name) {
  if (name == "cd") return FramePredictorKind::cd;
  if (name == "cld") return FramePredictorKind::cld;
  fail(ErrorKind::invalid_argument, "unknown frame predictor kind '" + name + "' (expected cd, cld)");
}

ClassifierKind parse_classifier_kind(const std::string& name) {
  if (name == "s") return ClassifierKind::s;
  if (name == "cd") return ClassifierKind::cd;
  if (name == "cld") return ClassifierKind::cld;
  if (name == "gt") return ClassifierKind::gt;
  fail(ErrorKind::invalid_argument,
       "unknown classifier kind '" + name + "' (expected s, cd, cld, gt)");
}

std::string TrainingConfig::to_json() const {
  return json{{"learning_rate", learning_rate},
              {"batch_size", batch_size},
              {"max_epochs", max_epochs},
              {"patience", patience},
              {"augment", augment}}
      .dump();
}

namespace {
TrainingConfig training_from_json(const std::string& text, TrainingConfig c) {
  const char* what = "training config";
  const json j =
      parse_object(text, what, {"learning_rate", "batch_size", "max_epochs", "patience", "augment"});
  read_opt(j, "learning_rate", c.learning_rate, what);
  read_opt(j, "batch_size", c.batch_size, what);
  read_opt(j, "max_epochs", c.max_epochs, what);
  read_opt(j, "patience", c.patience, what);
  read_opt(j, "augment", c.augment, what);
  return c;
}
}  // namespace

TrainingConfig TrainingConfig::from_json(const std::string& text) {
  return training_from_json(text, {});
}

std::string TrainingCurve::to_csv() const {
  std::string out = "epoch,train_loss," + metric + ",seconds\n";
  for (const EpochRecord& e : epochs) {
    out += format("%d,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.valid_metric, e.seconds);
  }
  return out;
}

ExperimentConfig ExperimentConfig::desk(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.frame_training = {1e-3, 16, 40, 4, false};
  c.classifier_training = {1e-3, 32, 30, 8, true};
  return c;
}

std::string ExperimentConfig::to_json() const {
  return json{{"seed", seed},
              {"classifier_seeds", classifier_seeds},
              {"heights", heights},
              {"sizes", {{"train", sizes.train}, {"valid", sizes.valid}, {"test", sizes.test}}},
              {"workers", workers},
              {"frame_training", json::parse(frame_training.to_json())},
              {"classifier_training", json::parse(classifier_training.to_json())},
              {"convdeconv", json::parse(convdeconv.to_json())},
              {"convlstmdeconv", json::parse(convlstmdeconv.to_json())},
              {"stability", json::parse(stability.to_json())}}
      .dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  const char* what = "experiment config";
  const json j = parse_object(text, what,
                              {"seed", "classifier_seeds", "heights", "sizes", "workers",
                               "frame_training", "classifier_training", "convdeconv",
                               "convlstmdeconv", "stability"});
  if (!j.contains("seed")) fail(ErrorKind::invalid_argument, "experiment config: 'seed' is mandatory");
  std::uint64_t seed = 0;
  read_opt(j, "seed", seed, what);
  ExperimentConfig c = desk(seed);
  read_opt(j, "classifier_seeds", c.classifier_seeds, what);
  read_opt(j, "heights", c.heights, what);
  read_opt(j, "workers", c.workers, what);
  if (j.contains("sizes")) {
    const json s = parse_object(j.at("sizes").dump(), "experiment config sizes",
                                {"train", "valid", "test"});
    read_opt(s, "train", c.sizes.train, what);
    read_opt(s, "valid", c.sizes.valid, what);
    read_opt(s, "test", c.sizes.test, what);
  }
  if (j.contains("frame_training")) {
    c.frame_training = training_from_json(j.at("frame_training").dump(), c.frame_training);
  }
  if (j.contains("classifier_training")) {
    c.classifier_training =
        training_from_json(j.at("classifier_training").dump(), c.classifier_training);
  }
  if (j.contains("convdeconv")) c.convdeconv = ConvDeconvConfig::from_json(j.at("convdeconv").dump());
  if (j.contains("convlstmdeconv")) {
    c.convlstmdeconv = ConvLSTMDeconvConfig::from_json(j.at("convlstmdeconv").dump());
  }
  if (j.contains("stability")) c.stability = StabilityNetConfig::from_json(j.at("stability").dump());
  require(!c.heights.empty(), "experiment config: heights must not be empty");
  for (int h : c.heights) require(h >= 1, "experiment config: heights must be positive");
  require(c.workers >= 1, "experiment config: workers must be >= 1");
  return c;
}

// ---------------------------------------------------------------------------
// Frame predictor training and inference

TrainResult train_frame_predictor(const ConvDeconvConfig& model, const DatasetReader& data,
                                  const TrainingConfig& training, std::uint64_t seed,
                                  const Logger& log) {
  ConvDeconvConfig c = model;
  c.seed = seed;
  ConvDeconvNet<float> net(c);
  return fit_frame_predictor(net, "convdeconv", c.to_json(), data, training, seed, log,
                             convdeconv_batch);
}

TrainResult train_frame_predictor(const ConvLSTMDeconvConfig& model, const DatasetReader& data,
                                  const TrainingConfig& training, std::uint64_t seed,
                                  const Logger& log) {
  ConvLSTMDeconvConfig c = model;
  c.seed = seed;
  ConvLSTMDeconvNet<float> net(c);
  return fit_frame_predictor(net, "convlstmdeconv", c.to_json(), data, training, seed, log,
                             convlstm_batch);
}

TrainResult train_frame_predictor(FramePredictorKind kind, const std::string& model_json,
                                  const DatasetReader& data, const TrainingConfig& training,
                                  std::uint64_t seed, const Logger& log) {
  const std::string text = model_json.empty() ? "{}" : model_json;
  if (kind == FramePredictorKind::cd) {
    return train_frame_predictor(ConvDeconvConfig::from_json(text), data, training, seed, log);
  }
  return train_frame_predictor(ConvLSTMDeconvConfig::from_json(text), data, training, seed, log);
}

struct FramePredictor::Impl {
  FramePredictorKind kind;
  int height = 0;
  std::unique_ptr<ConvDeconvNet<float>> cd;
  std::unique_ptr<ConvLSTMDeconvNet<float>> cld;
};

FramePredictor::FramePredictor(const nn::Checkpoint& checkpoint) : impl_(std::make_unique<Impl>()) {
  const json meta = checkpoint_meta(checkpoint);
  const std::string model = meta_string(meta, "model");
  impl_->height = meta_value<int>(meta, "height");
  if (model == "convdeconv") {
    impl_->kind = FramePredictorKind::cd;
    impl_->cd = std::make_unique<ConvDeconvNet<float>>(
        ConvDeconvConfig::from_json(meta.at("config").dump()));
    nn::restore_checkpoint(checkpoint, impl_->cd->parameters());
  } else if (model == "convlstmdeconv") {
    impl_->kind = FramePredictorKind::cld;
    impl_->cld = std::make_unique<ConvLSTMDeconvNet<float>>(
        ConvLSTMDeconvConfig::from_json(meta.at("config").dump()));
    nn::restore_checkpoint(checkpoint, impl_->cld->parameters());
  } else {
    fail(ErrorKind::invalid_argument, "checkpoint holds a '" + model + "', not a frame predictor");
  }
}

FramePredictor::~FramePredictor() = default;
FramePredictor::FramePredictor(FramePredictor&&) noexcept = default;

FramePredictorKind FramePredictor::kind() const { return impl_->kind; }
int FramePredictor::trained_height() const { return impl_->height; }

Tensor<float> FramePredictor::predict_last(const Tensor<float>& first) {
  if (impl_->cd) return impl_->cd->forward(first, Mode::eval);
  return impl_->cld->rollout(first, static_cast<int>(kSubsequenceFrames.size())).back();
}

void materialize_predictions(const nn::Checkpoint& predictor, const DatasetReader& in,
                             const std::filesystem::path& out, std::span<const Split> splits,
                             const Logger& log) {
  FramePredictor model(predictor);
  DatasetManifest manifest = in.manifest();
  require(!manifest.predictions, "predict-frames: input dataset already carries predictions");
  manifest.predictions =
      PredictionInfo{to_string(model.kind()), model.trained_height(), nn::checkpoint_digest(predictor)};
  std::vector<Split> chosen;
  for (Split s : kSplits) {
    if (std::find(splits.begin(), splits.end(), s) != splits.end()) {
      chosen.push_back(s);
    } else if (s == Split::train) {
      manifest.sizes.train = 0;
    } else if (s == Split::valid) {
      manifest.sizes.valid = 0;
    } else {
      manifest.sizes.test = 0;
    }
  }
  DatasetWriter writer(out, manifest, true);
  for (Split s : chosen) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = in_order(in.size(s));
    for (std::span<const std::size_t> b : batches(order, 32)) {
      const Tensor<float> pred = model.predict_last(frame_batch(in, s, b, kFirstFrame));
      nn::check_finite(pred, "predicted last frame");
      for (std::size_t k = 0; k < b.size(); ++k) {
        writer.append_raw(s, in.labels(s, b[k]), in.clip_bytes(s, b[k]),
                          std::span<const float>(pred.data() + k * kImageValues, kImageValues));
      }
    }
    note(log, format("predict-frames %s h%d on h%d %s: %zu records, %.1fs", to_string(model.kind()),
                     model.trained_height(), manifest.n_blocks, to_string(s), order.size(),
                     seconds_since(t0)));
  }
  writer.finish();
}

// ---------------------------------------------------------------------------
// Classifiers

ClassifierBatch classifier_batch(ClassifierKind kind, const DatasetReader& data, Split split,
                                 std::span<const std::size_t> indices,
                                 std::vector<CounterRng>* rngs, const AugmentRanges& ranges) {
  check_inputs(kind, data);
  require(!rngs || rngs->size() == indices.size(), "classifier batch: one RNG per record");
  ClassifierBatch b;
  b.first = image_batch(indices.size());
  if (kind != ClassifierKind::s) b.last = image_batch(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    std::vector<float> first = contrast_normalize(data.frame(split, i, kFirstFrame));
    std::vector<float> last;
    if (kind == ClassifierKind::gt) last = contrast_normalize(data.frame(split, i, kLastFrame));
    if (kind == ClassifierKind::cd || kind == ClassifierKind::cld) last = data.prediction(split, i);
    if (rngs) {
      std::vector<std::span<float>> images{first};
      if (!last.empty()) images.emplace_back(last);
      augment(images, (*rngs)[k], ranges);
    }
    std::copy(first.begin(), first.end(), b.first.data() + k * kImageValues);
    if (!last.empty()) std::copy(last.begin(), last.end(), b.last.data() + k * kImageValues);
    b.labels.push_back(label_of(data, split, i));
  }
  return b;
}

EvalCell score_split(const DatasetReader& data, Split split, const LabelPredictor& predict,
                     int batch_size) {
  EvalCell cell;
  cell.test_height = data.manifest().n_blocks;
  const std::vector<std::size_t> order = in_order(data.size(split));
  for (std::span<const std::size_t> b : batches(order, batch_size)) {
    const std::vector<int> predicted = predict(b);
    require(predicted.size() == b.size(), "evaluate: predictor returned the wrong count");
    for (std::size_t k = 0; k < b.size(); ++k) {
      if (predicted[k] == label_of(data, split, b[k])) ++cell.correct;
    }
  }
  cell.samples = static_cast<std::int64_t>(order.size());
  return cell;
}

TrainResult train_classifier(ClassifierKind kind, const StabilityNetConfig& model,
                             const DatasetReader& data, const TrainingConfig& training,
                             std::uint64_t seed, const Logger& log, const AugmentRanges& ranges) {
  check_training(training, data, "train-stability");
  check_inputs(kind, data);
  StabilityNetConfig config = model;
  config.variant = kind == ClassifierKind::s ? StabilityVariant::single : StabilityVariant::double_frame;
  config.seed = seed;
  require(config.classes == 2, "train-stability: the stability head must be binary");
  StabilityNet<float> net(config);
  nn::ParameterList<float> params = net.parameters();
  nn::Adam<float> opt(params, {training.learning_rate});
  nn::EarlyStopper<float> stopper(params, training.patience,
                                  nn::EarlyStopper<float>::Goal::maximize);
  TrainingCurve curve;
  curve.metric = "valid_accuracy";
  const int height = data.manifest().n_blocks;
  const std::string name = std::to_string(height) + display_name(kind);

  const LabelPredictor eval_predict = [&](std::span<const std::size_t> idx) {
    const ClassifierBatch b = classifier_batch(kind, data, Split::valid, idx);
    return decide(net.logits(b.first, b.last, Mode::eval));
  };

  for (int epoch = 1; epoch <= training.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = shuffled(data.size(Split::train), seed, epoch);
    double sum = 0;
    std::size_t seen = 0, step = 0;
    for (std::span<const std::size_t> idx : batches(order, training.batch_size)) {
      ++step;
      std::vector<CounterRng> rngs;
      if (training.augment) {
        for (std::size_t i : idx) rngs.emplace_back(mix_key(seed, static_cast<std::uint64_t>(epoch)), kAugmentStream, i);
      }
      const ClassifierBatch b =
          classifier_batch(kind, data, Split::train, idx, training.augment ? &rngs : nullptr, ranges);
      params.zero_grad();
      const Tensor<float> logits = net.logits(b.first, b.last, Mode::train);
      const nn::Loss<float> loss = nn::cross_entropy_loss(logits, b.labels);
      if (!std::isfinite(loss.value)) {
        net.clear_tape();
        diverged(name.c_str(), epoch, step, "non-finite training loss");
      }
      net.backward(loss.grad);
      try {
        opt.step();
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::divergence) throw;
        diverged(name.c_str(), epoch, step, e.what());
      }
      sum += loss.value * static_cast<double>(idx.size());
      seen += idx.size();
    }
    const EvalCell v = score_split(data, Split::valid, eval_predict, kEvalBatch);
    curve.epochs.push_back({epoch, sum / static_cast<double>(seen), v.accuracy(), seconds_since(t0)});
    const bool stop = stopper.observe(v.accuracy());
    note(log, format("classifier %s seed %llu epoch %d: train ce %.4f, valid acc %.4f (best %.4f @%d), %.1fs",
                     name.c_str(), static_cast<unsigned long long>(seed), epoch,
                     curve.epochs.back().train_loss, v.accuracy(), stopper.best(),
                     stopper.best_epoch() + 1, curve.epochs.back().seconds));
    if (stop) break;
  }
  stopper.restore();
  curve.best_epoch = stopper.best_epoch() + 1;
  curve.best_metric = stopper.best();

  json meta{{"model", "stability"},
            {"kind", to_string(kind)},
            {"config", json::parse(config.to_json())},
            {"training", json::parse(training.to_json())},
            {"seed", seed},
            {"height", height},
            {"epochs", curve.epochs.size()},
            {"best_epoch", curve.best_epoch},
            {"best_valid_accuracy", curve.best_metric}};
  if (data.manifest().predictions) meta["predictions"] = data.manifest().predictions->checkpoint_digest;
  return {nn::make_checkpoint(params, meta.dump()), std::move(curve)};
}

LoadedClassifier load_classifier(const nn::Checkpoint& checkpoint) {
  const json meta = checkpoint_meta(checkpoint);
  const std::string model = meta_string(meta, "model");
  if (model != "stability") {
    fail(ErrorKind::invalid_argument, "checkpoint holds a '" + model + "', not a stability classifier");
  }
  LoadedClassifier out{parse_classifier_kind(meta_string(meta, "kind")), meta_value<int>(meta, "height"),
                       meta_value<std::uint64_t>(meta, "seed"), nullptr};
  out.net = std::make_unique<StabilityNet<float>>(
      StabilityNetConfig::from_json(meta.at("config").dump()));
  nn::restore_checkpoint(checkpoint, out.net->parameters());
  return out;
}

EvalCell evaluate(const nn::Checkpoint& classifier, const DatasetReader& data, Split split) {
  LoadedClassifier c = load_classifier(classifier);
  check_inputs(c.kind, data);
  EvalCell cell = score_split(
      data, split,
      [&](std::span<const std::size_t> idx) {
        const ClassifierBatch b = classifier_batch(c.kind, data, split, idx);
        return decide(c.net->logits(b.first, b.last, Mode::eval));
      },
      kEvalBatch);
  cell.kind = c.kind;
  cell.train_height = c.train_height;
  cell.seed = c.seed;
  cell.model = std::to_string(c.train_height) + display_name(c.kind);
  return cell;
}

std::string EvalCell::to_json() const {
  return json{{"model", model},
              {"kind", towerphys::to_string(kind)},
              {"train_height", train_height},
              {"test_height", test_height},
              {"seed", seed},
              {"correct", correct},
              {"samples", samples},
              {"accuracy", accuracy()}}
      .dump();
}

EvalCell EvalCell::from_json(const std::string& text) {
  const char* what = "eval cell";
  const json j = parse_object(text, what,
                              {"model", "kind", "train_height", "test_height", "seed", "correct",
                               "samples", "accuracy"});
  EvalCell c;
  std::string kind = "s";
  read_opt(j, "model", c.model, what);
  read_opt(j, "kind", kind, what);
  read_opt(j, "train_height", c.train_height, what);
  read_opt(j, "test_height", c.test_height, what);
  read_opt(j, "seed", c.seed, what);
  read_opt(j, "correct", c.correct, what);
  read_opt(j, "samples", c.samples, what);
  c.kind = parse_classifier_kind(kind);
  return c;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<ResultRow> ResultsTable::rows() const {
  std::map<std::tuple<int, int, int>, std::pair<ResultRow, double>> groups;
  for (const EvalCell& c : cells) {
    auto& [row, sum] = groups[{c.train_height, kind_order(c.kind), c.test_height}];
    row.model = c.model;
    row.train_height = c.train_height;
    row.test_height = c.test_height;
    ++row.seeds;
    sum += c.accuracy();
  }
  std::vector<ResultRow> out;
  for (auto& [key, value] : groups) {
    value.first.accuracy = value.second / value.first.seeds;
    out.push_back(value.first);
  }
  return out;
}

std::optional<double> ResultsTable::mean_accuracy(ClassifierKind kind, int train_height,
                                                  int test_height) const {
  double sum = 0;
  int n = 0;
  for (const EvalCell& c : cells) {
    if (c.kind == kind && c.train_height == train_height && c.test_height == test_height) {
      sum += c.accuracy();
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::string ResultsTable::to_csv() const {
  std::string out = "model,train_set,test_set,accuracy\n";
  for (const ResultRow& r : rows()) {
    out += format("%s,%d,%d,%.2f\n", r.model.c_str(), r.train_height, r.test_height,
                  100.0 * r.accuracy);
  }
  return out;
}

std::string ResultsTable::to_text() const {
  const std::vector<ResultRow> rs = rows();
  std::string out = "+-------+-----------+----------+----------+-------+\n"
                    "| Model | Train set | Test set | Accuracy | Seeds |\n"
                    "+-------+-----------+----------+----------+-------+\n";
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const ResultRow& r = rs[i];
    out += format("| %-5s | %9d | %8d | %6.2f %% | %5d |\n", r.model.c_str(), r.train_height,
                  r.test_height, 100.0 * r.accuracy, r.seeds);
    const bool group_end = i + 1 == rs.size() || rs[i + 1].train_height != r.train_height;
    if (group_end) out += "+-------+-----------+----------+----------+-------+\n";
  }
  return out;
}

std::string ResultsTable::to_svg() const {
  const std::vector<ResultRow> rs = rows();
  std::vector<std::string> models;
  std::vector<int> tests;
  for (const ResultRow& r : rs) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    if (std::find(tests.begin(), tests.end(), r.test_height) == tests.end()) tests.push_back(r.test_height);
  }
  std::sort(tests.begin(), tests.end());
  const char* palette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"};
  const double bar = 16, gap = 22, left = 60, top = 40, plot_h = 260;
  const double group_w = bar * static_cast<double>(std::max<std::size_t>(tests.size(), 1)) + gap;
  const double width = left + group_w * static_cast<double>(models.size()) + 130;
  const double height = top + plot_h + 60;
  auto y_of = [&](double pct) { return top + plot_h * (1.0 - pct / 100.0); };

  std::ostringstream s;
  s << format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
              "font-family=\"sans-serif\" font-size=\"11\">\n", width, height);
  s << format("<rect width=\"%.0f\" height=\"%.0f\" fill=\"white\"/>\n", width, height);
  s << format("<text x=\"%.0f\" y=\"20\" font-size=\"13\">Accuracy (%%) per model and test "
              "tower height</text>\n", left);
  for (int pct = 0; pct <= 100; pct += 20) {
    const double y = y_of(pct);
    s << format("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#dddddd\"/>\n",
                left, y, left + group_w * static_cast<double>(models.size()), y);
    s << format("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%d</text>\n", left - 6, y + 4, pct);
  }
  for (std::size_t g = 0; g < models.size(); ++g) {
    const double x0 = left + gap / 2 + group_w * static_cast<double>(g);
    for (const ResultRow& r : rs) {
      if (r.model != models[g]) continue;
      const auto t = static_cast<std::size_t>(
          std::find(tests.begin(), tests.end(), r.test_height) - tests.begin());
      const double pct = 100.0 * r.accuracy;
      s << format("<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"%s\">"
                  "<title>%s on %d: %.2f%%</title></rect>\n",
                  x0 + bar * static_cast<double>(t), y_of(pct), bar - 1, plot_h * pct / 100.0,
                  palette[t % 6], escape_xml(r.model).c_str(), r.test_height, pct);
    }
    s << format("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%s</text>\n",
                x0 + bar * static_cast<double>(tests.size()) / 2, top + plot_h + 18,
                escape_xml(models[g]).c_str());
  }
  const double chance = y_of(50);
  s << format("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#c00000\" "
              "stroke-dasharray=\"6,4\" stroke-width=\"1.5\"/>\n",
              left, chance, left + group_w * static_cast<double>(models.size()), chance);
  s << format("<text x=\"%.1f\" y=\"%.1f\" fill=\"#c00000\">chance</text>\n",
              left + group_w * static_cast<double>(models.size()) + 4, chance + 4);
  s << format("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", left,
              top, left, top + plot_h);
  s << format("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", left,
              top + plot_h, left + group_w * static_cast<double>(models.size()), top + plot_h);
  const double lx = left + group_w * static_cast<double>(models.size()) + 20;
  for (std::size_t t = 0; t < tests.size(); ++t) {
    const double ly = top + 10 + 18 * static_cast<double>(t);
    s << format("<rect x=\"%.1f\" y=\"%.1f\" width=\"12\" height=\"12\" fill=\"%s\"/>\n", lx, ly,
                palette[t % 6]);
    s << format("<text x=\"%.1f\" y=\"%.1f\">test %d</text>\n", lx + 16, ly + 10, tests[t]);
  }
  s << format("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">model (train height + kind)</text>\n",
              left + group_w * static_cast<double>(models.size()) / 2, top + plot_h + 40);
  s << "</svg>\n";
  return s.str();
}

void write_reports(const ResultsTable& table, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json cells = json::array();
  for (const EvalCell& c : table.cells) cells.push_back(json::parse(c.to_json()));
  io::write_text_atomic(dir / "results.csv", table.to_csv());
  io::write_text_atomic(dir / "results.txt", table.to_text());
  io::write_text_atomic(dir / "results.svg", table.to_svg());
  io::write_text_atomic(dir / "cells.json", cells.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Cached pipeline

std::filesystem::path cache_root(const std::filesystem::path& fallback) {
  const char* env = std::getenv("TOWERPHYS_CACHE");
  return env && *env ? std::filesystem::path(env) : fallback;
}

Pipeline::Pipeline(ExperimentConfig config, std::filesystem::path cache, Logger log)
    : config_(std::move(config)), cache_(std::move(cache)), log_(std::move(log)) {
  std::filesystem::create_directories(cache_);
}

Pipeline::Stage Pipeline::stage(const std::string& name, const std::string& key_json) {
  Stage s;
  s.digest = io::sha256_hex(std::to_string(kStageRevision) + key_json).substr(0, 24);
  s.dir = cache_ / name / s.digest;
  s.done = std::filesystem::exists(s.dir / "stage.json");
  if (!s.done) std::filesystem::create_directories(s.dir);
  return s;
}

void Pipeline::finish(const Stage& s, const std::string& key_json) {
  io::write_text_atomic(s.dir / "stage.json", json::parse(key_json).dump(2) + "\n");
  ++computed_;
}

namespace {
template <class Fn>
void run_stage(const std::string& label, Fn fn) {
  try {
    fn();
  } catch (const Error& e) {
    throw Error(e.kind(), "stage " + label + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::io, "stage " + label + ": " + e.what());
  }
}
}  // namespace

std::filesystem::path Pipeline::dataset(int height) {
  const GenerationOptions options{height, config_.sizes, config_.seed, config_.workers};
  const std::string key =
      json{{"stage", "data"}, {"manifest", json::parse(make_manifest(options).to_json())}}.dump();
  const Stage s = stage("data", key);
  const auto path = s.dir / "data.twr";
  if (!s.done) {
    run_stage("data/" + s.digest, [&] {
      note(log_, format("data h%d: generating %d/%d/%d clips", height, options.sizes.train,
                        options.sizes.valid, options.sizes.test));
      const auto t0 = std::chrono::steady_clock::now();
      generate_dataset_file(options, path);
      note(log_, format("data h%d: done in %.1fs", height, seconds_since(t0)));
      finish(s, key);
    });
  }
  digests_[path.string()] = s.digest;
  return path;
}

std::filesystem::path Pipeline::frame_predictor(FramePredictorKind kind, int height) {
  const auto data = dataset(height);
  const std::string model = kind == FramePredictorKind::cd ? config_.convdeconv.to_json()
                                                           : config_.convlstmdeconv.to_json();
  const std::string key = json{{"stage", "frames"},
                               {"kind", to_string(kind)},
                               {"data", digests_.at(data.string())},
                               {"model", json::parse(model)},
                               {"training", json::parse(config_.frame_training.to_json())},
                               {"seed", config_.seed}}
                              .dump();
  const Stage s = stage("frames", key);
  const auto path = s.dir / "model.ckpt";
  if (!s.done) {
    run_stage("frames/" + s.digest, [&] {
      DatasetReader reader(data);
      const TrainResult r =
          train_frame_predictor(kind, model, reader, config_.frame_training, config_.seed, log_);
      nn::save_checkpoint(r.checkpoint, path);
      io::write_text_atomic(s.dir / "curve.csv", r.curve.to_csv());
      finish(s, key);
    });
  }
  digests_[path.string()] = s.digest;
  return path;
}

std::filesystem::path Pipeline::predictions(FramePredictorKind kind, int predictor_height,
                                            int data_height) {
  const auto model = frame_predictor(kind, predictor_height);
  const auto data = dataset(data_height);
  std::vector<Split> splits;
  if (predictor_height == data_height) {
    splits.assign(kSplits.begin(), kSplits.end());
  } else {
    splits.push_back(Split::test);
  }
  json names = json::array();
  for (Split sp : splits) names.push_back(to_string(sp));
  const std::string key = json{{"stage", "predict"},
                               {"predictor", digests_.at(model.string())},
                               {"data", digests_.at(data.string())},
                               {"splits", names}}
                              .dump();
  const Stage s = stage("predict", key);
  const auto path = s.dir / "data.twr";
  if (!s.done) {
    run_stage("predict/" + s.digest, [&] {
      materialize_predictions(nn::load_checkpoint(model), DatasetReader(data), path, splits, log_);
      finish(s, key);
    });
  }
  digests_[path.string()] = s.digest;
  return path;
}

std::string Pipeline::data_input(ClassifierKind kind, int train_height, int data_height,
                                 std::filesystem::path& path) {
  if (kind == ClassifierKind::cd || kind == ClassifierKind::cld) {
    const auto fk = kind == ClassifierKind::cd ? FramePredictorKind::cd : FramePredictorKind::cld;
    path = predictions(fk, train_height, data_height);
  } else {
    path = dataset(data_height);
  }
  return digests_.at(path.string());
}

std::filesystem::path Pipeline::classifier(ClassifierKind kind, int height, std::uint64_t seed,
                                           bool augment) {
  std::filesystem::path data;
  const std::string data_digest = data_input(kind, height, height, data);
  TrainingConfig training = config_.classifier_training;
  training.augment = augment;
  const std::string key = json{{"stage", "classifier"},
                               {"kind", to_string(kind)},
                               {"data", data_digest},
                               {"model", json::parse(config_.stability.to_json())},
                               {"training", json::parse(training.to_json())},
                               {"seed", seed}}
                              .dump();
  const Stage s = stage("classifier", key);
  const auto path = s.dir / "model.ckpt";
  if (!s.done) {
    run_stage("classifier/" + s.digest, [&] {
      DatasetReader reader(data);
      const TrainResult r = train_classifier(kind, config_.stability, reader, training, seed, log_);
      nn::save_checkpoint(r.checkpoint, path);
      io::write_text_atomic(s.dir / "curve.csv", r.curve.to_csv());
      finish(s, key);
    });
  }
  digests_[path.string()] = s.digest;
  return path;
}

EvalCell Pipeline::cell(ClassifierKind kind, int train_height, int test_height, std::uint64_t seed,
                        bool augment) {
  const auto model = classifier(kind, train_height, seed, augment);
  std::filesystem::path data;
  const std::string data_digest = data_input(kind, train_height, test_height, data);
  const std::string key = json{{"stage", "eval"},
                               {"classifier", digests_.at(model.string())},
                               {"data", data_digest},
                               {"split", "test"}}
                              .dump();
  const Stage s = stage("eval", key);
  const auto path = s.dir / "cell.json";
  if (s.done) {
    const std::vector<std::uint8_t> bytes = io::read_file(path);
    return EvalCell::from_json(std::string(bytes.begin(), bytes.end()));
  }
  EvalCell result;
  run_stage("eval/" + s.digest, [&] {
    result = evaluate(nn::load_checkpoint(model), DatasetReader(data), Split::test);
    io::write_text_atomic(path, result.to_json() + "\n");
    note(log_, format("eval %s seed %llu on test-%d: %.2f%%", result.model.c_str(),
                      static_cast<unsigned long long>(seed), test_height, 100.0 * result.accuracy()));
    finish(s, key);
  });
  return result;
}

ResultsTable Pipeline::run_matrix() {
  ResultsTable table;
  for (int h : config_.heights) {
    for (ClassifierKind kind : {ClassifierKind::s, ClassifierKind::cd, ClassifierKind::cld}) {
      for (std::uint64_t seed : config_.seeds()) {
        for (int t : config_.heights) {
          table.cells.push_back(cell(kind, h, t, seed, config_.classifier_training.augment));
        }
      }
    }
  }
  return table;
}

}  // namespace towerphys
