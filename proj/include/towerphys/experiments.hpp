#pragma once

// Training, prediction materialization, evaluation, and the cached
// train-height x model x test-height matrix.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "towerphys/dataset.hpp"
#include "towerphys/models.hpp"
#include "towerphys/nn/checkpoint.hpp"

namespace towerphys {

enum class FramePredictorKind { cd, cld };
// gt feeds the ground-truth last frame to the double-frame classifier
// (oracle ablation); the other three are the matrix models.
enum class ClassifierKind { s, cd, cld, gt };

const char* to_string(FramePredictorKind kind);
const char* to_string(ClassifierKind kind);
FramePredictorKind parse_frame_predictor_kind(const std::string& name);
ClassifierKind parse_classifier_kind(const std::string& name);
// "S", "CD", "CLD", "GT" as used in model names such as "3CD".
const char* display_name(ClassifierKind kind);

struct TrainingConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int max_epochs = 1000;
  int patience = 100;
  bool augment = true;  // classifiers only

  std::string to_json() const;
  // Strict: unknown keys are rejected; missing keys keep the defaults above.
  static TrainingConfig from_json(const std::string& text);
  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_metric = 0.0;
  double seconds = 0.0;
};

struct TrainingCurve {
  std::string metric;  // "valid_mse" or "valid_accuracy"
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based
  double best_metric = 0.0;
  std::string to_csv() const;
};

struct TrainResult {
  nn::Checkpoint checkpoint;
  TrainingCurve curve;
};

using Logger = std::function<void(const std::string&)>;

// Adam + early stopping on validation MSE. ConvDeconv maps frame 0 to the
// last frame; ConvLSTMDeconv is teacher-forced on the 5-frame subsequence.
// The returned checkpoint holds the best-validation parameters.
TrainResult train_frame_predictor(const ConvDeconvConfig& model, const DatasetReader& data,
                                  const TrainingConfig& training, std::uint64_t seed,
                                  const Logger& log = {});
TrainResult train_frame_predictor(const ConvLSTMDeconvConfig& model, const DatasetReader& data,
                                  const TrainingConfig& training, std::uint64_t seed,
                                  const Logger& log = {});
// Dispatches on kind using the matching desk configuration overridden by
// `model_json` (may be empty).
TrainResult train_frame_predictor(FramePredictorKind kind, const std::string& model_json,
                                  const DatasetReader& data, const TrainingConfig& training,
                                  std::uint64_t seed, const Logger& log = {});

// Last-frame prediction for a batch of first frames ([N,3,64,64], normalized).
class FramePredictor {
 public:
  explicit FramePredictor(const nn::Checkpoint& checkpoint);
  ~FramePredictor();
  FramePredictor(FramePredictor&&) noexcept;
  FramePredictorKind kind() const;
  int trained_height() const;
  nn::Tensor<float> predict_last(const nn::Tensor<float>& first);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Copies `in` to `out` with each record's predicted last frame attached.
// Only the listed splits are written; the others are recorded as empty.
void materialize_predictions(const nn::Checkpoint& predictor, const DatasetReader& in,
                             const std::filesystem::path& out,
                             std::span<const Split> splits = kSplits, const Logger& log = {});

// Cross-entropy training with Adam, pair-consistent augmentation (when
// enabled), and early stopping on validation accuracy.
TrainResult train_classifier(ClassifierKind kind, const StabilityNetConfig& model,
                             const DatasetReader& data, const TrainingConfig& training,
                             std::uint64_t seed, const Logger& log = {},
                             const AugmentRanges& ranges = {});

struct ClassifierBatch {
  nn::Tensor<float> first;
  nn::Tensor<float> last;  // empty for kind s
  std::vector<int> labels;  // 1 = falls
};

// Normalized inputs for the given records; `rngs`, when given, holds one
// augmentation stream per record.
ClassifierBatch classifier_batch(ClassifierKind kind, const DatasetReader& data, Split split,
                                 std::span<const std::size_t> indices,
                                 std::vector<CounterRng>* rngs = nullptr,
                                 const AugmentRanges& ranges = {});

struct EvalCell {
  std::string model;  // e.g. "3CD"
  ClassifierKind kind = ClassifierKind::s;
  int train_height = 0;
  int test_height = 0;
  std::uint64_t seed = 0;
  std::int64_t correct = 0;
  std::int64_t samples = 0;
  double accuracy() const {
    return samples ? static_cast<double>(correct) / static_cast<double>(samples) : 0.0;
  }
  std::string to_json() const;
  static EvalCell from_json(const std::string& text);
  friend bool operator==(const EvalCell&, const EvalCell&) = default;
};

// Predicted labels (1 = falls) for a batch of record indices.
using LabelPredictor = std::function<std::vector<int>(std::span<const std::size_t>)>;

// Counts agreements between `predict` and the stored labels over a split,
// batch by batch in index order.
EvalCell score_split(const DatasetReader& data, Split split, const LabelPredictor& predict,
                     int batch_size = 64);

// Evaluation-mode accuracy of a classifier checkpoint. The classifier's kind
// determines which frames are read; cd/cld need predictions from the
// matching predictor kind.
EvalCell evaluate(const nn::Checkpoint& classifier, const DatasetReader& data,
                  Split split = Split::test);

// Classifier rebuilt from a checkpoint.
struct LoadedClassifier {
  ClassifierKind kind;
  int train_height;
  std::uint64_t seed;
  std::unique_ptr<StabilityNet<float>> net;
};
LoadedClassifier load_classifier(const nn::Checkpoint& checkpoint);

struct ExperimentConfig {
  std::uint64_t seed = 0;  // mandatory in files
  std::vector<std::uint64_t> classifier_seeds;  // empty: {seed}
  std::vector<int> heights{3, 4, 5};
  SplitSizes sizes{2000, 400, 600};
  int workers = 1;
  TrainingConfig frame_training;
  TrainingConfig classifier_training;
  ConvDeconvConfig convdeconv = ConvDeconvConfig::desk();
  ConvLSTMDeconvConfig convlstmdeconv = ConvLSTMDeconvConfig::desk();
  StabilityNetConfig stability = StabilityNetConfig::desk(StabilityVariant::single);

  std::vector<std::uint64_t> seeds() const {
    return classifier_seeds.empty() ? std::vector<std::uint64_t>{seed} : classifier_seeds;
  }
  static ExperimentConfig desk(std::uint64_t seed);
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
};

struct ResultRow {
  std::string model;
  int train_height = 0;
  int test_height = 0;
  double accuracy = 0.0;  // mean over seeds, fraction
  int seeds = 0;
};

struct ResultsTable {
  std::vector<EvalCell> cells;  // one per (model, test height, seed)

  // Seed-averaged rows ordered by train height, kind (S, CD, CLD), test height.
  std::vector<ResultRow> rows() const;
  std::optional<double> mean_accuracy(ClassifierKind kind, int train_height,
                                      int test_height) const;
  // Columns model,train_set,test_set,accuracy; accuracy in percent with two
  // decimals.
  std::string to_csv() const;
  std::string to_text() const;
  // Grouped bars per model, one color per test height, 50% chance line.
  std::string to_svg() const;
};

// Cache root: $TOWERPHYS_CACHE if set, otherwise `fallback`.
std::filesystem::path cache_root(const std::filesystem::path& fallback);

// Runs and caches every stage of the protocol. Each stage lives in
// <cache>/<stage>/<digest>/ and is complete once its stage.json exists; the
// digest covers the stage's config and the digests of its inputs.
class Pipeline {
 public:
  Pipeline(ExperimentConfig config, std::filesystem::path cache, Logger log = {});

  std::filesystem::path dataset(int height);
  std::filesystem::path frame_predictor(FramePredictorKind kind, int height);
  // Predictions of the height-`predictor_height` model on height-`data_height`
  // data: all splits when the heights match, the test split otherwise.
  std::filesystem::path predictions(FramePredictorKind kind, int predictor_height,
                                    int data_height);
  std::filesystem::path classifier(ClassifierKind kind, int height, std::uint64_t seed,
                                   bool augment);
  EvalCell cell(ClassifierKind kind, int train_height, int test_height, std::uint64_t seed,
                bool augment);
  // All (height, kind in S/CD/CLD, test height, seed) cells.
  ResultsTable run_matrix();

  const ExperimentConfig& config() const { return config_; }
  // Stages computed (not served from cache) by this instance.
  int stages_computed() const { return computed_; }

 private:
  struct Stage {
    std::string digest;
    std::filesystem::path dir;
    bool done = false;
  };
  Stage stage(const std::string& name, const std::string& key_json);
  void finish(const Stage& s, const std::string& key_json);
  std::string data_input(ClassifierKind kind, int train_height, int data_height,
                         std::filesystem::path& path);

  ExperimentConfig config_;
  std::filesystem::path cache_;
  Logger log_;
  int computed_ = 0;
  std::map<std::string, std::string> digests_;  // artifact path -> stage digest
};

// Writes results.csv, results.txt, results.svg and cells.json into `dir`.
void write_reports(const ResultsTable& table, const std::filesystem::path& dir);

}  // namespace towerphys
