#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "towerphys/dataset.hpp"
#include "towerphys/error.hpp"
#include "towerphys/experiments.hpp"
#include "towerphys/io.hpp"
#include "towerphys/nn/checkpoint.hpp"

using namespace towerphys;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const fs::path dir =
      fs::temp_directory_path() / ("towerphys_exp_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

// Tiny height-3 dataset shared by the tests in this file.
const fs::path& tiny_data() {
  static const fs::path path = [] {
    const fs::path p = scratch_dir() / "tiny.twr";
    generate_dataset_file(GenerationOptions{3, {8, 4, 10}, 17, 1}, p);
    return p;
  }();
  return path;
}

ConvDeconvConfig tiny_cd() {
  ConvDeconvConfig c;
  c.encoder.widths = {4, 4};
  c.encoder.pools = {4, 4};
  c.fc_channels = 2;
  c.decoder = {8};
  return c;
}

StabilityNetConfig tiny_stability(StabilityVariant v) {
  StabilityNetConfig c;
  c.variant = v;
  c.stem_width = 4;
  c.stem_stride = 4;
  c.widths = {4, 6};
  c.blocks_per_stage = 1;
  return c;
}

TrainingConfig quick(int epochs, int batch = 4) {
  TrainingConfig t;
  t.batch_size = batch;
  t.max_epochs = epochs;
  t.patience = epochs;
  return t;
}

std::vector<int> stored_labels(const DatasetReader& data, Split s,
                               std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(data.labels(s, i).stable ? 0 : 1);
  return out;
}

}  // namespace

TEST_CASE("scoring stubs") {
  const DatasetReader data(tiny_data());
  SUBCASE("perfect predictor") {
    const EvalCell c = score_split(data, Split::test, [&](std::span<const std::size_t> idx) {
      return stored_labels(data, Split::test, idx);
    });
    CHECK(c.correct == 10);
    CHECK(c.samples == 10);
    CHECK(c.accuracy() == 1.0);
  }
  SUBCASE("constant predictors on a balanced split score exactly one half") {
    for (int label : {0, 1}) {
      const EvalCell c = score_split(data, Split::test, [&](std::span<const std::size_t> idx) {
        return std::vector<int>(idx.size(), label);
      });
      CHECK(c.accuracy() == 0.5);
    }
  }
  SUBCASE("batching does not change the count") {
    auto hashy = [](std::span<const std::size_t> idx) {
      std::vector<int> out;
      for (std::size_t i : idx) out.push_back(static_cast<int>(mix64(i) & 1));
      return out;
    };
    const auto a = score_split(data, Split::test, hashy, 1).correct;
    CHECK(score_split(data, Split::test, hashy, 3).correct == a);
    CHECK(score_split(data, Split::test, hashy, 64).correct == a);
  }
  SUBCASE("wrong-length predictions are rejected") {
    CHECK_THROWS_AS(score_split(data, Split::test,
                                [](std::span<const std::size_t>) { return std::vector<int>{0}; },
                                4),
                    Error);
  }
}

TEST_CASE("accuracy is invariant under test-set shuffling") {
  const DatasetReader data(tiny_data());
  const TrainResult r = train_classifier(ClassifierKind::gt,
                                         tiny_stability(StabilityVariant::double_frame), data,
                                         quick(1), 3);
  // Rewrite the file with the test split reversed.
  const fs::path shuffled = scratch_dir() / "reversed.twr";
  {
    DatasetWriter w(shuffled, data.manifest(), false);
    for (Split s : kSplits) {
      const std::size_t n = data.size(s);
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = s == Split::test ? n - 1 - k : k;
        w.append(s, data.record(s, i));
      }
    }
    w.finish();
  }
  const DatasetReader other(shuffled);
  const EvalCell a = evaluate(r.checkpoint, data);
  const EvalCell b = evaluate(r.checkpoint, other);
  CHECK(a == b);
  CHECK(a.model == "3GT");
  CHECK(a.samples == 10);
}

TEST_CASE("classifier batches") {
  const DatasetReader data(tiny_data());
  const std::vector<std::size_t> idx{0, 1, 2};
  const ClassifierBatch s = classifier_batch(ClassifierKind::s, data, Split::train, idx);
  CHECK(s.first.shape() == std::vector<int>{3, 3, 64, 64});
  CHECK(s.last.size() == 0);
  CHECK(s.labels == stored_labels(data, Split::train, idx));
  const ClassifierBatch g = classifier_batch(ClassifierKind::gt, data, Split::train, idx);
  const auto expect = contrast_normalize(data.frame(Split::train, 1, 38));
  CHECK(std::equal(expect.begin(), expect.end(), g.last.data() + kImageValues));
  CHECK_THROWS_AS(classifier_batch(ClassifierKind::cd, data, Split::train, idx), Error);
}

TEST_CASE("frame predictor training is deterministic and learns on 8 clips") {
  const DatasetReader data(tiny_data());
  TrainingConfig t = quick(40, 8);
  t.learning_rate = 3e-3;
  const TrainResult a = train_frame_predictor(tiny_cd(), data, t, 5);
  const TrainResult b = train_frame_predictor(tiny_cd(), data, t, 5);
  CHECK(nn::checkpoint_digest(a.checkpoint) == nn::checkpoint_digest(b.checkpoint));
  REQUIRE(a.curve.epochs.size() == 40);
  const double first = a.curve.epochs.front().train_loss;
  const double last = a.curve.epochs.back().train_loss;
  MESSAGE("train mse " << first << " -> " << last);
  CHECK(last * 3.0 < first);
  CHECK(a.curve.best_epoch >= 1);
  const TrainResult c = train_frame_predictor(tiny_cd(), data, quick(1, 8), 6);
  CHECK(nn::checkpoint_digest(c.checkpoint) != nn::checkpoint_digest(a.checkpoint));
}

TEST_CASE("divergence is reported with its location") {
  const DatasetReader data(tiny_data());
  TrainingConfig t = quick(3, 4);
  t.learning_rate = 1e30;
  try {
    train_frame_predictor(tiny_cd(), data, t, 1);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::divergence);
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("training preconditions") {
  const DatasetReader data(tiny_data());
  TrainingConfig t = quick(1);
  t.batch_size = 1;
  CHECK_THROWS_AS(train_frame_predictor(tiny_cd(), data, t, 1), Error);
  t = quick(1);
  t.learning_rate = 0.0;
  CHECK_THROWS_AS(train_classifier(ClassifierKind::s, tiny_stability(StabilityVariant::single),
                                   data, t, 1),
                  Error);
  // The kind decides the variant.
  const TrainResult r = train_classifier(ClassifierKind::s,
                                         tiny_stability(StabilityVariant::double_frame), data,
                                         quick(1), 1);
  CHECK(load_classifier(r.checkpoint).net->config().variant == StabilityVariant::single);
}

TEST_CASE("prediction materialization") {
  const DatasetReader data(tiny_data());
  const TrainResult p = train_frame_predictor(tiny_cd(), data, quick(1), 2);
  const fs::path out = scratch_dir() / "pred.twr";
  materialize_predictions(p.checkpoint, data, out);
  const DatasetReader pred(out);
  REQUIRE(pred.has_predictions());
  REQUIRE(pred.manifest().predictions.has_value());
  CHECK(pred.manifest().predictions->predictor_kind == "cd");
  CHECK(pred.manifest().predictions->predictor_height == 3);
  CHECK(pred.manifest().predictions->checkpoint_digest == nn::checkpoint_digest(p.checkpoint));
  for (Split s : kSplits) CHECK(pred.size(s) == data.size(s));
  CHECK(pred.clip_bytes(Split::test, 4).size() == data.clip_bytes(Split::test, 4).size());
  CHECK(std::equal(pred.clip_bytes(Split::test, 4).begin(), pred.clip_bytes(Split::test, 4).end(),
                   data.clip_bytes(Split::test, 4).begin()));

  FramePredictor fp(p.checkpoint);
  const ClassifierBatch in = classifier_batch(ClassifierKind::s, data, Split::valid,
                                              std::vector<std::size_t>{2});
  const nn::Tensor<float> y = fp.predict_last(in.first);
  const std::vector<float> stored = pred.prediction(Split::valid, 2);
  REQUIRE(stored.size() == y.size());
  // Batch size changes only the GEMM blocking, i.e. float reassociation.
  for (std::size_t i = 0; i < stored.size(); ++i) {
    REQUIRE(std::abs(stored[i] - y[i]) <= 1e-4f * (1.0f + std::abs(y[i])));
  }

  // Test-only materialization leaves the other splits empty.
  const fs::path test_only = scratch_dir() / "pred_test.twr";
  const std::array<Split, 1> only{Split::test};
  materialize_predictions(p.checkpoint, data, test_only, only);
  const DatasetReader t(test_only);
  CHECK(t.size(Split::train) == 0);
  CHECK(t.size(Split::test) == 10);

  // Inputs that already carry predictions are refused.
  CHECK_THROWS_AS(materialize_predictions(p.checkpoint, pred, scratch_dir() / "again.twr"), Error);
  // Classifier kinds must match the predictor kind.
  CHECK_THROWS_AS(train_classifier(ClassifierKind::cld,
                                   tiny_stability(StabilityVariant::double_frame), pred, quick(1), 1),
                  Error);
  const TrainResult c = train_classifier(ClassifierKind::cd,
                                         tiny_stability(StabilityVariant::double_frame), pred,
                                         quick(1), 1);
  CHECK(evaluate(c.checkpoint, pred).model == "3CD");
  CHECK_THROWS_AS(evaluate(c.checkpoint, data), Error);
}

TEST_CASE("classifier checkpoints reload to identical scores") {
  const DatasetReader data(tiny_data());
  const TrainResult r = train_classifier(ClassifierKind::s, tiny_stability(StabilityVariant::single),
                                         data, quick(2), 9);
  const fs::path path = scratch_dir() / "cls.ckpt";
  nn::save_checkpoint(r.checkpoint, path);
  const nn::Checkpoint back = nn::load_checkpoint(path);
  CHECK(evaluate(back, data) == evaluate(r.checkpoint, data));
  const LoadedClassifier lc = load_classifier(back);
  CHECK(lc.kind == ClassifierKind::s);
  CHECK(lc.train_height == 3);
  CHECK(lc.seed == 9);
  CHECK(r.curve.metric == "valid_accuracy");
  const std::string csv = r.curve.to_csv();
  CHECK(csv.rfind("epoch,train_loss,valid_accuracy,seconds\n", 0) == 0);
}

TEST_CASE("training config JSON is strict") {
  const TrainingConfig t = TrainingConfig::from_json(R"({"learning_rate":0.01,"patience":5})");
  CHECK(t.learning_rate == 0.01);
  CHECK(t.patience == 5);
  CHECK(t.batch_size == 32);
  CHECK(TrainingConfig::from_json(t.to_json()) == t);
  CHECK_THROWS_AS(TrainingConfig::from_json(R"({"learnig_rate":0.01})"), Error);
  CHECK_THROWS_AS(TrainingConfig::from_json("[1]"), Error);
  CHECK_THROWS_AS(TrainingConfig::from_json("{"), Error);
}

TEST_CASE("experiment config") {
  CHECK_THROWS_AS(ExperimentConfig::from_json("{}"), Error);  // seed is mandatory
  CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"seed":1,"bogus":2})"), Error);
  const ExperimentConfig c = ExperimentConfig::from_json(R"({"seed":4,"heights":[3,5]})");
  CHECK(c.seed == 4);
  CHECK(c.heights == std::vector<int>{3, 5});
  CHECK(c.seeds() == std::vector<std::uint64_t>{4});
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(ExperimentConfig::desk(1).frame_training.augment == false);
}

TEST_CASE("results table") {
  ResultsTable t;
  t.cells = {
      {"3S", ClassifierKind::s, 3, 3, 1, 90, 100},
      {"3S", ClassifierKind::s, 3, 3, 2, 91, 100},
      {"3CD", ClassifierKind::cd, 3, 5, 1, 2, 3},
      {"3S", ClassifierKind::s, 3, 5, 1, 60, 100},
      {"4S", ClassifierKind::s, 4, 3, 1, 1, 2},
  };
  const auto rows = t.rows();
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].model == "3S");
  CHECK(rows[0].test_height == 3);
  CHECK(rows[0].seeds == 2);
  CHECK(rows[0].accuracy == doctest::Approx(0.905));
  CHECK(rows[1].model == "3S");
  CHECK(rows[2].model == "3CD");
  CHECK(rows[3].model == "4S");
  CHECK(*t.mean_accuracy(ClassifierKind::s, 3, 3) == doctest::Approx(0.905));
  CHECK_FALSE(t.mean_accuracy(ClassifierKind::cld, 3, 3).has_value());
  CHECK(t.to_csv() ==
        "model,train_set,test_set,accuracy\n3S,3,3,90.50\n3S,3,5,60.00\n3CD,3,5,66.67\n"
        "4S,4,3,50.00\n");
  CHECK(t.to_text().find("| 3CD   |") != std::string::npos);
  const std::string svg = t.to_svg();
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);

  const EvalCell c = t.cells[2];
  CHECK(EvalCell::from_json(c.to_json()) == c);
}

TEST_CASE("pipeline runs, caches and resumes") {
  ExperimentConfig c = ExperimentConfig::desk(11);
  c.heights = {3, 4};
  c.sizes = {8, 4, 6};
  c.classifier_seeds = {1, 2};
  c.frame_training = quick(1, 4);
  c.frame_training.augment = false;
  c.classifier_training = quick(1, 4);
  c.convdeconv = tiny_cd();
  c.convlstmdeconv.encoder = tiny_cd().encoder;
  c.convlstmdeconv.hidden = 8;
  c.convlstmdeconv.decoder = {4};
  c.stability = tiny_stability(StabilityVariant::single);
  const fs::path cache = scratch_dir() / "cache";
  fs::remove_all(cache);

  Pipeline first(c, cache);
  const ResultsTable a = first.run_matrix();
  CHECK(a.cells.size() == 2 * 3 * 2 * 2);
  CHECK(first.stages_computed() > 0);
  for (const EvalCell& e : a.cells) CHECK(e.samples == 6);

  Pipeline second(c, cache);
  const ResultsTable b = second.run_matrix();
  CHECK(second.stages_computed() == 0);
  CHECK(b.to_csv() == a.to_csv());

  const fs::path reports = scratch_dir() / "reports";
  write_reports(b, reports);
  for (const char* f : {"results.csv", "results.txt", "results.svg", "cells.json"}) {
    CHECK(fs::exists(reports / f));
  }
  const auto bytes = io::read_file(reports / "results.csv");
  CHECK(std::string(bytes.begin(), bytes.end()) == a.to_csv());

  // A different seed is a different cache entry for every stage.
  c.seed = 12;
  Pipeline third(c, cache);
  third.dataset(3);
  CHECK(third.stages_computed() == 1);
}
