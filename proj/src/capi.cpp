#include "towerphys/towerphys.h"

#include <cstring>
#include <new>
#include <string>

#include "json_util.hpp"
#include "towerphys/dataset.hpp"
#include "towerphys/experiments.hpp"
#include "towerphys/io.hpp"
#include "towerphys/nn/checkpoint.hpp"

using namespace towerphys;
using nlohmann::json;

struct tp_dataset {
  DatasetReader reader;
  explicit tp_dataset(const char* path) : reader(path) {}
};

struct tp_checkpoint {
  nn::Checkpoint checkpoint;
};

namespace {

thread_local std::string last_error;

tp_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return TP_ERR_INVALID_ARGUMENT;
    case ErrorKind::shape_mismatch: return TP_ERR_SHAPE;
    case ErrorKind::numerical: return TP_ERR_NUMERICAL;
    case ErrorKind::divergence: return TP_ERR_DIVERGENCE;
    case ErrorKind::format: return TP_ERR_FORMAT;
    case ErrorKind::io: return TP_ERR_IO;
    case ErrorKind::quota_unreachable: return TP_ERR_QUOTA;
  }
  return TP_ERR_INTERNAL;
}

template <class Fn>
tp_status guarded(Fn fn) {
  try {
    fn();
    last_error.clear();
    return TP_OK;
  } catch (const Error& e) {
    last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return TP_ERR_INTERNAL;
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    return TP_ERR_IO;
  } catch (const std::exception& e) {
    last_error = e.what();
    return TP_ERR_INTERNAL;
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void need(const void* p, const char* what) {
  if (!p) fail(ErrorKind::invalid_argument, std::string(what) + " must not be NULL");
}

Logger logger(tp_log_fn log, void* user) {
  if (!log) return {};
  return [log, user](const std::string& m) { log(m.c_str(), user); };
}

struct StageConfig {
  TrainingConfig training;
  std::string model = "{}";
};

StageConfig parse_stage_config(const char* text) {
  StageConfig c;
  if (!text || !*text) return c;
  const char* what = "stage config";
  const json j = detail::parse_object(text, what, {"training", "model"});
  if (j.contains("training")) c.training = TrainingConfig::from_json(j.at("training").dump());
  if (j.contains("model")) {
    if (!j.at("model").is_object()) fail(ErrorKind::invalid_argument, "stage config: 'model' must be an object");
    c.model = j.at("model").dump();
  }
  return c;
}

}  // namespace

extern "C" {

const char* tp_version(void) { return "0.1.0"; }

const char* tp_status_name(tp_status status) {
  switch (status) {
    case TP_OK: return "ok";
    case TP_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case TP_ERR_IO: return "io";
    case TP_ERR_FORMAT: return "format";
    case TP_ERR_SHAPE: return "shape_mismatch";
    case TP_ERR_NUMERICAL: return "numerical";
    case TP_ERR_DIVERGENCE: return "divergence";
    case TP_ERR_QUOTA: return "quota_unreachable";
    case TP_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* tp_last_error(void) { return last_error.c_str(); }

void tp_free_string(char* s) { std::free(s); }

tp_status tp_file_digest(const char* path, char** out_hex) {
  return guarded([&] {
    need(path, "path");
    need(out_hex, "out_hex");
    if (!std::filesystem::exists(path)) fail(ErrorKind::io, std::string("file not found: ") + path);
    io::MappedFile file(path);
    *out_hex = copy_string(io::sha256_hex(file.bytes()));
  });
}

tp_status tp_generate_dataset(int height, int train, int valid, int test, uint64_t seed,
                              int workers, const char* out_path) {
  return guarded([&] {
    need(out_path, "out_path");
    require(workers >= 1, "workers must be >= 1");
    GenerationOptions o{height, {train, valid, test}, seed, workers};
    generate_dataset_file(o, out_path);
  });
}

tp_status tp_dataset_open(const char* path, tp_dataset** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    *out = new tp_dataset(path);
  });
}

void tp_dataset_close(tp_dataset* dataset) { delete dataset; }

tp_status tp_dataset_size(const tp_dataset* dataset, const char* split, size_t* out) {
  return guarded([&] {
    need(dataset, "dataset");
    need(split, "split");
    need(out, "out");
    *out = dataset->reader.size(parse_split(split));
  });
}

tp_status tp_dataset_manifest(const tp_dataset* dataset, char** out_json) {
  return guarded([&] {
    need(dataset, "dataset");
    need(out_json, "out_json");
    *out_json = copy_string(dataset->reader.manifest().to_json());
  });
}

tp_status tp_dataset_has_predictions(const tp_dataset* dataset, int* out) {
  return guarded([&] {
    need(dataset, "dataset");
    need(out, "out");
    *out = dataset->reader.has_predictions() ? 1 : 0;
  });
}

tp_status tp_dataset_labels(const tp_dataset* dataset, const char* split, size_t index,
                            int* out_stable, int* out_fallen_count) {
  return guarded([&] {
    need(dataset, "dataset");
    need(split, "split");
    const Record r = dataset->reader.labels(parse_split(split), index);
    if (out_stable) *out_stable = r.stable ? 1 : 0;
    if (out_fallen_count) *out_fallen_count = r.fallen_count;
  });
}

tp_status tp_dataset_frame(const tp_dataset* dataset, const char* split, size_t index, int frame,
                           uint8_t* out) {
  return guarded([&] {
    need(dataset, "dataset");
    need(split, "split");
    need(out, "out");
    const Frame f = dataset->reader.frame(parse_split(split), index, frame);
    std::memcpy(out, f.pixels.data(), f.pixels.size());
  });
}

tp_status tp_dataset_export_png(const tp_dataset* dataset, const char* split, size_t index,
                                const char* png_path) {
  return guarded([&] {
    need(dataset, "dataset");
    need(split, "split");
    need(png_path, "png_path");
    const Record r = dataset->reader.record(parse_split(split), index);
    write_png(png_path, r.clip.frames, 13);
  });
}

tp_status tp_checkpoint_open(const char* path, tp_checkpoint** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    *out = new tp_checkpoint{nn::load_checkpoint(path)};
  });
}

void tp_checkpoint_close(tp_checkpoint* checkpoint) { delete checkpoint; }

tp_status tp_checkpoint_metadata(const tp_checkpoint* checkpoint, char** out_json) {
  return guarded([&] {
    need(checkpoint, "checkpoint");
    need(out_json, "out_json");
    *out_json = copy_string(checkpoint->checkpoint.metadata);
  });
}

tp_status tp_checkpoint_digest(const tp_checkpoint* checkpoint, char** out_hex) {
  return guarded([&] {
    need(checkpoint, "checkpoint");
    need(out_hex, "out_hex");
    *out_hex = copy_string(nn::checkpoint_digest(checkpoint->checkpoint));
  });
}

tp_status tp_checkpoint_parameter_count(const tp_checkpoint* checkpoint, size_t* out) {
  return guarded([&] {
    need(checkpoint, "checkpoint");
    need(out, "out");
    size_t n = 0;
    for (const auto& t : checkpoint->checkpoint.tensors) {
      if (t.name.find("running_") == std::string::npos) {
        n += nn::Tensor<float>::count(t.shape);
      }
    }
    *out = n;
  });
}

tp_status tp_train_frame_predictor(const char* kind, const char* data_path,
                                   const char* config_json, uint64_t seed,
                                   const char* checkpoint_path, const char* curve_csv_path,
                                   tp_log_fn log, void* user) {
  return guarded([&] {
    need(kind, "kind");
    need(data_path, "data_path");
    need(checkpoint_path, "checkpoint_path");
    const FramePredictorKind k = parse_frame_predictor_kind(kind);
    const StageConfig c = parse_stage_config(config_json);
    DatasetReader data(data_path);
    const TrainResult r = train_frame_predictor(k, c.model, data, c.training, seed, logger(log, user));
    nn::save_checkpoint(r.checkpoint, checkpoint_path);
    if (curve_csv_path) io::write_text_atomic(curve_csv_path, r.curve.to_csv());
  });
}

tp_status tp_predict_frames(const char* checkpoint_path, const char* data_path,
                            const char* out_path, tp_log_fn log, void* user) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint_path");
    need(data_path, "data_path");
    need(out_path, "out_path");
    const nn::Checkpoint c = nn::load_checkpoint(checkpoint_path);
    DatasetReader data(data_path);
    materialize_predictions(c, data, out_path, kSplits, logger(log, user));
  });
}

tp_status tp_train_classifier(const char* kind, const char* data_path, const char* config_json,
                              uint64_t seed, const char* checkpoint_path,
                              const char* curve_csv_path, tp_log_fn log, void* user) {
  return guarded([&] {
    need(kind, "kind");
    need(data_path, "data_path");
    need(checkpoint_path, "checkpoint_path");
    const ClassifierKind k = parse_classifier_kind(kind);
    const StageConfig c = parse_stage_config(config_json);
    const StabilityNetConfig model = StabilityNetConfig::from_json(c.model);
    DatasetReader data(data_path);
    const TrainResult r = train_classifier(k, model, data, c.training, seed, logger(log, user));
    nn::save_checkpoint(r.checkpoint, checkpoint_path);
    if (curve_csv_path) io::write_text_atomic(curve_csv_path, r.curve.to_csv());
  });
}

tp_status tp_evaluate(const char* checkpoint_path, const char* data_path, const char* split,
                      char** out_cell_json) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint_path");
    need(data_path, "data_path");
    need(out_cell_json, "out_cell_json");
    const Split s = parse_split(split ? split : "test");
    const nn::Checkpoint c = nn::load_checkpoint(checkpoint_path);
    DatasetReader data(data_path);
    *out_cell_json = copy_string(evaluate(c, data, s).to_json());
  });
}

tp_status tp_run_matrix(const char* config_json, const char* out_dir, const char* cache_dir,
                        tp_log_fn log, void* user, char** out_table_text) {
  return guarded([&] {
    need(config_json, "config_json");
    need(out_dir, "out_dir");
    const ExperimentConfig config = ExperimentConfig::from_json(config_json);
    const std::filesystem::path out(out_dir);
    const std::filesystem::path cache =
        cache_dir && *cache_dir ? std::filesystem::path(cache_dir) : cache_root(out / "cache");
    Pipeline pipeline(config, cache, logger(log, user));
    const ResultsTable table = pipeline.run_matrix();
    write_reports(table, out);
    if (out_table_text) *out_table_text = copy_string(table.to_text());
  });
}

tp_status tp_resolve_experiment_config(const char* config_json, char** out_json) {
  return guarded([&] {
    need(config_json, "config_json");
    need(out_json, "out_json");
    *out_json = copy_string(ExperimentConfig::from_json(config_json).to_json());
  });
}

}  // extern "C"
