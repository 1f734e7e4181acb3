// Command-line front end. Talks to the library only through the C API.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "towerphys/towerphys.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

// Carries a library failure out to main().
struct Failure {
  tp_status status;
  std::string message;
};

int exit_code(tp_status s) {
  switch (s) {
    case TP_OK: return kExitOk;
    case TP_ERR_INVALID_ARGUMENT:
    case TP_ERR_IO: return kExitUsage;
    case TP_ERR_DIVERGENCE: return kExitDivergence;
    default: return kExitData;
  }
}

void check(tp_status s) {
  if (s != TP_OK) throw Failure{s, tp_last_error()};
}

void usage_error(const std::string& message) { throw Failure{TP_ERR_INVALID_ARGUMENT, message}; }

std::string take(char* s) {
  std::string out = s ? s : "";
  tp_free_string(s);
  return out;
}

void log_line(const char* message, void*) { std::cerr << message << std::endl; }

std::string read_text(const std::string& path) {
  if (!fs::exists(path)) throw Failure{TP_ERR_IO, "file not found: " + path};
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw Failure{TP_ERR_IO, std::string(what) + " not found: " + path};
}

std::string digest(const fs::path& p) {
  char* hex = nullptr;
  check(tp_file_digest(p.c_str(), &hex));
  return take(hex);
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out.flush()) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Failure{TP_ERR_IO, "cannot write " + path.string()};
    }
  }
  fs::rename(tmp, path);
}

// Artifacts are produced in a private staging directory and moved into the
// output directory only once the command has succeeded.
class Staging {
 public:
  explicit Staging(fs::path out) : out_(std::move(out)) {
    stage_ = out_.string() + ".partial-" + std::to_string(::getpid());
    fs::create_directories(stage_);
  }
  ~Staging() {
    std::error_code ec;
    fs::remove_all(stage_, ec);
  }
  fs::path path(const std::string& name) const { return stage_ / name; }
  void commit() {
    fs::create_directories(out_);
    for (const auto& entry : fs::directory_iterator(stage_)) {
      fs::rename(entry.path(), out_ / entry.path().filename());
    }
  }

 private:
  fs::path out_;
  fs::path stage_;
};

struct Run {
  std::string command;
  std::vector<std::string> argv;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  json manifest(const json& config, const json& seed, const json& inputs,
                const std::vector<fs::path>& artifacts) const {
    json digests = json::object();
    for (const fs::path& a : artifacts) digests[a.filename().string()] = digest(a);
    return json{{"command", command},
                {"argv", argv},
                {"config", config},
                {"seed", seed},
                {"inputs", inputs},
                {"artifacts", digests},
                {"tool_version", tp_version()},
                {"duration_seconds",
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
  }
};

json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Failure{TP_ERR_INVALID_ARGUMENT, what + ": " + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tower stability: data generation, frame prediction, classification"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(tp_version()));
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");

  Run run;
  for (int i = 0; i < argc; ++i) run.argv.emplace_back(argv[i]);

  // gen-data
  int height = 0, n_train = 0, n_valid = 0, n_test = 0, workers = 1;
  std::uint64_t seed = 0;
  std::string out, data, config, kind, ckpt, split = "test", cache;
  int index = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a balanced dataset for one tower height");
  gen->add_option("--height", height, "Blocks per tower")->required();
  gen->add_option("--train", n_train, "Training clips (even)")->required();
  gen->add_option("--valid", n_valid, "Validation clips (even)")->required();
  gen->add_option("--test", n_test, "Test clips (even)")->required();
  gen->add_option("--seed", seed, "Generation seed")->required();
  gen->add_option("--workers", workers, "Simulation threads (output does not depend on it)");
  gen->add_option("--out", out, "Output directory")->required();

  auto* train_frames = app.add_subcommand("train-frames", "Train a ConvDeconv or ConvLSTMDeconv frame predictor");
  train_frames->add_option("--kind", kind, "cd or cld")->required()->check(CLI::IsMember({"cd", "cld"}));
  train_frames->add_option("--data", data, "Dataset file")->required();
  train_frames->add_option("--config", config, "Stage config (JSON)");
  train_frames->add_option("--seed", seed, "Initialization and shuffling seed")->required();
  train_frames->add_option("--out", out, "Output directory")->required();

  auto* predict = app.add_subcommand("predict-frames", "Attach predicted last frames to a dataset");
  predict->add_option("--ckpt", ckpt, "Frame predictor checkpoint")->required();
  predict->add_option("--data", data, "Dataset file")->required();
  predict->add_option("--out", out, "Output dataset file")->required();
  predict->add_option("--seed", seed, "Recorded in the run manifest (inference is deterministic)");

  auto* train_stab = app.add_subcommand("train-stability", "Train a stability classifier");
  train_stab->add_option("--kind", kind, "s, cd, cld, or gt (ground-truth last frame)")
      ->required()
      ->check(CLI::IsMember({"s", "cd", "cld", "gt"}));
  train_stab->add_option("--data", data, "Dataset file (with predictions for cd/cld)")->required();
  train_stab->add_option("--config", config, "Stage config (JSON)");
  train_stab->add_option("--seed", seed, "Initialization, shuffling and augmentation seed")->required();
  train_stab->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Accuracy of a classifier on one split");
  eval->add_option("--ckpt", ckpt, "Classifier checkpoint")->required();
  eval->add_option("--data", data, "Dataset file")->required();
  eval->add_option("--split", split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  eval->add_option("--seed", seed, "Accepted for uniformity (evaluation is deterministic)");

  std::uint64_t seed_override = 0;
  auto* matrix = app.add_subcommand("matrix", "Run or resume the full train-height x model x test-height matrix");
  matrix->add_option("--config", config, "Experiment config (JSON, 'seed' mandatory)")->required();
  matrix->add_option("--out", out, "Report directory")->required();
  auto* matrix_seed = matrix->add_option("--seed", seed_override, "Override the config seed");
  matrix->add_option("--cache", cache, "Stage cache (default: $TOWERPHYS_CACHE or OUT/cache)");

  auto* inspect = app.add_subcommand("inspect", "Export the frames of one record as a PNG grid");
  inspect->add_option("--data", data, "Dataset file")->required();
  inspect->add_option("--index", index, "Record index")->required();
  inspect->add_option("--split", split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  inspect->add_option("--out", out, "PNG path")->required();
  inspect->add_option("--seed", seed, "Accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  tp_log_fn log = quiet ? nullptr : log_line;
  try {
    if (gen->parsed()) {
      run.command = "gen-data";
      Staging stage(out);
      const fs::path file = stage.path("data.twr");
      check(tp_generate_dataset(height, n_train, n_valid, n_test, seed, workers, file.c_str()));
      const json cfg{{"height", height},
                     {"sizes", {{"train", n_train}, {"valid", n_valid}, {"test", n_test}}},
                     {"workers", workers}};
      write_atomic(stage.path("manifest.json"), run.manifest(cfg, seed, json::object(), {file}).dump(2) + "\n");
      stage.commit();
      std::cout << (fs::path(out) / "data.twr").string() << "\n";
    } else if (train_frames->parsed() || train_stab->parsed()) {
      const bool frames = train_frames->parsed();
      run.command = frames ? "train-frames" : "train-stability";
      require_file(data, "dataset");
      const std::string text = config.empty() ? "" : read_text(config);
      Staging stage(out);
      const fs::path model = stage.path("model.ckpt"), curve = stage.path("curve.csv");
      if (frames) {
        check(tp_train_frame_predictor(kind.c_str(), data.c_str(), text.c_str(), seed, model.c_str(),
                                       curve.c_str(), log, nullptr));
      } else {
        check(tp_train_classifier(kind.c_str(), data.c_str(), text.c_str(), seed, model.c_str(),
                                  curve.c_str(), log, nullptr));
      }
      tp_checkpoint* handle = nullptr;
      check(tp_checkpoint_open(model.c_str(), &handle));
      char* meta = nullptr;
      const tp_status s = tp_checkpoint_metadata(handle, &meta);
      tp_checkpoint_close(handle);
      check(s);
      const json cfg{{"kind", kind},
                     {"stage_config", text.empty() ? json::object() : parse_json_text(text, config)},
                     {"checkpoint", parse_json_text(take(meta), "checkpoint metadata")}};
      write_atomic(stage.path("manifest.json"),
                   run.manifest(cfg, seed, {{"data", data}}, {model, curve}).dump(2) + "\n");
      stage.commit();
      std::cout << (fs::path(out) / "model.ckpt").string() << "\n";
    } else if (predict->parsed()) {
      run.command = "predict-frames";
      require_file(ckpt, "checkpoint");
      require_file(data, "dataset");
      const fs::path target(out);
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      check(tp_predict_frames(ckpt.c_str(), data.c_str(), out.c_str(), log, nullptr));
      write_atomic(out + ".manifest.json",
                   run.manifest(json::object(), seed, {{"ckpt", ckpt}, {"data", data}}, {target}).dump(2) + "\n");
      std::cout << out << "\n";
    } else if (eval->parsed()) {
      run.command = "eval";
      require_file(ckpt, "checkpoint");
      require_file(data, "dataset");
      char* cell = nullptr;
      check(tp_evaluate(ckpt.c_str(), data.c_str(), split.c_str(), &cell));
      json j = parse_json_text(take(cell), "eval cell");
      j["split"] = split;
      std::cout << j.dump(2) << "\n";
    } else if (matrix->parsed()) {
      run.command = "matrix";
      json cfg = parse_json_text(read_text(config), config);
      if (*matrix_seed) {
        if (!cfg.is_object()) usage_error("experiment config: expected an object");
        cfg["seed"] = seed_override;
      }
      char* resolved = nullptr;
      check(tp_resolve_experiment_config(cfg.dump().c_str(), &resolved));
      const json full = parse_json_text(take(resolved), "resolved config");
      char* table = nullptr;
      check(tp_run_matrix(cfg.dump().c_str(), out.c_str(), cache.empty() ? nullptr : cache.c_str(), log,
                          nullptr, &table));
      std::cout << take(table);
      const fs::path dir(out);
      std::vector<fs::path> artifacts{dir / "results.csv", dir / "results.txt", dir / "results.svg",
                                      dir / "cells.json"};
      write_atomic(dir / "manifest.json",
                   run.manifest(full, full.at("seed"), {{"config", config}}, artifacts).dump(2) + "\n");
    } else if (inspect->parsed()) {
      run.command = "inspect";
      require_file(data, "dataset");
      tp_dataset* ds = nullptr;
      check(tp_dataset_open(data.c_str(), &ds));
      const tp_status s = tp_dataset_export_png(ds, split.c_str(), static_cast<size_t>(index), out.c_str());
      int stable = 0, fallen = 0;
      const tp_status s2 = s == TP_OK ? tp_dataset_labels(ds, split.c_str(), static_cast<size_t>(index), &stable, &fallen) : s;
      tp_dataset_close(ds);
      check(s);
      check(s2);
      std::cout << json{{"png", out}, {"split", split}, {"index", index}, {"stable", stable == 1},
                        {"fallen_count", fallen}}
                       .dump()
                << "\n";
    }
  } catch (const Failure& f) {
    std::cerr << "error (" << tp_status_name(f.status) << "): " << f.message << "\n";
    return exit_code(f.status);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
