// Exercises the shared library through its C interface only.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "towerphys/towerphys.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("towerphys_capi_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

std::string take(char* s) {
  std::string out = s ? s : "";
  tp_free_string(s);
  return out;
}

const char* kTinyFrames =
    R"({"training":{"batch_size":4,"max_epochs":1,"patience":1},)"
    R"("model":{"encoder_widths":[4,4],"encoder_pools":[4,4],"fc_channels":2,"decoder_widths":[4]}})";
const char* kTinyClassifier =
    R"({"training":{"batch_size":4,"max_epochs":1,"patience":1},)"
    R"("model":{"stem_width":4,"stem_stride":4,"widths":[4],"blocks_per_stage":1}})";

const fs::path& dataset() {
  static const fs::path p = [] {
    const fs::path out = scratch("data.twr");
    REQUIRE(tp_generate_dataset(3, 8, 4, 6, 21, 1, out.c_str()) == TP_OK);
    return out;
  }();
  return p;
}

}  // namespace

TEST_CASE("version and status names") {
  CHECK(std::string(tp_version()).size() > 0);
  CHECK(std::string(tp_status_name(TP_OK)) == "ok");
  CHECK(std::string(tp_status_name(TP_ERR_DIVERGENCE)) == "divergence");
  CHECK(std::string(tp_status_name(static_cast<tp_status>(99))) == "unknown");
}

TEST_CASE("argument and file errors map to status codes") {
  tp_dataset* d = nullptr;
  CHECK(tp_dataset_open(nullptr, &d) == TP_ERR_INVALID_ARGUMENT);
  CHECK(std::string(tp_last_error()).find("NULL") != std::string::npos);
  CHECK(tp_dataset_open(scratch("missing.twr").c_str(), &d) == TP_ERR_IO);
  CHECK(d == nullptr);
  CHECK(tp_generate_dataset(3, 3, 2, 2, 1, 1, scratch("odd.twr").c_str()) ==
        TP_ERR_INVALID_ARGUMENT);
  CHECK_FALSE(fs::exists(scratch("odd.twr")));
  char* s = nullptr;
  CHECK(tp_resolve_experiment_config("{}", &s) == TP_ERR_INVALID_ARGUMENT);
  CHECK(tp_resolve_experiment_config(R"({"seed":1,"typo":2})", &s) == TP_ERR_INVALID_ARGUMENT);
  CHECK(tp_resolve_experiment_config(R"({"seed":3})", &s) == TP_OK);
  CHECK(json::parse(take(s)).at("seed") == 3);
  CHECK(tp_train_frame_predictor("xx", dataset().c_str(), nullptr, 1, scratch("x.ckpt").c_str(),
                                 nullptr, nullptr, nullptr) == TP_ERR_INVALID_ARGUMENT);
  CHECK(tp_train_frame_predictor("cd", dataset().c_str(), R"({"trainig":{}})", 1,
                                 scratch("x.ckpt").c_str(), nullptr, nullptr, nullptr) ==
        TP_ERR_INVALID_ARGUMENT);
}

TEST_CASE("dataset handle") {
  tp_dataset* d = nullptr;
  REQUIRE(tp_dataset_open(dataset().c_str(), &d) == TP_OK);
  size_t n = 0;
  CHECK(tp_dataset_size(d, "train", &n) == TP_OK);
  CHECK(n == 8);
  CHECK(tp_dataset_size(d, "bogus", &n) == TP_ERR_INVALID_ARGUMENT);
  char* m = nullptr;
  REQUIRE(tp_dataset_manifest(d, &m) == TP_OK);
  const json manifest = json::parse(take(m));
  CHECK(manifest.at("seed") == 21);
  int has = 1;
  CHECK(tp_dataset_has_predictions(d, &has) == TP_OK);
  CHECK(has == 0);
  int stable_count = 0;
  for (size_t i = 0; i < 6; ++i) {
    int stable = -1, fallen = -1;
    REQUIRE(tp_dataset_labels(d, "test", i, &stable, &fallen) == TP_OK);
    CHECK((stable == 1) == (fallen == 0));
    stable_count += stable;
  }
  CHECK(stable_count == 3);
  std::vector<uint8_t> frame(12288);
  CHECK(tp_dataset_frame(d, "valid", 1, 38, frame.data()) == TP_OK);
  CHECK(tp_dataset_frame(d, "valid", 1, 39, frame.data()) != TP_OK);
  CHECK(tp_dataset_labels(d, "valid", 99, nullptr, nullptr) != TP_OK);
  const fs::path png = scratch("clip.png");
  CHECK(tp_dataset_export_png(d, "test", 0, png.c_str()) == TP_OK);
  std::ifstream in(png, std::ios::binary);
  char sig[8] = {};
  in.read(sig, 8);
  CHECK(std::string(sig + 1, 3) == "PNG");
  tp_dataset_close(d);
}

TEST_CASE("generation is byte-identical across runs and worker counts") {
  const fs::path a = scratch("g1.twr"), b = scratch("g2.twr");
  REQUIRE(tp_generate_dataset(4, 6, 2, 2, 8, 1, a.c_str()) == TP_OK);
  REQUIRE(tp_generate_dataset(4, 6, 2, 2, 8, 3, b.c_str()) == TP_OK);
  char *da = nullptr, *db = nullptr;
  REQUIRE(tp_file_digest(a.c_str(), &da) == TP_OK);
  REQUIRE(tp_file_digest(b.c_str(), &db) == TP_OK);
  CHECK(take(da) == take(db));
}

TEST_CASE("stages chain through the C interface") {
  const fs::path fp = scratch("cd.ckpt"), curve = scratch("cd.csv"), pred = scratch("pred.twr");
  REQUIRE(tp_train_frame_predictor("cd", dataset().c_str(), kTinyFrames, 4, fp.c_str(),
                                   curve.c_str(), nullptr, nullptr) == TP_OK);
  tp_checkpoint* c = nullptr;
  REQUIRE(tp_checkpoint_open(fp.c_str(), &c) == TP_OK);
  char* meta = nullptr;
  REQUIRE(tp_checkpoint_metadata(c, &meta) == TP_OK);
  const json m = json::parse(take(meta));
  CHECK(m.at("model") == "convdeconv");
  CHECK(m.at("seed") == 4);
  size_t params = 0;
  CHECK(tp_checkpoint_parameter_count(c, &params) == TP_OK);
  CHECK(params > 0);
  char* digest = nullptr;
  CHECK(tp_checkpoint_digest(c, &digest) == TP_OK);
  CHECK(take(digest).size() == 64);
  tp_checkpoint_close(c);

  std::vector<std::string> lines;
  auto collect = [](const char* msg, void* user) {
    static_cast<std::vector<std::string>*>(user)->push_back(msg);
  };
  REQUIRE(tp_predict_frames(fp.c_str(), dataset().c_str(), pred.c_str(), collect, &lines) == TP_OK);
  CHECK_FALSE(lines.empty());

  const fs::path cls = scratch("cls.ckpt");
  CHECK(tp_train_classifier("cd", dataset().c_str(), kTinyClassifier, 2, cls.c_str(), nullptr,
                            nullptr, nullptr) == TP_ERR_INVALID_ARGUMENT);
  REQUIRE(tp_train_classifier("cd", pred.c_str(), kTinyClassifier, 2, cls.c_str(), nullptr,
                              nullptr, nullptr) == TP_OK);
  char* cell = nullptr;
  REQUIRE(tp_evaluate(cls.c_str(), pred.c_str(), "test", &cell) == TP_OK);
  const json e = json::parse(take(cell));
  CHECK(e.at("model") == "3CD");
  CHECK(e.at("samples") == 6);
  // Frame predictors are not classifiers.
  CHECK(tp_evaluate(fp.c_str(), pred.c_str(), "test", &cell) != TP_OK);
}

TEST_CASE("corrupt checkpoints and datasets are format errors") {
  const fs::path fp = scratch("c2.ckpt");
  REQUIRE(tp_train_frame_predictor("cd", dataset().c_str(), kTinyFrames, 5, fp.c_str(), nullptr,
                                   nullptr, nullptr) == TP_OK);
  for (const fs::path& src : {fp, dataset()}) {
    std::ifstream in(src, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes[bytes.size() / 3] ^= 1;
    const fs::path bad = scratch("bad_" + src.filename().string());
    std::ofstream(bad, std::ios::binary) << bytes;
    tp_checkpoint* c = nullptr;
    tp_dataset* d = nullptr;
    const tp_status s = src == fp ? tp_checkpoint_open(bad.c_str(), &c)
                                  : tp_dataset_open(bad.c_str(), &d);
    CHECK(s == TP_ERR_FORMAT);
    CHECK(c == nullptr);
    CHECK(d == nullptr);
  }
}

TEST_CASE("divergence has its own status") {
  const char* cfg = R"({"training":{"learning_rate":1e30,"batch_size":4,"max_epochs":3,"patience":3},)"
                    R"("model":{"encoder_widths":[4,4],"encoder_pools":[4,4],"fc_channels":2,"decoder_widths":[4]}})";
  const fs::path out = scratch("div.ckpt");
  CHECK(tp_train_frame_predictor("cd", dataset().c_str(), cfg, 1, out.c_str(), nullptr, nullptr,
                                 nullptr) == TP_ERR_DIVERGENCE);
  CHECK_FALSE(fs::exists(out));
}
