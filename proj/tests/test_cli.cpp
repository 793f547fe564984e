#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "idam/cli.hpp"
#include "idam/data.hpp"
#include "idam/geometry.hpp"
#include "idam/pipeline.hpp"
#include "test_util.hpp"

using namespace idam;
namespace fs = std::filesystem;

namespace {

// The commands narrate to stdout; keep the test log clean and capture the
// output for assertions.
struct CoutCapture {
  std::ostringstream ss;
  std::streambuf* old;
  CoutCapture() : old(std::cout.rdbuf(ss.rdbuf())) {}
  ~CoutCapture() { std::cout.rdbuf(old); }
  std::string str() const { return ss.str(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

RunConfig tiny_gen_config(const std::string& out_dir) {
  RunConfig cfg;
  cfg.out_dir = out_dir;
  cfg.count = 3;
  cfg.test_count = 2;
  cfg.points = 64;
  cfg.crop = 48;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("config keys are assigned from strings with type checking") {
  RunConfig cfg;
  cfg.set_from_string("epochs", "5");
  CHECK(cfg.epochs == 5);
  cfg.set_from_string("lr", "0.001");
  CHECK(cfg.lr == 0.001);
  cfg.set_from_string("extractor", "stub");  // bare string
  CHECK(cfg.extractor == "stub");
  cfg.set_from_string("methods", "\"icp\"");  // quoted JSON string
  CHECK(cfg.methods == "icp");
  CHECK_THROWS_AS(cfg.set_from_string("learning_rate", "0.1"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set_from_string("epochs", "fast"), std::invalid_argument);
}

TEST_CASE("config files round trip and reject unknown keys") {
  testutil::TempDir dir;
  RunConfig cfg;
  cfg.seed = 99;
  cfg.keep_ratio = 0.25;
  cfg.checkpoint = "m.idam";

  const std::string path = dir.file("cfg.json");
  {
    std::ofstream out(path);
    out << cfg.to_json_string() << "\n";
  }
  const RunConfig back = RunConfig::from_json_file(path);
  CHECK(back.to_json_string() == cfg.to_json_string());
  CHECK(back.seed == 99);
  CHECK(back.keep_ratio == 0.25);
  CHECK(back.checkpoint == "m.idam");

  const std::string unknown = dir.file("unknown.json");
  {
    std::ofstream out(unknown);
    out << "{\"epoch\": 3}\n";
  }
  CHECK_THROWS_AS(RunConfig::from_json_file(unknown), std::invalid_argument);

  const std::string broken = dir.file("broken.json");
  {
    std::ofstream out(broken);
    out << "{\"epochs\": \n";
  }
  CHECK_THROWS_AS(RunConfig::from_json_file(broken), std::runtime_error);

  const std::string array = dir.file("array.json");
  {
    std::ofstream out(array);
    out << "[1,2]\n";
  }
  CHECK_THROWS_AS(RunConfig::from_json_file(array), std::runtime_error);
  CHECK_THROWS_AS(RunConfig::from_json_file(dir.file("absent.json")), std::runtime_error);
}

TEST_CASE("gen-data is deterministic for a fixed seed") {
  testutil::TempDir dir;
  const RunConfig a = tiny_gen_config(dir.file("runA"));
  const RunConfig b = tiny_gen_config(dir.file("runB"));
  {
    CoutCapture mute;
    cmd_gen_data(a);
    cmd_gen_data(b);
  }
  CHECK(slurp(a.out_dir + "/train_pairs.txt") == slurp(b.out_dir + "/train_pairs.txt"));
  CHECK(slurp(a.out_dir + "/test_pairs.txt") == slurp(b.out_dir + "/test_pairs.txt"));
  for (const char* rel : {"train/pair_00000.txt", "train/pair_00002.txt", "test/pair_00001.txt"})
    CHECK(slurp(a.out_dir + "/" + rel) == slurp(b.out_dir + "/" + rel));
}

TEST_CASE("gen-data writes the requested splits with crop and protocol applied") {
  testutil::TempDir dir;
  RunConfig cfg = tiny_gen_config(dir.file("out"));
  {
    CoutCapture mute;
    cmd_gen_data(cfg);
  }

  int train_files = 0;
  for (const auto& e : fs::directory_iterator(cfg.out_dir + "/train")) {
    (void)e;
    ++train_files;
  }
  CHECK(train_files == 3);

  const RegistrationPair pair = read_pair(cfg.out_dir + "/train/pair_00001.txt");
  CHECK(pair.source.size() == 48);
  CHECK(pair.target.size() == 48);
  CHECK(pair.provenance.cropped);
  CHECK_FALSE(pair.provenance.noisy);
  CHECK(pair.provenance.shape_id.rfind("primitive:", 0) == 0);
  CHECK(fs::exists(cfg.out_dir + "/config.json"));

  // The noisy protocol perturbs both clouds and flags provenance.
  RunConfig noisy = tiny_gen_config(dir.file("noisy"));
  noisy.protocol = "noisy";
  {
    CoutCapture mute;
    cmd_gen_data(noisy);
  }
  const RegistrationPair np = read_pair(noisy.out_dir + "/test/pair_00000.txt");
  CHECK(np.provenance.noisy);
  double worst = 0.0;
  for (int i = 0; i < np.source.size(); ++i)
    worst = std::max(
        worst, (np.ground_truth.apply(np.source.points[i]) - np.target.points[i]).norm());
  CHECK(worst > 1e-4);

  // A zero-count split produces just the listing header.
  RunConfig empty_train = tiny_gen_config(dir.file("empty"));
  empty_train.count = 0;
  {
    CoutCapture mute;
    cmd_gen_data(empty_train);
  }
  const auto listing = lines_of(slurp(empty_train.out_dir + "/train_pairs.txt"));
  REQUIRE(listing.size() == 1);
  CHECK(listing[0].rfind("# seed=7", 0) == 0);
  CHECK_FALSE(fs::exists(empty_train.out_dir + "/train"));
}

TEST_CASE("the unseen-categories protocol separates train and test shapes") {
  testutil::TempDir dir;
  RunConfig cfg = tiny_gen_config(dir.file("cats"));
  cfg.protocol = "unseen-categories";
  cfg.count = 4;
  cfg.test_count = 4;
  {
    CoutCapture mute;
    cmd_gen_data(cfg);
  }
  for (int p = 0; p < 4; ++p) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s/train/pair_%05d.txt", cfg.out_dir.c_str(), p);
    const std::string train_shape = read_pair(name).provenance.shape_id;
    CHECK((train_shape == "primitive:sphere" || train_shape == "primitive:box"));
    std::snprintf(name, sizeof(name), "%s/test/pair_%05d.txt", cfg.out_dir.c_str(), p);
    const std::string test_shape = read_pair(name).provenance.shape_id;
    CHECK((test_shape == "primitive:cylinder" || test_shape == "primitive:torus"));
  }
}

TEST_CASE("gen-data honours a shape manifest") {
  testutil::TempDir dir;
  const std::string manifest = dir.file("shapes.txt");
  write_manifest(manifest, {{"primitive:torus", "train", "donut"},
                            {"primitive:sphere", "test", "ball"}});

  RunConfig cfg = tiny_gen_config(dir.file("manifested"));
  cfg.manifest = manifest;
  cfg.count = 2;
  cfg.test_count = 1;
  {
    CoutCapture mute;
    cmd_gen_data(cfg);
  }
  CHECK(read_pair(cfg.out_dir + "/train/pair_00000.txt").provenance.shape_id ==
        "primitive:torus");
  CHECK(read_pair(cfg.out_dir + "/test/pair_00000.txt").provenance.shape_id ==
        "primitive:sphere");
}

TEST_CASE("gen-data validates protocol and counts") {
  testutil::TempDir dir;
  RunConfig cfg = tiny_gen_config(dir.file("bad"));
  cfg.protocol = "holdout";
  CHECK_THROWS_AS(cmd_gen_data(cfg), std::invalid_argument);
  cfg.protocol = "unseen-shapes";
  cfg.count = -1;
  CHECK_THROWS_AS(cmd_gen_data(cfg), std::invalid_argument);
}

TEST_CASE("training runs end to end and a zero-epoch resume is a byte-exact no-op") {
  testutil::TempDir dir;

  // Small stub-feature dataset keeps the optimizer exercise cheap.
  RunConfig gen = tiny_gen_config(dir.file("data"));
  gen.count = 2;
  gen.test_count = 0;
  gen.points = 36;
  gen.crop = 0;
  {
    CoutCapture mute;
    cmd_gen_data(gen);
  }

  RunConfig tr;
  tr.out_dir = dir.file("run");
  tr.pairs = gen.out_dir + "/train_pairs.txt";
  tr.extractor = "stub";
  tr.epochs = 0;
  tr.checkpoint = dir.file("init.idam");
  {
    CoutCapture mute;
    cmd_train(tr);
  }
  const std::string init_bytes = slurp(tr.checkpoint);

  // Resuming for zero epochs must reproduce the checkpoint bit for bit.
  RunConfig resume = tr;
  resume.resume = tr.checkpoint;
  resume.checkpoint = dir.file("resumed.idam");
  {
    CoutCapture mute;
    cmd_train(resume);
  }
  CHECK(slurp(resume.checkpoint) == init_bytes);

  // One real epoch writes a loss row and a changed checkpoint.
  RunConfig one = tr;
  one.epochs = 1;
  one.checkpoint = dir.file("one.idam");
  one.loss_csv = dir.file("loss.csv");
  std::string narration;
  {
    CoutCapture cap;
    cmd_train(one);
    narration = cap.str();
  }
  CHECK(narration.find("epoch 1:") != std::string::npos);
  CHECK(slurp(one.checkpoint) != init_bytes);

  const auto csv = lines_of(slurp(one.loss_csv));
  REQUIRE(csv.size() == 3);
  CHECK(csv[0].rfind("# config:", 0) == 0);
  CHECK(csv[1] == "epoch,match_loss,neg_entropy_loss,hybrid_loss,wall_seconds");
  std::istringstream row(csv[2]);
  int epoch = 0;
  char comma = 0;
  double match = -1.0;
  row >> epoch >> comma >> match;
  CHECK(epoch == 1);
  CHECK(std::isfinite(match));
  CHECK(match > 0.0);

  RunConfig missing;
  CHECK_THROWS_AS(cmd_train(missing), std::invalid_argument);
}

TEST_CASE("register prints a rigid transform and dumps per-point scores") {
  testutil::TempDir dir;

  RunConfig gen = tiny_gen_config(dir.file("data"));
  gen.count = 1;
  gen.test_count = 0;
  gen.points = 48;
  gen.crop = 0;
  {
    CoutCapture mute;
    cmd_gen_data(gen);
  }
  const RegistrationPair pair = read_pair(gen.out_dir + "/train/pair_00000.txt");
  const std::string src_path = dir.file("src.xyz");
  const std::string tgt_path = dir.file("tgt.xyz");
  write_xyz(src_path, pair.source);
  write_xyz(tgt_path, pair.target);

  RunConfig cfg;
  cfg.out_dir = dir.file("run");
  cfg.pairs = gen.out_dir + "/train_pairs.txt";
  cfg.extractor = "stub";
  cfg.epochs = 0;
  cfg.checkpoint = dir.file("model.idam");
  {
    CoutCapture mute;
    cmd_train(cfg);
  }

  cfg.dump_scores = dir.file("scores.txt");
  std::string printed;
  {
    CoutCapture cap;
    cmd_register(cfg, src_path, tgt_path);
    printed = cap.str();
  }
  std::istringstream nums(printed);
  RigidTransform t;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) REQUIRE((nums >> t.rotation(i, j)));
  for (int c = 0; c < 3; ++c) REQUIRE((nums >> t.translation(c)));
  double extra;
  CHECK_FALSE((nums >> extra));  // exactly 12 numbers
  CHECK_NOTHROW(t.validate(1e-6));

  // Both clouds keep ceil(48/6) = 8 scored points.
  int s_rows = 0, t_rows = 0;
  for (const std::string& line : lines_of(slurp(cfg.dump_scores))) {
    if (line.rfind("S ", 0) == 0) {
      ++s_rows;
      std::istringstream ls(line.substr(2));
      int idx;
      double sig, val;
      REQUIRE((ls >> idx >> sig >> val));
      CHECK(idx >= 0);
      CHECK(idx < 48);
      CHECK(val >= 0.0);
      CHECK(val <= 1.0);
    } else if (line.rfind("T ", 0) == 0) {
      ++t_rows;
    }
  }
  CHECK(s_rows == 8);
  CHECK(t_rows == 8);
}

TEST_CASE("benchmark reports exact zeros for the oracle and writes transform files") {
  testutil::TempDir dir;

  RunConfig gen = tiny_gen_config(dir.file("data"));
  gen.count = 0;
  gen.test_count = 3;
  gen.points = 48;
  gen.crop = 0;
  gen.rot_max_deg = 10.0;
  gen.trans_max = 0.1;
  {
    CoutCapture mute;
    cmd_gen_data(gen);
  }

  RunConfig cfg;
  cfg.out_dir = dir.file("bench");
  cfg.pairs = gen.out_dir + "/test_pairs.txt";
  cfg.methods = "oracle,icp";
  {
    CoutCapture mute;
    cmd_benchmark(cfg);
  }

  const auto csv = lines_of(slurp(cfg.out_dir + "/metrics.csv"));
  REQUIRE(csv.size() == 4);
  CHECK(csv[0].rfind("# config:", 0) == 0);
  CHECK(csv[1] == "method,RMSE_R_deg,MAE_R_deg,RMSE_t,MAE_t,sec_per_frame");
  CHECK(csv[2].rfind("oracle,", 0) == 0);
  CHECK(csv[3].rfind("icp,", 0) == 0);

  // Oracle predictions equal the ground truth, so every error is exactly 0.
  {
    std::istringstream row(csv[2].substr(7));
    double v;
    char comma;
    for (int c = 0; c < 4; ++c) {
      REQUIRE((row >> v));
      CHECK(v == 0.0);
      row >> comma;
    }
  }

  // Transform files round trip the predictions at full precision.
  const auto oracle_lines = lines_of(slurp(cfg.out_dir + "/transforms_oracle.txt"));
  REQUIRE(oracle_lines.size() == 4);  // comment + 3 pairs
  for (int p = 0; p < 3; ++p) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s/test/pair_%05d.txt", gen.out_dir.c_str(), p);
    const RigidTransform gt = read_pair(name).ground_truth;
    std::istringstream row(oracle_lines[p + 1]);
    RigidTransform t;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) REQUIRE((row >> t.rotation(i, j)));
    for (int c = 0; c < 3; ++c) REQUIRE((row >> t.translation(c)));
    CHECK(t.rotation == gt.rotation);
    CHECK(t.translation == gt.translation);
  }
  CHECK(fs::exists(cfg.out_dir + "/transforms_icp.txt"));

  RunConfig bad = cfg;
  bad.methods = "oracle,ransac";
  CHECK_THROWS_AS(cmd_benchmark(bad), std::invalid_argument);
  bad = cfg;
  bad.methods = "";
  CHECK_THROWS_AS(cmd_benchmark(bad), std::invalid_argument);
  bad = cfg;
  bad.pairs = "";
  CHECK_THROWS_AS(cmd_benchmark(bad), std::invalid_argument);
}

TEST_CASE("benchmark runs the model ablation variants") {
  testutil::TempDir dir;

  RunConfig gen = tiny_gen_config(dir.file("data"));
  gen.count = 0;
  gen.test_count = 2;
  gen.points = 48;
  gen.crop = 0;
  gen.rot_max_deg = 10.0;
  gen.trans_max = 0.1;
  {
    CoutCapture mute;
    cmd_gen_data(gen);
  }

  RunConfig cfg;
  cfg.out_dir = dir.file("bench");
  cfg.pairs = gen.out_dir + "/test_pairs.txt";
  cfg.checkpoint = dir.file("model.idam");
  cfg.extractor = "stub";
  cfg.methods = "idam,idam1,uniform";
  save_model(cfg.checkpoint, IdamModel::init(IdamConfig{}, 5));
  {
    CoutCapture mute;
    cmd_benchmark(cfg);
  }

  const auto csv = lines_of(slurp(cfg.out_dir + "/metrics.csv"));
  REQUIRE(csv.size() == 5);
  CHECK(csv[2].rfind("idam,", 0) == 0);
  CHECK(csv[3].rfind("idam1,", 0) == 0);
  CHECK(csv[4].rfind("uniform,", 0) == 0);
  for (const char* m : {"idam", "idam1", "uniform"}) {
    const auto tf = lines_of(slurp(cfg.out_dir + "/transforms_" + std::string(m) + ".txt"));
    CHECK(tf.size() == 3);  // comment + 2 pairs
  }
}

TEST_CASE("selftest passes on a fresh tree") {
  testutil::TempDir dir;
  RunConfig cfg;
  cfg.out_dir = dir.file("self");
  CoutCapture mute;
  CHECK_NOTHROW(cmd_selftest(cfg));
  CHECK(mute.str().find("selftest passed") != std::string::npos);
}
