#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace idam {

// Flat configuration shared by all commands. Loaded from a JSON document
// whose keys match the field names exactly; unknown keys are rejected.
// Command-line flags override individual keys after the file is read.
struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir = "out";

  // gen-data
  std::string protocol = "unseen-shapes";  // unseen-shapes | unseen-categories | noisy
  int count = 100;       // training pairs
  int test_count = 25;   // held-out pairs
  int points = 1024;     // surface samples per cloud
  int crop = 768;        // kept points per cloud, 0 disables cropping
  double rot_max_deg = 45.0;
  double trans_max = 0.5;
  double noise_sigma = 0.01;
  double noise_clip = 0.05;
  std::string manifest;  // optional shape manifest; built-in primitives otherwise

  // features
  std::string extractor = "fpfh";  // fpfh | stub
  double fpfh_normal_radius = 0.1;
  double fpfh_feature_radius = 0.2;
  int fpfh_bins = 11;

  // model + training
  int epochs = 40;
  double lr = 1e-4;
  int lr_drop_epoch = 30;
  double lr_drop_factor = 0.1;
  double weight_decay = 1e-3;
  int n_iter = 3;
  double match_radius = 0.1;
  double keep_ratio = 1.0 / 6.0;
  std::string checkpoint = "model.idam";
  std::string resume;    // checkpoint to continue from
  std::string loss_csv;  // defaults to <out_dir>/loss.csv

  // register + benchmark
  std::string pairs;     // pair-list file (one pair path per line)
  std::string methods = "idam,icp";
  int icp_max_iterations = 50;
  double icp_tolerance = 1e-6;
  double icp_trim = 0.0;
  std::string dump_scores;   // per-point score dump path for register
  std::string metrics_csv;   // defaults to <out_dir>/metrics.csv

  // Assigns one key from a JSON-encoded value ("5", "0.1", "fpfh").
  // Throws std::invalid_argument for unknown keys or wrong types.
  void set_from_string(const std::string& key, const std::string& value);

  // Full schema as a JSON object string with sorted keys.
  std::string to_json_string() const;

  static RunConfig from_json_file(const std::string& path);
};

// Synthetic pair generation under the chosen protocol. Writes per-pair
// files, train/test pair lists, and config.json under out_dir.
void cmd_gen_data(const RunConfig& cfg);

// Trains on the pair list, writes the checkpoint and a per-epoch loss CSV.
void cmd_train(const RunConfig& cfg);

// Registers one XYZ cloud pair with a trained checkpoint; prints the
// row-major rotation then translation (12 numbers, 9 significant digits).
void cmd_register(const RunConfig& cfg, const std::string& source_path,
                  const std::string& target_path);

// Evaluates the requested methods over a pair list; writes a metrics CSV
// and per-method transform files.
void cmd_benchmark(const RunConfig& cfg);

// Quick self-contained property checks; throws on the first failure.
void cmd_selftest(const RunConfig& cfg);

}  // namespace idam
