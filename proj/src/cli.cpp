#include "idam/cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <stdexcept>

#include "json.hpp"

#include "idam/data.hpp"
#include "idam/features.hpp"
#include "idam/icp.hpp"
#include "idam/kdtree.hpp"
#include "idam/pipeline.hpp"
#include "idam/procrustes.hpp"
#include "idam/rng.hpp"

namespace idam {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[48];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string fmt_transform(const RigidTransform& t, const char* spec) {
  std::string out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      if (i || j) out += ' ';
      out += fmt(t.rotation(i, j), spec);
    }
  for (int c = 0; c < 3; ++c) {
    out += ' ';
    out += fmt(t.translation(c), spec);
  }
  return out;
}

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  return out;
}

void assign_key(RunConfig& cfg, const std::string& key, const json& v) {
  try {
    if (key == "seed") cfg.seed = v.get<uint64_t>();
    else if (key == "out_dir") cfg.out_dir = v.get<std::string>();
    else if (key == "protocol") cfg.protocol = v.get<std::string>();
    else if (key == "count") cfg.count = v.get<int>();
    else if (key == "test_count") cfg.test_count = v.get<int>();
    else if (key == "points") cfg.points = v.get<int>();
    else if (key == "crop") cfg.crop = v.get<int>();
    else if (key == "rot_max_deg") cfg.rot_max_deg = v.get<double>();
    else if (key == "trans_max") cfg.trans_max = v.get<double>();
    else if (key == "noise_sigma") cfg.noise_sigma = v.get<double>();
    else if (key == "noise_clip") cfg.noise_clip = v.get<double>();
    else if (key == "manifest") cfg.manifest = v.get<std::string>();
    else if (key == "extractor") cfg.extractor = v.get<std::string>();
    else if (key == "fpfh_normal_radius") cfg.fpfh_normal_radius = v.get<double>();
    else if (key == "fpfh_feature_radius") cfg.fpfh_feature_radius = v.get<double>();
    else if (key == "fpfh_bins") cfg.fpfh_bins = v.get<int>();
    else if (key == "epochs") cfg.epochs = v.get<int>();
    else if (key == "lr") cfg.lr = v.get<double>();
    else if (key == "lr_drop_epoch") cfg.lr_drop_epoch = v.get<int>();
    else if (key == "lr_drop_factor") cfg.lr_drop_factor = v.get<double>();
    else if (key == "weight_decay") cfg.weight_decay = v.get<double>();
    else if (key == "n_iter") cfg.n_iter = v.get<int>();
    else if (key == "match_radius") cfg.match_radius = v.get<double>();
    else if (key == "keep_ratio") cfg.keep_ratio = v.get<double>();
    else if (key == "checkpoint") cfg.checkpoint = v.get<std::string>();
    else if (key == "resume") cfg.resume = v.get<std::string>();
    else if (key == "loss_csv") cfg.loss_csv = v.get<std::string>();
    else if (key == "pairs") cfg.pairs = v.get<std::string>();
    else if (key == "methods") cfg.methods = v.get<std::string>();
    else if (key == "icp_max_iterations") cfg.icp_max_iterations = v.get<int>();
    else if (key == "icp_tolerance") cfg.icp_tolerance = v.get<double>();
    else if (key == "icp_trim") cfg.icp_trim = v.get<double>();
    else if (key == "dump_scores") cfg.dump_scores = v.get<std::string>();
    else if (key == "metrics_csv") cfg.metrics_csv = v.get<std::string>();
    else throw std::invalid_argument("unknown config key '" + key + "'");
  } catch (const json::exception& e) {
    throw std::invalid_argument("config key '" + key + "': " + e.what());
  }
}

json config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["protocol"] = c.protocol;
  j["count"] = c.count;
  j["test_count"] = c.test_count;
  j["points"] = c.points;
  j["crop"] = c.crop;
  j["rot_max_deg"] = c.rot_max_deg;
  j["trans_max"] = c.trans_max;
  j["noise_sigma"] = c.noise_sigma;
  j["noise_clip"] = c.noise_clip;
  j["manifest"] = c.manifest;
  j["extractor"] = c.extractor;
  j["fpfh_normal_radius"] = c.fpfh_normal_radius;
  j["fpfh_feature_radius"] = c.fpfh_feature_radius;
  j["fpfh_bins"] = c.fpfh_bins;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["lr_drop_epoch"] = c.lr_drop_epoch;
  j["lr_drop_factor"] = c.lr_drop_factor;
  j["weight_decay"] = c.weight_decay;
  j["n_iter"] = c.n_iter;
  j["match_radius"] = c.match_radius;
  j["keep_ratio"] = c.keep_ratio;
  j["checkpoint"] = c.checkpoint;
  j["resume"] = c.resume;
  j["loss_csv"] = c.loss_csv;
  j["pairs"] = c.pairs;
  j["methods"] = c.methods;
  j["icp_max_iterations"] = c.icp_max_iterations;
  j["icp_tolerance"] = c.icp_tolerance;
  j["icp_trim"] = c.icp_trim;
  j["dump_scores"] = c.dump_scores;
  j["metrics_csv"] = c.metrics_csv;
  return j;
}

FpfhConfig fpfh_config(const RunConfig& cfg) {
  FpfhConfig f;
  f.normal_radius = cfg.fpfh_normal_radius;
  f.feature_radius = cfg.fpfh_feature_radius;
  f.bins_per_angle = cfg.fpfh_bins;
  return f;
}

struct LoadedPairs {
  std::vector<RegistrationPair> pairs;
  std::vector<std::string> paths;
};

LoadedPairs read_pairs_list(const std::string& list_path) {
  std::ifstream in(list_path);
  if (!in) throw std::runtime_error(list_path + ": cannot open");
  const fs::path base = fs::path(list_path).parent_path();

  LoadedPairs out;
  std::string line;
  while (std::getline(in, line)) {
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const size_t last = line.find_last_not_of(" \t\r");
    std::string entry = line.substr(first, last - first + 1);
    fs::path p(entry);
    if (p.is_relative()) p = base / p;
    out.pairs.push_back(read_pair(p.string()));
    out.paths.push_back(p.string());
  }
  return out;
}

struct ShapeRef {
  std::string id;
  bool is_mesh = false;
  PrimitiveKind kind = PrimitiveKind::Sphere;
  std::string mesh_path;
};

ShapeRef shape_from_source(const std::string& source, const fs::path& manifest_dir) {
  ShapeRef ref;
  if (source.rfind("primitive:", 0) == 0) {
    ref.id = source;
    ref.kind = primitive_kind_from_string(source.substr(10));
  } else if (source.rfind("mesh:", 0) == 0) {
    ref.id = source;
    ref.is_mesh = true;
    fs::path p(source.substr(5));
    if (p.is_relative()) p = manifest_dir / p;
    ref.mesh_path = p.string();
  } else {
    throw std::invalid_argument("manifest source '" + source +
                                "' must start with 'primitive:' or 'mesh:'");
  }
  return ref;
}

// train and test shape pools under the protocol's split rule
std::pair<std::vector<ShapeRef>, std::vector<ShapeRef>> shape_pools(const RunConfig& cfg) {
  std::vector<ShapeRef> train, test;
  if (cfg.manifest.empty()) {
    const PrimitiveKind kinds[] = {PrimitiveKind::Sphere, PrimitiveKind::Box,
                                   PrimitiveKind::Cylinder, PrimitiveKind::Torus};
    std::vector<ShapeRef> all;
    for (PrimitiveKind k : kinds)
      all.push_back({std::string("primitive:") + primitive_kind_name(k), false, k, ""});
    if (cfg.protocol == "unseen-categories") {
      train.assign(all.begin(), all.begin() + 2);
      test.assign(all.begin() + 2, all.end());
    } else {
      train = all;
      test = all;
    }
    return {train, test};
  }

  const auto entries = read_manifest(cfg.manifest);
  const fs::path dir = fs::path(cfg.manifest).parent_path();
  if (cfg.protocol == "unseen-categories") {
    std::vector<std::string> cats;
    for (const auto& e : entries) cats.push_back(e.category);
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
    const size_t head = (cats.size() + 1) / 2;
    for (const auto& e : entries) {
      const size_t pos = std::lower_bound(cats.begin(), cats.end(), e.category) - cats.begin();
      (pos < head ? train : test).push_back(shape_from_source(e.source, dir));
    }
  } else {
    for (const auto& e : entries)
      (e.split == "train" ? train : test).push_back(shape_from_source(e.source, dir));
  }
  return {train, test};
}

std::unique_ptr<FeatureExtractor> build_extractor(const RunConfig& cfg) {
  return make_extractor(cfg.extractor, fpfh_config(cfg));
}

}  // namespace

void RunConfig::set_from_string(const std::string& key, const std::string& value) {
  json v = json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (v.is_discarded()) v = value;  // bare strings need no quoting
  assign_key(*this, key, v);
}

std::string RunConfig::to_json_string() const { return config_to_json(*this).dump(); }

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (!doc.is_object()) throw std::runtime_error(path + ": config must be a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : doc.items()) assign_key(cfg, key, value);
  return cfg;
}

void cmd_gen_data(const RunConfig& cfg) {
  if (cfg.protocol != "unseen-shapes" && cfg.protocol != "unseen-categories" &&
      cfg.protocol != "noisy")
    throw std::invalid_argument("unknown protocol '" + cfg.protocol + "'");
  if (cfg.count < 0 || cfg.test_count < 0)
    throw std::invalid_argument("gen-data: pair counts must be >= 0");

  const auto [train_shapes, test_shapes] = shape_pools(cfg);
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);

  PairConfig pcfg;
  pcfg.rot_max_deg = cfg.rot_max_deg;
  pcfg.trans_max = cfg.trans_max;
  pcfg.crop = cfg.crop;
  pcfg.noise = cfg.protocol == "noisy";
  pcfg.noise_sigma = cfg.noise_sigma;
  pcfg.noise_clip = cfg.noise_clip;

  std::map<std::string, TriangleMesh> mesh_cache;
  auto sample_shape = [&](const ShapeRef& shape, Rng& rng) {
    if (!shape.is_mesh) return synth_primitive(shape.kind, cfg.points, rng);
    auto it = mesh_cache.find(shape.mesh_path);
    if (it == mesh_cache.end())
      it = mesh_cache.emplace(shape.mesh_path, load_mesh(shape.mesh_path)).first;
    return sample_surface(it->second, cfg.points, rng);
  };

  auto emit_split = [&](const char* name, const std::vector<ShapeRef>& shapes, int count,
                        uint64_t stream_offset) {
    std::string listing = "# seed=" + std::to_string(cfg.seed) + " protocol=" + cfg.protocol +
                          " count=" + std::to_string(count) + "\n";
    if (count > 0) {
      if (shapes.empty())
        throw std::invalid_argument(std::string("gen-data: no ") + name + " shapes available");
      fs::create_directories(out_dir / name);
    }
    for (int p = 0; p < count; ++p) {
      const ShapeRef& shape = shapes[p % shapes.size()];
      const uint64_t pair_seed = Rng::derive_seed(cfg.seed, stream_offset + p);
      Rng rng(pair_seed);
      const PointCloud cloud = sample_shape(shape, rng);
      const RegistrationPair pair = make_pair(cloud, pcfg, rng, shape.id, pair_seed);
      char file[64];
      std::snprintf(file, sizeof(file), "%s/pair_%05d.txt", name, p);
      write_pair((out_dir / file).string(), pair);
      listing += std::string(file) + "\n";
    }
    auto out = open_out(out_dir / (std::string(name) + "_pairs.txt"));
    out << listing;
    if (!out) throw std::runtime_error("gen-data: writing pair list failed");
  };

  emit_split("train", train_shapes, cfg.count, 0);
  emit_split("test", test_shapes, cfg.test_count, uint64_t(1) << 32);

  auto out = open_out(out_dir / "config.json");
  out << cfg.to_json_string() << '\n';
  std::cout << "wrote " << cfg.count << " train and " << cfg.test_count << " test pairs under "
            << out_dir.string() << "\n";
}

void cmd_train(const RunConfig& cfg) {
  if (cfg.pairs.empty())
    throw std::invalid_argument("train: config key 'pairs' is required");
  const LoadedPairs data = read_pairs_list(cfg.pairs);
  const auto extractor = build_extractor(cfg);

  IdamModel model;
  if (!cfg.resume.empty()) {
    model = load_model(cfg.resume);
  } else {
    IdamConfig mcfg;
    mcfg.feature_dim = extractor->dim();
    mcfg.n_iter = cfg.n_iter;
    mcfg.match_radius = cfg.match_radius;
    mcfg.keep_ratio = cfg.keep_ratio;
    model = IdamModel::init(mcfg, cfg.seed);
  }

  TrainConfig tcfg;
  tcfg.epochs = cfg.epochs;
  tcfg.lr = cfg.lr;
  tcfg.lr_drop_epoch = cfg.lr_drop_epoch;
  tcfg.lr_drop_factor = cfg.lr_drop_factor;
  tcfg.weight_decay = cfg.weight_decay;
  tcfg.seed = cfg.seed;

  const std::vector<EpochStats> log = train(data.pairs, *extractor, tcfg, model);

  save_model(cfg.checkpoint, model);

  const fs::path csv_path =
      cfg.loss_csv.empty() ? fs::path(cfg.out_dir) / "loss.csv" : fs::path(cfg.loss_csv);
  auto csv = open_out(csv_path);
  csv << "# config: " << cfg.to_json_string() << "\n";
  csv << "epoch,match_loss,neg_entropy_loss,hybrid_loss,wall_seconds\n";
  for (size_t e = 0; e < log.size(); ++e) {
    csv << (e + 1) << ',' << fmt(log[e].match) << ',' << fmt(log[e].neg_entropy) << ','
        << fmt(log[e].hybrid) << ',' << fmt(log[e].wall_seconds, "%.6f") << "\n";
    std::cout << "epoch " << (e + 1) << ": match " << fmt(log[e].match, "%.6g")
              << ", neg_entropy " << fmt(log[e].neg_entropy, "%.6g") << ", hybrid "
              << fmt(log[e].hybrid, "%.6g") << " (" << fmt(log[e].wall_seconds, "%.2f")
              << " s)\n";
  }
  std::cout << "checkpoint written to " << cfg.checkpoint << "\n";
}

void cmd_register(const RunConfig& cfg, const std::string& source_path,
                  const std::string& target_path) {
  const IdamModel model = load_model(cfg.checkpoint);
  const PointCloud source = read_xyz(source_path);
  const PointCloud target = read_xyz(target_path);
  const auto extractor = build_extractor(cfg);
  const FeatureSet source_features = extract(*extractor, source);
  const FeatureSet target_features = extract(*extractor, target);

  const RegistrationResult res =
      register_clouds(source, target, source_features, target_features, model);
  std::cout << fmt_transform(res.transform, "%.9g") << "\n";

  if (!cfg.dump_scores.empty()) {
    auto out = open_out(cfg.dump_scores);
    out << "# seed=" << cfg.seed << " config: " << cfg.to_json_string() << "\n";
    out << "# S <point_index> <significance> <validity>\n";
    out << "# T <point_index> <significance>\n";
    for (size_t i = 0; i < res.kept_source.size(); ++i)
      out << "S " << res.kept_source[i] << ' ' << fmt(res.significance_source(i)) << ' '
          << fmt(res.validity.size() ? res.validity(i) : 0.0) << "\n";
    for (size_t i = 0; i < res.kept_target.size(); ++i)
      out << "T " << res.kept_target[i] << ' ' << fmt(res.significance_target(i)) << "\n";
  }
}

void cmd_benchmark(const RunConfig& cfg) {
  if (cfg.pairs.empty())
    throw std::invalid_argument("benchmark: config key 'pairs' is required");
  const LoadedPairs data = read_pairs_list(cfg.pairs);
  if (data.pairs.empty()) throw std::invalid_argument("benchmark: empty test set");

  const std::vector<std::string> methods = split_csv_list(cfg.methods);
  if (methods.empty()) throw std::invalid_argument("benchmark: no methods requested");
  const auto needs_model = [](const std::string& m) {
    return m == "idam" || m == "idam1" || m == "uniform";
  };
  for (const auto& m : methods)
    if (!needs_model(m) && m != "icp" && m != "oracle")
      throw std::invalid_argument("benchmark: unknown method '" + m + "'");

  std::vector<RigidTransform> gts;
  for (const auto& p : data.pairs) gts.push_back(p.ground_truth);

  IdamModel model;
  std::unique_ptr<FeatureExtractor> extractor;
  if (std::find_if(methods.begin(), methods.end(), needs_model) != methods.end()) {
    model = load_model(cfg.checkpoint);
    extractor = build_extractor(cfg);
  }
  IcpConfig icp_cfg;
  icp_cfg.max_iterations = cfg.icp_max_iterations;
  icp_cfg.tolerance = cfg.icp_tolerance;
  icp_cfg.trim = cfg.icp_trim;

  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);

  std::string table = "method,RMSE_R_deg,MAE_R_deg,RMSE_t,MAE_t,sec_per_frame\n";
  for (const auto& method : methods) {
    std::vector<RigidTransform> preds;
    preds.reserve(data.pairs.size());
    const auto start = std::chrono::steady_clock::now();
    for (const auto& pair : data.pairs) {
      if (needs_model(method)) {
        const FeatureSet fs_src = extract(*extractor, pair.source);
        const FeatureSet fs_tgt = extract(*extractor, pair.target);
        RegisterOptions opt;
        if (method == "idam1") opt.n_iter_override = 1;
        if (method == "uniform") opt.uniform_weights = true;
        preds.push_back(
            register_clouds(pair.source, pair.target, fs_src, fs_tgt, model, opt).transform);
      } else if (method == "icp") {
        preds.push_back(icp_register(pair.source, pair.target, icp_cfg).transform);
      } else {
        preds.push_back(pair.ground_truth);
      }
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    auto tf = open_out(out_dir / ("transforms_" + method + ".txt"));
    tf << "# seed=" << cfg.seed << " method=" << method << "\n";
    for (const auto& t : preds) tf << fmt_transform(t, "%.17g") << "\n";

    const RegistrationMetrics m = compute_metrics(preds, gts);
    table += method + ',' + fmt(m.rmse_rot_deg) + ',' + fmt(m.mae_rot_deg) + ',' +
             fmt(m.rmse_trans) + ',' + fmt(m.mae_trans) + ',' +
             fmt(seconds / static_cast<double>(data.pairs.size()), "%.9g") + "\n";
  }

  const fs::path csv_path =
      cfg.metrics_csv.empty() ? out_dir / "metrics.csv" : fs::path(cfg.metrics_csv);
  auto csv = open_out(csv_path);
  csv << "# config: " << cfg.to_json_string() << "\n" << table;
  std::cout << table;
}

void cmd_selftest(const RunConfig& cfg) {
  Rng rng(cfg.seed);
  auto check = [](bool ok, const std::string& label) {
    if (!ok) throw std::runtime_error("selftest failed: " + label);
    std::cout << "ok: " << label << "\n";
  };

  {  // exact recovery of random rigid motions from exact correspondences
    double worst_rot = 0.0, worst_trans = 0.0;
    for (int c = 0; c < 50; ++c) {
      const RigidTransform gt = random_transform(180.0, 1.0, rng);
      Eigen::MatrixX3d src(20, 3), tgt(20, 3);
      Eigen::VectorXd w(20);
      for (int i = 0; i < 20; ++i) {
        const Eigen::Vector3d p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        src.row(i) = p.transpose();
        tgt.row(i) = gt.apply(p).transpose();
        w(i) = rng.uniform(0.1, 1.0);
      }
      const RigidTransform est =
          solve_weighted_procrustes(CorrespondenceSet::weighted(src, tgt, w));
      worst_rot = std::max(worst_rot,
                           rotation_angle_deg(est.rotation.transpose() * gt.rotation));
      worst_trans = std::max(worst_trans, (est.translation - gt.translation).norm());
    }
    check(worst_rot < 1e-9 && worst_trans < 1e-10, "procrustes recovery");
  }

  {  // spatial queries agree with a linear scan
    bool ok = true;
    for (int c = 0; c < 10 && ok; ++c) {
      PointCloud pc;
      const int n = 10 + static_cast<int>(rng.uniform_int(200));
      for (int i = 0; i < n; ++i)
        pc.points.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      const KdTree tree(pc);
      for (int q = 0; q < 20 && ok; ++q) {
        const Eigen::Vector3d query(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        int best = 0;
        double best_d = (pc.points[0] - query).norm();
        for (int i = 1; i < n; ++i) {
          const double d = (pc.points[i] - query).norm();
          if (d < best_d) {
            best_d = d;
            best = i;
          }
        }
        ok = tree.nearest(query).index == best;
      }
    }
    check(ok, "nearest neighbour vs linear scan");
  }

  {  // euler decomposition round trip
    bool ok = true;
    for (int c = 0; c < 200 && ok; ++c) {
      const Eigen::Matrix3d r = random_transform(180.0, 0.0, rng).rotation;
      const Eigen::Vector3d zyx = rotation_to_euler_deg(r);
      const Eigen::Matrix3d back = euler_deg_to_rotation(zyx(0), zyx(1), zyx(2));
      ok = rotation_angle_deg(back.transpose() * r) < 1e-9;
    }
    check(ok, "euler round trip");
  }

  {  // median-gated weights, hand-checked
    Eigen::VectorXd v(4);
    v << 0.1, 0.2, 0.3, 0.4;
    const Eigen::VectorXd w = weights_from_validity(v);
    const bool even_ok = w(0) == 0.0 && w(1) == 0.0 && std::abs(w(2) - 3.0 / 7.0) < 1e-15 &&
                         std::abs(w(3) - 4.0 / 7.0) < 1e-15;
    Eigen::VectorXd v3(3);
    v3 << 0.1, 0.2, 0.3;
    const Eigen::VectorXd w3 = weights_from_validity(v3);
    const bool odd_ok =
        w3(0) == 0.0 && std::abs(w3(1) - 0.4) < 1e-15 && std::abs(w3(2) - 0.6) < 1e-15;
    check(even_ok && odd_ok, "validity weight medians");
  }

  {  // similarity rows remain stochastic on a random model
    const int m = 32, k = 8;
    const IdamModel model = IdamModel::init({k, 3, 0.1, 1.0 / 6.0}, rng.next_u64());
    Eigen::MatrixX3d src(m, 3), tgt(m, 3);
    Eigen::MatrixXd feat_s(m, k), feat_t(m, k);
    for (int i = 0; i < m; ++i) {
      for (int c = 0; c < 3; ++c) {
        src(i, c) = rng.uniform(-1, 1);
        tgt(i, c) = rng.uniform(-1, 1);
      }
      for (int c = 0; c < k; ++c) {
        feat_s(i, c) = rng.uniform(0, 1);
        feat_t(i, c) = rng.uniform(0, 1);
      }
    }
    const SimilarityResult sim =
        similarity_forward(build_augmented_tensor(src, tgt, feat_s, feat_t), model);
    const HybridResult hyb = hybrid_weights(sim.hidden, m, model);
    const double row_err = (sim.similarity.rowwise().sum().array() - 1.0).abs().maxCoeff();
    const int zeros = static_cast<int>((hyb.weights.array() == 0.0).count());
    check(row_err < 1e-6 && std::abs(hyb.weights.sum() - 1.0) < 1e-9 && zeros >= m / 2,
          "similarity and weight contracts");
  }

  {  // checkpoint round trip
    fs::create_directories(cfg.out_dir);
    const std::string path = (fs::path(cfg.out_dir) / "selftest_model.idam").string();
    const IdamModel model = IdamModel::init({33, 3, 0.1, 1.0 / 6.0}, 7);
    save_model(path, model);
    const IdamModel back = load_model(path);
    const bool same = back.similarity.layers[0].weight == model.similarity.layers[0].weight &&
                      back.validity.layers[1].bias == model.validity.layers[1].bias &&
                      back.config.feature_dim == model.config.feature_dim;
    fs::remove(path);
    check(same, "checkpoint round trip");
  }

  std::cout << "selftest passed\n";
}

}  // namespace idam
