#include "idam/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "idam/kdtree.hpp"
#include "idam/procrustes.hpp"
#include "idam/rng.hpp"

namespace idam {

namespace {

// Smallest representable positive probability used to keep -log finite.
constexpr double kProbFloor = 1e-300;
constexpr double kValidityClamp = 1e-12;

Eigen::MatrixX3d gather_rows(const Eigen::MatrixX3d& m, const std::vector<int>& idx) {
  Eigen::MatrixX3d out(static_cast<Eigen::Index>(idx.size()), 3);
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

Eigen::MatrixXd gather_feature_rows(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

std::vector<int> top_score_indices(const Eigen::VectorXd& scores, int keep) {
  std::vector<int> idx(scores.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::partial_sort(idx.begin(), idx.begin() + keep, idx.end(), [&](int a, int b) {
    return scores(a) > scores(b) || (scores(a) == scores(b) && a < b);
  });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void apply_in_place(const RigidTransform& t, Eigen::MatrixX3d& pts) {
  pts = pts * t.rotation.transpose();
  pts.rowwise() += t.translation.transpose();
}

// One weighted draw; weights of exhausted entries are zero.
int draw_index(const std::vector<double>& w, double total, Rng& rng) {
  double u = rng.uniform() * total;
  int last = -1;
  for (size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    last = static_cast<int>(i);
    u -= w[i];
    if (u <= 0.0) return last;
  }
  if (last < 0) throw std::logic_error("draw_index: no mass left");
  return last;  // numerical slop pushed u past the end
}

int row_argmax(const Eigen::MatrixXd& m, Eigen::Index row) {
  int best = 0;
  double best_v = m(row, 0);
  for (Eigen::Index j = 1; j < m.cols(); ++j)
    if (m(row, j) > best_v) {
      best_v = m(row, j);
      best = static_cast<int>(j);
    }
  return best;
}

}  // namespace

void IdamConfig::validate() const {
  if (feature_dim < 1) throw std::invalid_argument("config: feature_dim must be >= 1");
  if (n_iter < 1) throw std::invalid_argument("config: n_iter must be >= 1");
  if (!(match_radius > 0.0)) throw std::invalid_argument("config: match_radius must be positive");
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
    throw std::invalid_argument("config: keep_ratio must lie in (0, 1]");
}

IdamModel IdamModel::init(const IdamConfig& cfg, uint64_t seed) {
  cfg.validate();
  IdamModel model;
  model.config = cfg;
  const int k = cfg.feature_dim;
  model.similarity = Mlp({2 * k + 4, 64, 32, 1}, Activation::None);
  model.significance = Mlp({k, 64, 32, 1}, Activation::None);
  model.validity = Mlp({32, 32, 1}, Activation::Sigmoid);
  Rng rng(seed);
  model.similarity.init_uniform(rng);
  model.significance.init_uniform(rng);
  model.validity.init_uniform(rng);
  return model;
}

int IdamModel::hidden_dim() const {
  const auto s = similarity.sizes();
  return s[s.size() - 2];
}

void IdamModel::validate() const {
  config.validate();
  if (similarity.num_layers() < 2 || significance.num_layers() < 1 || validity.num_layers() < 1)
    throw std::invalid_argument("model: heads not initialized");
  if (similarity.input_dim() != 2 * config.feature_dim + 4)
    throw std::invalid_argument("model: similarity input width does not match feature_dim");
  if (similarity.output_dim() != 1)
    throw std::invalid_argument("model: similarity head must output one logit");
  if (similarity.output_activation != Activation::None)
    throw std::invalid_argument("model: similarity head must have linear output");
  if (significance.input_dim() != config.feature_dim)
    throw std::invalid_argument("model: significance input width does not match feature_dim");
  if (significance.output_dim() != 1 || significance.output_activation != Activation::None)
    throw std::invalid_argument("model: significance head must output one linear score");
  if (validity.input_dim() != hidden_dim())
    throw std::invalid_argument("model: validity input width does not match the similarity head");
  if (validity.output_dim() != 1 || validity.output_activation != Activation::Sigmoid)
    throw std::invalid_argument("model: validity head must output one sigmoid score");
}

void save_model(const std::string& path, const IdamModel& model) {
  model.validate();
  ParamFile file;
  file.config["feature_dim"] = model.config.feature_dim;
  file.config["hidden_dim"] = model.hidden_dim();
  file.config["n_iter"] = model.config.n_iter;
  file.config["match_radius"] = model.config.match_radius;
  file.config["keep_ratio"] = model.config.keep_ratio;
  file.heads.emplace_back("similarity", model.similarity);
  file.heads.emplace_back("significance", model.significance);
  file.heads.emplace_back("validity", model.validity);
  save_params(path, file);
}

IdamModel load_model(const std::string& path) {
  const ParamFile file = load_params(path);
  auto cfg_value = [&](const char* key) {
    const auto it = file.config.find(key);
    if (it == file.config.end())
      throw std::runtime_error(path + ": missing config key '" + key + "'");
    return it->second;
  };
  IdamModel model;
  model.config.feature_dim = static_cast<int>(std::llround(cfg_value("feature_dim")));
  model.config.n_iter = static_cast<int>(std::llround(cfg_value("n_iter")));
  model.config.match_radius = cfg_value("match_radius");
  model.config.keep_ratio = cfg_value("keep_ratio");
  const int hidden = static_cast<int>(std::llround(cfg_value("hidden_dim")));

  auto head = [&](const char* name) -> const Mlp& {
    for (const auto& [n, mlp] : file.heads)
      if (n == name) return mlp;
    throw std::runtime_error(path + ": missing head '" + name + "'");
  };
  model.similarity = head("similarity");
  model.significance = head("significance");
  model.validity = head("validity");

  try {
    model.validate();
    if (model.hidden_dim() != hidden)
      throw std::invalid_argument("stored hidden_dim does not match the similarity head");
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": checkpoint/config mismatch: " + e.what());
  }
  return model;
}

Eigen::VectorXd significance_scores(const FeatureSet& features, const IdamModel& model) {
  return model.significance.forward(features.features).col(0);
}

std::vector<int> hard_eliminate(const FeatureSet& features, const IdamModel& model, int keep) {
  if (keep < 3 || keep > features.size())
    throw std::invalid_argument("hard_eliminate: keep must lie in [3, N]");
  return top_score_indices(significance_scores(features, model), keep);
}

AugmentedTensor build_augmented_tensor(const Eigen::MatrixX3d& src_pts,
                                       const Eigen::MatrixX3d& tgt_pts,
                                       const Eigen::MatrixXd& src_feat,
                                       const Eigen::MatrixXd& tgt_feat) {
  const Eigen::Index m = src_pts.rows();
  const Eigen::Index k = src_feat.cols();
  if (m < 1) throw std::invalid_argument("augmented tensor: empty input");
  if (tgt_pts.rows() != m || src_feat.rows() != m || tgt_feat.rows() != m ||
      tgt_feat.cols() != k)
    throw std::invalid_argument("augmented tensor: shape mismatch");

  AugmentedTensor t;
  t.m = static_cast<int>(m);
  t.values.resize(m * m, 2 * k + 4);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const Eigen::Index row = i * m + j;
      t.values.block(row, 0, 1, k) = src_feat.row(i);
      t.values.block(row, k, 1, k) = tgt_feat.row(j);
      const Eigen::RowVector3d diff = src_pts.row(i) - tgt_pts.row(j);
      const double dist = diff.norm();
      t.values(row, 2 * k) = dist;
      if (dist < 1e-12)
        t.values.block(row, 2 * k + 1, 1, 3).setZero();
      else
        t.values.block(row, 2 * k + 1, 1, 3) = diff / dist;
    }
  }
  return t;
}

SimilarityResult similarity_forward(const AugmentedTensor& tensor, const IdamModel& model,
                                    MlpCache* cache) {
  MlpCache local;
  MlpCache* c = cache ? cache : &local;
  const Eigen::MatrixXd out = model.similarity.forward(tensor.values, c);
  const int m = tensor.m;
  if (out.rows() != static_cast<Eigen::Index>(m) * m || out.cols() != 1)
    throw std::invalid_argument("similarity_forward: tensor row count is not m*m");

  SimilarityResult res;
  res.logits = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>(out.data(), m, m);
  res.similarity = row_softmax(res.logits);
  res.hidden = c->act[model.similarity.num_layers() - 1];
  return res;
}

std::vector<int> pick_correspondences(const Eigen::MatrixXd& similarity) {
  std::vector<int> match(similarity.rows());
  for (Eigen::Index i = 0; i < similarity.rows(); ++i) match[i] = row_argmax(similarity, i);
  return match;
}

void max_pool_pairs(const Eigen::MatrixXd& hidden, int m, Eigen::MatrixXd& pooled,
                    Eigen::MatrixXi& argmax) {
  const Eigen::Index c = hidden.cols();
  if (hidden.rows() != static_cast<Eigen::Index>(m) * m)
    throw std::invalid_argument("max_pool_pairs: row count is not m*m");
  pooled.resize(m, c);
  argmax.resize(m, c);
  for (int i = 0; i < m; ++i) {
    pooled.row(i) = hidden.row(static_cast<Eigen::Index>(i) * m);
    argmax.row(i).setZero();
    for (int j = 1; j < m; ++j) {
      const auto row = hidden.row(static_cast<Eigen::Index>(i) * m + j);
      for (Eigen::Index ch = 0; ch < c; ++ch)
        if (row(ch) > pooled(i, ch)) {
          pooled(i, ch) = row(ch);
          argmax(i, ch) = j;
        }
    }
  }
}

Eigen::MatrixXd pool_with_argmax(const Eigen::MatrixXd& hidden, int m,
                                 const Eigen::MatrixXi& argmax) {
  if (hidden.rows() != static_cast<Eigen::Index>(m) * m || argmax.rows() != m ||
      argmax.cols() != hidden.cols())
    throw std::invalid_argument("pool_with_argmax: shape mismatch");
  Eigen::MatrixXd pooled(m, hidden.cols());
  for (int i = 0; i < m; ++i)
    for (Eigen::Index ch = 0; ch < hidden.cols(); ++ch)
      pooled(i, ch) = hidden(static_cast<Eigen::Index>(i) * m + argmax(i, ch), ch);
  return pooled;
}

Eigen::VectorXd weights_from_validity(const Eigen::VectorXd& validity) {
  const Eigen::Index m = validity.size();
  if (m < 1) throw std::invalid_argument("weights_from_validity: empty input");
  for (Eigen::Index i = 0; i < m; ++i)
    if (!(validity(i) > 0.0) || !std::isfinite(validity(i)))
      throw std::invalid_argument("weights_from_validity: scores must be positive and finite");

  std::vector<double> sorted(validity.data(), validity.data() + m);
  const size_t mid = sorted.size() / 2;
  std::nth_element(sorted.begin(), sorted.begin() + mid, sorted.end());
  double median = sorted[mid];
  if (m % 2 == 0) {
    const double below = *std::max_element(sorted.begin(), sorted.begin() + mid);
    median = 0.5 * (below + median);
  }

  Eigen::VectorXd w = (validity.array() >= median).select(validity, 0.0);
  const double sum = w.sum();
  if (!(sum > 0.0)) throw std::logic_error("weights_from_validity: no survivor mass");
  return w / sum;
}

HybridResult hybrid_weights(const Eigen::MatrixXd& hidden, int m, const IdamModel& model,
                            const Eigen::MatrixXi* fixed_argmax) {
  HybridResult res;
  Eigen::MatrixXd pooled;
  if (fixed_argmax) {
    pooled = pool_with_argmax(hidden, m, *fixed_argmax);
    res.pool_argmax = *fixed_argmax;
  } else {
    max_pool_pairs(hidden, m, pooled, res.pool_argmax);
  }
  res.validity = model.validity.forward(pooled).col(0);
  res.weights = weights_from_validity(res.validity);
  return res;
}

RegistrationResult register_clouds(const PointCloud& source, const PointCloud& target,
                                   const FeatureSet& source_features,
                                   const FeatureSet& target_features, const IdamModel& model,
                                   const RegisterOptions& options) {
  model.validate();
  source.validate();
  target.validate();
  if (options.n_iter_override < 0)
    throw std::invalid_argument("register: n_iter_override must be >= 0");
  if (source_features.size() != source.size() || target_features.size() != target.size())
    throw std::invalid_argument("register: feature row count does not match cloud size");
  if (source_features.dim() != model.config.feature_dim ||
      target_features.dim() != model.config.feature_dim)
    throw std::invalid_argument("register: feature width does not match model");
  if (source.size() < 18 || target.size() < 18)
    throw std::invalid_argument("register: clouds need at least 18 points");

  const int n_iter = options.n_iter_override > 0 ? options.n_iter_override : model.config.n_iter;
  const auto keep_of = [&](int n) {
    return static_cast<int>(std::ceil(model.config.keep_ratio * n));
  };
  const int m = std::max(3, std::min(keep_of(source.size()), keep_of(target.size())));

  RegistrationResult result;
  const Eigen::VectorXd score_src = significance_scores(source_features, model);
  const Eigen::VectorXd score_tgt = significance_scores(target_features, model);
  result.kept_source = top_score_indices(score_src, m);
  result.kept_target = top_score_indices(score_tgt, m);
  result.significance_source.resize(m);
  result.significance_target.resize(m);
  for (int i = 0; i < m; ++i) {
    result.significance_source(i) = score_src(result.kept_source[i]);
    result.significance_target(i) = score_tgt(result.kept_target[i]);
  }

  Eigen::MatrixX3d cur(m, 3), tgt_pts(m, 3);
  Eigen::MatrixXd src_feat(m, source_features.dim()), tgt_feat(m, target_features.dim());
  for (int i = 0; i < m; ++i) {
    cur.row(i) = source.points[result.kept_source[i]].transpose();
    tgt_pts.row(i) = target.points[result.kept_target[i]].transpose();
    src_feat.row(i) = source_features.features.row(result.kept_source[i]);
    tgt_feat.row(i) = target_features.features.row(result.kept_target[i]);
  }

  for (int n = 0; n < n_iter; ++n) {
    const AugmentedTensor tensor = build_augmented_tensor(cur, tgt_pts, src_feat, tgt_feat);
    const SimilarityResult sim = similarity_forward(tensor, model);

    IterationRecord rec;
    rec.correspondences = pick_correspondences(sim.similarity);
    Eigen::MatrixX3d matched(m, 3);
    for (int i = 0; i < m; ++i) matched.row(i) = tgt_pts.row(rec.correspondences[i]);
    rec.objective = (cur - matched).rowwise().squaredNorm().mean();

    if (options.uniform_weights) {
      rec.weights = Eigen::VectorXd::Constant(m, 1.0 / m);
    } else {
      const HybridResult hyb = hybrid_weights(sim.hidden, m, model);
      rec.weights = hyb.weights;
      result.validity = hyb.validity;
    }

    RigidTransform delta;
    if ((rec.weights.array() > 0.0).count() < 3) {
      rec.degenerate = true;
    } else {
      try {
        delta = solve_weighted_procrustes(CorrespondenceSet::weighted(cur, matched, rec.weights));
      } catch (const DegeneracyError&) {
        delta = RigidTransform::identity();
        rec.degenerate = true;
      }
    }
    rec.transform = delta;
    result.iterations.push_back(std::move(rec));
    result.transform = compose(delta, result.transform);
    apply_in_place(delta, cur);
  }
  return result;
}

BalancedSample balanced_sample(const PointCloud& source, const PointCloud& target,
                               const RigidTransform& gt, int m, double r, Rng& rng) {
  source.validate();
  target.validate();
  if (m < 1 || m > source.size())
    throw std::invalid_argument("balanced_sample: M must lie in [1, source size]");
  if (!(r > 0.0)) throw std::invalid_argument("balanced_sample: radius must be positive");

  const int n = source.size();
  const KdTree tree(target);
  std::vector<int> nearest(n);
  std::vector<bool> positive(n);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d a = gt.apply(source.points[i]);
    nearest[i] = tree.nearest(a).index;
    positive[i] = (a - target.points[nearest[i]]).squaredNorm() <= r * r;
  }

  const double eps = 1e-6;
  std::vector<double> w(n);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    w[i] = (positive[i] ? 1.0 : 0.0) + eps;
    total += w[i];
  }

  BalancedSample out;
  out.source_indices.reserve(m);
  const int n_pos = (m + 1) / 2;
  for (int d = 0; d < n_pos; ++d) {
    const int i = draw_index(w, total, rng);
    out.source_indices.push_back(i);
    total -= w[i];
    w[i] = 0.0;
  }

  total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;  // already drawn
    w[i] = (positive[i] ? 0.0 : 1.0) + eps;
    total += w[i];
  }
  for (int d = n_pos; d < m; ++d) {
    const int i = draw_index(w, total, rng);
    out.source_indices.push_back(i);
    total -= w[i];
    w[i] = 0.0;
  }

  out.target_indices.reserve(m);
  for (int i : out.source_indices) out.target_indices.push_back(nearest[i]);
  return out;
}

void compute_match_targets(const Eigen::MatrixX3d& source_under_gt,
                           const Eigen::MatrixX3d& target, double r, std::vector<int>& jstar,
                           std::vector<std::uint8_t>& gate) {
  const Eigen::Index m = source_under_gt.rows();
  if (target.rows() < 1 || m < 1)
    throw std::invalid_argument("match targets: empty input");
  jstar.resize(m);
  gate.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    int best = 0;
    double best_d2 = (source_under_gt.row(i) - target.row(0)).squaredNorm();
    for (Eigen::Index j = 1; j < target.rows(); ++j) {
      const double d2 = (source_under_gt.row(i) - target.row(j)).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = static_cast<int>(j);
      }
    }
    jstar[i] = best;
    gate[i] = best_d2 <= r * r ? 1 : 0;
  }
}

double matching_loss_fixed(const Eigen::MatrixXd& similarity, const std::vector<int>& jstar,
                           const std::vector<std::uint8_t>& gate, Eigen::MatrixXd* dS) {
  const Eigen::Index m = similarity.rows();
  if (static_cast<Eigen::Index>(jstar.size()) != m || gate.size() != jstar.size())
    throw std::invalid_argument("matching loss: target size mismatch");
  if (dS) dS->setZero(m, similarity.cols());

  double loss = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (!gate[i]) continue;
    const double p = std::max(similarity(i, jstar[i]), kProbFloor);
    loss -= std::log(p);
    if (dS) (*dS)(i, jstar[i]) = -1.0 / (static_cast<double>(m) * p);
  }
  return loss / static_cast<double>(m);
}

double matching_loss(const Eigen::MatrixXd& similarity, const Eigen::MatrixX3d& source_under_gt,
                     const Eigen::MatrixX3d& target, double r, Eigen::MatrixXd* dS) {
  if (similarity.rows() != source_under_gt.rows() || similarity.cols() != target.rows())
    throw std::invalid_argument("matching loss: shape mismatch");
  std::vector<int> jstar;
  std::vector<std::uint8_t> gate;
  compute_match_targets(source_under_gt, target, r, jstar, gate);
  return matching_loss_fixed(similarity, jstar, gate, dS);
}

Eigen::VectorXd row_negative_entropy(const Eigen::MatrixXd& similarity) {
  Eigen::VectorXd t(similarity.rows());
  for (Eigen::Index i = 0; i < similarity.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < similarity.cols(); ++j) {
      const double s = similarity(i, j);
      if (s > 0.0) acc += s * std::log(s);
    }
    t(i) = acc;
  }
  return t;
}

double negative_entropy_loss_fixed(const Eigen::VectorXd& scores, const Eigen::VectorXd& targets,
                                   Eigen::VectorXd* ds) {
  const Eigen::Index m = scores.size();
  if (targets.size() != m) throw std::invalid_argument("negative entropy loss: size mismatch");
  const Eigen::VectorXd diff = scores - targets;
  if (ds) *ds = 2.0 * diff / static_cast<double>(m);
  return diff.squaredNorm() / static_cast<double>(m);
}

double negative_entropy_loss(const Eigen::VectorXd& scores, const Eigen::MatrixXd& similarity,
                             Eigen::VectorXd* ds) {
  if (scores.size() != similarity.rows())
    throw std::invalid_argument("negative entropy loss: size mismatch");
  return negative_entropy_loss_fixed(scores, row_negative_entropy(similarity), ds);
}

std::vector<std::uint8_t> hybrid_labels(const Eigen::MatrixXd& similarity,
                                        const Eigen::MatrixX3d& source_under_gt,
                                        const Eigen::MatrixX3d& target, double r) {
  const Eigen::Index m = similarity.rows();
  if (source_under_gt.rows() != m || similarity.cols() != target.rows())
    throw std::invalid_argument("hybrid labels: shape mismatch");
  std::vector<std::uint8_t> labels(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int j = row_argmax(similarity, i);
    labels[i] = (source_under_gt.row(i) - target.row(j)).squaredNorm() <= r * r ? 1 : 0;
  }
  return labels;
}

double hybrid_loss_fixed(const Eigen::VectorXd& validity,
                         const std::vector<std::uint8_t>& labels, Eigen::VectorXd* dv) {
  const Eigen::Index m = validity.size();
  if (static_cast<Eigen::Index>(labels.size()) != m)
    throw std::invalid_argument("hybrid loss: size mismatch");
  if (dv) dv->resize(m);

  double loss = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double v = std::min(std::max(validity(i), kValidityClamp), 1.0 - kValidityClamp);
    const double y = labels[i] ? 1.0 : 0.0;
    loss -= y * std::log(v) + (1.0 - y) * std::log(1.0 - v);
    if (dv) (*dv)(i) = (v - y) / (v * (1.0 - v) * static_cast<double>(m));
  }
  return loss / static_cast<double>(m);
}

double hybrid_loss(const Eigen::VectorXd& validity, const Eigen::MatrixXd& similarity,
                   const Eigen::MatrixX3d& source_under_gt, const Eigen::MatrixX3d& target,
                   double r, Eigen::VectorXd* dv) {
  if (validity.size() != similarity.rows())
    throw std::invalid_argument("hybrid loss: size mismatch");
  return hybrid_loss_fixed(validity, hybrid_labels(similarity, source_under_gt, target, r), dv);
}

PairSample make_pair_sample(const RegistrationPair& pair, const FeatureSet& source_features,
                            const FeatureSet& target_features, int m, double r, Rng& rng) {
  if (source_features.size() != pair.source.size() ||
      target_features.size() != pair.target.size())
    throw std::invalid_argument("pair sample: feature row count does not match cloud size");
  const BalancedSample bs = balanced_sample(pair.source, pair.target, pair.ground_truth, m, r, rng);

  PairSample sample;
  sample.ground_truth = pair.ground_truth;
  sample.source.resize(m, 3);
  sample.target.resize(m, 3);
  for (int i = 0; i < m; ++i) {
    sample.source.row(i) = pair.source.points[bs.source_indices[i]].transpose();
    sample.target.row(i) = pair.target.points[bs.target_indices[i]].transpose();
  }
  sample.source_features = gather_feature_rows(source_features.features, bs.source_indices);
  sample.target_features = gather_feature_rows(target_features.features, bs.target_indices);
  return sample;
}

ModelGrads zero_model_grads(const IdamModel& model) {
  return {model.similarity.zero_grads(), model.significance.zero_grads(),
          model.validity.zero_grads()};
}

LossBreakdown pair_loss(const IdamModel& model, const PairSample& sample,
                        const FrozenPairState* frozen, FrozenPairState* capture,
                        ModelGrads* grads) {
  model.validate();
  if (frozen && capture)
    throw std::invalid_argument("pair_loss: cannot capture while replaying a frozen state");
  const int m = static_cast<int>(sample.source.rows());
  const int n_iter = model.config.n_iter;
  const double r = model.config.match_radius;
  if (m < 1 || sample.target.rows() != m || sample.source_features.rows() != m ||
      sample.target_features.rows() != m ||
      sample.source_features.cols() != model.config.feature_dim ||
      sample.target_features.cols() != model.config.feature_dim)
    throw std::invalid_argument("pair_loss: sample shape mismatch");
  if (frozen && (static_cast<int>(frozen->positions.size()) != n_iter ||
                 static_cast<int>(frozen->labels.size()) != n_iter ||
                 static_cast<int>(frozen->pool_argmax.size()) != n_iter ||
                 static_cast<int>(frozen->jstar.size()) != m))
    throw std::invalid_argument("pair_loss: frozen state does not match model/sample");

  Eigen::MatrixX3d under_gt(m, 3);
  for (int i = 0; i < m; ++i)
    under_gt.row(i) = sample.ground_truth.apply(sample.source.row(i).transpose()).transpose();

  std::vector<int> jstar;
  std::vector<std::uint8_t> gate;
  if (frozen) {
    jstar = frozen->jstar;
    gate = frozen->gate;
  } else {
    compute_match_targets(under_gt, sample.target, r, jstar, gate);
    if (capture) {
      capture->jstar = jstar;
      capture->gate = gate;
    }
  }

  MlpCache sig_cache;
  const Eigen::VectorXd scores =
      model.significance.forward(sample.source_features, grads ? &sig_cache : nullptr).col(0);

  LossBreakdown out;
  Eigen::MatrixX3d cur = sample.source;

  for (int n = 0; n < n_iter; ++n) {
    if (frozen) cur = frozen->positions[n];
    if (capture) capture->positions.push_back(cur);

    const AugmentedTensor tensor =
        build_augmented_tensor(cur, sample.target, sample.source_features,
                               sample.target_features);
    MlpCache sim_cache;
    const SimilarityResult sim = similarity_forward(tensor, model, grads ? &sim_cache : nullptr);

    Eigen::MatrixXd dS;
    out.match += matching_loss_fixed(sim.similarity, jstar, gate, grads ? &dS : nullptr);

    if (n == 0) {
      Eigen::VectorXd targets;
      if (frozen)
        targets = frozen->entropy_targets;
      else
        targets = row_negative_entropy(sim.similarity);
      if (capture) capture->entropy_targets = targets;
      Eigen::VectorXd ds;
      out.neg_entropy = negative_entropy_loss_fixed(scores, targets, grads ? &ds : nullptr);
      if (grads) model.significance.backward(sig_cache, ds, grads->significance);
    }

    Eigen::MatrixXd pooled;
    Eigen::MatrixXi argmax;
    if (frozen) {
      argmax = frozen->pool_argmax[n];
      pooled = pool_with_argmax(sim.hidden, m, argmax);
    } else {
      max_pool_pairs(sim.hidden, m, pooled, argmax);
      if (capture) capture->pool_argmax.push_back(argmax);
    }
    MlpCache val_cache;
    const Eigen::VectorXd validity =
        model.validity.forward(pooled, grads ? &val_cache : nullptr).col(0);

    std::vector<std::uint8_t> labels;
    if (frozen)
      labels = frozen->labels[n];
    else
      labels = hybrid_labels(sim.similarity, under_gt, sample.target, r);
    if (capture) capture->labels.push_back(labels);
    Eigen::VectorXd dv;
    out.hybrid += hybrid_loss_fixed(validity, labels, grads ? &dv : nullptr);

    if (grads) {
      const Eigen::MatrixXd dv_scaled = dv / n_iter;
      const Eigen::MatrixXd dpooled =
          model.validity.backward(val_cache, dv_scaled, grads->validity);
      Eigen::MatrixXd dhidden = Eigen::MatrixXd::Zero(sim.hidden.rows(), sim.hidden.cols());
      for (int i = 0; i < m; ++i)
        for (Eigen::Index ch = 0; ch < dpooled.cols(); ++ch)
          dhidden(static_cast<Eigen::Index>(i) * m + argmax(i, ch), ch) += dpooled(i, ch);

      const Eigen::MatrixXd dlogits =
          row_softmax_backward(sim.similarity, dS) / static_cast<double>(n_iter);
      Eigen::MatrixXd dy(static_cast<Eigen::Index>(m) * m, 1);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) dy(static_cast<Eigen::Index>(i) * m + j, 0) = dlogits(i, j);
      model.similarity.backward(sim_cache, dy, grads->similarity,
                                model.similarity.num_layers() - 1, &dhidden);
    }

    if (n + 1 < n_iter && !frozen) {
      const std::vector<int> corr = pick_correspondences(sim.similarity);
      Eigen::MatrixX3d matched(m, 3);
      for (int i = 0; i < m; ++i) matched.row(i) = sample.target.row(corr[i]);
      const Eigen::VectorXd w = weights_from_validity(validity);
      RigidTransform delta;
      if ((w.array() > 0.0).count() >= 3) {
        try {
          delta = solve_weighted_procrustes(CorrespondenceSet::weighted(cur, matched, w));
        } catch (const DegeneracyError&) {
          delta = RigidTransform::identity();
        }
      }
      apply_in_place(delta, cur);
    }
  }

  out.match /= n_iter;
  out.hybrid /= n_iter;
  out.total = out.match + out.neg_entropy + out.hybrid;
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (lr_drop_epoch < 0) throw std::invalid_argument("train config: lr_drop_epoch must be >= 0");
  if (!(lr_drop_factor > 0.0))
    throw std::invalid_argument("train config: lr_drop_factor must be positive");
  if (weight_decay < 0.0)
    throw std::invalid_argument("train config: weight_decay must be >= 0");
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 1) throw std::invalid_argument("lr_for_epoch: epochs are 1-based");
  return epoch <= cfg.lr_drop_epoch ? cfg.lr : cfg.lr * cfg.lr_drop_factor;
}

std::vector<EpochStats> train(const std::vector<RegistrationPair>& dataset,
                              const FeatureExtractor& extractor, const TrainConfig& cfg,
                              IdamModel& model) {
  cfg.validate();
  model.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (extractor.dim() != model.config.feature_dim)
    throw std::invalid_argument("train: extractor width does not match model feature_dim");

  std::vector<std::pair<FeatureSet, FeatureSet>> features;
  features.reserve(dataset.size());
  for (const auto& pair : dataset)
    features.emplace_back(extract(extractor, pair.source), extract(extractor, pair.target));

  const AdamConfig adam_cfg{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
  AdamState opt_sim(model.similarity, adam_cfg);
  AdamState opt_sig(model.significance, adam_cfg);
  AdamState opt_val(model.validity, adam_cfg);
  ModelGrads grads = zero_model_grads(model);

  std::vector<EpochStats> log;
  log.reserve(cfg.epochs);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_for_epoch(cfg, epoch);
    opt_sim.config.lr = opt_sig.config.lr = opt_val.config.lr = lr;

    EpochStats stats;
    for (size_t p = 0; p < dataset.size(); ++p) {
      const RegistrationPair& pair = dataset[p];
      const int n = pair.source.size();
      const int m =
          std::min(n, std::max(3, static_cast<int>(std::ceil(model.config.keep_ratio * n))));
      Rng rng(Rng::derive_seed(cfg.seed,
                               static_cast<uint64_t>(epoch - 1) * dataset.size() + p));
      const PairSample sample = make_pair_sample(pair, features[p].first, features[p].second, m,
                                                 model.config.match_radius, rng);

      grads.similarity.set_zero();
      grads.significance.set_zero();
      grads.validity.set_zero();
      const LossBreakdown loss = pair_loss(model, sample, nullptr, nullptr, &grads);
      if (!std::isfinite(loss.total))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", pair " + std::to_string(p) + " (match " +
                                 std::to_string(loss.match) + ", neg_entropy " +
                                 std::to_string(loss.neg_entropy) + ", hybrid " +
                                 std::to_string(loss.hybrid) + ")");

      opt_sim.step(model.similarity, grads.similarity);
      opt_sig.step(model.significance, grads.significance);
      opt_val.step(model.validity, grads.validity);

      stats.match += loss.match;
      stats.neg_entropy += loss.neg_entropy;
      stats.hybrid += loss.hybrid;
    }
    const double inv = 1.0 / static_cast<double>(dataset.size());
    stats.match *= inv;
    stats.neg_entropy *= inv;
    stats.hybrid *= inv;
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.push_back(stats);
  }
  return log;
}

}  // namespace idam
