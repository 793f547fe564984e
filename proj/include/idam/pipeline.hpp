#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "idam/data.hpp"
#include "idam/features.hpp"
#include "idam/geometry.hpp"
#include "idam/nn.hpp"
#include "idam/result.hpp"

namespace idam {

class Rng;

struct IdamConfig {
  int feature_dim = 33;         // descriptor width K
  int n_iter = 3;               // refinement iterations
  double match_radius = 0.1;    // correct-match distance threshold r
  double keep_ratio = 1.0 / 6.0;

  void validate() const;
};

// Three heads applied per point or per point pair:
//  similarity  (2K+4) -> 64 -> 32 -> 1, linear logits; its 32-wide
//              penultimate activations are the pair descriptors pooled for
//              the validity head
//  significance K -> 64 -> 32 -> 1, linear score per point
//  validity    32 -> 32 -> 1, sigmoid probability per point
struct IdamModel {
  IdamConfig config;
  Mlp similarity;
  Mlp significance;
  Mlp validity;

  static IdamModel init(const IdamConfig& cfg, uint64_t seed);

  // Width of the similarity head's penultimate layer.
  int hidden_dim() const;

  // Head dimension chaining against config. Throws std::invalid_argument.
  void validate() const;
};

void save_model(const std::string& path, const IdamModel& model);
IdamModel load_model(const std::string& path);

// Pairwise input rows: row i*m + j concatenates the two descriptors, the
// distance between source point i and target point j, and the unit offset
// (zero when the points coincide within 1e-12).
struct AugmentedTensor {
  Eigen::MatrixXd values;  // (m*m) x (2K+4)
  int m = 0;
};

// Indices of the `keep` highest significance scores, ties to the lower
// index, returned ascending. Throws when keep is outside [3, N].
std::vector<int> hard_eliminate(const FeatureSet& features, const IdamModel& model, int keep);

// Significance-head scores for each feature row.
Eigen::VectorXd significance_scores(const FeatureSet& features, const IdamModel& model);

AugmentedTensor build_augmented_tensor(const Eigen::MatrixX3d& src_pts,
                                       const Eigen::MatrixX3d& tgt_pts,
                                       const Eigen::MatrixXd& src_feat,
                                       const Eigen::MatrixXd& tgt_feat);

struct SimilarityResult {
  Eigen::MatrixXd similarity;  // m x m, rows sum to 1
  Eigen::MatrixXd logits;      // m x m
  Eigen::MatrixXd hidden;      // (m*m) x K' penultimate activations
};

// Similarity head applied per pair position; row softmax over targets.
// Pass a cache to reuse the activations in a backward pass.
SimilarityResult similarity_forward(const AugmentedTensor& tensor, const IdamModel& model,
                                    MlpCache* cache = nullptr);

// Row argmax of the similarity matrix, ties to the lower target index.
std::vector<int> pick_correspondences(const Eigen::MatrixXd& similarity);

// Per-channel max over the target axis: pooled(i, c) = max_j
// hidden(i*m + j, c). argmax records the first maximizing j.
void max_pool_pairs(const Eigen::MatrixXd& hidden, int m, Eigen::MatrixXd& pooled,
                    Eigen::MatrixXi& argmax);

// Replays a pooling with a fixed argmax (finite-difference support).
Eigen::MatrixXd pool_with_argmax(const Eigen::MatrixXd& hidden, int m,
                                 const Eigen::MatrixXi& argmax);

// Zeroes entries below the median validity and rescales the survivors to
// sum 1. The median is the true sample median (mean of the two central
// order statistics at even sizes), so distinct values leave exactly
// floor(M/2) zeros.
Eigen::VectorXd weights_from_validity(const Eigen::VectorXd& validity);

struct HybridResult {
  Eigen::VectorXd validity;   // v, in (0,1)
  Eigen::VectorXd weights;    // w, sums to 1
  Eigen::MatrixXi pool_argmax;
};

HybridResult hybrid_weights(const Eigen::MatrixXd& hidden, int m, const IdamModel& model,
                            const Eigen::MatrixXi* fixed_argmax = nullptr);

struct RegisterOptions {
  bool uniform_weights = false;  // ablation: bypass validity weighting
  int n_iter_override = 0;       // 0 keeps the model's iteration count
};

// Full inference: hard elimination on raw features, then the iterative
// match/weigh/solve loop. Requires >= 18 points per cloud so the kept count
// stays >= 3. Degenerate solves record an identity iteration.
RegistrationResult register_clouds(const PointCloud& source, const PointCloud& target,
                                   const FeatureSet& source_features,
                                   const FeatureSet& target_features, const IdamModel& model,
                                   const RegisterOptions& options = {});

struct BalancedSample {
  std::vector<int> source_indices;  // M draws, positive phase first
  std::vector<int> target_indices;  // nearest target under gt per draw
};

// Half the draws come from the points with a target within r under gt
// (indicator + 1e-6, without replacement), the rest from the complement.
// Throws when M exceeds the source size.
BalancedSample balanced_sample(const PointCloud& source, const PointCloud& target,
                               const RigidTransform& gt, int m, double r, Rng& rng);

// j* per row: index of the nearest sampled target to the ground-truth image
// of sampled source point i, and whether it lies within r.
void compute_match_targets(const Eigen::MatrixX3d& source_under_gt,
                           const Eigen::MatrixX3d& target, double r, std::vector<int>& jstar,
                           std::vector<std::uint8_t>& gate);

// Mean over gated rows of -log S(i, j*). dS may be null.
double matching_loss_fixed(const Eigen::MatrixXd& similarity, const std::vector<int>& jstar,
                           const std::vector<std::uint8_t>& gate, Eigen::MatrixXd* dS);
double matching_loss(const Eigen::MatrixXd& similarity, const Eigen::MatrixX3d& source_under_gt,
                     const Eigen::MatrixX3d& target, double r, Eigen::MatrixXd* dS = nullptr);

// Row targets sum_j S(i,j) log S(i,j); each lies in [-log m, 0].
Eigen::VectorXd row_negative_entropy(const Eigen::MatrixXd& similarity);

// Mean squared gap between the significance scores and the (constant)
// first-iteration row negative entropies. ds may be null.
double negative_entropy_loss_fixed(const Eigen::VectorXd& scores, const Eigen::VectorXd& targets,
                                   Eigen::VectorXd* ds);
double negative_entropy_loss(const Eigen::VectorXd& scores, const Eigen::MatrixXd& similarity,
                             Eigen::VectorXd* ds = nullptr);

// Row labels: the argmax match is within r of the ground-truth image.
std::vector<std::uint8_t> hybrid_labels(const Eigen::MatrixXd& similarity,
                                        const Eigen::MatrixX3d& source_under_gt,
                                        const Eigen::MatrixX3d& target, double r);

// Binary cross-entropy of the validity scores against the labels. dv may be
// null.
double hybrid_loss_fixed(const Eigen::VectorXd& validity,
                         const std::vector<std::uint8_t>& labels, Eigen::VectorXd* dv);
double hybrid_loss(const Eigen::VectorXd& validity, const Eigen::MatrixXd& similarity,
                   const Eigen::MatrixX3d& source_under_gt, const Eigen::MatrixX3d& target,
                   double r, Eigen::VectorXd* dv = nullptr);

// One training example: balanced-sampled source rows, their matched target
// rows, both descriptor blocks, and the ground truth.
struct PairSample {
  Eigen::MatrixX3d source;
  Eigen::MatrixX3d target;
  Eigen::MatrixXd source_features;
  Eigen::MatrixXd target_features;
  RigidTransform ground_truth;
};

PairSample make_pair_sample(const RegistrationPair& pair, const FeatureSet& source_features,
                            const FeatureSet& target_features, int m, double r, Rng& rng);

// Everything the loss treats as constant: per-iteration source positions
// (estimates are detached), match targets, entropy targets, hybrid labels,
// and pooling argmaxes. Captured on a reference pass and replayed so
// finite-difference probes see a smooth function.
struct FrozenPairState {
  std::vector<Eigen::MatrixX3d> positions;
  std::vector<int> jstar;
  std::vector<std::uint8_t> gate;
  Eigen::VectorXd entropy_targets;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<Eigen::MatrixXi> pool_argmax;
};

struct ModelGrads {
  MlpGrads similarity;
  MlpGrads significance;
  MlpGrads validity;
};

ModelGrads zero_model_grads(const IdamModel& model);

struct LossBreakdown {
  double match = 0.0;
  double neg_entropy = 0.0;
  double hybrid = 0.0;
  double total = 0.0;
};

// Loss of one sampled pair over the model's iteration loop: mean matching
// loss + first-iteration negative-entropy loss + mean hybrid loss. With
// `frozen` set the pass replays that state; with `capture` set it records
// one. `grads` accumulates parameter gradients (estimated transforms carry
// none).
LossBreakdown pair_loss(const IdamModel& model, const PairSample& sample,
                        const FrozenPairState* frozen = nullptr,
                        FrozenPairState* capture = nullptr, ModelGrads* grads = nullptr);

struct TrainConfig {
  int epochs = 40;
  double lr = 1e-4;
  int lr_drop_epoch = 30;  // multiply lr by lr_drop_factor after this epoch
  double lr_drop_factor = 0.1;
  double weight_decay = 1e-3;
  uint64_t seed = 0;

  void validate() const;
};

double lr_for_epoch(const TrainConfig& cfg, int epoch);  // 1-based

struct EpochStats {
  double match = 0.0;
  double neg_entropy = 0.0;
  double hybrid = 0.0;
  double wall_seconds = 0.0;
};

// One Adam step per pair, batch size 1, deterministic under the config
// seed. Features are extracted once per pair and reused across epochs.
// Throws on an empty dataset or a non-finite loss.
std::vector<EpochStats> train(const std::vector<RegistrationPair>& dataset,
                              const FeatureExtractor& extractor, const TrainConfig& cfg,
                              IdamModel& model);

}  // namespace idam
