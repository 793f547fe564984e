#include "idam/procrustes.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>

namespace idam {

namespace {
void check_sizes(const Eigen::MatrixX3d& source, const Eigen::MatrixX3d& target,
                 const Eigen::VectorXd& weights) {
  if (source.rows() != target.rows() || source.rows() != weights.size())
    throw std::invalid_argument("CorrespondenceSet: source/target/weight sizes differ");
  if (source.rows() == 0) throw std::invalid_argument("CorrespondenceSet: empty set");
  if (!source.allFinite() || !target.allFinite() || !weights.allFinite())
    throw std::invalid_argument("CorrespondenceSet: non-finite entries");
}
}  // namespace

CorrespondenceSet CorrespondenceSet::uniform(Eigen::MatrixX3d source, Eigen::MatrixX3d target) {
  const Eigen::Index m = source.rows();
  return weighted(std::move(source), std::move(target), Eigen::VectorXd::Ones(m));
}

CorrespondenceSet CorrespondenceSet::weighted(Eigen::MatrixX3d source, Eigen::MatrixX3d target,
                                              Eigen::VectorXd weights) {
  check_sizes(source, target, weights);
  if ((weights.array() < 0.0).any())
    throw std::invalid_argument("CorrespondenceSet: negative weight");
  const double total = weights.sum();
  if (!(total > 0.0)) throw std::invalid_argument("CorrespondenceSet: weights sum to zero");
  CorrespondenceSet set;
  set.source = std::move(source);
  set.target = std::move(target);
  set.weights = weights / total;
  return set;
}

RigidTransform solve_weighted_procrustes(const CorrespondenceSet& corr) {
  check_sizes(corr.source, corr.target, corr.weights);
  const Eigen::Index m = corr.source.rows();
  int active = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    if (corr.weights(i) > 0.0) ++active;
  if (active < 3)
    throw std::invalid_argument("solve_weighted_procrustes: need at least 3 pairs with nonzero weight");

  const Eigen::RowVector3d src_mean = corr.weights.transpose() * corr.source;
  const Eigen::RowVector3d tgt_mean = corr.weights.transpose() * corr.target;

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (Eigen::Index i = 0; i < m; ++i) {
    const double w = corr.weights(i);
    if (w == 0.0) continue;
    h.noalias() += w * (corr.source.row(i) - src_mean).transpose() * (corr.target.row(i) - tgt_mean);
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(1) < 1e-12 * sv(0))
    throw DegeneracyError("solve_weighted_procrustes: correspondence covariance has rank < 2");

  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;

  RigidTransform t;
  t.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  t.translation = tgt_mean.transpose() - t.rotation * src_mean.transpose();
  return t;
}

}  // namespace idam
