#pragma once

#include <Eigen/Core>
#include <stdexcept>

#include "idam/geometry.hpp"

namespace idam {

// Matched point pairs with nonnegative weights normalized to sum 1.
struct CorrespondenceSet {
  Eigen::MatrixX3d source;
  Eigen::MatrixX3d target;
  Eigen::VectorXd weights;

  static CorrespondenceSet uniform(Eigen::MatrixX3d source, Eigen::MatrixX3d target);

  // Rescales weights to sum 1. Throws on negative, non-finite or all-zero
  // weights, or mismatched sizes.
  static CorrespondenceSet weighted(Eigen::MatrixX3d source, Eigen::MatrixX3d target,
                                    Eigen::VectorXd weights);
};

// Raised when the weighted covariance has rank < 2 and the rotation is not
// determined by the correspondences.
class DegeneracyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Weighted least-squares rigid alignment: minimizes
// sum_i w_i * ||R p_i + t - q_i||^2 via SVD of the weighted covariance,
// with the reflection corrected so det(R) = +1. Requires at least three
// pairs with nonzero weight. Throws DegeneracyError on rank deficiency.
RigidTransform solve_weighted_procrustes(const CorrespondenceSet& corr);

}  // namespace idam
