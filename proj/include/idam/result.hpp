#pragma once

#include <Eigen/Core>
#include <vector>

#include "idam/geometry.hpp"

namespace idam {

// One refinement step: the incremental transform estimated at this
// iteration, the source-row -> target-index matches it used, and the
// per-pair weights handed to the rigid solver.
struct IterationRecord {
  RigidTransform transform;
  std::vector<int> correspondences;
  Eigen::VectorXd weights;
  bool degenerate = false;   // solver failed; transform is identity
  double objective = 0.0;    // mean squared correspondence distance before the step
};

struct RegistrationResult {
  RigidTransform transform;  // left-fold composition of the iterations
  std::vector<IterationRecord> iterations;

  // Inputs actually matched after any point elimination; empty when the
  // method matches the full clouds.
  std::vector<int> kept_source;
  std::vector<int> kept_target;

  // Per-kept-point diagnostics; empty when the method does not score points.
  Eigen::VectorXd significance_source;
  Eigen::VectorXd significance_target;
  Eigen::VectorXd validity;
};

}  // namespace idam
