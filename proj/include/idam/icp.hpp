#pragma once

#include "idam/geometry.hpp"
#include "idam/result.hpp"

namespace idam {

struct IcpConfig {
  int max_iterations = 50;
  double tolerance = 1e-6;  // rotation-angle (rad) and translation change
  double trim = 0.0;        // fraction of worst correspondences dropped

  // Throws std::invalid_argument on max_iterations < 1 or trim outside [0, 1).
  void validate() const;
};

// Point-to-point ICP: nearest-neighbor correspondences, optional trimming of
// the worst residuals, uniform-weight rigid fit per step. Stops when the
// incremental transform falls below the tolerance or after max_iterations.
// Requires both clouds to hold at least 3 points. Solver degeneracy
// propagates as DegeneracyError.
RegistrationResult icp_register(const PointCloud& source, const PointCloud& target,
                                const IcpConfig& cfg = {});

}  // namespace idam
