#pragma once

#include <Eigen/Core>
#include <vector>

namespace idam {

class Rng;

// Ordered set of 3-D points, double precision throughout.
struct PointCloud {
  std::vector<Eigen::Vector3d> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Eigen::Vector3d> pts) : points(std::move(pts)) {}

  int size() const { return static_cast<int>(points.size()); }
  bool empty() const { return points.empty(); }

  Eigen::MatrixX3d to_matrix() const;
  static PointCloud from_matrix(const Eigen::MatrixX3d& m);
  PointCloud gather(const std::vector<int>& indices) const;

  // Throws std::invalid_argument on an empty cloud or non-finite coordinates.
  void validate() const;
};

// Proper rigid motion x -> rotation * x + translation.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  RigidTransform inverse() const;

  // Orthonormality and det = +1 within tol. Throws std::invalid_argument.
  void validate(double tol = 1e-9) const;
};

struct RegistrationMetrics {
  double rmse_rot_deg = 0.0;
  double mae_rot_deg = 0.0;
  double rmse_trans = 0.0;
  double mae_trans = 0.0;
};

PointCloud apply_transform(const RigidTransform& t, const PointCloud& pc);

// Applies `inner` first, then `outer`.
RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner);

// Intrinsic Z-Y-X Euler decomposition in degrees, returned as (z, y, x).
// z and x lie in (-180, 180], y in [-90, 90]. At gimbal lock
// (|R(2,0)| >= 1 - 1e-9) the x angle is defined to be 0.
Eigen::Vector3d rotation_to_euler_deg(const Eigen::Matrix3d& r);

// Rz(z) * Ry(y) * Rx(x), angles in degrees.
Eigen::Matrix3d euler_deg_to_rotation(double z_deg, double y_deg, double x_deg);

// Rotation about a coordinate axis (0 = x, 1 = y, 2 = z).
Eigen::Matrix3d rotation_about_axis(int axis, double angle_deg);

// Geodesic angle of a rotation in degrees.
double rotation_angle_deg(const Eigen::Matrix3d& r);

// Euler-angle and translation errors pooled over samples x 3 components,
// reported as RMSE and MAE. Throws on size mismatch or empty input.
RegistrationMetrics compute_metrics(const std::vector<RigidTransform>& pred,
                                    const std::vector<RigidTransform>& gt);

// Rotation Rz(a) * Ry(b) * Rx(c) with a, b, c ~ U[0, rot_max_deg] and
// translation components ~ U[-trans_max, trans_max].
RigidTransform random_transform(double rot_max_deg, double trans_max, Rng& rng);

}  // namespace idam
