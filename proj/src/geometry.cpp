#include "idam/geometry.hpp"

#include <Eigen/LU>

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "idam/rng.hpp"

namespace idam {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;

// Maps (-180, 180]; atan2 can return exactly -pi.
double wrap_deg(double deg) {
  if (deg <= -180.0) deg += 360.0;
  return deg;
}
}  // namespace

Eigen::MatrixX3d PointCloud::to_matrix() const {
  Eigen::MatrixX3d m(size(), 3);
  for (int i = 0; i < size(); ++i) m.row(i) = points[i].transpose();
  return m;
}

PointCloud PointCloud::from_matrix(const Eigen::MatrixX3d& m) {
  PointCloud pc;
  pc.points.reserve(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) pc.points.emplace_back(m.row(i).transpose());
  return pc;
}

PointCloud PointCloud::gather(const std::vector<int>& indices) const {
  PointCloud pc;
  pc.points.reserve(indices.size());
  for (int i : indices) pc.points.push_back(points.at(i));
  return pc;
}

void PointCloud::validate() const {
  if (points.empty()) throw std::invalid_argument("PointCloud: cloud must contain at least one point");
  for (const auto& p : points)
    if (!p.allFinite()) throw std::invalid_argument("PointCloud: non-finite coordinate");
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(rotation.transpose() * translation);
  return inv;
}

void RigidTransform::validate(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite())
    throw std::invalid_argument("RigidTransform: non-finite entries");
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > tol) throw std::invalid_argument("RigidTransform: rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > tol)
    throw std::invalid_argument("RigidTransform: rotation determinant is not +1");
}

PointCloud apply_transform(const RigidTransform& t, const PointCloud& pc) {
  PointCloud out;
  out.points.reserve(pc.points.size());
  for (const auto& p : pc.points) out.points.push_back(t.apply(p));
  return out;
}

RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner) {
  RigidTransform out;
  out.rotation = outer.rotation * inner.rotation;
  out.translation = outer.rotation * inner.translation + outer.translation;
  return out;
}

Eigen::Vector3d rotation_to_euler_deg(const Eigen::Matrix3d& r) {
  const double r20 = r(2, 0);
  double z, y, x;
  if (std::abs(r20) >= 1.0 - 1e-9) {
    // Gimbal lock: only z +/- x is determined; x is pinned to 0.
    y = (r20 <= 0.0) ? 90.0 : -90.0;
    x = 0.0;
    z = std::atan2(-r(0, 1), r(1, 1)) * kRadToDeg;
  } else {
    y = std::asin(-r20) * kRadToDeg;
    z = std::atan2(r(1, 0), r(0, 0)) * kRadToDeg;
    x = std::atan2(r(2, 1), r(2, 2)) * kRadToDeg;
  }
  return {wrap_deg(z), y, wrap_deg(x)};
}

Eigen::Matrix3d euler_deg_to_rotation(double z_deg, double y_deg, double x_deg) {
  return rotation_about_axis(2, z_deg) * rotation_about_axis(1, y_deg) * rotation_about_axis(0, x_deg);
}

Eigen::Matrix3d rotation_about_axis(int axis, double angle_deg) {
  if (axis < 0 || axis > 2) throw std::invalid_argument("rotation_about_axis: axis must be 0, 1 or 2");
  const double c = std::cos(angle_deg * kDegToRad);
  const double s = std::sin(angle_deg * kDegToRad);
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  const int a = (axis + 1) % 3;
  const int b = (axis + 2) % 3;
  r(a, a) = c;
  r(a, b) = -s;
  r(b, a) = s;
  r(b, b) = c;
  return r;
}

double rotation_angle_deg(const Eigen::Matrix3d& r) {
  // atan2 of the skew norm stays well conditioned near 0 and 180 degrees,
  // unlike acos of the trace.
  const Eigen::Vector3d skew(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double c = (r.trace() - 1.0) / 2.0;
  return std::atan2(0.5 * skew.norm(), c) * kRadToDeg;
}

RegistrationMetrics compute_metrics(const std::vector<RigidTransform>& pred,
                                    const std::vector<RigidTransform>& gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("compute_metrics: prediction/ground-truth count mismatch");
  if (pred.empty()) throw std::invalid_argument("compute_metrics: empty input");

  double rot_sq = 0.0, rot_abs = 0.0, tr_sq = 0.0, tr_abs = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const Eigen::Vector3d ep = rotation_to_euler_deg(pred[i].rotation);
    const Eigen::Vector3d eg = rotation_to_euler_deg(gt[i].rotation);
    for (int c = 0; c < 3; ++c) {
      const double dr = ep(c) - eg(c);
      rot_sq += dr * dr;
      rot_abs += std::abs(dr);
      const double dt = pred[i].translation(c) - gt[i].translation(c);
      tr_sq += dt * dt;
      tr_abs += std::abs(dt);
    }
  }
  const double n = static_cast<double>(pred.size() * 3);
  RegistrationMetrics m;
  m.rmse_rot_deg = std::sqrt(rot_sq / n);
  m.mae_rot_deg = rot_abs / n;
  m.rmse_trans = std::sqrt(tr_sq / n);
  m.mae_trans = tr_abs / n;
  return m;
}

RigidTransform random_transform(double rot_max_deg, double trans_max, Rng& rng) {
  if (rot_max_deg < 0.0 || trans_max < 0.0)
    throw std::invalid_argument("random_transform: bounds must be nonnegative");
  const double a = rng.uniform(0.0, rot_max_deg);
  const double b = rng.uniform(0.0, rot_max_deg);
  const double c = rng.uniform(0.0, rot_max_deg);
  RigidTransform t;
  t.rotation = euler_deg_to_rotation(a, b, c);
  for (int i = 0; i < 3; ++i) t.translation(i) = rng.uniform(-trans_max, trans_max);
  return t;
}

}  // namespace idam
