#include "idam/icp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "idam/kdtree.hpp"
#include "idam/procrustes.hpp"

namespace idam {

void IcpConfig::validate() const {
  if (max_iterations < 1) throw std::invalid_argument("icp: max_iterations must be >= 1");
  if (!(trim >= 0.0 && trim < 1.0)) throw std::invalid_argument("icp: trim must lie in [0, 1)");
  if (!(tolerance > 0.0)) throw std::invalid_argument("icp: tolerance must be positive");
}

RegistrationResult icp_register(const PointCloud& source, const PointCloud& target,
                                const IcpConfig& cfg) {
  cfg.validate();
  source.validate();
  target.validate();
  if (source.size() < 3 || target.size() < 3)
    throw std::invalid_argument("icp: both clouds need at least 3 points");

  const KdTree tree(target);
  const int n = source.size();
  const int keep = std::max(3, static_cast<int>(std::ceil((1.0 - cfg.trim) * n)));

  RegistrationResult result;
  std::vector<Eigen::Vector3d> current = source.points;

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    IterationRecord rec;
    rec.correspondences.resize(n);
    std::vector<double> residual2(n);
    double sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const Neighbor nb = tree.nearest(current[i]);
      rec.correspondences[i] = nb.index;
      residual2[i] = nb.distance * nb.distance;
      sum2 += residual2[i];
    }
    rec.objective = sum2 / n;

    std::vector<int> used(n);
    for (int i = 0; i < n; ++i) used[i] = i;
    if (keep < n) {
      std::nth_element(used.begin(), used.begin() + keep, used.end(), [&](int a, int b) {
        return residual2[a] < residual2[b] || (residual2[a] == residual2[b] && a < b);
      });
      used.resize(keep);
      std::sort(used.begin(), used.end());
    }

    Eigen::MatrixX3d src(used.size(), 3), tgt(used.size(), 3);
    for (size_t i = 0; i < used.size(); ++i) {
      src.row(i) = current[used[i]].transpose();
      tgt.row(i) = target.points[rec.correspondences[used[i]]].transpose();
    }
    const RigidTransform delta =
        solve_weighted_procrustes(CorrespondenceSet::uniform(std::move(src), std::move(tgt)));

    rec.transform = delta;
    rec.weights = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(used.size()),
                                            1.0 / static_cast<double>(used.size()));
    result.iterations.push_back(std::move(rec));
    result.transform = compose(delta, result.transform);
    for (auto& p : current) p = delta.apply(p);

    const double angle_rad = rotation_angle_deg(delta.rotation) * std::numbers::pi / 180.0;
    if (angle_rad < cfg.tolerance && delta.translation.norm() < cfg.tolerance) break;
  }
  return result;
}

}  // namespace idam
