#include "idam/features.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "idam/kdtree.hpp"

namespace idam {

void FpfhConfig::validate() const {
  if (!(normal_radius > 0.0)) throw std::invalid_argument("FpfhConfig: normal_radius must be positive");
  if (!(feature_radius > 0.0)) throw std::invalid_argument("FpfhConfig: feature_radius must be positive");
  if (bins_per_angle < 2) throw std::invalid_argument("FpfhConfig: bins_per_angle must be at least 2");
}

Eigen::MatrixX3d estimate_normals(const PointCloud& pc, double radius) {
  pc.validate();
  if (pc.size() < 3) throw std::invalid_argument("estimate_normals: cloud must have at least 3 points");
  if (!(radius > 0.0)) throw std::invalid_argument("estimate_normals: radius must be positive");

  const int n = pc.size();
  KdTree tree(pc);
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : pc.points) centroid += p;
  centroid /= static_cast<double>(n);

  const int kfallback = std::min(10, n);
  Eigen::MatrixX3d normals(n, 3);
  for (int i = 0; i < n; ++i) {
    std::vector<Neighbor> nbrs = tree.radius(pc.points[i], radius);
    if (static_cast<int>(nbrs.size()) < 3) nbrs = tree.knn(pc.points[i], kfallback);

    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (const auto& nb : nbrs) mean += pc.points[nb.index];
    mean /= static_cast<double>(nbrs.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& nb : nbrs) {
      const Eigen::Vector3d d = pc.points[nb.index] - mean;
      cov.noalias() += d * d.transpose();
    }

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    Eigen::Vector3d normal = eig.eigenvectors().col(0);
    normal.normalize();

    // Sign: away from the centroid, with a fixed-axis convention when the
    // point sits in the plane through the centroid (flat clouds).
    const Eigen::Vector3d dir = pc.points[i] - centroid;
    const double dn = dir.norm();
    const double s = dn > 0.0 ? normal.dot(dir) / dn : 0.0;
    if (s < -1e-12) {
      normal = -normal;
    } else if (std::abs(s) <= 1e-12) {
      int k = 0;
      normal.cwiseAbs().maxCoeff(&k);
      if (normal(k) < 0.0) normal = -normal;
    }
    normals.row(i) = normal.transpose();
  }
  return normals;
}

namespace {

// Darboux-frame pair features. ps is taken as the frame origin unless the
// target normal makes the smaller angle with the connecting line, in which
// case the roles swap. Returns false for coincident points or a connecting
// line parallel to the frame normal.
//
// The swap comparison carries a slack: symmetric surfaces (co-facial planes,
// spheres, revolution caps) make the two projections tie exactly, and without
// the slack rounding noise picks sides at random, so a cloud and its rigidly
// moved copy could bin the same pair differently. Measured tie gaps sit below
// 1e-8 and genuine asymmetries above 1.5e-6; 1e-7 splits the two regimes.
bool pair_features(const Eigen::Vector3d& ps, const Eigen::Vector3d& ns, const Eigen::Vector3d& pt,
                   const Eigen::Vector3d& nt, double& alpha, double& phi, double& theta) {
  constexpr double kSwapSlack = 1e-7;
  Eigen::Vector3d d = pt - ps;
  const double dist = d.norm();
  if (dist < 1e-12) return false;

  Eigen::Vector3d u = ns, n2 = nt;
  const double a1 = u.dot(d) / dist;
  const double a2 = n2.dot(d) / dist;
  if (std::abs(a2) - std::abs(a1) > kSwapSlack) {
    std::swap(u, n2);
    d = -d;
    phi = -a2;
  } else {
    phi = a1;
  }

  Eigen::Vector3d v = d.cross(u);
  const double vn = v.norm();
  if (vn < 1e-12) return false;
  v /= vn;
  const Eigen::Vector3d w = u.cross(v);
  alpha = v.dot(n2);
  theta = std::atan2(w.dot(n2), u.dot(n2));
  return true;
}

int bin_index(double x, double lo, double hi, int bins) {
  const int b = static_cast<int>(std::floor((x - lo) / (hi - lo) * bins));
  return std::clamp(b, 0, bins - 1);
}

// theta is periodic, so its histogram wraps instead of clamping, with the
// seam anchored an eighth of a bin below -pi. Symmetric surfaces produce
// exact-tie angles (0 and ±pi from parallel or antipodal normal pairs, ±pi/2
// from perpendicular faces); a seam at ±pi splits those ties by rounding
// noise, while the offset seam keeps every tie family inside a bin.
int theta_bin(double theta, int bins) {
  constexpr double pi = std::numbers::pi;
  const double width = 2.0 * pi / bins;
  const int b = static_cast<int>(std::floor((theta + pi + 0.125 * width) / width));
  const int m = b % bins;
  return m < 0 ? m + bins : m;
}

}  // namespace

FeatureSet compute_fpfh(const PointCloud& pc, const FpfhConfig& cfg) {
  cfg.validate();
  pc.validate();
  if (pc.size() < 3) throw std::invalid_argument("compute_fpfh: cloud must have at least 3 points");

  const int n = pc.size();
  const int bins = cfg.bins_per_angle;
  const int k = 3 * bins;
  const Eigen::MatrixX3d normals = estimate_normals(pc, cfg.normal_radius);
  KdTree tree(pc);

  // Neighbour lists exclude the query point and coincident duplicates.
  std::vector<std::vector<Neighbor>> nbrs(n);
  bool any = false;
  for (int i = 0; i < n; ++i) {
    for (const auto& nb : tree.radius(pc.points[i], cfg.feature_radius))
      if (nb.distance >= 1e-12) nbrs[i].push_back(nb);
    any = any || !nbrs[i].empty();
  }
  if (!any)
    throw std::invalid_argument("compute_fpfh: feature_radius leaves every point without neighbours");

  Eigen::MatrixXd spfh = Eigen::MatrixXd::Zero(n, k);
  for (int i = 0; i < n; ++i) {
    for (const auto& nb : nbrs[i]) {
      double alpha, phi, theta;
      if (!pair_features(pc.points[i], normals.row(i).transpose(), pc.points[nb.index],
                         normals.row(nb.index).transpose(), alpha, phi, theta))
        continue;
      spfh(i, bin_index(alpha, -1.0, 1.0, bins)) += 1.0;
      spfh(i, bins + bin_index(phi, -1.0, 1.0, bins)) += 1.0;
      spfh(i, 2 * bins + theta_bin(theta, bins)) += 1.0;
    }
  }

  Eigen::MatrixXd fpfh(n, k);
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd row = spfh.row(i);
    for (const auto& nb : nbrs[i]) row += spfh.row(nb.index) / nb.distance;
    for (int a = 0; a < 3; ++a) {
      const double total = row.segment(a * bins, bins).sum();
      if (total > 0.0) row.segment(a * bins, bins) *= 100.0 / total;
    }
    fpfh.row(i) = row;
  }
  return {std::move(fpfh)};
}

FeatureSet StubExtractor::compute(const PointCloud& pc) const {
  return {Eigen::MatrixXd::Constant(pc.size(), dim_, value_)};
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name, const FpfhConfig& cfg) {
  if (name == "fpfh") return std::make_unique<FpfhExtractor>(cfg);
  if (name == "stub") return std::make_unique<StubExtractor>(3 * cfg.bins_per_angle);
  throw std::invalid_argument("make_extractor: unknown feature extractor '" + name + "'");
}

FeatureSet extract(const FeatureExtractor& extractor, const PointCloud& pc) {
  pc.validate();
  FeatureSet f = extractor.compute(pc);
  if (f.size() != pc.size())
    throw std::runtime_error(std::string("extract: '") + extractor.name() +
                             "' returned a row count different from the cloud size");
  if (!f.features.allFinite())
    throw std::runtime_error(std::string("extract: '") + extractor.name() +
                             "' returned non-finite features");
  return f;
}

}  // namespace idam
