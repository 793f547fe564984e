#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "idam/features.hpp"
#include "idam/geometry.hpp"
#include "idam/rng.hpp"

using namespace idam;

namespace {

PointCloud grid_plane(int side, double step) {
  PointCloud pc;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j)
      pc.points.emplace_back(i * step, j * step, 0.0);
  return pc;
}

PointCloud random_sphere(Rng& rng, int n) {
  PointCloud pc;
  while (pc.size() < n) {
    Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    if (v.norm() < 1e-6) continue;
    pc.points.push_back(v / v.norm());
  }
  return pc;
}

PointCloud random_blob(Rng& rng, int n) {
  PointCloud pc;
  for (int i = 0; i < n; ++i)
    pc.points.emplace_back(rng.normal() * 0.4, rng.normal() * 0.3, rng.normal() * 0.5);
  return pc;
}

}  // namespace

TEST_CASE("normals on a planar grid are the plane normal") {
  const PointCloud pc = grid_plane(12, 0.05);
  const Eigen::MatrixX3d normals = estimate_normals(pc, 0.12);
  REQUIRE(normals.rows() == pc.size());
  for (int i = 0; i < normals.rows(); ++i) {
    CHECK(normals.row(i).norm() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(normals(i, 2)) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("normals on a sphere point radially outward") {
  Rng rng(17);
  const PointCloud pc = random_sphere(rng, 600);
  const Eigen::MatrixX3d normals = estimate_normals(pc, 0.25);
  int aligned = 0;
  for (int i = 0; i < pc.size(); ++i) {
    const double cosang = normals.row(i).dot(pc.points[i].transpose());
    CHECK(cosang > 0.0);  // centroid is the origin; outward sign enforced
    if (cosang > 0.95) ++aligned;
  }
  CHECK(aligned > pc.size() * 9 / 10);
}

TEST_CASE("normals fall back to knn in sparse regions") {
  // Radius far too small to find neighbours: the k=10 fallback must still
  // produce unit normals rather than failing.
  Rng rng(19);
  const PointCloud pc = random_blob(rng, 40);
  const Eigen::MatrixX3d normals = estimate_normals(pc, 1e-6);
  for (int i = 0; i < normals.rows(); ++i)
    CHECK(normals.row(i).norm() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(estimate_normals(PointCloud({{0, 0, 0}, {1, 0, 0}}), 0.1),
                  std::invalid_argument);
}

TEST_CASE("fpfh has the configured shape and block normalization") {
  Rng rng(23);
  const PointCloud pc = random_blob(rng, 300);
  FpfhConfig cfg;
  const FeatureSet fs = compute_fpfh(pc, cfg);
  REQUIRE(fs.size() == 300);
  REQUIRE(fs.dim() == 33);
  CHECK(fs.features.allFinite());
  CHECK(fs.features.minCoeff() >= 0.0);
  for (int i = 0; i < fs.size(); ++i) {
    for (int block = 0; block < 3; ++block) {
      const double sum = fs.features.row(i).segment(block * 11, 11).sum();
      // Sub-histogram normalized to 100, or all-zero when no pairs fell in it.
      CHECK((std::abs(sum - 100.0) < 1e-9 || sum == 0.0));
    }
  }

  FpfhConfig wide;
  wide.bins_per_angle = 5;
  CHECK(compute_fpfh(pc, wide).dim() == 15);
}

TEST_CASE("fpfh is invariant under rigid motion") {
  Rng rng(29);
  const PointCloud pc = random_blob(rng, 400);
  const RigidTransform t = random_transform(75.0, 2.0, rng);
  const PointCloud moved = apply_transform(t, pc);
  const FeatureSet a = compute_fpfh(pc);
  const FeatureSet b = compute_fpfh(moved);
  CHECK((a.features - b.features).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("fpfh distinguishes flat from curved neighbourhoods") {
  Rng rng(31);
  const PointCloud plane = grid_plane(15, 0.05);
  PointCloud sphere = random_sphere(rng, 225);
  for (auto& p : sphere.points) p *= 0.35;  // comparable footprint
  const Eigen::RowVectorXd f_plane = compute_fpfh(plane).features.colwise().mean();
  const Eigen::RowVectorXd f_sphere = compute_fpfh(sphere).features.colwise().mean();
  CHECK((f_plane - f_sphere).cwiseAbs().maxCoeff() > 1.0);
}

TEST_CASE("fpfh input validation") {
  PointCloud two({{0, 0, 0}, {1, 1, 1}});
  CHECK_THROWS_AS(compute_fpfh(two), std::invalid_argument);
  FpfhConfig bad;
  bad.normal_radius = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = FpfhConfig{};
  bad.bins_per_angle = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = FpfhConfig{};
  bad.feature_radius = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("stub extractor emits constant rows and the factory dispatches") {
  const StubExtractor stub(5, 2.5);
  Rng rng(37);
  const PointCloud pc = random_blob(rng, 10);
  const FeatureSet fs = stub.compute(pc);
  REQUIRE(fs.size() == 10);
  REQUIRE(fs.dim() == 5);
  CHECK((fs.features.array() == 2.5).all());

  auto fpfh = make_extractor("fpfh");
  CHECK(std::string(fpfh->name()) == "fpfh");
  CHECK(fpfh->dim() == 33);
  auto st = make_extractor("stub");
  CHECK(std::string(st->name()) == "stub");
  CHECK_THROWS_AS(make_extractor("unknown"), std::invalid_argument);
}

TEST_CASE("extract enforces the one-row-per-point contract") {
  Rng rng(41);
  const PointCloud pc = random_blob(rng, 64);
  const FpfhExtractor fpfh{FpfhConfig{}};
  const FeatureSet fs = extract(fpfh, pc);
  CHECK(fs.size() == pc.size());
  CHECK(fs.features.allFinite());
}
