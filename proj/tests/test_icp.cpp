#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Geometry>
#include <cmath>

#include "idam/data.hpp"
#include "idam/geometry.hpp"
#include "idam/icp.hpp"
#include "idam/procrustes.hpp"
#include "idam/rng.hpp"

using namespace idam;

namespace {

RigidTransform small_motion(double angle_deg, const Eigen::Vector3d& axis,
                            const Eigen::Vector3d& t) {
  RigidTransform out;
  out.rotation =
      Eigen::AngleAxisd(angle_deg * std::numbers::pi / 180.0, axis.normalized()).toRotationMatrix();
  out.translation = t;
  return out;
}

}  // namespace

TEST_CASE("identical clouds converge immediately to the identity") {
  Rng rng(41);
  const PointCloud pc = synth_primitive(PrimitiveKind::Torus, 200, rng);
  const RegistrationResult res = icp_register(pc, pc);

  CHECK(res.iterations.size() <= 2);
  CHECK(rotation_angle_deg(res.transform.rotation) < 1e-9);
  CHECK(res.transform.translation.norm() < 1e-12);
  CHECK(res.iterations.front().objective == 0.0);
  // Full-cloud matching reports no elimination and no point scores.
  CHECK(res.kept_source.empty());
  CHECK(res.kept_target.empty());
  CHECK(res.validity.size() == 0);
}

TEST_CASE("a five-degree motion of a duplicate cloud is recovered exactly") {
  Rng rng(42);
  const PointCloud src = synth_primitive(PrimitiveKind::Box, 300, rng);
  const RigidTransform gt =
      small_motion(5.0, Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(0.03, -0.02, 0.05));
  const PointCloud tgt = apply_transform(gt, src);

  const RegistrationResult res = icp_register(src, tgt);
  const Eigen::Matrix3d rerr = res.transform.rotation * gt.rotation.transpose();
  CHECK(rotation_angle_deg(rerr) < 1e-6);
  CHECK((res.transform.translation - gt.translation).norm() < 1e-8);

  // Each iteration logs per-source correspondences and uniform weights.
  for (const auto& rec : res.iterations) {
    CHECK(static_cast<int>(rec.correspondences.size()) == src.size());
    REQUIRE(rec.weights.size() > 0);
    CHECK(rec.weights.minCoeff() == rec.weights.maxCoeff());
    CHECK(rec.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_FALSE(rec.degenerate);
  }
}

TEST_CASE("the correspondence objective never increases between iterations") {
  Rng rng(43);
  const PointCloud src = synth_primitive(PrimitiveKind::Cylinder, 250, rng);
  const RigidTransform gt =
      small_motion(25.0, Eigen::Vector3d(-1, 1, 0.5), Eigen::Vector3d(0.1, 0.05, -0.08));
  const PointCloud tgt = apply_transform(gt, src);

  const RegistrationResult res = icp_register(src, tgt);
  REQUIRE(res.iterations.size() >= 2);
  for (size_t i = 1; i < res.iterations.size(); ++i)
    CHECK(res.iterations[i].objective <= res.iterations[i - 1].objective + 1e-12);
}

TEST_CASE("trimming discards gross outliers that would otherwise bias the fit") {
  Rng rng(44);
  const PointCloud tgt = synth_primitive(PrimitiveKind::Box, 300, rng);
  PointCloud src = tgt;
  // A contaminated source: one tenth of the points pushed far off the shape.
  for (int i = 0; i < 30; ++i) src.points[i * 10] += Eigen::Vector3d(5, 0, 0);

  IcpConfig plain;
  const RegistrationResult biased = icp_register(src, tgt, plain);

  IcpConfig trimmed = plain;
  trimmed.trim = 0.15;
  const RegistrationResult clean = icp_register(src, tgt, trimmed);

  const double biased_err = biased.transform.translation.norm();
  const double clean_err = clean.transform.translation.norm();
  CHECK(clean_err < 1e-9);
  CHECK(biased_err > 1e-3);
  CHECK(clean_err < biased_err);
}

TEST_CASE("iteration budget is respected") {
  Rng rng(45);
  const PointCloud src = synth_primitive(PrimitiveKind::Torus, 150, rng);
  const RigidTransform gt = small_motion(40.0, Eigen::Vector3d(0, 0, 1), Eigen::Vector3d(0.2, 0, 0));
  const PointCloud tgt = apply_transform(gt, src);

  IcpConfig one;
  one.max_iterations = 1;
  const RegistrationResult res = icp_register(src, tgt, one);
  CHECK(res.iterations.size() == 1);
}

TEST_CASE("configuration and input validation") {
  Rng rng(46);
  const PointCloud pc = synth_primitive(PrimitiveKind::Sphere, 50, rng);

  IcpConfig cfg;
  cfg.max_iterations = 0;
  CHECK_THROWS_AS(icp_register(pc, pc, cfg), std::invalid_argument);
  cfg = {};
  cfg.trim = 1.0;
  CHECK_THROWS_AS(icp_register(pc, pc, cfg), std::invalid_argument);
  cfg.trim = -0.1;
  CHECK_THROWS_AS(icp_register(pc, pc, cfg), std::invalid_argument);
  cfg = {};
  cfg.tolerance = 0.0;
  CHECK_THROWS_AS(icp_register(pc, pc, cfg), std::invalid_argument);

  const PointCloud two(std::vector<Eigen::Vector3d>{{0, 0, 0}, {1, 0, 0}});
  CHECK_THROWS_AS(icp_register(two, pc), std::invalid_argument);
  CHECK_THROWS_AS(icp_register(pc, two), std::invalid_argument);
}

TEST_CASE("degenerate geometry propagates as a solver error") {
  PointCloud line;
  for (int i = 0; i < 10; ++i) line.points.emplace_back(0.1 * i, 0.0, 0.0);
  CHECK_THROWS_AS(icp_register(line, line), DegeneracyError);
}
