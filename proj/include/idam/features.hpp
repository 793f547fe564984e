#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>

#include "idam/geometry.hpp"

namespace idam {

// Per-point descriptor rows, N x K.
struct FeatureSet {
  Eigen::MatrixXd features;

  int size() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

struct FpfhConfig {
  double normal_radius = 0.1;
  double feature_radius = 0.2;
  int bins_per_angle = 11;  // descriptor width K = 3 * bins_per_angle

  void validate() const;
};

// Unit normals from the covariance of each point's radius neighbourhood
// (k = 10 fallback when fewer than 3 neighbours), signed to point away from
// the cloud centroid. Throws on clouds with fewer than 3 points.
Eigen::MatrixX3d estimate_normals(const PointCloud& pc, double radius);

// Fast point feature histograms: per-point Darboux-angle histograms
// aggregated over the radius neighbourhood with 1/distance weights, each
// angle's sub-histogram normalized to sum 100 (all-zero ones left at zero).
FeatureSet compute_fpfh(const PointCloud& pc, const FpfhConfig& cfg = {});

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual const char* name() const = 0;
  virtual int dim() const = 0;
  virtual FeatureSet compute(const PointCloud& pc) const = 0;
};

class FpfhExtractor final : public FeatureExtractor {
 public:
  explicit FpfhExtractor(FpfhConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }
  const char* name() const override { return "fpfh"; }
  int dim() const override { return 3 * cfg_.bins_per_angle; }
  FeatureSet compute(const PointCloud& pc) const override { return compute_fpfh(pc, cfg_); }

 private:
  FpfhConfig cfg_;
};

// Constant rows; exists so the pipeline can be exercised without geometry
// features.
class StubExtractor final : public FeatureExtractor {
 public:
  explicit StubExtractor(int dim = 33, double value = 1.0) : dim_(dim), value_(value) {}
  const char* name() const override { return "stub"; }
  int dim() const override { return dim_; }
  FeatureSet compute(const PointCloud& pc) const override;

 private:
  int dim_;
  double value_;
};

// "fpfh" or "stub"; throws std::invalid_argument for anything else.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name,
                                                 const FpfhConfig& cfg = {});

// Dispatch wrapper enforcing the extractor contract (one finite row per
// point).
FeatureSet extract(const FeatureExtractor& extractor, const PointCloud& pc);

}  // namespace idam
