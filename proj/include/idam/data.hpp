#pragma once

#include <array>
#include <string>
#include <vector>

#include "idam/geometry.hpp"

namespace idam {

class Rng;

struct TriangleMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> faces;
};

// ASCII OFF (including the counts-on-first-line variant) and ASCII PLY.
// Polygons are fan-triangulated. Throws std::runtime_error on malformed
// headers or out-of-range indices.
TriangleMesh load_mesh(const std::string& path);

// Centers at the centroid and scales so the largest radius is 1.
PointCloud normalize_unit(const PointCloud& pc);

// n area-uniform surface samples, normalized with normalize_unit.
// Throws when every face has zero area.
PointCloud sample_surface(const TriangleMesh& mesh, int n, Rng& rng);

enum class PrimitiveKind { Sphere, Box, Cylinder, Torus };

PrimitiveKind primitive_kind_from_string(const std::string& name);
const char* primitive_kind_name(PrimitiveKind kind);

// Area-uniform samples of the canonical primitive surface, unnormalized.
PointCloud primitive_surface_samples(PrimitiveKind kind, int n, Rng& rng);

// primitive_surface_samples followed by normalize_unit.
PointCloud synth_primitive(PrimitiveKind kind, int n, Rng& rng);

struct PairProvenance {
  std::string shape_id;
  uint64_t seed = 0;
  bool cropped = false;
  bool noisy = false;
};

struct RegistrationPair {
  PointCloud source;
  PointCloud target;
  RigidTransform ground_truth;  // maps source coordinates onto target
  PairProvenance provenance;
};

struct PairConfig {
  double rot_max_deg = 45.0;
  double trans_max = 0.5;
  int crop = 0;               // 0 keeps both clouds whole
  double far_distance = 5.0;  // crop pivot radius
  bool noise = false;
  double noise_sigma = 0.01;
  double noise_clip = 0.05;
};

// Target = random rigid motion of the cloud. With crop > 0 both clouds are
// cut to the crop points nearest one shared pivot drawn at far_distance
// (expressed in each cloud's own frame through the ground truth), then
// clipped Gaussian noise is added independently to both when enabled.
RegistrationPair make_pair(const PointCloud& pc, const PairConfig& cfg, Rng& rng,
                           std::string shape_id = "", uint64_t seed = 0);

struct ManifestEntry {
  std::string source;  // "primitive:<kind>" or "mesh:<path>"
  std::string split;   // "train" or "test"
  std::string category;
};

// Line-oriented "<source> <split> <category>" listings. read_manifest
// reports the offending line number for unknown split tags.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

// Whitespace-separated XYZ text, one point per line.
PointCloud read_xyz(const std::string& path);
void write_xyz(const std::string& path, const PointCloud& pc);

// Pair file: "<n_src> <n_tgt>" header, source then target points one per
// line, a 12-number ground-truth line (row-major rotation then translation),
// and a provenance line. Round-trips bit-exactly.
void write_pair(const std::string& path, const RegistrationPair& pair);
RegistrationPair read_pair(const std::string& path);

}  // namespace idam
