#include "idam/data.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "idam/rng.hpp"

namespace idam {

namespace {

constexpr double pi = std::numbers::pi;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

bool next_content_line(std::istream& in, std::string& line) {
  while (std::getline(in, line)) {
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '#') continue;
    return true;
  }
  return false;
}

void append_faces(TriangleMesh& mesh, const std::vector<int>& polygon, const std::string& path) {
  if (polygon.size() < 3) fail(path, "face with fewer than 3 vertices");
  const int nv = static_cast<int>(mesh.vertices.size());
  for (int idx : polygon)
    if (idx < 0 || idx >= nv) fail(path, "face index " + std::to_string(idx) + " out of range");
  for (size_t i = 1; i + 1 < polygon.size(); ++i)
    mesh.faces.push_back({polygon[0], polygon[i], polygon[i + 1]});
}

TriangleMesh load_off(std::istream& in, const std::string& path) {
  std::string line;
  if (!next_content_line(in, line)) fail(path, "empty OFF file");

  std::istringstream header(line);
  std::string magic;
  header >> magic;
  if (magic != "OFF") fail(path, "malformed OFF header");

  long nv = -1, nf = -1, ne = -1;
  if (!(header >> nv >> nf >> ne)) {
    // Counts on their own line.
    if (!next_content_line(in, line)) fail(path, "missing OFF counts");
    std::istringstream counts(line);
    if (!(counts >> nv >> nf >> ne)) fail(path, "malformed OFF counts");
  }
  if (nv < 0 || nf < 0) fail(path, "malformed OFF counts");

  TriangleMesh mesh;
  mesh.vertices.reserve(nv);
  for (long i = 0; i < nv; ++i) {
    if (!next_content_line(in, line)) fail(path, "truncated vertex list");
    std::istringstream v(line);
    double x, y, z;
    if (!(v >> x >> y >> z)) fail(path, "malformed vertex line");
    mesh.vertices.emplace_back(x, y, z);
  }
  for (long f = 0; f < nf; ++f) {
    if (!next_content_line(in, line)) fail(path, "truncated face list");
    std::istringstream fs(line);
    int cnt;
    if (!(fs >> cnt) || cnt < 3) fail(path, "malformed face line");
    std::vector<int> polygon(cnt);
    for (int i = 0; i < cnt; ++i)
      if (!(fs >> polygon[i])) fail(path, "malformed face line");
    append_faces(mesh, polygon, path);
  }
  return mesh;
}

TriangleMesh load_ply(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line) || line.substr(0, 3) != "ply") fail(path, "malformed PLY header");

  struct Element {
    std::string name;
    long count = 0;
    std::vector<std::string> scalar_props;  // in declaration order
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool ascii = false;

  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment" || tok.empty()) continue;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = (fmt == "ascii");
      if (!ascii) fail(path, "only ASCII PLY is supported");
    } else if (tok == "element") {
      Element e;
      if (!(ls >> e.name >> e.count)) fail(path, "malformed element line");
      elements.push_back(e);
    } else if (tok == "property") {
      if (elements.empty()) fail(path, "property before element");
      std::string kind;
      ls >> kind;
      if (kind == "list") {
        elements.back().has_list = true;
      } else {
        std::string name;
        ls >> name;
        elements.back().scalar_props.push_back(name);
      }
    } else if (tok == "end_header") {
      break;
    } else if (tok != "obj_info") {
      fail(path, "unrecognized PLY header line '" + tok + "'");
    }
  }
  if (!ascii) fail(path, "missing PLY format line");

  TriangleMesh mesh;
  for (const Element& e : elements) {
    if (e.name == "vertex") {
      int ix = -1, iy = -1, iz = -1;
      for (size_t i = 0; i < e.scalar_props.size(); ++i) {
        if (e.scalar_props[i] == "x") ix = static_cast<int>(i);
        if (e.scalar_props[i] == "y") iy = static_cast<int>(i);
        if (e.scalar_props[i] == "z") iz = static_cast<int>(i);
      }
      if (ix < 0 || iy < 0 || iz < 0) fail(path, "PLY vertex element lacks x/y/z");
      const int nprops = static_cast<int>(e.scalar_props.size());
      std::vector<double> vals(nprops);
      for (long i = 0; i < e.count; ++i) {
        if (!next_content_line(in, line)) fail(path, "truncated vertex list");
        std::istringstream vs(line);
        for (int p = 0; p < nprops; ++p)
          if (!(vs >> vals[p])) fail(path, "malformed vertex line");
        mesh.vertices.emplace_back(vals[ix], vals[iy], vals[iz]);
      }
    } else if (e.name == "face") {
      if (!e.has_list) fail(path, "PLY face element lacks an index list");
      for (long f = 0; f < e.count; ++f) {
        if (!next_content_line(in, line)) fail(path, "truncated face list");
        std::istringstream fs(line);
        int cnt;
        if (!(fs >> cnt) || cnt < 3) fail(path, "malformed face line");
        std::vector<int> polygon(cnt);
        for (int i = 0; i < cnt; ++i)
          if (!(fs >> polygon[i])) fail(path, "malformed face line");
        append_faces(mesh, polygon, path);
      }
    } else {
      // Unknown element: skip its data lines.
      for (long i = 0; i < e.count; ++i)
        if (!next_content_line(in, line)) fail(path, "truncated element '" + e.name + "'");
    }
  }
  return mesh;
}

Eigen::Vector3d random_unit_vector(Rng& rng) {
  const double z = rng.uniform(-1.0, 1.0);
  const double a = rng.uniform(0.0, 2.0 * pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(a), r * std::sin(a), z};
}

PointCloud keep_nearest(const PointCloud& pc, const Eigen::Vector3d& pivot, int keep) {
  std::vector<int> idx(pc.points.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double da = (pc.points[a] - pivot).squaredNorm();
    const double db = (pc.points[b] - pivot).squaredNorm();
    return da < db || (da == db && a < b);
  });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());  // preserve original ordering
  return pc.gather(idx);
}

void add_noise(PointCloud& pc, double sigma, double clip, Rng& rng) {
  for (auto& p : pc.points)
    for (int c = 0; c < 3; ++c) p(c) += rng.clipped_normal(sigma, clip);
}

void format_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

TriangleMesh load_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");

  // Peek at the first non-blank characters to pick the format.
  std::string first;
  std::streampos start = in.tellg();
  std::string line;
  while (std::getline(in, line)) {
    const size_t f = line.find_first_not_of(" \t\r");
    if (f != std::string::npos) {
      first = line.substr(f, 3);
      break;
    }
  }
  in.clear();
  in.seekg(start);

  TriangleMesh mesh;
  if (first == "OFF") mesh = load_off(in, path);
  else if (first == "ply") mesh = load_ply(in, path);
  else fail(path, "unrecognized mesh format");

  for (const auto& v : mesh.vertices)
    if (!v.allFinite()) fail(path, "non-finite vertex");
  return mesh;
}

PointCloud normalize_unit(const PointCloud& pc) {
  pc.validate();
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : pc.points) centroid += p;
  centroid /= static_cast<double>(pc.size());
  double radius = 0.0;
  for (const auto& p : pc.points) radius = std::max(radius, (p - centroid).norm());
  const double scale = radius > 0.0 ? 1.0 / radius : 1.0;
  PointCloud out;
  out.points.reserve(pc.points.size());
  for (const auto& p : pc.points) out.points.push_back((p - centroid) * scale);
  return out;
}

PointCloud sample_surface(const TriangleMesh& mesh, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_surface: sample count must be positive");
  if (mesh.faces.empty()) throw std::invalid_argument("sample_surface: mesh has no faces");

  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    const Eigen::Vector3d ab = mesh.vertices[face[1]] - mesh.vertices[face[0]];
    const Eigen::Vector3d ac = mesh.vertices[face[2]] - mesh.vertices[face[0]];
    total += 0.5 * ab.cross(ac).norm();
    cumulative[f] = total;
  }
  if (!(total > 0.0)) throw std::invalid_argument("sample_surface: mesh has no positive-area faces");

  PointCloud pc;
  pc.points.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform() * total;
    const size_t f = std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin();
    const auto& face = mesh.faces[std::min(f, mesh.faces.size() - 1)];
    const double s = std::sqrt(rng.uniform());
    const double t = rng.uniform();
    pc.points.push_back((1.0 - s) * mesh.vertices[face[0]] + s * (1.0 - t) * mesh.vertices[face[1]] +
                        s * t * mesh.vertices[face[2]]);
  }
  return normalize_unit(pc);
}

PrimitiveKind primitive_kind_from_string(const std::string& name) {
  if (name == "sphere") return PrimitiveKind::Sphere;
  if (name == "box") return PrimitiveKind::Box;
  if (name == "cylinder") return PrimitiveKind::Cylinder;
  if (name == "torus") return PrimitiveKind::Torus;
  throw std::invalid_argument("unknown primitive kind '" + name + "'");
}

const char* primitive_kind_name(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Cylinder: return "cylinder";
    case PrimitiveKind::Torus: return "torus";
  }
  throw std::invalid_argument("unknown primitive kind");
}

PointCloud primitive_surface_samples(PrimitiveKind kind, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("primitive_surface_samples: sample count must be positive");
  PointCloud pc;
  pc.points.reserve(n);

  switch (kind) {
    case PrimitiveKind::Sphere: {
      for (int i = 0; i < n; ++i) pc.points.push_back(random_unit_vector(rng));
      break;
    }
    case PrimitiveKind::Box: {
      // Unequal extents so the box has no rotational symmetry below 180 deg.
      const Eigen::Vector3d half(0.5, 0.35, 0.225);
      const double areas[3] = {half.y() * half.z(), half.x() * half.z(), half.x() * half.y()};
      const double total = 2.0 * (areas[0] + areas[1] + areas[2]);
      for (int i = 0; i < n; ++i) {
        double u = rng.uniform() * total;
        int axis = 0;
        double sign = 1.0;
        for (int a = 0; a < 3; ++a) {
          if (u < 2.0 * areas[a]) {
            axis = a;
            sign = u < areas[a] ? 1.0 : -1.0;
            break;
          }
          u -= 2.0 * areas[a];
        }
        Eigen::Vector3d p;
        p(axis) = sign * half(axis);
        const int b = (axis + 1) % 3, c = (axis + 2) % 3;
        p(b) = rng.uniform(-half(b), half(b));
        p(c) = rng.uniform(-half(c), half(c));
        pc.points.push_back(p);
      }
      break;
    }
    case PrimitiveKind::Cylinder: {
      const double radius = 0.4, height = 1.2;
      const double side = 2.0 * pi * radius * height;
      const double cap = pi * radius * radius;
      const double total = side + 2.0 * cap;
      for (int i = 0; i < n; ++i) {
        const double u = rng.uniform() * total;
        const double a = rng.uniform(0.0, 2.0 * pi);
        if (u < side) {
          const double z = rng.uniform(-height / 2.0, height / 2.0);
          pc.points.emplace_back(radius * std::cos(a), radius * std::sin(a), z);
        } else {
          const double rr = radius * std::sqrt(rng.uniform());
          const double z = u < side + cap ? height / 2.0 : -height / 2.0;
          pc.points.emplace_back(rr * std::cos(a), rr * std::sin(a), z);
        }
      }
      break;
    }
    case PrimitiveKind::Torus: {
      const double ring = 0.7, tube = 0.25;
      for (int i = 0; i < n; ++i) {
        const double u = rng.uniform(0.0, 2.0 * pi);
        // Rejection on the tube angle: surface area density is
        // proportional to ring + tube * cos(v).
        double v;
        for (;;) {
          v = rng.uniform(0.0, 2.0 * pi);
          if (rng.uniform() * (ring + tube) <= ring + tube * std::cos(v)) break;
        }
        const double w = ring + tube * std::cos(v);
        pc.points.emplace_back(w * std::cos(u), w * std::sin(u), tube * std::sin(v));
      }
      break;
    }
  }
  return pc;
}

PointCloud synth_primitive(PrimitiveKind kind, int n, Rng& rng) {
  return normalize_unit(primitive_surface_samples(kind, n, rng));
}

RegistrationPair make_pair(const PointCloud& pc, const PairConfig& cfg, Rng& rng,
                           std::string shape_id, uint64_t seed) {
  pc.validate();
  if (cfg.crop < 0 || cfg.crop > pc.size())
    throw std::invalid_argument("make_pair: crop count out of range");
  if (cfg.noise && (!(cfg.noise_sigma >= 0.0) || !(cfg.noise_clip > 0.0)))
    throw std::invalid_argument("make_pair: invalid noise parameters");

  RegistrationPair pair;
  pair.ground_truth = random_transform(cfg.rot_max_deg, cfg.trans_max, rng);
  pair.source = pc;
  pair.target = apply_transform(pair.ground_truth, pc);

  if (cfg.crop > 0) {
    const Eigen::Vector3d pivot_tgt = cfg.far_distance * random_unit_vector(rng);
    const Eigen::Vector3d pivot_src = pair.ground_truth.inverse().apply(pivot_tgt);
    pair.source = keep_nearest(pair.source, pivot_src, cfg.crop);
    pair.target = keep_nearest(pair.target, pivot_tgt, cfg.crop);
  }
  if (cfg.noise) {
    add_noise(pair.source, cfg.noise_sigma, cfg.noise_clip, rng);
    add_noise(pair.target, cfg.noise_sigma, cfg.noise_clip, rng);
  }
  pair.provenance = {std::move(shape_id), seed, cfg.crop > 0, cfg.noise};
  return pair;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.source >> e.split >> e.category))
      fail(path, "line " + std::to_string(lineno) + ": expected '<source> <split> <category>'");
    if (e.split != "train" && e.split != "test")
      fail(path, "line " + std::to_string(lineno) + ": unknown split '" + e.split + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  for (const auto& e : entries) {
    for (const std::string* s : {&e.source, &e.split, &e.category})
      if (s->empty() || s->find_first_of(" \t") != std::string::npos)
        throw std::invalid_argument("write_manifest: fields must be non-empty and whitespace-free");
    out << e.source << ' ' << e.split << ' ' << e.category << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

PointCloud read_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  PointCloud pc;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '#') continue;
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) fail(path, "line " + std::to_string(lineno) + ": expected 'x y z'");
    pc.points.emplace_back(x, y, z);
  }
  pc.validate();
  return pc;
}

void write_xyz(const std::string& path, const PointCloud& pc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  std::string buf;
  for (const auto& p : pc.points) {
    for (int c = 0; c < 3; ++c) {
      if (c) buf += ' ';
      format_double(buf, p(c));
    }
    buf += '\n';
  }
  out << buf;
  if (!out) throw std::runtime_error(path + ": write failed");
}

void write_pair(const std::string& path, const RegistrationPair& pair) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  std::string buf;
  buf += std::to_string(pair.source.size()) + ' ' + std::to_string(pair.target.size()) + '\n';
  for (const PointCloud* pc : {&pair.source, &pair.target}) {
    for (const auto& p : pc->points) {
      for (int c = 0; c < 3; ++c) {
        if (c) buf += ' ';
        format_double(buf, p(c));
      }
      buf += '\n';
    }
  }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      if (i || j) buf += ' ';
      format_double(buf, pair.ground_truth.rotation(i, j));
    }
  for (int c = 0; c < 3; ++c) {
    buf += ' ';
    format_double(buf, pair.ground_truth.translation(c));
  }
  buf += '\n';
  const auto& prov = pair.provenance;
  buf += "shape=" + (prov.shape_id.empty() ? std::string("unknown") : prov.shape_id) +
         " seed=" + std::to_string(prov.seed) + " crop=" + (prov.cropped ? "1" : "0") +
         " noise=" + (prov.noisy ? "1" : "0") + '\n';
  out << buf;
  if (!out) throw std::runtime_error(path + ": write failed");
}

RegistrationPair read_pair(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  int n_src = 0, n_tgt = 0;
  if (!(in >> n_src >> n_tgt) || n_src < 1 || n_tgt < 1) fail(path, "malformed pair header");

  RegistrationPair pair;
  auto read_points = [&](PointCloud& pc, int n) {
    pc.points.resize(n);
    for (int i = 0; i < n; ++i)
      if (!(in >> pc.points[i].x() >> pc.points[i].y() >> pc.points[i].z()))
        fail(path, "truncated point list");
  };
  read_points(pair.source, n_src);
  read_points(pair.target, n_tgt);

  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (!(in >> pair.ground_truth.rotation(i, j))) fail(path, "truncated ground-truth line");
  for (int c = 0; c < 3; ++c)
    if (!(in >> pair.ground_truth.translation(c))) fail(path, "truncated ground-truth line");

  std::string token;
  auto parse_kv = [&](const std::string& key) -> std::string {
    if (!(in >> token) || token.rfind(key + "=", 0) != 0)
      fail(path, "malformed provenance line (expected " + key + "=...)");
    return token.substr(key.size() + 1);
  };
  pair.provenance.shape_id = parse_kv("shape");
  pair.provenance.seed = std::stoull(parse_kv("seed"));
  pair.provenance.cropped = parse_kv("crop") == "1";
  pair.provenance.noisy = parse_kv("noise") == "1";

  pair.source.validate();
  pair.target.validate();
  pair.ground_truth.validate(1e-6);
  return pair;
}

}  // namespace idam
