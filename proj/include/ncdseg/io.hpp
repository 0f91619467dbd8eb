#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ncdseg/rng.hpp"
#include "ncdseg/types.hpp"

namespace ncdseg {

// ---------------------------------------------------------------------------
// Text format helpers.
//
// All real values in data files are float32-precision and serialized with 9
// significant digits, which round-trips float32 exactly. Loaders quantize to
// float32 on the way in so save(load(x)) is byte-identical and in-memory
// round trips are bit-exact.
// ---------------------------------------------------------------------------

inline double quantize_f32(double v) {
  return static_cast<double>(static_cast<float>(v));
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline double parse_real(const std::string& tok, const std::string& context) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size() || tok.empty())
    throw ParseError(context + ": bad real value '" + tok + "'");
  if (!std::isfinite(v))
    throw ParseError(context + ": non-finite value '" + tok + "'");
  return quantize_f32(v);
}

inline long parse_int(const std::string& tok, const std::string& context) {
  char* end = nullptr;
  const long v = std::strtol(tok.c_str(), &end, 10);
  if (end != tok.c_str() + tok.size() || tok.empty())
    throw ParseError(context + ": bad integer '" + tok + "'");
  return v;
}

inline std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

/// Default dataset directory: $NCD_DATA_ROOT, or "." when unset.
inline std::string data_root() {
  const char* env = std::getenv("NCD_DATA_ROOT");
  return env && *env ? env : ".";
}

// ---------------------------------------------------------------------------
// Cloud format.
//
//   ncdpc v1 <n_points> <has_color> <D_a_or_0>
//   x y z [r g b] label novel_flag
//
// D_a_or_0 advertises the dimensionality of the companion aux-feature file
// (0 when the cloud has none); the vectors themselves live in a separate
// file so one cloud can pair with different feature providers.
// ---------------------------------------------------------------------------

inline LabeledCloud load_cloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cloud file " + path);

  std::string header;
  if (!std::getline(in, header)) throw EmptyCloud("empty cloud file " + path);
  const auto h = split_tokens(header);
  if (h.size() != 5 || h[0] != "ncdpc" || h[1] != "v1")
    throw ParseError(path + ": bad header '" + header + "'");
  const long n = parse_int(h[2], path);
  const long has_color = parse_int(h[3], path);
  if (n <= 0) throw EmptyCloud(path + ": declared point count " + h[2]);
  if (has_color != 0 && has_color != 1)
    throw ParseError(path + ": has_color must be 0 or 1");
  const size_t fields = has_color ? 8 : 5;

  Eigen::Matrix3Xd coords(3, n);
  Eigen::Matrix3Xd colors(3, has_color ? n : 0);
  std::vector<int> labels(n);
  std::vector<uint8_t> mask(n);

  std::string line;
  for (long i = 0; i < n; ++i) {
    if (!std::getline(in, line))
      throw ParseError(path + ": expected " + std::to_string(n) +
                       " points, file ends at " + std::to_string(i));
    const auto t = split_tokens(line);
    if (t.size() != fields)
      throw ParseError(path + ": row " + std::to_string(i) + " has " +
                       std::to_string(t.size()) + " fields, expected " +
                       std::to_string(fields));
    for (int a = 0; a < 3; ++a) coords(a, i) = parse_real(t[a], path);
    size_t k = 3;
    if (has_color)
      for (int a = 0; a < 3; ++a) colors(a, i) = parse_real(t[k++], path);
    labels[i] = static_cast<int>(parse_int(t[k], path));
    const long flag = parse_int(t[k + 1], path);
    if (flag != 0 && flag != 1)
      throw ParseError(path + ": novel_flag must be 0 or 1");
    mask[i] = static_cast<uint8_t>(flag);
  }
  return LabeledCloud(std::move(coords), std::move(colors), std::move(labels),
                      std::move(mask));
}

inline void save_cloud(const LabeledCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write cloud file " + path);
  const long n = static_cast<long>(cloud.size());
  out << "ncdpc v1 " << n << ' ' << (cloud.has_color() ? 1 : 0) << " 0\n";
  for (long i = 0; i < n; ++i) {
    out << format_real(cloud.coords(0, i)) << ' '
        << format_real(cloud.coords(1, i)) << ' '
        << format_real(cloud.coords(2, i));
    if (cloud.has_color())
      out << ' ' << format_real(cloud.colors(0, i)) << ' '
          << format_real(cloud.colors(1, i)) << ' '
          << format_real(cloud.colors(2, i));
    out << ' ' << cloud.labels_[i] << ' ' << int(cloud.novel_mask[i]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Aux feature format.
//
//   ncdaux v1 <point_count> <D_a> <cloud_id>
//   f_0 ... f_{D_a-1}          (one row per point, aligned by index)
// ---------------------------------------------------------------------------

inline FeatureMatrix load_aux_features(const std::string& path,
                                       const LabeledCloud& cloud) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open aux feature file " + path);
  std::string header;
  if (!std::getline(in, header)) throw ParseError(path + ": empty file");
  const auto h = split_tokens(header);
  if (h.size() != 5 || h[0] != "ncdaux" || h[1] != "v1")
    throw ParseError(path + ": bad header '" + header + "'");
  const long n = parse_int(h[2], path);
  const long dim = parse_int(h[3], path);
  if (dim <= 0) throw ParseError(path + ": feature dim must be positive");
  if (n != static_cast<long>(cloud.size()))
    throw CountMismatch(path + ": file has " + std::to_string(n) +
                        " rows for a cloud of " + std::to_string(cloud.size()) +
                        " points");

  FeatureMatrix f(dim, n);
  std::string line;
  for (long i = 0; i < n; ++i) {
    if (!std::getline(in, line))
      throw ParseError(path + ": file ends at row " + std::to_string(i));
    const auto t = split_tokens(line);
    if (static_cast<long>(t.size()) != dim)
      throw ParseError(path + ": row " + std::to_string(i) + " has " +
                       std::to_string(t.size()) + " values, expected " +
                       std::to_string(dim));
    for (long d = 0; d < dim; ++d) f(d, i) = parse_real(t[d], path);
  }
  return f;
}

inline void save_aux_features(const FeatureMatrix& features,
                              const std::string& cloud_id,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write aux feature file " + path);
  out << "ncdaux v1 " << features.cols() << ' ' << features.rows() << ' '
      << (cloud_id.empty() ? "unnamed" : cloud_id) << '\n';
  for (Eigen::Index i = 0; i < features.cols(); ++i) {
    for (Eigen::Index d = 0; d < features.rows(); ++d) {
      if (d) out << ' ';
      out << format_real(features(d, i));
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Split config format: one `key = value-or-list` per line, e.g.
//
//   dataset = semanticposs
//   split = POSS-3^3
//   classes = bike:0 building:1 ... trunk:12
//   base = bike building car fence ground person plants pole traffic-sign trunk
//   novel = cone-stone rider trashcan
// ---------------------------------------------------------------------------

inline NcdTaskSpec load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file " + path);

  std::map<std::string, int> name_to_id;
  std::vector<std::string> base_names, novel_names;
  NcdTaskSpec task;

  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(path + ": expected 'key = value' in '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "dataset") {
      task.dataset = value;
    } else if (key == "split") {
      task.split_name = value;
    } else if (key == "classes") {
      for (const auto& tok : split_tokens(value)) {
        const auto colon = tok.find(':');
        if (colon == std::string::npos)
          throw ParseError(path + ": class entry '" + tok +
                           "' is not name:id");
        const std::string name = tok.substr(0, colon);
        const int id =
            static_cast<int>(parse_int(tok.substr(colon + 1), path));
        if (name_to_id.count(name))
          throw ParseError(path + ": duplicate class name " + name);
        name_to_id[name] = id;
        task.class_names[id] = name;
      }
    } else if (key == "base") {
      base_names = split_tokens(value);
    } else if (key == "novel") {
      novel_names = split_tokens(value);
    } else {
      throw ParseError(path + ": unknown key '" + key + "'");
    }
  }

  auto resolve = [&](const std::vector<std::string>& names,
                     std::vector<int>& out) {
    for (const auto& name : names) {
      auto it = name_to_id.find(name);
      if (it == name_to_id.end())
        throw UnknownClassName(path + ": class '" + name +
                               "' missing from the classes map");
      out.push_back(it->second);
    }
  };
  resolve(base_names, task.base_classes);
  resolve(novel_names, task.novel_classes);

  for (const auto& name : novel_names)
    if (std::find(base_names.begin(), base_names.end(), name) !=
        base_names.end())
      throw DisjointnessViolation(path + ": class '" + name +
                                  "' listed as both base and novel");
  if (base_names.size() + novel_names.size() != name_to_id.size())
    throw ParseError(path +
                     ": base + novel must cover every class exactly once");
  return task;
}

inline void save_split(const NcdTaskSpec& task, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write split file " + path);
  out << "dataset = " << task.dataset << '\n';
  out << "split = " << task.split_name << '\n';
  out << "classes =";
  for (const auto& [id, name] : task.class_names)
    out << ' ' << name << ':' << id;
  out << '\n';
  out << "base =";
  for (int id : task.base_classes) out << ' ' << task.class_name(id);
  out << '\n';
  out << "novel =";
  for (int id : task.novel_classes) out << ' ' << task.class_name(id);
  out << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

enum class GeneratorKind { kPlane, kBox, kCylinder, kSphere, kScatter };

inline const char* to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::kPlane: return "plane";
    case GeneratorKind::kBox: return "box";
    case GeneratorKind::kCylinder: return "cylinder";
    case GeneratorKind::kSphere: return "sphere";
    case GeneratorKind::kScatter: return "scatter";
  }
  return "?";
}

/// Pose sampling box for one class instance: the instance center is drawn
/// uniformly from [center_min, center_max] and its size from
/// [extent_min, extent_max].
struct PoseRange {
  Eigen::Vector3d center_min = Eigen::Vector3d::Zero();
  Eigen::Vector3d center_max = Eigen::Vector3d::Zero();
  double extent_min = 1.0;
  double extent_max = 1.0;
};

struct ClassGeometry {
  int class_id = 0;
  GeneratorKind kind = GeneratorKind::kScatter;
  PoseRange pose;
  int point_budget = 0;
};

struct SynthSceneSpec {
  std::vector<ClassGeometry> classes;
  double noise_sigma = 0.01;        // meters
  double aux_embedding_sigma = 0.2; // feature-space noise scale
  int aux_dim = 16;
  uint64_t seed = 0;
};

/// Class-conditional anchor vector in feature space; depends only on the
/// class id and dimensionality, never on the scene seed.
inline Vector class_anchor(int class_id, int dim) {
  RngStream rng(0x5eedau, 9000 + static_cast<uint64_t>(class_id));
  Vector v(dim);
  for (int d = 0; d < dim; ++d) v[d] = rng.normal();
  v.normalize();
  return v;
}

namespace detail {

inline Eigen::Vector3d sample_on_kind(GeneratorKind kind, double extent,
                                      RngStream& rng) {
  switch (kind) {
    case GeneratorKind::kPlane:
      return {rng.uniform(-extent, extent), rng.uniform(-extent, extent), 0.0};
    case GeneratorKind::kBox: {
      const int face = static_cast<int>(rng.index(6));
      const double u = rng.uniform(-extent, extent);
      const double v = rng.uniform(-extent, extent);
      const double s = (face % 2 == 0) ? extent : -extent;
      if (face / 2 == 0) return {s, u, v};
      if (face / 2 == 1) return {u, s, v};
      return {u, v, s};
    }
    case GeneratorKind::kCylinder: {
      const double radius = 0.25 * extent;
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      return {radius * std::cos(theta), radius * std::sin(theta),
              rng.uniform(-extent, extent)};
    }
    case GeneratorKind::kSphere: {
      Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
      while (dir.norm() < 1e-12)
        dir = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
      return extent * dir.normalized();
    }
    case GeneratorKind::kScatter: {
      Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
      while (dir.norm() < 1e-12)
        dir = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
      const double r = extent * std::cbrt(rng.uniform01());
      return r * dir.normalized();
    }
  }
  return Eigen::Vector3d::Zero();
}

}  // namespace detail

/// Deterministic scene generation: equal specs give bit-identical clouds and
/// aux features. The novel mask is left all-false; apply_split_mask stamps it
/// from a task spec.
inline std::pair<LabeledCloud, FeatureMatrix> generate_synthetic_scene(
    const SynthSceneSpec& spec) {
  long total = 0;
  for (const auto& c : spec.classes) {
    if (c.point_budget <= 0)
      throw ParseError("class " + std::to_string(c.class_id) +
                       " has non-positive point budget");
    total += c.point_budget;
  }
  if (total == 0) throw EmptyCloud("scene spec has no points");

  RngStream rng(spec.seed, 1);
  Eigen::Matrix3Xd coords(3, total);
  std::vector<int> labels(total);
  std::vector<uint8_t> mask(total, 0);

  long at = 0;
  for (const auto& c : spec.classes) {
    Eigen::Vector3d center;
    for (int a = 0; a < 3; ++a)
      center[a] = rng.uniform(c.pose.center_min[a], c.pose.center_max[a]);
    const double extent = rng.uniform(c.pose.extent_min, c.pose.extent_max);
    for (int i = 0; i < c.point_budget; ++i, ++at) {
      Eigen::Vector3d p =
          center + detail::sample_on_kind(c.kind, extent, rng);
      for (int a = 0; a < 3; ++a)
        coords(a, at) = quantize_f32(p[a] + rng.normal(0.0, spec.noise_sigma));
      labels[at] = c.class_id;
    }
  }

  FeatureMatrix aux(spec.aux_dim, total);
  for (long i = 0; i < total; ++i) {
    const Vector anchor = class_anchor(labels[i], spec.aux_dim);
    for (int d = 0; d < spec.aux_dim; ++d)
      aux(d, i) =
          quantize_f32(anchor[d] + rng.normal(0.0, spec.aux_embedding_sigma));
  }

  return {LabeledCloud(std::move(coords), Eigen::Matrix3Xd(3, 0),
                       std::move(labels), std::move(mask)),
          std::move(aux)};
}

/// Stamps the novel mask of a generated cloud from the task's novel set.
inline LabeledCloud apply_split_mask(const LabeledCloud& cloud,
                                     const NcdTaskSpec& task) {
  std::vector<int> labels(cloud.size());
  std::vector<uint8_t> mask(cloud.size());
  for (size_t i = 0; i < cloud.size(); ++i) {
    labels[i] = cloud.train_label(i);  // generator clouds are all base-masked
    mask[i] = task.is_novel(labels[i]) ? 1 : 0;
  }
  return LabeledCloud(cloud.coords, cloud.colors, std::move(labels),
                      std::move(mask));
}

// ---------------------------------------------------------------------------
// Shipped scenarios. Scene composition is randomized per scene index but
// fully determined by (scenario seed, scene index).
// ---------------------------------------------------------------------------

struct Scenario {
  NcdTaskSpec task;
  std::vector<LabeledCloud> clouds;        // masks already stamped
  std::vector<FeatureMatrix> aux;          // aligned with clouds
};

namespace detail {

inline PoseRange pose(double cx_lo, double cx_hi, double cy_lo, double cy_hi,
                      double cz_lo, double cz_hi, double e_lo, double e_hi) {
  PoseRange p;
  p.center_min = {cx_lo, cy_lo, cz_lo};
  p.center_max = {cx_hi, cy_hi, cz_hi};
  p.extent_min = e_lo;
  p.extent_max = e_hi;
  return p;
}

}  // namespace detail

/// 4 base + 3 novel geometric classes. Every class occupies its own band in
/// (height, distance-from-origin, local shape), all of which survive the
/// rotation/flip augmentations.
inline SynthSceneSpec separable_scene_spec(uint64_t scenario_seed,
                                           int scene_index,
                                           double aux_sigma = 0.2) {
  using detail::pose;
  SynthSceneSpec s;
  s.noise_sigma = 0.01;
  s.aux_embedding_sigma = aux_sigma;
  s.aux_dim = 16;
  s.seed = fnv1a(std::string("separable"), scenario_seed * 1315423911ULL +
                                  static_cast<uint64_t>(scene_index));
  s.classes = {
      // base: ground plane, high canopy, near crate, far clutter
      {0, GeneratorKind::kPlane, pose(-0.2, 0.2, -0.2, 0.2, 0.0, 0.0, 2.4, 2.8), 140},
      {1, GeneratorKind::kPlane, pose(-0.3, 0.3, -0.3, 0.3, 2.3, 2.6, 1.0, 1.4), 70},
      {2, GeneratorKind::kBox, pose(0.55, 0.75, -0.15, 0.15, 0.30, 0.40, 0.25, 0.35), 60},
      {3, GeneratorKind::kScatter, pose(2.7, 2.9, -0.2, 0.2, 0.85, 1.05, 0.50, 0.60), 50},
      // novel: floating sphere, central pillar, elevated outer shelf
      {4, GeneratorKind::kSphere, pose(1.35, 1.45, -0.1, 0.1, 1.15, 1.35, 0.30, 0.35), 60},
      {5, GeneratorKind::kCylinder, pose(-0.15, 0.15, -0.15, 0.15, 0.75, 0.85, 0.70, 0.80), 60},
      {6, GeneratorKind::kPlane, pose(1.95, 2.10, -0.15, 0.15, 1.5, 1.7, 0.40, 0.55), 60},
  };
  return s;
}

inline NcdTaskSpec separable_task() {
  NcdTaskSpec t;
  t.dataset = "synthetic";
  t.split_name = "separable-3^0";
  t.base_classes = {0, 1, 2, 3};
  t.novel_classes = {4, 5, 6};
  t.class_names = {{0, "ground"}, {1, "canopy"},   {2, "crate"}, {3, "clutter"},
                   {4, "sphere"}, {5, "pillar"}, {6, "shelf"}};
  return t;
}

/// 4 base + 4 novel classes with a long-tailed novel distribution: rare novel
/// classes have small budgets and drop out of many scenes entirely.
inline SynthSceneSpec longtail_scene_spec(uint64_t scenario_seed,
                                          int scene_index,
                                          double aux_sigma = 0.2) {
  using detail::pose;
  SynthSceneSpec s;
  s.noise_sigma = 0.01;
  s.aux_embedding_sigma = aux_sigma;
  s.aux_dim = 16;
  s.seed = fnv1a(std::string("longtail"), scenario_seed * 2654435761ULL +
                                 static_cast<uint64_t>(scene_index));
  s.classes = {
      {0, GeneratorKind::kPlane, pose(-0.2, 0.2, -0.2, 0.2, 0.0, 0.0, 2.4, 2.8), 150},
      {1, GeneratorKind::kPlane, pose(-0.3, 0.3, -0.3, 0.3, 2.3, 2.6, 1.0, 1.4), 60},
      {2, GeneratorKind::kBox, pose(0.55, 0.75, -0.15, 0.15, 0.30, 0.40, 0.25, 0.35), 50},
      {3, GeneratorKind::kScatter, pose(2.7, 2.9, -0.2, 0.2, 0.85, 1.05, 0.50, 0.60), 40},
      {4, GeneratorKind::kSphere, pose(1.35, 1.45, -0.1, 0.1, 1.15, 1.35, 0.30, 0.35), 110},
      {5, GeneratorKind::kCylinder, pose(-0.15, 0.15, -0.15, 0.15, 0.75, 0.85, 0.70, 0.80), 55},
      {6, GeneratorKind::kPlane, pose(1.95, 2.10, -0.15, 0.15, 1.5, 1.7, 0.40, 0.55), 30},
      {7, GeneratorKind::kBox, pose(0.90, 1.10, -0.1, 0.1, 1.9, 2.1, 0.14, 0.20), 20},
  };
  // Rare classes appear in only a fraction of scenes.
  RngStream presence(s.seed, 77);
  const double keep_prob[8] = {1, 1, 1, 1, 1.0, 0.9, 0.7, 0.5};
  std::vector<ClassGeometry> kept;
  for (size_t k = 0; k < s.classes.size(); ++k)
    if (presence.bernoulli(keep_prob[k])) kept.push_back(s.classes[k]);
  s.classes = std::move(kept);
  return s;
}

inline NcdTaskSpec longtail_task() {
  NcdTaskSpec t;
  t.dataset = "synthetic";
  t.split_name = "longtail-4^0";
  t.base_classes = {0, 1, 2, 3};
  t.novel_classes = {4, 5, 6, 7};
  t.class_names = {{0, "ground"}, {1, "canopy"}, {2, "crate"},
                   {3, "clutter"}, {4, "sphere"}, {5, "pillar"},
                   {6, "shelf"},  {7, "beacon"}};
  return t;
}

inline Scenario make_scenario(const std::string& preset, int n_scenes,
                              uint64_t seed, double aux_sigma = 0.2,
                              int scene_index_offset = 0) {
  Scenario sc;
  if (preset == "separable")
    sc.task = separable_task();
  else if (preset == "longtail")
    sc.task = longtail_task();
  else
    throw ParseError("unknown scenario preset '" + preset + "'");

  for (int i = 0; i < n_scenes; ++i) {
    const int idx = scene_index_offset + i;
    SynthSceneSpec spec = preset == "separable"
                              ? separable_scene_spec(seed, idx, aux_sigma)
                              : longtail_scene_spec(seed, idx, aux_sigma);
    auto [cloud, aux] = generate_synthetic_scene(spec);
    sc.clouds.push_back(apply_split_mask(cloud, sc.task));
    sc.aux.push_back(std::move(aux));
  }
  return sc;
}

}  // namespace ncdseg
