#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <vector>

#include "ncdseg/rng.hpp"
#include "ncdseg/types.hpp"

namespace ncdseg {

/// Random rigid + scale + jitter transform parameters. The two views of the
/// swapped-prediction task each sample one independently.
struct AugmentationPolicy {
  double rotation_z_min = 0.0;
  double rotation_z_max = 2.0 * std::numbers::pi;
  double scale_min = 0.95;
  double scale_max = 1.05;
  double flip_prob_x = 0.5;
  double flip_prob_y = 0.5;
  double jitter_sigma = 0.01;  // meters

  static AugmentationPolicy identity() {
    AugmentationPolicy p;
    p.rotation_z_min = p.rotation_z_max = 0.0;
    p.scale_min = p.scale_max = 1.0;
    p.flip_prob_x = p.flip_prob_y = 0.0;
    p.jitter_sigma = 0.0;
    return p;
  }
};

namespace detail {

inline LabeledCloud augment_once(const LabeledCloud& cloud,
                                 const AugmentationPolicy& policy,
                                 RngStream& rng) {
  const double theta = rng.uniform(policy.rotation_z_min, policy.rotation_z_max);
  const double scale = rng.uniform(policy.scale_min, policy.scale_max);
  const bool flip_x = rng.bernoulli(policy.flip_prob_x);
  const bool flip_y = rng.bernoulli(policy.flip_prob_y);

  Eigen::Matrix3d rot;
  rot << std::cos(theta), -std::sin(theta), 0.0,  //
      std::sin(theta), std::cos(theta), 0.0,      //
      0.0, 0.0, 1.0;

  LabeledCloud out = cloud;
  out.coords = (rot * cloud.coords) * scale;
  if (flip_x) out.coords.row(0) *= -1.0;
  if (flip_y) out.coords.row(1) *= -1.0;
  if (policy.jitter_sigma > 0.0) {
    for (Eigen::Index i = 0; i < out.coords.cols(); ++i)
      for (int a = 0; a < 3; ++a)
        out.coords(a, i) += rng.normal(0.0, policy.jitter_sigma);
  }
  return out;
}

}  // namespace detail

/// Two independently augmented views of the same cloud. Labels, masks and
/// point order are untouched, so per-point correspondence between the views
/// is the identity.
inline std::pair<LabeledCloud, LabeledCloud> augment_pair(
    const LabeledCloud& cloud, const AugmentationPolicy& policy,
    RngStream& rng) {
  if (cloud.size() == 0) throw EmptyCloud("cannot augment an empty cloud");
  LabeledCloud v1 = detail::augment_once(cloud, policy, rng);
  LabeledCloud v2 = detail::augment_once(cloud, policy, rng);
  return {std::move(v1), std::move(v2)};
}

/// Quantization of a cloud to a regular grid: voxel index is
/// floor(coord / voxel_size) per axis, the representative of a voxel is its
/// lowest original point index.
struct VoxelGrid {
  double voxel_size = 0.05;
  std::vector<int> point_to_rep;       // original index -> representative slot
  std::vector<int> representatives;    // slot -> original point index

  size_t num_voxels() const { return representatives.size(); }
};

inline VoxelGrid voxelize(const LabeledCloud& cloud, double voxel_size) {
  if (voxel_size <= 0.0) throw ShapeMismatch("voxel_size must be positive");
  VoxelGrid grid;
  grid.voxel_size = voxel_size;
  grid.point_to_rep.assign(cloud.size(), -1);

  std::map<std::array<int64_t, 3>, int> slot_of;
  for (size_t i = 0; i < cloud.size(); ++i) {
    std::array<int64_t, 3> key;
    for (int a = 0; a < 3; ++a)
      key[a] = static_cast<int64_t>(
          std::floor(cloud.coords(a, static_cast<Eigen::Index>(i)) / voxel_size));
    auto [it, inserted] =
        slot_of.try_emplace(key, static_cast<int>(grid.representatives.size()));
    if (inserted) grid.representatives.push_back(static_cast<int>(i));
    grid.point_to_rep[i] = it->second;
  }
  return grid;
}

/// Indices of the k nearest neighbours of every point (self included, ties by
/// lower index). k is capped at the point count.
inline std::vector<std::vector<int>> knn_indices(const Eigen::Matrix3Xd& coords,
                                                 int k) {
  const int m = static_cast<int>(coords.cols());
  const int kk = std::min(k, m);
  std::vector<std::vector<int>> out(m);
  std::vector<std::pair<double, int>> dist(m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j)
      dist[j] = {(coords.col(i) - coords.col(j)).squaredNorm(), j};
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    out[i].resize(kk);
    for (int n = 0; n < kk; ++n) out[i][n] = dist[n].second;
  }
  return out;
}

}  // namespace ncdseg
