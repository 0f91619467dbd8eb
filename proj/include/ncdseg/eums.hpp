#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "ncdseg/evaluation.hpp"
#include "ncdseg/trainer.hpp"

namespace ncdseg {

/// Offline-clustering baseline: base-only pre-training, novel-feature
/// subsampling, K-Means with over-clustering and entropy filtering,
/// nearest-neighbour label propagation, and supervised fine-tuning on hard
/// pseudo-labels.
struct EumsConfig {
  double subsample_ratio = 0.3;
  int subsample_cap = 1000;  // per cloud
  int overcluster_multiplier = 3;
  double entropy_keep_fraction = 0.5;
  int pretrain_epochs = 5;
  int finetune_epochs = 5;
  int kmeans_max_iters = 100;
};

/// Uniform sample without replacement of min(cap, ceil(ratio * n_novel))
/// novel indices.
inline std::vector<int> subsample_novel(const LabeledCloud& cloud,
                                        double ratio, int cap,
                                        RngStream& rng) {
  std::vector<int> novel;
  for (size_t i = 0; i < cloud.size(); ++i)
    if (cloud.novel_mask[i]) novel.push_back(static_cast<int>(i));
  if (novel.empty()) throw NoNovelPoints("cloud has no novel points");
  if (ratio <= 0.0 || ratio > 1.0 || cap < 1)
    throw ShapeMismatch("need 0 < ratio <= 1 and cap >= 1");

  const size_t want = std::min<size_t>(
      static_cast<size_t>(cap),
      static_cast<size_t>(std::ceil(ratio * double(novel.size()))));
  std::vector<int> out;
  for (size_t k : rng.sample_without_replacement(novel.size(), want))
    out.push_back(novel[k]);
  return out;
}

struct KmeansResult {
  Matrix centroids;              // D x k
  std::vector<int> assignments;  // point -> cluster
  std::vector<double> inertia_history;
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded at
/// the point farthest from its assigned centroid.
inline KmeansResult kmeans(const Matrix& features, int k, int max_iters,
                           uint64_t seed) {
  const Eigen::Index n = features.cols();
  const Eigen::Index dim = features.rows();
  if (n < k) throw TooFewPoints("fewer points than clusters");
  if (k < 1) throw ShapeMismatch("k must be >= 1");

  RngStream rng(seed, 5);
  KmeansResult res;
  res.centroids.resize(dim, k);

  // k-means++ seeding
  std::vector<char> chosen(static_cast<size_t>(n), 0);
  Eigen::Index first = static_cast<Eigen::Index>(rng.index(n));
  res.centroids.col(0) = features.col(first);
  chosen[static_cast<size_t>(first)] = 1;
  Vector d2 = (features.colwise() - features.col(first))
                  .colwise()
                  .squaredNorm()
                  .transpose();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double target = rng.uniform01() * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= d2[i];
        if (target <= 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = n - 1;
    }
    if (pick < 0 || chosen[static_cast<size_t>(pick)]) {
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[static_cast<size_t>(i)]) {
          pick = i;
          break;
        }
    }
    chosen[static_cast<size_t>(pick)] = 1;
    res.centroids.col(c) = features.col(pick);
    d2 = d2.cwiseMin(
        (features.colwise() - features.col(pick)).colwise().squaredNorm()
            .transpose());
  }

  res.assignments.assign(static_cast<size_t>(n), 0);
  std::vector<int> prev(static_cast<size_t>(n), -1);
  for (int it = 0; it < max_iters; ++it) {
    // assignment step (ties to the lower cluster index)
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        const double d = (features.col(i) - res.centroids.col(c)).squaredNorm();
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      res.assignments[static_cast<size_t>(i)] = arg;
      inertia += best;
    }
    res.inertia_history.push_back(inertia);
    res.iterations = it + 1;
    if (res.assignments == prev) break;
    prev = res.assignments;

    // update step
    Matrix sums = Matrix::Zero(dim, k);
    std::vector<long> counts(static_cast<size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.col(res.assignments[static_cast<size_t>(i)]) += features.col(i);
      ++counts[static_cast<size_t>(res.assignments[static_cast<size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        res.centroids.col(c) =
            sums.col(c) / static_cast<double>(counts[static_cast<size_t>(c)]);
      } else {
        // farthest point from its own centroid
        double far = -1.0;
        Eigen::Index pick = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d =
              (features.col(i) -
               res.centroids.col(res.assignments[static_cast<size_t>(i)]))
                  .squaredNorm();
          if (d > far) {
            far = d;
            pick = i;
          }
        }
        res.centroids.col(c) = features.col(pick);
      }
    }
  }
  return res;
}

/// Per-cluster entropy ranking of softmax(-distance) over the centroids;
/// the lowest-entropy keep_fraction of each cluster is retained.
inline std::vector<int> entropy_filter(const Matrix& features,
                                       const KmeansResult& clusters,
                                       double keep_fraction) {
  if (keep_fraction <= 0.0 || keep_fraction > 1.0)
    throw ShapeMismatch("keep_fraction must lie in (0, 1]");
  const Eigen::Index n = features.cols();
  const int k = static_cast<int>(clusters.centroids.cols());

  std::vector<double> entropy(static_cast<size_t>(n), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector neg_dist(k);
    for (int c = 0; c < k; ++c)
      neg_dist[c] = -(features.col(i) - clusters.centroids.col(c)).norm();
    const double hi = neg_dist.maxCoeff();
    const Vector p_unnorm = (neg_dist.array() - hi).exp().matrix();
    const Vector p = p_unnorm / p_unnorm.sum();
    double h = 0.0;
    for (int c = 0; c < k; ++c)
      if (p[c] > 0.0) h -= p[c] * std::log(p[c]);
    entropy[static_cast<size_t>(i)] = h;
  }

  std::vector<int> retained;
  for (int c = 0; c < k; ++c) {
    std::vector<int> members;
    for (Eigen::Index i = 0; i < n; ++i)
      if (clusters.assignments[static_cast<size_t>(i)] == c)
        members.push_back(static_cast<int>(i));
    if (members.empty()) continue;
    std::sort(members.begin(), members.end(), [&](int a, int b) {
      if (entropy[static_cast<size_t>(a)] != entropy[static_cast<size_t>(b)])
        return entropy[static_cast<size_t>(a)] < entropy[static_cast<size_t>(b)];
      return a < b;
    });
    const size_t keep = static_cast<size_t>(
        std::ceil(keep_fraction * static_cast<double>(members.size())));
    for (size_t j = 0; j < keep; ++j) retained.push_back(members[j]);
  }
  std::sort(retained.begin(), retained.end());
  return retained;
}

/// Merges clusters down to target_k: the target_k most populated clusters
/// survive, every other cluster is absorbed by the survivor with the most
/// cosine-similar centroid. Returns per-point labels in 0..target_k-1.
inline std::vector<int> merge_overclusters(const KmeansResult& clusters,
                                           int target_k) {
  const int k = static_cast<int>(clusters.centroids.cols());
  if (target_k > k) throw ShapeMismatch("cannot merge into more clusters");
  std::vector<long> counts(static_cast<size_t>(k), 0);
  for (int a : clusters.assignments) ++counts[static_cast<size_t>(a)];

  std::vector<int> order(static_cast<size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (counts[static_cast<size_t>(a)] != counts[static_cast<size_t>(b)])
      return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
    return a < b;
  });

  std::vector<int> cluster_to_label(static_cast<size_t>(k), -1);
  for (int j = 0; j < target_k; ++j)
    cluster_to_label[static_cast<size_t>(order[static_cast<size_t>(j)])] = j;
  for (int c = 0; c < k; ++c) {
    if (cluster_to_label[static_cast<size_t>(c)] >= 0) continue;
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    const double cn = clusters.centroids.col(c).norm();
    for (int j = 0; j < target_k; ++j) {
      const int kc = order[static_cast<size_t>(j)];
      const double jn = clusters.centroids.col(kc).norm();
      const double cos =
          cn < 1e-12 || jn < 1e-12
              ? 0.0
              : clusters.centroids.col(c).dot(clusters.centroids.col(kc)) /
                    (cn * jn);
      if (cos > best) {
        best = cos;
        arg = j;
      }
    }
    cluster_to_label[static_cast<size_t>(c)] = arg;
  }

  std::vector<int> labels;
  labels.reserve(clusters.assignments.size());
  for (int a : clusters.assignments)
    labels.push_back(cluster_to_label[static_cast<size_t>(a)]);
  return labels;
}

struct Propagation {
  std::vector<int> labels;        // per point; meaningful where has_label
  std::vector<uint8_t> has_label;
};

/// Copies every source point's label to its single nearest eligible
/// neighbour (Euclidean; target ties by lower index). When several sources
/// reach the same target, the closer one wins, then the lower source index.
inline Propagation propagate_nn(const Eigen::Matrix3Xd& coords,
                                const std::vector<int>& source_indices,
                                const std::vector<int>& source_labels,
                                const std::vector<uint8_t>& eligible) {
  if (source_indices.empty()) throw NoNovelPoints("no labelled sources");
  if (source_indices.size() != source_labels.size())
    throw LengthMismatch("sources and labels differ in length");

  const size_t n = static_cast<size_t>(coords.cols());
  Propagation out;
  out.labels.assign(n, kUnlabeled);
  out.has_label.assign(n, 0);
  for (size_t s = 0; s < source_indices.size(); ++s) {
    out.labels[static_cast<size_t>(source_indices[s])] = source_labels[s];
    out.has_label[static_cast<size_t>(source_indices[s])] = 1;
  }

  struct Claim {
    double dist;
    int source;
    int label;
  };
  std::map<int, Claim> claims;
  for (size_t s = 0; s < source_indices.size(); ++s) {
    const int src = source_indices[s];
    double best = std::numeric_limits<double>::infinity();
    int target = -1;
    for (size_t t = 0; t < n; ++t) {
      if (!eligible[t] || out.has_label[t]) continue;
      const double d =
          (coords.col(static_cast<Eigen::Index>(t)) - coords.col(src)).norm();
      if (d < best) {
        best = d;
        target = static_cast<int>(t);
      }
    }
    if (target < 0) continue;
    auto it = claims.find(target);
    if (it == claims.end() || best < it->second.dist ||
        (best == it->second.dist && src < it->second.source))
      claims[target] = {best, src, source_labels[s]};
  }
  for (const auto& [target, claim] : claims) {
    out.labels[static_cast<size_t>(target)] = claim.label;
    out.has_label[static_cast<size_t>(target)] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end baseline.
// ---------------------------------------------------------------------------

namespace detail {

/// Supervised loop shared by the pre-train and fine-tune phases: one
/// augmented view per step, hard targets, SGD with the cosine schedule.
/// Targets are per-point head-space slots, -1 for masked-out points.
inline void supervised_train(const TrainConfig& cfg, const NetworkConfig& net,
                             NetworkParams& params,
                             const std::vector<LabeledCloud>& clouds,
                             const std::vector<std::vector<int>>& target_slots,
                             const Vector& slot_weights, bool use_novel_head,
                             int epochs, RngStream& rng) {
  NetworkParams momentum = zeros_like(params);
  const long steps_per_epoch =
      (static_cast<long>(clouds.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total = steps_per_epoch * epochs;
  const Eigen::Index n_slots = slot_weights.size();

  std::vector<size_t> order(clouds.size());
  long step = 0;
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t i = clouds.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.index(i)]);
    for (long b = 0; b < steps_per_epoch; ++b, ++step) {
      const double lr = lr_at(cfg, step, std::max<long>(1, total));
      NetworkParams grad = zeros_like(params);
      bool any = false;
      for (size_t k = static_cast<size_t>(b) * cfg.batch_size;
           k < std::min(clouds.size(),
                        (static_cast<size_t>(b) + 1) * cfg.batch_size);
           ++k) {
        const size_t ci = order[k];
        auto [view, unused] =
            augment_pair(clouds[ci], cfg.augmentation, rng);
        VoxelGrid grid = voxelize(view, cfg.voxel_size);
        Eigen::Matrix3Xd rep_coords(3, grid.num_voxels());
        for (size_t r = 0; r < grid.num_voxels(); ++r)
          rep_coords.col(static_cast<Eigen::Index>(r)) =
              view.coords.col(grid.representatives[r]);
        ForwardTrace trace = forward(
            net, params, network_input(net, view, grid.representatives),
            knn_indices(rep_coords, net.neighborhood_k));

        const Eigen::Index n_reps =
            static_cast<Eigen::Index>(grid.num_voxels());
        Matrix logits =
            use_novel_head
                ? concat_logits(trace.base_logits, trace.novel_logits[0])
                : trace.base_logits;
        Matrix targets = Matrix::Zero(n_slots, n_reps);
        std::vector<uint8_t> mask(static_cast<size_t>(n_reps), 0);
        for (Eigen::Index r = 0; r < n_reps; ++r) {
          const int slot =
              target_slots[ci][static_cast<size_t>(
                  grid.representatives[static_cast<size_t>(r)])];
          if (slot >= 0 && slot < n_slots) {
            targets(slot, r) = 1.0;
            mask[static_cast<size_t>(r)] = 1;
          }
        }
        bool cloud_any = false;
        for (uint8_t m : mask) cloud_any |= (m != 0);
        if (!cloud_any) continue;
        any = true;

        auto ce = weighted_ce_grad(logits, targets, slot_weights, mask);
        OutputGrads up;
        if (use_novel_head) {
          up.d_base = ce.d_logits.topRows(net.n_base_classes);
          up.d_novel.assign(static_cast<size_t>(net.n_novel_heads), Matrix());
          up.d_novel[0] = ce.d_logits.bottomRows(net.n_novel_classes);
        } else {
          up.d_base = ce.d_logits;
        }
        add_params(grad, backward(net, params, trace, up));
      }
      if (any)
        sgd_update(params, momentum, grad, lr, cfg.momentum, cfg.weight_decay);
    }
  }
}

}  // namespace detail

struct EumsResult {
  NetworkConfig net;
  NetworkParams params;
  MiouReport report;
  size_t n_pseudo_labeled = 0;
};

/// Full EUMS pipeline against the usual evaluation protocol. The network is
/// reduced to a single novel head; over-clustering happens offline in the
/// K-Means stage instead.
inline EumsResult run_eums(const TrainDataset& dataset,
                           const std::vector<LabeledCloud>& val_clouds,
                           const NcdTaskSpec& task, const EumsConfig& eums,
                           TrainConfig train_cfg, NetworkConfig net_cfg) {
  net_cfg.n_novel_heads = 1;
  net_cfg.overcluster_factor = 1;
  net_cfg.validate();
  train_cfg.validate();
  if (dataset.size() == 0) throw EmptyCloud("dataset is empty");
  for (const auto& cloud : dataset.clouds) validate_task(cloud, task);

  RngStream rng(train_cfg.seed, 11);
  NetworkParams params = init_params(net_cfg, rng);
  params.quantize_f32();

  std::map<int, double> freqs;
  long n_base = 0;
  for (const auto& cloud : dataset.clouds)
    for (size_t i = 0; i < cloud.size(); ++i)
      if (!cloud.novel_mask[i]) {
        ++freqs[cloud.train_label(i)];
        ++n_base;
      }
  for (auto& [id, f] : freqs) f /= static_cast<double>(n_base);
  const ClassWeights weights = class_weights(freqs, task.novel_classes);

  // Phase 1: pre-train extractor and base head on base points only.
  std::vector<std::vector<int>> base_targets;
  for (const auto& cloud : dataset.clouds) {
    std::vector<int> slots(cloud.size(), -1);
    for (size_t i = 0; i < cloud.size(); ++i)
      if (!cloud.novel_mask[i])
        slots[i] = task.base_slot(cloud.train_label(i));
    base_targets.push_back(std::move(slots));
  }
  const Vector base_weights =
      head_space_weights(weights, task.base_classes, 0);
  detail::supervised_train(train_cfg, net_cfg, params, dataset.clouds,
                           base_targets, base_weights, false,
                           eums.pretrain_epochs, rng);

  // Phase 2: broadcast features, subsample novel points, offline K-Means.
  std::vector<std::pair<size_t, int>> sample_origin;  // (cloud, point)
  std::vector<Vector> sample_features;
  for (size_t ci = 0; ci < dataset.size(); ++ci) {
    const LabeledCloud& cloud = dataset.clouds[ci];
    bool has_novel = false;
    for (uint8_t m : cloud.novel_mask) has_novel |= (m != 0);
    if (!has_novel) continue;
    const auto f =
        detail::eval_forward(net_cfg, params, cloud, train_cfg.voxel_size);
    for (int p : subsample_novel(cloud, eums.subsample_ratio,
                                 eums.subsample_cap, rng)) {
      sample_origin.emplace_back(ci, p);
      sample_features.push_back(
          f.trace.z.col(f.grid.point_to_rep[static_cast<size_t>(p)]));
    }
  }
  if (sample_features.empty())
    throw NoNovelPoints("dataset has no novel points to cluster");

  Matrix feat(net_cfg.feature_dim,
              static_cast<Eigen::Index>(sample_features.size()));
  for (size_t i = 0; i < sample_features.size(); ++i)
    feat.col(static_cast<Eigen::Index>(i)) = sample_features[i];

  const int k = eums.overcluster_multiplier * task.num_novel();
  const KmeansResult clusters =
      kmeans(feat, k, eums.kmeans_max_iters, train_cfg.seed);
  const std::vector<int> retained =
      entropy_filter(feat, clusters, eums.entropy_keep_fraction);
  const std::vector<int> merged = merge_overclusters(clusters, task.num_novel());

  // Phase 3: per cloud, propagate pseudo-labels to nearest novel neighbours.
  std::vector<std::vector<int>> finetune_targets = base_targets;
  size_t n_pseudo = 0;
  const int cb = task.num_base();
  for (size_t ci = 0; ci < dataset.size(); ++ci) {
    std::vector<int> sources, labels;
    for (int idx : retained) {
      if (sample_origin[static_cast<size_t>(idx)].first != ci) continue;
      sources.push_back(sample_origin[static_cast<size_t>(idx)].second);
      labels.push_back(merged[static_cast<size_t>(idx)]);
    }
    if (sources.empty()) continue;
    std::vector<uint8_t> eligible(dataset.clouds[ci].size(), 0);
    for (size_t i = 0; i < dataset.clouds[ci].size(); ++i)
      eligible[i] = dataset.clouds[ci].novel_mask[i];
    const Propagation prop =
        propagate_nn(dataset.clouds[ci].coords, sources, labels, eligible);
    for (size_t i = 0; i < prop.labels.size(); ++i)
      if (prop.has_label[i]) {
        finetune_targets[ci][i] = cb + prop.labels[i];
        ++n_pseudo;
      }
  }

  // Phase 4: plug a fresh novel head and fine-tune on gt + hard pseudo-labels.
  params.novel_w[0] = init_params(net_cfg, rng).novel_w[0];
  params.quantize_f32();
  const Vector full_weights =
      head_space_weights(weights, task.base_classes, task.num_novel());
  detail::supervised_train(train_cfg, net_cfg, params, dataset.clouds,
                           finetune_targets, full_weights, true,
                           eums.finetune_epochs, rng);

  EumsResult result;
  result.net = net_cfg;
  result.params = std::move(params);
  result.n_pseudo_labeled = n_pseudo;
  EvalOptions opts;
  opts.voxel_size = train_cfg.voxel_size;
  opts.head = 0;
  opts.sinkhorn = train_cfg.sinkhorn;
  result.report =
      evaluate(net_cfg, result.params, val_clouds, task, opts);
  return result;
}

}  // namespace ncdseg
