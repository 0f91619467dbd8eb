#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <vector>

#include "ncdseg/rng.hpp"
#include "ncdseg/sinkhorn.hpp"
#include "ncdseg/types.hpp"

namespace ncdseg {

/// One prediction over a point: argmax class (or prototype) and its
/// confidence in [0, 1].
struct PointPrediction {
  int class_id = 0;
  double confidence = 0.0;
};

struct SelectionConfig {
  double percentile = 0.3;  // p
};

/// Per-class adaptive thresholds: the nearest-rank p-th percentile of each
/// class's predicted confidences. The nearest-rank statistic is an attained
/// confidence, so with >= retention every represented class keeps at least
/// one point. Classes with no predictions get threshold 0.
inline std::map<int, double> adaptive_thresholds(
    const std::vector<PointPrediction>& preds, double p) {
  if (p < 0.0 || p > 1.0)
    throw DimensionMismatch("percentile must lie in [0, 1]");
  std::map<int, std::vector<double>> by_class;
  for (const auto& pr : preds) by_class[pr.class_id].push_back(pr.confidence);

  std::map<int, double> tau;
  for (auto& [c, confs] : by_class) {
    std::sort(confs.begin(), confs.end());
    const size_t n = confs.size();
    const size_t rank =
        std::max<size_t>(1, static_cast<size_t>(std::ceil(p * double(n))));
    tau[c] = confs[std::min(rank, n) - 1];
  }
  return tau;
}

/// The selection function phi: retains points whose confidence reaches their
/// predicted class's threshold. The index map recovers full-cloud positions.
struct Selection {
  FeatureMatrix features;       // D x n_selected
  std::vector<int> indices;     // selected column -> original column
  std::vector<int> classes;     // predicted class of each selected column
};

inline Selection select_confident(const FeatureMatrix& features,
                                  const std::vector<PointPrediction>& preds,
                                  const std::map<int, double>& tau) {
  if (static_cast<size_t>(features.cols()) != preds.size())
    throw DimensionMismatch("features and predictions are not aligned");
  Selection sel;
  for (size_t i = 0; i < preds.size(); ++i) {
    auto it = tau.find(preds[i].class_id);
    const double threshold = it == tau.end() ? 0.0 : it->second;
    if (preds[i].confidence >= threshold) {
      sel.indices.push_back(static_cast<int>(i));
      sel.classes.push_back(preds[i].class_id);
    }
  }
  sel.features.resize(features.rows(), sel.indices.size());
  for (size_t k = 0; k < sel.indices.size(); ++k)
    sel.features.col(k) = features.col(sel.indices[k]);
  return sel;
}

/// Bounded FIFO store of confident novel-point features from previous
/// iterations. Concatenated in front of Sinkhorn so prototypes of classes
/// missing from the current batch still receive plausible mass.
class FeatureQueue {
 public:
  struct Entry {
    Vector feature;
    int predicted_class = 0;
    long step = 0;
  };

  explicit FeatureQueue(size_t capacity = 4096) : capacity_(capacity) {}

  size_t size() const { return entries_.size(); }
  size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  const std::deque<Entry>& entries() const { return entries_; }

  std::map<int, size_t> per_class_counts() const {
    std::map<int, size_t> counts;
    for (const auto& e : entries_) ++counts[e.predicted_class];
    return counts;
  }

  /// Appends a random sample_fraction of the columns, FIFO-evicting the
  /// oldest entries beyond capacity.
  void enqueue(const FeatureMatrix& features, const std::vector<int>& classes,
               double sample_fraction, long step, RngStream& rng) {
    if (sample_fraction <= 0.0 || sample_fraction > 1.0)
      throw DimensionMismatch("sample_fraction must lie in (0, 1]");
    if (static_cast<size_t>(features.cols()) != classes.size())
      throw DimensionMismatch("features and classes are not aligned");
    const size_t n = classes.size();
    if (n == 0) return;
    const size_t take = std::min<size_t>(
        n, static_cast<size_t>(std::ceil(sample_fraction * double(n))));
    for (size_t idx : rng.sample_without_replacement(n, take)) {
      // stored at float32 precision, matching the checkpoint format exactly
      Vector f = features.col(static_cast<Eigen::Index>(idx));
      for (Eigen::Index i = 0; i < f.size(); ++i)
        f[i] = static_cast<double>(static_cast<float>(f[i]));
      entries_.push_back({std::move(f), classes[idx], step});
      if (entries_.size() > capacity_) entries_.pop_front();
    }
  }

  /// All stored feature columns, oldest first. D must be supplied for the
  /// empty-queue case.
  FeatureMatrix stacked(Eigen::Index dim) const {
    FeatureMatrix out(dim, entries_.size());
    for (size_t k = 0; k < entries_.size(); ++k) {
      if (entries_[k].feature.size() != dim)
        throw DimensionMismatch("queued feature dim differs from batch dim");
      out.col(static_cast<Eigen::Index>(k)) = entries_[k].feature;
    }
    return out;
  }

 private:
  size_t capacity_;
  std::deque<Entry> entries_;
};

/// Runs the assignment on [Z | Z_q] and keeps only the batch columns: the
/// queue absorbs equipartition mass for absent classes but contributes no
/// pseudo-labels.
inline Matrix augment_and_truncate(const Matrix& prototypes,
                                   const FeatureMatrix& batch_features,
                                   const FeatureQueue& queue, double eps,
                                   int n_iters) {
  if (prototypes.rows() != batch_features.rows())
    throw DimensionMismatch("prototype dim differs from feature dim");
  const Eigen::Index m = batch_features.cols();
  FeatureMatrix all(batch_features.rows(),
                    m + static_cast<Eigen::Index>(queue.size()));
  all.leftCols(m) = batch_features;
  if (!queue.empty())
    all.rightCols(static_cast<Eigen::Index>(queue.size())) =
        queue.stacked(batch_features.rows());

  const AssignmentMatrix q =
      solve_assignment(prototypes.transpose() * all, eps, n_iters);
  return pseudo_labels(q.leftCols(m));
}

}  // namespace ncdseg
