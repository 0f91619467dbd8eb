#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "ncdseg/types.hpp"

namespace ncdseg {

/// Per-class loss weights: inverse-log of occurrence frequency for base
/// classes (rescaled to mean 1 over the base set), 1 for every novel class.
struct ClassWeights {
  std::map<int, double> by_class;

  double at(int id) const {
    auto it = by_class.find(id);
    return it == by_class.end() ? 1.0 : it->second;
  }
};

inline ClassWeights class_weights(const std::map<int, double>& base_freqs,
                                  const std::vector<int>& novel_classes) {
  ClassWeights w;
  double sum = 0.0;
  for (const auto& [id, f] : base_freqs) {
    if (f <= 0.0)
      throw ZeroFrequency("base class " + std::to_string(id) +
                          " has zero training frequency");
    w.by_class[id] = 1.0 / std::log(1.02 + f);
    sum += w.by_class[id];
  }
  if (!base_freqs.empty()) {
    const double mean = sum / static_cast<double>(base_freqs.size());
    for (auto& [id, v] : w.by_class) v /= mean;
  }
  for (int id : novel_classes) w.by_class[id] = 1.0;
  return w;
}

/// Loss weights laid out in a head's logit space: base slots first (in task
/// order), then the head's novel slots, which always weigh 1.
inline Vector head_space_weights(const ClassWeights& weights,
                                 const std::vector<int>& base_classes,
                                 int novel_slots) {
  Vector w(static_cast<Eigen::Index>(base_classes.size()) + novel_slots);
  for (size_t i = 0; i < base_classes.size(); ++i)
    w[static_cast<Eigen::Index>(i)] = weights.at(base_classes[i]);
  for (int i = 0; i < novel_slots; ++i)
    w[static_cast<Eigen::Index>(base_classes.size()) + i] = 1.0;
  return w;
}

struct WeightedCe {
  double loss = 0.0;
  Matrix d_logits;  // same shape as logits; zero on unmasked columns
};

/// Weighted cross entropy, mean over masked points. Targets are per-column
/// distributions; a one-hot column reproduces the hard-target loss exactly.
/// The per-point weight is the target-expected class weight.
inline WeightedCe weighted_ce_grad(const Matrix& logits, const Matrix& targets,
                                   const Vector& weights,
                                   const std::vector<uint8_t>& mask) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols())
    throw ShapeMismatch("targets shape differs from logits");
  if (weights.size() != logits.rows())
    throw ShapeMismatch("weight vector does not match logit count");
  if (static_cast<size_t>(logits.cols()) != mask.size())
    throw ShapeMismatch("mask does not cover all points");
  if (!logits.allFinite()) throw NumericOverflow("logits are not finite");

  long n_masked = 0;
  for (uint8_t b : mask) n_masked += b ? 1 : 0;
  if (n_masked == 0) throw EmptyMask("no point contributes to the loss");

  WeightedCe out;
  out.d_logits = Matrix::Zero(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(n_masked);

  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    if (!mask[static_cast<size_t>(j)]) continue;
    const Vector z = logits.col(j);
    const double hi = z.maxCoeff();
    const Vector shifted = z.array() - hi;
    const double lse = std::log(shifted.array().exp().sum());

    double w = 0.0;
    double ce = 0.0;
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      const double t = targets(k, j);
      if (t != 0.0) {
        ce -= t * (shifted[k] - lse);
        w += t * weights[k];
      }
    }
    out.loss += inv_n * w * ce;
    const Vector p = (shifted.array() - lse).exp();
    out.d_logits.col(j) = inv_n * w * (p - targets.col(j));
  }
  return out;
}

inline double weighted_ce(const Matrix& logits, const Matrix& targets,
                          const Vector& weights,
                          const std::vector<uint8_t>& mask) {
  return weighted_ce_grad(logits, targets, weights, mask).loss;
}

inline Matrix one_hot_targets(const std::vector<int>& slot_ids,
                              Eigen::Index n_slots) {
  Matrix t = Matrix::Zero(n_slots, static_cast<Eigen::Index>(slot_ids.size()));
  for (size_t j = 0; j < slot_ids.size(); ++j)
    if (slot_ids[j] >= 0) t(slot_ids[j], static_cast<Eigen::Index>(j)) = 1.0;
  return t;
}

/// Targets of one view for one head: per-column distributions over that
/// head's logit space plus the mask of contributing points (ground truth on
/// base points, selected pseudo-labels on novel points).
struct HeadTargets {
  Matrix soft;
  std::vector<uint8_t> mask;
};

struct SwappedHeadLoss {
  double value = 0.0;
  Matrix d_view1;
  Matrix d_view2;
};

/// One head's swapped term: each view is scored against the other view's
/// targets. A term whose mask is empty contributes nothing.
inline SwappedHeadLoss swapped_head_loss(const Matrix& logits1,
                                         const Matrix& logits2,
                                         const HeadTargets& targets1,
                                         const HeadTargets& targets2,
                                         const Vector& weights) {
  if (logits1.rows() != logits2.rows())
    throw ViewMismatch("the two views expose different logit spaces");
  SwappedHeadLoss out;
  out.d_view1 = Matrix::Zero(logits1.rows(), logits1.cols());
  out.d_view2 = Matrix::Zero(logits2.rows(), logits2.cols());

  auto any = [](const std::vector<uint8_t>& m) {
    for (uint8_t b : m)
      if (b) return true;
    return false;
  };
  if (any(targets2.mask)) {
    auto ce = weighted_ce_grad(logits1, targets2.soft, weights, targets2.mask);
    out.value += ce.loss;
    out.d_view1 = std::move(ce.d_logits);
  }
  if (any(targets1.mask)) {
    auto ce = weighted_ce_grad(logits2, targets1.soft, weights, targets1.mask);
    out.value += ce.loss;
    out.d_view2 = std::move(ce.d_logits);
  }
  return out;
}

/// Multi-head segmentation objective: mean of the discovery-head terms plus
/// mean of the over-clustering-head terms.
struct SegLossResult {
  double value = 0.0;
  std::vector<Matrix> d_view1_heads;  // discovery heads then OC heads
  std::vector<Matrix> d_view2_heads;
  std::vector<double> per_head;
};

inline SegLossResult swapped_segmentation_loss(
    const std::vector<Matrix>& logits1, const std::vector<Matrix>& logits2,
    const std::vector<HeadTargets>& targets1,
    const std::vector<HeadTargets>& targets2,
    const std::vector<Vector>& weights, size_t n_discovery) {
  const size_t n_heads = logits1.size();
  if (logits2.size() != n_heads || targets1.size() != n_heads ||
      targets2.size() != n_heads || weights.size() != n_heads)
    throw ViewMismatch("per-head inputs have inconsistent lengths");
  if (n_discovery == 0 || n_discovery > n_heads)
    throw ViewMismatch("invalid discovery head count");

  SegLossResult res;
  const size_t n_oc = n_heads - n_discovery;
  for (size_t h = 0; h < n_heads; ++h) {
    const double scale =
        h < n_discovery ? 1.0 / static_cast<double>(n_discovery)
                        : 1.0 / static_cast<double>(n_oc);
    auto head = swapped_head_loss(logits1[h], logits2[h], targets1[h],
                                  targets2[h], weights[h]);
    res.value += scale * head.value;
    res.per_head.push_back(head.value);
    res.d_view1_heads.push_back(scale * head.d_view1);
    res.d_view2_heads.push_back(scale * head.d_view2);
  }
  return res;
}

struct CosineTerm {
  double value = 0.0;
  Matrix d_proj;
};

/// Mean over masked points of (1 - cosine(projected, auxiliary)). No gradient
/// ever flows into the auxiliary features.
inline CosineTerm cosine_alignment_term(const Matrix& proj, const Matrix& aux,
                                        const std::vector<uint8_t>& mask) {
  if (proj.rows() != aux.rows())
    throw DimensionMismatch("projection dim differs from aux feature dim");
  if (proj.cols() != aux.cols())
    throw DimensionMismatch("projection count differs from aux count");
  if (mask.size() != static_cast<size_t>(aux.cols()))
    throw DimensionMismatch("mask does not cover all points");

  CosineTerm out;
  out.d_proj = Matrix::Zero(proj.rows(), proj.cols());
  long n = 0;
  for (uint8_t b : mask) n += b ? 1 : 0;
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);

  for (Eigen::Index j = 0; j < aux.cols(); ++j) {
    if (!mask[static_cast<size_t>(j)]) continue;
    const Vector p = proj.col(j);
    const Vector a = aux.col(j);
    const double pn = p.norm();
    const double an = a.norm();
    if (pn < 1e-12 || an < 1e-12) {
      out.value += inv_n;  // cos treated as 0; no usable direction
      continue;
    }
    const double cos = p.dot(a) / (pn * an);
    out.value += inv_n * (1.0 - cos);
    out.d_proj.col(j) = -inv_n * (a / (pn * an) - p * (cos / (pn * pn)));
  }
  return out;
}

struct AlignmentLoss {
  double value = 0.0;
  Matrix d_proj1;
  Matrix d_proj2;
};

/// Cosine alignment of both views' projected features onto the frozen
/// auxiliary features, per view without swapping.
inline AlignmentLoss alignment_loss(const Matrix& proj1, const Matrix& proj2,
                                    const Matrix& aux,
                                    const std::vector<uint8_t>& mask) {
  AlignmentLoss out;
  auto t1 = cosine_alignment_term(proj1, aux, mask);
  auto t2 = cosine_alignment_term(proj2, aux, mask);
  out.value = t1.value + t2.value;
  out.d_proj1 = std::move(t1.d_proj);
  out.d_proj2 = std::move(t2.d_proj);
  return out;
}

inline double total_loss(double seg_loss, double align_loss, double gamma) {
  if (gamma < 0.0) throw ShapeMismatch("gamma must be nonnegative");
  return seg_loss + gamma * align_loss;
}

/// Values logged per optimization step.
struct LossReport {
  double seg = 0.0;
  double align = 0.0;
  double total = 0.0;
  std::vector<double> per_head;
  long contributing_points = 0;
};

}  // namespace ncdseg
