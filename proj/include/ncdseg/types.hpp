#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ncdseg/error.hpp"

namespace ncdseg {

/// Sentinel for "no label". Distinct from every class id.
inline constexpr int kUnlabeled = -1;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// D x m feature block; column i is the feature of point i.
using FeatureMatrix = Eigen::MatrixXd;

/// rho x m soft assignment between prototypes (rows) and points (columns).
using AssignmentMatrix = Eigen::MatrixXd;

class LabeledCloud;
LabeledCloud load_cloud(const std::string& path);
void save_cloud(const LabeledCloud& cloud, const std::string& path);

/// Read-only access to ground-truth labels for evaluation. Every read is
/// counted on the owning cloud so tests can assert that training never
/// touched a novel label.
class EvalLabelView {
 public:
  int label(size_t i) const;
  size_t size() const;

 private:
  friend class LabeledCloud;
  explicit EvalLabelView(const LabeledCloud& cloud) : cloud_(cloud) {}
  const LabeledCloud& cloud_;
};

/// A point cloud with per-point class ids and a base/novel partition mask.
/// Labels of novel-masked points are reserved for evaluation: training code
/// only sees them through train_label(), which masks them to kUnlabeled.
class LabeledCloud {
 public:
  Eigen::Matrix3Xd coords;          // meters, one column per point
  Eigen::Matrix3Xd colors;          // RGB in [0,1]; 0 columns when absent
  std::vector<uint8_t> novel_mask;  // true = point belongs to the novel set

  LabeledCloud() = default;
  LabeledCloud(Eigen::Matrix3Xd coords_in, Eigen::Matrix3Xd colors_in,
               std::vector<int> labels_in, std::vector<uint8_t> mask_in)
      : coords(std::move(coords_in)),
        colors(std::move(colors_in)),
        novel_mask(std::move(mask_in)),
        labels_(std::move(labels_in)) {
    const auto m = static_cast<size_t>(coords.cols());
    if (m == 0) throw EmptyCloud("cloud has no points");
    if (labels_.size() != m || novel_mask.size() != m)
      throw LengthMismatch("coords/labels/novel_mask lengths differ");
    if (colors.cols() != 0 && static_cast<size_t>(colors.cols()) != m)
      throw LengthMismatch("colors length differs from coords");
  }

  size_t size() const { return static_cast<size_t>(coords.cols()); }
  bool has_color() const { return colors.cols() > 0; }

  /// Label as visible to training: novel points read as kUnlabeled.
  int train_label(size_t i) const {
    return novel_mask[i] ? kUnlabeled : labels_[i];
  }

  EvalLabelView eval_view() const { return EvalLabelView(*this); }

  /// Number of label reads made through eval views since the last reset.
  size_t eval_label_reads() const { return eval_label_reads_; }
  void reset_eval_audit() const { eval_label_reads_ = 0; }

 private:
  friend class EvalLabelView;
  friend LabeledCloud load_cloud(const std::string& path);
  friend void save_cloud(const LabeledCloud& cloud, const std::string& path);

  std::vector<int> labels_;
  mutable size_t eval_label_reads_ = 0;
};

inline int EvalLabelView::label(size_t i) const {
  ++cloud_.eval_label_reads_;
  return cloud_.labels_[i];
}

inline size_t EvalLabelView::size() const { return cloud_.size(); }

/// The NCD task: which classes are labelled (base) and which are to be
/// discovered (novel). |novel_classes| is known and fixed.
struct NcdTaskSpec {
  std::vector<int> base_classes;   // ordered, defines base logit slots
  std::vector<int> novel_classes;  // ordered, C_n slots
  std::map<int, std::string> class_names;
  std::string split_name;
  std::string dataset;

  int num_base() const { return static_cast<int>(base_classes.size()); }
  int num_novel() const { return static_cast<int>(novel_classes.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  bool is_base(int id) const {
    return std::find(base_classes.begin(), base_classes.end(), id) !=
           base_classes.end();
  }
  bool is_novel(int id) const {
    return std::find(novel_classes.begin(), novel_classes.end(), id) !=
           novel_classes.end();
  }

  /// Slot of a base class id in the base logit block, -1 if not base.
  int base_slot(int id) const {
    auto it = std::find(base_classes.begin(), base_classes.end(), id);
    return it == base_classes.end()
               ? -1
               : static_cast<int>(it - base_classes.begin());
  }
  int novel_slot(int id) const {
    auto it = std::find(novel_classes.begin(), novel_classes.end(), id);
    return it == novel_classes.end()
               ? -1
               : static_cast<int>(it - novel_classes.begin());
  }

  std::string class_name(int id) const {
    auto it = class_names.find(id);
    return it == class_names.end() ? "class-" + std::to_string(id)
                                   : it->second;
  }
};

/// Checks the disjointness contract and that every base-masked point carries
/// a base-class label. Idempotent; returns the inputs untouched.
inline const LabeledCloud& validate_task(const LabeledCloud& cloud,
                                         const NcdTaskSpec& task) {
  std::set<int> base(task.base_classes.begin(), task.base_classes.end());
  for (int id : task.novel_classes) {
    if (base.count(id))
      throw DisjointnessViolation("class id " + std::to_string(id) +
                                  " appears in both base and novel sets");
  }
  for (size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.novel_mask[i] && !base.count(cloud.train_label(i)))
      throw LabelOutOfSplit("base-masked point " + std::to_string(i) +
                            " carries label " +
                            std::to_string(cloud.train_label(i)) +
                            " outside the base set");
  }
  return cloud;
}

/// Unit-normalizes every column. Columns with norm below eps are rejected:
/// Sinkhorn similarity is only meaningful on the unit sphere.
inline FeatureMatrix normalize_columns(const FeatureMatrix& features,
                                       double eps = 1e-8) {
  FeatureMatrix out = features;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double n = out.col(j).norm();
    if (n < eps)
      throw NormalizationDegenerate("feature column " + std::to_string(j) +
                                    " has near-zero norm");
    out.col(j) /= n;
  }
  return out;
}

/// Max deviation of row sums from 1/rows and column sums from 1/cols.
struct MarginalDeviation {
  double row = 0.0;
  double col = 0.0;
};

inline MarginalDeviation marginal_deviation(const AssignmentMatrix& q) {
  MarginalDeviation d;
  const double r = 1.0 / static_cast<double>(q.rows());
  const double c = 1.0 / static_cast<double>(q.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    d.row = std::max(d.row, std::abs(q.row(i).sum() - r));
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    d.col = std::max(d.col, std::abs(q.col(j).sum() - c));
  return d;
}

}  // namespace ncdseg
