#pragma once

#include <cmath>
#include <future>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ncdseg/network.hpp"
#include "ncdseg/sinkhorn.hpp"
#include "ncdseg/types.hpp"

namespace ncdseg {

/// K x K count matrix, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes)
      : counts_(Eigen::Matrix<int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(
            num_classes, num_classes)) {}

  int num_classes() const { return static_cast<int>(counts_.rows()); }
  int64_t at(int gt, int pred) const { return counts_(gt, pred); }
  int64_t total() const { return counts_.sum(); }

  void add(int gt, int pred, int64_t count = 1) {
    if (gt < 0 || gt >= num_classes() || pred < 0 || pred >= num_classes())
      throw IdOutOfRange("class id outside [0, " +
                         std::to_string(num_classes()) + ")");
    counts_(gt, pred) += count;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.num_classes() != num_classes())
      throw ShapeMismatch("confusion matrices have different class counts");
    counts_ += other.counts_;
    return *this;
  }

 private:
  Eigen::Matrix<int64_t, Eigen::Dynamic, Eigen::Dynamic> counts_;
};

inline void accumulate(ConfusionMatrix& conf, const std::vector<int>& gt,
                       const std::vector<int>& pred) {
  if (gt.size() != pred.size())
    throw LengthMismatch("gt and prediction lengths differ");
  for (size_t i = 0; i < gt.size(); ++i) conf.add(gt[i], pred[i]);
}

/// IoU_c = TP / (TP + FP + FN). Classes absent from both ground truth and
/// prediction are undefined (NaN) and excluded from every mean.
inline std::vector<double> iou_per_class(const ConfusionMatrix& conf) {
  const int k = conf.num_classes();
  std::vector<double> iou(static_cast<size_t>(k));
  for (int c = 0; c < k; ++c) {
    int64_t tp = conf.at(c, c), gt_total = 0, pred_total = 0;
    for (int j = 0; j < k; ++j) {
      gt_total += conf.at(c, j);
      pred_total += conf.at(j, c);
    }
    const int64_t denom = gt_total + pred_total - tp;
    iou[static_cast<size_t>(c)] =
        denom == 0 ? std::numeric_limits<double>::quiet_NaN()
                   : static_cast<double>(tp) / static_cast<double>(denom);
  }
  return iou;
}

inline double mean_defined(const std::vector<double>& values) {
  double sum = 0.0;
  long n = 0;
  for (double v : values)
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN()
                : sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Optimal prototype -> class assignment.
// ---------------------------------------------------------------------------

namespace detail {

/// Maximum-total-score value of a square assignment problem (Hungarian
/// algorithm with potentials, O(n^3)).
inline double assignment_optimum(const Matrix& score) {
  const int n = static_cast<int>(score.rows());
  if (n == 0) return 0.0;
  const double inf = std::numeric_limits<double>::infinity();
  // minimize cost = -score
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -score(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += score(match[j] - 1, j - 1);
  return total;
}

}  // namespace detail

/// The bijection prototype -> column maximizing the total score. Among
/// optimal assignments, prototype 0 gets the smallest feasible column id,
/// then prototype 1, and so on.
inline std::vector<int> hungarian_map(const Matrix& score) {
  if (score.rows() != score.cols())
    throw ShapeMismatch("assignment score matrix must be square");
  const int n = static_cast<int>(score.rows());
  const double tol = 1e-12;
  const double best = detail::assignment_optimum(score);

  std::vector<int> mapping(static_cast<size_t>(n), -1);
  std::vector<char> used(static_cast<size_t>(n), 0);
  std::vector<int> free_cols;
  double fixed = 0.0;

  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < n; ++c) {
      if (used[static_cast<size_t>(c)]) continue;
      // remaining subproblem over rows i+1.. and columns != chosen
      free_cols.clear();
      for (int j = 0; j < n; ++j)
        if (!used[static_cast<size_t>(j)] && j != c) free_cols.push_back(j);
      Matrix sub(n - i - 1, n - i - 1);
      for (int r = i + 1; r < n; ++r)
        for (size_t jj = 0; jj < free_cols.size(); ++jj)
          sub(r - i - 1, static_cast<Eigen::Index>(jj)) =
              score(r, free_cols[jj]);
      const double value =
          fixed + score(i, c) + detail::assignment_optimum(sub);
      if (value >= best - tol) {
        mapping[static_cast<size_t>(i)] = c;
        used[static_cast<size_t>(c)] = 1;
        fixed += score(i, c);
        break;
      }
    }
    if (mapping[static_cast<size_t>(i)] < 0)
      throw ShapeMismatch("assignment search failed");  // unreachable
  }
  return mapping;
}

// ---------------------------------------------------------------------------
// The NCD evaluation protocol.
// ---------------------------------------------------------------------------

struct MiouReport {
  std::vector<double> per_class_iou;  // indexed by dataset class id
  double miou_novel = 0.0;
  double miou_base = 0.0;
  double miou_all = 0.0;
  std::vector<int> mapping;  // prototype slot -> novel class id
  int head = 0;
  NcdTaskSpec task;

  std::string to_text() const {
    std::ostringstream os;
    os << "split " << task.split_name << " (head " << head << ")\n";
    os << "prototype mapping:";
    for (size_t i = 0; i < mapping.size(); ++i)
      os << " " << i << "->" << task.class_name(mapping[i]);
    os << "\n";
    for (size_t c = 0; c < per_class_iou.size(); ++c) {
      os << "  " << std::left << std::setw(14)
         << task.class_name(static_cast<int>(c));
      if (std::isnan(per_class_iou[c]))
        os << "   n/a";
      else
        os << std::fixed << std::setprecision(4) << per_class_iou[c];
      os << (task.is_novel(static_cast<int>(c)) ? "  [novel]" : "") << "\n";
    }
    os << std::fixed << std::setprecision(4);
    os << "mIoU novel " << miou_novel << "  base " << miou_base << "  all "
       << miou_all << "\n";
    return os.str();
  }

  void write_plot_data(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write plot data " + path);
    for (size_t c = 0; c < per_class_iou.size(); ++c)
      if (!std::isnan(per_class_iou[c]))
        out << task.class_name(static_cast<int>(c)) << '\t'
            << per_class_iou[c] << '\n';
  }
};

struct EvalOptions {
  double voxel_size = 0.05;
  int head = -1;  // -1 = pick the lowest-entropy discovery head
  int threads = 1;
  SinkhornConfig sinkhorn;
};

namespace detail {

struct CloudForward {
  VoxelGrid grid;
  ForwardTrace trace;
};

inline CloudForward eval_forward(const NetworkConfig& cfg,
                                 const NetworkParams& params,
                                 const LabeledCloud& cloud,
                                 double voxel_size) {
  CloudForward f;
  f.grid = voxelize(cloud, voxel_size);
  Eigen::Matrix3Xd rep_coords(3, f.grid.num_voxels());
  for (size_t r = 0; r < f.grid.num_voxels(); ++r)
    rep_coords.col(static_cast<Eigen::Index>(r)) =
        cloud.coords.col(f.grid.representatives[r]);
  const auto neighbors = knn_indices(rep_coords, cfg.neighborhood_k);
  f.trace = forward(cfg, params,
                    network_input(cfg, cloud, f.grid.representatives),
                    neighbors);
  return f;
}

}  // namespace detail

/// Picks the discovery head whose Sinkhorn pseudo-labels are most peaked on
/// the validation set (lowest mean per-point entropy). Over-clustering heads
/// are never candidates.
inline int select_eval_head(const NetworkConfig& cfg,
                            const NetworkParams& params,
                            const std::vector<LabeledCloud>& clouds,
                            const EvalOptions& opts) {
  std::vector<double> entropy_sum(static_cast<size_t>(cfg.n_novel_heads), 0.0);
  long n_points = 0;
  for (const auto& cloud : clouds) {
    const auto f = detail::eval_forward(cfg, params, cloud, opts.voxel_size);
    std::vector<int> novel_cols;
    for (size_t r = 0; r < f.grid.num_voxels(); ++r)
      if (cloud.novel_mask[static_cast<size_t>(f.grid.representatives[r])])
        novel_cols.push_back(static_cast<int>(r));
    if (novel_cols.empty()) continue;

    FeatureMatrix z(cfg.feature_dim, novel_cols.size());
    for (size_t k = 0; k < novel_cols.size(); ++k)
      z.col(static_cast<Eigen::Index>(k)) = f.trace.z.col(novel_cols[k]);

    for (int h = 0; h < cfg.n_novel_heads; ++h) {
      const Matrix labels = pseudo_labels(solve_assignment(
          params.novel_w[static_cast<size_t>(h)].transpose() * z,
          opts.sinkhorn.eps_end, opts.sinkhorn.n_iters));
      double ent = 0.0;
      for (Eigen::Index i = 0; i < labels.rows(); ++i)
        for (Eigen::Index j = 0; j < labels.cols(); ++j)
          if (labels(i, j) > 0.0) ent -= labels(i, j) * std::log(labels(i, j));
      entropy_sum[static_cast<size_t>(h)] += ent;
    }
    n_points += static_cast<long>(novel_cols.size());
  }
  if (n_points == 0) return 0;
  int best = 0;
  for (int h = 1; h < cfg.n_novel_heads; ++h)
    if (entropy_sum[static_cast<size_t>(h)] <
        entropy_sum[static_cast<size_t>(best)])
      best = h;
  return best;
}

/// Full protocol: pick a discovery head, match its prototypes to novel class
/// ids by maximum-IoU assignment on the validation set, then report per-class
/// IoU and novel/base/all means over every validation point.
inline MiouReport evaluate(const NetworkConfig& cfg,
                           const NetworkParams& params,
                           const std::vector<LabeledCloud>& clouds,
                           const NcdTaskSpec& task, const EvalOptions& opts) {
  if (cfg.n_base_classes != task.num_base() ||
      cfg.n_novel_classes != task.num_novel())
    throw CheckpointMismatch("checkpoint class counts do not match the task");

  const int head = opts.head >= 0
                       ? opts.head
                       : select_eval_head(cfg, params, clouds, opts);
  if (head >= cfg.n_novel_heads)
    throw IdOutOfRange("head index exceeds discovery head count");

  const int cb = task.num_base();
  const int cn = task.num_novel();

  // Per-point argmax predictions in head space, broadcast from voxel reps.
  // Clouds are independent; with threads > 1 they are forwarded in parallel
  // and reduced in index order.
  struct CloudPreds {
    std::vector<int> head_space;  // 0..cb-1 base slot, cb.. prototype slot
  };
  auto predict_cloud = [&](const LabeledCloud& cloud) {
    const auto f = detail::eval_forward(cfg, params, cloud, opts.voxel_size);
    const Matrix logits = concat_logits(
        f.trace.base_logits, f.trace.novel_logits[static_cast<size_t>(head)]);
    CloudPreds cp;
    cp.head_space.resize(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) {
      Eigen::Index arg = 0;
      logits.col(f.grid.point_to_rep[i]).maxCoeff(&arg);
      cp.head_space[i] = static_cast<int>(arg);
    }
    return cp;
  };
  std::vector<CloudPreds> preds(clouds.size());
  if (opts.threads <= 1) {
    for (size_t ci = 0; ci < clouds.size(); ++ci)
      preds[ci] = predict_cloud(clouds[ci]);
  } else {
    const size_t stride = static_cast<size_t>(opts.threads);
    for (size_t begin = 0; begin < clouds.size(); begin += stride) {
      std::vector<std::future<CloudPreds>> futures;
      for (size_t ci = begin; ci < std::min(begin + stride, clouds.size()); ++ci)
        futures.push_back(std::async(std::launch::async, predict_cloud,
                                     std::cref(clouds[ci])));
      for (size_t k = 0; k < futures.size(); ++k)
        preds[begin + k] = futures[k].get();
    }
  }

  // Candidate IoU of every (prototype, novel class) pair.
  Matrix tp = Matrix::Zero(cn, cn);
  Vector pred_total = Vector::Zero(cn);
  std::vector<int64_t> gt_total(static_cast<size_t>(cn), 0);
  for (size_t ci = 0; ci < clouds.size(); ++ci) {
    const auto view = clouds[ci].eval_view();
    for (size_t i = 0; i < clouds[ci].size(); ++i) {
      const int hs = preds[ci].head_space[i];
      const int proto = hs >= cb ? hs - cb : -1;
      const int gt_slot = task.novel_slot(view.label(i));
      if (proto >= 0) pred_total[proto] += 1.0;
      if (gt_slot >= 0) ++gt_total[static_cast<size_t>(gt_slot)];
      if (proto >= 0 && gt_slot >= 0) tp(proto, gt_slot) += 1.0;
    }
  }
  Matrix iou_candidates = Matrix::Zero(cn, cn);
  for (int i = 0; i < cn; ++i)
    for (int c = 0; c < cn; ++c) {
      const double denom = pred_total[i] +
                           static_cast<double>(gt_total[static_cast<size_t>(c)]) -
                           tp(i, c);
      iou_candidates(i, c) = denom <= 0.0 ? 0.0 : tp(i, c) / denom;
    }
  const std::vector<int> proto_to_slot = hungarian_map(iou_candidates);

  // Final confusion over dataset class ids.
  MiouReport report;
  report.task = task;
  report.head = head;
  for (int slot : proto_to_slot)
    report.mapping.push_back(task.novel_classes[static_cast<size_t>(slot)]);

  ConfusionMatrix conf(task.num_classes());
  for (size_t ci = 0; ci < clouds.size(); ++ci) {
    const auto view = clouds[ci].eval_view();
    for (size_t i = 0; i < clouds[ci].size(); ++i) {
      const int hs = preds[ci].head_space[i];
      const int pred_id =
          hs < cb ? task.base_classes[static_cast<size_t>(hs)]
                  : report.mapping[static_cast<size_t>(hs - cb)];
      conf.add(view.label(i), pred_id);
    }
  }

  report.per_class_iou = iou_per_class(conf);
  std::vector<double> novel_ious, base_ious;
  for (int id : task.novel_classes)
    novel_ious.push_back(report.per_class_iou[static_cast<size_t>(id)]);
  for (int id : task.base_classes)
    base_ious.push_back(report.per_class_iou[static_cast<size_t>(id)]);
  report.miou_novel = mean_defined(novel_ious);
  report.miou_base = mean_defined(base_ious);
  report.miou_all = mean_defined(report.per_class_iou);
  return report;
}

}  // namespace ncdseg
