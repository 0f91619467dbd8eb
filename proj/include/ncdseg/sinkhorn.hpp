#pragma once

#include <cmath>
#include <limits>

#include "ncdseg/types.hpp"

namespace ncdseg {

struct SinkhornConfig {
  int n_iters = 3;
  double eps_start = 0.3;
  double eps_end = 0.05;
  long total_steps = 1;
};

/// Closed-form linear decay of the assignment smoothness over training.
struct EpsSchedule {
  double eps_start = 0.3;
  double eps_end = 0.05;
  long total_steps = 1;
};

inline double epsilon_at(const EpsSchedule& s, long step) {
  if (step < 0 || step > s.total_steps)
    throw StepOutOfRange("step " + std::to_string(step) +
                         " outside [0, " + std::to_string(s.total_steps) + "]");
  const double t =
      static_cast<double>(step) / static_cast<double>(s.total_steps);
  // two-coefficient form is exact at both endpoints
  return s.eps_start * (1.0 - t) + s.eps_end * t;
}

/// Entropic optimal-transport assignment between prototypes (rows) and points
/// (columns), targeting row sums 1/rho and column sums 1/m.
///
/// Runs alternating marginal normalizations in the log domain; row scaling is
/// applied last and then tightened in plain arithmetic, so at any truncated
/// iteration count the per-prototype equipartition is exact to rounding.
inline AssignmentMatrix solve_assignment(const Matrix& similarities,
                                         double eps, int n_iters) {
  const Eigen::Index rho = similarities.rows();
  const Eigen::Index m = similarities.cols();
  if (rho < 1 || m < 1)
    throw ShapeMismatch("similarity matrix must be at least 1x1");
  if (!(eps > 0.0)) throw NumericOverflow("epsilon must be positive");
  if (!similarities.allFinite())
    throw NumericOverflow("similarity matrix has non-finite entries");

  const Matrix logits = similarities / eps;
  const double log_r = -std::log(static_cast<double>(rho));
  const double log_c = -std::log(static_cast<double>(m));

  Vector u = Vector::Zero(rho);  // log row scaling
  Vector v = Vector::Zero(m);    // log column scaling

  auto lse_col = [&](Eigen::Index j) {
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < rho; ++i)
      hi = std::max(hi, logits(i, j) + u[i]);
    double s = 0.0;
    for (Eigen::Index i = 0; i < rho; ++i)
      s += std::exp(logits(i, j) + u[i] - hi);
    return hi + std::log(s);
  };
  auto lse_row = [&](Eigen::Index i) {
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j)
      hi = std::max(hi, logits(i, j) + v[j]);
    double s = 0.0;
    for (Eigen::Index j = 0; j < m; ++j)
      s += std::exp(logits(i, j) + v[j] - hi);
    return hi + std::log(s);
  };

  for (int it = 0; it < n_iters; ++it) {
    for (Eigen::Index j = 0; j < m; ++j) v[j] = log_c - lse_col(j);
    for (Eigen::Index i = 0; i < rho; ++i) u[i] = log_r - lse_row(i);
  }

  AssignmentMatrix q(rho, m);
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = 0; i < rho; ++i)
      q(i, j) = std::exp(logits(i, j) + u[i] + v[j]);

  // Exact last-normalized marginal.
  const double target_row = 1.0 / static_cast<double>(rho);
  for (Eigen::Index i = 0; i < rho; ++i) {
    const double s = q.row(i).sum();
    if (s > 0.0) q.row(i) *= target_row / s;
  }
  return q;
}

/// Transposed per-point soft labels: row i is column i of the assignment,
/// rescaled to a distribution over prototypes.
inline Matrix pseudo_labels(const AssignmentMatrix& assignment) {
  Matrix labels = assignment.transpose();
  for (Eigen::Index i = 0; i < labels.rows(); ++i) {
    const double s = labels.row(i).sum();
    if (s <= 0.0)
      throw DegenerateColumn("assignment column " + std::to_string(i) +
                             " sums to zero");
    labels.row(i) /= s;
  }
  return labels;
}

}  // namespace ncdseg
