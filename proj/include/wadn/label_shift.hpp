#pragma once

#include "wadn/common.hpp"
#include "wadn/data_model.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace wadn {

/// Per-class importance weights alpha(y) = T(y) / S(y) for one source.
struct LabelRatio {
  std::vector<double> values;

  static LabelRatio ones(int class_count);
  double operator[](std::size_t y) const { return values[y]; }
  std::size_t size() const { return values.size(); }

  /// Nonnegative, finite and sum_y values[y] * src_prior[y] = 1 within `tol`.
  bool feasible(const ClassPrior& src_prior, double tol = 1e-6) const;
};

/// Joint mass of (predicted = y, true = k) stored at joint(y, k).
struct ConfusionMatrix {
  Matrix joint;
  bool normalized = false;

  static ConfusionMatrix zeros(int class_count);
  int class_count() const { return static_cast<int>(joint.rows()); }

  void add(std::span<const int> predictions, std::span<const int> labels);
  /// Divides by the total mass; throws if the matrix is empty.
  ConfusionMatrix normalize() const;
};

/// T(y)/S(y); zero where the target has no mass. Throws InvalidArgument when a
/// class with target mass is missing from the source.
LabelRatio direct_ratio(const ClassPrior& src_prior, const ClassPrior& tgt_prior);

ConfusionMatrix confusion_from_predictions(std::span<const int> predictions,
                                           std::span<const int> labels, int class_count);

struct RatioEstimate {
  LabelRatio ratio;
  double objective = 0.0;
  double duality_gap = 0.0;  // Frank-Wolfe gap at the returned point
  int iterations = 0;
  bool degenerate = false;  // confusion matrix singular on the source support
};

struct RatioSolverOptions {
  int max_iterations = 5000;
  double gap_tolerance = 1e-7;
  double log_floor = 1e-12;
};

/// Minimizes  -sum_y T(y) log(sum_k C[y,k] a(k) + floor) + l1 * ||a||_1
/// subject to a >= 0 and sum_k a(k) S(k) = 1, by exponentiated gradient on the
/// simplex b(k) = a(k) S(k) with a relative-smoothness backtracking line search.
/// Classes absent from the source get ratio 0.
///
/// Throws NumericalError when a row of C is empty for a class with predicted
/// target mass (nothing in the source can explain that prediction).
RatioEstimate solve_ratio(const ConfusionMatrix& conf, const ClassPrior& tgt_pred_prior,
                          const ClassPrior& src_prior, double l1_coeff,
                          const RatioSolverOptions& options = {});

LabelRatio estimate_ratio(const ConfusionMatrix& conf, const ClassPrior& tgt_pred_prior,
                          const ClassPrior& src_prior, double l1_coeff);

/// The ratio objective above, exposed for oracles and diagnostics.
double ratio_objective(const ConfusionMatrix& conf, const ClassPrior& tgt_pred_prior,
                       std::span<const double> ratio, double l1_coeff, double log_floor = 1e-12);

/// keep * old + (1 - keep) * new, rescaled so that sum_y a(y) S(y) = 1.
LabelRatio moving_average_ratio(const LabelRatio& old_ratio, const LabelRatio& new_ratio,
                                double keep, const ClassPrior& src_prior);

}  // namespace wadn
