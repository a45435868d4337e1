#include "wadn/label_shift.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace wadn {

LabelRatio LabelRatio::ones(int class_count) {
  return LabelRatio{std::vector<double>(static_cast<std::size_t>(class_count), 1.0)};
}

bool LabelRatio::feasible(const ClassPrior& src_prior, double tol) const {
  if (values.size() != src_prior.size()) return false;
  double mass = 0.0;
  for (std::size_t y = 0; y < values.size(); ++y) {
    if (!std::isfinite(values[y]) || values[y] < 0.0) return false;
    mass += values[y] * src_prior[y];
  }
  return std::abs(mass - 1.0) <= tol;
}

ConfusionMatrix ConfusionMatrix::zeros(int class_count) {
  return ConfusionMatrix{Matrix::Zero(class_count, class_count), false};
}

void ConfusionMatrix::add(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw InvalidArgument("confusion matrix: predictions and labels differ in length");
  }
  const int k = class_count();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] < 0 || predictions[i] >= k || labels[i] < 0 || labels[i] >= k) {
      throw InvalidArgument("confusion matrix: class index out of range");
    }
    joint(predictions[i], labels[i]) += 1.0;
  }
}

ConfusionMatrix ConfusionMatrix::normalize() const {
  const double total = joint.sum();
  if (!(total > 0.0)) throw InvalidArgument("confusion matrix has no mass");
  return ConfusionMatrix{joint / total, true};
}

ConfusionMatrix confusion_from_predictions(std::span<const int> predictions,
                                           std::span<const int> labels, int class_count) {
  ConfusionMatrix c = ConfusionMatrix::zeros(class_count);
  c.add(predictions, labels);
  return c;
}

LabelRatio direct_ratio(const ClassPrior& src_prior, const ClassPrior& tgt_prior) {
  if (src_prior.size() != tgt_prior.size()) {
    throw InvalidArgument("direct_ratio: priors differ in length");
  }
  LabelRatio r{std::vector<double>(src_prior.size(), 0.0)};
  for (std::size_t y = 0; y < src_prior.size(); ++y) {
    if (tgt_prior[y] == 0.0) continue;
    if (src_prior[y] == 0.0) {
      throw InvalidArgument(
          fmt::format("direct_ratio: class {} has target mass {} but is unsupported by the source",
                      y, tgt_prior[y]));
    }
    r.values[y] = tgt_prior[y] / src_prior[y];
  }
  return r;
}

double ratio_objective(const ConfusionMatrix& conf, const ClassPrior& tgt_pred_prior,
                       std::span<const double> ratio, double l1_coeff, double log_floor) {
  const int k = conf.class_count();
  double value = 0.0;
  for (int y = 0; y < k; ++y) {
    const double ty = tgt_pred_prior[static_cast<std::size_t>(y)];
    if (ty == 0.0) continue;
    double q = 0.0;
    for (int c = 0; c < k; ++c) q += conf.joint(y, c) * ratio[static_cast<std::size_t>(c)];
    value -= ty * std::log(q + log_floor);
  }
  double l1 = 0.0;
  for (double a : ratio) l1 += std::abs(a);
  return value + l1_coeff * l1;
}

RatioEstimate solve_ratio(const ConfusionMatrix& conf, const ClassPrior& tgt_pred_prior,
                          const ClassPrior& src_prior, double l1_coeff,
                          const RatioSolverOptions& options) {
  const int k = conf.class_count();
  if (conf.joint.cols() != k || static_cast<int>(tgt_pred_prior.size()) != k ||
      static_cast<int>(src_prior.size()) != k) {
    throw InvalidArgument("solve_ratio: confusion matrix and priors disagree on |Y|");
  }
  if (!conf.normalized) throw InvalidArgument("solve_ratio: confusion matrix must be normalized");
  if (!(l1_coeff >= 0.0)) throw InvalidArgument("solve_ratio: l1 coefficient must be >= 0");
  if ((conf.joint.array() < 0.0).any() || !conf.joint.allFinite()) {
    throw InvalidArgument("solve_ratio: confusion matrix entries must be finite and >= 0");
  }

  std::vector<int> support;
  for (int c = 0; c < k; ++c) {
    if (src_prior[static_cast<std::size_t>(c)] > 0.0) support.push_back(c);
  }
  for (int y = 0; y < k; ++y) {
    if (tgt_pred_prior[static_cast<std::size_t>(y)] <= 0.0) continue;
    bool explained = false;
    for (int c : support) explained = explained || conf.joint(y, c) > 0.0;
    if (!explained) {
      throw NumericalError(fmt::format(
          "solve_ratio: predicted target mass on class {} but its confusion row is empty", y));
    }
  }

  RatioEstimate out;
  {
    Matrix restricted(k, static_cast<Eigen::Index>(support.size()));
    for (std::size_t j = 0; j < support.size(); ++j) {
      restricted.col(static_cast<Eigen::Index>(j)) = conf.joint.col(support[j]);
    }
    Eigen::FullPivLU<Matrix> lu(restricted);
    lu.setThreshold(1e-12);
    if (lu.rank() < static_cast<Eigen::Index>(support.size())) {
      out.degenerate = true;
      log::warn("solve_ratio: confusion matrix is singular on the source support; "
                "returning the best feasible point found");
    }
  }

  const std::size_t n = support.size();
  // Simplex coordinates b_j = a(support_j) * S(support_j); start at a = 1.
  std::vector<double> b(n), s(n);
  for (std::size_t j = 0; j < n; ++j) {
    s[j] = src_prior[static_cast<std::size_t>(support[j])];
    b[j] = s[j];
  }

  std::vector<double> ratio(static_cast<std::size_t>(k), 0.0);
  const auto to_ratio = [&](const std::vector<double>& bb) {
    std::fill(ratio.begin(), ratio.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) ratio[static_cast<std::size_t>(support[j])] = bb[j] / s[j];
  };
  const auto objective = [&](const std::vector<double>& bb) {
    to_ratio(bb);
    return ratio_objective(conf, tgt_pred_prior, ratio, l1_coeff, options.log_floor);
  };
  std::vector<double> grad(n);
  const auto gradient = [&](const std::vector<double>& bb) {
    to_ratio(bb);
    std::vector<double> q(static_cast<std::size_t>(k), 0.0);
    for (int y = 0; y < k; ++y) {
      for (int c = 0; c < k; ++c) q[static_cast<std::size_t>(y)] += conf.joint(y, c) * ratio[static_cast<std::size_t>(c)];
    }
    for (std::size_t j = 0; j < n; ++j) {
      double g = l1_coeff;
      for (int y = 0; y < k; ++y) {
        const double ty = tgt_pred_prior[static_cast<std::size_t>(y)];
        if (ty == 0.0) continue;
        g -= ty * conf.joint(y, support[j]) / (q[static_cast<std::size_t>(y)] + options.log_floor);
      }
      grad[j] = g / s[j];
    }
  };

  double f = objective(b);
  double step = 1.0;
  std::vector<double> trial(n);
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    gradient(b);
    const double gmin = *std::min_element(grad.begin(), grad.end());
    double inner = 0.0;
    for (std::size_t j = 0; j < n; ++j) inner += grad[j] * b[j];
    out.duality_gap = inner - gmin;
    if (out.duality_gap <= options.gap_tolerance) break;

    bool accepted = false;
    while (step > 1e-30) {
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        trial[j] = b[j] * std::exp(-step * (grad[j] - gmin));
        z += trial[j];
      }
      double lin = 0.0, kl = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        trial[j] /= z;
        lin += grad[j] * (trial[j] - b[j]);
        if (trial[j] > 0.0) kl += trial[j] * std::log(trial[j] / b[j]);
      }
      const double f_trial = objective(trial);
      if (f_trial <= f + lin + kl / step + 1e-15 * std::abs(f)) {
        b.swap(trial);
        f = f_trial;
        accepted = true;
        step *= 1.5;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }

  to_ratio(b);
  out.ratio = LabelRatio{ratio};
  out.objective = f;
  out.iterations = it;
  // Exact feasibility: rescale against drift of the simplex normalization.
  double mass = 0.0;
  for (std::size_t y = 0; y < ratio.size(); ++y) mass += ratio[y] * src_prior[y];
  for (double& a : out.ratio.values) a /= mass;
  if (!std::isfinite(f)) throw NumericalError("solve_ratio: objective is not finite");
  return out;
}

LabelRatio estimate_ratio(const ConfusionMatrix& conf, const ClassPrior& tgt_pred_prior,
                          const ClassPrior& src_prior, double l1_coeff) {
  return solve_ratio(conf, tgt_pred_prior, src_prior, l1_coeff).ratio;
}

LabelRatio moving_average_ratio(const LabelRatio& old_ratio, const LabelRatio& new_ratio,
                                double keep, const ClassPrior& src_prior) {
  if (!(keep >= 0.0 && keep <= 1.0)) throw InvalidArgument("moving average keep must be in [0,1]");
  if (old_ratio.size() != new_ratio.size() || old_ratio.size() != src_prior.size()) {
    throw InvalidArgument("moving_average_ratio: length mismatch");
  }
  LabelRatio out{std::vector<double>(old_ratio.size())};
  double mass = 0.0;
  for (std::size_t y = 0; y < out.size(); ++y) {
    out.values[y] = keep * old_ratio[y] + (1.0 - keep) * new_ratio[y];
    mass += out.values[y] * src_prior[y];
  }
  if (mass > 0.0) {
    for (double& a : out.values) a /= mass;
  }
  return out;
}

}  // namespace wadn
