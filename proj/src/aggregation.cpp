#include "wadn/aggregation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wadn {

TaskWeights TaskWeights::uniform(std::size_t source_count) {
  if (source_count == 0) throw InvalidArgument("task weights need at least one source");
  return TaskWeights{std::vector<double>(source_count, 1.0 / static_cast<double>(source_count))};
}

TaskWeights TaskWeights::one_hot(std::size_t source_count, std::size_t index) {
  if (index >= source_count) throw InvalidArgument("one_hot index out of range");
  TaskWeights w{std::vector<double>(source_count, 0.0)};
  w.values[index] = 1.0;
  return w;
}

void TaskWeights::validate(double tol) const {
  if (values.empty()) throw InvalidArgument("task weights are empty");
  double total = 0.0;
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("task weights must be >= 0");
    total += v;
  }
  if (std::abs(total - 1.0) > tol) {
    throw InvalidArgument(fmt::format("task weights sum to {}", total));
  }
}

void SourceStats::validate() const {
  const std::size_t t = beta.size();
  if (t == 0 || weighted_risk.size() != t || cond_dist.size() != t) {
    throw InvalidArgument("source stats: vectors must share a nonzero length");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!(weighted_risk[i] >= 0.0) || !(cond_dist[i] >= 0.0) || !(beta[i] > 0.0) ||
        !std::isfinite(weighted_risk[i]) || !std::isfinite(cond_dist[i])) {
      throw InvalidArgument(fmt::format("source stats: invalid entry for source {}", i));
    }
    total += beta[i];
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw InvalidArgument(fmt::format("source stats: beta sums to {}", total));
  }
}

void BoundConstants::validate() const {
  if (!(lipschitz_loss > 0.0 && lipschitz_k > 0.0 && loss_max > 0.0 && ratio_sup > 0.0)) {
    throw InvalidArgument("bound constants must all be positive");
  }
}

double lambda_spread(std::span<const double> lambda, std::span<const double> beta) {
  double s = 0.0;
  for (std::size_t t = 0; t < lambda.size(); ++t) s += lambda[t] * lambda[t] / beta[t];
  return std::sqrt(s);
}

double lambda_objective(const SourceStats& stats, double c0, double c1,
                        std::span<const double> lambda) {
  double linear = 0.0;
  for (std::size_t t = 0; t < lambda.size(); ++t) {
    linear += lambda[t] * (stats.weighted_risk[t] + c0 * stats.cond_dist[t]);
  }
  return linear + c1 * lambda_spread(lambda, stats.beta);
}

TaskWeights solve_lambda(const SourceStats& stats, double c0, double c1) {
  stats.validate();
  if (!(c0 >= 0.0) || !(c1 >= 0.0)) throw InvalidArgument("solve_lambda: c0, c1 must be >= 0");
  const std::size_t count = stats.size();
  std::vector<double> v(count);
  for (std::size_t t = 0; t < count; ++t) v[t] = stats.weighted_risk[t] + c0 * stats.cond_dist[t];

  TaskWeights out{std::vector<double>(count, 0.0)};
  if (c1 == 0.0) {
    const double best = *std::min_element(v.begin(), v.end());
    const double tol = 1e-12 * std::max(1.0, std::abs(best));
    std::size_t ties = 0;
    for (double x : v) ties += x <= best + tol ? 1 : 0;
    for (std::size_t t = 0; t < count; ++t) {
      out.values[t] = v[t] <= best + tol ? 1.0 / static_cast<double>(ties) : 0.0;
    }
    return out;
  }

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });

  // Active set = the k smallest v. Solve the quadratic on each piece and keep
  // the root that lies below the next breakpoint.
  double sb = 0.0, sbv = 0.0, sbv2 = 0.0;
  double mu = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t t = order[k];
    sb += stats.beta[t];
    sbv += stats.beta[t] * v[t];
    sbv2 += stats.beta[t] * v[t] * v[t];
    const double disc = sbv * sbv - sb * (sbv2 - c1 * c1);
    mu = (sbv + std::sqrt(std::max(0.0, disc))) / sb;
    if (k + 1 == count || mu <= v[order[k + 1]]) break;
  }
  double total = 0.0;
  for (std::size_t t = 0; t < count; ++t) {
    out.values[t] = stats.beta[t] * std::max(0.0, mu - v[t]);
    total += out.values[t];
  }
  for (double& x : out.values) x /= total;
  return out;
}

BoundReport theorem1_diagnostic(const SourceStats& stats, const TaskWeights& lambda,
                                const BoundConstants& consts, double n_total, double delta) {
  stats.validate();
  lambda.validate();
  consts.validate();
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidArgument("delta must lie in (0,1)");
  if (!(n_total > 0.0)) throw InvalidArgument("n_total must be positive");
  if (lambda.size() != stats.size()) throw InvalidArgument("lambda and stats differ in length");
  BoundReport r;
  for (std::size_t t = 0; t < stats.size(); ++t) {
    r.term_weighted_risk += lambda[t] * stats.weighted_risk[t];
    r.term_conditional += lambda[t] * stats.cond_dist[t];
  }
  r.term_conditional *= consts.lipschitz_loss * consts.lipschitz_k;
  r.term_sample = consts.loss_max * consts.ratio_sup * lambda_spread(lambda.values, stats.beta) *
                  std::sqrt(std::log(1.0 / delta) / (2.0 * n_total));
  return r;
}

TaskWeights moving_average_lambda(const TaskWeights& old_weights, const TaskWeights& new_weights,
                                  double keep) {
  if (old_weights.size() != new_weights.size()) {
    throw InvalidArgument("moving_average_lambda: length mismatch");
  }
  if (!(keep >= 0.0 && keep <= 1.0)) throw InvalidArgument("moving average keep must be in [0,1]");
  TaskWeights out{std::vector<double>(old_weights.size())};
  for (std::size_t t = 0; t < out.size(); ++t) {
    out.values[t] = keep * old_weights[t] + (1.0 - keep) * new_weights[t];
  }
  return out;
}

}  // namespace wadn
