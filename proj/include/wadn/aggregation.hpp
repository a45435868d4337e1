#pragma once

#include "wadn/common.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace wadn {

/// Task-relation weights over the T sources; a point of the probability simplex.
struct TaskWeights {
  std::vector<double> values;

  static TaskWeights uniform(std::size_t source_count);
  static TaskWeights one_hot(std::size_t source_count, std::size_t index);
  double operator[](std::size_t t) const { return values[t]; }
  std::size_t size() const { return values.size(); }

  void validate(double tol = 1e-9) const;
};

/// Per-source quantities entering the source-selection objective.
struct SourceStats {
  std::vector<double> weighted_risk;
  std::vector<double> cond_dist;
  std::vector<double> beta;  // N_t / N

  std::size_t size() const { return beta.size(); }
  void validate() const;
};

struct BoundConstants {
  double lipschitz_loss = 1.0;  // L
  double lipschitz_k = 1.0;     // K
  double loss_max = 1.0;        // L_max
  double ratio_sup = 1.0;       // max_t,y alpha_t(y)

  void validate() const;
};

struct BoundReport {
  double term_weighted_risk = 0.0;  // I
  double term_sample = 0.0;         // II
  double term_conditional = 0.0;    // III
  // IV (ratio estimation gap) and V (complexity) need the true ratios and the
  // hypothesis class; they are reported as unobservable.
  std::string term_ratio_gap = "unobservable";
  std::string term_complexity = "unobservable";

  double observable_total() const { return term_weighted_risk + term_sample + term_conditional; }
};

/// sqrt(sum_t lambda[t]^2 / beta[t]).
double lambda_spread(std::span<const double> lambda, std::span<const double> beta);

/// sum_t lambda[t] (risk[t] + c0 dist[t]) + c1 * lambda_spread(lambda, beta).
double lambda_objective(const SourceStats& stats, double c0, double c1,
                        std::span<const double> lambda);

/// Minimizer of lambda_objective over the simplex. For c1 > 0 the minimizer is
/// unique and satisfies lambda[t] proportional to beta[t] * (mu - v[t])_+ with
/// sum_t beta[t] (mu - v[t])_+^2 = c1^2, v = risk + c0 dist; mu is found in
/// closed form over the sorted breakpoints. For c1 = 0, mass is spread
/// uniformly over the minimizing sources.
TaskWeights solve_lambda(const SourceStats& stats, double c0, double c1);

BoundReport theorem1_diagnostic(const SourceStats& stats, const TaskWeights& lambda,
                                const BoundConstants& consts, double n_total, double delta);

/// keep * old + (1 - keep) * new; stays on the simplex.
TaskWeights moving_average_lambda(const TaskWeights& old_weights, const TaskWeights& new_weights,
                                  double keep = 0.8);

}  // namespace wadn
