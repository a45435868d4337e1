#pragma once

#include "wadn/aggregation.hpp"
#include "wadn/common.hpp"
#include "wadn/data_model.hpp"
#include "wadn/label_shift.hpp"
#include "wadn/network.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace wadn {

enum class Scenario { unsupervised, limited_target, partial };

Scenario parse_scenario(const std::string& name);
std::string to_string(Scenario scenario);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 20;  // per domain
  double c0 = 0.01;
  std::optional<double> c1;  // unset: max_t of the epoch's weighted risks
  double epsilon = 0.5;
  double ema_keep = 0.7;     // label-ratio moving average
  double lambda_keep = 0.8;  // task-weight moving average
  double centroid_keep = 0.7;
  std::optional<double> l1_coeff;  // unset: 0, or 0.1 in the partial scenario
  double penalty_coeff = 10.0;
  PenaltyForm penalty_form = PenaltyForm::squared;
  Architecture architecture;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  int eval_every = 1;
  int critic_steps = 1;
  int warmup_epochs = 3;  // uniform class weights in the explicit term
  double target_label_fraction = 0.1;
  // limited_target: re-estimate ratios each epoch instead of the one-off direct ratio.
  bool refresh_alpha = false;
  // Freeze lambda at uniform / alpha at 1 (the merge-all baseline sets both).
  bool fixed_lambda = false;
  bool fixed_alpha = false;

  double effective_l1(Scenario scenario) const;
  void validate() const;
};

/// The same trainer with lambda uniform and alpha = 1 throughout.
TrainConfig merge_baseline(TrainConfig config);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;  // recall; NaN for classes absent from the test set
};

EvalResult evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                int class_count);
EvalResult evaluate(const ModelState& state, const LabeledDataset& test);

struct EpochReport {
  int epoch = 0;
  int steps = 0;
  std::optional<double> target_accuracy;
  std::vector<double> per_class_accuracy;
  LossBreakdown mean_loss;
  double mean_critic_loss = 0.0;
  // Per-source epoch means.
  std::vector<double> weighted_risk;
  std::vector<double> implicit_dist;
  std::vector<double> explicit_dist;
  std::vector<double> cond_dist;
  // Values after this epoch's re-estimation, used during the next epoch.
  std::vector<double> lambda;
  std::vector<LabelRatio> alpha;
  // max_t ||alpha_t - true ratio||_inf against the empirical priors; unset when
  // the true ratio is undefined.
  std::optional<double> alpha_error;
  std::vector<std::string> events;
};

struct RunResult {
  std::vector<EpochReport> epochs;
  ModelState state;  // last good state
  std::vector<LabelRatio> alpha;
  TaskWeights lambda;
  bool aborted = false;
  std::string abort_reason;
};

/// Called after every epoch; lets callers stream artifacts.
using EpochCallback = std::function<void(const EpochReport&, const ModelState&)>;

/// Trains on `bundle`. A non-finite loss stops the run with aborted = true and
/// the last good state; other errors propagate.
RunResult run(const DomainBundle& bundle, Scenario scenario, const TrainConfig& config,
              const EpochCallback& on_epoch = {});

/// The labelled-target / test partition used by limited_target for this config.
std::pair<LabeledDataset, LabeledDataset> limited_target_split(const DomainBundle& bundle,
                                                               const TrainConfig& config);

/// Softmin (temperature 1) over exact W1 between each source marginal and the
/// target marginal, each subsampled to at most `cap` points.
TaskWeights baseline_marginal_weights(const DomainBundle& bundle, std::uint64_t seed = 0,
                                      std::size_t cap = 256);

}  // namespace wadn
