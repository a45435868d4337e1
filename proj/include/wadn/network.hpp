#pragma once

#include "wadn/aggregation.hpp"
#include "wadn/common.hpp"
#include "wadn/data_model.hpp"
#include "wadn/label_shift.hpp"
#include "wadn/transport.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace wadn {

/// Fully connected layer y = W x + b with W stored out x in.
struct DenseLayer {
  Matrix weight;
  Vector bias;
};

/// Feed-forward network: ReLU after every layer except the last.
class Mlp {
 public:
  Mlp() = default;
  /// widths = {in, hidden..., out}; He-normal weights, zero biases.
  Mlp(std::span<const int> widths, std::uint64_t seed);

  struct Cache {
    std::vector<Matrix> inputs;  // input of each layer
    std::vector<Matrix> pre;     // pre-activation of each layer
  };

  int input_dim() const;
  int output_dim() const;
  std::size_t parameter_count() const;

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;

  /// Accumulates d(loss)/d(params) into `grad` (same shape) given
  /// d(loss)/d(output); returns d(loss)/d(input).
  Matrix backward(const Cache& cache, const Matrix& grad_output, Mlp& grad) const;

  /// For a scalar-output network: per-row gradient of the output w.r.t. the input.
  Matrix input_gradient(const Matrix& x) const;

  /// Mean over rows of penalty(||d out / d x||). When `grad` is given, adds
  /// scale * d(mean penalty)/d(weights); with ReLU the input gradient is
  /// piecewise constant in x, so the penalty has no gradient w.r.t. biases or x.
  /// `pattern`, when given, absorbs a hash of the activation pattern.
  double gradient_penalty(const Matrix& points, PenaltyForm form, Mlp* grad = nullptr,
                          double scale = 1.0, std::uint64_t* pattern = nullptr) const;

  Mlp zeros_like() const;
  void set_zero();

  std::vector<DenseLayer> layers;
};

/// Exposes a scalar-output Mlp as a critic on latent space.
class MlpCritic final : public ScalarField {
 public:
  explicit MlpCritic(const Mlp& net) : net_(net) {}
  double value(const Vector& z) const override;
  Vector gradient(const Vector& z) const override;

 private:
  const Mlp& net_;
};

/// Contiguous views over every trainable array of a set of networks.
using ParamBlocks = std::vector<std::span<double>>;
void append_blocks(Mlp& net, ParamBlocks& blocks);

struct Architecture {
  std::vector<int> feature_hidden{64};  // g: d -> hidden... -> latent
  int latent_dim = 16;
  std::vector<int> classifier_hidden;   // h: latent -> hidden... -> |Y|
  std::vector<int> critic_hidden{64};   // d_t: latent -> hidden... -> 1

  /// "desk" (default), "amazon", "digits_head".
  static Architecture preset(const std::string& name);
};

enum class OptimizerKind { sgd_momentum, adadelta };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.005;
  double momentum = 0.9;
  double rho = 0.9;
  double epsilon = 1e-6;

  /// "sgd" (lr 0.005, momentum 0.9), "adadelta-0.5", "adadelta-1.0".
  static OptimizerConfig preset(const std::string& name);
};

/// Per-parameter optimizer slots; layout follows the ParamBlocks it is used with.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}
  void step(const ParamBlocks& params, const ParamBlocks& grads);
  const OptimizerConfig& config() const { return config_; }
  std::vector<std::vector<double>>& slots() { return slots_; }
  const std::vector<std::vector<double>>& slots() const { return slots_; }

 private:
  OptimizerConfig config_;
  std::vector<std::vector<double>> slots_;  // 1 per block (momentum) or 2 (adadelta)
};

/// Everything learned: g, h, the critics, class centroids and optimizer slots.
struct ModelState {
  Mlp feature;
  Mlp classifier;
  std::vector<Mlp> critics;
  std::vector<CentroidSet> source_centroids;
  CentroidSet target_centroids;
  Optimizer model_optimizer;
  Optimizer critic_optimizer;
  int class_count = 0;

  static ModelState create(int input_dim, int class_count, std::size_t source_count,
                           const Architecture& arch, const OptimizerConfig& opt,
                           std::uint64_t seed);

  std::size_t source_count() const { return critics.size(); }
  int latent_dim() const { return feature.output_dim(); }
  bool finite() const;
};

struct LossBreakdown {
  double classification = 0.0;
  double explicit_cond = 0.0;
  double implicit_cond = 0.0;
  double grad_penalty = 0.0;
  double total = 0.0;
  double epsilon = 0.5;
};

struct LossConfig {
  double c0 = 0.01;
  double epsilon = 0.5;
  double penalty_coeff = 10.0;
  PenaltyForm penalty_form = PenaltyForm::squared;
  double centroid_keep = 0.7;
};

/// Selects which terms contribute to values and gradients.
struct TermMask {
  bool classification = true;
  bool explicit_cond = true;
  bool implicit_cond = true;
  bool penalty = true;

  static TermMask only_classification() { return {true, false, false, false}; }
  static TermMask only_explicit() { return {false, true, false, false}; }
  static TermMask only_implicit() { return {false, false, true, false}; }
  static TermMask only_penalty() { return {false, false, false, true}; }
};

struct DomainBatch {
  Matrix x;
  Labels y;
};

struct StepBatch {
  std::vector<DomainBatch> sources;
  DomainBatch target;  // y used only when target labels are visible
};

struct StepInputs {
  std::span<const LabelRatio> alphas;
  const TaskWeights* lambda = nullptr;
  // Class weights of the explicit term (predicted or labelled target prior).
  const ClassPrior* target_prior = nullptr;
  bool use_target_labels = false;
  std::uint64_t penalty_seed = 0;
};

struct Gradients {
  Mlp feature;
  Mlp classifier;
  std::vector<Mlp> critics;
};

struct StepResult {
  LossBreakdown loss;
  // g, h gradients are of `loss.total`; critic gradients are of the critic
  // objective -c0 (1 - eps) * implicit + penalty_coeff * penalty.
  Gradients grads;
  double critic_loss = 0.0;
  std::vector<CentroidSet> source_centroids;  // after the moving-average update
  CentroidSet target_centroids;
  std::vector<double> source_weighted_risk;  // mean alpha-weighted CE per source
  std::vector<double> source_implicit;
  std::vector<double> source_explicit;
  std::vector<Labels> source_predictions;
  Labels target_predictions;
  // d(total)/d(target latents) through the implicit term, and the critic
  // objective's d/d(target latents); the first is minus the second.
  Matrix implicit_latent_grad_model;
  Matrix implicit_latent_grad_critic;
  // Hash of every ReLU on/off bit and target pseudo-label seen in the step;
  // the loss is smooth in the parameters while this stays fixed.
  std::uint64_t activation_signature = 0;
};

struct ForwardResult {
  Matrix latents;
  Matrix scores;
  Labels predictions;
};

/// latents = g(x), scores = h(latents), predictions = argmax (lowest index on ties).
ForwardResult forward(const Mlp& feature, const Mlp& classifier, const Matrix& x);

Labels argmax_rows(const Matrix& scores);

/// mean_i alpha(y_i) * cross_entropy(scores_i, y_i).
double weighted_classification_loss(const Matrix& scores, std::span<const int> labels,
                                    const LabelRatio& alpha);

/// sum_y w(y) ||C_t^y - C^y|| over classes with positive prior present on both
/// sides; w is the prior renormalized over those classes (warns when a class
/// is skipped). Throws InvalidArgument when no class overlaps.
double explicit_conditional_loss(const CentroidSet& source, const CentroidSet& target,
                                 const ClassPrior& tgt_prior);

/// Values and gradients of the full objective at the current state; does not
/// modify the state.
StepResult evaluate_step(const ModelState& state, const StepBatch& batch, const StepInputs& inputs,
                         const LossConfig& config, TermMask mask = {});

struct StepOptions {
  int critic_steps = 1;
};

/// One min-max update: critics descend on their objective, g and h descend on
/// the total with the critic term reversed, then centroids are committed.
/// Throws NumericalError on a non-finite loss, leaving `state` untouched.
StepResult training_step(ModelState& state, const StepBatch& batch, const StepInputs& inputs,
                         const LossConfig& config, const StepOptions& options = {});

struct GradientCheckEntry {
  std::string term;
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
  std::size_t parameters = 0;
  bool finite = true;
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;
  double tolerance = 1e-4;
  bool passed() const;
  double max_relative_error() const;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central-difference check of an arbitrary scalar function of `params`.
/// `evaluate(true)` must return the value and fill `grads`; `evaluate(false)`
/// returns the value only. With `pattern` (read after each evaluate), a
/// stencil end whose pattern differs from the base point's is treated as a
/// kink and the step shrinks by 10x, at most four times. If the ends still
/// differ, the base point is on the kink and the analytic value is compared
/// with the one-sided differences as well. Relative errors use the floor
/// 1e-6 * max(1, max |analytic|).
GradientCheckEntry check_gradient(const std::string& name, const ParamBlocks& params,
                                  const ParamBlocks& grads,
                                  const std::function<double(bool)>& evaluate, double step = 1e-5,
                                  const std::function<std::uint64_t()>& pattern = {});

/// Checks the classification, explicit, implicit and penalty terms separately
/// against central differences (step 1e-5).
GradientCheckReport gradient_check(const ModelState& state, const StepBatch& batch,
                                   const StepInputs& inputs, const LossConfig& config,
                                   double tolerance = 1e-4);

}  // namespace wadn
