#include "wadn/trainer.hpp"

#include "wadn/transport.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace wadn {

Scenario parse_scenario(const std::string& name) {
  if (name == "unsupervised") return Scenario::unsupervised;
  if (name == "limited_target") return Scenario::limited_target;
  if (name == "partial") return Scenario::partial;
  throw InvalidArgument(fmt::format(
      "unknown scenario '{}' (expected unsupervised, limited_target or partial)", name));
}

std::string to_string(Scenario scenario) {
  switch (scenario) {
    case Scenario::unsupervised:
      return "unsupervised";
    case Scenario::limited_target:
      return "limited_target";
    case Scenario::partial:
      return "partial";
  }
  return "unknown";
}

double TrainConfig::effective_l1(Scenario scenario) const {
  if (l1_coeff) return *l1_coeff;
  return scenario == Scenario::partial ? 0.1 : 0.0;
}

void TrainConfig::validate() const {
  const auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(c0 >= 0.0)) throw InvalidArgument("c0 must be >= 0");
  if (c1 && !(*c1 >= 0.0)) throw InvalidArgument("c1 must be >= 0");
  if (!unit(epsilon)) throw InvalidArgument("epsilon must lie in [0,1]");
  if (!unit(ema_keep) || !unit(lambda_keep) || !unit(centroid_keep)) {
    throw InvalidArgument("moving-average keeps must lie in [0,1]");
  }
  if (l1_coeff && !(*l1_coeff >= 0.0)) throw InvalidArgument("l1_coeff must be >= 0");
  if (!(penalty_coeff >= 0.0)) throw InvalidArgument("penalty_coeff must be >= 0");
  if (eval_every < 1) throw InvalidArgument("eval_every must be >= 1");
  if (critic_steps < 1) throw InvalidArgument("critic_steps must be >= 1");
  if (warmup_epochs < 0) throw InvalidArgument("warmup_epochs must be >= 0");
  if (!(target_label_fraction > 0.0 && target_label_fraction < 1.0)) {
    throw InvalidArgument("target_label_fraction must lie in (0,1)");
  }
  if (!(optimizer.learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
}

TrainConfig merge_baseline(TrainConfig config) {
  config.fixed_lambda = true;
  config.fixed_alpha = true;
  return config;
}

EvalResult evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                int class_count) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw InvalidArgument("evaluate: predictions and labels must be nonempty and equal in length");
  }
  std::vector<double> hits(static_cast<std::size_t>(class_count), 0.0);
  std::vector<double> totals(static_cast<std::size_t>(class_count), 0.0);
  double correct = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || labels[i] >= class_count) throw InvalidArgument("evaluate: label out of range");
    totals[y] += 1.0;
    if (predictions[i] == labels[i]) {
      hits[y] += 1.0;
      correct += 1.0;
    }
  }
  EvalResult r;
  r.accuracy = correct / static_cast<double>(labels.size());
  for (std::size_t y = 0; y < hits.size(); ++y) {
    r.per_class.push_back(totals[y] > 0.0 ? hits[y] / totals[y]
                                          : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

EvalResult evaluate(const ModelState& state, const LabeledDataset& test) {
  const ForwardResult f = forward(state.feature, state.classifier, test.features);
  return evaluate_predictions(f.predictions, test.labels, state.class_count);
}

std::pair<LabeledDataset, LabeledDataset> limited_target_split(const DomainBundle& bundle,
                                                               const TrainConfig& config) {
  auto parts = split(bundle.target, config.target_label_fraction, derive_seed(config.seed, 7),
                     bundle.class_count);
  parts.first.name = bundle.target.name + "-labelled";
  parts.second.name = bundle.target.name + "-test";
  return parts;
}

namespace {

DomainBatch take_batch(const LabeledDataset& ds, std::span<const std::size_t> order,
                       std::size_t start, std::size_t size) {
  DomainBatch b;
  b.x.resize(static_cast<Eigen::Index>(size), ds.features.cols());
  b.y.resize(size);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t row = order[start + i];
    b.x.row(static_cast<Eigen::Index>(i)) = ds.features.row(static_cast<Eigen::Index>(row));
    b.y[i] = ds.labels[row];
  }
  return b;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

ClassPrior prior_from_counts(std::span<const double> counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (!(total > 0.0)) throw InvalidArgument("prior from empty counts");
  std::vector<double> p(counts.size());
  for (std::size_t y = 0; y < counts.size(); ++y) p[y] = counts[y] / total;
  return ClassPrior(p);
}

}  // namespace

RunResult run(const DomainBundle& bundle, Scenario scenario, const TrainConfig& config,
              const EpochCallback& on_epoch) {
  bundle.validate();
  config.validate();
  if (scenario == Scenario::limited_target && !bundle.target_labels_visible) {
    throw InvalidArgument("limited_target needs a bundle with visible target labels");
  }
  const int k = bundle.class_count;
  const std::size_t t_count = bundle.source_count();
  const double l1 = config.effective_l1(scenario);
  const bool labelled_target = scenario == Scenario::limited_target;

  LabeledDataset target_stream = bundle.target;
  LabeledDataset test = bundle.target;
  if (labelled_target) std::tie(target_stream, test) = limited_target_split(bundle, config);

  std::vector<ClassPrior> src_priors;
  double n_total = 0.0;
  for (const auto& s : bundle.sources) {
    src_priors.push_back(empirical_prior(s, k));
    n_total += static_cast<double>(s.size());
  }
  std::vector<double> beta;
  for (const auto& s : bundle.sources) beta.push_back(static_cast<double>(s.size()) / n_total);

  // Reference ratios for the alpha-error diagnostic.
  std::vector<LabelRatio> true_alpha;
  try {
    const ClassPrior tgt_prior = empirical_prior(bundle.target, k);
    for (const auto& p : src_priors) true_alpha.push_back(direct_ratio(p, tgt_prior));
  } catch (const InvalidArgument&) {
    true_alpha.clear();
  }

  RunResult result;
  result.lambda = TaskWeights::uniform(t_count);
  result.alpha.assign(t_count, LabelRatio::ones(k));
  const ClassPrior labelled_prior = empirical_prior(target_stream, k);
  if (labelled_target && !config.fixed_alpha) {
    for (std::size_t t = 0; t < t_count; ++t) {
      result.alpha[t] = direct_ratio(src_priors[t], labelled_prior);
    }
  }
  result.state = ModelState::create(bundle.target.dim(), k, t_count, config.architecture,
                                    config.optimizer, config.seed);

  LossConfig loss_config;
  loss_config.c0 = config.c0;
  loss_config.epsilon = config.epsilon;
  loss_config.penalty_coeff = config.penalty_coeff;
  loss_config.penalty_form = config.penalty_form;
  loss_config.centroid_keep = config.centroid_keep;
  StepOptions step_options;
  step_options.critic_steps = config.critic_steps;

  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::size_t smallest = target_stream.size();
  for (const auto& s : bundle.sources) smallest = std::min(smallest, s.size());
  const std::size_t steps = std::max<std::size_t>(1, smallest / batch);
  const auto domain_batch = [&](std::size_t n) { return std::min(batch, n); };

  std::vector<double> prev_target_counts;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochReport report;
    report.epoch = epoch;

    const ClassPrior explicit_prior =
        labelled_target ? labelled_prior
        : (epoch < config.warmup_epochs || prev_target_counts.empty())
            ? ClassPrior::uniform(k)
            : prior_from_counts(prev_target_counts);

    std::vector<std::vector<std::size_t>> orders;
    for (std::size_t t = 0; t < t_count; ++t) {
      orders.push_back(shuffled(bundle.sources[t].size(),
                                derive_seed(config.seed, 1000003ULL * (epoch + 1) + t)));
    }
    const std::vector<std::size_t> target_order =
        shuffled(target_stream.size(), derive_seed(config.seed, 1000003ULL * (epoch + 1) + 999));

    std::vector<ConfusionMatrix> confusion(t_count, ConfusionMatrix::zeros(k));
    std::vector<double> target_counts(static_cast<std::size_t>(k), 0.0);
    report.weighted_risk.assign(t_count, 0.0);
    report.implicit_dist.assign(t_count, 0.0);
    report.explicit_dist.assign(t_count, 0.0);

    for (std::size_t s = 0; s < steps; ++s) {
      StepBatch b;
      for (std::size_t t = 0; t < t_count; ++t) {
        const std::size_t size = domain_batch(bundle.sources[t].size());
        b.sources.push_back(take_batch(bundle.sources[t], orders[t], (s * size) % bundle.sources[t].size(), size));
      }
      const std::size_t tsize = domain_batch(target_stream.size());
      b.target = take_batch(target_stream, target_order, (s * tsize) % target_stream.size(), tsize);

      StepInputs inputs;
      inputs.alphas = result.alpha;
      inputs.lambda = &result.lambda;
      inputs.target_prior = &explicit_prior;
      inputs.use_target_labels = labelled_target;
      inputs.penalty_seed = derive_seed(config.seed, (static_cast<std::uint64_t>(epoch) << 32) | s);

      StepResult r;
      try {
        r = training_step(result.state, b, inputs, loss_config, step_options);
      } catch (const NumericalError& e) {
        result.aborted = true;
        result.abort_reason = fmt::format("epoch {} step {}: {}", epoch, s, e.what());
        return result;
      }
      for (std::size_t t = 0; t < t_count; ++t) {
        confusion[t].add(r.source_predictions[t], b.sources[t].y);
        report.weighted_risk[t] += r.source_weighted_risk[t];
        report.implicit_dist[t] += r.source_implicit[t];
        report.explicit_dist[t] += r.source_explicit[t];
      }
      for (int p : r.target_predictions) target_counts[static_cast<std::size_t>(p)] += 1.0;
      report.mean_loss.classification += r.loss.classification;
      report.mean_loss.explicit_cond += r.loss.explicit_cond;
      report.mean_loss.implicit_cond += r.loss.implicit_cond;
      report.mean_loss.grad_penalty += r.loss.grad_penalty;
      report.mean_loss.total += r.loss.total;
      report.mean_critic_loss += r.critic_loss;
    }

    const double inv = 1.0 / static_cast<double>(steps);
    report.steps = static_cast<int>(steps);
    report.mean_loss.epsilon = config.epsilon;
    report.mean_loss.classification *= inv;
    report.mean_loss.explicit_cond *= inv;
    report.mean_loss.implicit_cond *= inv;
    report.mean_loss.grad_penalty *= inv;
    report.mean_loss.total *= inv;
    report.mean_critic_loss *= inv;
    for (std::size_t t = 0; t < t_count; ++t) {
      report.weighted_risk[t] *= inv;
      report.implicit_dist[t] *= inv;
      report.explicit_dist[t] *= inv;
      report.cond_dist.push_back(config.epsilon * report.explicit_dist[t] +
                                 (1.0 - config.epsilon) * std::max(0.0, report.implicit_dist[t]));
    }

    // Label ratios.
    const bool estimate_alpha =
        !config.fixed_alpha && (!labelled_target || config.refresh_alpha);
    if (estimate_alpha) {
      const ClassPrior predicted = prior_from_counts(target_counts);
      for (std::size_t t = 0; t < t_count; ++t) {
        try {
          const RatioEstimate est =
              solve_ratio(confusion[t].normalize(), predicted, src_priors[t], l1);
          if (!est.ratio.feasible(src_priors[t])) {
            report.events.push_back(fmt::format("source {}: infeasible ratio estimate; kept previous", t));
            continue;
          }
          result.alpha[t] =
              moving_average_ratio(result.alpha[t], est.ratio, config.ema_keep, src_priors[t]);
        } catch (const NumericalError& e) {
          report.events.push_back(fmt::format("source {}: ratio estimate failed ({}); kept previous", t, e.what()));
        }
      }
    }

    // Task weights.
    if (!config.fixed_lambda) {
      SourceStats stats;
      stats.beta = beta;
      for (std::size_t t = 0; t < t_count; ++t) {
        stats.weighted_risk.push_back(std::max(0.0, report.weighted_risk[t]));
        stats.cond_dist.push_back(report.cond_dist[t]);
      }
      const double c1 =
          config.c1 ? *config.c1
                    : *std::max_element(stats.weighted_risk.begin(), stats.weighted_risk.end());
      const TaskWeights fresh = solve_lambda(stats, config.c0, c1);
      result.lambda = moving_average_lambda(result.lambda, fresh, config.lambda_keep);
    }

    report.lambda = result.lambda.values;
    report.alpha = result.alpha;
    if (!true_alpha.empty()) {
      double err = 0.0;
      for (std::size_t t = 0; t < t_count; ++t) {
        for (int y = 0; y < k; ++y) {
          err = std::max(err, std::abs(result.alpha[t][static_cast<std::size_t>(y)] -
                                       true_alpha[t][static_cast<std::size_t>(y)]));
        }
      }
      report.alpha_error = err;
    }
    if ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs) {
      const EvalResult ev = evaluate(result.state, test);
      report.target_accuracy = ev.accuracy;
      report.per_class_accuracy = ev.per_class;
    }
    prev_target_counts = target_counts;
    if (on_epoch) on_epoch(report, result.state);
    result.epochs.push_back(std::move(report));
  }
  return result;
}

TaskWeights baseline_marginal_weights(const DomainBundle& bundle, std::uint64_t seed,
                                      std::size_t cap) {
  bundle.validate();
  if (bundle.source_count() < 2) throw InvalidArgument("baseline weights need at least two sources");
  const LabeledDataset target = subsample(bundle.target, cap, derive_seed(seed, 0));
  const EmpiricalCloud tgt = EmpiricalCloud::uniform(target.features);
  std::vector<double> dist;
  for (const auto& s : bundle.sources) {
    const LabeledDataset sub = subsample(s, cap, derive_seed(seed, 1));
    dist.push_back(exact_w1(EmpiricalCloud::uniform(sub.features), tgt));
  }
  const double best = *std::min_element(dist.begin(), dist.end());
  TaskWeights w{std::vector<double>(dist.size())};
  double total = 0.0;
  for (std::size_t t = 0; t < dist.size(); ++t) {
    w.values[t] = std::exp(-(dist[t] - best));
    total += w.values[t];
  }
  for (double& v : w.values) v /= total;
  return w;
}

}  // namespace wadn
