#include "wadn/diagnostics.hpp"

#include "wadn/transport.hpp"

#include <fmt/format.h>

namespace wadn {

namespace {

void check_fit(const DomainBundle& bundle, const Checkpoint& c) {
  if (c.state.feature.input_dim() != bundle.target.dim() ||
      c.state.class_count != bundle.class_count ||
      c.state.source_count() != bundle.source_count()) {
    throw InvalidArgument(fmt::format(
        "checkpoint shape mismatch: model expects d={} k={} T={}, bundle has d={} k={} T={}",
        c.state.feature.input_dim(), c.state.class_count, c.state.source_count(),
        bundle.target.dim(), bundle.class_count, bundle.source_count()));
  }
}

std::vector<double> class_counts(std::span<const int> labels, int k) {
  std::vector<double> n(static_cast<std::size_t>(k), 0.0);
  for (int y : labels) n[static_cast<std::size_t>(y)] += 1.0;
  return n;
}

}  // namespace

DiagnosticReport diagnose(const DomainBundle& bundle, const Checkpoint& checkpoint,
                          const DiagnosticOptions& options) {
  bundle.validate();
  check_fit(bundle, checkpoint);
  const ModelState& state = checkpoint.state;
  const int k = bundle.class_count;
  const std::size_t t_count = bundle.source_count();

  DiagnosticReport report;
  report.lambda = checkpoint.lambda.values;
  report.target_labels_used = bundle.target_labels_visible;

  const LabeledDataset tgt = subsample(bundle.target, options.cap, derive_seed(options.seed, 0));
  const ForwardResult tf = forward(state.feature, state.classifier, tgt.features);
  const Labels& tgt_labels = bundle.target_labels_visible ? tgt.labels : tf.predictions;
  const std::vector<double> tgt_counts = class_counts(tgt_labels, k);

  SourceStats stats;
  for (const auto& s : bundle.sources) report.n_total += static_cast<double>(s.size());
  for (std::size_t t = 0; t < t_count; ++t) {
    const LabeledDataset& full = bundle.sources[t];
    stats.beta.push_back(static_cast<double>(full.size()) / report.n_total);
    SourceDiagnostic d;

    const ForwardResult ff = forward(state.feature, state.classifier, full.features);
    for (std::size_t i = 0; i < full.size(); ++i) {
      if (ff.predictions[i] != full.labels[i]) {
        d.weighted_error += checkpoint.alpha[t][static_cast<std::size_t>(full.labels[i])];
      }
    }
    d.weighted_error /= static_cast<double>(full.size());

    const LabeledDataset src = subsample(full, options.cap, derive_seed(options.seed, t + 1));
    const Matrix zs = state.feature.forward(src.features);
    const std::vector<double> src_counts = class_counts(src.labels, k);

    // Target prior over the classes both clouds contain.
    std::vector<double> prior(static_cast<std::size_t>(k), 0.0);
    double mass = 0.0;
    for (std::size_t y = 0; y < prior.size(); ++y) {
      if (src_counts[y] > 0.0 && tgt_counts[y] > 0.0) {
        prior[y] = tgt_counts[y];
        mass += tgt_counts[y];
      }
    }
    if (mass == 0.0) throw InvalidArgument(fmt::format("source {} shares no class with the target", t));
    for (double& p : prior) p /= mass;
    const ClassPrior tp(prior);

    d.cond_exact = conditional_w1(zs, src.labels, tf.latents, tgt_labels, tp, ConditionalMode::exact);
    d.cond_surrogate =
        conditional_w1(zs, src.labels, tf.latents, tgt_labels, tp, ConditionalMode::surrogate);

    // Both marginals carry the same class masses, so gluing the per-class
    // optimal plans is feasible for the marginal problem: the gap is >= 0.
    std::vector<Eigen::Index> src_rows, tgt_rows;
    std::vector<double> src_w, tgt_w;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto y = static_cast<std::size_t>(src.labels[i]);
      if (prior[y] == 0.0) continue;
      src_rows.push_back(static_cast<Eigen::Index>(i));
      src_w.push_back(prior[y] / src_counts[y]);
    }
    for (std::size_t j = 0; j < tgt_labels.size(); ++j) {
      const auto y = static_cast<std::size_t>(tgt_labels[j]);
      if (prior[y] == 0.0) continue;
      tgt_rows.push_back(static_cast<Eigen::Index>(j));
      tgt_w.push_back(prior[y] / tgt_counts[y]);
    }
    EmpiricalCloud a{zs(src_rows, Eigen::all), Eigen::Map<Vector>(src_w.data(), static_cast<Eigen::Index>(src_w.size()))};
    EmpiricalCloud b{tf.latents(tgt_rows, Eigen::all), Eigen::Map<Vector>(tgt_w.data(), static_cast<Eigen::Index>(tgt_w.size()))};
    d.reweighted_marginal = exact_w1(a, b);
    d.duality_gap = d.cond_exact - d.reweighted_marginal;

    stats.weighted_risk.push_back(d.weighted_error);
    stats.cond_dist.push_back(d.cond_exact);
    report.sources.push_back(d);
  }
  // Guard against rounding in beta.
  double bsum = 0.0;
  for (double b : stats.beta) bsum += b;
  for (double& b : stats.beta) b /= bsum;
  report.bound = theorem1_diagnostic(stats, checkpoint.lambda, options.constants, report.n_total,
                                     options.delta);
  return report;
}

std::string format_diagnostic(const DiagnosticReport& r) {
  std::string s;
  s += fmt::format("term I   (weighted source error)      {:.6g}\n", r.bound.term_weighted_risk);
  s += fmt::format("term II  (sample complexity)          {:.6g}\n", r.bound.term_sample);
  s += fmt::format("term III (conditional distance)       {:.6g}\n", r.bound.term_conditional);
  s += fmt::format("term IV  (ratio estimation gap)       {}\n", r.bound.term_ratio_gap);
  s += fmt::format("term V   (complexity)                 {}\n", r.bound.term_complexity);
  s += fmt::format("observable total                      {:.6g}\n", r.bound.observable_total());
  s += fmt::format("target classes from                   {}\n",
                   r.target_labels_used ? "labels" : "predictions");
  s += "source,lambda,weighted_error,cond_w1_exact,cond_w1_surrogate,reweighted_marginal_w1,duality_gap\n";
  for (std::size_t t = 0; t < r.sources.size(); ++t) {
    const auto& d = r.sources[t];
    s += fmt::format("{},{:.6g},{:.6g},{:.6g},{:.6g},{:.6g},{:.3g}\n", t, r.lambda[t],
                     d.weighted_error, d.cond_exact, d.cond_surrogate, d.reweighted_marginal,
                     d.duality_gap);
  }
  return s;
}

}  // namespace wadn
