#include "wadn/data_model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace wadn {

namespace {

void check_prior(const std::vector<double>& probs, const std::string& what) {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw InvalidArgument(fmt::format("{}: probabilities must be finite and >= 0", what));
    }
    total += p;
  }
  if (probs.empty() || std::abs(total - 1.0) > 1e-9) {
    throw InvalidArgument(fmt::format("{}: probabilities sum to {} instead of 1", what, total));
  }
}

void check_domain(const DomainSpec& d, int class_count, int dim, bool is_source) {
  if (static_cast<int>(d.class_means.size()) != class_count) {
    throw InvalidArgument(fmt::format("domain '{}': expected {} class means, got {}", d.name,
                                      class_count, d.class_means.size()));
  }
  for (const auto& m : d.class_means) {
    if (m.size() != dim || !m.allFinite()) {
      throw InvalidArgument(fmt::format("domain '{}': class mean must be a finite {}-vector",
                                        d.name, dim));
    }
  }
  if (!(d.scale > 0.0) || !std::isfinite(d.scale)) {
    throw InvalidArgument(fmt::format("domain '{}': scale must be positive", d.name));
  }
  if (static_cast<int>(d.prior.size()) != class_count) {
    throw InvalidArgument(fmt::format("domain '{}': prior needs {} entries", d.name, class_count));
  }
  check_prior(d.prior, fmt::format("domain '{}' prior", d.name));
  if (!d.drop_rate.empty()) {
    if (static_cast<int>(d.drop_rate.size()) != class_count) {
      throw InvalidArgument(
          fmt::format("domain '{}': drop_rate needs {} entries", d.name, class_count));
    }
    for (double r : d.drop_rate) {
      if (!(r >= 0.0 && r <= 1.0)) {
        throw InvalidArgument(fmt::format("domain '{}': drop_rate must lie in [0,1]", d.name));
      }
    }
    if (!is_source && std::any_of(d.drop_rate.begin(), d.drop_rate.end(),
                                  [](double r) { return r > 0.0; })) {
      throw InvalidArgument("label dropping applies to sources only");
    }
  }
  if (d.samples == 0) {
    throw InvalidArgument(fmt::format("domain '{}': samples must be >= 1", d.name));
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

LabeledDataset sample_domain(const DomainSpec& d, int class_count, int dim,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> label_dist(d.prior.begin(), d.prior.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  LabeledDataset out;
  out.name = d.name;
  out.features.resize(static_cast<Eigen::Index>(d.samples), dim);
  out.labels.resize(d.samples);
  for (std::size_t i = 0; i < d.samples; ++i) {
    int y = label_dist(rng);
    // Rejection keeps the configured sample count.
    while (!d.drop_rate.empty() && unit(rng) < d.drop_rate[static_cast<std::size_t>(y)]) {
      y = label_dist(rng);
    }
    const int mean_index = d.flip ? (y + 1) % class_count : y;
    const Vector& mu = d.class_means[static_cast<std::size_t>(mean_index)];
    for (int j = 0; j < dim; ++j) {
      out.features(static_cast<Eigen::Index>(i), j) = mu[j] + d.scale * noise(rng);
    }
    out.labels[i] = y;
  }
  return out;
}

}  // namespace

void LabeledDataset::validate(int class_count) const {
  if (labels.empty()) {
    throw InvalidArgument(fmt::format("dataset '{}' is empty", name));
  }
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw InvalidArgument(fmt::format("dataset '{}': {} feature rows but {} labels", name,
                                      features.rows(), labels.size()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= class_count) {
      throw InvalidArgument(fmt::format("dataset '{}': label {} at row {} outside [0,{})", name,
                                        labels[i], i, class_count));
    }
  }
  if (!features.allFinite()) {
    throw InvalidArgument(fmt::format("dataset '{}' contains non-finite features", name));
  }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.name = name;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) =
        features.row(static_cast<Eigen::Index>(rows[i]));
    out.labels[i] = labels[rows[i]];
  }
  return out;
}

ClassPrior::ClassPrior(std::vector<double> probs) : probs_(std::move(probs)) {
  check_prior(probs_, "class prior");
}

ClassPrior ClassPrior::uniform(int class_count) {
  return ClassPrior(std::vector<double>(static_cast<std::size_t>(class_count),
                                        1.0 / static_cast<double>(class_count)));
}

void DomainBundle::validate() const {
  if (sources.empty()) {
    throw InvalidArgument("bundle needs at least one source");
  }
  if (class_count < 1) {
    throw InvalidArgument("bundle class_count must be >= 1");
  }
  const int d = target.dim();
  target.validate(class_count);
  for (const auto& s : sources) {
    s.validate(class_count);
    if (s.dim() != d) {
      throw InvalidArgument(fmt::format("source '{}' has dimension {} but target has {}", s.name,
                                        s.dim(), d));
    }
  }
}

void SynthSpec::validate() const {
  if (class_count < 2) {
    throw InvalidArgument("synthetic spec needs at least two classes");
  }
  if (feature_dim < 1) {
    throw InvalidArgument("synthetic spec needs feature_dim >= 1");
  }
  if (sources.empty()) {
    throw InvalidArgument("synthetic spec needs at least one source");
  }
  for (const auto& s : sources) {
    check_domain(s, class_count, feature_dim, true);
  }
  check_domain(target, class_count, feature_dim, false);
}

ClassPrior empirical_prior(const LabeledDataset& ds, int class_count) {
  if (ds.labels.empty()) {
    throw InvalidArgument("empirical_prior of an empty dataset");
  }
  std::vector<double> counts(static_cast<std::size_t>(class_count), 0.0);
  for (int y : ds.labels) {
    if (y < 0 || y >= class_count) {
      throw InvalidArgument(fmt::format("label {} outside [0,{})", y, class_count));
    }
    counts[static_cast<std::size_t>(y)] += 1.0;
  }
  const double n = static_cast<double>(ds.labels.size());
  for (double& c : counts) c /= n;
  // Renormalize against accumulated rounding.
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  for (double& c : counts) c /= total;
  return ClassPrior(std::move(counts));
}

std::vector<double> effective_prior(const DomainSpec& domain) {
  std::vector<double> kept(domain.prior.size());
  double total = 0.0;
  for (std::size_t y = 0; y < kept.size(); ++y) {
    const double drop = domain.drop_rate.empty() ? 0.0 : domain.drop_rate[y];
    kept[y] = domain.prior[y] * (1.0 - drop);
    total += kept[y];
  }
  if (!(total > 0.0)) {
    throw InvalidArgument(fmt::format("domain '{}': every class is dropped", domain.name));
  }
  for (double& k : kept) k /= total;
  return kept;
}

DomainBundle generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  DomainBundle bundle;
  bundle.class_count = spec.class_count;
  bundle.target_labels_visible = spec.target_labels_visible;
  for (std::size_t t = 0; t < spec.sources.size(); ++t) {
    const DomainSpec& s = spec.sources[t];
    const std::vector<double> eff = effective_prior(s);
    for (std::size_t y = 0; y < eff.size(); ++y) {
      if (eff[y] <= 0.0) {
        throw InvalidArgument(
            fmt::format("source '{}': class {} has zero probability after dropping", s.name, y));
      }
    }
    LabeledDataset ds =
        sample_domain(s, spec.class_count, spec.feature_dim, derive_seed(spec.seed, t + 1));
    const ClassPrior realized = empirical_prior(ds, spec.class_count);
    for (std::size_t y = 0; y < realized.size(); ++y) {
      if (realized[y] == 0.0) {
        throw InvalidArgument(
            fmt::format("source '{}': class {} drew zero samples; increase samples", s.name, y));
      }
    }
    bundle.sources.push_back(std::move(ds));
  }
  bundle.target = sample_domain(spec.target, spec.class_count, spec.feature_dim,
                                derive_seed(spec.seed, 0));
  return bundle;
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double fraction,
                                                std::uint64_t seed, int class_count) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw InvalidArgument("split fraction must lie in (0,1)");
  }
  ds.validate(class_count);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(class_count));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  }
  std::mt19937_64 rng(seed);
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
  }

  // Largest-remainder allocation so the first part has round(fraction * n) rows
  // whenever the per-class bounds allow it.
  const std::size_t n = ds.size();
  const auto wanted = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::size_t> take(by_class.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t y = 0; y < by_class.size(); ++y) {
    const double exact = fraction * static_cast<double>(by_class[y].size());
    take[y] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[y];
    remainders.emplace_back(exact - std::floor(exact), y);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (const auto& [rem, y] : remainders) {
    if (assigned >= wanted) break;
    if (take[y] < by_class[y].size()) {
      ++take[y];
      ++assigned;
    }
  }
  for (std::size_t y = 0; y < by_class.size(); ++y) {
    const std::size_t count = by_class[y].size();
    if (count == 1) {
      log::warn(fmt::format("split of '{}': class {} has a single sample; kept in first part",
                            ds.name, y));
      take[y] = 1;
    } else if (count >= 2) {
      take[y] = std::clamp<std::size_t>(take[y], 1, count - 1);
    }
  }

  std::vector<std::size_t> first, second;
  for (std::size_t y = 0; y < by_class.size(); ++y) {
    for (std::size_t k = 0; k < by_class[y].size(); ++k) {
      (k < take[y] ? first : second).push_back(by_class[y][k]);
    }
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {ds.subset(first), ds.subset(second)};
}

LabeledDataset subsample(const LabeledDataset& ds, std::size_t cap, std::uint64_t seed) {
  if (ds.size() <= cap) return ds;
  std::vector<std::size_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(cap);
  std::sort(rows.begin(), rows.end());
  return ds.subset(rows);
}

LabeledDataset concatenate(std::span<const LabeledDataset> parts, std::string name) {
  LabeledDataset out;
  out.name = std::move(name);
  if (parts.empty()) return out;
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.dim() != parts.front().dim()) {
      throw InvalidArgument("concatenate: feature dimensions differ");
    }
    rows += p.features.rows();
  }
  out.features.resize(rows, parts.front().dim());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.features.middleRows(at, p.features.rows()) = p.features;
    at += p.features.rows();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

}  // namespace wadn
