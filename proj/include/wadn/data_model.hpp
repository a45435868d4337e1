#pragma once

#include "wadn/common.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace wadn {

/// One domain's samples: an n x d feature matrix and n labels in [0, |Y|).
struct LabeledDataset {
  Matrix features;
  Labels labels;
  std::string name;

  std::size_t size() const { return labels.size(); }
  int dim() const { return static_cast<int>(features.cols()); }

  /// Throws InvalidArgument unless n >= 1, rows match labels, every label is
  /// in [0, class_count) and every feature is finite.
  void validate(int class_count) const;

  LabeledDataset subset(std::span<const std::size_t> rows) const;
};

/// Probability vector over classes.
class ClassPrior {
 public:
  ClassPrior() = default;

  /// Validates nonnegativity and unit mass (1e-9).
  explicit ClassPrior(std::vector<double> probs);

  static ClassPrior uniform(int class_count);

  const std::vector<double>& probs() const { return probs_; }
  double operator[](std::size_t y) const { return probs_[y]; }
  std::size_t size() const { return probs_.size(); }

 private:
  std::vector<double> probs_;
};

/// T sources plus one target sharing feature dimension and label alphabet.
struct DomainBundle {
  std::vector<LabeledDataset> sources;
  LabeledDataset target;
  bool target_labels_visible = false;
  int class_count = 0;

  std::size_t source_count() const { return sources.size(); }
  void validate() const;
};

/// Generation recipe for one synthetic domain: isotropic class-conditional
/// Gaussians N(mean_y, scale^2 I) with labels drawn from `prior`.
struct DomainSpec {
  std::string name;
  std::vector<Vector> class_means;
  double scale = 1.0;
  std::vector<double> prior;
  // Per-class probability of rejecting a drawn label; sources only.
  std::vector<double> drop_rate;
  // Cyclically permute class means (a swap for two classes).
  bool flip = false;
  std::size_t samples = 0;
};

struct SynthSpec {
  int class_count = 0;
  int feature_dim = 0;
  std::vector<DomainSpec> sources;
  DomainSpec target;
  bool target_labels_visible = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Label frequencies count(y)/n.
ClassPrior empirical_prior(const LabeledDataset& ds, int class_count);

/// Expected label distribution of a domain after rejection dropping.
std::vector<double> effective_prior(const DomainSpec& domain);

/// Deterministic for a fixed seed. Each domain draws from its own stream.
/// Throws InvalidArgument when a source class ends up with zero samples.
DomainBundle generate_synthetic(const SynthSpec& spec);

/// Stratified partition into (first, second) with `fraction` of each class
/// in the first part. A singleton class goes to the first part with a warning.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double fraction,
                                                std::uint64_t seed, int class_count);

/// Uniform subsample without replacement; returns `ds` unchanged when n <= cap.
LabeledDataset subsample(const LabeledDataset& ds, std::size_t cap, std::uint64_t seed);

/// Row-wise concatenation of datasets with the same feature dimension.
LabeledDataset concatenate(std::span<const LabeledDataset> parts, std::string name);

/// Seed for the stream with index `stream` derived from a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace wadn
