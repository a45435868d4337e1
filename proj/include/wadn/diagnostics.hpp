#pragma once

#include "wadn/aggregation.hpp"
#include "wadn/data_model.hpp"
#include "wadn/io.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wadn {

struct DiagnosticOptions {
  BoundConstants constants;
  double delta = 0.1;
  std::size_t cap = 256;  // points per domain fed to exact OT
  std::uint64_t seed = 0;
};

struct SourceDiagnostic {
  double weighted_error = 0.0;  // mean alpha(y) * [prediction != y] over the full source
  double cond_exact = 0.0;      // prior-weighted exact W1 between class-conditional latents
  double cond_surrogate = 0.0;  // same weighting, centroid distances
  // Exact W1 between the class-reweighted source latents and the target latents.
  double reweighted_marginal = 0.0;
  // cond_exact - reweighted_marginal; >= 0 up to solver tolerance.
  double duality_gap = 0.0;
};

struct DiagnosticReport {
  BoundReport bound;
  std::vector<SourceDiagnostic> sources;
  std::vector<double> lambda;
  bool target_labels_used = false;
  double n_total = 0.0;
};

/// Evaluates a checkpoint against a bundle in latent space. Target classes come
/// from the labels when they are visible, else from the model's predictions;
/// only classes present in both subsampled clouds enter the distances.
/// Throws InvalidArgument when the checkpoint does not fit the bundle.
DiagnosticReport diagnose(const DomainBundle& bundle, const Checkpoint& checkpoint,
                          const DiagnosticOptions& options);

std::string format_diagnostic(const DiagnosticReport& report);

}  // namespace wadn
