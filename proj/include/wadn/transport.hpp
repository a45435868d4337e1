#pragma once

#include "wadn/common.hpp"
#include "wadn/data_model.hpp"

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace wadn {

/// Weighted point set; weights are nonnegative and sum to 1.
struct EmpiricalCloud {
  Matrix points;
  Vector weights;

  static EmpiricalCloud uniform(Matrix points);
  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
  void validate() const;
};

struct OtOptions {
  // Exact OT is only run on clouds with at most this many points per side.
  std::size_t max_support = 256;
  // When non-empty, the ground-cost matrix is written here as CSV.
  std::string cost_dump_path;
};

/// Pairwise Euclidean distances between the rows of `a` and `b`.
Matrix euclidean_cost(const Matrix& a, const Matrix& b);

/// Wasserstein-1 with Euclidean ground cost, solved exactly by network simplex.
/// Throws InvalidArgument on dimension mismatch or when a side exceeds
/// `options.max_support` (callers subsample).
double exact_w1(const EmpiricalCloud& a, const EmpiricalCloud& b, const OtOptions& options = {});

/// Closed-form W2 between Gaussians with identical covariance: ||c1 - c2||.
double gaussian_w2_surrogate(const Vector& c1, const Vector& c2);

/// Per-class centroids with a presence mask.
struct CentroidSet {
  Matrix centroids;  // |Y| x p; rows of absent classes are zero
  std::vector<bool> present;

  static CentroidSet empty(int class_count, int dim);
  int class_count() const { return static_cast<int>(present.size()); }
};

CentroidSet class_centroids(const Matrix& points, std::span<const int> labels, int class_count);

enum class ConditionalMode { exact, surrogate };

/// sum_y tgt_prior[y] * dist_y over classes with positive target mass, where
/// dist_y is the exact W1 between the class-conditional clouds (uniform
/// weights) or the centroid distance. Classes are reduced in index order;
/// exact per-class problems may run concurrently (see WADN_THREADS).
double conditional_w1(const Matrix& src_points, std::span<const int> src_labels,
                      const Matrix& tgt_points, std::span<const int> tgt_labels,
                      const ClassPrior& tgt_prior, ConditionalMode mode,
                      const OtOptions& options = {});

double conditional_w1(const LabeledDataset& src, const LabeledDataset& tgt,
                      const ClassPrior& tgt_prior, ConditionalMode mode,
                      const OtOptions& options = {});

/// A scalar score function on latent space with its spatial gradient.
class ScalarField {
 public:
  virtual ~ScalarField() = default;
  virtual double value(const Vector& z) const = 0;
  virtual Vector gradient(const Vector& z) const = 0;
};

/// McShane extension z -> min_k (values_k + ||z - anchor_k||): exactly
/// 1-Lipschitz for any anchor values.
class LipschitzExtensionCritic final : public ScalarField {
 public:
  LipschitzExtensionCritic(Matrix anchors, Vector values);
  double value(const Vector& z) const override;
  Vector gradient(const Vector& z) const override;

 private:
  Matrix anchors_;
  Vector values_;
};

/// Latent samples of one source with their labels.
struct LabeledCloud {
  Matrix points;
  Labels labels;
};

/// sum_t lambda[t] * (mean_i alpha_t(y_i) d_t(z_i) - mean_j d_t(z_j^target)).
double lemma1_dual_objective(std::span<const ScalarField* const> critics,
                             std::span<const LabeledCloud> sources, const Matrix& target,
                             std::span<const std::vector<double>> alphas,
                             std::span<const double> lambda);

enum class PenaltyForm {
  squared,   // ||grad d||^2
  two_sided, // (||grad d|| - 1)^2
  one_sided, // max(0, ||grad d|| - 1)^2
};

/// Value of the penalty as a function of the gradient norm.
double penalty_of_norm(double grad_norm, PenaltyForm form);

/// Mean penalty over interpolates xi * z_s + (1 - xi) * z_t with xi ~ U[0,1]
/// drawn from `seed`. max(n_s, n_t) interpolates are formed; row i pairs
/// source row i mod n_s with target row i mod n_t.
double gradient_penalty(const ScalarField& critic, const Matrix& source, const Matrix& target,
                        std::uint64_t seed, PenaltyForm form = PenaltyForm::squared);

/// Interpolation coefficients used by gradient_penalty for a given seed.
std::vector<double> interpolation_coefficients(std::size_t count, std::uint64_t seed);

/// Worker count from WADN_THREADS (default 1, minimum 1).
std::size_t configured_threads();

}  // namespace wadn
