#include "wadn/transport.hpp"

#include "wadn/network_simplex.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <random>
#include <thread>

namespace wadn {

namespace {

void dump_cost(const Matrix& cost, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    log::warn(fmt::format("cannot write cost dump to '{}'", path));
    return;
  }
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
      out << (j ? "," : "") << fmt::format("{:.17g}", cost(i, j));
    }
    out << '\n';
  }
}

Matrix rows_with_label(const Matrix& points, std::span<const int> labels, int y) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == y) rows.push_back(static_cast<Eigen::Index>(i));
  }
  Matrix out(static_cast<Eigen::Index>(rows.size()), points.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) = points.row(rows[k]);
  }
  return out;
}

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(configured_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < count; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

EmpiricalCloud EmpiricalCloud::uniform(Matrix points) {
  EmpiricalCloud c;
  const auto n = points.rows();
  c.points = std::move(points);
  c.weights = Vector::Constant(n, n > 0 ? 1.0 / static_cast<double>(n) : 0.0);
  return c;
}

void EmpiricalCloud::validate() const {
  if (points.rows() == 0) throw InvalidArgument("empirical cloud is empty");
  if (weights.size() != points.rows()) {
    throw InvalidArgument("empirical cloud: weights and points differ in length");
  }
  if (!points.allFinite()) throw InvalidArgument("empirical cloud has non-finite points");
  if ((weights.array() < 0.0).any() || !weights.allFinite()) {
    throw InvalidArgument("empirical cloud weights must be finite and >= 0");
  }
  if (std::abs(weights.sum() - 1.0) > 1e-9) {
    throw InvalidArgument(fmt::format("empirical cloud weights sum to {}", weights.sum()));
  }
}

Matrix euclidean_cost(const Matrix& a, const Matrix& b) {
  Matrix cost(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      cost(i, j) = (a.row(i) - b.row(j)).norm();
    }
  }
  return cost;
}

double exact_w1(const EmpiricalCloud& a, const EmpiricalCloud& b, const OtOptions& options) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) {
    throw InvalidArgument(fmt::format("exact_w1: dimension mismatch ({} vs {})", a.dim(), b.dim()));
  }
  if (a.size() > options.max_support || b.size() > options.max_support) {
    throw InvalidArgument(fmt::format("exact_w1: clouds of {} and {} points exceed the cap of {}",
                                      a.size(), b.size(), options.max_support));
  }
  const Matrix cost = euclidean_cost(a.points, b.points);
  if (!options.cost_dump_path.empty()) dump_cost(cost, options.cost_dump_path);
  const TransportSolution sol = solve_transport(
      std::span<const double>(a.weights.data(), a.size()),
      std::span<const double>(b.weights.data(), b.size()), cost);
  return std::max(0.0, sol.cost);
}

double gaussian_w2_surrogate(const Vector& c1, const Vector& c2) {
  if (c1.size() != c2.size()) {
    throw InvalidArgument("gaussian_w2_surrogate: dimension mismatch");
  }
  return (c1 - c2).norm();
}

CentroidSet CentroidSet::empty(int class_count, int dim) {
  CentroidSet s;
  s.centroids = Matrix::Zero(class_count, dim);
  s.present.assign(static_cast<std::size_t>(class_count), false);
  return s;
}

CentroidSet class_centroids(const Matrix& points, std::span<const int> labels, int class_count) {
  if (static_cast<std::size_t>(points.rows()) != labels.size()) {
    throw InvalidArgument("class_centroids: points and labels differ in length");
  }
  CentroidSet s = CentroidSet::empty(class_count, static_cast<int>(points.cols()));
  std::vector<double> counts(static_cast<std::size_t>(class_count), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= class_count) throw InvalidArgument("class_centroids: label out of range");
    s.centroids.row(y) += points.row(static_cast<Eigen::Index>(i));
    counts[static_cast<std::size_t>(y)] += 1.0;
  }
  for (int y = 0; y < class_count; ++y) {
    if (counts[static_cast<std::size_t>(y)] > 0.0) {
      s.centroids.row(y) /= counts[static_cast<std::size_t>(y)];
      s.present[static_cast<std::size_t>(y)] = true;
    }
  }
  return s;
}

double conditional_w1(const Matrix& src_points, std::span<const int> src_labels,
                      const Matrix& tgt_points, std::span<const int> tgt_labels,
                      const ClassPrior& tgt_prior, ConditionalMode mode,
                      const OtOptions& options) {
  if (src_points.cols() != tgt_points.cols()) {
    throw InvalidArgument("conditional_w1: dimension mismatch");
  }
  const int k = static_cast<int>(tgt_prior.size());
  std::vector<int> classes;
  for (int y = 0; y < k; ++y) {
    if (tgt_prior[static_cast<std::size_t>(y)] <= 0.0) continue;
    const bool in_src = std::find(src_labels.begin(), src_labels.end(), y) != src_labels.end();
    const bool in_tgt = std::find(tgt_labels.begin(), tgt_labels.end(), y) != tgt_labels.end();
    if (!in_src || !in_tgt) {
      throw InvalidArgument(fmt::format("conditional_w1: class {} has target mass {} but no {} samples",
                                        y, tgt_prior[static_cast<std::size_t>(y)],
                                        in_src ? "target" : "source"));
    }
    classes.push_back(y);
  }

  std::vector<double> per_class(classes.size(), 0.0);
  if (mode == ConditionalMode::surrogate) {
    const CentroidSet cs = class_centroids(src_points, src_labels, k);
    const CentroidSet ct = class_centroids(tgt_points, tgt_labels, k);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      per_class[c] = gaussian_w2_surrogate(cs.centroids.row(classes[c]).transpose(),
                                           ct.centroids.row(classes[c]).transpose());
    }
  } else {
    parallel_for(classes.size(), [&](std::size_t c) {
      OtOptions per = options;
      if (!per.cost_dump_path.empty()) {
        per.cost_dump_path = fmt::format("{}.class{}", options.cost_dump_path, classes[c]);
      }
      per_class[c] =
          exact_w1(EmpiricalCloud::uniform(rows_with_label(src_points, src_labels, classes[c])),
                   EmpiricalCloud::uniform(rows_with_label(tgt_points, tgt_labels, classes[c])), per);
    });
  }
  double total = 0.0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    total += tgt_prior[static_cast<std::size_t>(classes[c])] * per_class[c];
  }
  return total;
}

double conditional_w1(const LabeledDataset& src, const LabeledDataset& tgt,
                      const ClassPrior& tgt_prior, ConditionalMode mode,
                      const OtOptions& options) {
  return conditional_w1(src.features, src.labels, tgt.features, tgt.labels, tgt_prior, mode,
                        options);
}

LipschitzExtensionCritic::LipschitzExtensionCritic(Matrix anchors, Vector values)
    : anchors_(std::move(anchors)), values_(std::move(values)) {
  if (anchors_.rows() == 0 || anchors_.rows() != values_.size()) {
    throw InvalidArgument("LipschitzExtensionCritic: need one value per anchor");
  }
}

double LipschitzExtensionCritic::value(const Vector& z) const {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < anchors_.rows(); ++k) {
    best = std::min(best, values_[k] + (z.transpose() - anchors_.row(k)).norm());
  }
  return best;
}

Vector LipschitzExtensionCritic::gradient(const Vector& z) const {
  double best = std::numeric_limits<double>::infinity();
  Eigen::Index arg = 0;
  for (Eigen::Index k = 0; k < anchors_.rows(); ++k) {
    const double v = values_[k] + (z.transpose() - anchors_.row(k)).norm();
    if (v < best) {
      best = v;
      arg = k;
    }
  }
  Vector diff = z - anchors_.row(arg).transpose();
  const double norm = diff.norm();
  return norm > 0.0 ? Vector(diff / norm) : Vector(Vector::Zero(z.size()));
}

double lemma1_dual_objective(std::span<const ScalarField* const> critics,
                             std::span<const LabeledCloud> sources, const Matrix& target,
                             std::span<const std::vector<double>> alphas,
                             std::span<const double> lambda) {
  const std::size_t t_count = sources.size();
  if (critics.size() != t_count || alphas.size() != t_count || lambda.size() != t_count) {
    throw InvalidArgument("lemma1_dual_objective: one critic, ratio and weight per source");
  }
  if (target.rows() == 0) throw InvalidArgument("lemma1_dual_objective: empty target");
  double total = 0.0;
  for (std::size_t t = 0; t < t_count; ++t) {
    const LabeledCloud& src = sources[t];
    if (src.points.rows() == 0 || static_cast<std::size_t>(src.points.rows()) != src.labels.size()) {
      throw InvalidArgument("lemma1_dual_objective: malformed source cloud");
    }
    double source_term = 0.0;
    for (Eigen::Index i = 0; i < src.points.rows(); ++i) {
      const double a = alphas[t].at(static_cast<std::size_t>(src.labels[static_cast<std::size_t>(i)]));
      source_term += a * critics[t]->value(src.points.row(i).transpose());
    }
    source_term /= static_cast<double>(src.points.rows());
    double target_term = 0.0;
    for (Eigen::Index j = 0; j < target.rows(); ++j) {
      target_term += critics[t]->value(target.row(j).transpose());
    }
    target_term /= static_cast<double>(target.rows());
    total += lambda[t] * (source_term - target_term);
  }
  return total;
}

double penalty_of_norm(double grad_norm, PenaltyForm form) {
  switch (form) {
    case PenaltyForm::squared:
      return grad_norm * grad_norm;
    case PenaltyForm::two_sided:
      return (grad_norm - 1.0) * (grad_norm - 1.0);
    case PenaltyForm::one_sided: {
      const double excess = std::max(0.0, grad_norm - 1.0);
      return excess * excess;
    }
  }
  return 0.0;
}

std::vector<double> interpolation_coefficients(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> xi(count);
  for (double& x : xi) x = unit(rng);
  return xi;
}

double gradient_penalty(const ScalarField& critic, const Matrix& source, const Matrix& target,
                        std::uint64_t seed, PenaltyForm form) {
  if (source.rows() == 0 || target.rows() == 0) {
    throw InvalidArgument("gradient_penalty: empty batch");
  }
  if (source.cols() != target.cols()) {
    throw InvalidArgument("gradient_penalty: dimension mismatch");
  }
  const auto count = static_cast<std::size_t>(std::max(source.rows(), target.rows()));
  const std::vector<double> xi = interpolation_coefficients(count, seed);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const Vector zs = source.row(static_cast<Eigen::Index>(i % source.rows())).transpose();
    const Vector zt = target.row(static_cast<Eigen::Index>(i % target.rows())).transpose();
    const Vector z = xi[i] * zs + (1.0 - xi[i]) * zt;
    total += penalty_of_norm(critic.gradient(z).norm(), form);
  }
  return total / static_cast<double>(count);
}

std::size_t configured_threads() {
  if (const char* env = std::getenv("WADN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

}  // namespace wadn
