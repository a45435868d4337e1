#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the solvers it is meant to check.

#include "wadn/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

/// W1 on the line as the integral of |F_a - F_b|.
inline double quantile_w1(const std::vector<double>& xa, const std::vector<double>& wa,
                          const std::vector<double>& xb, const std::vector<double>& wb) {
  struct Atom {
    double x;
    double w;  // + for a, - for b
  };
  std::vector<Atom> atoms;
  for (std::size_t i = 0; i < xa.size(); ++i) atoms.push_back({xa[i], wa[i]});
  for (std::size_t i = 0; i < xb.size(); ++i) atoms.push_back({xb[i], -wb[i]});
  std::sort(atoms.begin(), atoms.end(), [](const Atom& l, const Atom& r) { return l.x < r.x; });
  double cdf_gap = 0.0, total = 0.0;
  for (std::size_t i = 0; i + 1 < atoms.size(); ++i) {
    cdf_gap += atoms[i].w;
    total += std::abs(cdf_gap) * (atoms[i + 1].x - atoms[i].x);
  }
  return total;
}

/// For two uniform clouds of equal size an optimal plan is a permutation
/// (Birkhoff), so enumerating them gives the exact W1. n <= 8.
inline double permutation_w1(const wadn::Matrix& a, const wadn::Matrix& b) {
  const int n = static_cast<int>(a.rows());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (int i = 0; i < n; ++i) c += (a.row(i) - b.row(perm[i])).norm();
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / n;
}

/// Minimizes f over the probability simplex in `dim` <= 3 coordinates: a grid
/// of spacing `coarse`, then a grid of spacing `fine` over a box of half-width
/// 2 * coarse around the coarse winner.
inline std::vector<double> simplex_grid_min(int dim, const std::function<double(const std::vector<double>&)>& f,
                                            double coarse, double fine) {
  std::vector<double> best(dim, 1.0 / dim);
  double best_value = std::numeric_limits<double>::infinity();
  auto scan = [&](std::vector<double> lo, std::vector<double> hi, double h) {
    std::vector<double> p(dim);
    if (dim == 1) {
      p[0] = 1.0;
      const double v = f(p);
      if (v < best_value) best_value = v, best = p;
      return;
    }
    const long n0 = std::lround((hi[0] - lo[0]) / h);
    for (long i = 0; i <= n0; ++i) {
      p[0] = lo[0] + i * h;
      if (p[0] < -1e-15 || p[0] > 1 + 1e-15) continue;
      if (dim == 2) {
        p[1] = 1.0 - p[0];
        const double v = f(p);
        if (v < best_value) best_value = v, best = p;
        continue;
      }
      const long n1 = std::lround((hi[1] - lo[1]) / h);
      for (long j = 0; j <= n1; ++j) {
        p[1] = lo[1] + j * h;
        p[2] = 1.0 - p[0] - p[1];
        if (p[1] < -1e-15 || p[2] < -1e-12) continue;
        p[2] = std::max(0.0, p[2]);
        const double v = f(p);
        if (v < best_value) best_value = v, best = p;
      }
    }
  };
  scan(std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0), coarse);
  std::vector<double> lo(dim), hi(dim);
  for (int k = 0; k < dim; ++k) {
    // Snap the box to the fine lattice so the refinement stays on it.
    lo[k] = std::max(0.0, std::round((best[k] - 2 * coarse) / fine) * fine);
    hi[k] = std::min(1.0, std::round((best[k] + 2 * coarse) / fine) * fine);
  }
  scan(lo, hi, fine);
  return best;
}

inline double linf(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<double> random_simplex(std::mt19937_64& rng, int dim, double floor = 0.0) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> p(dim);
  double s = 0.0;
  for (auto& x : p) s += (x = g(rng));
  for (auto& x : p) x = floor + (1.0 - dim * floor) * x / s;
  return p;
}


/// Dense search for the label-ratio problem
///   min -sum_y T(y) log(sum_k C[y,k] a(k) + 1e-12) + l1 sum_k a(k)
///   s.t. a >= 0, sum_k a(k) S(k) = 1
/// over b(k) = a(k) S(k) on the simplex; |Y| <= 3 and every S(k) > 0.
inline std::vector<double> ratio_grid(const std::vector<std::vector<double>>& conf,
                                      const std::vector<double>& tgt, const std::vector<double>& src,
                                      double l1, double coarse = 1e-3, double fine = 1e-5) {
  const int k = static_cast<int>(src.size());
  auto f = [&](const std::vector<double>& b) {
    double v = 0.0;
    for (int y = 0; y < k; ++y) {
      double m = 0.0;
      for (int j = 0; j < k; ++j) m += conf[y][j] * b[j] / src[j];
      if (tgt[y] > 0) v -= tgt[y] * std::log(m + 1e-12);
    }
    for (int j = 0; j < k; ++j) v += l1 * b[j] / src[j];
    return v;
  };
  auto b = simplex_grid_min(k, f, coarse, fine);
  for (int j = 0; j < k; ++j) b[j] /= src[j];
  return b;
}


/// Dense search for the task-weight problem
///   min sum_t l(t) v(t) + c1 sqrt(sum_t l(t)^2 / beta(t)) over the simplex, T <= 3.
inline std::vector<double> lambda_grid(const std::vector<double>& v, const std::vector<double>& beta,
                                       double c1, double coarse = 1e-2, double fine = 1e-4) {
  auto f = [&](const std::vector<double>& l) {
    double lin = 0.0, q = 0.0;
    for (std::size_t t = 0; t < v.size(); ++t) lin += l[t] * v[t], q += l[t] * l[t] / beta[t];
    return lin + c1 * std::sqrt(q);
  };
  return simplex_grid_min(static_cast<int>(v.size()), f, coarse, fine);
}

}  // namespace oracle
