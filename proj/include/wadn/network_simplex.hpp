#pragma once

#include "wadn/common.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace wadn {

struct TransportFlow {
  std::size_t from;
  std::size_t to;
  double mass;
};

struct TransportSolution {
  double cost = 0.0;
  std::vector<TransportFlow> flows;  // nonzero entries of the optimal plan
  // Kantorovich potentials: source_potential[i] + target_potential[j] <= cost(i,j)
  // with equality on the support of the plan.
  Vector source_potential;
  Vector target_potential;
  std::size_t pivots = 0;
};

/// Exact balanced transportation problem
///   min sum_ij cost(i,j) x_ij  s.t.  sum_j x_ij = supply_i, sum_i x_ij = demand_j, x >= 0
/// solved by the primal network simplex method on a strongly feasible spanning
/// tree (no cycling under degeneracy). Supplies and demands must be nonnegative
/// with equal totals (1e-9 relative); both are rescaled to a common total.
TransportSolution solve_transport(std::span<const double> supply, std::span<const double> demand,
                                  const Matrix& cost);

}  // namespace wadn
