#include "wadn/network_simplex.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace wadn {

namespace {

// Bipartite network: supply nodes [0, m), demand nodes [m, m + n) and an
// artificial root m + n. Arc k < m*n joins supply k / n to demand k % n.
// Arc m*n + v is the artificial arc between node v and the root, oriented
// v -> root for supply nodes and root -> v for demand nodes.
class NetworkSimplex {
 public:
  NetworkSimplex(std::span<const double> supply, std::span<const double> demand,
                 const Matrix& cost)
      : m_(supply.size()),
        n_(demand.size()),
        real_arcs_(m_ * n_),
        root_(m_ + n_),
        cost_(cost) {
    double max_cost = 0.0;
    for (Eigen::Index i = 0; i < cost.rows(); ++i) {
      for (Eigen::Index j = 0; j < cost.cols(); ++j) {
        max_cost = std::max(max_cost, std::abs(cost(i, j)));
      }
    }
    artificial_cost_ = 1.0 + max_cost * static_cast<double>(root_ + 1);
    tolerance_ = 1e-12 * std::max(1.0, max_cost);

    flow_.assign(real_arcs_ + root_, 0.0);
    parent_.assign(root_ + 1, root_);
    pred_.assign(root_ + 1, 0);
    depth_.assign(root_ + 1, 0);
    potential_.assign(root_ + 1, 0.0);
    for (std::size_t v = 0; v < root_; ++v) {
      pred_[v] = real_arcs_ + v;
      flow_[real_arcs_ + v] = v < m_ ? supply[v] : demand[v - m_];
    }
    parent_[root_] = root_;
    rebuild_tree();

    block_ = std::max<std::size_t>(
        10, static_cast<std::size_t>(std::sqrt(static_cast<double>(real_arcs_))));
  }

  TransportSolution solve() {
    TransportSolution out;
    std::size_t entering = 0;
    while (find_entering(entering)) {
      pivot(entering);
      ++out.pivots;
    }
    for (std::size_t k = 0; k < real_arcs_; ++k) {
      if (flow_[k] > 0.0) {
        const std::size_t i = k / n_;
        const std::size_t j = k % n_;
        out.cost += flow_[k] * cost_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        out.flows.push_back({i, j, flow_[k]});
      }
    }
    out.source_potential.resize(static_cast<Eigen::Index>(m_));
    out.target_potential.resize(static_cast<Eigen::Index>(n_));
    for (std::size_t i = 0; i < m_; ++i) {
      out.source_potential[static_cast<Eigen::Index>(i)] = -potential_[i];
    }
    for (std::size_t j = 0; j < n_; ++j) {
      out.target_potential[static_cast<Eigen::Index>(j)] = potential_[m_ + j];
    }
    return out;
  }

 private:
  std::size_t tail(std::size_t arc) const {
    if (arc < real_arcs_) return arc / n_;
    const std::size_t v = arc - real_arcs_;
    return v < m_ ? v : root_;
  }

  std::size_t head(std::size_t arc) const {
    if (arc < real_arcs_) return m_ + arc % n_;
    const std::size_t v = arc - real_arcs_;
    return v < m_ ? root_ : v;
  }

  double arc_cost(std::size_t arc) const {
    if (arc < real_arcs_) {
      return cost_(static_cast<Eigen::Index>(arc / n_), static_cast<Eigen::Index>(arc % n_));
    }
    return artificial_cost_;
  }

  double reduced_cost(std::size_t arc) const {
    return arc_cost(arc) + potential_[tail(arc)] - potential_[head(arc)];
  }

  // Block pricing: scan arcs in blocks from the last position and take the
  // most negative reduced cost of the first block that has one.
  bool find_entering(std::size_t& entering) {
    double best = -tolerance_;
    bool found = false;
    std::size_t scanned_in_block = 0;
    for (std::size_t count = 0; count < real_arcs_; ++count) {
      const std::size_t arc = cursor_;
      cursor_ = cursor_ + 1 == real_arcs_ ? 0 : cursor_ + 1;
      const double rc = reduced_cost(arc);
      if (rc < best) {
        best = rc;
        entering = arc;
        found = true;
      }
      if (++scanned_in_block == block_) {
        if (found) return true;
        scanned_in_block = 0;
      }
    }
    return found;
  }

  void pivot(std::size_t entering) {
    const std::size_t u = tail(entering);
    const std::size_t v = head(entering);

    // Paths from u and v up to their common ancestor (the apex).
    std::vector<std::size_t>& up_u = path_u_;
    std::vector<std::size_t>& up_v = path_v_;
    up_u.clear();
    up_v.clear();
    std::size_t a = u;
    std::size_t b = v;
    while (a != b) {
      if (depth_[a] >= depth_[b]) {
        up_u.push_back(a);
        a = parent_[a];
      } else {
        up_v.push_back(b);
        b = parent_[b];
      }
    }

    // The cycle is oriented along the entering arc: apex -> ... -> u -> v -> ... -> apex.
    // Cunningham's rule: the leaving arc is the last blocking arc met in that order.
    double delta = std::numeric_limits<double>::infinity();
    std::size_t leave = root_;
    bool leave_on_u_side = false;
    for (auto it = up_u.rbegin(); it != up_u.rend(); ++it) {
      const std::size_t c = *it;
      const std::size_t arc = pred_[c];
      if (tail(arc) == c && flow_[arc] <= delta) {
        delta = flow_[arc];
        leave = c;
        leave_on_u_side = true;
      }
    }
    for (std::size_t c : up_v) {
      const std::size_t arc = pred_[c];
      if (head(arc) == c && flow_[arc] <= delta) {
        delta = flow_[arc];
        leave = c;
        leave_on_u_side = false;
      }
    }
    if (leave == root_) {
      throw NumericalError("network simplex: unbounded pivot cycle");
    }

    if (delta > 0.0) {
      for (std::size_t c : up_u) {
        const std::size_t arc = pred_[c];
        flow_[arc] += tail(arc) == c ? -delta : delta;
      }
      for (std::size_t c : up_v) {
        const std::size_t arc = pred_[c];
        flow_[arc] += tail(arc) == c ? delta : -delta;
      }
      flow_[entering] += delta;
    }

    // Re-hang the detached subtree through the entering arc, reversing the
    // parent chain between its new attachment point and the old cut.
    const std::size_t start = leave_on_u_side ? u : v;
    const std::size_t other = leave_on_u_side ? v : u;
    std::size_t node = start;
    std::size_t new_parent = other;
    std::size_t new_pred = entering;
    while (true) {
      const std::size_t old_parent = parent_[node];
      const std::size_t old_pred = pred_[node];
      parent_[node] = new_parent;
      pred_[node] = new_pred;
      if (node == leave) break;
      new_parent = node;
      new_pred = old_pred;
      node = old_parent;
    }
    rebuild_tree();
  }

  // Recomputes depth and potentials top-down from the parent array.
  void rebuild_tree() {
    const std::size_t total = root_ + 1;
    child_start_.assign(total + 1, 0);
    for (std::size_t v = 0; v < root_; ++v) ++child_start_[parent_[v] + 1];
    for (std::size_t k = 0; k < total; ++k) child_start_[k + 1] += child_start_[k];
    child_list_.resize(root_);
    fill_.assign(child_start_.begin(), child_start_.end() - 1);
    for (std::size_t v = 0; v < root_; ++v) child_list_[fill_[parent_[v]]++] = v;

    order_.clear();
    order_.push_back(root_);
    depth_[root_] = 0;
    potential_[root_] = 0.0;
    for (std::size_t k = 0; k < order_.size(); ++k) {
      const std::size_t p = order_[k];
      for (std::size_t c = child_start_[p]; c < child_start_[p + 1]; ++c) {
        const std::size_t child = child_list_[c];
        const std::size_t arc = pred_[child];
        depth_[child] = depth_[p] + 1;
        potential_[child] =
            head(arc) == child ? potential_[p] + arc_cost(arc) : potential_[p] - arc_cost(arc);
        order_.push_back(child);
      }
    }
    if (order_.size() != total) {
      throw NumericalError("network simplex: spanning tree lost connectivity");
    }
  }

  std::size_t m_;
  std::size_t n_;
  std::size_t real_arcs_;
  std::size_t root_;
  const Matrix& cost_;
  double artificial_cost_ = 0.0;
  double tolerance_ = 0.0;
  std::size_t block_ = 0;
  std::size_t cursor_ = 0;

  std::vector<double> flow_;
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> pred_;
  std::vector<std::size_t> depth_;
  std::vector<double> potential_;

  std::vector<std::size_t> child_start_;
  std::vector<std::size_t> child_list_;
  std::vector<std::size_t> fill_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> path_u_;
  std::vector<std::size_t> path_v_;
};

}  // namespace

TransportSolution solve_transport(std::span<const double> supply, std::span<const double> demand,
                                  const Matrix& cost) {
  if (static_cast<std::size_t>(cost.rows()) != supply.size() ||
      static_cast<std::size_t>(cost.cols()) != demand.size()) {
    throw InvalidArgument(fmt::format("transport: cost is {}x{} but marginals are {} and {}",
                                      cost.rows(), cost.cols(), supply.size(), demand.size()));
  }
  if (!cost.allFinite()) {
    throw InvalidArgument("transport: cost matrix has non-finite entries");
  }
  const auto check = [](std::span<const double> w, const char* what) {
    double total = 0.0;
    for (double x : w) {
      if (!(x >= 0.0) || !std::isfinite(x)) {
        throw InvalidArgument(fmt::format("transport: {} weights must be finite and >= 0", what));
      }
      total += x;
    }
    if (!(total > 0.0)) throw InvalidArgument(fmt::format("transport: {} has no mass", what));
    return total;
  };
  const double supply_total = check(supply, "supply");
  const double demand_total = check(demand, "demand");
  if (std::abs(supply_total - demand_total) > 1e-9 * std::max(supply_total, demand_total)) {
    throw InvalidArgument(fmt::format("transport: unbalanced marginals ({} vs {})", supply_total,
                                      demand_total));
  }

  // Zero-mass points never carry flow; dropping them keeps the initial tree
  // strongly feasible (every artificial arc starts with positive flow).
  std::vector<std::size_t> rows, cols;
  std::vector<double> a, b;
  for (std::size_t i = 0; i < supply.size(); ++i) {
    if (supply[i] > 0.0) {
      rows.push_back(i);
      a.push_back(supply[i]);
    }
  }
  for (std::size_t j = 0; j < demand.size(); ++j) {
    if (demand[j] > 0.0) {
      cols.push_back(j);
      b.push_back(demand[j] * supply_total / demand_total);
    }
  }
  // Close the residual rounding gap on the largest demand.
  const double gap = std::accumulate(a.begin(), a.end(), 0.0) -
                     std::accumulate(b.begin(), b.end(), 0.0);
  *std::max_element(b.begin(), b.end()) += gap;

  Matrix reduced(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      reduced(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          cost(static_cast<Eigen::Index>(rows[i]), static_cast<Eigen::Index>(cols[j]));
    }
  }

  NetworkSimplex solver(a, b, reduced);
  TransportSolution inner = solver.solve();

  TransportSolution out;
  out.cost = inner.cost;
  out.pivots = inner.pivots;
  for (const auto& f : inner.flows) {
    out.flows.push_back({rows[f.from], cols[f.to], f.mass});
  }
  // Zero-mass points keep potential 0; they carry no weight in the dual objective.
  out.target_potential = Vector::Constant(static_cast<Eigen::Index>(demand.size()), 0.0);
  out.source_potential = Vector::Constant(static_cast<Eigen::Index>(supply.size()), 0.0);
  for (std::size_t j = 0; j < cols.size(); ++j) {
    out.target_potential[static_cast<Eigen::Index>(cols[j])] =
        inner.target_potential[static_cast<Eigen::Index>(j)];
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.source_potential[static_cast<Eigen::Index>(rows[i])] =
        inner.source_potential[static_cast<Eigen::Index>(i)];
  }
  return out;
}

}  // namespace wadn
