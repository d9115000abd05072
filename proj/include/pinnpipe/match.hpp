#pragma once

// Symbolic equivalence by largest common subforest.
//
// Two nodes may be aligned only when labels_match() holds. A matched pair
// contributes one node. Children of an aligned pair are matched positionally
// for ordered kinds (derivatives, functions, powers); children of commutative
// kinds, and children under a pair whose labels disagree, are matched by a
// maximum-weight bipartite assignment. The matched node sets form a common
// subforest of the two trees.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <vector>

#include "pinnpipe/expr.hpp"

namespace pinnpipe {

/// Maximum-weight assignment on a rectangular matrix of nonnegative weights
/// (Hungarian method with potentials). Returns the total weight; unmatched
/// rows or columns contribute nothing.
inline double max_weight_assignment(const std::vector<std::vector<double>>& w) {
  const std::size_t rows = w.size();
  const std::size_t cols = rows ? w.front().size() : 0;
  if (rows == 0 || cols == 0) return 0.0;
  const std::size_t n = std::max(rows, cols);
  double max_w = 0.0;
  for (const auto& r : w)
    for (double v : r) max_w = std::max(max_w, v);
  // cost[i][j] = max_w - w[i][j], padded with max_w (weight zero).
  auto cost = [&](std::size_t i, std::size_t j) {
    return (i < rows && j < cols) ? max_w - w[i][j] : max_w;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) {
    std::size_t i = p[j];
    if (i >= 1 && i <= rows && j <= cols) total += w[i - 1][j - 1];
  }
  return total;
}

namespace detail {

struct IndexedTree {
  std::vector<const Expr*> nodes;  // preorder

  explicit IndexedTree(const Expr& root) { visit(root); }

  void visit(const Expr& e) {
    nodes.push_back(&e);
    for (const auto& c : e.children) visit(c);
  }
};

class SubforestMatcher {
 public:
  SubforestMatcher(const Expr& a, const Expr& b) : ta_(a), tb_(b) {
    // Preorder ids of each node's children, so the memo can be indexed directly.
    ids_a_ = child_ids(ta_);
    ids_b_ = child_ids(tb_);
    memo_.assign(ta_.nodes.size() * tb_.nodes.size(), -1);
  }

  std::size_t run() { return solve(0, 0); }

 private:
  IndexedTree ta_;
  IndexedTree tb_;
  std::vector<std::vector<std::size_t>> ids_a_;
  std::vector<std::vector<std::size_t>> ids_b_;
  std::vector<long> memo_;

  static std::vector<std::vector<std::size_t>> child_ids(const IndexedTree& t) {
    std::vector<std::vector<std::size_t>> out(t.nodes.size());
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
      std::size_t next = i + 1;
      for (const auto& c : t.nodes[i]->children) {
        out[i].push_back(next);
        next += node_count(c);
      }
    }
    return out;
  }

  std::size_t solve(std::size_t i, std::size_t j) {
    long& slot = memo_[i * tb_.nodes.size() + j];
    if (slot >= 0) return static_cast<std::size_t>(slot);
    const Expr& a = *ta_.nodes[i];
    const Expr& b = *tb_.nodes[j];
    const auto& ca = ids_a_[i];
    const auto& cb = ids_b_[j];
    const bool same = labels_match(a, b);
    std::size_t total = same ? 1 : 0;
    if (same && !is_commutative(a.kind)) {
      for (std::size_t k = 0; k < std::min(ca.size(), cb.size()); ++k) total += solve(ca[k], cb[k]);
    } else if (!ca.empty() && !cb.empty()) {
      std::vector<std::vector<double>> w(ca.size(), std::vector<double>(cb.size()));
      for (std::size_t x = 0; x < ca.size(); ++x)
        for (std::size_t y = 0; y < cb.size(); ++y) w[x][y] = static_cast<double>(solve(ca[x], cb[y]));
      total += static_cast<std::size_t>(max_weight_assignment(w) + 0.5);
    }
    slot = static_cast<long>(total);
    return total;
  }
};

}  // namespace detail

/// Number of nodes in the largest common subforest of `a` and `b`.
inline std::size_t common_subforest_size(const Expr& a, const Expr& b) {
  return detail::SubforestMatcher(a, b).run();
}

/// Normalized tree-matching score in [0,1]: matched nodes over the larger
/// tree's node count. Inputs are expected in canonical form.
inline double tree_match_score(const Expr& a, const Expr& b) {
  const double denom = static_cast<double>(std::max(node_count(a), node_count(b)));
  return static_cast<double>(common_subforest_size(a, b)) / denom;
}

}  // namespace pinnpipe
