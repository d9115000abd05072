#pragma once

// Reference implementations used only by the tests. They trade speed for
// directness and share no code with the production matcher; exhaustive_sweep
// is the one place that calls into it, to compare.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pinnpipe/canonical.hpp"
#include "pinnpipe/expr.hpp"
#include "pinnpipe/match.hpp"

namespace oracle {

using pinnpipe::Expr;
using pinnpipe::NodeKind;
using pinnpipe::common_subforest_size;
using pinnpipe::is_canonical;
using pinnpipe::to_prefix;

inline bool same_label(const Expr& a, const Expr& b) {
  if (a.kind != b.kind) return false;
  if (a.kind == NodeKind::Number) {
    double scale = std::max({1.0, std::abs(a.value), std::abs(b.value)});
    return std::abs(a.value - b.value) <= 1e-9 * scale;
  }
  return a.label == b.label && a.order == b.order;
}

inline bool unordered(const Expr& e) { return e.kind == NodeKind::Sum || e.kind == NodeKind::Product; }

std::size_t best_alignment(const Expr& a, const Expr& b);

// Tries every partial injection of a's children into b's children.
inline std::size_t best_injection(const std::vector<Expr>& xs, const std::vector<Expr>& ys) {
  std::vector<char> used(ys.size(), 0);
  std::function<std::size_t(std::size_t)> go = [&](std::size_t i) -> std::size_t {
    if (i == xs.size()) return 0;
    std::size_t best = go(i + 1);  // xs[i] left unaligned
    for (std::size_t j = 0; j < ys.size(); ++j) {
      if (used[j]) continue;
      used[j] = 1;
      best = std::max(best, best_alignment(xs[i], ys[j]) + go(i + 1));
      used[j] = 0;
    }
    return best;
  };
  return go(0);
}

/// Largest number of label-agreeing node pairs over all alignments that
/// pair roots, pair children only under paired parents, keep ordered
/// children positional under agreeing ordered parents, and are one-to-one.
inline std::size_t best_alignment(const Expr& a, const Expr& b) {
  const bool agree = same_label(a, b);
  std::size_t total = agree ? 1 : 0;
  if (agree && !unordered(a)) {
    for (std::size_t k = 0; k < std::min(a.children.size(), b.children.size()); ++k)
      total += best_alignment(a.children[k], b.children[k]);
    return total;
  }
  return total + best_injection(a.children, b.children);
}

inline std::size_t count_nodes(const Expr& e) {
  std::size_t n = 1;
  for (const auto& c : e.children) n += count_nodes(c);
  return n;
}

inline double score(const Expr& a, const Expr& b) {
  return static_cast<double>(best_alignment(a, b)) /
         static_cast<double>(std::max(count_nodes(a), count_nodes(b)));
}

/// Brute-force maximum-weight assignment over all partial injections.
inline double assignment(const std::vector<std::vector<double>>& w) {
  const std::size_t rows = w.size();
  const std::size_t cols = rows ? w[0].size() : 0;
  std::vector<char> used(cols, 0);
  std::function<double(std::size_t)> go = [&](std::size_t i) -> double {
    if (i == rows) return 0.0;
    double best = go(i + 1);
    for (std::size_t j = 0; j < cols; ++j) {
      if (used[j]) continue;
      used[j] = 1;
      best = std::max(best, w[i][j] + go(i + 1));
      used[j] = 0;
    }
    return best;
  };
  return go(0);
}

// ---------------------------------------------------------------------------
// Tree generation over a small operator alphabet
// ---------------------------------------------------------------------------

/// Operator alphabet for exhaustive enumeration. Binary ^ and sum/product
/// with 2 or 3 children are always included.
struct Alphabet {
  std::string name;
  std::vector<Expr> leaves;
  std::function<std::vector<Expr>(const Expr&)> unary;
};

/// Together these cover every node kind of the grammar; one alphabet with all
/// of them does not fit in memory at 12 nodes.
inline std::vector<Alphabet> sweep_alphabets() {
  return {
      {"u 2 pi / dt", {Expr::variable("u"), Expr::number(2.0), Expr::constant("pi")},
       [](const Expr& c) { return std::vector<Expr>{Expr::time_derivative(1, c)}; }},
      {"u 2 / dt sin", {Expr::variable("u"), Expr::number(2.0)},
       [](const Expr& c) { return std::vector<Expr>{Expr::time_derivative(1, c), Expr::function("sin", c)}; }},
      {"u 2 / dx dxx", {Expr::variable("u"), Expr::number(2.0)},
       [](const Expr& c) {
         return std::vector<Expr>{Expr::spatial_derivative("x", 1, c), Expr::spatial_derivative("x", 2, c)};
       }},
  };
}

/// Canonical trees of the alphabet by node count. Children of a canonical tree are
/// canonical, so each size is built from the smaller canonical sets and
/// filtered; duplicates cannot arise.
inline std::vector<std::vector<Expr>> canonical_trees_up_to(const Alphabet& al, std::size_t max_nodes) {
  std::vector<std::vector<Expr>> by_size(max_nodes + 1);
  if (max_nodes >= 1) by_size[1] = al.leaves;
  for (std::size_t n = 2; n <= max_nodes; ++n) {
    auto& out = by_size[n];
    auto keep = [&](Expr e) {
      if (is_canonical(e)) out.push_back(std::move(e));
    };
    for (const auto& c : by_size[n - 1])
      for (auto& e : al.unary(c)) keep(std::move(e));
    for (std::size_t i = 1; i + 1 < n; ++i) {
      const std::size_t j = n - 1 - i;
      for (const auto& a : by_size[i])
        for (const auto& b : by_size[j]) {
          keep(Expr::power(a, b));
          if (i <= j) {
            keep(Expr::sum({a, b}));
            keep(Expr::product({a, b}));
          }
        }
    }
    for (std::size_t i = 1; i + 2 < n; ++i)
      for (std::size_t j = i; i + j + 1 < n; ++j) {
        const std::size_t k = n - 1 - i - j;
        if (k < j) continue;
        for (const auto& a : by_size[i])
          for (const auto& b : by_size[j])
            for (const auto& c : by_size[k]) {
              keep(Expr::sum({a, b, c}));
              keep(Expr::product({a, b, c}));
            }
      }
  }
  return by_size;
}

struct SweepResult {
  std::size_t pairs = 0;
  std::size_t mismatches = 0;
  std::string first_mismatch;
};

/// Compares common_subforest_size with best_alignment on every ordered pair
/// of canonical trees whose sizes sum to at most `total`.
inline SweepResult exhaustive_sweep(const Alphabet& al, std::size_t total) {
  const auto by_size = canonical_trees_up_to(al, total > 1 ? total - 1 : 0);
  SweepResult r;
  for (std::size_t i = 1; i < by_size.size(); ++i)
    for (std::size_t j = 1; i + j <= total && j < by_size.size(); ++j)
      for (const auto& a : by_size[i])
        for (const auto& b : by_size[j]) {
          ++r.pairs;
          if (common_subforest_size(a, b) != best_alignment(a, b) && r.mismatches++ == 0)
            r.first_mismatch = to_prefix(a) + " | " + to_prefix(b);
        }
  return r;
}

/// Random tree with roughly `budget` nodes.
template <class Rng>
Expr random_tree(Rng& rng, int budget) {
  std::uniform_int_distribution<int> pick(0, 99);
  if (budget <= 1 || pick(rng) < 20) {
    switch (pick(rng) % 6) {
      case 0: return Expr::variable("u");
      case 1: return Expr::variable("v");
      case 2: return Expr::constant("pi");
      case 3: return Expr::number(static_cast<double>(pick(rng) % 4 + 1));
      case 4: return Expr::number(-0.5);
      default: return Expr::variable("x");
    }
  }
  int r = pick(rng);
  if (r < 12) return Expr::time_derivative(1 + pick(rng) % 2, random_tree(rng, budget - 1));
  if (r < 26) return Expr::spatial_derivative(pick(rng) % 2 ? "x" : "y", 1 + pick(rng) % 2, random_tree(rng, budget - 1));
  if (r < 34) return Expr::function(pick(rng) % 2 ? "sin" : "exp", random_tree(rng, budget - 1));
  if (r < 42) {
    return Expr::power(random_tree(rng, budget / 2), Expr::number(static_cast<double>(pick(rng) % 3 + 1)));
  }
  std::size_t n = 2 + static_cast<std::size_t>(pick(rng) % 3);
  std::vector<Expr> kids;
  for (std::size_t i = 0; i < n; ++i) kids.push_back(random_tree(rng, (budget - 1) / static_cast<int>(n)));
  return r < 72 ? Expr::sum(std::move(kids)) : Expr::product(std::move(kids));
}

}  // namespace oracle
