#pragma once

// Canonical form of expression trees.
//
// After canonicalize():
//   - sums and products are flat and their children sorted by compare();
//   - numeric literals are folded (one leading coefficient per product, one
//     constant term per sum);
//   - like terms are merged (2*u_x + 3*u_x -> 5*u_x), repeated factors become
//     powers (u*u -> u^2), zero terms are dropped;
//   - a numeric coefficient times a single sum is distributed;
//   - derivative chains are collapsed per axis with time outermost and
//     spatial axes in name order.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <utility>
#include <vector>

#include "pinnpipe/expr.hpp"

namespace pinnpipe {

namespace detail {

Expr canon_sum(std::vector<Expr> terms);
Expr canon_product(std::vector<Expr> factors);

inline bool is_integral(double v) { return std::isfinite(v) && v == std::floor(v); }

inline Expr canon_power(Expr base, Expr exponent) {
  if (exponent.kind == NodeKind::Number) {
    double n = exponent.value;
    if (n == 0.0) return Expr::number(1.0);
    if (n == 1.0) return base;
    if (base.kind == NodeKind::Number) {
      double v = std::pow(base.value, n);
      if (std::isfinite(v)) return Expr::number(v);
    }
    if (base.kind == NodeKind::Power && base.children[1].kind == NodeKind::Number &&
        is_integral(base.children[1].value) && is_integral(n)) {
      Expr inner = std::move(base.children[0]);
      return canon_power(std::move(inner), Expr::number(base.children[1].value * n));
    }
  }
  return Expr::power(std::move(base), std::move(exponent));
}

// Splits a canonical term into numeric coefficient and remaining factor.
inline std::pair<double, Expr> split_coefficient(const Expr& term) {
  if (term.kind == NodeKind::Product && term.children.front().kind == NodeKind::Number) {
    std::vector<Expr> rest(term.children.begin() + 1, term.children.end());
    if (rest.size() == 1) return {term.children.front().value, std::move(rest.front())};
    return {term.children.front().value, Expr::product(std::move(rest))};
  }
  return {1.0, term};
}

inline Expr canon_sum(std::vector<Expr> terms) {
  std::vector<Expr> flat;
  for (auto& t : terms) {
    if (t.kind == NodeKind::Sum) {
      for (auto& c : t.children) flat.push_back(std::move(c));
    } else {
      flat.push_back(std::move(t));
    }
  }
  double constant = 0.0;
  std::map<Expr, double, ExprLess> groups;
  for (const auto& t : flat) {
    if (t.kind == NodeKind::Number) {
      constant += t.value;
      continue;
    }
    auto [coef, rest] = split_coefficient(t);
    groups[std::move(rest)] += coef;
  }
  std::vector<Expr> out;
  if (constant != 0.0) out.push_back(Expr::number(constant));
  for (auto& [rest, coef] : groups) {
    if (coef == 0.0) continue;
    Expr term = coef == 1.0 ? rest : canon_product({Expr::number(coef), rest});
    if (term.kind == NodeKind::Sum) {
      for (auto& c : term.children) out.push_back(std::move(c));
    } else if (!term.is_number(0.0)) {
      out.push_back(std::move(term));
    }
  }
  std::sort(out.begin(), out.end(), ExprLess{});
  if (out.empty()) return Expr::number(0.0);
  if (out.size() == 1) return std::move(out.front());
  return Expr::sum(std::move(out));
}

inline Expr canon_product(std::vector<Expr> factors) {
  std::vector<Expr> flat;
  for (auto& f : factors) {
    if (f.kind == NodeKind::Product) {
      for (auto& c : f.children) flat.push_back(std::move(c));
    } else {
      flat.push_back(std::move(f));
    }
  }
  double coef = 1.0;
  std::map<Expr, double, ExprLess> powers;  // base -> summed numeric exponent
  std::vector<Expr> others;
  for (auto& f : flat) {
    if (f.kind == NodeKind::Number) {
      double folded = coef * f.value;
      if (std::isfinite(folded)) coef = folded;
      else others.push_back(std::move(f));
    } else if (f.kind == NodeKind::Power && f.children[1].kind == NodeKind::Number) {
      powers[f.children[0]] += f.children[1].value;
    } else {
      powers[f] += 1.0;
    }
  }
  if (coef == 0.0) return Expr::number(0.0);
  for (auto& [base, n] : powers) {
    if (n == 0.0) continue;
    Expr p = canon_power(base, Expr::number(n));
    if (p.kind == NodeKind::Number && std::isfinite(coef * p.value)) {
      coef *= p.value;
    } else {
      others.push_back(std::move(p));
    }
  }
  if (coef == 0.0) return Expr::number(0.0);
  if (others.empty()) return Expr::number(coef);
  if (others.size() == 1 && others.front().kind == NodeKind::Sum && coef != 1.0) {
    std::vector<Expr> distributed;
    for (auto& t : others.front().children) distributed.push_back(canon_product({Expr::number(coef), std::move(t)}));
    return canon_sum(std::move(distributed));
  }
  std::sort(others.begin(), others.end(), ExprLess{});
  if (coef == 1.0 && others.size() == 1) return std::move(others.front());
  if (coef != 1.0) others.insert(others.begin(), Expr::number(coef));
  return Expr::product(std::move(others));
}

inline Expr canon_derivative(const Expr& e) {
  int time_order = 0;
  std::map<std::string, int> axes;
  const Expr* cur = &e;
  while (is_derivative(cur->kind)) {
    if (cur->kind == NodeKind::TimeDerivative) time_order += cur->order;
    else axes[cur->label] += cur->order;
    cur = &cur->children[0];
  }
  // Children were canonicalized already; only the innermost operand matters.
  Expr inner = *cur;
  if (inner.kind == NodeKind::Number) return Expr::number(0.0);
  for (auto it = axes.rbegin(); it != axes.rend(); ++it) inner = Expr::spatial_derivative(it->first, it->second, std::move(inner));
  if (time_order > 0) inner = Expr::time_derivative(time_order, std::move(inner));
  return inner;
}

inline Expr canon_function(Expr e) {
  const Expr& arg = e.children[0];
  if (arg.kind != NodeKind::Number) return e;
  double x = arg.value;
  double v = std::numeric_limits<double>::quiet_NaN();
  if (e.label == "sin") v = std::sin(x);
  else if (e.label == "cos") v = std::cos(x);
  else if (e.label == "tan") v = std::tan(x);
  else if (e.label == "exp") v = std::exp(x);
  else if (e.label == "log") v = std::log(x);
  else if (e.label == "sqrt") v = std::sqrt(x);
  else if (e.label == "tanh") v = std::tanh(x);
  if (std::isfinite(v)) return Expr::number(v);
  return e;
}

}  // namespace detail

/// Canonical form of `e` (idempotent, total on well-formed trees).
inline Expr canonicalize(const Expr& e) {
  Expr out = e;
  for (auto& c : out.children) c = canonicalize(c);
  switch (out.kind) {
    case NodeKind::Sum:
      return detail::canon_sum(std::move(out.children));
    case NodeKind::Product:
      return detail::canon_product(std::move(out.children));
    case NodeKind::Power: {
      Expr b = std::move(out.children[0]);
      Expr x = std::move(out.children[1]);
      return detail::canon_power(std::move(b), std::move(x));
    }
    case NodeKind::TimeDerivative:
    case NodeKind::SpatialDerivative:
      return detail::canon_derivative(out);
    case NodeKind::Function:
      return detail::canon_function(std::move(out));
    default:
      return out;
  }
}

inline bool is_canonical(const Expr& e) { return canonicalize(e) == e; }

}  // namespace pinnpipe
