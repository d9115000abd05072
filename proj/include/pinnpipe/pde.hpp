#pragma once

// CanonicalPde: residual-form equation plus boundary/initial conditions and
// domain metadata, and its JSON interchange format.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/canonical.hpp"
#include "pinnpipe/error.hpp"
#include "pinnpipe/expr.hpp"
#include "pinnpipe/match.hpp"
#include "pinnpipe/parser.hpp"

namespace pinnpipe {

using json = nlohmann::json;

enum class BoundaryKind { Dirichlet, Neumann, Periodic, Robin };
enum class BoundarySide { Lower, Upper, Both };

// Domain irregularity classes, in increasing order of irregularity.
enum class GeometryClass { Rectilinear, Curved, MultiComponent, Irregular };
enum class DiscretizationClass { Cartesian, Curvilinear, Unstructured };

inline std::string to_string(BoundaryKind k) {
  switch (k) {
    case BoundaryKind::Dirichlet: return "dirichlet";
    case BoundaryKind::Neumann: return "neumann";
    case BoundaryKind::Periodic: return "periodic";
    case BoundaryKind::Robin: return "robin";
  }
  return "dirichlet";
}

inline std::string to_string(BoundarySide s) {
  switch (s) {
    case BoundarySide::Lower: return "lo";
    case BoundarySide::Upper: return "hi";
    case BoundarySide::Both: return "both";
  }
  return "both";
}

inline std::string to_string(GeometryClass g) {
  switch (g) {
    case GeometryClass::Rectilinear: return "rectilinear";
    case GeometryClass::Curved: return "curved";
    case GeometryClass::MultiComponent: return "multi_component";
    case GeometryClass::Irregular: return "irregular";
  }
  return "rectilinear";
}

inline std::string to_string(DiscretizationClass d) {
  switch (d) {
    case DiscretizationClass::Cartesian: return "cartesian";
    case DiscretizationClass::Curvilinear: return "curvilinear";
    case DiscretizationClass::Unstructured: return "unstructured";
  }
  return "cartesian";
}

inline std::optional<BoundaryKind> boundary_kind_from(const std::string& s) {
  if (s == "dirichlet") return BoundaryKind::Dirichlet;
  if (s == "neumann") return BoundaryKind::Neumann;
  if (s == "periodic") return BoundaryKind::Periodic;
  if (s == "robin") return BoundaryKind::Robin;
  return std::nullopt;
}

inline GeometryClass geometry_from(const std::string& s) {
  if (s == "rectilinear") return GeometryClass::Rectilinear;
  if (s == "curved") return GeometryClass::Curved;
  if (s == "multi_component") return GeometryClass::MultiComponent;
  if (s == "irregular") return GeometryClass::Irregular;
  throw PdeFormatError("unknown geometry class '" + s + "'");
}

inline DiscretizationClass discretization_from(const std::string& s) {
  if (s == "cartesian") return DiscretizationClass::Cartesian;
  if (s == "curvilinear") return DiscretizationClass::Curvilinear;
  if (s == "unstructured") return DiscretizationClass::Unstructured;
  throw PdeFormatError("unknown discretization class '" + s + "'");
}

struct BoundaryCondition {
  BoundaryKind kind = BoundaryKind::Dirichlet;
  int axis = 1;  // 1-based spatial axis
  BoundarySide side = BoundarySide::Both;
  Expr value = Expr::number(0.0);
  // Robin: robin_a*u + robin_b*du/dn = value
  double robin_a = 1.0;
  double robin_b = 1.0;
};

struct Domain {
  int dims = 1;
  std::vector<std::string> axes{"x"};
  std::vector<std::pair<double, double>> extents{{0.0, 1.0}};
  std::optional<std::pair<double, double>> time;
  std::set<int> periodic_axes;
  GeometryClass geometry = GeometryClass::Rectilinear;
  DiscretizationClass discretization = DiscretizationClass::Cartesian;

  int axis_index(const std::string& name) const {
    auto it = std::find(axes.begin(), axes.end(), name);
    return it == axes.end() ? 0 : static_cast<int>(it - axes.begin()) + 1;
  }
};

inline std::vector<std::string> default_axes(int d) {
  static const std::vector<std::string> names{"x", "y", "z", "w", "v", "s", "r", "q"};
  std::vector<std::string> out;
  for (int i = 0; i < d; ++i) out.push_back(i < static_cast<int>(names.size()) ? names[i] : "x" + std::to_string(i + 1));
  return out;
}

struct PdeMetadata {
  bool linear = true;
  int max_order = 0;
  std::optional<double> reynolds;
  std::optional<double> peclet;
  bool nonlocal = false;
  // Closed-form solution in the coordinates, when one is known.
  std::optional<Expr> exact;
  std::string family;
};

struct CanonicalPde {
  Expr residual = Expr::number(0.0);
  std::vector<BoundaryCondition> boundary;
  std::optional<Expr> initial;
  Domain domain;
  PdeMetadata meta;

  bool time_dependent() const { return contains_time_derivative(residual); }
  std::set<std::string> fields() const { return field_variables(residual); }
};

// ---------------------------------------------------------------------------
// Linearity analysis
// ---------------------------------------------------------------------------

namespace detail {

// Polynomial degree of `e` in the unknown fields; 2 stands for "nonlinear".
inline int field_degree(const Expr& e, const std::set<std::string>& fields) {
  switch (e.kind) {
    case NodeKind::Number:
    case NodeKind::Constant:
      return 0;
    case NodeKind::Variable:
      return fields.count(e.label) ? 1 : 0;
    case NodeKind::TimeDerivative:
    case NodeKind::SpatialDerivative:
      return field_degree(e.children[0], fields);
    case NodeKind::Function:
      return field_degree(e.children[0], fields) > 0 ? 2 : 0;
    case NodeKind::Power: {
      int base = field_degree(e.children[0], fields);
      if (base == 0 && field_degree(e.children[1], fields) == 0) return 0;
      const Expr& x = e.children[1];
      if (base == 1 && x.kind == NodeKind::Number && x.value == 1.0) return 1;
      return 2;
    }
    case NodeKind::Product: {
      int d = 0;
      for (const auto& c : e.children) d += field_degree(c, fields);
      return std::min(d, 2);
    }
    case NodeKind::Sum: {
      int d = 0;
      for (const auto& c : e.children) d = std::max(d, field_degree(c, fields));
      return d;
    }
  }
  return 2;
}

}  // namespace detail

inline bool is_linear(const Expr& residual) {
  return detail::field_degree(residual, field_variables(residual)) <= 1;
}

/// Terms of a canonical residual (the children of a top-level sum, or the
/// residual itself).
inline std::vector<Expr> residual_terms(const Expr& residual) {
  if (residual.kind == NodeKind::Sum) return residual.children;
  return {residual};
}

inline bool has_forcing(const Expr& residual) {
  auto fields = field_variables(residual);
  for (const auto& t : residual_terms(residual))
    if (detail::field_degree(t, fields) == 0) return true;
  return false;
}

/// Canonicalizes the residual and recomputes the derived metadata fields.
inline void normalize(CanonicalPde& pde) {
  pde.residual = canonicalize(pde.residual);
  for (auto& bc : pde.boundary) bc.value = canonicalize(bc.value);
  if (pde.initial) pde.initial = canonicalize(*pde.initial);
  if (pde.meta.exact) pde.meta.exact = canonicalize(*pde.meta.exact);
  pde.meta.linear = is_linear(pde.residual);
  pde.meta.max_order = max_derivative_order(pde.residual);
  if (pde.time_dependent() && !pde.domain.time) pde.domain.time = std::make_pair(0.0, 1.0);
}

// ---------------------------------------------------------------------------
// JSON interchange
// ---------------------------------------------------------------------------

namespace detail {

// Interchange strings are prefix notation; candidate blocks written by a
// provider may instead carry infix text (see `infix`).
inline Expr read_expr(const json& j, const char* what, bool infix) {
  if (j.is_number()) return Expr::number(j.get<double>());
  if (!j.is_string()) throw PdeFormatError(std::string(what) + " must be an expression string");
  const auto s = j.get<std::string>();
  try {
    return infix ? parse(s) : from_prefix(s);
  } catch (const Error& e) {
    throw PdeFormatError(std::string("unparseable ") + what + ": " + e.what());
  }
}

}  // namespace detail

inline json to_json(const CanonicalPde& pde) {
  json bc = json::array();
  for (const auto& b : pde.boundary) {
    json jb{{"kind", to_string(b.kind)}, {"axis", b.axis}, {"side", to_string(b.side)}, {"value", to_prefix(b.value)}};
    if (b.kind == BoundaryKind::Robin) {
      jb["robin_a"] = b.robin_a;
      jb["robin_b"] = b.robin_b;
    }
    bc.push_back(std::move(jb));
  }
  json extents = json::array();
  for (auto [lo, hi] : pde.domain.extents) extents.push_back({lo, hi});
  json domain{{"dims", pde.domain.dims},
              {"axes", pde.domain.axes},
              {"extents", extents},
              {"periodic", std::vector<int>(pde.domain.periodic_axes.begin(), pde.domain.periodic_axes.end())},
              {"geometry", to_string(pde.domain.geometry)},
              {"discretization", to_string(pde.domain.discretization)}};
  domain["time"] = pde.domain.time ? json{pde.domain.time->first, pde.domain.time->second} : json(nullptr);
  json meta{{"linear", pde.meta.linear}, {"max_order", pde.meta.max_order}, {"nonlocal", pde.meta.nonlocal}};
  meta["Re"] = pde.meta.reynolds ? json(*pde.meta.reynolds) : json(nullptr);
  meta["Pe"] = pde.meta.peclet ? json(*pde.meta.peclet) : json(nullptr);
  meta["exact"] = pde.meta.exact ? json(to_prefix(*pde.meta.exact)) : json(nullptr);
  if (!pde.meta.family.empty()) meta["family"] = pde.meta.family;
  return json{{"residual", to_prefix(pde.residual)},
              {"bc", bc},
              {"ic", pde.initial ? json(to_prefix(*pde.initial)) : json(nullptr)},
              {"domain", domain},
              {"metadata", meta}};
}

/// Reads a PDE object. "residual" holds prefix notation; an object carrying
/// "equation" instead is read in infix notation throughout (bc/ic values too).
/// The residual is canonicalized and derived metadata recomputed; stated
/// linear/max_order values that disagree with the residual are rejected.
inline CanonicalPde pde_from_json(const json& j) {
  if (!j.is_object()) throw PdeFormatError("PDE must be a JSON object");
  const bool infix = !j.contains("residual") && j.contains("equation");
  if (!infix && !j.contains("residual")) throw PdeFormatError("missing 'residual'");
  CanonicalPde pde;
  pde.residual = detail::read_expr(infix ? j.at("equation") : j.at("residual"), "residual", infix);

  const json dom = j.value("domain", json::object());
  pde.domain.dims = dom.value("dims", 1);
  if (pde.domain.dims < 1) throw PdeFormatError("domain.dims must be positive");
  pde.domain.axes = dom.contains("axes") ? dom.at("axes").get<std::vector<std::string>>() : default_axes(pde.domain.dims);
  if (static_cast<int>(pde.domain.axes.size()) != pde.domain.dims) throw PdeFormatError("domain.axes length differs from dims");
  pde.domain.extents.clear();
  if (dom.contains("extents")) {
    for (const auto& e : dom.at("extents")) pde.domain.extents.emplace_back(e.at(0).get<double>(), e.at(1).get<double>());
  } else {
    pde.domain.extents.assign(static_cast<std::size_t>(pde.domain.dims), {0.0, 1.0});
  }
  if (static_cast<int>(pde.domain.extents.size()) != pde.domain.dims) throw PdeFormatError("domain.extents length differs from dims");
  for (auto [lo, hi] : pde.domain.extents)
    if (!(hi > lo)) throw PdeFormatError("domain extent must have hi > lo");
  if (dom.contains("time") && !dom.at("time").is_null())
    pde.domain.time = std::make_pair(dom.at("time").at(0).get<double>(), dom.at("time").at(1).get<double>());
  if (dom.contains("periodic"))
    for (int a : dom.at("periodic").get<std::vector<int>>()) pde.domain.periodic_axes.insert(a);
  pde.domain.geometry = geometry_from(dom.value("geometry", std::string("rectilinear")));
  pde.domain.discretization = discretization_from(dom.value("discretization", std::string("cartesian")));

  if (j.contains("bc")) {
    for (const auto& jb : j.at("bc")) {
      BoundaryCondition b;
      const auto kind = jb.value("kind", std::string("dirichlet"));
      auto k = boundary_kind_from(kind);
      if (!k) throw PdeFormatError("inadmissible boundary condition kind '" + kind + "'");
      b.kind = *k;
      b.axis = jb.value("axis", 1);
      const auto side = jb.value("side", std::string("both"));
      if (side == "lo") b.side = BoundarySide::Lower;
      else if (side == "hi") b.side = BoundarySide::Upper;
      else if (side == "both") b.side = BoundarySide::Both;
      else throw PdeFormatError("unknown boundary side '" + side + "'");
      if (jb.contains("value")) b.value = detail::read_expr(jb.at("value"), "boundary value", infix);
      b.robin_a = jb.value("robin_a", 1.0);
      b.robin_b = jb.value("robin_b", 1.0);
      pde.boundary.push_back(std::move(b));
    }
  }
  if (j.contains("ic") && !j.at("ic").is_null()) pde.initial = detail::read_expr(j.at("ic"), "initial condition", infix);

  const json meta = j.value("metadata", json::object());
  auto opt_number = [&](const char* key) -> std::optional<double> {
    if (!meta.contains(key) || meta.at(key).is_null()) return std::nullopt;
    double v = meta.at(key).get<double>();
    if (!(v >= 0.0) || !std::isfinite(v)) throw PdeFormatError(std::string(key) + " must be a nonnegative real");
    return v;
  };
  pde.meta.reynolds = opt_number("Re");
  pde.meta.peclet = opt_number("Pe");
  pde.meta.nonlocal = meta.value("nonlocal", false);
  pde.meta.family = meta.value("family", std::string());
  if (meta.contains("exact") && !meta.at("exact").is_null()) pde.meta.exact = detail::read_expr(meta.at("exact"), "exact solution", infix);

  normalize(pde);
  if (meta.contains("linear") && meta.at("linear").get<bool>() != pde.meta.linear)
    throw PdeFormatError("metadata.linear disagrees with the residual");
  if (meta.contains("max_order") && meta.at("max_order").get<int>() != pde.meta.max_order)
    throw PdeFormatError("metadata.max_order disagrees with the residual");
  return pde;
}

inline CanonicalPde pde_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw PdeFormatError(std::string("invalid JSON: ") + e.what());
  }
  try {
    return pde_from_json(j);
  } catch (const json::exception& e) {
    throw PdeFormatError(std::string("malformed PDE object: ") + e.what());
  }
}

/// Symbolic equivalence of two PDEs: the normalized common-subforest score
/// of their canonical residual trees.
inline double sym_score(const CanonicalPde& a, const CanonicalPde& b) {
  return tree_match_score(a.residual, b.residual);
}

}  // namespace pinnpipe
