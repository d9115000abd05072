#pragma once

// Expression trees for PDE residuals, plus the prefix (s-expression)
// interchange notation used on every module boundary.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pinnpipe/error.hpp"

namespace pinnpipe {

// Declaration order is the primary sort key of the canonical total order.
enum class NodeKind : std::uint8_t {
  Number,
  Constant,
  Variable,
  TimeDerivative,
  SpatialDerivative,
  Function,
  Power,
  Product,
  Sum,
};

inline constexpr std::array<std::string_view, 7> kKnownFunctions = {
    "sin", "cos", "tan", "exp", "log", "sqrt", "tanh"};

inline constexpr std::array<std::string_view, 1> kKnownConstants = {"pi"};

inline bool is_known_function(std::string_view name) {
  return std::find(kKnownFunctions.begin(), kKnownFunctions.end(), name) != kKnownFunctions.end();
}

inline bool is_known_constant(std::string_view name) {
  return std::find(kKnownConstants.begin(), kKnownConstants.end(), name) != kKnownConstants.end();
}

inline bool is_commutative(NodeKind k) { return k == NodeKind::Sum || k == NodeKind::Product; }

inline bool is_derivative(NodeKind k) {
  return k == NodeKind::TimeDerivative || k == NodeKind::SpatialDerivative;
}

/// A node of a symbolic expression tree.
///
/// `label` holds the variable, constant or function name, or the axis name
/// of a spatial derivative. `value` is used by numeric literals, `order` by
/// derivatives.
struct Expr {
  NodeKind kind = NodeKind::Number;
  std::string label;
  double value = 0.0;
  int order = 0;
  std::vector<Expr> children;

  static Expr number(double v) {
    Expr e;
    e.kind = NodeKind::Number;
    e.value = v;
    return e;
  }
  static Expr variable(std::string name) {
    Expr e;
    e.kind = NodeKind::Variable;
    e.label = std::move(name);
    return e;
  }
  static Expr constant(std::string name) {
    Expr e;
    e.kind = NodeKind::Constant;
    e.label = std::move(name);
    return e;
  }
  static Expr time_derivative(int order, Expr child) {
    Expr e;
    e.kind = NodeKind::TimeDerivative;
    e.order = order;
    e.children.push_back(std::move(child));
    return e;
  }
  static Expr spatial_derivative(std::string axis, int order, Expr child) {
    Expr e;
    e.kind = NodeKind::SpatialDerivative;
    e.label = std::move(axis);
    e.order = order;
    e.children.push_back(std::move(child));
    return e;
  }
  static Expr function(std::string name, Expr arg) {
    Expr e;
    e.kind = NodeKind::Function;
    e.label = std::move(name);
    e.children.push_back(std::move(arg));
    return e;
  }
  static Expr power(Expr base, Expr exponent) {
    Expr e;
    e.kind = NodeKind::Power;
    e.children.push_back(std::move(base));
    e.children.push_back(std::move(exponent));
    return e;
  }
  static Expr product(std::vector<Expr> factors) {
    Expr e;
    e.kind = NodeKind::Product;
    e.children = std::move(factors);
    return e;
  }
  static Expr sum(std::vector<Expr> terms) {
    Expr e;
    e.kind = NodeKind::Sum;
    e.children = std::move(terms);
    return e;
  }

  bool is_number() const { return kind == NodeKind::Number; }
  bool is_number(double v) const { return kind == NodeKind::Number && value == v; }
};

/// Total order used to sort commutative children: kind, then label, then
/// children count, then children recursively. Returns <0, 0 or >0.
inline int compare(const Expr& a, const Expr& b) {
  if (a.kind != b.kind) return a.kind < b.kind ? -1 : 1;
  switch (a.kind) {
    case NodeKind::Number:
      if (a.value != b.value) return a.value < b.value ? -1 : 1;
      break;
    case NodeKind::TimeDerivative:
    case NodeKind::SpatialDerivative:
      if (int c = a.label.compare(b.label); c != 0) return c < 0 ? -1 : 1;
      if (a.order != b.order) return a.order < b.order ? -1 : 1;
      break;
    default:
      if (int c = a.label.compare(b.label); c != 0) return c < 0 ? -1 : 1;
      break;
  }
  if (a.children.size() != b.children.size()) return a.children.size() < b.children.size() ? -1 : 1;
  for (std::size_t i = 0; i < a.children.size(); ++i) {
    if (int c = compare(a.children[i], b.children[i]); c != 0) return c;
  }
  return 0;
}

inline bool operator==(const Expr& a, const Expr& b) { return compare(a, b) == 0; }
inline bool operator!=(const Expr& a, const Expr& b) { return compare(a, b) != 0; }

struct ExprLess {
  bool operator()(const Expr& a, const Expr& b) const { return compare(a, b) < 0; }
};

inline constexpr double kCoefficientTolerance = 1e-9;

inline bool numbers_match(double a, double b) {
  return std::fabs(a - b) <= kCoefficientTolerance * std::max({1.0, std::fabs(a), std::fabs(b)});
}

/// True when two nodes may be aligned: same kind and label, numeric
/// literals within the coefficient tolerance. Children are not inspected.
inline bool labels_match(const Expr& a, const Expr& b) {
  if (a.kind != b.kind) return false;
  if (a.kind == NodeKind::Number) return numbers_match(a.value, b.value);
  return a.label == b.label && a.order == b.order;
}

inline std::size_t node_count(const Expr& e) {
  std::size_t n = 1;
  for (const auto& c : e.children) n += node_count(c);
  return n;
}

/// Checks the structural invariants: arities per kind, finite literals,
/// positive derivative orders.
inline bool well_formed(const Expr& e) {
  switch (e.kind) {
    case NodeKind::Number:
      if (!std::isfinite(e.value) || !e.children.empty()) return false;
      break;
    case NodeKind::Constant:
    case NodeKind::Variable:
      if (e.label.empty() || !e.children.empty()) return false;
      break;
    case NodeKind::TimeDerivative:
    case NodeKind::SpatialDerivative:
      if (e.order < 1 || e.children.size() != 1) return false;
      if (e.kind == NodeKind::SpatialDerivative && e.label.empty()) return false;
      break;
    case NodeKind::Function:
      if (e.children.size() != 1 || e.label.empty()) return false;
      break;
    case NodeKind::Power:
      if (e.children.size() != 2) return false;
      break;
    case NodeKind::Product:
    case NodeKind::Sum:
      if (e.children.size() < 2) return false;
      break;
  }
  return std::all_of(e.children.begin(), e.children.end(), [](const Expr& c) { return well_formed(c); });
}

/// Shortest decimal text that round-trips to the same double.
inline std::string format_number(double v) {
  if (v == 0.0) return "0";
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

// ---------------------------------------------------------------------------
// Prefix notation
//
//   number        0.1  -2  1e-05
//   variable      u
//   constant      (const pi)
//   d^k/dt^k      (dt k child)
//   d^k/dx^k      (dx x k child)
//   function      (sin child)
//   power         (^ base exponent)
//   product, sum  (* a b ...)  (+ a b ...)
// ---------------------------------------------------------------------------

inline void write_prefix(const Expr& e, std::string& out) {
  auto write_children = [&](std::size_t from) {
    for (std::size_t i = from; i < e.children.size(); ++i) {
      out += ' ';
      write_prefix(e.children[i], out);
    }
  };
  switch (e.kind) {
    case NodeKind::Number:
      out += format_number(e.value);
      return;
    case NodeKind::Variable:
      out += e.label;
      return;
    case NodeKind::Constant:
      out += "(const " + e.label + ")";
      return;
    case NodeKind::TimeDerivative:
      out += "(dt " + std::to_string(e.order);
      break;
    case NodeKind::SpatialDerivative:
      out += "(dx " + e.label + " " + std::to_string(e.order);
      break;
    case NodeKind::Function:
      out += "(" + e.label;
      break;
    case NodeKind::Power:
      out += "(^";
      break;
    case NodeKind::Product:
      out += "(*";
      break;
    case NodeKind::Sum:
      out += "(+";
      break;
  }
  write_children(0);
  out += ')';
}

inline std::string to_prefix(const Expr& e) {
  std::string out;
  write_prefix(e, out);
  return out;
}

namespace detail {

class PrefixReader {
 public:
  explicit PrefixReader(std::string_view text) : text_(text) {}

  Expr read_all() {
    Expr e = read();
    skip_space();
    if (pos_ != text_.size()) throw SyntaxError(pos_, "trailing input after expression");
    return e;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;

  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  std::string_view atom() {
    skip_space();
    std::size_t start = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) &&
           text_[pos_] != '(' && text_[pos_] != ')')
      ++pos_;
    if (start == pos_) throw SyntaxError(pos_, "expected atom");
    return text_.substr(start, pos_ - start);
  }

  int integer() {
    std::size_t at = pos_;
    auto a = atom();
    int v = 0;
    auto [p, ec] = std::from_chars(a.data(), a.data() + a.size(), v);
    if (ec != std::errc() || p != a.data() + a.size() || v < 1)
      throw SyntaxError(at, "expected positive integer order");
    return v;
  }

  void expect_close() {
    skip_space();
    if (pos_ >= text_.size() || text_[pos_] != ')') throw SyntaxError(pos_, "expected ')'");
    ++pos_;
  }

  Expr read() {
    skip_space();
    if (pos_ >= text_.size()) throw SyntaxError(pos_, "unexpected end of input");
    if (text_[pos_] == ')') throw SyntaxError(pos_, "unexpected ')'");
    if (text_[pos_] != '(') {
      std::size_t at = pos_;
      auto a = atom();
      double v = 0;
      auto [p, ec] = std::from_chars(a.data(), a.data() + a.size(), v);
      if (ec == std::errc() && p == a.data() + a.size()) {
        if (!std::isfinite(v)) throw SyntaxError(at, "non-finite literal");
        return Expr::number(v);
      }
      if (!(std::isalpha(static_cast<unsigned char>(a[0])) || a[0] == '_'))
        throw SyntaxError(at, "invalid symbol '" + std::string(a) + "'");
      return Expr::variable(std::string(a));
    }
    ++pos_;
    std::size_t head_at = pos_;
    std::string head(atom());
    Expr e;
    if (head == "const") {
      e = Expr::constant(std::string(atom()));
      expect_close();
      return e;
    }
    if (head == "dt") {
      int k = integer();
      e = Expr::time_derivative(k, read());
    } else if (head == "dx") {
      std::string axis(atom());
      int k = integer();
      e = Expr::spatial_derivative(std::move(axis), k, read());
    } else if (head == "^") {
      Expr b = read();
      e = Expr::power(std::move(b), read());
    } else if (head == "*" || head == "+") {
      std::vector<Expr> kids;
      skip_space();
      while (pos_ < text_.size() && text_[pos_] != ')') {
        kids.push_back(read());
        skip_space();
      }
      if (kids.size() < 2) throw SyntaxError(head_at, "'" + head + "' needs at least two operands");
      e = head == "*" ? Expr::product(std::move(kids)) : Expr::sum(std::move(kids));
    } else if (is_known_function(head)) {
      e = Expr::function(head, read());
    } else {
      throw UnknownSymbol(head);
    }
    expect_close();
    return e;
  }
};

}  // namespace detail

inline Expr from_prefix(std::string_view text) { return detail::PrefixReader(text).read_all(); }

// ---------------------------------------------------------------------------
// Infix rendering (human readable; parses back under the infix grammar)
// ---------------------------------------------------------------------------

namespace detail {

// Derivative chain applied directly to a variable renders in subscript form.
inline bool subscript_form(const Expr& e, std::string& out) {
  std::string suffix_t;
  std::string suffix_x;
  const Expr* cur = &e;
  while (is_derivative(cur->kind)) {
    std::string letter = cur->kind == NodeKind::TimeDerivative ? "t" : cur->label;
    if (letter.size() != 1) return false;
    std::string rep;
    for (int i = 0; i < cur->order; ++i) rep += letter;
    (cur->kind == NodeKind::TimeDerivative ? suffix_t : suffix_x) += rep;
    cur = &cur->children[0];
  }
  if (cur->kind != NodeKind::Variable) return false;
  out += cur->label + "_" + suffix_t + suffix_x;
  return true;
}

inline int infix_precedence(const Expr& e) {
  switch (e.kind) {
    case NodeKind::Sum:
      return 1;
    case NodeKind::Product:
      return 2;
    case NodeKind::Power:
      return 3;
    case NodeKind::Number:
      return e.value < 0 ? 1 : 4;
    default:
      return 4;
  }
}

inline void write_infix(const Expr& e, std::string& out);

inline void write_infix_wrapped(const Expr& e, int min_prec, std::string& out) {
  bool wrap = infix_precedence(e) < min_prec;
  if (wrap) out += '(';
  write_infix(e, out);
  if (wrap) out += ')';
}

inline void write_infix(const Expr& e, std::string& out) {
  switch (e.kind) {
    case NodeKind::Number:
      out += format_number(e.value);
      return;
    case NodeKind::Variable:
    case NodeKind::Constant:
      out += e.label;
      return;
    case NodeKind::TimeDerivative:
    case NodeKind::SpatialDerivative:
      if (!subscript_form(e, out)) {
        out += "D[";
        write_infix(e.children[0], out);
        out += "]";
      }
      return;
    case NodeKind::Function:
      out += e.label + "(";
      write_infix(e.children[0], out);
      out += ")";
      return;
    case NodeKind::Power:
      write_infix_wrapped(e.children[0], 4, out);
      out += "^";
      write_infix_wrapped(e.children[1], 4, out);
      return;
    case NodeKind::Product:
      for (std::size_t i = 0; i < e.children.size(); ++i) {
        if (i) out += "*";
        write_infix_wrapped(e.children[i], i == 0 ? 2 : 3, out);
      }
      return;
    case NodeKind::Sum:
      for (std::size_t i = 0; i < e.children.size(); ++i) {
        if (i) out += " + ";
        write_infix_wrapped(e.children[i], 2, out);
      }
      return;
  }
}

}  // namespace detail

inline std::string to_infix(const Expr& e) {
  std::string out;
  detail::write_infix(e, out);
  return out;
}

// ---------------------------------------------------------------------------
// Structural queries
// ---------------------------------------------------------------------------

/// Names of variables that appear as the operand of a derivative.
inline void collect_fields(const Expr& e, std::set<std::string>& out) {
  if (is_derivative(e.kind)) {
    const Expr* cur = &e;
    while (is_derivative(cur->kind)) cur = &cur->children[0];
    if (cur->kind == NodeKind::Variable) out.insert(cur->label);
    else collect_fields(*cur, out);
    return;
  }
  for (const auto& c : e.children) collect_fields(c, out);
}

inline std::set<std::string> field_variables(const Expr& e) {
  std::set<std::string> out;
  collect_fields(e, out);
  return out;
}

inline void collect_variables(const Expr& e, std::set<std::string>& out) {
  if (e.kind == NodeKind::Variable) out.insert(e.label);
  for (const auto& c : e.children) collect_variables(c, out);
}

/// Total order of a derivative chain (d/dt d/dx u has order 2).
inline int derivative_chain_order(const Expr& e) {
  int k = 0;
  const Expr* cur = &e;
  while (is_derivative(cur->kind)) {
    k += cur->order;
    cur = &cur->children[0];
  }
  return k;
}

inline int max_derivative_order(const Expr& e) {
  int m = is_derivative(e.kind) ? derivative_chain_order(e) : 0;
  for (const auto& c : e.children) m = std::max(m, max_derivative_order(c));
  return m;
}

inline bool contains_time_derivative(const Expr& e) {
  if (e.kind == NodeKind::TimeDerivative) return true;
  return std::any_of(e.children.begin(), e.children.end(),
                     [](const Expr& c) { return contains_time_derivative(c); });
}

inline void collect_spatial_axes(const Expr& e, std::set<std::string>& out) {
  if (e.kind == NodeKind::SpatialDerivative) out.insert(e.label);
  for (const auto& c : e.children) collect_spatial_axes(c, out);
}

}  // namespace pinnpipe
