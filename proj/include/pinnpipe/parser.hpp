#pragma once

// Infix PDE expression grammar.
//
//   equation := expr [ '=' expr ]
//   expr     := term { ('+' | '-') term }
//   term     := unary { ('*' | '/') unary }
//   unary    := ('-' | '+') unary | power
//   power    := primary [ '^' unary ]
//   primary  := number | '(' expr ')' | func '(' expr ')' | derivative | identifier
//
// Derivatives are written either in subscript form (u_t, u_xx, u_xy) or in
// operator form (du/dt, d2u/dx2, d2u/dxdy). Every lowercase letter of a
// subscript suffix names an axis; 't' is time. An equation "a = b" parses as
// the residual a - b.

#include <cctype>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pinnpipe/error.hpp"
#include "pinnpipe/expr.hpp"

namespace pinnpipe {

namespace detail {

enum class TokenType { Number, Ident, Op, End };

struct Token {
  TokenType type = TokenType::End;
  std::string text;
  double number = 0.0;
  std::size_t pos = 0;
};

inline std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    Token t;
    t.pos = i;
    if (std::isdigit(static_cast<unsigned char>(c)) || (c == '.' && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1])))) {
      std::size_t j = i;
      while (j < s.size() && (std::isdigit(static_cast<unsigned char>(s[j])) || s[j] == '.')) ++j;
      if (j < s.size() && (s[j] == 'e' || s[j] == 'E')) {
        std::size_t k = j + 1;
        if (k < s.size() && (s[k] == '+' || s[k] == '-')) ++k;
        if (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) {
          while (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) ++k;
          j = k;
        }
      }
      t.type = TokenType::Number;
      t.text = std::string(s.substr(i, j - i));
      auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), t.number);
      if (ec != std::errc() || p != t.text.data() + t.text.size() || !std::isfinite(t.number))
        throw SyntaxError(i, "malformed number '" + t.text + "'");
      i = j;
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_')) ++j;
      t.type = TokenType::Ident;
      t.text = std::string(s.substr(i, j - i));
      i = j;
    } else if (std::string_view("+-*/^()=").find(c) != std::string_view::npos) {
      t.type = TokenType::Op;
      t.text = std::string(1, c);
      ++i;
    } else {
      throw SyntaxError(i, std::string("unexpected character '") + c + "'");
    }
    out.push_back(std::move(t));
  }
  Token end;
  end.pos = s.size();
  out.push_back(end);
  return out;
}

inline Expr negate(Expr e) {
  if (e.kind == NodeKind::Number) {
    e.value = -e.value;
    return e;
  }
  if (e.kind == NodeKind::Product && e.children.front().kind == NodeKind::Number) {
    e.children.front().value = -e.children.front().value;
    return e;
  }
  return Expr::product({Expr::number(-1.0), std::move(e)});
}

// Builds a derivative chain over `field` from per-axis orders; time outermost.
inline Expr derivative_chain(std::string field, int time_order, const std::map<std::string, int>& axes) {
  Expr e = Expr::variable(std::move(field));
  for (auto it = axes.rbegin(); it != axes.rend(); ++it) e = Expr::spatial_derivative(it->first, it->second, std::move(e));
  if (time_order > 0) e = Expr::time_derivative(time_order, std::move(e));
  return e;
}

class InfixParser {
 public:
  explicit InfixParser(std::string_view text) : toks_(tokenize(text)) {}

  Expr parse_equation() {
    if (peek().type == TokenType::End) throw SyntaxError(0, "empty expression");
    Expr lhs = expr();
    if (accept_op("=")) {
      Expr rhs = expr();
      lhs = Expr::sum({std::move(lhs), negate(std::move(rhs))});
    }
    if (peek().type != TokenType::End) throw SyntaxError(peek().pos, "unexpected '" + peek().text + "'");
    return lhs;
  }

 private:
  std::vector<Token> toks_;
  std::size_t i_ = 0;

  const Token& peek(std::size_t ahead = 0) const { return toks_[std::min(i_ + ahead, toks_.size() - 1)]; }
  const Token& next() { return toks_[std::min(i_++, toks_.size() - 1)]; }

  bool is_op(const Token& t, std::string_view op) const { return t.type == TokenType::Op && t.text == op; }

  bool accept_op(std::string_view op) {
    if (is_op(peek(), op)) {
      ++i_;
      return true;
    }
    return false;
  }

  Expr expr() {
    std::vector<Expr> terms;
    terms.push_back(term());
    while (true) {
      if (accept_op("+")) terms.push_back(term());
      else if (accept_op("-")) terms.push_back(negate(term()));
      else break;
    }
    if (terms.size() == 1) return std::move(terms.front());
    return Expr::sum(std::move(terms));
  }

  Expr term() {
    std::vector<Expr> factors;
    factors.push_back(unary());
    while (true) {
      if (accept_op("*")) factors.push_back(unary());
      else if (accept_op("/")) factors.push_back(Expr::power(unary(), Expr::number(-1.0)));
      else break;
    }
    if (factors.size() == 1) return std::move(factors.front());
    return Expr::product(std::move(factors));
  }

  Expr unary() {
    if (accept_op("-")) return negate(unary());
    if (accept_op("+")) return unary();
    return power();
  }

  Expr power() {
    Expr base = primary();
    if (accept_op("^")) return Expr::power(std::move(base), unary());
    return base;
  }

  Expr primary() {
    const Token& t = peek();
    switch (t.type) {
      case TokenType::End:
        throw SyntaxError(t.pos, "unexpected end of input");
      case TokenType::Number:
        next();
        return Expr::number(t.number);
      case TokenType::Op:
        if (is_op(t, "(")) {
          next();
          Expr inner = expr();
          if (!accept_op(")")) throw SyntaxError(peek().pos, "expected ')'");
          return inner;
        }
        throw SyntaxError(t.pos, "unexpected '" + t.text + "'");
      case TokenType::Ident:
        break;
    }
    if (auto d = operator_derivative()) return std::move(*d);
    const Token& id = next();
    if (is_op(peek(), "(")) {
      if (!is_known_function(id.text)) throw UnknownSymbol(id.text);
      next();
      Expr arg = expr();
      if (!accept_op(")")) throw SyntaxError(peek().pos, "expected ')'");
      return Expr::function(id.text, std::move(arg));
    }
    if (is_known_constant(id.text)) return Expr::constant(id.text);
    if (auto d = subscript_derivative(id.text)) return std::move(*d);
    return Expr::variable(id.text);
  }

  // u_xx, u_t, u_tx; otherwise nullopt (plain identifier such as k_1).
  static std::optional<Expr> subscript_derivative(const std::string& name) {
    auto us = name.find('_');
    if (us == std::string::npos || us == 0 || us + 1 >= name.size()) return std::nullopt;
    std::string base = name.substr(0, us);
    std::string suffix = name.substr(us + 1);
    for (char c : suffix)
      if (!std::islower(static_cast<unsigned char>(c))) return std::nullopt;
    int time_order = 0;
    std::map<std::string, int> axes;
    for (char c : suffix) {
      if (c == 't') ++time_order;
      else ++axes[std::string(1, c)];
    }
    return derivative_chain(base, time_order, axes);
  }

  // d<k><field> / d<axis><k>[d<axis><k>...]
  std::optional<Expr> operator_derivative() {
    const Token& num = peek();
    if (num.text.size() < 2 || num.text[0] != 'd' || !is_op(peek(1), "/") || peek(2).type != TokenType::Ident ||
        peek(2).text[0] != 'd')
      return std::nullopt;
    std::size_t j = 1;
    while (j < num.text.size() && std::isdigit(static_cast<unsigned char>(num.text[j]))) ++j;
    if (j >= num.text.size() || !std::isalpha(static_cast<unsigned char>(num.text[j]))) return std::nullopt;
    int order = j > 1 ? std::stoi(num.text.substr(1, j - 1)) : 1;
    std::string field = num.text.substr(j);
    if (order < 1) throw SyntaxError(num.pos, "derivative order must be positive");

    next();  // numerator
    next();  // '/'
    const Token& den = next();
    const std::string& s = den.text;
    int time_order = 0;
    int total = 0;
    std::map<std::string, int> axes;
    std::size_t k = 0;
    while (k < s.size()) {
      if (s[k] != 'd') throw SyntaxError(den.pos + k, "expected 'd' in derivative denominator");
      ++k;
      if (k >= s.size() || !std::isalpha(static_cast<unsigned char>(s[k])))
        throw SyntaxError(den.pos + k, "expected axis after 'd'");
      char axis = s[k++];
      std::size_t start = k;
      while (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) ++k;
      int n = k > start ? std::stoi(s.substr(start, k - start)) : 1;
      if (n < 1) throw SyntaxError(den.pos + start, "derivative order must be positive");
      total += n;
      if (axis == 't') time_order += n;
      else axes[std::string(1, axis)] += n;
    }
    if (total != order)
      throw SyntaxError(den.pos, "derivative order mismatch between numerator and denominator");
    return derivative_chain(field, time_order, axes);
  }
};

}  // namespace detail

/// Parses an infix PDE expression or equation into an (uncanonicalized)
/// expression tree. Throws SyntaxError or UnknownSymbol.
inline Expr parse(std::string_view text) { return detail::InfixParser(text).parse_equation(); }

}  // namespace pinnpipe
