#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "oracle.hpp"
#include "pinnpipe/canonical.hpp"
#include "pinnpipe/match.hpp"
#include "pinnpipe/parser.hpp"
#include "pinnpipe/pde.hpp"

using namespace pinnpipe;

namespace {

Expr canon(const std::string& s) { return canonicalize(parse(s)); }

}  // namespace

TEST(Parse, OperatorNotation) {
  Expr e = parse("du/dt - 0.01*d2u/dx2");
  Expr want = Expr::sum({Expr::time_derivative(1, Expr::variable("u")),
                         Expr::product({Expr::number(-0.01), Expr::spatial_derivative("x", 2, Expr::variable("u"))})});
  EXPECT_EQ(e, want) << to_prefix(e);
}

TEST(Parse, SubscriptNotation) {
  Expr e = parse("u_t + u*u_x");
  Expr want = Expr::sum({Expr::time_derivative(1, Expr::variable("u")),
                         Expr::product({Expr::variable("u"), Expr::spatial_derivative("x", 1, Expr::variable("u"))})});
  EXPECT_EQ(e, want) << to_prefix(e);
}

TEST(Parse, TruncatedOperatorDerivativeReportsOffset) {
  try {
    parse("du/d");
    FAIL() << "expected SyntaxError";
  } catch (const SyntaxError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Parse, Errors) {
  EXPECT_THROW(parse(""), SyntaxError);
  EXPECT_THROW(parse("u_t +"), SyntaxError);
  EXPECT_THROW(parse("(u"), SyntaxError);
  EXPECT_THROW(parse("u $ v"), SyntaxError);
  EXPECT_THROW(parse("d2u/dx"), SyntaxError);
  EXPECT_THROW(parse("erf(u)"), UnknownSymbol);
}

TEST(Parse, EquationBecomesResidual) {
  EXPECT_EQ(canon("u_t = 0.1*u_xx"), canon("u_t - 0.1*u_xx"));
  EXPECT_EQ(canon("d2u/dx2 = -pi^2*sin(pi*x)"), canon("u_xx + pi^2*sin(pi*x)"));
}

TEST(Parse, MixedDerivatives) {
  EXPECT_EQ(canon("d2u/dxdy"), canon("u_xy"));
  EXPECT_EQ(canon("u_yx"), canon("u_xy"));
  EXPECT_EQ(canon("d2u/dtdx"), canon("u_tx"));
  EXPECT_EQ(max_derivative_order(canon("u_xxxx")), 4);
}

TEST(Canonicalize, Commutativity) { EXPECT_EQ(canon("u_xx + u_t"), canon("u_t + u_xx")); }

TEST(Canonicalize, LikeTermFolding) { EXPECT_EQ(canon("2*u_x + 3*u_x"), canon("5*u_x")); }

TEST(Canonicalize, NotationUnification) { EXPECT_EQ(canon("d2u/dx2"), canon("u_xx")); }

TEST(Canonicalize, Folding) {
  EXPECT_EQ(canon("2*3*u"), canon("6*u"));
  EXPECT_EQ(canon("u - u"), Expr::number(0));
  EXPECT_EQ(canon("u*u"), canon("u^2"));
  EXPECT_EQ(canon("0*u_x + u_t"), canon("u_t"));
  EXPECT_EQ(canon("2*(u + v)"), canon("2*u + 2*v"));
  EXPECT_EQ(canon("u/2"), canon("0.5*u"));
  EXPECT_EQ(canon("-(u_t - u_xx)"), canon("u_xx - u_t"));
}

TEST(Canonicalize, IdempotentOnRandomTrees) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 3000; ++i) {
    Expr t = oracle::random_tree(rng, 14);
    ASSERT_TRUE(well_formed(t));
    Expr once = canonicalize(t);
    ASSERT_TRUE(well_formed(once)) << to_prefix(t);
    ASSERT_EQ(canonicalize(once), once) << to_prefix(t);
  }
}

TEST(Prefix, RoundTrip) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 2000; ++i) {
    Expr t = oracle::random_tree(rng, 16);
    ASSERT_EQ(from_prefix(to_prefix(t)), t) << to_prefix(t);
  }
  EXPECT_EQ(to_prefix(canon("u_t - 0.1*u_xx")), "(+ (dt 1 u) (* -0.1 (dx x 2 u)))");
}

TEST(Prefix, Errors) {
  EXPECT_THROW(from_prefix("(+ u)"), SyntaxError);
  EXPECT_THROW(from_prefix("(dt 0 u)"), SyntaxError);
  EXPECT_THROW(from_prefix("(erf u)"), UnknownSymbol);
  EXPECT_THROW(from_prefix("u v"), SyntaxError);
  EXPECT_THROW(from_prefix("(+ u v"), SyntaxError);
}

TEST(Infix, RendersParseableText) {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 1000; ++i) {
    Expr t = canonicalize(oracle::random_tree(rng, 12));
    std::string text = to_infix(t);
    if (text.find("D[") != std::string::npos) continue;  // derivative of a compound operand
    ASSERT_EQ(canonicalize(parse(text)), t) << text;
  }
}

TEST(NodeCount, Basics) {
  EXPECT_EQ(node_count(Expr::variable("u")), 1u);
  EXPECT_EQ(node_count(Expr::sum({Expr::variable("u"), Expr::variable("v")})), 3u);
  // sum, dt, u, product, -0.1, dxx, u
  EXPECT_EQ(node_count(canon("u_t - 0.1*u_xx")), 7u);
}

TEST(Assignment, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> dim(1, 5), val(0, 6);
  for (int trial = 0; trial < 500; ++trial) {
    std::size_t r = static_cast<std::size_t>(dim(rng)), c = static_cast<std::size_t>(dim(rng));
    std::vector<std::vector<double>> w(r, std::vector<double>(c));
    for (auto& row : w)
      for (auto& x : row) x = val(rng);
    ASSERT_DOUBLE_EQ(max_weight_assignment(w), oracle::assignment(w));
  }
}

TEST(SymScore, IdenticalIsOne) {
  Expr e = canon("u_t + u*u_x - 0.01*u_xx");
  EXPECT_EQ(tree_match_score(e, e), 1.0);
}

TEST(SymScore, HeatVersusWave) {
  Expr heat = canon("u_t - 0.1*u_xx");
  Expr wave = canon("u_tt - 0.1*u_xx");
  // Frozen from the brute-force oracle: every node but the time derivative.
  EXPECT_EQ(oracle::best_alignment(heat, wave), 6u);
  EXPECT_DOUBLE_EQ(tree_match_score(heat, wave), 6.0 / 7.0);
}

TEST(SymScore, SignFlipIsDetected) {
  double s = tree_match_score(canon("u_t + 0.1*u_xx"), canon("u_t - 0.1*u_xx"));
  EXPECT_LT(s, 1.0);
  EXPECT_DOUBLE_EQ(s, 6.0 / 7.0);
}

TEST(SymScore, CoefficientTolerance) {
  EXPECT_EQ(tree_match_score(canon("u_t - 0.1*u_xx"), canon("u_t - 0.10000000000001*u_xx")), 1.0);
  EXPECT_LT(tree_match_score(canon("u_t - 0.1*u_xx"), canon("u_t - 0.1000001*u_xx")), 1.0);
}

TEST(SymScore, NotationCorpusScoresOne) {
  std::ifstream in(std::string(PINNPIPE_DATA_DIR) + "/notation_pairs.json");
  ASSERT_TRUE(in);
  const auto pairs = nlohmann::json::parse(in);
  ASSERT_EQ(pairs.size(), 40u);
  for (const auto& p : pairs) {
    const auto a = p.at(0).get<std::string>(), b = p.at(1).get<std::string>();
    EXPECT_EQ(tree_match_score(canon(a), canon(b)), 1.0) << a << " | " << b;
  }
}

// Canonicalization keeps the overall sign of a residual.
TEST(SymScore, NegatedResidualIsNotIdentical) {
  EXPECT_LT(tree_match_score(canon("-(u_xx + u_yy) - 1"), canon("u_xx + u_yy + 1")), 1.0);
}

TEST(SymScore, SymmetricBoundedAndMatchesOracleOnRandomPairs) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1500; ++i) {
    Expr a = canonicalize(oracle::random_tree(rng, 12));
    Expr b = canonicalize(oracle::random_tree(rng, 12));
    double ab = tree_match_score(a, b);
    ASSERT_EQ(ab, tree_match_score(b, a));
    ASSERT_GE(ab, 0.0);
    ASSERT_LE(ab, 1.0);
    ASSERT_EQ(common_subforest_size(a, b), oracle::best_alignment(a, b)) << to_prefix(a) << " | " << to_prefix(b);
    ASSERT_EQ(ab == 1.0, a == b) << to_prefix(a) << " | " << to_prefix(b);
  }
}

// Full pair sweep to 12 nodes runs in the acceptance binary; 10 keeps this fast.
TEST(SymScore, MatchesOracleOnEveryPairUpToTenNodes) {
  for (const auto& al : oracle::sweep_alphabets()) {
    const auto r = oracle::exhaustive_sweep(al, 10);
    EXPECT_GT(r.pairs, 100000u) << al.name;
    EXPECT_EQ(r.mismatches, 0u) << al.name << ": " << r.first_mismatch;
  }
}

TEST(SymScore, CanonicalEnumerationIsDuplicateFree) {
  for (const auto& al : oracle::sweep_alphabets()) {
    const auto by_size = oracle::canonical_trees_up_to(al, 7);
    std::set<std::string> seen;
    for (std::size_t n = 1; n < by_size.size(); ++n)
      for (const auto& e : by_size[n]) {
        ASSERT_EQ(node_count(e), n);
        ASSERT_TRUE(seen.insert(to_prefix(e)).second) << to_prefix(e);
      }
  }
  // Size 3 over {u, 2} and {dt, sin}, counted by hand: sin(dt u), dt(sin u),
  // sin(sin u), u^u, u^2, 2^u, 2+u, 2*u. dt(dt u) folds to a second derivative
  // and every other shape folds to a constant or a smaller tree.
  EXPECT_EQ(oracle::canonical_trees_up_to(oracle::sweep_alphabets()[1], 3)[3].size(), 8u);
}

TEST(Pde, JsonRoundTrip) {
  CanonicalPde p = pde_from_json_text(R"j({
    "residual": "(+ (dt 1 u) (* -0.1 (dx x 2 u)))",
    "bc": [{"kind": "dirichlet", "axis": 1, "side": "both", "value": "0"}],
    "ic": "(sin (* (const pi) x))",
    "domain": {"dims": 1, "extents": [[0, 1]], "time": [0, 1]},
    "metadata": {"linear": true, "max_order": 2}
  })j");
  EXPECT_TRUE(p.meta.linear);
  EXPECT_EQ(p.meta.max_order, 2);
  EXPECT_TRUE(p.time_dependent());
  CanonicalPde q = pde_from_json(to_json(p));
  EXPECT_EQ(to_json(p).dump(), to_json(q).dump());
}

TEST(Pde, InfixEquationObject) {
  CanonicalPde p = pde_from_json_text(R"j({"equation": "u_t + u*u_x = 0.01*u_xx", "ic": "-sin(pi*x)",
                                          "domain": {"dims": 1, "extents": [[-1, 1]]}})j");
  EXPECT_FALSE(p.meta.linear);
  EXPECT_EQ(p.residual, canon("u_t + u*u_x - 0.01*u_xx"));
}

TEST(Pde, RejectsInconsistentMetadata) {
  const char* bad[] = {
      R"j({"residual": "(dx x 2 u)", "metadata": {"max_order": 3}})j",
      R"j({"residual": "(dx x 2 u)", "metadata": {"linear": false}})j",
      R"j({"residual": "(dx x 2 u)", "metadata": {"Re": -1}})j",
      R"j({"residual": "(dx x 2"})j",
      R"j({"residual": "u", "bc": [{"kind": "mixed"}]})j",
      "not json",
  };
  for (const char* text : bad) EXPECT_THROW(pde_from_json_text(text), PdeFormatError) << text;
}

TEST(Pde, Linearity) {
  EXPECT_TRUE(is_linear(canon("u_t - u_xx + sin(x)")));
  EXPECT_TRUE(is_linear(canon("u_t - x*u_xx")));
  EXPECT_FALSE(is_linear(canon("u_t + u*u_x")));
  EXPECT_FALSE(is_linear(canon("u_xx + exp(u)")));
  EXPECT_FALSE(is_linear(canon("u_t + u_x^2")));
}
