#pragma once

// Candidate formulation, template validation and consensus voting.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"
#include "pinnpipe/match.hpp"
#include "pinnpipe/parser.hpp"
#include "pinnpipe/pde.hpp"
#include "pinnpipe/provider.hpp"
#include "pinnpipe/semantic.hpp"

namespace pinnpipe {

struct RawCandidate {
  std::string trajectory;   // provider text as returned
  std::string normalized;   // extracted equation block
  std::optional<CanonicalPde> pde;
  std::string rejection;    // empty when pde is set and valid
};

struct CandidateSet {
  std::vector<RawCandidate> raw;
  std::vector<std::size_t> surviving;      // indices into raw
  std::vector<std::vector<double>> scores;  // M x M over surviving
  double alpha = 0.6;
  std::optional<std::size_t> chosen;       // index into surviving
};

inline std::string formulation_prompt(const std::string& description, int k, int K,
                                      const std::string& diagnostic = "") {
  std::string p = "Formulate the governing PDE for the task below. Reason step by step, then give the final answer as a "
         "fenced block holding a JSON object with \"equation\" (infix, residual or equation form), \"bc\", \"ic\", "
         "\"domain\" and \"metadata\".\nSample " +
         std::to_string(k + 1) + "/" + std::to_string(K) + "\nTask:\n" + description;
  if (!diagnostic.empty()) p += "\nA previous formulation failed downstream with: " + diagnostic;
  return p;
}

/// Text of the last ``` fenced block of `text` (language tag dropped), or
/// nullopt when there is none.
inline std::optional<std::string> last_fenced_block(const std::string& text) {
  std::optional<std::string> found;
  std::size_t pos = 0;
  while (true) {
    auto open = text.find("```", pos);
    if (open == std::string::npos) break;
    auto line_end = text.find('\n', open + 3);
    if (line_end == std::string::npos) break;
    auto close = text.find("```", line_end + 1);
    if (close == std::string::npos) break;
    found = text.substr(line_end + 1, close - line_end - 1);
    pos = close + 3;
  }
  if (found) {
    auto b = found->find_first_not_of(" \t\r\n");
    auto e = found->find_last_not_of(" \t\r\n");
    found = b == std::string::npos ? std::string() : found->substr(b, e - b + 1);
  }
  return found;
}

/// PDE from a bare infix equation: spatial axes are the derivative axes in
/// name order, unit extents, Cartesian rectilinear domain.
inline CanonicalPde pde_from_equation(const std::string& equation) {
  CanonicalPde pde;
  pde.residual = parse(equation);
  std::set<std::string> axes;
  collect_spatial_axes(pde.residual, axes);
  if (axes.empty()) axes.insert("x");
  pde.domain.axes.assign(axes.begin(), axes.end());
  pde.domain.dims = static_cast<int>(axes.size());
  pde.domain.extents.assign(axes.size(), {0.0, 1.0});
  normalize(pde);
  return pde;
}

/// Parses a cleaned block: a JSON PDE object, or an infix equation.
inline CanonicalPde parse_candidate_block(const std::string& block) {
  if (!block.empty() && block.front() == '{') return pde_from_json_text(block);
  return pde_from_equation(block);
}

struct TemplateCheck {
  bool valid = true;
  std::string reason;
};

inline TemplateCheck validate_template(const CanonicalPde& pde) {
  if (!well_formed(pde.residual) || !is_canonical(pde.residual)) return {false, "residual not in canonical form"};
  if (pde.residual.kind == NodeKind::Number || field_variables(pde.residual).empty())
    return {false, "empty residual"};
  const int d = pde.domain.dims;
  for (const auto& b : pde.boundary) {
    if (b.axis < 1 || b.axis > d) return {false, "axis out of range"};
  }
  for (int a : pde.domain.periodic_axes)
    if (a < 1 || a > d) return {false, "axis out of range"};
  std::set<std::string> axes;
  collect_spatial_axes(pde.residual, axes);
  for (const auto& a : axes)
    if (pde.domain.axis_index(a) == 0) return {false, "derivative along undeclared axis " + a};
  if (pde.time_dependent() && !pde.initial) return {false, "missing initial condition"};
  return {};
}

/// Samples K completions and cleans and parses each. Parse failures and
/// template rejections stay in the returned list with their reasons.
inline std::vector<RawCandidate> formulate_candidates(const std::string& description, int K,
                                                      CompletionProvider& provider,
                                                      const CompletionParams& params = {},
                                                      const std::string& diagnostic = "") {
  if (K < 1) throw ConfigInvalid("K must be at least 1");
  std::vector<RawCandidate> out;
  bool any_tree = false;
  for (int k = 0; k < K; ++k) {
    RawCandidate c;
    c.trajectory = provider.complete(formulation_prompt(description, k, K, diagnostic), params);
    auto block = last_fenced_block(c.trajectory);
    if (!block) {
      c.rejection = "no fenced equation block";
      out.push_back(std::move(c));
      continue;
    }
    c.normalized = *block;
    try {
      c.pde = parse_candidate_block(c.normalized);
      any_tree = true;
      auto check = validate_template(*c.pde);
      if (!check.valid) c.rejection = check.reason;
    } catch (const Error& e) {
      c.rejection = e.what();
    }
    out.push_back(std::move(c));
  }
  if (!any_tree) throw AllParsesFailed("none of the " + std::to_string(K) + " candidates parsed");
  return out;
}

inline double composite_score(const CanonicalPde& a, const CanonicalPde& b, double alpha,
                              SimilarityProvider& sem_provider) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigInvalid("alpha must lie in [0,1]");
  double sym = alpha > 0.0 ? sym_score(a, b) : 0.0;
  double sem = alpha < 1.0 ? sem_score(summarize(a), summarize(b), sem_provider) : 0.0;
  return alpha * sym + (1.0 - alpha) * sem;
}

inline double composite_score(const CanonicalPde& a, const CanonicalPde& b, double alpha) {
  BaselineSimilarity base;
  return composite_score(a, b, alpha, base);
}

/// Average off-diagonal similarity per row. Each row's values are summed in
/// ascending order so the result does not depend on candidate order.
inline std::vector<double> consensus_averages(const std::vector<std::vector<double>>& S) {
  const std::size_t m = S.size();
  std::vector<double> avg(m, 1.0);
  if (m < 2) return avg;
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> row;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) row.push_back(S[i][j]);
    std::sort(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += v;
    avg[i] = s / static_cast<double>(m - 1);
  }
  return avg;
}

/// Index of the highest average; ties go to the lowest index.
inline std::size_t consensus_argmax(const std::vector<std::vector<double>>& S) {
  if (S.empty()) throw EmptyCandidateSet();
  auto avg = consensus_averages(S);
  std::size_t best = 0;
  for (std::size_t i = 1; i < avg.size(); ++i)
    if (avg[i] > avg[best]) best = i;
  return best;
}

/// Fills the score matrix of the surviving candidates and picks the winner.
inline const CanonicalPde& consensus_select(CandidateSet& set, SimilarityProvider& sem_provider) {
  set.surviving.clear();
  for (std::size_t i = 0; i < set.raw.size(); ++i)
    if (set.raw[i].pde && set.raw[i].rejection.empty()) set.surviving.push_back(i);
  const std::size_t m = set.surviving.size();
  if (m == 0) throw EmptyCandidateSet();
  set.scores.assign(m, std::vector<double>(m, 1.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      double s = composite_score(*set.raw[set.surviving[i]].pde, *set.raw[set.surviving[j]].pde, set.alpha,
                                 sem_provider);
      set.scores[i][j] = set.scores[j][i] = s;
    }
  set.chosen = consensus_argmax(set.scores);
  return *set.raw[set.surviving[*set.chosen]].pde;
}

inline const CanonicalPde& consensus_select(CandidateSet& set) {
  BaselineSimilarity base;
  return consensus_select(set, base);
}

inline nlohmann::json to_json(const CandidateSet& set) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : set.raw) {
    nlohmann::json j{{"normalized", c.normalized}, {"trajectory", c.trajectory}};
    j["pde"] = c.pde ? to_json(*c.pde) : nlohmann::json(nullptr);
    j["rejection"] = c.rejection.empty() ? nlohmann::json(nullptr) : nlohmann::json(c.rejection);
    cands.push_back(std::move(j));
  }
  nlohmann::json out{{"candidates", cands}, {"surviving", set.surviving}, {"scores", set.scores}, {"alpha", set.alpha}};
  out["chosen"] = set.chosen ? nlohmann::json(set.surviving[*set.chosen]) : nlohmann::json(nullptr);
  return out;
}

}  // namespace pinnpipe
