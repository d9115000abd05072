#pragma once

// Structured PDE summaries and the semantic consistency score.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"
#include "pinnpipe/pde.hpp"

namespace pinnpipe {

/// Closed tag vocabulary. Bump kTagVocabularyVersion when it changes.
inline constexpr int kTagVocabularyVersion = 1;
inline const std::vector<std::string>& tag_vocabulary() {
  static const std::vector<std::string> v{"diffusion",          "anti-diffusion", "wave",     "elliptic",
                                          "advection-linear",   "advection-nonlinear",
                                          "reaction",           "dispersion",     "biharmonic"};
  return v;
}

struct SemanticSummary {
  std::set<std::string> tags;
  int dims = 1;
  int order = 0;
  bool linear = true;
  bool forcing = false;
  std::vector<std::string> bc_kinds;  // sorted multiset
  std::string domain_class;
  std::string text;
  int vocabulary = kTagVocabularyVersion;
};

inline bool operator==(const SemanticSummary& a, const SemanticSummary& b) {
  return a.tags == b.tags && a.dims == b.dims && a.order == b.order && a.linear == b.linear &&
         a.forcing == b.forcing && a.bc_kinds == b.bc_kinds && a.domain_class == b.domain_class &&
         a.text == b.text && a.vocabulary == b.vocabulary;
}

namespace detail {

struct TermShape {
  double coefficient = 1.0;
  int time_order = 0;
  int spatial_order = 0;   // highest spatial order among derivative factors
  int field_degree = 0;    // degree in the unknown fields
  int derivative_factors = 0;
};

inline void shape_of(const Expr& e, const std::set<std::string>& fields, TermShape& s) {
  if (is_derivative(e.kind)) {
    int t = 0, x = 0;
    const Expr* cur = &e;
    while (is_derivative(cur->kind)) {
      (cur->kind == NodeKind::TimeDerivative ? t : x) += cur->order;
      cur = &cur->children[0];
    }
    s.time_order = std::max(s.time_order, t);
    s.spatial_order = std::max(s.spatial_order, x);
    s.derivative_factors += 1;
    s.field_degree += 1;
    return;
  }
  switch (e.kind) {
    case NodeKind::Number:
      s.coefficient *= e.value;
      return;
    case NodeKind::Variable:
      if (fields.count(e.label)) s.field_degree += 1;
      return;
    case NodeKind::Product:
      for (const auto& c : e.children) shape_of(c, fields, s);
      return;
    default:
      s.field_degree += field_degree(e, fields);
      return;
  }
}

inline std::string render_summary(const SemanticSummary& s) {
  std::ostringstream out;
  out << (s.linear ? "linear" : "nonlinear") << " PDE of order " << s.order << " in " << s.dims
      << " spatial dimension" << (s.dims == 1 ? "" : "s") << " on a " << s.domain_class << " domain";
  out << "; operators:";
  if (s.tags.empty()) out << " none";
  for (const auto& t : s.tags) out << ' ' << t;
  out << "; forcing " << (s.forcing ? "present" : "absent");
  out << "; boundary conditions:";
  if (s.bc_kinds.empty()) out << " none";
  for (const auto& k : s.bc_kinds) out << ' ' << k;
  return out.str();
}

}  // namespace detail

/// Summary of `pde` built from structure only, so renaming variables or
/// axes leaves it unchanged.
inline SemanticSummary summarize(const CanonicalPde& pde) {
  SemanticSummary s;
  const auto fields = field_variables(pde.residual);
  const auto terms = residual_terms(pde.residual);
  std::vector<detail::TermShape> shapes;
  for (const auto& t : terms) {
    detail::TermShape sh;
    detail::shape_of(t, fields, sh);
    shapes.push_back(sh);
  }
  int time_order = 0;
  double time_sign = 1.0;
  for (const auto& sh : shapes) {
    if (sh.time_order > time_order) {
      time_order = sh.time_order;
      time_sign = sh.coefficient < 0 ? -1.0 : 1.0;
    }
  }
  for (const auto& sh : shapes) {
    if (sh.field_degree == 0) continue;  // forcing
    if (sh.time_order > 0 && sh.spatial_order == 0) continue;
    const bool extra_fields = sh.field_degree > sh.derivative_factors || sh.derivative_factors > 1;
    switch (sh.spatial_order) {
      case 0:
        s.tags.insert("reaction");
        break;
      case 1:
        s.tags.insert(extra_fields ? "advection-nonlinear" : "advection-linear");
        break;
      case 2:
        if (time_order >= 2) s.tags.insert("wave");
        else if (time_order == 0) s.tags.insert("elliptic");
        else s.tags.insert(sh.coefficient * time_sign < 0 ? "diffusion" : "anti-diffusion");
        break;
      case 3:
        s.tags.insert("dispersion");
        break;
      default:
        s.tags.insert("biharmonic");
        break;
    }
  }
  s.dims = pde.domain.dims;
  s.order = pde.meta.max_order;
  s.linear = pde.meta.linear;
  s.forcing = has_forcing(pde.residual);
  for (const auto& b : pde.boundary) s.bc_kinds.push_back(to_string(b.kind));
  std::sort(s.bc_kinds.begin(), s.bc_kinds.end());
  s.domain_class = to_string(pde.domain.geometry) + "/" + to_string(pde.domain.discretization);
  s.text = detail::render_summary(s);
  return s;
}

inline nlohmann::json to_json(const SemanticSummary& s) {
  return {{"tags", std::vector<std::string>(s.tags.begin(), s.tags.end())},
          {"dims", s.dims},
          {"order", s.order},
          {"linear", s.linear},
          {"forcing", s.forcing},
          {"bc_kinds", s.bc_kinds},
          {"domain_class", s.domain_class},
          {"text", s.text}};
}

struct BaselineWeights {
  double tags = 0.5;
  double linearity = 0.2;
  double order = 0.2;
  double dims = 0.1;
};

inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& x : a) common += b.count(x);
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

class SimilarityProvider {
 public:
  virtual ~SimilarityProvider() = default;
  virtual double similarity(const SemanticSummary& a, const SemanticSummary& b) = 0;
  virtual std::string name() const = 0;
};

class BaselineSimilarity : public SimilarityProvider {
 public:
  explicit BaselineSimilarity(BaselineWeights w = {}) : w_(w) {}

  double similarity(const SemanticSummary& a, const SemanticSummary& b) override {
    double s = w_.tags * jaccard(a.tags, b.tags) + w_.linearity * (a.linear == b.linear ? 1.0 : 0.0) +
               w_.order * (a.order == b.order ? 1.0 : 0.0) + w_.dims * (a.dims == b.dims ? 1.0 : 0.0);
    return std::clamp(s, 0.0, 1.0);
  }
  std::string name() const override { return "baseline"; }

 private:
  BaselineWeights w_;
};

/// Maps texts to embedding vectors; may throw ProviderUnavailable.
using EmbeddingFn = std::function<std::vector<std::vector<double>>(const std::vector<std::string>&)>;

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw DegenerateVector("embedding vectors differ in length or are empty");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) throw DegenerateVector("zero-norm embedding");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Cosine similarity of embeddings of the free-text renderings, clamped to [0,1].
class EmbeddingSimilarity : public SimilarityProvider {
 public:
  explicit EmbeddingSimilarity(EmbeddingFn embed) : embed_(std::move(embed)) {}

  double similarity(const SemanticSummary& a, const SemanticSummary& b) override {
    auto v = embed_({a.text, b.text});
    if (v.size() != 2) throw ProviderUnavailable("embedding provider returned " + std::to_string(v.size()) + " vectors");
    return std::clamp(cosine(v[0], v[1]), 0.0, 1.0);
  }
  std::string name() const override { return "embedding"; }

 private:
  EmbeddingFn embed_;
};

inline double sem_score(const SemanticSummary& a, const SemanticSummary& b, SimilarityProvider& provider) {
  if (a.vocabulary != b.vocabulary) throw Error("summaries come from different tag vocabularies");
  return provider.similarity(a, b);
}

inline double sem_score(const SemanticSummary& a, const SemanticSummary& b) {
  BaselineSimilarity base;
  return sem_score(a, b, base);
}

}  // namespace pinnpipe
