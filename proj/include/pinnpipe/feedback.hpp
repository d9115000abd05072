#pragma once

// Quality metrics, overall score, error localization and the accept/revert
// rule.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"
#include "pinnpipe/trainer.hpp"

namespace pinnpipe {

struct FeedbackConfig {
  double tau = 1e-3;
  double eps = 1e-8;
  double kappa = 1e2;
  double alpha_rob = 0.5;
  std::array<double, 4> weights{0.25, 0.25, 0.25, 0.25};  // conv, acc, comp, rob
  // "reciprocal": 1/(1+mse). "minmax": (max - mse)/(max - min) over a comparison set.
  std::string accuracy = "reciprocal";
  bool invert_complexity = true;
  std::size_t max_params = 0;  // 0: first network executed in the run
  std::optional<int> t_min;    // default 1
  std::optional<int> t_max;    // default: configured steps
};

inline void validate_weights(const std::array<double, 4>& w) {
  double s = 0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw WeightsInvalid("score weights must be nonnegative");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw WeightsInvalid("score weights must sum to 1");
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// First step whose loss is at most tau, or t_max when none is.
inline int convergence_time(const LossTrace& trace, double tau, int t_max) {
  for (const auto& r : trace.records)
    if (r.loss <= tau) return r.t;
  return t_max;
}

inline double convergence_metric(int t_conv, int t_min, int t_max) {
  if (!(t_min < t_max)) throw ConfigInvalid("T_min must be below T_max");
  return std::clamp(static_cast<double>(t_max - t_conv) / static_cast<double>(t_max - t_min), 0.0, 1.0);
}

inline double convergence_metric(const LossTrace& trace, double tau, int t_min, int t_max) {
  return convergence_metric(convergence_time(trace, tau, t_max), t_min, t_max);
}

struct Accuracy {
  double m_acc = 0.0;  // -mse
  double normalized = 0.0;
};

inline Accuracy accuracy_metric(double mse) {
  if (!std::isfinite(mse) || mse < 0) throw Error("MSE must be finite and nonnegative");
  return {-mse, 1.0 / (1.0 + mse)};
}

/// Min-max alternative over a comparison set; a degenerate set scores 1.
inline double accuracy_minmax(double mse, double mse_min, double mse_max) {
  if (!(mse_max > mse_min)) return 1.0;
  return std::clamp((mse_max - mse) / (mse_max - mse_min), 0.0, 1.0);
}

struct Complexity {
  double m_comp = 0.0;  // params / max
  double normalized = 0.0;
};

inline Complexity complexity_metric(std::size_t params, std::size_t max_params, bool invert = true) {
  if (params == 0 || params > max_params) throw Error("parameter count must lie in (0, max_params]");
  const double r = static_cast<double>(params) / static_cast<double>(max_params);
  return {r, invert ? 1.0 - r : r};
}

struct Robustness {
  double m_smooth = 0.0;
  double m_grad = 0.0;
  double normalized = 0.0;
};

/// Population statistics: m_smooth = 1 - Std(dL)/Mean(L), clamped.
inline double smoothness(const std::vector<double>& losses) {
  if (losses.size() < 2) throw DegenerateTrace("robustness needs at least two steps");
  double mean = 0;
  for (double l : losses) mean += l;
  mean /= static_cast<double>(losses.size());
  if (!(mean > 0.0)) throw DegenerateTrace("mean loss is zero");
  std::vector<double> d;
  for (std::size_t i = 1; i < losses.size(); ++i) d.push_back(losses[i] - losses[i - 1]);
  double dm = 0;
  for (double v : d) dm += v;
  dm /= static_cast<double>(d.size());
  double var = 0;
  for (double v : d) var += (v - dm) * (v - dm);
  var /= static_cast<double>(d.size());
  return std::clamp(1.0 - std::sqrt(var) / mean, 0.0, 1.0);
}

inline Robustness robustness_metric(const LossTrace& trace, std::size_t d, double eps, double kappa, double alpha_rob) {
  if (trace.records.size() < 2) throw DegenerateTrace("robustness needs at least two steps");
  if (d == 0) throw DegenerateTrace("parameter count is zero");
  std::vector<double> losses;
  for (const auto& r : trace.records) losses.push_back(r.loss);
  Robustness out;
  out.m_smooth = smoothness(losses);
  const double g = trace.records.back().grad_norm / static_cast<double>(d);
  out.m_grad = (g >= eps && g <= kappa) ? 1.0 : 0.0;
  out.normalized = alpha_rob * out.m_smooth + (1.0 - alpha_rob) * out.m_grad;
  return out;
}

inline double overall_score(const std::array<double, 4>& m, const std::array<double, 4>& w) {
  validate_weights(w);
  return w[0] * m[0] + w[1] * m[1] + w[2] * m[2] + w[3] * m[3];
}

struct QualityScore {
  double conv = 0, acc = 0, comp = 0, rob = 0;
  std::array<double, 4> weights{0.25, 0.25, 0.25, 0.25};
  double S = 0;
  // raw inputs
  int t_conv = 0;
  double m_conv = 0;  // 1 / T_conv, reported only
  double mse = 0;
  std::size_t params = 0;
  double m_smooth = 0;
  double m_grad = 0;
};

/// Scores one executed run.
inline QualityScore score_run(const LossTrace& trace, double mse, std::size_t params, std::size_t max_params, int steps,
                              const FeedbackConfig& cfg) {
  QualityScore q;
  q.weights = cfg.weights;
  const int t_min = cfg.t_min.value_or(1);
  const int t_max = cfg.t_max.value_or(steps);
  q.t_conv = convergence_time(trace, cfg.tau, t_max);
  q.m_conv = 1.0 / q.t_conv;
  q.conv = convergence_metric(q.t_conv, t_min, t_max);
  q.mse = mse;
  q.acc = accuracy_metric(mse).normalized;
  q.params = params;
  q.comp = complexity_metric(params, max_params, cfg.invert_complexity).normalized;
  auto rob = robustness_metric(trace, params, cfg.eps, cfg.kappa, cfg.alpha_rob);
  q.m_smooth = rob.m_smooth;
  q.m_grad = rob.m_grad;
  q.rob = rob.normalized;
  q.S = overall_score({q.conv, q.acc, q.comp, q.rob}, cfg.weights);
  return q;
}

struct RunMeasurement {
  LossTrace trace;
  double mse = 0;
  std::size_t params = 0;
};

/// Scores a comparison set: T_min/T_max are the fastest and slowest
/// convergence times in the set (unless configured), max_params the largest
/// network, and accuracy min-max normalized when cfg.accuracy == "minmax".
inline std::vector<QualityScore> score_candidates(const std::vector<RunMeasurement>& runs, int steps,
                                                  const FeedbackConfig& cfg) {
  if (runs.empty()) return {};
  const int t_cap = cfg.t_max.value_or(steps);
  int fastest = t_cap, slowest = 0;
  std::size_t max_params = cfg.max_params;
  double mse_min = runs.front().mse, mse_max = runs.front().mse;
  for (const auto& r : runs) {
    const int t = convergence_time(r.trace, cfg.tau, t_cap);
    fastest = std::min(fastest, t);
    slowest = std::max(slowest, t);
    if (cfg.max_params == 0) max_params = std::max(max_params, r.params);
    mse_min = std::min(mse_min, r.mse);
    mse_max = std::max(mse_max, r.mse);
  }
  FeedbackConfig c = cfg;
  c.t_min = cfg.t_min.value_or(fastest);
  c.t_max = cfg.t_max.value_or(slowest);
  if (*c.t_min >= *c.t_max) {
    c.t_min = cfg.t_min.value_or(1);
    c.t_max = cfg.t_max.value_or(steps);
  }
  std::vector<QualityScore> out;
  for (const auto& r : runs) {
    QualityScore q = score_run(r.trace, r.mse, r.params, max_params, steps, c);
    if (cfg.accuracy == "minmax") {
      q.acc = accuracy_minmax(r.mse, mse_min, mse_max);
      q.S = overall_score({q.conv, q.acc, q.comp, q.rob}, cfg.weights);
    } else if (cfg.accuracy != "reciprocal") {
      throw ConfigInvalid("unknown accuracy normalization '" + cfg.accuracy + "'");
    }
    out.push_back(q);
  }
  return out;
}

inline nlohmann::json to_json(const QualityScore& q) {
  return {{"m_conv_hat", q.conv},
          {"m_acc_hat", q.acc},
          {"m_comp_hat", q.comp},
          {"m_rob_hat", q.rob},
          {"weights", q.weights},
          {"S", q.S},
          {"raw", {{"T_conv", q.t_conv}, {"m_conv", q.m_conv}, {"mse", q.mse}, {"params", q.params},
                   {"m_smooth", q.m_smooth}, {"m_grad", q.m_grad}}}};
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

inline constexpr const char* kPdeAgent = "PDE-agent";
inline constexpr const char* kPinnAgent = "PINN-agent";

struct Directive {
  std::string target;     // module kind or an upstream agent
  std::string reason;
  std::string signature;  // id of the matched table row
};

inline nlohmann::json to_json(const Directive& d) {
  return {{"target", d.target}, {"reason", d.reason}, {"signature", d.signature}};
}

struct Signature {
  std::string id;
  std::regex pattern;
  std::string target;  // empty: taken from the first capture group
};

inline const std::vector<Signature>& signature_table() {
  using std::regex;
  static const auto flags = regex::icase | regex::ECMAScript;
  static const std::vector<Signature> table{
      {"module-tag",
       regex(R"((?:in module|missing kind:)\s+(model|pde_loss|preprocessing|training_loop|validation|main)\b)", flags), ""},
      {"shape", regex(R"(shape|dimension)", flags), "model"},
      {"undefined-symbol", regex(R"(undefined (derivative|symbol|residual)|loss verification|residual block)", flags), "pde_loss"},
      {"io", regex(R"(\bfile\b|\bI/?O\b|\bpath\b|collocation|sampling)", flags), "preprocessing"},
      {"non-finite", regex(R"(non-finite|\bnan\b|\binf\b|diverged|optimizer|learning rate)", flags), "training_loop"},
      {"metric", regex(R"(metric)", flags), "validation"},
      {"entry-point", regex(R"(entry point|argument)", flags), "main"},
      {"unsupported-family", regex(R"(unsupported (PDE|architecture) family)", flags), kPinnAgent},
      {"unparseable-residual", regex(R"(unparseable residual)", flags), kPdeAgent},
  };
  return table;
}

/// First match over the signature table; unmatched text goes to main.
inline Directive localize_error(const std::string& text) {
  for (const auto& s : signature_table()) {
    std::smatch m;
    if (std::regex_search(text, m, s.pattern)) {
      std::string target = s.target.empty() ? m[1].str() : s.target;
      if (s.target.empty()) std::transform(target.begin(), target.end(), target.begin(), ::tolower);
      return {target, text, s.id};
    }
  }
  return {"main", "unclassified: " + text, "unclassified"};
}

enum class Decision { Accept, Revert };

inline std::string to_string(Decision d) { return d == Decision::Accept ? "accept" : "revert"; }

/// Strict improvement is required; ties revert.
inline Decision refine_decision(double s, std::optional<double> previous) {
  if (!std::isfinite(s)) throw Error("score must be finite");
  if (!previous || s > *previous) return Decision::Accept;
  return Decision::Revert;
}

inline constexpr std::array<const char*, 4> kMetricSignatures{"metric-conv", "metric-acc", "metric-comp", "metric-rob"};

/// Directive for a successful but improvable run. Targets the weakest metric
/// whose signature is not in `skip` (ties in conv, acc, comp, rob order);
/// with everything skipped, the weakest metric overall.
///   conv: training_loop, raise the learning rate
///   acc:  preprocessing, more collocation points
///   comp: model, shrink the network
///   rob:  training_loop, lower the learning rate
inline Directive metric_directive(const QualityScore& q, const std::set<std::string>& skip = {}) {
  const std::array<double, 4> m{q.conv, q.acc, q.comp, q.rob};
  const std::array<const char*, 4> names{"m_conv_hat", "m_acc_hat", "m_comp_hat", "m_rob_hat"};
  const std::array<const char*, 4> actions{"raise the learning rate", "use more collocation points", "shrink the network",
                                           "lower the learning rate"};
  auto pick = [&](bool honor_skip) -> std::optional<std::size_t> {
    std::optional<std::size_t> k;
    for (std::size_t i = 0; i < 4; ++i) {
      if (honor_skip && skip.count(kMetricSignatures[i])) continue;
      if (!k || m[i] < m[*k]) k = i;
    }
    return k;
  };
  const std::size_t k = pick(true).value_or(*pick(false));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", m[k]);
  const std::array<const char*, 4> targets{"training_loop", "preprocessing", "model", "training_loop"};
  return {targets[k], std::string("lowest metric ") + names[k] + " = " + buf + ": " + actions[k],
          kMetricSignatures[k]};
}

}  // namespace pinnpipe
