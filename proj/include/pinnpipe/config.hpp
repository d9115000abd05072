#pragma once

// Pipeline configuration: a JSON document with one object per agent plus
// caps and the external runtime. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/code_agent.hpp"
#include "pinnpipe/error.hpp"
#include "pinnpipe/feedback.hpp"
#include "pinnpipe/pinn_agent.hpp"
#include "pinnpipe/provider.hpp"
#include "pinnpipe/trainer.hpp"

namespace pinnpipe {

struct PdeAgentConfig {
  int K = 5;
  double alpha = 0.6;
  CompletionParams params;
};

struct PinnAgentConfig {
  MatchWeights weights;
  FeatureCoefficients coefficients;
  double reuse_threshold = 0.95;
  double refine_rate = 0.0;  // capability update rate; 0 disables it
  std::string history;       // JSONL path, empty for none
  std::string capabilities;  // registry JSON path, empty for the shipped table
};

struct TrainerConfig {
  NetSpec net;  // activation follows the selected architecture
  TrainConfig train;
  int eval_points = 256;
};

struct CapsConfig {
  int max_refinements = 3;
  int hard_cap = 50;
  double target_score = 0.9;
};

struct CodeAgentConfig {
  std::set<ModuleKind> provider_modules;
  double verify_threshold = 0.99;
  std::string target = "builtin";
  CompletionParams params{0.2, 4096};
};

struct RuntimeConfig {
  std::vector<std::string> command;  // bundle dir and trace path are appended
  int timeout_s = 600;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  PdeAgentConfig pde_agent;
  PinnAgentConfig pinn_agent;
  TrainerConfig trainer;
  FeedbackConfig feedback;
  CapsConfig caps;
  CodeAgentConfig code_agent;
  RuntimeConfig runtime;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigInvalid(section + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigInvalid("unknown key '" + k + "' in " + section);
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigInvalid(section + "." + key + " has the wrong type");
  }
}

inline nlohmann::json params_json(const CompletionParams& p) {
  return {{"temperature", p.temperature}, {"max_length", p.max_length}};
}

}  // namespace detail

/// Checks ranges; raises ConfigInvalid or WeightsInvalid.
inline void validate(const PipelineConfig& c) {
  if (c.pde_agent.K < 1) throw ConfigInvalid("pde_agent.K must be at least 1");
  if (!(c.pde_agent.alpha >= 0.0 && c.pde_agent.alpha <= 1.0)) throw ConfigInvalid("pde_agent.alpha must lie in [0,1]");
  const auto& w = c.pinn_agent.weights;
  if (!(w.per > 0 && w.geo > 0 && w.ms > 0)) throw ConfigInvalid("pinn_agent.W must be strictly positive");
  if (!(c.pinn_agent.refine_rate >= 0.0 && c.pinn_agent.refine_rate <= 1.0))
    throw ConfigInvalid("pinn_agent.refine_rate must lie in [0,1]");
  if (c.trainer.net.depth < 1 || c.trainer.net.width < 1) throw ConfigInvalid("trainer depth and width must be positive");
  if (c.trainer.train.steps < 2) throw ConfigInvalid("trainer.steps must be at least 2");
  if (!(c.trainer.train.learning_rate > 0)) throw ConfigInvalid("trainer.learning_rate must be positive");
  if (c.trainer.train.interior < 1 || c.trainer.train.boundary < 1) throw ConfigInvalid("collocation counts must be positive");
  if (!(c.trainer.train.h > 0)) throw ConfigInvalid("trainer.h must be positive");
  if (c.trainer.eval_points < 2) throw ConfigInvalid("trainer.eval_points must be at least 2");
  validate_weights(c.feedback.weights);
  if (c.feedback.accuracy != "reciprocal")
    throw ConfigInvalid("the pipeline scores single runs; feedback.accuracy must be \"reciprocal\"");
  if (!(c.feedback.alpha_rob >= 0 && c.feedback.alpha_rob <= 1)) throw ConfigInvalid("feedback.alpha_rob must lie in [0,1]");
  if (c.caps.max_refinements < 0) throw ConfigInvalid("caps.max_refinements must be nonnegative");
  if (c.caps.hard_cap < 1) throw ConfigInvalid("caps.hard_cap must be positive");
  if (c.code_agent.target != "builtin" && c.code_agent.target != "external")
    throw ConfigInvalid("code_agent.target must be builtin or external");
  if (c.code_agent.target == "external" && c.runtime.command.empty())
    throw ConfigInvalid("the external target needs runtime.command");
  if (c.runtime.timeout_s < 1) throw ConfigInvalid("runtime.timeout_s must be positive");
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read;
  PipelineConfig c;
  check_keys(j, "config", {"seed", "pde_agent", "pinn_agent", "trainer", "feedback", "caps", "code_agent", "runtime"});
  read(j, "seed", c.seed, "config");

  if (j.contains("pde_agent")) {
    const auto& s = j.at("pde_agent");
    check_keys(s, "pde_agent", {"K", "alpha", "temperature", "max_length"});
    read(s, "K", c.pde_agent.K, "pde_agent");
    read(s, "alpha", c.pde_agent.alpha, "pde_agent");
    read(s, "temperature", c.pde_agent.params.temperature, "pde_agent");
    read(s, "max_length", c.pde_agent.params.max_length, "pde_agent");
  }
  if (j.contains("pinn_agent")) {
    const auto& s = j.at("pinn_agent");
    check_keys(s, "pinn_agent", {"W", "reuse_threshold", "coefficients", "refine_rate", "history", "capabilities"});
    if (s.contains("W")) {
      std::vector<double> w;
      read(s, "W", w, "pinn_agent");
      if (w.size() != 3) throw ConfigInvalid("pinn_agent.W must have three entries");
      c.pinn_agent.weights = {w[0], w[1], w[2]};
    }
    read(s, "reuse_threshold", c.pinn_agent.reuse_threshold, "pinn_agent");
    read(s, "refine_rate", c.pinn_agent.refine_rate, "pinn_agent");
    read(s, "history", c.pinn_agent.history, "pinn_agent");
    read(s, "capabilities", c.pinn_agent.capabilities, "pinn_agent");
    if (s.contains("coefficients")) {
      const auto& k = s.at("coefficients");
      check_keys(k, "pinn_agent.coefficients", {"lambda_omega", "lambda_disc", "a", "b", "c", "e", "eta"});
      auto& f = c.pinn_agent.coefficients;
      read(k, "lambda_omega", f.lambda_omega, "pinn_agent.coefficients");
      read(k, "lambda_disc", f.lambda_disc, "pinn_agent.coefficients");
      read(k, "a", f.a, "pinn_agent.coefficients");
      read(k, "b", f.b, "pinn_agent.coefficients");
      read(k, "c", f.c, "pinn_agent.coefficients");
      read(k, "e", f.e, "pinn_agent.coefficients");
      read(k, "eta", f.eta, "pinn_agent.coefficients");
    }
  }
  if (j.contains("trainer")) {
    const auto& s = j.at("trainer");
    check_keys(s, "trainer", {"depth", "width", "steps", "learning_rate", "interior", "boundary", "h", "boundary_weight",
                              "eval_points", "divergence_factor"});
    auto& t = c.trainer;
    read(s, "depth", t.net.depth, "trainer");
    read(s, "width", t.net.width, "trainer");
    read(s, "steps", t.train.steps, "trainer");
    read(s, "learning_rate", t.train.learning_rate, "trainer");
    read(s, "interior", t.train.interior, "trainer");
    read(s, "boundary", t.train.boundary, "trainer");
    read(s, "h", t.train.h, "trainer");
    read(s, "boundary_weight", t.train.boundary_weight, "trainer");
    read(s, "eval_points", t.eval_points, "trainer");
    read(s, "divergence_factor", t.train.divergence_factor, "trainer");
  }
  if (j.contains("feedback")) {
    const auto& s = j.at("feedback");
    check_keys(s, "feedback", {"tau", "eps", "kappa", "alpha_rob", "weights", "accuracy", "invert_complexity",
                               "max_params", "t_min", "t_max"});
    auto& f = c.feedback;
    read(s, "tau", f.tau, "feedback");
    read(s, "eps", f.eps, "feedback");
    read(s, "kappa", f.kappa, "feedback");
    read(s, "alpha_rob", f.alpha_rob, "feedback");
    read(s, "accuracy", f.accuracy, "feedback");
    read(s, "invert_complexity", f.invert_complexity, "feedback");
    read(s, "max_params", f.max_params, "feedback");
    if (s.contains("weights")) {
      std::vector<double> w;
      read(s, "weights", w, "feedback");
      if (w.size() != 4) throw ConfigInvalid("feedback.weights must have four entries");
      f.weights = {w[0], w[1], w[2], w[3]};
    }
    if (s.contains("t_min") && !s.at("t_min").is_null()) f.t_min = s.at("t_min").get<int>();
    if (s.contains("t_max") && !s.at("t_max").is_null()) f.t_max = s.at("t_max").get<int>();
  }
  if (j.contains("caps")) {
    const auto& s = j.at("caps");
    check_keys(s, "caps", {"max_refinements", "hard_cap", "target_score"});
    read(s, "max_refinements", c.caps.max_refinements, "caps");
    read(s, "hard_cap", c.caps.hard_cap, "caps");
    read(s, "target_score", c.caps.target_score, "caps");
  }
  if (j.contains("code_agent")) {
    const auto& s = j.at("code_agent");
    check_keys(s, "code_agent", {"provider_modules", "verify_threshold", "target", "temperature", "max_length"});
    std::vector<std::string> kinds;
    read(s, "provider_modules", kinds, "code_agent");
    for (const auto& k : kinds) {
      auto kind = module_kind_from(k);
      if (!kind) throw ConfigInvalid("unknown module kind '" + k + "' in code_agent.provider_modules");
      c.code_agent.provider_modules.insert(*kind);
    }
    read(s, "verify_threshold", c.code_agent.verify_threshold, "code_agent");
    read(s, "target", c.code_agent.target, "code_agent");
    read(s, "temperature", c.code_agent.params.temperature, "code_agent");
    read(s, "max_length", c.code_agent.params.max_length, "code_agent");
  }
  if (j.contains("runtime")) {
    const auto& s = j.at("runtime");
    check_keys(s, "runtime", {"command", "timeout_s"});
    read(s, "command", c.runtime.command, "runtime");
    read(s, "timeout_s", c.runtime.timeout_s, "runtime");
  }
  validate(c);
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigInvalid("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Full snapshot; config_from_json(to_json(c)) reproduces c.
inline nlohmann::json to_json(const PipelineConfig& c) {
  std::vector<std::string> kinds;
  for (auto k : c.code_agent.provider_modules) kinds.push_back(to_string(k));
  const auto& f = c.feedback;
  const auto& k = c.pinn_agent.coefficients;
  return {
      {"seed", c.seed},
      {"pde_agent",
       {{"K", c.pde_agent.K},
        {"alpha", c.pde_agent.alpha},
        {"temperature", c.pde_agent.params.temperature},
        {"max_length", c.pde_agent.params.max_length}}},
      {"pinn_agent",
       {{"W", {c.pinn_agent.weights.per, c.pinn_agent.weights.geo, c.pinn_agent.weights.ms}},
        {"reuse_threshold", c.pinn_agent.reuse_threshold},
        {"coefficients",
         {{"lambda_omega", k.lambda_omega}, {"lambda_disc", k.lambda_disc}, {"a", k.a}, {"b", k.b}, {"c", k.c},
          {"e", k.e}, {"eta", k.eta}}},
        {"refine_rate", c.pinn_agent.refine_rate},
        {"history", c.pinn_agent.history},
        {"capabilities", c.pinn_agent.capabilities}}},
      {"trainer",
       {{"depth", c.trainer.net.depth},
        {"width", c.trainer.net.width},
        {"steps", c.trainer.train.steps},
        {"learning_rate", c.trainer.train.learning_rate},
        {"interior", c.trainer.train.interior},
        {"boundary", c.trainer.train.boundary},
        {"h", c.trainer.train.h},
        {"boundary_weight", c.trainer.train.boundary_weight},
        {"eval_points", c.trainer.eval_points},
        {"divergence_factor", c.trainer.train.divergence_factor}}},
      {"feedback",
       {{"tau", f.tau},
        {"eps", f.eps},
        {"kappa", f.kappa},
        {"alpha_rob", f.alpha_rob},
        {"weights", f.weights},
        {"accuracy", f.accuracy},
        {"invert_complexity", f.invert_complexity},
        {"max_params", f.max_params},
        {"t_min", f.t_min ? nlohmann::json(*f.t_min) : nlohmann::json(nullptr)},
        {"t_max", f.t_max ? nlohmann::json(*f.t_max) : nlohmann::json(nullptr)}}},
      {"caps",
       {{"max_refinements", c.caps.max_refinements},
        {"hard_cap", c.caps.hard_cap},
        {"target_score", c.caps.target_score}}},
      {"code_agent",
       {{"provider_modules", kinds},
        {"verify_threshold", c.code_agent.verify_threshold},
        {"target", c.code_agent.target},
        {"temperature", c.code_agent.params.temperature},
        {"max_length", c.code_agent.params.max_length}}},
      {"runtime", {{"command", c.runtime.command}, {"timeout_s", c.runtime.timeout_s}}},
  };
}

}  // namespace pinnpipe
