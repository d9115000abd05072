#pragma once

// The pipeline state machine, run reports and replay.
//
//   Formulating -> SelectingArch -> Generating -> Executing -> Scoring
//   Scoring -> Done | Refining
//   Refining -> Generating | SelectingArch | Formulating
//   any non-terminal phase -> Failed
//
// Counters: every pass through Executing is one iteration (hard_cap bounds
// them, error repairs included); max_refinements bounds metric-guided
// refinements after a successful score.

#include <stdlib.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/code_agent.hpp"
#include "pinnpipe/config.hpp"
#include "pinnpipe/error.hpp"
#include "pinnpipe/feedback.hpp"
#include "pinnpipe/pde_agent.hpp"
#include "pinnpipe/pinn_agent.hpp"
#include "pinnpipe/provider.hpp"
#include "pinnpipe/subprocess.hpp"
#include "pinnpipe/trainer.hpp"

namespace pinnpipe {

enum class Phase { Formulating, SelectingArch, Generating, Executing, Scoring, Refining, Done, Failed };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::Formulating: return "Formulating";
    case Phase::SelectingArch: return "SelectingArch";
    case Phase::Generating: return "Generating";
    case Phase::Executing: return "Executing";
    case Phase::Scoring: return "Scoring";
    case Phase::Refining: return "Refining";
    case Phase::Done: return "Done";
    case Phase::Failed: return "Failed";
  }
  return "Failed";
}

inline std::optional<Phase> phase_from(const std::string& s) {
  for (auto p : {Phase::Formulating, Phase::SelectingArch, Phase::Generating, Phase::Executing, Phase::Scoring,
                 Phase::Refining, Phase::Done, Phase::Failed})
    if (to_string(p) == s) return p;
  return std::nullopt;
}

inline bool legal_transition(Phase from, Phase to) {
  using P = Phase;
  if (from == P::Done || from == P::Failed) return false;
  if (to == P::Failed) return true;
  switch (from) {
    case P::Formulating: return to == P::SelectingArch;
    case P::SelectingArch: return to == P::Generating;
    case P::Generating: return to == P::Executing;
    case P::Executing: return to == P::Scoring;
    case P::Scoring: return to == P::Done || to == P::Refining;
    case P::Refining: return to == P::Generating || to == P::SelectingArch || to == P::Formulating;
    default: return false;
  }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct IterationRecord {
  int iteration = 0;
  std::string arch;
  std::vector<std::string> regenerated;
  std::map<std::string, std::string> digests;  // module kind -> source digest
  nlohmann::json settings = nlohmann::json::object();
  std::optional<std::string> error;
  std::optional<QualityScore> score;
  std::optional<Decision> decision;
  std::optional<Directive> directive;  // what the feedback agent asked for next
  std::optional<std::string> trace_digest;
  std::size_t trace_length = 0;
};

inline nlohmann::json to_json(const IterationRecord& r) {
  nlohmann::json j{{"iteration", r.iteration},
                   {"arch", r.arch},
                   {"regenerated", r.regenerated},
                   {"digests", r.digests},
                   {"settings", r.settings}};
  j["error"] = r.error ? nlohmann::json(*r.error) : nlohmann::json(nullptr);
  j["scores"] = r.score ? to_json(*r.score) : nlohmann::json(nullptr);
  j["decision"] = r.decision ? nlohmann::json(to_string(*r.decision)) : nlohmann::json(nullptr);
  j["directive"] = r.directive ? to_json(*r.directive) : nlohmann::json(nullptr);
  j["trace_digest"] = r.trace_digest ? nlohmann::json(*r.trace_digest) : nlohmann::json(nullptr);
  j["trace_length"] = r.trace_length;
  return j;
}

struct RunReport {
  std::string description;
  std::uint64_t seed = 0;
  nlohmann::json config;  // snapshot without the seed
  std::string provider;
  nlohmann::json candidates;  // last candidate report
  int formulations = 0;
  std::optional<CanonicalPde> pde;
  nlohmann::json architecture;  // last selection
  std::vector<std::string> excluded_architectures;
  nlohmann::json bundle;  // manifest of the final bundle
  std::vector<IterationRecord> iterations;
  std::vector<std::pair<Phase, Phase>> transitions;
  std::string status;  // "done" or "failed"
  std::string termination;
  std::string failure;
  std::optional<QualityScore> final_score;
  std::vector<double> accepted_scores;
  int refinements = 0;
  std::vector<ProviderCall> provider_calls;
  std::size_t history_size = 0;
  nlohmann::json capability_update;
  double wall_clock_s = 0;
};

/// Keys that differ between otherwise identical runs.
inline const std::vector<std::string>& wall_clock_keys() {
  static const std::vector<std::string> keys{"wall_clock_s"};
  return keys;
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& it : r.iterations) iters.push_back(to_json(it));
  nlohmann::json trans = nlohmann::json::array();
  for (const auto& [a, b] : r.transitions) trans.push_back({to_string(a), to_string(b)});
  nlohmann::json calls = nlohmann::json::array();
  for (const auto& c : r.provider_calls) calls.push_back({{"key", c.key}, {"index", c.index}, {"retries", c.retries}});
  return {{"description", r.description},
          {"seed", r.seed},
          {"config", r.config},
          {"provider", r.provider},
          {"candidates", r.candidates},
          {"formulations", r.formulations},
          {"pde", r.pde ? to_json(*r.pde) : nlohmann::json(nullptr)},
          {"architecture", r.architecture},
          {"excluded_architectures", r.excluded_architectures},
          {"bundle", r.bundle},
          {"iterations", iters},
          {"transitions", trans},
          {"status", r.status},
          {"termination", r.termination},
          {"failure", r.failure},
          {"final_score", r.final_score ? to_json(*r.final_score) : nlohmann::json(nullptr)},
          {"accepted_scores", r.accepted_scores},
          {"refinements", r.refinements},
          {"iteration_count", r.iterations.size()},
          {"provider_calls", calls},
          {"history_size", r.history_size},
          {"capability_update", r.capability_update},
          {"wall_clock_s", r.wall_clock_s}};
}

inline nlohmann::json without_wall_clock(nlohmann::json j) {
  for (const auto& k : wall_clock_keys()) j.erase(k);
  return j;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace detail

/// Writes the bundle to `dir` and runs `runtime.command <dir> <dir>/trace.jsonl`.
/// A nonzero exit raises RuntimeFailure carrying the runtime's stderr. The
/// runtime may leave result.json {"mse", "parameters"}; without it the MSE
/// falls back to the last loss and the count to the model settings.
inline ExecutionResult execute_external(const ProgramBundle& b, const CanonicalPde& pde, const RuntimeConfig& rt,
                                        const std::filesystem::path& dir) {
  if (b.target != "external") throw PreconditionFailed("bundle targets the builtin runtime");
  if (rt.command.empty()) throw ConfigInvalid("runtime.command is empty");
  write_bundle(b, dir);
  const auto trace_path = dir / "trace.jsonl";
  std::filesystem::remove(trace_path);
  auto argv = rt.command;
  argv.push_back(dir.string());
  argv.push_back(trace_path.string());
  const auto proc = run_process(argv, std::chrono::seconds(rt.timeout_s));
  if (proc.timed_out) throw RuntimeFailure("runtime timed out after " + std::to_string(rt.timeout_s) + " s");
  if (proc.exit_code != 0) {
    const auto err = detail::trim(proc.err);
    throw RuntimeFailure(err.empty() ? "runtime exited with status " + std::to_string(proc.exit_code) : err);
  }
  std::ifstream in(trace_path);
  if (!in) throw RuntimeFailure("runtime wrote no trace file at " + trace_path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ExecutionResult r;
  r.trace = trace_from_jsonl(text);
  detail::Settings model(ModuleKind::Model, b.modules.at(ModuleKind::Model).text);
  r.net.depth = model.integer("depth");
  r.net.width = model.integer("width");
  r.parameters = r.net.parameter_count(model.integer("inputs"));
  r.family = pde.meta.family;
  std::ifstream res(dir / "result.json");
  if (res) {
    nlohmann::json j;
    try {
      res >> j;
    } catch (const nlohmann::json::exception& e) {
      throw RuntimeFailure(std::string("result file malformed: ") + e.what());
    }
    if (j.contains("mse")) {
      r.mse = j.at("mse").get<double>();
      r.exact_reference = true;
    }
    if (j.contains("parameters")) r.parameters = j.at("parameters").get<std::size_t>();
  } else if (!r.trace.records.empty()) {
    r.mse = r.trace.records.back().loss;
  }
  if (!r.trace.diverged()) r.trace.final_mse = r.mse;
  return r;
}

/// Context change a directive implies before its module is regenerated.
inline void apply_directive(GenerationContext& ctx, const Directive& d) {
  if (d.signature == "non-finite" || d.signature == "metric-rob") ctx.train.learning_rate *= 0.5;
  else if (d.signature == "metric-conv") ctx.train.learning_rate *= 2.0;
  else if (d.signature == "metric-acc") ctx.train.interior *= 2;
  else if (d.signature == "metric-comp") ctx.net.width = std::max(4, ctx.net.width / 2);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct PipelineEnv {
  CompletionProvider* provider = nullptr;
  std::filesystem::path out_dir;  // bundle, trace and runtime work files; empty: none kept
  // Replay: use only the first n history records and write nothing back.
  std::optional<std::size_t> history_limit;
};

namespace detail {

class ScratchDir {
 public:
  explicit ScratchDir(std::filesystem::path keep) : path_(std::move(keep)) {
    if (path_.empty()) {
      std::string tmpl = (std::filesystem::temp_directory_path() / "pinnpipe-XXXXXX").string();
      if (!::mkdtemp(tmpl.data())) throw Error("cannot create a scratch directory");
      path_ = tmpl;
      owned_ = true;
    }
  }
  ~ScratchDir() {
    std::error_code ec;
    if (owned_) std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  bool owned_ = false;
};

inline nlohmann::json context_settings(const GenerationContext& ctx) {
  return {{"depth", ctx.net.depth},
          {"width", ctx.net.width},
          {"activation", to_string(ctx.net.activation)},
          {"steps", ctx.train.steps},
          {"learning_rate", ctx.train.learning_rate},
          {"interior", ctx.train.interior},
          {"boundary", ctx.train.boundary}};
}

}  // namespace detail

inline RunReport run_pipeline(const std::string& description, const PipelineConfig& cfg, const PipelineEnv& env) {
  validate(cfg);
  if (!env.provider) throw ProviderUnavailable("no completion provider configured");
  const auto started = std::chrono::steady_clock::now();
  CompletionProvider& provider = *env.provider;
  provider.clear_calls();

  RunReport rep;
  rep.description = description;
  rep.seed = cfg.seed;
  rep.config = to_json(cfg);
  rep.config.erase("seed");
  rep.provider = provider.name();

  ArchRegistry registry = ArchRegistry::standard();
  if (!cfg.pinn_agent.capabilities.empty()) {
    std::ifstream in(cfg.pinn_agent.capabilities);
    if (!in) throw ConfigInvalid("cannot open capability registry " + cfg.pinn_agent.capabilities);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigInvalid("capability registry: " + std::string(e.what()));
    }
    registry = ArchRegistry::from_json(j);
  }
  HistoryCache history(cfg.pinn_agent.history);
  std::vector<HistoryRecord> records = history.records();
  if (env.history_limit && records.size() > *env.history_limit) records.resize(*env.history_limit);
  rep.history_size = records.size();

  std::optional<detail::ScratchDir> scratch;
  if (!env.out_dir.empty()) std::filesystem::create_directories(env.out_dir);

  Phase phase = Phase::Formulating;
  auto go = [&](Phase to) {
    if (!legal_transition(phase, to)) throw Error("illegal phase transition " + to_string(phase) + " -> " + to_string(to));
    rep.transitions.emplace_back(phase, to);
    phase = to;
  };
  auto fail = [&](const std::string& why, const std::string& termination) {
    rep.failure = why;
    rep.termination = termination;
    go(Phase::Failed);
  };

  struct Accepted {
    std::map<ModuleKind, ModuleSource> modules;
    GenerationContext ctx;
    QualityScore score;
    ProgramBundle bundle;
    LossTrace trace;
  };

  CodeAgent agent(&provider, cfg.code_agent.provider_modules, cfg.code_agent.params);
  CanonicalPde pde;
  ArchSelection selection;
  std::vector<std::string> excluded;
  GenerationContext ctx;
  std::map<ModuleKind, ModuleSource> modules;
  std::set<ModuleKind> to_generate;
  std::string pde_diagnostic, module_diagnostic;
  std::optional<Accepted> accepted;
  std::set<std::string> tried;  // metric directives tried on the accepted bundle
  std::size_t max_params = cfg.feedback.max_params;
  IterationRecord cur;
  std::optional<std::string> failure;
  std::optional<ProgramBundle> bundle;
  std::optional<ExecutionResult> exec;
  std::optional<Directive> pending;
  bool metric_refinement = false;

  while (phase != Phase::Done && phase != Phase::Failed) {
    switch (phase) {
      case Phase::Formulating: {
        CandidateSet set;
        set.alpha = cfg.pde_agent.alpha;
        try {
          set.raw = formulate_candidates(description, cfg.pde_agent.K, provider, cfg.pde_agent.params, pde_diagnostic);
          ++rep.formulations;
          pde = consensus_select(set);
        } catch (const AllParsesFailed& e) {
          rep.candidates = to_json(set);
          fail(e.what(), "formulation");
          break;
        } catch (const EmptyCandidateSet& e) {
          rep.candidates = to_json(set);
          fail(e.what(), "formulation");
          break;
        }
        rep.candidates = to_json(set);
        rep.pde = pde;
        excluded.clear();
        go(Phase::SelectingArch);
        break;
      }
      case Phase::SelectingArch: {
        SelectionOptions opt;
        opt.weights = cfg.pinn_agent.weights;
        opt.coefficients = cfg.pinn_agent.coefficients;
        opt.reuse_threshold = cfg.pinn_agent.reuse_threshold;
        opt.alpha = cfg.pde_agent.alpha;
        opt.excluded = excluded;
        try {
          selection = select_architecture(pde, registry, records, opt);
        } catch (const ConfigInvalid& e) {
          fail(std::string("no architecture left to train: ") + e.what(), "architectures_exhausted");
          break;
        }
        rep.architecture = to_json(selection);
        ctx = GenerationContext{};
        ctx.pde = pde;
        ctx.arch = selection.arch;
        ctx.net = cfg.trainer.net;
        ctx.net.activation = builtin_activation(selection.arch);
        ctx.train = cfg.trainer.train;
        ctx.train.seed = cfg.seed;
        ctx.eval_points = cfg.trainer.eval_points;
        ctx.target = cfg.code_agent.target;
        to_generate = {kModuleKinds.begin(), kModuleKinds.end()};
        module_diagnostic.clear();
        tried.clear();
        go(Phase::Generating);
        break;
      }
      case Phase::Generating: {
        cur = IterationRecord{};
        cur.iteration = static_cast<int>(rep.iterations.size()) + 1;
        cur.arch = ctx.arch;
        cur.settings = detail::context_settings(ctx);
        failure.reset();
        for (auto k : to_generate) {
          cur.regenerated.push_back(to_string(k));
          try {
            modules[k] = agent.generate(k, ctx, module_diagnostic);
          } catch (const InterfaceNotExtractable& e) {
            modules.erase(k);
            failure = e.what();
            break;
          }
        }
        go(Phase::Executing);
        break;
      }
      case Phase::Executing: {
        bundle.reset();
        exec.reset();
        for (const auto& [k, m] : modules) cur.digests[to_string(k)] = digest(m.text);
        if (!failure) {
          try {
            bundle = assemble(modules, pde.residual, cfg.code_agent.verify_threshold);
            if (bundle->target == "builtin") {
              exec = execute_builtin(*bundle, pde);
            } else {
              if (!scratch) scratch.emplace(env.out_dir.empty() ? std::filesystem::path() : env.out_dir / "runs");
              exec = execute_external(*bundle, pde, cfg.runtime, scratch->path() / ("iteration-" + std::to_string(cur.iteration)));
            }
            cur.trace_digest = digest(to_jsonl(exec->trace));
            cur.trace_length = exec->trace.records.size();
            if (exec->trace.diverged())
              failure = "training diverged: loss non-finite or runaway at step " + std::to_string(*exec->trace.diverged_at);
          } catch (const FixtureMissing&) {
            throw;
          } catch (const ProviderUnavailable&) {
            throw;
          } catch (const Error& e) {
            failure = e.what();
          }
        }
        go(Phase::Scoring);
        break;
      }
      case Phase::Scoring: {
        const int iterations = static_cast<int>(rep.iterations.size()) + 1;
        std::optional<QualityScore> q;
        if (!failure) {
          if (max_params == 0) max_params = exec->parameters;
          try {
            q = score_run(exec->trace, exec->mse, exec->parameters, std::max(max_params, exec->parameters),
                          ctx.train.steps, cfg.feedback);
          } catch (const DegenerateTrace& e) {
            failure = std::string("metric computation failed: ") + e.what();
          }
        }
        if (failure) {
          cur.error = *failure;
          cur.directive = localize_error(*failure);
          rep.iterations.push_back(cur);
          if (accepted) {
            modules = accepted->modules;
            ctx = accepted->ctx;
          }
          if (iterations >= cfg.caps.hard_cap) {
            if (accepted) {
              rep.termination = "hard_cap";
              go(Phase::Done);
            } else {
              fail("iteration cap of " + std::to_string(cfg.caps.hard_cap) + " reached; last error: " + *failure, "hard_cap");
            }
            break;
          }
          pending = cur.directive;
          metric_refinement = false;
          go(Phase::Refining);
          break;
        }
        cur.score = q;
        cur.decision = refine_decision(q->S, accepted ? std::optional<double>(accepted->score.S) : std::nullopt);
        if (*cur.decision == Decision::Accept) {
          accepted = Accepted{modules, ctx, *q, *bundle, exec->trace};
          rep.accepted_scores.push_back(q->S);
          tried.clear();
        } else {
          modules = accepted->modules;
          ctx = accepted->ctx;
        }
        if (accepted->score.S >= cfg.caps.target_score) {
          rep.termination = "target_score";
        } else if (rep.refinements >= cfg.caps.max_refinements) {
          rep.termination = "max_refinements";
        } else if (iterations >= cfg.caps.hard_cap) {
          rep.termination = "hard_cap";
        } else {
          cur.directive = metric_directive(accepted->score, tried);
          tried.insert(cur.directive->signature);
        }
        rep.iterations.push_back(cur);
        if (!rep.termination.empty()) {
          go(Phase::Done);
          break;
        }
        pending = cur.directive;
        metric_refinement = true;
        go(Phase::Refining);
        break;
      }
      case Phase::Refining: {
        if (metric_refinement) ++rep.refinements;
        const Directive d = *pending;
        if (d.target == kPdeAgent) {
          pde_diagnostic = d.reason;
          go(Phase::Formulating);
        } else if (d.target == kPinnAgent) {
          excluded.push_back(ctx.arch);
          rep.excluded_architectures.push_back(ctx.arch);
          go(Phase::SelectingArch);
        } else {
          apply_directive(ctx, d);
          to_generate = {*module_kind_from(d.target)};
          module_diagnostic = d.reason;
          go(Phase::Generating);
        }
        break;
      }
      case Phase::Done:
      case Phase::Failed: break;
    }
  }

  rep.status = phase == Phase::Done ? "done" : "failed";
  if (accepted) {
    rep.final_score = accepted->score;
    rep.bundle = accepted->bundle.manifest();
    if (!env.out_dir.empty()) {
      write_bundle(accepted->bundle, env.out_dir / "bundle");
      std::ofstream(env.out_dir / "trace.jsonl", std::ios::binary) << to_jsonl(accepted->trace);
    }
    const bool persist = !env.history_limit;
    if (cfg.pinn_agent.refine_rate > 0.0 && registry.contains(accepted->ctx.arch)) {
      ArchCapability& c = registry.at(accepted->ctx.arch);
      refine_capability(c, extract_features(pde, cfg.pinn_agent.coefficients), accepted->score.S, cfg.pinn_agent.refine_rate);
      rep.capability_update = {{"arch", c.name}, {"capability", {c.per, c.geo, c.ms}}};
      if (persist && !cfg.pinn_agent.capabilities.empty())
        std::ofstream(cfg.pinn_agent.capabilities) << registry.to_json().dump(2) << "\n";
    }
    if (persist && phase == Phase::Done && !cfg.pinn_agent.history.empty())
      history.append({pde, accepted->ctx.arch, accepted->score.S, utc_timestamp()});
  } else if (bundle) {
    rep.bundle = bundle->manifest();
  }
  rep.provider_calls = provider.calls();
  rep.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Reruns a recorded report against `provider` (normally the fixture mock)
/// and returns the new report. Raises ReplayMismatch naming a missing
/// fixture or the first differing report path.
inline RunReport replay(const nlohmann::json& report, CompletionProvider& provider, PipelineEnv env = {}) {
  if (!report.is_object() || !report.contains("description") || !report.contains("config") || !report.contains("seed"))
    throw ReplayMismatch("report lacks description, config or seed");
  if (auto* mock = dynamic_cast<MockProvider*>(&provider)) {
    for (const auto& c : report.value("provider_calls", nlohmann::json::array())) {
      const auto key = c.at("key").get<std::string>();
      if (!mock->has(key)) throw ReplayMismatch("fixture " + key + " missing");
    }
  }
  nlohmann::json cj = report.at("config");
  cj["seed"] = report.at("seed");
  PipelineConfig cfg = config_from_json(cj);
  env.provider = &provider;
  env.history_limit = report.value("history_size", std::size_t{0});
  RunReport again;
  try {
    again = run_pipeline(report.at("description").get<std::string>(), cfg, env);
  } catch (const FixtureMissing& e) {
    throw ReplayMismatch("fixture " + e.key() + " missing");
  }
  const auto a = without_wall_clock(report), b = without_wall_clock(to_json(again));
  if (a.dump() != b.dump()) {
    const auto patch = nlohmann::json::diff(a, b);
    const std::string where = patch.empty() ? std::string("(serialization)") : patch.front().value("path", std::string("/"));
    throw ReplayMismatch("replayed report differs at " + where);
  }
  return again;
}

}  // namespace pinnpipe
