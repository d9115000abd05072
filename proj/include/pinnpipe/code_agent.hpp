#pragma once

// Module generation, interface checking, loss verification, bundle assembly
// and execution of builtin bundles.
//
// Every module starts with an interface header:
//
//   # module: pde_loss
//   # target: builtin
//   # provides: loss/2 residual/2
//   # requires: forward/1
//
// followed by `name = value` settings (valid Python on the external target)
// and, in the loss module, a fenced residual in prefix notation:
//
//   # BEGIN RESIDUAL
//   # (+ (dt 1 u) (* -0.1 (dx x 2 u)))
//   # END RESIDUAL

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/canonical.hpp"
#include "pinnpipe/error.hpp"
#include "pinnpipe/match.hpp"
#include "pinnpipe/parser.hpp"
#include "pinnpipe/pde.hpp"
#include "pinnpipe/pde_agent.hpp"
#include "pinnpipe/provider.hpp"
#include "pinnpipe/trainer.hpp"

namespace pinnpipe {

enum class ModuleKind { Model, PdeLoss, Preprocessing, TrainingLoop, Validation, Main };

inline constexpr std::array<ModuleKind, 6> kModuleKinds{ModuleKind::Model,        ModuleKind::PdeLoss,
                                                        ModuleKind::Preprocessing, ModuleKind::TrainingLoop,
                                                        ModuleKind::Validation,   ModuleKind::Main};

inline std::string to_string(ModuleKind k) {
  switch (k) {
    case ModuleKind::Model: return "model";
    case ModuleKind::PdeLoss: return "pde_loss";
    case ModuleKind::Preprocessing: return "preprocessing";
    case ModuleKind::TrainingLoop: return "training_loop";
    case ModuleKind::Validation: return "validation";
    case ModuleKind::Main: return "main";
  }
  return "main";
}

inline std::optional<ModuleKind> module_kind_from(const std::string& s) {
  for (auto k : kModuleKinds)
    if (to_string(k) == s) return k;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Interfaces
// ---------------------------------------------------------------------------

struct Symbol {
  std::string name;
  int arity = 0;

  std::string str() const { return name + "/" + std::to_string(arity); }
  friend bool operator==(const Symbol& a, const Symbol& b) { return a.name == b.name && a.arity == b.arity; }
  friend bool operator<(const Symbol& a, const Symbol& b) {
    return a.name != b.name ? a.name < b.name : a.arity < b.arity;
  }
};

inline Symbol parse_symbol(const std::string& s) {
  static const std::regex re(R"(([A-Za-z_][A-Za-z0-9_]*)/([0-9]+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw InterfaceNotExtractable("malformed symbol '" + s + "'");
  return {m[1].str(), std::stoi(m[2].str())};
}

struct Interface {
  ModuleKind kind = ModuleKind::Main;
  std::string target;
  std::vector<Symbol> provides;
  std::vector<Symbol> requires_;
};

struct Contract {
  std::vector<Symbol> provides;
  std::vector<Symbol> requires_;
};

inline const Contract& contract(ModuleKind k) {
  static const std::map<ModuleKind, Contract> table{
      {ModuleKind::Model, {{{"forward", 1}, {"parameters", 0}}, {}}},
      {ModuleKind::PdeLoss, {{{"loss", 2}, {"residual", 2}}, {{"forward", 1}}}},
      {ModuleKind::Preprocessing, {{{"sample_interior", 1}, {"sample_boundary", 1}}, {}}},
      {ModuleKind::TrainingLoop,
       {{{"train", 3}}, {{"loss", 2}, {"parameters", 0}, {"sample_interior", 1}, {"sample_boundary", 1}}}},
      {ModuleKind::Validation, {{{"evaluate", 2}}, {{"forward", 1}}}},
      {ModuleKind::Main, {{{"main", 0}}, {{"train", 3}, {"evaluate", 2}}}},
  };
  return table.at(k);
}

/// Reads the interface header. Raises InterfaceNotExtractable when the
/// module or provides line is missing or a symbol is malformed.
inline Interface extract_interface(const std::string& text) {
  Interface iface;
  bool have_module = false, have_provides = false;
  std::istringstream in(text);
  std::string line;
  auto symbols = [](const std::string& rest) {
    std::vector<Symbol> out;
    std::istringstream words(rest);
    std::string w;
    while (words >> w) out.push_back(parse_symbol(w));
    return out;
  };
  static const std::regex header(R"(^#\s*(module|target|provides|requires):\s*(.*?)\s*$)");
  while (std::getline(in, line)) {
    std::smatch m;
    if (!std::regex_match(line, m, header)) continue;
    const std::string key = m[1].str(), rest = m[2].str();
    if (key == "module") {
      auto k = module_kind_from(rest);
      if (!k) throw InterfaceNotExtractable("unknown module kind '" + rest + "'");
      iface.kind = *k;
      have_module = true;
    } else if (key == "target") {
      iface.target = rest;
    } else if (key == "provides") {
      iface.provides = symbols(rest);
      have_provides = true;
    } else {
      iface.requires_ = symbols(rest);
    }
  }
  if (!have_module) throw InterfaceNotExtractable("module header missing");
  if (!have_provides) throw InterfaceNotExtractable("provides header missing");
  return iface;
}

struct ModuleSource {
  ModuleKind kind = ModuleKind::Main;
  std::string target;
  std::string text;
  Interface iface;
  std::string origin;  // "template" or "provider"
};

struct Violation {
  enum class Problem { Missing, ArityMismatch, DuplicateProvider };
  ModuleKind module = ModuleKind::Main;  // requiring module (or a provider, for duplicates)
  std::string symbol;
  Problem problem = Problem::Missing;

  std::string describe() const {
    switch (problem) {
      case Problem::Missing: return to_string(module) + " requires " + symbol + " which no module provides";
      case Problem::ArityMismatch:
        return to_string(module) + " requires " + symbol + " but it is provided with a different arity";
      case Problem::DuplicateProvider: return symbol + " is provided by more than one module";
    }
    return symbol;
  }
};

inline std::string to_string(Violation::Problem p) {
  switch (p) {
    case Violation::Problem::Missing: return "missing";
    case Violation::Problem::ArityMismatch: return "arity mismatch";
    case Violation::Problem::DuplicateProvider: return "duplicate provider";
  }
  return "missing";
}

struct InterfaceReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

/// Resolves every required symbol against the other modules' provides.
inline InterfaceReport check_interfaces(const std::map<ModuleKind, ModuleSource>& modules) {
  InterfaceReport rep;
  std::map<Symbol, std::vector<ModuleKind>> providers;
  for (const auto& [k, m] : modules)
    for (const auto& s : m.iface.provides) providers[s].push_back(k);
  for (const auto& [s, ks] : providers)
    if (ks.size() > 1) rep.violations.push_back({ks.front(), s.str(), Violation::Problem::DuplicateProvider});
  for (const auto& [k, m] : modules) {
    for (const auto& req : m.iface.requires_) {
      auto it = providers.find(req);
      if (it != providers.end()) continue;
      bool name_found = false;
      for (const auto& [s, ks] : providers) name_found = name_found || s.name == req.name;
      rep.violations.push_back(
          {k, req.str(), name_found ? Violation::Problem::ArityMismatch : Violation::Problem::Missing});
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Settings
// ---------------------------------------------------------------------------

/// `name = value` lines at column 0; quoted values are unquoted.
inline std::map<std::string, std::string> module_settings(const std::string& text) {
  static const std::regex kv(R"(^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$)");
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::smatch m;
    if (!std::regex_match(line, m, kv)) continue;
    std::string v = m[2].str();
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
    out[m[1].str()] = v;
  }
  return out;
}

namespace detail {

// Failure texts phrased so that the feedback agent's localizer routes them
// back to the module that raised them.
inline std::string missing_setting_message(ModuleKind k, const std::string& key) {
  switch (k) {
    case ModuleKind::Model: return "network shape undefined: missing setting '" + key + "'";
    case ModuleKind::PdeLoss: return "undefined residual setting '" + key + "'";
    case ModuleKind::Preprocessing: return "sampling setting '" + key + "' missing from collocation file";
    case ModuleKind::TrainingLoop: return "optimizer setting '" + key + "' missing";
    case ModuleKind::Validation: return "metric setting '" + key + "' missing";
    case ModuleKind::Main: return "entry point setting '" + key + "' missing";
  }
  return key;
}

class Settings {
 public:
  Settings(ModuleKind k, const std::string& text) : kind_(k), kv_(module_settings(text)) {}

  std::string str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw RuntimeFailure(missing_setting_message(kind_, key));
    return it->second;
  }
  double num(const std::string& key) const {
    const auto s = str(key);
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw RuntimeFailure(missing_setting_message(kind_, key) + " (not a number: " + s + ")");
    }
  }
  int integer(const std::string& key) const {
    double v = num(key);
    if (v != static_cast<double>(static_cast<long long>(v))) throw RuntimeFailure(missing_setting_message(kind_, key) + " (not an integer)");
    return static_cast<int>(v);
  }
  bool has(const std::string& key) const { return kv_.count(key) > 0; }

 private:
  ModuleKind kind_;
  std::map<std::string, std::string> kv_;
};

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Residual block and verification
// ---------------------------------------------------------------------------

inline constexpr const char* kResidualBegin = "# BEGIN RESIDUAL";
inline constexpr const char* kResidualEnd = "# END RESIDUAL";

/// Text between the residual markers with comment prefixes stripped.
/// Raises ResidualBlockMissing when either marker is absent.
inline std::string residual_block(const std::string& text) {
  auto b = text.find(kResidualBegin);
  if (b == std::string::npos) throw ResidualBlockMissing();
  auto e = text.find(kResidualEnd, b);
  if (e == std::string::npos) throw ResidualBlockMissing();
  std::istringstream in(text.substr(b + std::string(kResidualBegin).size(), e - b - std::string(kResidualBegin).size()));
  std::string line, out;
  while (std::getline(in, line)) {
    auto p = line.find_first_not_of(" \t");
    if (p == std::string::npos) continue;
    line = line.substr(p);
    if (line.front() == '#') line = line.substr(1);
    if (!out.empty()) out += ' ';
    out += line;
  }
  auto p = out.find_first_not_of(" \t");
  return p == std::string::npos ? std::string() : out.substr(p);
}

/// Residual recovered from a block: prefix notation, falling back to infix.
inline Expr recover_residual(const std::string& block) {
  try {
    return canonicalize(from_prefix(block));
  } catch (const Error&) {
    return canonicalize(parse(block));
  }
}

struct Verification {
  bool verified = false;
  double score = 0.0;
  std::optional<Expr> recovered;
  std::string reason;
};

/// Compares the loss module's residual with `expected` (canonical) by sym.
inline Verification verify_loss(const std::string& loss_text, const Expr& expected, double threshold = 0.99) {
  Verification v;
  const std::string block = residual_block(loss_text);
  try {
    v.recovered = recover_residual(block);
  } catch (const Error& e) {
    v.reason = std::string("residual in loss module does not parse: ") + e.what();
    return v;
  }
  v.score = tree_match_score(*v.recovered, canonicalize(expected));
  v.verified = v.score >= threshold;
  if (!v.verified) v.reason = "residual in loss module scores " + format_number(v.score) + " below " + format_number(threshold);
  return v;
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

struct GenerationContext {
  CanonicalPde pde;
  std::string arch = "MLP";
  NetSpec net;
  TrainConfig train;
  int eval_points = 256;
  std::string target = "builtin";  // or "external"
};

/// Highest derivative order needed along each axis ("t" for time).
inline std::map<std::string, int> required_stencils(const Expr& residual) {
  std::map<std::string, int> out;
  std::function<void(const Expr&)> walk = [&](const Expr& e) {
    if (is_derivative(e.kind)) {
      std::map<std::string, int> chain;
      const Expr* cur = &e;
      while (is_derivative(cur->kind)) {
        chain[cur->kind == NodeKind::TimeDerivative ? "t" : cur->label] += cur->order;
        cur = &cur->children[0];
      }
      for (const auto& [a, o] : chain) out[a] = std::max(out[a], o);
      walk(*cur);
      return;
    }
    for (const auto& c : e.children) walk(c);
  };
  walk(residual);
  return out;
}

inline std::string format_stencils(const std::map<std::string, int>& s) {
  std::string out;
  for (const auto& [a, o] : s) out += (out.empty() ? "" : " ") + a + ":" + std::to_string(o);
  return out;
}

inline std::map<std::string, int> parse_stencils(const std::string& s) {
  std::map<std::string, int> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) {
    auto c = w.find(':');
    if (c == std::string::npos || c == 0) throw RuntimeFailure("undefined derivative stencil '" + w + "'");
    try {
      out[w.substr(0, c)] = std::stoi(w.substr(c + 1));
    } catch (const std::exception&) {
      throw RuntimeFailure("undefined derivative stencil '" + w + "'");
    }
  }
  return out;
}

namespace detail {

inline std::string header(ModuleKind k, const std::string& target) {
  const auto& c = contract(k);
  std::string out = "# module: " + to_string(k) + "\n# target: " + target + "\n# provides:";
  for (const auto& s : c.provides) out += " " + s.str();
  out += "\n# requires:";
  for (const auto& s : c.requires_) out += " " + s.str();
  return out + "\n";
}

inline std::string quoted(const std::string& s) { return "\"" + s + "\""; }

inline std::string settings_block(ModuleKind k, const GenerationContext& ctx) {
  const auto& pde = ctx.pde;
  const int inputs = pde.domain.dims + (pde.time_dependent() ? 1 : 0);
  std::ostringstream o;
  switch (k) {
    case ModuleKind::Model:
      o << "arch = " << quoted(ctx.arch) << "\nactivation = " << quoted(to_string(ctx.net.activation))
        << "\ndepth = " << ctx.net.depth << "\nwidth = " << ctx.net.width << "\ninputs = " << inputs << "\n";
      break;
    case ModuleKind::PdeLoss: {
      const auto fields = pde.fields();
      o << "field = " << quoted(fields.empty() ? "u" : *fields.begin())
        << "\nstencils = " << quoted(format_stencils(required_stencils(pde.residual)))
        << "\nh = " << fmt_num(ctx.train.h) << "\nboundary_weight = " << fmt_num(ctx.train.boundary_weight) << "\n";
      break;
    }
    case ModuleKind::Preprocessing:
      o << "interior = " << ctx.train.interior << "\nboundary = " << ctx.train.boundary << "\nseed = " << ctx.train.seed
        << "\n";
      break;
    case ModuleKind::TrainingLoop:
      o << "optimizer = \"adam\"\nsteps = " << ctx.train.steps << "\nlearning_rate = " << fmt_num(ctx.train.learning_rate)
        << "\ndivergence_factor = " << fmt_num(ctx.train.divergence_factor) << "\n";
      break;
    case ModuleKind::Validation:
      o << "metric = \"mse\"\ngrid = " << ctx.eval_points << "\n";
      break;
    case ModuleKind::Main:
      o << "entry = \"run\"\n";
      break;
  }
  return o.str();
}

inline std::string residual_fence(const Expr& residual) {
  return std::string(kResidualBegin) + "\n# " + to_prefix(residual) + "\n" + kResidualEnd + "\n";
}

// Python bodies for the external target; the settings above them are
// assignments the runtime reads back.
inline std::string python_body(ModuleKind k) {
  switch (k) {
    case ModuleKind::Model:
      return R"py(
import torch

_act = torch.nn.Tanh if activation == "tanh" else None


class _Sine(torch.nn.Module):
    def forward(self, x):
        return torch.sin(x)


_layers, _fan_in = [], inputs
for _ in range(depth):
    _layers += [torch.nn.Linear(_fan_in, width), _act() if _act else _Sine()]
    _fan_in = width
_layers.append(torch.nn.Linear(_fan_in, 1))
_net = torch.nn.Sequential(*_layers).double()


def forward(x):
    return _net(x)


def parameters():
    return _net.parameters()
)py";
    case ModuleKind::PdeLoss:
      return R"py(
import torch


def residual(points, forward):
    # Evaluated by the runtime from the fenced prefix residual.
    raise NotImplementedError


def loss(batch, forward):
    interior, boundary = batch
    r = residual(interior, forward)
    fit = sum(torch.mean((forward(x) - g) ** 2) for x, g in boundary)
    return torch.mean(r ** 2) + boundary_weight * fit
)py";
    case ModuleKind::Preprocessing:
      return R"py(
import torch

_gen = torch.Generator().manual_seed(seed)


def sample_interior(box):
    lo = torch.tensor([a for a, _ in box], dtype=torch.float64)
    hi = torch.tensor([b for _, b in box], dtype=torch.float64)
    return lo + (hi - lo) * torch.rand(interior, len(box), generator=_gen, dtype=torch.float64)


def sample_boundary(box):
    return sample_interior(box)[:boundary]
)py";
    case ModuleKind::TrainingLoop:
      return R"py(
import json

import torch


def train(loss, batches, trace_path):
    opt = torch.optim.Adam(parameters(), lr=learning_rate, betas=(0.9, 0.999), eps=1e-8)
    first = None
    with open(trace_path, "w") as out:
        for t in range(1, steps + 1):
            opt.zero_grad()
            value = loss(batches(), forward)
            value.backward()
            gn = float(torch.sqrt(sum((p.grad ** 2).sum() for p in parameters())))
            v = float(value)
            first = v if first is None else first
            if v != v or gn != gn or v > divergence_factor * first:
                out.write(json.dumps({"t": t, "diverged": True}) + "\n")
                return
            out.write(json.dumps({"t": t, "loss": v, "grad_norm": gn}) + "\n")
            opt.step()
)py";
    case ModuleKind::Validation:
      return R"py(
import torch


def evaluate(forward, reference):
    x, y = reference
    with torch.no_grad():
        return float(torch.mean((forward(x).squeeze(-1) - y) ** 2))
)py";
    case ModuleKind::Main:
      return R"py(
import sys


def main():
    trace_path = sys.argv[1] if len(sys.argv) > 1 else "trace.jsonl"
    train(loss, lambda: None, trace_path)


if __name__ == "__main__":
    main()
)py";
  }
  return "";
}

}  // namespace detail

/// Deterministic template for `kind` on the context's target.
inline ModuleSource render_template(ModuleKind kind, const GenerationContext& ctx) {
  if (ctx.target != "builtin" && ctx.target != "external") throw TemplateMissing("no templates for target '" + ctx.target + "'");
  std::string text = detail::header(kind, ctx.target);
  if (ctx.target == "builtin") text += "\n" + detail::settings_block(kind, ctx);
  else text += "\n" + detail::settings_block(kind, ctx) + detail::python_body(kind);
  if (kind == ModuleKind::PdeLoss) text += "\n" + detail::residual_fence(ctx.pde.residual);
  ModuleSource m{kind, ctx.target, text, extract_interface(text), "template"};
  return m;
}

inline std::string module_prompt(ModuleKind kind, const GenerationContext& ctx, const std::string& diagnostic) {
  std::string p = "Write the " + to_string(kind) + " module of a PINN training program for target " + ctx.target +
                  ".\nPDE residual (prefix): " + to_prefix(ctx.pde.residual) + "\nArchitecture: " + ctx.arch +
                  "\nNetwork: depth " + std::to_string(ctx.net.depth) + ", width " + std::to_string(ctx.net.width) +
                  ", activation " + to_string(ctx.net.activation) +
                  "\nBegin with the interface header (# module, # target, # provides, # requires); the loss module "
                  "must fence its residual between \"# BEGIN RESIDUAL\" and \"# END RESIDUAL\".\n";
  if (!diagnostic.empty()) p += "The previous version failed with: " + diagnostic + "\n";
  return p;
}

class CodeAgent {
 public:
  CodeAgent() = default;
  CodeAgent(CompletionProvider* provider, std::set<ModuleKind> provider_kinds, CompletionParams params = {})
      : provider_(provider), provider_kinds_(std::move(provider_kinds)), params_(params) {}

  /// Generates one module. Kinds listed for the provider are requested from
  /// it (with `diagnostic` on regeneration); the rest come from templates.
  ModuleSource generate(ModuleKind kind, const GenerationContext& ctx, const std::string& diagnostic = "") const {
    if (!provider_ || !provider_kinds_.count(kind)) return render_template(kind, ctx);
    const std::string text = provider_->complete(module_prompt(kind, ctx, diagnostic), params_);
    std::string source = last_fenced_block(text).value_or(text);
    if (!source.empty() && source.back() != '\n') source += '\n';
    Interface iface;
    try {
      iface = extract_interface(source);
    } catch (const InterfaceNotExtractable& e) {
      throw InterfaceNotExtractable("in module " + to_string(kind) + ": " + e.what());
    }
    if (iface.kind != kind)
      throw InterfaceNotExtractable("in module " + to_string(kind) + ": provider returned a " + to_string(iface.kind) +
                                    " module");
    for (const auto& s : contract(kind).provides)
      if (std::find(iface.provides.begin(), iface.provides.end(), s) == iface.provides.end())
        throw InterfaceNotExtractable("in module " + to_string(kind) + ": provider output lacks '" + s.str() + "'");
    return {kind, ctx.target, source, iface, "provider"};
  }

  std::map<ModuleKind, ModuleSource> generate_all(const GenerationContext& ctx) const {
    std::map<ModuleKind, ModuleSource> out;
    for (auto k : kModuleKinds) out.emplace(k, generate(k, ctx));
    return out;
  }

 private:
  CompletionProvider* provider_ = nullptr;
  std::set<ModuleKind> provider_kinds_;
  CompletionParams params_;
};

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

inline std::string digest(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

struct ProgramBundle {
  std::string target = "builtin";
  std::map<ModuleKind, ModuleSource> modules;
  InterfaceReport interfaces;
  Verification verification;
  Expr expected = Expr::number(0.0);  // residual the loss was verified against

  std::string extension() const { return target == "external" ? ".py" : ".pp"; }

  nlohmann::json manifest() const {
    nlohmann::json mods = nlohmann::json::object();
    nlohmann::json kinds = nlohmann::json::array();
    for (const auto& [k, m] : modules) {
      nlohmann::json prov = nlohmann::json::array(), req = nlohmann::json::array();
      for (const auto& s : m.iface.provides) prov.push_back(s.str());
      for (const auto& s : m.iface.requires_) req.push_back(s.str());
      mods[to_string(k)] = {{"file", to_string(k) + extension()},
                            {"digest", digest(m.text)},
                            {"provides", prov},
                            {"requires", req},
                            {"origin", m.origin}};
      kinds.push_back(to_string(k));
    }
    nlohmann::json settings = nlohmann::json::object();
    for (const auto& [k, m] : modules) settings[to_string(k)] = module_settings(m.text);
    return {{"version", 1},
            {"target", target},
            {"kinds", kinds},
            {"modules", mods},
            {"interfaces", interfaces.ok() ? "ok" : "violations"},
            {"residual", to_prefix(expected)},
            {"verification", {{"verified", verification.verified}, {"score", verification.score}}},
            {"settings", settings}};
  }
};

/// Gates: all six kinds present, interfaces resolved, loss verified.
inline ProgramBundle assemble(std::map<ModuleKind, ModuleSource> modules, const Expr& expected, double threshold = 0.99) {
  for (auto k : kModuleKinds)
    if (!modules.count(k)) throw PreconditionFailed("missing kind: " + to_string(k));
  ProgramBundle b;
  b.target = modules.at(ModuleKind::Model).target;
  for (const auto& [k, m] : modules)
    if (m.target != b.target) throw PreconditionFailed("modules target different runtimes");
  b.interfaces = check_interfaces(modules);
  if (!b.interfaces.ok()) {
    std::string msg = "interface check failed in module " + to_string(b.interfaces.violations.front().module) + ":";
    for (const auto& v : b.interfaces.violations) msg += " [" + v.describe() + "]";
    throw PreconditionFailed(msg);
  }
  b.expected = canonicalize(expected);
  try {
    b.verification = verify_loss(modules.at(ModuleKind::PdeLoss).text, b.expected, threshold);
  } catch (const ResidualBlockMissing& e) {
    throw PreconditionFailed(std::string("loss verification failed: ") + e.what());
  }
  if (!b.verification.verified) throw PreconditionFailed("loss verification failed: " + b.verification.reason);
  b.modules = std::move(modules);
  return b;
}

inline void write_bundle(const ProgramBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [k, m] : b.modules) {
    std::ofstream out(dir / (to_string(k) + b.extension()), std::ios::binary);
    if (!out) throw Error("cannot write bundle file in " + dir.string());
    out << m.text;
  }
  std::ofstream man(dir / "manifest.json", std::ios::binary);
  if (!man) throw Error("cannot write manifest in " + dir.string());
  man << b.manifest().dump(2) << "\n";
}

struct BundleCheck {
  bool ok = true;
  std::vector<std::string> problems;
};

/// Re-reads a bundle directory: manifest present, files match their
/// digests, interfaces resolve and the loss still verifies.
inline BundleCheck verify_bundle_dir(const std::filesystem::path& dir, double threshold = 0.99) {
  BundleCheck c;
  auto fail = [&](const std::string& p) {
    c.ok = false;
    c.problems.push_back(p);
  };
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    fail("manifest.json not found");
    return c;
  }
  nlohmann::json man;
  try {
    in >> man;
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("manifest.json malformed: ") + e.what());
    return c;
  }
  std::map<ModuleKind, ModuleSource> modules;
  for (auto k : kModuleKinds) {
    const auto name = to_string(k);
    if (!man.contains("modules") || !man["modules"].contains(name)) {
      fail("manifest lacks module " + name);
      continue;
    }
    const auto& entry = man["modules"][name];
    std::ifstream f(dir / entry.value("file", std::string()), std::ios::binary);
    if (!f) {
      fail("file for " + name + " not found");
      continue;
    }
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (digest(text) != entry.value("digest", std::string())) fail("digest mismatch for " + name);
    try {
      modules[k] = {k, man.value("target", std::string()), text, extract_interface(text), entry.value("origin", std::string())};
    } catch (const Error& e) {
      fail(name + ": " + e.what());
    }
  }
  if (!c.ok) return c;
  auto rep = check_interfaces(modules);
  for (const auto& v : rep.violations) fail(v.describe());
  try {
    auto v = verify_loss(modules.at(ModuleKind::PdeLoss).text, from_prefix(man.value("residual", std::string("0"))), threshold);
    if (!v.verified) fail(v.reason);
  } catch (const Error& e) {
    fail(e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Builtin execution
// ---------------------------------------------------------------------------

struct ExecutionResult {
  std::string family;
  NetSpec net;
  TrainConfig train;
  int eval_points = 256;
  LossTrace trace;
  double mse = 0.0;  // solution MSE when the exact solution is known, else residual MSE
  bool exact_reference = false;
  std::size_t parameters = 0;
};

/// Settings the builtin runtime reads from a bundle, validated the way the
/// modules would fail at run time.
struct RunPlan {
  TrainingProblem problem;
  NetSpec net;
  TrainConfig train;
  int eval_points = 256;
};

/// Fully connected families the builtin trainer can run.
inline bool builtin_trainable(const std::string& arch) { return arch == "MLP" || arch == "Fourier-MLP"; }

/// Activation the builtin trainer uses for a trainable family.
inline Activation builtin_activation(const std::string& arch) {
  return arch == "Fourier-MLP" ? Activation::Sine : Activation::Tanh;
}

inline RunPlan plan_builtin(const ProgramBundle& b, const CanonicalPde& pde) {
  if (b.target != "builtin") throw PreconditionFailed("bundle targets the external runtime");
  RunPlan plan;
  const auto& loss_text = b.modules.at(ModuleKind::PdeLoss).text;
  const Expr residual = recover_residual(residual_block(loss_text));
  {
    std::vector<std::string> coords = pde.domain.axes;
    if (pde.time_dependent()) coords.push_back("t");
    std::set<std::string> vars;
    collect_variables(residual, vars);
    const auto fields = field_variables(residual);
    for (const auto& v : vars)
      if (!fields.count(v) && std::find(coords.begin(), coords.end(), v) == coords.end())
        throw RuntimeFailure("unparseable residual: free symbol '" + v + "' has no value");
  }
  CanonicalPde run_pde = pde;
  run_pde.residual = residual;
  normalize(run_pde);
  plan.problem = make_problem(run_pde);

  detail::Settings model(ModuleKind::Model, b.modules.at(ModuleKind::Model).text);
  const std::string arch = model.has("arch") ? model.str("arch") : "MLP";
  if (!builtin_trainable(arch))
    throw RuntimeFailure("unsupported architecture family '" + arch + "' for the builtin runtime");
  plan.net.depth = model.integer("depth");
  plan.net.width = model.integer("width");
  try {
    plan.net.activation = activation_from(model.str("activation"));
  } catch (const ConfigInvalid& e) {
    throw RuntimeFailure(std::string("network shape undefined: ") + e.what());
  }
  if (plan.net.depth < 1 || plan.net.width < 1) throw RuntimeFailure("network shape invalid: depth and width must be positive");
  const int inputs = model.integer("inputs");
  if (inputs != plan.problem.inputs())
    throw RuntimeFailure("shape mismatch: network takes " + std::to_string(inputs) + " inputs but the problem has " +
                         std::to_string(plan.problem.inputs()) + " coordinates");

  detail::Settings loss(ModuleKind::PdeLoss, loss_text);
  const auto declared = parse_stencils(loss.str("stencils"));
  for (const auto& [axis, order] : required_stencils(residual)) {
    auto it = declared.find(axis);
    if (it == declared.end() || it->second < order)
      throw RuntimeFailure("undefined derivative of order " + std::to_string(order) + " along " + axis +
                           ": no stencil declared");
  }
  plan.train.h = loss.num("h");
  plan.train.boundary_weight = loss.num("boundary_weight");

  detail::Settings pre(ModuleKind::Preprocessing, b.modules.at(ModuleKind::Preprocessing).text);
  plan.train.interior = pre.integer("interior");
  plan.train.boundary = pre.integer("boundary");
  plan.train.seed = static_cast<std::uint64_t>(pre.num("seed"));
  if (plan.train.interior < 1 || plan.train.boundary < 1)
    throw RuntimeFailure("sampling produced an empty collocation set");

  detail::Settings loop(ModuleKind::TrainingLoop, b.modules.at(ModuleKind::TrainingLoop).text);
  if (loop.str("optimizer") != "adam") throw RuntimeFailure("optimizer '" + loop.str("optimizer") + "' is not available");
  plan.train.steps = loop.integer("steps");
  plan.train.learning_rate = loop.num("learning_rate");
  if (loop.has("divergence_factor")) plan.train.divergence_factor = loop.num("divergence_factor");
  if (plan.train.steps < 1 || !(plan.train.learning_rate > 0))
    throw RuntimeFailure("optimizer configuration invalid: steps and learning rate must be positive");

  detail::Settings val(ModuleKind::Validation, b.modules.at(ModuleKind::Validation).text);
  if (val.str("metric") != "mse") throw RuntimeFailure("metric '" + val.str("metric") + "' is not defined");
  plan.eval_points = val.integer("grid");
  if (plan.eval_points < 2) throw RuntimeFailure("metric grid needs at least two points per axis");

  detail::Settings main(ModuleKind::Main, b.modules.at(ModuleKind::Main).text);
  if (main.str("entry") != "run") throw RuntimeFailure("entry point '" + main.str("entry") + "' not found");
  return plan;
}

/// Trains a builtin bundle. A diverged trace is returned, not thrown.
inline ExecutionResult execute_builtin(const ProgramBundle& b, const CanonicalPde& pde) {
  RunPlan plan = plan_builtin(b, pde);
  ExecutionResult r;
  r.family = plan.problem.family;
  r.net = plan.net;
  r.train = plan.train;
  r.eval_points = plan.eval_points;
  auto res = train(plan.problem, plan.net, plan.train);
  r.trace = std::move(res.trace);
  r.parameters = res.net.parameter_count();
  r.exact_reference = plan.problem.exact.has_value();
  if (!r.trace.diverged()) {
    r.mse = final_mse(res.net, plan.problem, plan.train.h, plan.eval_points);
    r.trace.final_mse = r.mse;
  }
  return r;
}

}  // namespace pinnpipe
