// pinnpipe: command-line front end for the pipeline, its agents and the bench.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pinnpipe/pinnpipe.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pinnpipe;

namespace {

struct Common {
  std::string config;
  std::string provider = "mock";
  std::string fixtures;
  std::optional<std::uint64_t> seed;
  std::string out;
};

PipelineConfig load_common_config(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  validate(cfg);
  return cfg;
}

std::unique_ptr<CompletionProvider> make_provider(const Common& c) {
  if (c.provider == "http") {
    auto opt = HttpProvider::options_from_env();
    if (opt.url.empty()) throw ProviderUnavailable("PINNPIPE_PROVIDER_URL is not set");
    return std::make_unique<HttpProvider>(opt);
  }
  auto mock = std::make_unique<MockProvider>();
  if (!c.fixtures.empty()) {
    if (fs::is_directory(c.fixtures)) mock->load_directory(c.fixtures);
    else mock->load_file(c.fixtures);
  }
  return mock;
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_text_file(p));
  } catch (const json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

// Prefix first, then infix; either way the canonical prefix form is printed.
int validate_residual(const std::string& text) {
  std::optional<Expr> e;
  std::string prefix_error;
  try {
    e = from_prefix(text);
  } catch (const Error& err) {
    prefix_error = err.what();
  }
  if (!e) {
    try {
      e = parse(text);
    } catch (const Error& err) {
      std::cerr << "invalid residual: " << err.what() << " (as prefix: " << prefix_error << ")\n";
      return 2;
    }
  }
  const Expr c = canonicalize(*e);
  if (!well_formed(c)) {
    std::cerr << "invalid residual: not well formed\n";
    return 2;
  }
  std::cout << to_prefix(c) << "\n";
  return 0;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Pipeline configuration JSON");
  app->add_option("--provider", c.provider, "Completion backend")->check(CLI::IsMember({"mock", "http"}));
  app->add_option("--fixtures", c.fixtures, "Fixture file or directory for the mock provider");
  app->add_option("--seed", c.seed, "Override the configured seed");
  app->add_option("--out", c.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Natural-language PDE tasks to trained PINNs"};
  app.require_subcommand(1);
  Common common;

  auto* formulate = app.add_subcommand("formulate", "Run the PDE agent on a task description");
  std::string desc_file, residual;
  bool validate_only = false;
  formulate->add_option("input", desc_file, "Description file, or the residual with --validate")->required();
  formulate->add_flag("--validate", validate_only, "Only check that the residual parses and print its canonical form");
  add_common(formulate, common);

  auto* select = app.add_subcommand("select-arch", "Pick an architecture for a PDE");
  std::string pde_file;
  select->add_option("pde", pde_file, "PDE JSON file")->required();
  add_common(select, common);

  auto* generate = app.add_subcommand("generate", "Generate, assemble and write a program bundle");
  std::string arch;
  generate->add_option("pde", pde_file, "PDE JSON file")->required();
  generate->add_option("arch", arch, "Architecture name")->required();
  add_common(generate, common);

  auto* run = app.add_subcommand("run", "Run the full pipeline on a task description");
  run->add_option("description", desc_file, "Description file")->required();
  add_common(run, common);

  auto* score = app.add_subcommand("score-trace", "Score a LossTrace");
  std::string trace_file;
  double mse = 0.0;
  std::size_t params = 0, max_params = 0;
  int steps = 0;
  score->add_option("trace", trace_file, "LossTrace JSONL file")->required();
  score->add_option("--mse", mse, "Solution error of the run")->required();
  score->add_option("--params", params, "Trainable parameter count")->required();
  score->add_option("--max-params", max_params, "Largest parameter count in the comparison (default: --params)");
  score->add_option("--steps", steps, "Step budget (default: trace length)");
  add_common(score, common);

  auto* bench = app.add_subcommand("bench", "Score the PDE agent on a dataset");
  std::string dataset;
  unsigned jobs = 1;
  bench->add_option("dataset", dataset, "Dataset JSONL")->required();
  bench->add_option("--jobs", jobs, "Parallel samples")->check(CLI::PositiveNumber);
  add_common(bench, common);

  auto* replay_cmd = app.add_subcommand("replay", "Rerun a recorded report and compare");
  std::string report_file;
  replay_cmd->add_option("report", report_file, "report.json of a mock-provider run")->required();
  add_common(replay_cmd, common);

  auto* fixtures = app.add_subcommand("fixtures", "Author fixture documents");
  fixtures->require_subcommand(1);
  std::string output;
  auto* fx_script = fixtures->add_subcommand("script", "Record the fixtures of a scripted run");
  std::string script_file;
  fx_script->add_option("script", script_file, "Script JSON")->required();
  fx_script->add_option("-o,--output", output, "Fixture file to write")->required();
  auto* fx_bench = fixtures->add_subcommand("bench", "Fixtures answering every dataset prompt");
  std::vector<std::string> answers;
  fx_bench->add_option("dataset", dataset, "Dataset JSONL")->required();
  fx_bench->add_option("-o,--output", output, "Fixture file to write")->required();
  fx_bench->add_option("--answer", answers, "FAMILY=pde.json: answer every FAMILY sample with this PDE");
  fx_bench->add_option("--config", common.config, "Configuration supplying K and sampling params");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*formulate) {
      if (validate_only) return validate_residual(desc_file);
      const auto cfg = load_common_config(common);
      auto provider = make_provider(common);
      CandidateSet set;
      set.alpha = cfg.pde_agent.alpha;
      set.raw = formulate_candidates(read_text_file(desc_file), cfg.pde_agent.K, *provider, cfg.pde_agent.params);
      const CanonicalPde& chosen = consensus_select(set);
      std::cout << json{{"candidates", to_json(set)}, {"pde", to_json(chosen)}}.dump(2) << "\n";
      return 0;
    }
    if (*select) {
      const auto cfg = load_common_config(common);
      const CanonicalPde pde = pde_from_json(read_json_file(pde_file));
      ArchRegistry registry = cfg.pinn_agent.capabilities.empty()
                                  ? ArchRegistry::standard()
                                  : ArchRegistry::from_json(read_json_file(cfg.pinn_agent.capabilities));
      std::vector<HistoryRecord> records;
      if (!cfg.pinn_agent.history.empty()) records = HistoryCache(cfg.pinn_agent.history).records();
      SelectionOptions opt;
      opt.weights = cfg.pinn_agent.weights;
      opt.coefficients = cfg.pinn_agent.coefficients;
      opt.reuse_threshold = cfg.pinn_agent.reuse_threshold;
      opt.alpha = cfg.pde_agent.alpha;
      std::cout << to_json(select_architecture(pde, registry, records, opt)).dump(2) << "\n";
      return 0;
    }
    if (*generate) {
      if (common.out.empty()) throw ConfigInvalid("generate needs --out");
      const auto cfg = load_common_config(common);
      auto provider = make_provider(common);
      GenerationContext ctx;
      ctx.pde = pde_from_json(read_json_file(pde_file));
      ctx.arch = arch;
      ctx.net = cfg.trainer.net;
      ctx.net.activation = builtin_activation(arch);
      ctx.train = cfg.trainer.train;
      ctx.train.seed = cfg.seed;
      ctx.eval_points = cfg.trainer.eval_points;
      ctx.target = cfg.code_agent.target;
      CodeAgent agent(provider.get(), cfg.code_agent.provider_modules, cfg.code_agent.params);
      const auto bundle = assemble(agent.generate_all(ctx), ctx.pde.residual, cfg.code_agent.verify_threshold);
      write_bundle(bundle, common.out);
      std::cout << bundle.manifest().dump(2) << "\n";
      return 0;
    }
    if (*run) {
      const auto cfg = load_common_config(common);
      auto provider = make_provider(common);
      PipelineEnv env;
      env.provider = provider.get();
      env.out_dir = common.out;
      const RunReport rep = run_pipeline(read_text_file(desc_file), cfg, env);
      const json j = to_json(rep);
      if (!common.out.empty()) write_file(fs::path(common.out) / "report.json", j.dump(2) + "\n");
      std::cout << "status: " << rep.status << " (" << (rep.status == "done" ? rep.termination : rep.failure) << ")\n"
                << "iterations: " << rep.iterations.size() << "\n";
      if (rep.final_score) std::cout << "score: " << rep.final_score->S << "\n";
      return rep.status == "done" ? 0 : 1;
    }
    if (*score) {
      const auto cfg = load_common_config(common);
      const LossTrace trace = trace_from_jsonl(read_text_file(trace_file));
      const int n = steps > 0 ? steps : static_cast<int>(trace.records.size());
      const auto q = score_run(trace, mse, params, max_params ? max_params : params, n, cfg.feedback);
      std::cout << to_json(q).dump(2) << "\n";
      return 0;
    }
    if (*bench) {
      const auto cfg = load_common_config(common);
      auto provider = make_provider(common);
      BenchOptions opt{cfg.pde_agent.K, cfg.pde_agent.alpha, cfg.pde_agent.params, jobs};
      const auto rep = evaluate(load_dataset(dataset), *provider, opt);
      const json j = to_json(rep);
      if (!common.out.empty()) {
        write_file(fs::path(common.out) / "bench.json", j.dump(2) + "\n");
        write_file(fs::path(common.out) / "bench.csv", to_csv(rep));
      }
      std::cout << json{{"per_level", j.at("per_level")}, {"per_family", j.at("per_family")}}.dump(2) << "\n";
      return 0;
    }
    if (*replay_cmd) {
      auto provider = make_provider(common);
      json report = read_json_file(report_file);
      if (common.seed) report["seed"] = *common.seed;
      PipelineEnv env;
      env.out_dir = common.out;
      replay(report, *provider, env);
      std::cout << "replay identical\n";
      return 0;
    }
    if (*fx_script) {
      write_file(output, record_fixtures(load_script(script_file)).dump(2) + "\n");
      return 0;
    }
    if (*fx_bench) {
      const auto cfg = load_common_config(common);
      std::map<std::string, json> by_family;
      for (const auto& a : answers) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw ConfigInvalid("--answer expects FAMILY=pde.json");
        by_family[a.substr(0, eq)] = read_json_file(a.substr(eq + 1));
      }
      BenchOptions opt{cfg.pde_agent.K, cfg.pde_agent.alpha, cfg.pde_agent.params, 1};
      write_file(output, bench_fixtures(load_dataset(dataset), opt, by_family).dump(2) + "\n");
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
