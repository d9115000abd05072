#pragma once

// Translation benchmark over a Task2PDE-style JSONL corpus: run the PDE agent
// on every description and score the chosen PDE against the ground truth.
//
// Dataset line: {"id", "pde_family", "level" (1..4), "description",
//                "ground_truth" (PDE object)}

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"
#include "pinnpipe/pde.hpp"
#include "pinnpipe/pde_agent.hpp"
#include "pinnpipe/provider.hpp"
#include "pinnpipe/semantic.hpp"

namespace pinnpipe {

struct TaskSample {
  std::string id;
  std::string family;
  int level = 1;
  std::string description;
  CanonicalPde ground_truth;
  nlohmann::json ground_truth_json;
};

inline TaskSample sample_from_json(const nlohmann::json& j) {
  TaskSample s;
  s.id = j.at("id").get<std::string>();
  s.family = j.at("pde_family").get<std::string>();
  s.level = j.at("level").get<int>();
  if (s.level < 1 || s.level > 4) throw Error("level must be 1..4, got " + std::to_string(s.level));
  s.description = j.at("description").get<std::string>();
  s.ground_truth_json = j.at("ground_truth");
  s.ground_truth = pde_from_json(s.ground_truth_json);
  const auto check = validate_template(s.ground_truth);
  if (!check.valid) throw Error("ground truth rejected: " + check.reason);
  return s;
}

/// Parses JSONL text; blank lines are skipped. Raises DatasetMalformed with
/// the 1-based line number of the first bad line.
inline std::vector<TaskSample> parse_dataset(const std::string& text) {
  std::vector<TaskSample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DatasetMalformed(n, e.what());
    }
    if (!ids.insert(out.back().id).second) throw DatasetMalformed(n, "duplicate id " + out.back().id);
  }
  return out;
}

inline std::vector<TaskSample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_dataset(ss.str());
}

struct BenchOptions {
  int K = 5;
  double alpha = 0.6;
  CompletionParams params;
  unsigned jobs = 1;
};

struct BenchRow {
  std::string id;
  std::string family;
  int level = 1;
  double sym = 0.0;
  double sem = 0.0;
  bool exact = false;
  std::string error;  // non-empty: sample failed, scores are zero
};

struct Aggregate {
  std::size_t count = 0;
  std::size_t failed = 0;
  double sym_mean = 0.0;
  double sem_mean = 0.0;
  double exact_rate = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::map<int, Aggregate> per_level;
  std::map<std::string, Aggregate> per_family;
  std::map<std::string, std::map<int, Aggregate>> per_family_level;
};

inline BenchRow evaluate_sample(const TaskSample& s, CompletionProvider& provider, const BenchOptions& opt) {
  BenchRow row{s.id, s.family, s.level};
  try {
    CandidateSet set;
    set.alpha = opt.alpha;
    set.raw = formulate_candidates(s.description, opt.K, provider, opt.params);
    const CanonicalPde& chosen = consensus_select(set);
    row.sym = sym_score(chosen, s.ground_truth);
    row.sem = sem_score(summarize(chosen), summarize(s.ground_truth));
    row.exact = row.sym == 1.0;
  } catch (const Error& e) {
    row.error = e.what();
  }
  return row;
}

namespace detail {

inline void add(Aggregate& a, const BenchRow& r) {
  ++a.count;
  if (!r.error.empty()) ++a.failed;
  a.sym_mean += r.sym;
  a.sem_mean += r.sem;
  a.exact_rate += r.exact ? 1.0 : 0.0;
}

inline void finish(Aggregate& a) {
  if (a.count == 0) return;
  const double n = static_cast<double>(a.count);
  a.sym_mean /= n;
  a.sem_mean /= n;
  a.exact_rate /= n;
}

}  // namespace detail

/// Aggregates in a fixed (id) order so permuting the dataset leaves them
/// bit-identical.
inline void aggregate(BenchReport& rep) {
  rep.per_level.clear();
  rep.per_family.clear();
  rep.per_family_level.clear();
  std::vector<const BenchRow*> sorted;
  for (const auto& r : rep.rows) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const BenchRow* a, const BenchRow* b) { return a->id < b->id; });
  for (const auto* r : sorted) {
    detail::add(rep.per_level[r->level], *r);
    detail::add(rep.per_family[r->family], *r);
    detail::add(rep.per_family_level[r->family][r->level], *r);
  }
  for (auto& [k, a] : rep.per_level) detail::finish(a);
  for (auto& [k, a] : rep.per_family) detail::finish(a);
  for (auto& [f, m] : rep.per_family_level)
    for (auto& [k, a] : m) detail::finish(a);
}

/// One row per sample, in dataset order. Provider failures mark the sample
/// and the run continues.
inline BenchReport evaluate(const std::vector<TaskSample>& dataset, CompletionProvider& provider, const BenchOptions& opt = {}) {
  BenchReport rep;
  rep.rows.resize(dataset.size());
  const unsigned jobs = std::max(1u, std::min<unsigned>(opt.jobs, static_cast<unsigned>(dataset.size())));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < dataset.size(); ++i) rep.rows[i] = evaluate_sample(dataset[i], provider, opt);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < jobs; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < dataset.size(); i += jobs) rep.rows[i] = evaluate_sample(dataset[i], provider, opt);
      });
    for (auto& t : pool) t.join();
  }
  aggregate(rep);
  return rep;
}

inline nlohmann::json to_json(const Aggregate& a) {
  return {{"count", a.count},
          {"failed", a.failed},
          {"sym_mean", a.sym_mean},
          {"sem_mean", a.sem_mean},
          {"exact_match_rate", a.exact_rate}};
}

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json levels = nlohmann::json::object(), families = nlohmann::json::object(), both = nlohmann::json::object();
  for (const auto& [k, a] : r.per_level) levels[std::to_string(k)] = to_json(a);
  for (const auto& [k, a] : r.per_family) families[k] = to_json(a);
  for (const auto& [f, m] : r.per_family_level)
    for (const auto& [k, a] : m) both[f][std::to_string(k)] = to_json(a);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"id", row.id}, {"family", row.family}, {"level", row.level},
                     {"sym", row.sym}, {"sem", row.sem}, {"exact", row.exact}};
    if (!row.error.empty()) j["error"] = row.error;
    rows.push_back(std::move(j));
  }
  return {{"per_level", levels}, {"per_family", families}, {"per_family_level", both}, {"rows", rows}};
}

inline std::string to_csv(const BenchReport& r) {
  std::string out = "id,family,level,sym,sem,exact\n";
  char buf[64];
  for (const auto& row : r.rows) {
    out += row.id + "," + row.family + "," + std::to_string(row.level) + ",";
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,", row.sym, row.sem);
    out += buf;
    out += row.exact ? "1\n" : "0\n";
  }
  return out;
}

/// Fixture document answering every formulation prompt of `dataset` with
/// the sample's ground truth, or with answers[family] when present.
inline nlohmann::json bench_fixtures(const std::vector<TaskSample>& dataset, const BenchOptions& opt,
                                     const std::map<std::string, nlohmann::json>& answers = {}) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : dataset) {
    auto it = answers.find(s.family);
    const nlohmann::json& pde = it == answers.end() ? s.ground_truth_json : it->second;
    const std::string text = "Final answer:\n```json\n" + pde.dump() + "\n```\n";
    for (int k = 0; k < opt.K; ++k)
      out.push_back({{"prompt", formulation_prompt(s.description, k, opt.K)},
                     {"params", {{"temperature", opt.params.temperature}, {"max_length", opt.params.max_length}}},
                     {"responses", {text}}});
  }
  return out;
}

}  // namespace pinnpipe
