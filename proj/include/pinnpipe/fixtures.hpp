#pragma once

// Fixture authoring: a script pairs a task with scripted provider rules; running
// the pipeline against it through a RecordingProvider yields a prompt-keyed
// fixture document that MockProvider replays.
//
// Script file: {"description" | "description_file", "config" | "config_file",
//               "rules": [{"match", "responses"}]}
// Relative file paths resolve against the script's directory.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "pinnpipe/config.hpp"
#include "pinnpipe/error.hpp"
#include "pinnpipe/orchestrator.hpp"
#include "pinnpipe/provider.hpp"

namespace pinnpipe {

struct FixtureScript {
  std::string description;
  PipelineConfig config;
  nlohmann::json rules = nlohmann::json::array();
};

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline FixtureScript load_script(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigInvalid("script " + path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  FixtureScript s;
  if (j.contains("description")) s.description = j.at("description").get<std::string>();
  else if (j.contains("description_file")) s.description = read_text_file(base / j.at("description_file").get<std::string>());
  else throw ConfigInvalid("script " + path.string() + " lacks a description");
  if (j.contains("config")) s.config = config_from_json(j.at("config"));
  else if (j.contains("config_file")) s.config = load_config(base / j.at("config_file").get<std::string>());
  s.rules = j.value("rules", nlohmann::json::array());
  return s;
}

/// Runs the script once and returns the recorded fixtures.
inline nlohmann::json record_fixtures(const FixtureScript& s) {
  ScriptedProvider scripted;
  scripted.load_json({{"rules", s.rules}});
  RecordingProvider rec(scripted);
  PipelineEnv env;
  env.provider = &rec;
  env.history_limit = 0;  // recording must not touch history or capability files
  run_pipeline(s.description, s.config, env);
  return rec.fixtures_json();
}

}  // namespace pinnpipe
