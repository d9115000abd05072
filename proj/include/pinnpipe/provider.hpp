#pragma once

// Completion providers. Every step that would consult a language model goes
// through CompletionProvider; the mock backend answers from fixture files.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"

namespace pinnpipe {

struct CompletionParams {
  double temperature = 0.7;
  int max_length = 2048;
};

/// One answered request, as recorded in run reports.
struct ProviderCall {
  std::string key;
  std::size_t index = 0;  // position in the fixture's response list
  int retries = 0;
};

class CompletionProvider {
 public:
  virtual ~CompletionProvider() = default;
  virtual std::string complete(const std::string& prompt, const CompletionParams& params) = 0;
  virtual std::string name() const = 0;

  std::vector<ProviderCall> calls() const {
    std::lock_guard<std::mutex> lock(log_mutex_);
    return log_;
  }
  void clear_calls() {
    std::lock_guard<std::mutex> lock(log_mutex_);
    log_.clear();
  }

 protected:
  void record(ProviderCall c) {
    std::lock_guard<std::mutex> lock(log_mutex_);
    log_.push_back(std::move(c));
  }

 private:
  mutable std::mutex log_mutex_;
  std::vector<ProviderCall> log_;
};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Fixture key of a request: FNV-1a 64 of the compact JSON
/// {"max_length":..,"prompt":..,"temperature":..} as 16 hex digits.
inline std::string request_key(const std::string& prompt, const CompletionParams& p) {
  nlohmann::json j{{"prompt", prompt}, {"temperature", p.temperature}, {"max_length", p.max_length}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

/// Fixture-backed provider.
///
/// A fixture file holds a JSON array (or {"fixtures": [...]}) of entries
///   {"key": "<hex>", "responses": ["...", ...]}
///   {"prompt": "...", "params": {"temperature": t, "max_length": n}, "responses": [...]}
/// "response" may replace a one-element "responses". Repeated requests walk
/// the list; the last response repeats once the list is exhausted.
class MockProvider : public CompletionProvider {
 public:
  MockProvider() = default;

  void add(const std::string& key, std::vector<std::string> responses) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto& slot = fixtures_[key];
    slot.responses = std::move(responses);
    slot.next = 0;
  }

  void add(const std::string& prompt, const CompletionParams& params, std::vector<std::string> responses) {
    add(request_key(prompt, params), std::move(responses));
  }

  void load_json(const nlohmann::json& j) {
    const nlohmann::json& list = j.is_object() && j.contains("fixtures") ? j.at("fixtures") : j;
    if (!list.is_array()) throw Error("fixture document must be an array of entries");
    for (const auto& e : list) {
      std::string key;
      if (e.contains("key")) {
        key = e.at("key").get<std::string>();
      } else if (e.contains("prompt")) {
        CompletionParams p;
        if (e.contains("params")) {
          p.temperature = e.at("params").value("temperature", p.temperature);
          p.max_length = e.at("params").value("max_length", p.max_length);
        }
        key = request_key(e.at("prompt").get<std::string>(), p);
      } else {
        throw Error("fixture entry needs 'key' or 'prompt'");
      }
      std::vector<std::string> responses;
      if (e.contains("responses")) responses = e.at("responses").get<std::vector<std::string>>();
      else if (e.contains("response")) responses.push_back(e.at("response").get<std::string>());
      if (responses.empty()) throw Error("fixture " + key + " has no responses");
      add(key, std::move(responses));
    }
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open fixture file " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error("fixture file " + path.string() + ": " + e.what());
    }
    load_json(j);
  }

  /// Loads every *.json file of `dir` in name order.
  void load_directory(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error("fixture directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) load_file(f);
  }

  bool has(const std::string& key) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return fixtures_.count(key) > 0;
  }

  /// Rewinds every response list.
  void rewind() {
    std::lock_guard<std::mutex> lock(mutex_);
    for (auto& [k, f] : fixtures_) f.next = 0;
  }

  std::string complete(const std::string& prompt, const CompletionParams& params) override {
    const std::string key = request_key(prompt, params);
    std::string text;
    std::size_t index = 0;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = fixtures_.find(key);
      if (it == fixtures_.end()) throw FixtureMissing(key);
      auto& f = it->second;
      index = std::min(f.next, f.responses.size() - 1);
      text = f.responses[index];
      if (f.next < f.responses.size()) ++f.next;
    }
    record({key, index, 0});
    return text;
  }

  std::string name() const override { return "mock"; }

 private:
  struct Fixture {
    std::vector<std::string> responses;
    std::size_t next = 0;
  };
  mutable std::mutex mutex_;
  std::map<std::string, Fixture> fixtures_;
};

/// Answers by rule instead of by key: the first rule whose `match` occurs in
/// the prompt serves its responses in order, repeating the last one. Used to
/// author fixture sets, together with RecordingProvider.
class ScriptedProvider : public CompletionProvider {
 public:
  struct Rule {
    std::string match;
    std::vector<std::string> responses;
    std::size_t next = 0;
  };

  void add(std::string match, std::vector<std::string> responses) {
    if (responses.empty()) throw Error("script rule '" + match + "' has no responses");
    std::lock_guard<std::mutex> lock(mutex_);
    rules_.push_back({std::move(match), std::move(responses), 0});
  }

  /// {"rules": [{"match": "...", "responses": ["..."]}, ...]}
  void load_json(const nlohmann::json& j) {
    for (const auto& r : j.at("rules")) add(r.at("match").get<std::string>(), r.at("responses").get<std::vector<std::string>>());
  }

  std::string complete(const std::string& prompt, const CompletionParams& params) override {
    std::lock_guard<std::mutex> lock(mutex_);
    for (auto& r : rules_) {
      if (prompt.find(r.match) == std::string::npos) continue;
      const std::size_t index = std::min(r.next, r.responses.size() - 1);
      if (r.next < r.responses.size()) ++r.next;
      record({request_key(prompt, params), index, 0});
      return r.responses[index];
    }
    throw FixtureMissing(request_key(prompt, params));
  }

  std::string name() const override { return "scripted"; }

 private:
  std::mutex mutex_;
  std::vector<Rule> rules_;
};

/// Passes requests through to another provider and keeps every exchange, so
/// that a session can be written out as a prompt-form fixture file.
class RecordingProvider : public CompletionProvider {
 public:
  explicit RecordingProvider(CompletionProvider& inner) : inner_(inner) {}

  std::string complete(const std::string& prompt, const CompletionParams& params) override {
    std::string text = inner_.complete(prompt, params);
    std::lock_guard<std::mutex> lock(mutex_);
    const std::string key = request_key(prompt, params);
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.key == key; });
    if (it == entries_.end()) {
      entries_.push_back({key, prompt, params, {}});
      it = std::prev(entries_.end());
    }
    it->responses.push_back(text);
    record({key, it->responses.size() - 1, 0});
    return text;
  }

  std::string name() const override { return inner_.name(); }

  /// Prompt-form fixture document, entries in first-request order.
  nlohmann::json fixtures_json() const {
    std::lock_guard<std::mutex> lock(mutex_);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : entries_) {
      // Collapse a trailing run of identical responses; the mock repeats the last one.
      std::vector<std::string> r = e.responses;
      while (r.size() > 1 && r[r.size() - 1] == r[r.size() - 2]) r.pop_back();
      out.push_back({{"prompt", e.prompt},
                     {"params", {{"temperature", e.params.temperature}, {"max_length", e.params.max_length}}},
                     {"responses", r}});
    }
    return out;
  }

 private:
  struct Entry {
    std::string key;
    std::string prompt;
    CompletionParams params;
    std::vector<std::string> responses;
  };
  CompletionProvider& inner_;
  mutable std::mutex mutex_;
  std::vector<Entry> entries_;
};

}  // namespace pinnpipe
