#pragma once

// Architecture selection: PDE features, capability registry, weighted
// cosine matching and the history cache.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"
#include "pinnpipe/pde.hpp"
#include "pinnpipe/pde_agent.hpp"

namespace pinnpipe {

struct PdeFeatures {
  double per = 0.0;
  double geo = 0.0;
  double ms = 0.0;

  std::array<double, 3> as_array() const { return {per, geo, ms}; }
};

struct ArchCapability {
  std::string name;
  double per = 0.1;
  double geo = 0.1;
  double ms = 0.1;

  std::array<double, 3> as_array() const { return {per, geo, ms}; }
};

struct MatchWeights {
  double per = 1.0;
  double geo = 2.0;
  double ms = 3.0;
};

struct FeatureCoefficients {
  double lambda_omega = 0.5;
  double lambda_disc = 0.5;
  double a = 2.0;  // order >= 3
  double b = 2.0;  // nonlinear
  double c = 1.0;  // log(1 + Re/Pe)
  double e = 2.0;  // nonlocal
  double eta = 0.5;
};

inline double geometry_code(GeometryClass g) {
  switch (g) {
    case GeometryClass::Rectilinear: return 0.0;
    case GeometryClass::Curved: return 0.3;
    case GeometryClass::MultiComponent: return 0.6;
    case GeometryClass::Irregular: return 0.9;
  }
  return 0.0;
}

inline double discretization_code(DiscretizationClass d) {
  switch (d) {
    case DiscretizationClass::Cartesian: return 0.0;
    case DiscretizationClass::Curvilinear: return 0.5;
    case DiscretizationClass::Unstructured: return 0.8;
  }
  return 0.0;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// The larger of Re and Pe when both are present; 0 when neither is.
inline double transport_number(const PdeMetadata& m) {
  if (m.reynolds && m.peclet) return std::max(*m.reynolds, *m.peclet);
  if (m.reynolds) return *m.reynolds;
  if (m.peclet) return *m.peclet;
  return 0.0;
}

inline PdeFeatures extract_features(const CanonicalPde& pde, const FeatureCoefficients& k = {}) {
  if (pde.domain.dims < 1) throw PdeFormatError("domain must have at least one spatial dimension");
  PdeFeatures f;
  std::size_t periodic = 0;
  for (int a : pde.domain.periodic_axes)
    if (a >= 1 && a <= pde.domain.dims) ++periodic;
  f.per = static_cast<double>(periodic) / pde.domain.dims;
  f.geo = std::clamp(k.lambda_omega * geometry_code(pde.domain.geometry) +
                         k.lambda_disc * discretization_code(pde.domain.discretization),
                     0.0, 1.0);
  double arg = k.a * (pde.meta.max_order >= 3 ? 1.0 : 0.0) + k.b * (pde.meta.linear ? 0.0 : 1.0) +
               k.c * std::log1p(transport_number(pde.meta)) + k.e * (pde.meta.nonlocal ? 1.0 : 0.0);
  f.ms = logistic(arg) * k.eta;
  return f;
}

// ---------------------------------------------------------------------------
// Capability registry
// ---------------------------------------------------------------------------

class ArchRegistry {
 public:
  ArchRegistry() = default;
  explicit ArchRegistry(std::vector<ArchCapability> entries) {
    for (auto& e : entries) add(std::move(e));
  }

  /// The shipped table.
  static ArchRegistry standard() {
    return ArchRegistry({{"Fourier-MLP", 0.9, 0.2, 0.5},
                         {"GNN", 0.1, 0.8, 0.5},
                         {"Transformer", 0.2, 0.5, 0.7},
                         {"CNN", 0.2, 0.4, 0.3},
                         {"MLP", 0.1, 0.2, 0.4}});
  }

  void add(ArchCapability c) {
    for (double v : c.as_array())
      if (!(v >= 0.1 && v <= 0.9)) throw ConfigInvalid("capability of " + c.name + " outside [0.1, 0.9]");
    if (find(c.name)) throw ConfigInvalid("duplicate architecture " + c.name);
    entries_.push_back(std::move(c));
  }

  const ArchCapability& at(const std::string& name) const {
    if (auto* c = find(name)) return *c;
    throw UnknownArchitecture(name);
  }

  ArchCapability& at(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return e;
    throw UnknownArchitecture(name);
  }

  const std::vector<ArchCapability>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  bool contains(const std::string& name) const { return find(name) != nullptr; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries_) j.push_back({{"name", e.name}, {"capability", {e.per, e.geo, e.ms}}});
    return j;
  }

  static ArchRegistry from_json(const nlohmann::json& j) {
    ArchRegistry r;
    for (const auto& e : j) {
      auto v = e.at("capability").get<std::vector<double>>();
      if (v.size() != 3) throw ConfigInvalid("capability vectors have three components");
      r.add({e.at("name").get<std::string>(), v[0], v[1], v[2]});
    }
    return r;
  }

 private:
  const ArchCapability* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }
  std::vector<ArchCapability> entries_;
};

inline ArchCapability capability_of(const std::string& name, const ArchRegistry& registry = ArchRegistry::standard()) {
  return registry.at(name);
}

/// Weighted cosine (W phi).psi / (|W phi| |psi|).
inline double match_score(const PdeFeatures& phi, const ArchCapability& psi, const MatchWeights& w) {
  const std::array<double, 3> wp{w.per * phi.per, w.geo * phi.geo, w.ms * phi.ms};
  const auto p = psi.as_array();
  double dot = 0, nw = 0, np = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    dot += wp[i] * p[i];
    nw += wp[i] * wp[i];
    np += p[i] * p[i];
  }
  if (nw == 0.0) throw DegenerateVector("weighted feature vector has zero norm");
  if (np == 0.0) throw DegenerateVector("capability vector of " + psi.name + " has zero norm");
  return dot / (std::sqrt(nw) * std::sqrt(np));
}

/// Index of the best-scoring registry entry; ties keep registry order.
inline std::size_t argmax_architecture(const PdeFeatures& phi, const ArchRegistry& registry, const MatchWeights& w,
                                       std::vector<double>* scores = nullptr) {
  if (registry.empty()) throw ConfigInvalid("architecture registry is empty");
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < registry.entries().size(); ++i) {
    double s = match_score(phi, registry.entries()[i], w);
    if (scores) scores->push_back(s);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

/// Moves each capability component toward the realized quality score, in
/// proportion to how strongly the PDE exercised that feature.
inline void refine_capability(ArchCapability& c, const PdeFeatures& phi, double score, double rate) {
  auto step = [&](double& a, double f) { a = std::clamp((1.0 - rate * f) * a + rate * f * score, 0.1, 0.9); };
  step(c.per, phi.per);
  step(c.geo, phi.geo);
  step(c.ms, phi.ms);
}

// ---------------------------------------------------------------------------
// History cache
// ---------------------------------------------------------------------------

struct HistoryRecord {
  CanonicalPde pde;
  std::string arch;
  double score = 0.0;
  std::string timestamp;
};

inline nlohmann::json to_json(const HistoryRecord& r) {
  return {{"pde", to_json(r.pde)}, {"arch", r.arch}, {"score", r.score}, {"timestamp", r.timestamp}};
}

inline std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace detail {

class FileLock {
 public:
  FileLock(const std::filesystem::path& path, int flags, int op) {
    fd_ = ::open(path.c_str(), flags, 0644);
    if (fd_ < 0) throw Error("cannot open " + path.string());
    if (::flock(fd_, op) != 0) {
      ::close(fd_);
      throw Error("cannot lock " + path.string());
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;
  int fd() const { return fd_; }

 private:
  int fd_ = -1;
};

}  // namespace detail

/// JSONL history file. Appends take an exclusive flock; loads a shared one.
class HistoryCache {
 public:
  HistoryCache() = default;
  explicit HistoryCache(std::filesystem::path path) : path_(std::move(path)) { load(); }

  const std::vector<HistoryRecord>& records() const { return records_; }

  void load() {
    records_.clear();
    if (path_.empty() || !std::filesystem::exists(path_)) return;
    detail::FileLock lock(path_, O_RDONLY, LOCK_SH);
    std::ifstream in(path_);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        auto j = nlohmann::json::parse(line);
        HistoryRecord r{pde_from_json(j.at("pde")), j.at("arch").get<std::string>(), j.at("score").get<double>(),
                        j.value("timestamp", std::string())};
        if (!std::isfinite(r.score)) throw Error("non-finite score");
        records_.push_back(std::move(r));
      } catch (const std::exception& e) {
        throw Error("history " + path_.string() + " line " + std::to_string(n) + ": " + e.what());
      }
    }
  }

  void append(HistoryRecord r) {
    if (!std::isfinite(r.score)) throw Error("history score must be finite");
    if (!path_.empty()) {
      if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
      detail::FileLock lock(path_, O_WRONLY | O_CREAT | O_APPEND, LOCK_EX);
      std::string line = to_json(r).dump() + "\n";
      if (::write(lock.fd(), line.data(), line.size()) != static_cast<ssize_t>(line.size()))
        throw Error("short write to " + path_.string());
    }
    records_.push_back(std::move(r));
  }

 private:
  std::filesystem::path path_;
  std::vector<HistoryRecord> records_;
};

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

enum class Provenance { Reused, Matched };

inline std::string to_string(Provenance p) { return p == Provenance::Reused ? "reused" : "matched"; }

struct ArchSelection {
  std::string arch;
  Provenance provenance = Provenance::Matched;
  PdeFeatures features;
  std::vector<std::pair<std::string, double>> scores;  // registry order
  std::optional<std::size_t> history_index;
  double reuse_similarity = 0.0;
};

struct SelectionOptions {
  MatchWeights weights;
  FeatureCoefficients coefficients;
  double reuse_threshold = 0.95;
  double alpha = 0.6;
  std::vector<std::string> excluded;  // skipped by reuse and by matching
};

inline ArchSelection select_architecture(const CanonicalPde& pde, const ArchRegistry& registry,
                                         const std::vector<HistoryRecord>& history, const SelectionOptions& opt = {}) {
  if (registry.empty()) throw ConfigInvalid("architecture registry is empty");
  ArchSelection sel;
  sel.features = extract_features(pde, opt.coefficients);
  for (const auto& c : registry.entries()) sel.scores.emplace_back(c.name, match_score(sel.features, c, opt.weights));
  auto excluded = [&](const std::string& n) {
    return std::find(opt.excluded.begin(), opt.excluded.end(), n) != opt.excluded.end();
  };
  for (std::size_t i = history.size(); i-- > 0;) {
    if (excluded(history[i].arch)) continue;
    double s = composite_score(pde, history[i].pde, opt.alpha);
    if (s >= opt.reuse_threshold) {
      sel.arch = history[i].arch;
      sel.provenance = Provenance::Reused;
      sel.history_index = i;
      sel.reuse_similarity = s;
      return sel;
    }
  }
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < sel.scores.size(); ++i) {
    if (excluded(sel.scores[i].first)) continue;
    if (!best || sel.scores[i].second > sel.scores[*best].second) best = i;
  }
  if (!best) throw ConfigInvalid("every architecture is excluded");
  sel.arch = sel.scores[*best].first;
  return sel;
}

inline nlohmann::json to_json(const ArchSelection& s) {
  nlohmann::json scores = nlohmann::json::object();
  nlohmann::json order = nlohmann::json::array();
  for (const auto& [n, v] : s.scores) {
    scores[n] = v;
    order.push_back(n);
  }
  nlohmann::json j{{"arch", s.arch},
                   {"provenance", to_string(s.provenance)},
                   {"features", {s.features.per, s.features.geo, s.features.ms}},
                   {"scores", scores},
                   {"registry_order", order}};
  if (s.history_index) {
    j["history_index"] = *s.history_index;
    j["reuse_similarity"] = s.reuse_similarity;
  }
  return j;
}

}  // namespace pinnpipe
