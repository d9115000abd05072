#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <thread>

#include <httplib.h>

#include "pinnpipe/http.hpp"
#include "pinnpipe/pde_agent.hpp"
#include "pinnpipe/pinn_agent.hpp"
#include "pinnpipe/provider.hpp"
#include "pinnpipe/semantic.hpp"

using namespace pinnpipe;

namespace {

CanonicalPde heat1d() {
  return pde_from_json_text(R"j({"equation": "u_t = 0.1*u_xx",
    "bc": [{"kind": "dirichlet", "axis": 1, "side": "both", "value": "0"}],
    "ic": "sin(pi*x)", "domain": {"dims": 1, "extents": [[0, 1]], "time": [0, 1]}})j");
}

CanonicalPde heat2d() {
  return pde_from_json_text(R"j({"equation": "u_t = 0.1*(u_xx + u_yy)",
    "bc": [{"kind": "dirichlet", "axis": 1, "value": "0"}, {"kind": "dirichlet", "axis": 2, "value": "0"}],
    "ic": "sin(pi*x)*sin(pi*y)", "domain": {"dims": 2, "time": [0, 1]}})j");
}

CanonicalPde wave1d() {
  return pde_from_json_text(R"j({"equation": "u_tt = 0.1*u_xx",
    "bc": [{"kind": "dirichlet", "axis": 1, "value": "0"}],
    "ic": "sin(pi*x)", "domain": {"dims": 1, "time": [0, 1]}})j");
}

std::string fenced(const std::string& body) { return "Reasoning first.\n```json\n" + body + "\n```\n"; }

const char* kHeatBlock =
    R"j({"equation": "u_t = 0.1*u_xx", "bc": [{"kind": "dirichlet", "axis": 1, "value": "0"}], "ic": "sin(pi*x)", "domain": {"dims": 1, "time": [0, 1]}})j";
const char* kWaveBlock =
    R"j({"equation": "u_tt = 0.1*u_xx", "bc": [{"kind": "dirichlet", "axis": 1, "value": "0"}], "ic": "sin(pi*x)", "domain": {"dims": 1, "time": [0, 1]}})j";

}  // namespace

// ---------------------------------------------------------------------------
// Semantic summaries
// ---------------------------------------------------------------------------

TEST(Semantic, HeatTags) {
  auto s = summarize(heat1d());
  EXPECT_EQ(s.tags, (std::set<std::string>{"diffusion"}));
  EXPECT_EQ(s.order, 2);
  EXPECT_TRUE(s.linear);
  EXPECT_FALSE(s.forcing);
  EXPECT_EQ(s.bc_kinds, std::vector<std::string>{"dirichlet"});
}

TEST(Semantic, FamilyTags) {
  EXPECT_EQ(summarize(wave1d()).tags, (std::set<std::string>{"wave"}));
  auto burgers = pde_from_json_text(R"j({"equation": "u_t + u*u_x = 0.01*u_xx", "domain": {"time": [0, 1]}, "ic": "0"})j");
  EXPECT_EQ(summarize(burgers).tags, (std::set<std::string>{"advection-nonlinear", "diffusion"}));
  auto ks = pde_from_json_text(R"j({"equation": "u_t + u*u_x + u_xx + u_xxxx = 0", "domain": {"time": [0, 1]}, "ic": "0"})j");
  EXPECT_EQ(summarize(ks).tags, (std::set<std::string>{"advection-nonlinear", "anti-diffusion", "biharmonic"}));
  auto poisson = pde_from_json_text(R"j({"equation": "u_xx + u_yy = -1", "domain": {"dims": 2}})j");
  auto sp = summarize(poisson);
  EXPECT_EQ(sp.tags, (std::set<std::string>{"elliptic"}));
  EXPECT_TRUE(sp.forcing);
  auto kdv = pde_from_json_text(R"j({"equation": "u_t + 6*u*u_x + u_xxx = 0", "domain": {"time": [0, 1]}, "ic": "0"})j");
  EXPECT_EQ(summarize(kdv).tags, (std::set<std::string>{"advection-nonlinear", "dispersion"}));
  auto react = pde_from_json_text(R"j({"equation": "u_t = u_xx + 2*u + 3*u_x", "domain": {"time": [0, 1]}, "ic": "0"})j");
  EXPECT_EQ(summarize(react).tags, (std::set<std::string>{"advection-linear", "diffusion", "reaction"}));
}

TEST(Semantic, SummaryIgnoresNames) {
  auto a = pde_from_json_text(R"j({"equation": "u_t = 0.1*u_xx", "domain": {"time": [0, 1]}, "ic": "0"})j");
  auto b = pde_from_json_text(R"j({"equation": "T_t = 0.1*T_zz", "domain": {"axes": ["z"], "time": [0, 1]}, "ic": "0"})j");
  EXPECT_EQ(summarize(a), summarize(b));
  EXPECT_DOUBLE_EQ(sem_score(summarize(a), summarize(b)), 1.0);
}

TEST(Semantic, BaselineScores) {
  EXPECT_NEAR(sem_score(summarize(heat1d()), summarize(heat2d())), 0.9, 1e-12);
  EXPECT_NEAR(sem_score(summarize(heat1d()), summarize(wave1d())), 0.5, 1e-12);
  EXPECT_DOUBLE_EQ(jaccard({}, {}), 1.0);
  EXPECT_DOUBLE_EQ(jaccard({"a", "b"}, {"b", "c"}), 1.0 / 3.0);
}

TEST(Semantic, VocabularyMismatchRaises) {
  auto a = summarize(heat1d());
  auto b = a;
  b.vocabulary = kTagVocabularyVersion + 1;
  EXPECT_THROW(sem_score(a, b), Error);
}

TEST(Semantic, EmbeddingProvider) {
  int calls = 0;
  EmbeddingSimilarity emb([&](const std::vector<std::string>& texts) {
    ++calls;
    std::vector<std::vector<double>> out;
    for (const auto& t : texts) out.push_back({t.find("diffusion") != std::string::npos ? 1.0 : 0.0, 1.0});
    return out;
  });
  EXPECT_NEAR(sem_score(summarize(heat1d()), summarize(heat2d()), emb), 1.0, 1e-12);
  EXPECT_NEAR(sem_score(summarize(heat1d()), summarize(wave1d()), emb), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_EQ(calls, 2);
  EmbeddingSimilarity bad([](const std::vector<std::string>&) { return std::vector<std::vector<double>>{{0.0}, {1.0}}; });
  EXPECT_THROW(sem_score(summarize(heat1d()), summarize(wave1d()), bad), DegenerateVector);
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

TEST(Provider, RequestKeyIsStable) {
  CompletionParams p;
  auto k = request_key("hello", p);
  EXPECT_EQ(k.size(), 16u);
  EXPECT_EQ(k, request_key("hello", p));
  CompletionParams q{0.2, 2048};
  EXPECT_NE(k, request_key("hello", q));
  EXPECT_NE(k, request_key("hello!", p));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Provider, MockWalksResponses) {
  MockProvider m;
  m.add("p", {}, {"one", "two"});
  EXPECT_EQ(m.complete("p", {}), "one");
  EXPECT_EQ(m.complete("p", {}), "two");
  EXPECT_EQ(m.complete("p", {}), "two");
  auto calls = m.calls();
  ASSERT_EQ(calls.size(), 3u);
  EXPECT_EQ(calls[0].index, 0u);
  EXPECT_EQ(calls[2].index, 1u);
  m.rewind();
  EXPECT_EQ(m.complete("p", {}), "one");
}

TEST(Provider, MockMissingFixtureNamesKey) {
  MockProvider m;
  const auto key = request_key("absent", {});
  try {
    m.complete("absent", {});
    FAIL() << "expected FixtureMissing";
  } catch (const FixtureMissing& e) {
    EXPECT_EQ(e.key(), key);
  }
}

TEST(Provider, MockLoadsJson) {
  MockProvider m;
  m.load_json(nlohmann::json::parse(R"j({"fixtures": [
      {"prompt": "a", "params": {"temperature": 0.0}, "response": "A"},
      {"key": "00000000000000ff", "responses": ["B"]}]})j"));
  EXPECT_EQ(m.complete("a", {0.0, 2048}), "A");
  EXPECT_TRUE(m.has("00000000000000ff"));
  EXPECT_THROW(m.complete("a", {}), FixtureMissing);
  EXPECT_THROW(m.load_json(nlohmann::json::parse(R"j([{"responses": ["x"]}])j")), Error);
  EXPECT_THROW(m.load_json(nlohmann::json::parse(R"j([{"key": "k", "responses": []}])j")), Error);
}

namespace {

struct TestServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  TestServer() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~TestServer() {
    server.stop();
    thread.join();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port) + path; }
};

HttpOptions fast_options(const std::string& url) {
  HttpOptions o;
  o.url = url;
  o.timeout = std::chrono::milliseconds(5000);
  o.sleep = [](std::chrono::milliseconds) {};
  return o;
}

}  // namespace

TEST(Http, RetriesServerErrorsThenSucceeds) {
  TestServer ts;
  std::atomic<int> hits{0};
  std::string seen_auth;
  nlohmann::json seen_body;
  ts.server.Post("/v1/complete", [&](const httplib::Request& req, httplib::Response& res) {
    if (++hits <= 2) {
      res.status = 503;
      return;
    }
    seen_auth = req.get_header_value("Authorization");
    seen_body = nlohmann::json::parse(req.body);
    res.set_content(R"j({"text": "ok"})j", "application/json");
  });
  auto opt = fast_options(ts.url("/v1/complete"));
  opt.token = "secret";
  HttpProvider p(opt);
  EXPECT_EQ(p.complete("prompt", {0.3, 64}), "ok");
  EXPECT_EQ(hits.load(), 3);
  ASSERT_EQ(p.calls().size(), 1u);
  EXPECT_EQ(p.calls()[0].retries, 2);
  EXPECT_EQ(p.calls()[0].key, request_key("prompt", {0.3, 64}));
  EXPECT_EQ(seen_auth, "Bearer secret");
  EXPECT_EQ(seen_body.at("prompt"), "prompt");
  EXPECT_EQ(seen_body.at("max_length"), 64);
}

TEST(Http, GivesUpAfterMaxRetries) {
  TestServer ts;
  std::atomic<int> hits{0};
  ts.server.Post("/c", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 500;
  });
  auto opt = fast_options(ts.url("/c"));
  opt.max_retries = 2;
  HttpProvider p(opt);
  EXPECT_THROW(p.complete("x", {}), ProviderUnavailable);
  EXPECT_EQ(hits.load(), 3);
}

TEST(Http, ClientErrorsAreNotRetried) {
  TestServer ts;
  std::atomic<int> hits{0};
  ts.server.Post("/c", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 400;
  });
  HttpProvider p(fast_options(ts.url("/c")));
  EXPECT_THROW(p.complete("x", {}), ProviderUnavailable);
  EXPECT_EQ(hits.load(), 1);
}

TEST(Http, Embedder) {
  TestServer ts;
  ts.server.Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
    auto texts = nlohmann::json::parse(req.body).at("texts");
    nlohmann::json vecs = nlohmann::json::array();
    for (const auto& t : texts) vecs.push_back({static_cast<double>(t.get<std::string>().size()), 1.0});
    res.set_content(nlohmann::json{{"vectors", vecs}}.dump(), "application/json");
  });
  auto embed = http_embedder(fast_options(ts.url("/embed")));
  auto v = embed({"ab", "abcd"});
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v[1][0], 4.0);
}

TEST(Http, UnconfiguredProviderIsUnavailable) {
  HttpProvider p(HttpOptions{});
  EXPECT_THROW(p.complete("x", {}), ProviderUnavailable);
}

// ---------------------------------------------------------------------------
// PDE agent
// ---------------------------------------------------------------------------

TEST(PdeAgent, LastFencedBlock) {
  EXPECT_EQ(last_fenced_block("a\n```\nfirst\n```\nb\n```json\n second \n```\n"), "second");
  EXPECT_FALSE(last_fenced_block("no block here").has_value());
  EXPECT_FALSE(last_fenced_block("```\nunterminated").has_value());
}

TEST(PdeAgent, PromptNamesSample) {
  auto p = formulation_prompt("Heat flow in a rod.", 1, 5);
  EXPECT_NE(p.find("Sample 2/5"), std::string::npos);
  EXPECT_NE(p.find("Task:\nHeat flow in a rod."), std::string::npos);
}

TEST(PdeAgent, BareEquationBlock) {
  auto pde = parse_candidate_block("u_t = 0.1*u_xx + u_yy");
  EXPECT_EQ(pde.domain.dims, 2);
  EXPECT_EQ(pde.domain.axes, (std::vector<std::string>{"x", "y"}));
}

TEST(PdeAgent, TemplateRejections) {
  auto pde = heat1d();
  EXPECT_TRUE(validate_template(pde).valid);
  auto no_ic = pde;
  no_ic.initial.reset();
  EXPECT_EQ(validate_template(no_ic).reason, "missing initial condition");
  auto bad_axis = pde;
  bad_axis.boundary[0].axis = 3;
  EXPECT_EQ(validate_template(bad_axis).reason, "axis out of range");
  auto undeclared = pde_from_equation("u_t = u_xx + u_yy");
  undeclared.domain.axes = {"x"};
  undeclared.domain.dims = 1;
  undeclared.domain.extents = {{0, 1}};
  undeclared.initial = Expr::number(0);
  EXPECT_FALSE(validate_template(undeclared).valid);
  auto empty = pde_from_equation("0 = 1");
  EXPECT_EQ(validate_template(empty).reason, "empty residual");
}

TEST(PdeAgent, ConsensusPicksMajority) {
  MockProvider m;
  const std::string desc = "Heat conduction in a thin rod with cold ends.";
  m.add(formulation_prompt(desc, 0, 4), {}, {fenced(kWaveBlock)});
  m.add(formulation_prompt(desc, 1, 4), {}, {fenced(kHeatBlock)});
  m.add(formulation_prompt(desc, 2, 4), {}, {"I cannot answer."});
  m.add(formulation_prompt(desc, 3, 4), {}, {fenced(kHeatBlock)});
  CandidateSet set;
  set.raw = formulate_candidates(desc, 4, m);
  ASSERT_EQ(set.raw.size(), 4u);
  EXPECT_EQ(set.raw[2].rejection, "no fenced equation block");
  const auto& chosen = consensus_select(set);
  EXPECT_EQ(set.surviving, (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(set.surviving[*set.chosen], 1u);
  EXPECT_DOUBLE_EQ(sym_score(chosen, heat1d()), 1.0);
  auto j = to_json(set);
  EXPECT_EQ(j.at("chosen"), 1);
  EXPECT_TRUE(j.at("candidates")[2].at("pde").is_null());
}

TEST(PdeAgent, AllParsesFailed) {
  MockProvider m;
  m.add(formulation_prompt("t", 0, 2), {}, {"```\nu_t = = u\n```"});
  m.add(formulation_prompt("t", 1, 2), {}, {"nothing"});
  EXPECT_THROW(formulate_candidates("t", 2, m), AllParsesFailed);
}

TEST(PdeAgent, EmptySurvivingSetRaises) {
  MockProvider m;
  const char* no_ic = R"j({"equation": "u_t = u_xx", "domain": {"time": [0, 1]}})j";
  m.add(formulation_prompt("t", 0, 1), {}, {fenced(no_ic)});
  CandidateSet set;
  set.raw = formulate_candidates("t", 1, m);
  EXPECT_EQ(set.raw[0].rejection, "missing initial condition");
  EXPECT_THROW(consensus_select(set), EmptyCandidateSet);
}

TEST(PdeAgent, CompositeEndpoints) {
  auto a = heat1d(), b = wave1d();
  EXPECT_DOUBLE_EQ(composite_score(a, b, 1.0), sym_score(a, b));
  EXPECT_DOUBLE_EQ(composite_score(a, b, 0.0), sem_score(summarize(a), summarize(b)));
  EXPECT_NEAR(composite_score(a, b, 0.6), 0.6 * 6.0 / 7.0 + 0.4 * 0.5, 1e-12);
  EXPECT_THROW(composite_score(a, b, 1.5), ConfigInvalid);
}

TEST(PdeAgent, ConsensusIsPermutationInvariant) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t m = 2 + rng() % 6;
    std::vector<std::vector<double>> S(m, std::vector<double>(m, 1.0));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) S[i][j] = S[j][i] = U(rng);
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<double>> P(m, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) P[i][j] = S[perm[i]][perm[j]];
    auto a = consensus_averages(S);
    auto b = consensus_averages(P);
    for (std::size_t i = 0; i < m; ++i) ASSERT_EQ(b[i], a[perm[i]]);
    const double best = *std::max_element(a.begin(), a.end());
    if (std::count(a.begin(), a.end(), best) == 1) ASSERT_EQ(perm[consensus_argmax(P)], consensus_argmax(S));
  }
}

TEST(PdeAgent, ConsensusTieGoesToLowestIndex) {
  std::vector<std::vector<double>> S{{1, 0.5, 0.5}, {0.5, 1, 0.5}, {0.5, 0.5, 1}};
  EXPECT_EQ(consensus_argmax(S), 0u);
  EXPECT_EQ(consensus_averages({{1.0}})[0], 1.0);
}

// ---------------------------------------------------------------------------
// PINN agent
// ---------------------------------------------------------------------------

TEST(PinnAgent, CapabilityTable) {
  auto r = ArchRegistry::standard();
  ASSERT_EQ(r.entries().size(), 5u);
  auto check = [&](const char* n, double p, double g, double m) {
    const auto& c = r.at(n);
    EXPECT_EQ(c.per, p) << n;
    EXPECT_EQ(c.geo, g) << n;
    EXPECT_EQ(c.ms, m) << n;
  };
  check("Fourier-MLP", 0.9, 0.2, 0.5);
  check("GNN", 0.1, 0.8, 0.5);
  check("Transformer", 0.2, 0.5, 0.7);
  check("CNN", 0.2, 0.4, 0.3);
  check("MLP", 0.1, 0.2, 0.4);
  EXPECT_THROW(r.at("ResNet"), UnknownArchitecture);
  EXPECT_THROW(r.add({"Bad", 0.95, 0.5, 0.5}), ConfigInvalid);
  EXPECT_THROW(r.add({"MLP", 0.5, 0.5, 0.5}), ConfigInvalid);
  auto round = ArchRegistry::from_json(r.to_json());
  EXPECT_EQ(round.entries().size(), 5u);
  EXPECT_EQ(round.at("GNN").geo, 0.8);
}

TEST(PinnAgent, FeaturePins) {
  auto periodic = pde_from_json_text(R"j({"equation": "u_t = u_xx + u_yy", "ic": "0",
    "domain": {"dims": 2, "time": [0, 1], "periodic": [1, 2]}})j");
  auto f = extract_features(periodic);
  EXPECT_EQ(f.per, 1.0);
  EXPECT_EQ(f.geo, 0.0);
  EXPECT_NEAR(f.ms, 0.25, 1e-12);
  auto heat = extract_features(heat1d());
  EXPECT_EQ(heat.per, 0.0);
  EXPECT_NEAR(heat.ms, 0.25, 1e-12);
}

TEST(PinnAgent, FeatureComponents) {
  auto irregular = pde_from_json_text(R"j({"equation": "u_xx + u_yy = 1",
    "domain": {"dims": 2, "geometry": "irregular", "discretization": "unstructured"}})j");
  EXPECT_NEAR(extract_features(irregular).geo, 0.5 * 0.9 + 0.5 * 0.8, 1e-12);
  auto burgers = pde_from_json_text(R"j({"equation": "u_t + u*u_x = 0.01*u_xx", "ic": "0",
    "domain": {"time": [0, 1]}, "metadata": {"Re": 100}})j");
  EXPECT_NEAR(extract_features(burgers).ms, 0.5 / (1.0 + std::exp(-(2.0 + std::log(101.0)))), 1e-12);
  auto ks = pde_from_json_text(R"j({"equation": "u_t + u*u_x + u_xx + u_xxxx = 0", "ic": "0",
    "domain": {"time": [0, 1], "periodic": [1]}})j");
  auto fk = extract_features(ks);
  EXPECT_EQ(fk.per, 1.0);
  EXPECT_NEAR(fk.ms, 0.5 / (1.0 + std::exp(-4.0)), 1e-12);
  PdeMetadata both;
  both.reynolds = 10;
  both.peclet = 30;
  EXPECT_EQ(transport_number(both), 30.0);
}

TEST(PinnAgent, MatchScoreValues) {
  MatchWeights w;
  PdeFeatures heat{0.0, 0.0, 0.25};
  auto r = ArchRegistry::standard();
  EXPECT_NEAR(match_score(heat, r.at("MLP"), w), 0.4 / std::sqrt(0.21), 1e-12);
  EXPECT_EQ(r.entries()[argmax_architecture(heat, r, w)].name, "MLP");
  PdeFeatures periodic{1.0, 0.0, 0.25};
  EXPECT_NEAR(match_score(periodic, r.at("Fourier-MLP"), w), (0.9 + 0.375) / (1.25 * std::sqrt(1.10)), 1e-12);
  EXPECT_EQ(r.entries()[argmax_architecture(periodic, r, w)].name, "Fourier-MLP");
  EXPECT_THROW(match_score({0, 0, 0}, r.at("MLP"), w), DegenerateVector);
}

TEST(PinnAgent, ArgmaxScaleInvariantAndScoresBounded) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::uniform_real_distribution<double> C(0.1, 0.9);
  for (int trial = 0; trial < 1000; ++trial) {
    PdeFeatures phi{U(rng), U(rng), U(rng)};
    if (phi.per + phi.geo + phi.ms == 0.0) continue;
    ArchRegistry reg;
    const int n = 2 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) reg.add({"a" + std::to_string(i), C(rng), C(rng), C(rng)});
    MatchWeights w{0.1 + 3 * U(rng), 0.1 + 3 * U(rng), 0.1 + 3 * U(rng)};
    const double c = std::exp(8.0 * U(rng) - 4.0);
    MatchWeights cw{c * w.per, c * w.geo, c * w.ms};
    std::vector<double> s1, s2;
    auto a1 = argmax_architecture(phi, reg, w, &s1);
    auto a2 = argmax_architecture(phi, reg, cw, &s2);
    const double top = *std::max_element(s1.begin(), s1.end());
    int near_ties = 0;
    for (double s : s1) near_ties += std::abs(s - top) < 1e-12;
    if (near_ties == 1) ASSERT_EQ(a1, a2);
    for (double s : s1) {
      ASSERT_GE(s, 0.0);
      ASSERT_LE(s, 1.0 + 1e-15);
    }
  }
}

TEST(PinnAgent, RefineCapabilityStaysInRange) {
  ArchCapability c{"MLP", 0.1, 0.2, 0.4};
  refine_capability(c, {0.0, 0.0, 0.25}, 1.0, 0.5);
  EXPECT_EQ(c.per, 0.1);
  EXPECT_EQ(c.geo, 0.2);
  EXPECT_NEAR(c.ms, (1 - 0.125) * 0.4 + 0.125, 1e-15);
  ArchCapability d{"X", 0.9, 0.9, 0.9};
  refine_capability(d, {1.0, 1.0, 1.0}, 1.0, 1.0);
  EXPECT_EQ(d.per, 0.9);
  refine_capability(d, {1.0, 1.0, 1.0}, 0.0, 1.0);
  EXPECT_EQ(d.per, 0.1);
}

TEST(PinnAgent, SelectionMatchesThenReuses) {
  auto reg = ArchRegistry::standard();
  auto pde = heat1d();
  auto sel = select_architecture(pde, reg, {});
  EXPECT_EQ(sel.arch, "MLP");
  EXPECT_EQ(sel.provenance, Provenance::Matched);
  EXPECT_EQ(sel.scores.size(), 5u);

  std::vector<HistoryRecord> hist{{wave1d(), "CNN", 0.5, ""}, {heat1d(), "Transformer", 0.8, ""}};
  auto reused = select_architecture(pde, reg, hist);
  EXPECT_EQ(reused.arch, "Transformer");
  EXPECT_EQ(reused.provenance, Provenance::Reused);
  EXPECT_EQ(reused.history_index, 1u);
  EXPECT_GE(reused.reuse_similarity, 0.95);

  SelectionOptions opt;
  opt.excluded = {"Transformer", "MLP"};
  auto skipped = select_architecture(pde, reg, hist, opt);
  EXPECT_EQ(skipped.provenance, Provenance::Matched);
  EXPECT_NE(skipped.arch, "MLP");
  EXPECT_NE(skipped.arch, "Transformer");

  opt.excluded = {"Fourier-MLP", "GNN", "Transformer", "CNN", "MLP"};
  EXPECT_THROW(select_architecture(pde, reg, hist, opt), ConfigInvalid);
  EXPECT_EQ(to_json(sel).at("provenance"), "matched");
}

TEST(PinnAgent, HistoryCacheConcurrentAppends) {
  auto dir = std::filesystem::temp_directory_path() / ("pinnpipe_hist_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  auto path = dir / "history.jsonl";
  {
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
      threads.emplace_back([&, t] {
        HistoryCache cache(path);
        for (int i = 0; i < 10; ++i) cache.append({heat1d(), "MLP", 0.1 * t, utc_timestamp()});
      });
    for (auto& th : threads) th.join();
  }
  HistoryCache reloaded(path);
  EXPECT_EQ(reloaded.records().size(), 40u);
  EXPECT_DOUBLE_EQ(sym_score(reloaded.records()[0].pde, heat1d()), 1.0);
  EXPECT_THROW(reloaded.append({heat1d(), "MLP", std::nan(""), ""}), Error);
  std::filesystem::remove_all(dir);
}
