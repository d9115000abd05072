#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pinnpipe/parser.hpp"
#include "pinnpipe/pde.hpp"
#include "pinnpipe/trainer.hpp"

using namespace pinnpipe;

namespace {

CanonicalPde poisson1d() {
  return pde_from_json_text(R"j({"equation": "u_xx + pi^2*sin(pi*x) = 0",
    "bc": [{"kind": "dirichlet", "axis": 1, "side": "both", "value": "0"}],
    "domain": {"dims": 1, "extents": [[0, 1]]}, "metadata": {"exact": "sin(pi*x)"}})j");
}

CanonicalPde burgers1d() {
  return pde_from_json_text(R"j({"equation": "u_t + u*u_x - 0.01/pi*u_xx = 0",
    "bc": [{"kind": "dirichlet", "axis": 1, "value": "0"}], "ic": "-sin(pi*x)",
    "domain": {"dims": 1, "extents": [[-1, 1]], "time": [0, 1]}})j");
}

double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(a.norm(), b.norm());
}

}  // namespace

TEST(Network, ParameterCount) {
  NetSpec s{3, 32, Activation::Tanh};
  EXPECT_EQ(s.parameter_count(1), 2209u);
  Mlp net(1, s, 0);
  EXPECT_EQ(net.parameter_count(), 2209u);
  Mlp net2(2, NetSpec{2, 8, Activation::Sine}, 0);
  EXPECT_EQ(net2.parameter_count(), NetSpec({2, 8, Activation::Sine}).parameter_count(2));
}

TEST(Network, SeededInitIsReproducible) {
  Mlp a(2, NetSpec{}, 42), b(2, NetSpec{}, 42), c(2, NetSpec{}, 43);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_NE(a.parameters(), c.parameters());
}

TEST(Network, BackwardMatchesFiniteDifferences) {
  for (auto act : {Activation::Tanh, Activation::Sine}) {
    Mlp net(2, NetSpec{2, 5, act}, 3);
    Eigen::MatrixXd X = Eigen::MatrixXd::Random(2, 7);
    Eigen::RowVectorXd g = Eigen::RowVectorXd::Random(7);
    Eigen::VectorXd grad = net.backward(X, g);
    Eigen::VectorXd p = net.parameters(), fd(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      Eigen::VectorXd q = p;
      q[i] += 1e-6;
      net.set_parameters(q);
      double up = (net.forward(X).array() * g.array()).sum();
      q[i] -= 2e-6;
      net.set_parameters(q);
      double dn = (net.forward(X).array() * g.array()).sum();
      fd[i] = (up - dn) / 2e-6;
    }
    EXPECT_LT(relative_error(grad, fd), 1e-7);
  }
}

TEST(Stencil, ExactOnPolynomials) {
  // d2/dx dy of x^2 y^2 = 4xy; d2/dx2 of x^3 = 6x.
  const double h = 1e-2;
  auto apply = [&](const MultiIndex& mi, auto f, double x, double y) {
    double s = 0;
    for (const auto& [off, w] : mixed_stencil(mi, h)) s += w * f(x + h * off[0], y + h * off[1]);
    return s;
  };
  auto f = [](double x, double y) { return x * x * y * y; };
  EXPECT_NEAR(apply({1, 1}, f, 0.3, 0.7), 4 * 0.3 * 0.7, 1e-9);
  auto g = [](double x, double) { return x * x * x; };
  EXPECT_NEAR(apply({2, 0}, g, 0.4, 0.0), 6 * 0.4, 1e-8);
  EXPECT_NEAR(apply({3, 0}, g, 0.4, 0.0), 6.0, 1e-6);
  EXPECT_THROW(central_stencil(5), UnsupportedPde);
}

TEST(CompiledExpr, BackwardMatchesFiniteDifferences) {
  auto pde = burgers1d();
  CompiledExpr r(pde.residual, {"x", "t"}, "u");
  ASSERT_EQ(r.derivatives().size(), 3u);
  const int n = 5;
  Eigen::MatrixXd X = Eigen::MatrixXd::Random(2, n);
  Eigen::ArrayXd u = Eigen::ArrayXd::Random(n);
  std::vector<Eigen::ArrayXd> d(3);
  for (auto& v : d) v = Eigen::ArrayXd::Random(n);
  std::vector<Eigen::ArrayXd> vals;
  Eigen::ArrayXd out = r.evaluate({&X, &u, &d}, &vals);
  auto adj = r.backward(vals, Eigen::ArrayXd::Ones(n));
  const double eps = 1e-6;
  for (int i = 0; i < n; ++i) {
    Eigen::ArrayXd up = u;
    up[i] += eps;
    EXPECT_NEAR((r.evaluate({&X, &up, &d})[i] - out[i]) / eps, adj.u[i], 1e-5);
    for (std::size_t m = 0; m < 3; ++m) {
      auto dp = d;
      dp[m][i] += eps;
      EXPECT_NEAR((r.evaluate({&X, &u, &dp})[i] - out[i]) / eps, adj.d[m][i], 1e-5);
    }
  }
  EXPECT_THROW(CompiledExpr(pde.residual, {"x"}, "u"), RuntimeFailure);
  EXPECT_THROW(CompiledExpr(parse("u_x + k"), {"x"}, "u"), RuntimeFailure);
}

TEST(Problem, SupportedFamilies) {
  EXPECT_EQ(make_problem(poisson1d()).family, "poisson-1d");
  EXPECT_EQ(make_problem(burgers1d()).family, "burgers-1d");
  auto heat = pde_from_json_text(R"j({"equation": "u_t = 0.1*u_xx", "bc": [{"axis": 1, "value": "0"}],
    "ic": "sin(pi*x)", "domain": {"time": [0, 1]}})j");
  auto hp = make_problem(heat);
  EXPECT_EQ(hp.family, "heat-1d");
  EXPECT_EQ(hp.coords, (std::vector<std::string>{"x", "t"}));
  auto p2 = pde_from_json_text(R"j({"equation": "u_xx + u_yy = -1",
    "bc": [{"axis": 1, "value": "0"}, {"axis": 2, "value": "0"}], "domain": {"dims": 2}})j");
  EXPECT_EQ(make_problem(p2).family, "poisson-2d");
}

TEST(Problem, UnsupportedFamiliesRaise) {
  const char* cases[] = {
      R"j({"equation": "u_tt = u_xx", "bc": [{"axis": 1, "value": "0"}], "ic": "0", "domain": {"time": [0, 1]}})j",
      R"j({"equation": "u_t + u*u_x + u_xx + u_xxxx = 0", "ic": "0", "domain": {"time": [0, 1], "periodic": [1]}})j",
      R"j({"equation": "u_xx + u_yy + u_zz = 1", "domain": {"dims": 3}})j",
      R"j({"equation": "u_t = u_xx + u_yy", "ic": "0", "domain": {"dims": 2, "time": [0, 1]}})j",
      R"j({"equation": "u_xx = 1", "bc": [{"kind": "neumann", "axis": 1, "value": "0"}]})j",
      R"j({"equation": "u_xx = 1", "bc": [{"axis": 1, "side": "lo", "value": "0"}]})j",
      R"j({"equation": "u_xx + v_xx = 1", "bc": [{"axis": 1, "value": "0"}]})j",
  };
  for (const char* c : cases) EXPECT_THROW(make_problem(pde_from_json_text(c)), UnsupportedPde) << c;
  try {
    make_problem(pde_from_json_text(cases[0]));
  } catch (const UnsupportedPde& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported PDE family"), std::string::npos);
  }
}

TEST(Evaluation, ZeroNetworkAgainstSine) {
  auto p = make_problem(poisson1d());
  Mlp net(1, NetSpec{}, 0, true);
  EXPECT_EQ(net.forward(Eigen::MatrixXd::Random(1, 4)).norm(), 0.0);
  EXPECT_NEAR(final_mse(net, p, 1e-3), 127.5 / 256.0, 1e-14);
}

TEST(Trainer, GradientCheckSmallPoisson) {
  auto p = make_problem(poisson1d());
  TrainConfig cfg;
  cfg.interior = 32;
  PinnObjective obj(p, cfg);
  Mlp net(1, NetSpec{1, 4, Activation::Tanh}, 5);
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> N(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd theta(static_cast<Eigen::Index>(net.parameter_count()));
    for (auto& v : theta) v = N(rng);
    net.set_parameters(theta);
    Eigen::VectorXd grad;
    obj.evaluate(net, &grad);
    Eigen::VectorXd fd(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double step = 1e-6 * std::max(1.0, std::abs(theta[i]));
      Eigen::VectorXd q = theta;
      q[i] += step;
      net.set_parameters(q);
      const double up = obj.evaluate(net, nullptr);
      q[i] -= 2 * step;
      net.set_parameters(q);
      const double dn = obj.evaluate(net, nullptr);
      fd[i] = (up - dn) / (2 * step);
    }
    net.set_parameters(theta);
    EXPECT_LT(relative_error(grad, fd), 1e-4) << "trial " << trial;
  }
}

TEST(Trainer, PoissonConvergesAndIsDeterministic) {
  auto p = make_problem(poisson1d());
  TrainConfig cfg;
  cfg.seed = 7;
  auto a = train(p, NetSpec{3, 32, Activation::Tanh}, cfg);
  auto b = train(p, NetSpec{3, 32, Activation::Tanh}, cfg);
  ASSERT_EQ(a.trace.records.size(), 2000u);
  EXPECT_FALSE(a.trace.diverged());
  EXPECT_LE(final_mse(a.net, p, cfg.h), 1e-2);
  EXPECT_EQ(to_jsonl(a.trace), to_jsonl(b.trace));
  EXPECT_LT(a.trace.records.back().loss, a.trace.records.front().loss);
}

TEST(Trainer, RunawayLearningRateDiverges) {
  auto p = make_problem(burgers1d());
  TrainConfig cfg;
  cfg.learning_rate = 1e3;
  cfg.steps = 2000;
  auto r = train(p, NetSpec{}, cfg);
  ASSERT_TRUE(r.trace.diverged());
  EXPECT_EQ(static_cast<std::size_t>(*r.trace.diverged_at), r.trace.records.size() + 1);
  auto text = to_jsonl(r.trace);
  auto last = text.substr(text.rfind('\n', text.size() - 2) + 1);
  EXPECT_NE(last.find("\"diverged\":true"), std::string::npos);
  auto back = trace_from_jsonl(text);
  EXPECT_EQ(back.diverged_at, r.trace.diverged_at);
  EXPECT_EQ(back.records.size(), r.trace.records.size());
}

TEST(Trainer, ConfigValidation) {
  auto p = make_problem(poisson1d());
  TrainConfig bad;
  bad.h = 0.5;
  EXPECT_THROW(train(p, NetSpec{}, bad), ConfigInvalid);
  TrainConfig lr;
  lr.learning_rate = 0;
  EXPECT_THROW(train(p, NetSpec{}, lr), ConfigInvalid);
  EXPECT_THROW(Mlp(1, NetSpec{0, 4, Activation::Tanh}, 0), ConfigInvalid);
}

TEST(Trace, JsonlRoundTripAndValidation) {
  LossTrace t;
  t.records = {{1, 0.5, 2.0}, {2, 0.25, 1.0}};
  auto text = to_jsonl(t);
  EXPECT_EQ(text, "{\"grad_norm\":2.0,\"loss\":0.5,\"t\":1}\n{\"grad_norm\":1.0,\"loss\":0.25,\"t\":2}\n");
  auto back = trace_from_jsonl(text);
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_EQ(back.records[1].loss, 0.25);
  const char* bad[] = {
      "{\"t\":2,\"loss\":1,\"grad_norm\":1}\n",
      "{\"t\":1,\"loss\":1,\"grad_norm\":1}\n{\"t\":1,\"loss\":1,\"grad_norm\":1}\n",
      "{\"t\":1,\"loss\":-1,\"grad_norm\":1}\n",
      "{\"t\":1,\"loss\":1}\n",
      "not json\n",
      "{\"t\":1,\"diverged\":true}\n{\"t\":2,\"loss\":1,\"grad_norm\":1}\n",
  };
  for (const char* b : bad) EXPECT_THROW(trace_from_jsonl(b), TraceFormatError) << b;
}

TEST(Network, ParameterCountMatchesHandCount) {
  // Counted layer by layer by hand.
  EXPECT_EQ(NetSpec({1, 1, Activation::Tanh}).parameter_count(1), 4u);
  EXPECT_EQ(NetSpec({1, 2, Activation::Tanh}).parameter_count(1), 7u);
  EXPECT_EQ(NetSpec({2, 3, Activation::Tanh}).parameter_count(1), 22u);
  EXPECT_EQ(NetSpec({3, 8, Activation::Tanh}).parameter_count(2), 177u);
  EXPECT_EQ(NetSpec({2, 4, Activation::Sine}).parameter_count(2), 37u);
  for (int depth = 1; depth <= 3; ++depth)
    for (int width = 1; width <= 8; ++width)
      for (int inputs = 1; inputs <= 2; ++inputs) {
        std::size_t count = 0;
        int fan_in = inputs;
        for (int l = 0; l < depth; ++l) {
          count += static_cast<std::size_t>(fan_in * width) + static_cast<std::size_t>(width);
          fan_in = width;
        }
        count += static_cast<std::size_t>(fan_in) + 1;
        const NetSpec s{depth, width, Activation::Tanh};
        EXPECT_EQ(s.parameter_count(inputs), count);
        EXPECT_EQ(Mlp(inputs, s, 0).parameter_count(), count);
        EXPECT_EQ(Mlp(inputs, s, 0).parameters().size(), static_cast<Eigen::Index>(count));
      }
}

TEST(Trainer, ZeroOutputOnHomogeneousPoissonStartsAtZeroLoss) {
  auto pde = pde_from_json_text(R"j({"equation": "u_xx = 0",
    "bc": [{"kind": "dirichlet", "axis": 1, "value": "0"}], "domain": {"dims": 1, "extents": [[0, 1]]}})j");
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.zero_output_init = true;
  auto res = train(make_problem(pde), NetSpec{2, 8, Activation::Tanh}, cfg);
  ASSERT_FALSE(res.trace.records.empty());
  EXPECT_EQ(res.trace.records.front().t, 1);
  EXPECT_EQ(res.trace.records.front().loss, 0.0);
}

TEST(Evaluation, ResidualOfRandomNetworkOnHeatIsPositive) {
  auto heat = pde_from_json_text(R"j({"equation": "u_t = 0.1*u_xx", "bc": [{"axis": 1, "value": "0"}],
    "ic": "sin(pi*x)", "domain": {"time": [0, 1]}})j");
  auto p = make_problem(heat);
  Mlp net(p.inputs(), NetSpec{2, 8, Activation::Tanh}, 5);
  const double r = residual_mse(net, p, 1e-3, 32);
  EXPECT_TRUE(std::isfinite(r));
  EXPECT_GT(r, 0.0);
}
