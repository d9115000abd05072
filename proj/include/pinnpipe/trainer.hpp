#pragma once

// Desk-scale PINN trainer: fully-connected network, central finite
// differences at stencil points, residual + boundary penalty, Adam.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pinnpipe/error.hpp"
#include "pinnpipe/expr.hpp"
#include "pinnpipe/pde.hpp"

namespace pinnpipe {

enum class Activation { Tanh, Sine };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "sine"; }

inline Activation activation_from(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "sine" || s == "sin") return Activation::Sine;
  throw ConfigInvalid("unknown activation '" + s + "'");
}

struct NetSpec {
  int depth = 3;  // hidden layers
  int width = 32;
  Activation activation = Activation::Tanh;

  /// Sum over layers of (fan_in + 1) * fan_out.
  std::size_t parameter_count(int inputs, int outputs = 1) const {
    std::size_t n = 0;
    int fan_in = inputs;
    for (int l = 0; l < depth; ++l) {
      n += static_cast<std::size_t>(fan_in + 1) * static_cast<std::size_t>(width);
      fan_in = width;
    }
    return n + static_cast<std::size_t>(fan_in + 1) * static_cast<std::size_t>(outputs);
  }
};

struct TrainConfig {
  int steps = 2000;
  double learning_rate = 1e-3;
  int interior = 128;
  int boundary = 32;  // per boundary segment; single points when the segment is 0-dimensional
  double h = 1e-3;
  double boundary_weight = 10.0;
  std::uint64_t seed = 0;
  bool zero_output_init = false;
  // A loss above divergence_factor times the first loss counts as
  // divergence. Adam bounds the step size, so a runaway learning rate rarely
  // overflows outright.
  double divergence_factor = 1e6;
};

inline nlohmann::json to_json(const NetSpec& n) {
  return {{"depth", n.depth}, {"width", n.width}, {"activation", to_string(n.activation)}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"steps", c.steps},
                   {"learning_rate", c.learning_rate},
                   {"interior", c.interior},
                   {"boundary", c.boundary},
                   {"h", c.h},
                   {"boundary_weight", c.boundary_weight},
                   {"seed", c.seed},
                   {"zero_output_init", c.zero_output_init},
                   {"divergence_factor", c.divergence_factor}};
  return j;
}

// ---------------------------------------------------------------------------
// Loss trace
// ---------------------------------------------------------------------------

struct LossRecord {
  int t = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct LossTrace {
  std::vector<LossRecord> records;
  std::optional<int> diverged_at;  // step whose loss was non-finite
  std::optional<double> final_mse;

  bool diverged() const { return diverged_at.has_value(); }
};

/// One {"t","loss","grad_norm"} object per line; a diverged trace ends with
/// {"t": k, "diverged": true}.
inline std::string to_jsonl(const LossTrace& trace) {
  std::string out;
  for (const auto& r : trace.records) {
    out += nlohmann::json{{"t", r.t}, {"loss", r.loss}, {"grad_norm", r.grad_norm}}.dump();
    out += '\n';
  }
  if (trace.diverged_at) {
    out += nlohmann::json{{"t", *trace.diverged_at}, {"diverged", true}}.dump();
    out += '\n';
  }
  return out;
}

/// Parses and validates the JSONL wire format.
inline LossTrace trace_from_jsonl(const std::string& text) {
  LossTrace trace;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  int last_t = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& msg) { return TraceFormatError("trace line " + std::to_string(n) + ": " + msg); };
    if (trace.diverged_at) throw fail("record after divergence marker");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(e.what());
    }
    if (!j.is_object() || !j.contains("t") || !j.at("t").is_number_integer()) throw fail("missing integer 't'");
    int t = j.at("t").get<int>();
    if (j.value("diverged", false)) {
      if (t <= last_t) throw fail("step index not increasing");
      trace.diverged_at = t;
      continue;
    }
    if (trace.records.empty() ? t != 1 : t <= last_t) throw fail("step indices must increase strictly from 1");
    if (!j.contains("loss") || !j.at("loss").is_number() || !j.contains("grad_norm") || !j.at("grad_norm").is_number())
      throw fail("missing numeric 'loss' or 'grad_norm'");
    LossRecord r{t, j.at("loss").get<double>(), j.at("grad_norm").get<double>()};
    if (!std::isfinite(r.loss) || r.loss < 0) throw fail("loss must be finite and nonnegative");
    if (!std::isfinite(r.grad_norm) || r.grad_norm < 0) throw fail("grad_norm must be finite and nonnegative");
    trace.records.push_back(r);
    last_t = t;
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Random numbers (bit-exact across standard libraries)
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

class Mlp {
 public:
  Mlp() = default;

  Mlp(int inputs, const NetSpec& spec, std::uint64_t seed, bool zero_output = false) : spec_(spec), inputs_(inputs) {
    if (spec.depth < 1 || spec.width < 1) throw ConfigInvalid("network depth and width must be positive");
    Rng rng(seed);
    int fan_in = inputs;
    for (int l = 0; l <= spec.depth; ++l) {
      int fan_out = l == spec.depth ? 1 : spec.width;
      double limit = std::sqrt(6.0 / (fan_in + fan_out));
      Eigen::MatrixXd W(fan_out, fan_in);
      for (int i = 0; i < fan_out; ++i)
        for (int j = 0; j < fan_in; ++j) W(i, j) = rng.uniform(-limit, limit);
      if (l == spec.depth && zero_output) W.setZero();
      weights_.push_back(std::move(W));
      biases_.push_back(Eigen::VectorXd::Zero(fan_out));
      fan_in = fan_out;
    }
  }

  int inputs() const { return inputs_; }
  const NetSpec& spec() const { return spec_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
    return n;
  }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      p.segment(k, weights_[l].size()) = Eigen::Map<const Eigen::VectorXd>(weights_[l].data(), weights_[l].size());
      k += weights_[l].size();
      p.segment(k, biases_[l].size()) = biases_[l];
      k += biases_[l].size();
    }
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    if (static_cast<std::size_t>(p.size()) != parameter_count()) throw Error("parameter vector has wrong length");
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Eigen::Map<Eigen::VectorXd>(weights_[l].data(), weights_[l].size()) = p.segment(k, weights_[l].size());
      k += weights_[l].size();
      biases_[l] = p.segment(k, biases_[l].size());
      k += biases_[l].size();
    }
  }

  /// Outputs for the columns of X (inputs x N).
  Eigen::RowVectorXd forward(const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd A = X;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Eigen::MatrixXd Z = (weights_[l] * A).colwise() + biases_[l];
      A = l + 1 == weights_.size() ? Z : activate(Z);
    }
    return A.row(0);
  }

  /// Gradient of sum_n g(n) * output(n) with respect to the flat parameters.
  Eigen::VectorXd backward(const Eigen::MatrixXd& X, const Eigen::RowVectorXd& g) const {
    std::vector<Eigen::MatrixXd> acts{X};
    std::vector<Eigen::MatrixXd> pre;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Eigen::MatrixXd Z = (weights_[l] * acts.back()).colwise() + biases_[l];
      pre.push_back(Z);
      acts.push_back(l + 1 == weights_.size() ? Z : activate(Z));
    }
    std::vector<Eigen::MatrixXd> dW(weights_.size());
    std::vector<Eigen::VectorXd> db(weights_.size());
    Eigen::MatrixXd delta = g;
    for (std::size_t l = weights_.size(); l-- > 0;) {
      if (l + 1 != weights_.size()) delta = delta.cwiseProduct(activate_grad(pre[l]));
      dW[l] = delta * acts[l].transpose();
      db[l] = delta.rowwise().sum();
      if (l > 0) delta = weights_[l].transpose() * delta;
    }
    Eigen::VectorXd out(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.segment(k, dW[l].size()) = Eigen::Map<const Eigen::VectorXd>(dW[l].data(), dW[l].size());
      k += dW[l].size();
      out.segment(k, db[l].size()) = db[l];
      k += db[l].size();
    }
    return out;
  }

 private:
  NetSpec spec_;
  int inputs_ = 1;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;

  Eigen::MatrixXd activate(const Eigen::MatrixXd& Z) const {
    return spec_.activation == Activation::Tanh ? Eigen::MatrixXd(Z.array().tanh()) : Eigen::MatrixXd(Z.array().sin());
  }
  Eigen::MatrixXd activate_grad(const Eigen::MatrixXd& Z) const {
    if (spec_.activation == Activation::Tanh) return (1.0 - Z.array().tanh().square()).matrix();
    return Z.array().cos().matrix();
  }
};

// ---------------------------------------------------------------------------
// Vectorized residual evaluation with reverse-mode adjoints
// ---------------------------------------------------------------------------

/// Orders of a mixed partial derivative, one entry per network input
/// (spatial axes first, time last).
using MultiIndex = std::vector<int>;

class CompiledExpr {
 public:
  /// `coords` names the network inputs in order. Variables that are neither
  /// coordinates nor `field` raise RuntimeFailure.
  CompiledExpr(const Expr& e, const std::vector<std::string>& coords, const std::string& field = "")
      : coords_(coords), field_(field) {
    compile(e);
  }

  const std::vector<MultiIndex>& derivatives() const { return derivs_; }

  struct Inputs {
    const Eigen::MatrixXd* X = nullptr;          // coordinates, inputs x N
    const Eigen::ArrayXd* u = nullptr;           // field values
    const std::vector<Eigen::ArrayXd>* d = nullptr;  // derivative values, by derivatives() index
  };

  struct Adjoints {
    Eigen::ArrayXd u;
    std::vector<Eigen::ArrayXd> d;
  };

  Eigen::ArrayXd evaluate(const Inputs& in, std::vector<Eigen::ArrayXd>* values = nullptr) const {
    const Eigen::Index n = in.X->cols();
    std::vector<Eigen::ArrayXd> vals(nodes_.size());
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      const Node& nd = nodes_[i];
      switch (nd.op) {
        case Op::Number: vals[i] = Eigen::ArrayXd::Constant(n, nd.value); break;
        case Op::Coord: vals[i] = in.X->row(nd.index).transpose().array(); break;
        case Op::Field: vals[i] = *in.u; break;
        case Op::Deriv: vals[i] = (*in.d)[static_cast<std::size_t>(nd.index)]; break;
        case Op::Sum: {
          vals[i] = vals[static_cast<std::size_t>(nd.kids[0])];
          for (std::size_t k = 1; k < nd.kids.size(); ++k) vals[i] += vals[static_cast<std::size_t>(nd.kids[k])];
          break;
        }
        case Op::Product: {
          vals[i] = vals[static_cast<std::size_t>(nd.kids[0])];
          for (std::size_t k = 1; k < nd.kids.size(); ++k) vals[i] *= vals[static_cast<std::size_t>(nd.kids[k])];
          break;
        }
        case Op::Power: vals[i] = power(vals[kid(nd, 0)], vals[kid(nd, 1)]); break;
        case Op::Function: vals[i] = apply(nd.name, vals[kid(nd, 0)]); break;
      }
    }
    Eigen::ArrayXd out = vals[0];
    if (values) *values = std::move(vals);
    return out;
  }

  /// Adjoints of the leaves given d(objective)/d(root) = `seed`.
  Adjoints backward(const std::vector<Eigen::ArrayXd>& vals, const Eigen::ArrayXd& seed) const {
    const Eigen::Index n = seed.size();
    std::vector<Eigen::ArrayXd> adj(nodes_.size(), Eigen::ArrayXd::Zero(n));
    Adjoints out{Eigen::ArrayXd::Zero(n), std::vector<Eigen::ArrayXd>(derivs_.size(), Eigen::ArrayXd::Zero(n))};
    adj[0] = seed;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& nd = nodes_[i];
      const Eigen::ArrayXd& a = adj[i];
      switch (nd.op) {
        case Op::Number:
        case Op::Coord: break;
        case Op::Field: out.u += a; break;
        case Op::Deriv: out.d[static_cast<std::size_t>(nd.index)] += a; break;
        case Op::Sum:
          for (int k : nd.kids) adj[static_cast<std::size_t>(k)] += a;
          break;
        case Op::Product:
          for (std::size_t k = 0; k < nd.kids.size(); ++k) {
            Eigen::ArrayXd others = Eigen::ArrayXd::Ones(n);
            for (std::size_t m = 0; m < nd.kids.size(); ++m)
              if (m != k) others *= vals[static_cast<std::size_t>(nd.kids[m])];
            adj[static_cast<std::size_t>(nd.kids[k])] += a * others;
          }
          break;
        case Op::Power: {
          const auto& b = vals[kid(nd, 0)];
          const auto& e = vals[kid(nd, 1)];
          adj[kid(nd, 0)] += a * e * power(b, e - 1.0);
          if (!nodes_[kid(nd, 1)].constant) adj[kid(nd, 1)] += a * vals[i] * b.log();
          break;
        }
        case Op::Function: adj[kid(nd, 0)] += a * apply_grad(nd.name, vals[kid(nd, 0)]); break;
      }
    }
    return out;
  }

 private:
  enum class Op { Number, Coord, Field, Deriv, Sum, Product, Power, Function };
  struct Node {
    Op op = Op::Number;
    double value = 0.0;
    int index = -1;
    std::string name;
    std::vector<int> kids;
    bool constant = false;  // no dependence on the field
  };

  std::vector<std::string> coords_;
  std::string field_;
  std::vector<Node> nodes_;
  std::vector<MultiIndex> derivs_;

  static std::size_t kid(const Node& n, std::size_t k) { return static_cast<std::size_t>(n.kids[k]); }

  static Eigen::ArrayXd power(const Eigen::ArrayXd& b, const Eigen::ArrayXd& e) {
    Eigen::ArrayXd out(b.size());
    for (Eigen::Index i = 0; i < b.size(); ++i) out[i] = std::pow(b[i], e[i]);
    return out;
  }

  static Eigen::ArrayXd apply(const std::string& f, const Eigen::ArrayXd& x) {
    if (f == "sin") return x.sin();
    if (f == "cos") return x.cos();
    if (f == "tan") return x.tan();
    if (f == "exp") return x.exp();
    if (f == "log") return x.log();
    if (f == "sqrt") return x.sqrt();
    if (f == "tanh") return x.tanh();
    throw RuntimeFailure("undefined symbol: function " + f);
  }

  static Eigen::ArrayXd apply_grad(const std::string& f, const Eigen::ArrayXd& x) {
    if (f == "sin") return x.cos();
    if (f == "cos") return -x.sin();
    if (f == "tan") return 1.0 + x.tan().square();
    if (f == "exp") return x.exp();
    if (f == "log") return x.inverse();
    if (f == "sqrt") return 0.5 * x.sqrt().inverse();
    if (f == "tanh") return 1.0 - x.tanh().square();
    throw RuntimeFailure("undefined symbol: function " + f);
  }

  int compile(const Expr& e) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    Node nd;
    switch (e.kind) {
      case NodeKind::Number:
        nd.op = Op::Number;
        nd.value = e.value;
        nd.constant = true;
        break;
      case NodeKind::Constant:
        if (e.label != "pi") throw RuntimeFailure("undefined symbol: constant " + e.label);
        nd.op = Op::Number;
        nd.value = M_PI;
        nd.constant = true;
        break;
      case NodeKind::Variable: {
        auto it = std::find(coords_.begin(), coords_.end(), e.label);
        if (it != coords_.end()) {
          nd.op = Op::Coord;
          nd.index = static_cast<int>(it - coords_.begin());
          nd.constant = true;
        } else if (!field_.empty() && e.label == field_) {
          nd.op = Op::Field;
        } else {
          throw RuntimeFailure("undefined symbol: " + e.label);
        }
        break;
      }
      case NodeKind::TimeDerivative:
      case NodeKind::SpatialDerivative: {
        MultiIndex mi(coords_.size(), 0);
        const Expr* cur = &e;
        while (is_derivative(cur->kind)) {
          const std::string axis = cur->kind == NodeKind::TimeDerivative ? "t" : cur->label;
          auto it = std::find(coords_.begin(), coords_.end(), axis);
          if (it == coords_.end()) throw RuntimeFailure("undefined derivative axis: " + axis);
          mi[static_cast<std::size_t>(it - coords_.begin())] += cur->order;
          cur = &cur->children[0];
        }
        if (cur->kind != NodeKind::Variable || field_.empty() || cur->label != field_)
          throw RuntimeFailure("undefined derivative operand: " + to_prefix(*cur));
        nd.op = Op::Deriv;
        auto it = std::find(derivs_.begin(), derivs_.end(), mi);
        nd.index = static_cast<int>(it - derivs_.begin());
        if (it == derivs_.end()) derivs_.push_back(mi);
        break;
      }
      case NodeKind::Function:
        nd.op = Op::Function;
        nd.name = e.label;
        if (!is_known_function(e.label)) throw RuntimeFailure("undefined symbol: function " + e.label);
        break;
      case NodeKind::Power: nd.op = Op::Power; break;
      case NodeKind::Product: nd.op = Op::Product; break;
      case NodeKind::Sum: nd.op = Op::Sum; break;
    }
    if (!is_derivative(e.kind)) {
      bool constant = nd.op == Op::Number || nd.op == Op::Coord;
      if (!e.children.empty()) constant = true;
      for (const auto& c : e.children) {
        int k = compile(c);
        nd.kids.push_back(k);
        constant = constant && nodes_[static_cast<std::size_t>(k)].constant;
      }
      if (e.children.empty()) constant = nd.constant;
      nd.constant = constant;
    }
    nodes_[static_cast<std::size_t>(id)] = std::move(nd);
    return id;
  }
};

/// Central-difference weights for one axis: offset (in units of h) -> weight * h^order.
inline std::map<int, double> central_stencil(int order) {
  switch (order) {
    case 0: return {{0, 1.0}};
    case 1: return {{-1, -0.5}, {1, 0.5}};
    case 2: return {{-1, 1.0}, {0, -2.0}, {1, 1.0}};
    case 3: return {{-2, -0.5}, {-1, 1.0}, {1, -1.0}, {2, 0.5}};
    case 4: return {{-2, 1.0}, {-1, -4.0}, {0, 6.0}, {1, -4.0}, {2, 1.0}};
    default: throw UnsupportedPde("unsupported PDE family: derivative order " + std::to_string(order));
  }
}

/// Tensor-product stencil of a mixed derivative: offset vector -> weight.
inline std::map<std::vector<int>, double> mixed_stencil(const MultiIndex& mi, double h) {
  std::map<std::vector<int>, double> out{{std::vector<int>(mi.size(), 0), 1.0}};
  for (std::size_t axis = 0; axis < mi.size(); ++axis) {
    if (mi[axis] == 0) continue;
    auto s = central_stencil(mi[axis]);
    const double scale = std::pow(h, -mi[axis]);
    std::map<std::vector<int>, double> next;
    for (const auto& [off, w] : out)
      for (auto [k, c] : s) {
        auto o = off;
        o[axis] += k;
        next[o] += w * c * scale;
      }
    out = std::move(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Problem definition
// ---------------------------------------------------------------------------

struct DirichletSegment {
  int axis = 0;  // network input index
  double at = 0.0;
  Expr value;
};

/// Everything the trainer needs about a supported PDE.
struct TrainingProblem {
  std::string family;
  std::string field = "u";
  std::vector<std::string> coords;  // network inputs: spatial axes then "t"
  std::vector<std::pair<double, double>> box;
  Expr residual;
  std::vector<DirichletSegment> boundary;
  std::optional<Expr> initial;  // at coords.back() == box.back().first
  std::optional<Expr> exact;

  int inputs() const { return static_cast<int>(coords.size()); }
};

/// Checks that `pde` belongs to a supported desk-scale family (1D Poisson,
/// 1D heat, 1D viscous Burgers, 2D Poisson) and builds the problem.
inline TrainingProblem make_problem(const CanonicalPde& pde) {
  auto unsupported = [](const std::string& why) { return UnsupportedPde("unsupported PDE family: " + why); };
  const auto fields = field_variables(pde.residual);
  if (fields.size() != 1) throw unsupported(std::to_string(fields.size()) + " unknown fields");
  if (pde.meta.nonlocal) throw unsupported("nonlocal operator");
  const int d = pde.domain.dims;
  const bool timed = pde.time_dependent();
  if (d > 2 || (timed && d != 1)) throw unsupported(std::to_string(d) + "D" + (timed ? " time-dependent" : ""));
  if (pde.meta.max_order > 2) throw unsupported("derivative order " + std::to_string(pde.meta.max_order));
  if (!pde.domain.periodic_axes.empty()) throw unsupported("periodic axes");

  TrainingProblem p;
  p.field = *fields.begin();
  p.coords = pde.domain.axes;
  p.box = pde.domain.extents;
  p.residual = pde.residual;
  if (timed) {
    p.coords.push_back("t");
    p.box.push_back(pde.domain.time.value_or(std::make_pair(0.0, 1.0)));
  }
  // time order and mixed space-time terms
  std::function<void(const Expr&)> scan = [&](const Expr& e) {
    if (is_derivative(e.kind)) {
      int tord = 0;
      const Expr* cur = &e;
      while (is_derivative(cur->kind)) {
        if (cur->kind == NodeKind::TimeDerivative) tord += cur->order;
        cur = &cur->children[0];
      }
      if (tord > 1) throw unsupported("time derivative of order " + std::to_string(tord));
      return;
    }
    for (const auto& c : e.children) scan(c);
  };
  scan(pde.residual);

  if (timed) p.family = pde.meta.linear ? "heat-1d" : "burgers-1d";
  else p.family = d == 1 ? "poisson-1d" : "poisson-2d";
  if (!timed && !pde.meta.linear) throw unsupported("nonlinear steady problem");

  std::set<std::pair<int, int>> covered;  // (axis index, side)
  for (const auto& b : pde.boundary) {
    if (b.kind != BoundaryKind::Dirichlet) throw unsupported(to_string(b.kind) + " boundary condition");
    if (b.axis < 1 || b.axis > d) throw unsupported("boundary axis out of range");
    const int a = b.axis - 1;
    const auto [lo, hi] = pde.domain.extents[static_cast<std::size_t>(a)];
    if (b.side != BoundarySide::Upper) {
      p.boundary.push_back({a, lo, b.value});
      covered.insert({a, 0});
    }
    if (b.side != BoundarySide::Lower) {
      p.boundary.push_back({a, hi, b.value});
      covered.insert({a, 1});
    }
  }
  if (covered.size() != static_cast<std::size_t>(2 * d)) throw unsupported("boundary not fully specified");
  if (timed) {
    if (!pde.initial) throw unsupported("missing initial condition");
    p.initial = pde.initial;
  }
  p.exact = pde.meta.exact;
  return p;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

class PinnObjective {
 public:
  PinnObjective(TrainingProblem problem, const TrainConfig& cfg)
      : p_(std::move(problem)), cfg_(cfg), residual_(p_.residual, p_.coords, p_.field) {
    double min_extent = std::numeric_limits<double>::infinity();
    for (auto [lo, hi] : p_.box) min_extent = std::min(min_extent, hi - lo);
    if (!(cfg.h > 0.0) || !(cfg.h < min_extent / 10.0)) throw ConfigInvalid("finite-difference step h must be below extent/10");
    if (cfg.interior < 1 || cfg.boundary < 1) throw ConfigInvalid("collocation counts must be positive");
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const int in = p_.inputs();

    interior_.resize(in, cfg.interior);
    for (int n = 0; n < cfg.interior; ++n)
      for (int a = 0; a < in; ++a) interior_(a, n) = rng.uniform(p_.box[a].first, p_.box[a].second);

    // Shifted copies of the interior points for every stencil offset.
    std::set<std::vector<int>> offsets{std::vector<int>(static_cast<std::size_t>(in), 0)};
    for (const auto& mi : residual_.derivatives()) {
      stencils_.push_back(mixed_stencil(mi, cfg.h));
      for (const auto& [off, w] : stencils_.back()) offsets.insert(off);
    }
    offsets_.assign(offsets.begin(), offsets.end());

    for (const auto& seg : p_.boundary) {
      const bool point = in == 1;
      const int count = point ? 1 : cfg.boundary;
      Eigen::MatrixXd X(in, count);
      for (int n = 0; n < count; ++n)
        for (int a = 0; a < in; ++a) X(a, n) = a == seg.axis ? seg.at : rng.uniform(p_.box[a].first, p_.box[a].second);
      CompiledExpr g(seg.value, p_.coords);
      conditions_.push_back({X, g.evaluate({&X, nullptr, nullptr})});
    }
    if (p_.initial) {
      const int t = in - 1;
      Eigen::MatrixXd X(in, cfg.boundary);
      for (int n = 0; n < cfg.boundary; ++n)
        for (int a = 0; a < in; ++a) X(a, n) = a == t ? p_.box[t].first : rng.uniform(p_.box[a].first, p_.box[a].second);
      CompiledExpr g(*p_.initial, p_.coords);
      conditions_.push_back({X, g.evaluate({&X, nullptr, nullptr})});
    }

    // One batch: interior offsets, then each condition's points.
    const Eigen::Index ni = interior_.cols();
    Eigen::Index total = ni * static_cast<Eigen::Index>(offsets_.size());
    for (const auto& c : conditions_) total += c.X.cols();
    batch_.resize(in, total);
    Eigen::Index col = 0;
    for (const auto& off : offsets_) {
      for (int a = 0; a < in; ++a) batch_.block(a, col, 1, ni) = (interior_.row(a).array() + cfg.h * off[static_cast<std::size_t>(a)]).matrix();
      col += ni;
    }
    for (const auto& c : conditions_) {
      batch_.block(0, col, in, c.X.cols()) = c.X;
      col += c.X.cols();
    }
  }

  const TrainingProblem& problem() const { return p_; }
  const Eigen::MatrixXd& interior() const { return interior_; }

  /// Loss at the current parameters; fills `grad` when non-null.
  double evaluate(const Mlp& net, Eigen::VectorXd* grad) const {
    const Eigen::RowVectorXd out = net.forward(batch_);
    const Eigen::Index ni = interior_.cols();
    auto offset_values = [&](std::size_t k) { return out.segment(static_cast<Eigen::Index>(k) * ni, ni).transpose().array(); };
    const std::size_t center = offset_index(std::vector<int>(static_cast<std::size_t>(p_.inputs()), 0));

    Eigen::ArrayXd u = offset_values(center);
    std::vector<Eigen::ArrayXd> d;
    for (const auto& st : stencils_) {
      Eigen::ArrayXd v = Eigen::ArrayXd::Zero(ni);
      for (const auto& [off, w] : st) v += w * offset_values(offset_index(off));
      d.push_back(std::move(v));
    }
    std::vector<Eigen::ArrayXd> vals;
    Eigen::ArrayXd r = residual_.evaluate({&interior_, &u, &d}, grad ? &vals : nullptr);
    double loss = r.square().mean();

    Eigen::RowVectorXd g;
    if (grad) g = Eigen::RowVectorXd::Zero(out.size());
    if (grad) {
      auto adj = residual_.backward(vals, 2.0 * r / static_cast<double>(ni));
      g.segment(static_cast<Eigen::Index>(center) * ni, ni) += adj.u.matrix().transpose();
      for (std::size_t m = 0; m < stencils_.size(); ++m)
        for (const auto& [off, w] : stencils_[m])
          g.segment(static_cast<Eigen::Index>(offset_index(off)) * ni, ni) += (w * adj.d[m]).matrix().transpose();
    }
    Eigen::Index col = ni * static_cast<Eigen::Index>(offsets_.size());
    for (const auto& c : conditions_) {
      const Eigen::Index nc = c.X.cols();
      Eigen::ArrayXd v = out.segment(col, nc).transpose().array() - c.target;
      loss += cfg_.boundary_weight * v.square().mean();
      if (grad) g.segment(col, nc) += (cfg_.boundary_weight * 2.0 * v / static_cast<double>(nc)).matrix().transpose();
      col += nc;
    }
    if (grad) *grad = net.backward(batch_, g);
    return loss;
  }

 private:
  struct Condition {
    Eigen::MatrixXd X;
    Eigen::ArrayXd target;
  };

  TrainingProblem p_;
  TrainConfig cfg_;
  CompiledExpr residual_;
  Eigen::MatrixXd interior_;
  std::vector<std::map<std::vector<int>, double>> stencils_;
  std::vector<std::vector<int>> offsets_;
  std::vector<Condition> conditions_;
  Eigen::MatrixXd batch_;

  std::size_t offset_index(const std::vector<int>& off) const {
    return static_cast<std::size_t>(std::lower_bound(offsets_.begin(), offsets_.end(), off) - offsets_.begin());
  }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  LossTrace trace;
  Mlp net;
};

class Adam {
 public:
  Adam(Eigen::Index n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  double lr_, b1_, b2_, eps_;
  Eigen::VectorXd m_, v_;
  int t_ = 0;
};

/// Runs cfg.steps Adam steps. Record t holds the loss and gradient norm at
/// the parameters before update t. A non-finite loss or gradient, or a loss
/// above cfg.divergence_factor times the first one, stops training and marks
/// the trace diverged.
inline TrainResult train(const TrainingProblem& problem, const NetSpec& net_spec, const TrainConfig& cfg) {
  if (cfg.steps < 1) throw ConfigInvalid("steps must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigInvalid("learning rate must be positive");
  if (!(cfg.divergence_factor > 1.0)) throw ConfigInvalid("divergence factor must exceed 1");
  PinnObjective objective(problem, cfg);
  TrainResult res{{}, Mlp(problem.inputs(), net_spec, cfg.seed, cfg.zero_output_init)};
  Adam opt(static_cast<Eigen::Index>(res.net.parameter_count()), cfg.learning_rate);
  Eigen::VectorXd params = res.net.parameters();
  Eigen::VectorXd grad;
  for (int t = 1; t <= cfg.steps; ++t) {
    double loss = objective.evaluate(res.net, &grad);
    double gn = grad.norm();
    const bool blown = !res.trace.records.empty() && loss > cfg.divergence_factor * res.trace.records.front().loss;
    if (!std::isfinite(loss) || !std::isfinite(gn) || blown) {
      res.trace.diverged_at = t;
      break;
    }
    res.trace.records.push_back({t, loss, gn});
    opt.step(params, grad);
    res.net.set_parameters(params);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Uniform grid with `per_axis` points per axis, endpoints included.
inline Eigen::MatrixXd evaluation_grid(const std::vector<std::pair<double, double>>& box, int per_axis = 256) {
  const int dims = static_cast<int>(box.size());
  Eigen::Index total = 1;
  for (int a = 0; a < dims; ++a) total *= per_axis;
  Eigen::MatrixXd X(dims, total);
  for (Eigen::Index n = 0; n < total; ++n) {
    Eigen::Index rem = n;
    for (int a = dims - 1; a >= 0; --a) {
      const int i = static_cast<int>(rem % per_axis);
      rem /= per_axis;
      const auto [lo, hi] = box[static_cast<std::size_t>(a)];
      X(a, n) = per_axis == 1 ? lo : lo + (hi - lo) * i / (per_axis - 1);
    }
  }
  return X;
}

/// Mean squared difference between the network and `reference` over the grid.
inline double evaluate_mse(const Mlp& net, const std::function<Eigen::ArrayXd(const Eigen::MatrixXd&)>& reference,
                           const std::vector<std::pair<double, double>>& box, int per_axis = 256) {
  Eigen::MatrixXd X = evaluation_grid(box, per_axis);
  Eigen::ArrayXd diff = net.forward(X).transpose().array() - reference(X);
  return diff.square().mean();
}

inline double evaluate_mse(const Mlp& net, const Expr& exact, const std::vector<std::string>& coords,
                           const std::vector<std::pair<double, double>>& box, int per_axis = 256) {
  CompiledExpr ref(exact, coords);
  return evaluate_mse(
      net, [&](const Eigen::MatrixXd& X) { return ref.evaluate({&X, nullptr, nullptr}); }, box, per_axis);
}

/// Mean squared PDE residual over the interior of the evaluation grid.
inline double residual_mse(const Mlp& net, const TrainingProblem& p, double h, int per_axis = 256) {
  std::vector<std::pair<double, double>> inner;
  for (auto [lo, hi] : p.box) inner.emplace_back(lo + 2 * h, hi - 2 * h);
  Eigen::MatrixXd X = evaluation_grid(inner, per_axis);
  CompiledExpr r(p.residual, p.coords, p.field);
  Eigen::ArrayXd u = net.forward(X).transpose().array();
  std::vector<Eigen::ArrayXd> d;
  for (const auto& mi : r.derivatives()) {
    Eigen::ArrayXd v = Eigen::ArrayXd::Zero(X.cols());
    for (const auto& [off, w] : mixed_stencil(mi, h)) {
      Eigen::MatrixXd S = X;
      for (std::size_t a = 0; a < off.size(); ++a) S.row(static_cast<Eigen::Index>(a)).array() += h * off[a];
      v += w * net.forward(S).transpose().array();
    }
    d.push_back(std::move(v));
  }
  return r.evaluate({&X, &u, &d}).square().mean();
}

/// Solution MSE against the exact solution when known, else residual MSE.
inline double final_mse(const Mlp& net, const TrainingProblem& p, double h, int per_axis = 256) {
  if (p.exact) return evaluate_mse(net, *p.exact, p.coords, p.box, per_axis);
  return residual_mse(net, p, h, per_axis);
}

}  // namespace pinnpipe
