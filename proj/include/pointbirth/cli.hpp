#pragma once

// Batch front-end: JSON run configurations, the five experiments and their
// CSV/JSON artifacts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointbirth/errors.hpp"
#include "pointbirth/field.hpp"
#include "pointbirth/kernel.hpp"
#include "pointbirth/loglaplace.hpp"
#include "pointbirth/simulate.hpp"
#include "pointbirth/verify.hpp"

namespace pointbirth::cli {

using json = nlohmann::json;

enum class Experiment { kernel, flow, solve, simulate, verify };

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"kernel", "flow", "solve", "simulate", "verify"};
  return names;
}

inline std::string to_string(Experiment e) { return experiment_names()[static_cast<int>(e)]; }

inline std::optional<Experiment> parse_experiment(const std::string& s) {
  const auto& names = experiment_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<Experiment>(i);
  return std::nullopt;
}

enum ExitCode { kOk = 0, kRuntimeError = 1, kConfigError = 2, kNonConvergence = 3, kAcceptanceFailure = 4 };

// Rejected configuration with one message per offending field.
class ConfigErrors : public ConfigError {
 public:
  explicit ConfigErrors(std::vector<std::string> errors)
      : ConfigError(join(errors)), errors_(std::move(errors)) {}

  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& errors) {
    std::string s;
    for (const auto& e : errors) s += (s.empty() ? "" : "; ") + e;
    return s;
  }

  std::vector<std::string> errors_;
};

struct FunctionSpec {
  std::string kind = "gaussian";
  double sigma = 1.0;
  double amplitude = 1.0;
  double xi = 0.5;
  double radius = 1.0;
  double width = 0.25;

  TestFunction make(int d, double rho) const {
    if (kind == "weight_power") return TestFunction::weight_power(d, xi, sigma, rho);
    if (kind == "ball") return TestFunction::mollified_ball(d, radius, width, rho);
    return TestFunction::gaussian(d, sigma, amplitude, rho);
  }
};

struct KernelTableSpec {
  std::vector<double> times{0.25, 0.5, 1.0};
  std::vector<double> rx{0.5, 1.0, 2.0};
  std::vector<double> ry{0.5, 1.0, 2.0};
  std::vector<double> cos_angle{1.0, 0.0, -1.0};
};

struct FlowSpec {
  std::vector<double> times{0.25, 0.5, 1.0};
};

struct SolveSpec {
  std::string method = "picard";
  int n = 64;
  std::string init = "flow";
  bool residuals = true;
};

struct Atom {
  double r = 1.0;
  double cos_angle = 1.0;
  double mass = 1.0;
};

struct SimulateSpec {
  double t = 0.5;
  std::vector<Atom> atoms{Atom{}};
};

struct VerifySpec {
  std::vector<int> only;
  int replicates = 10000;
};

struct OutputSpec {
  std::string dir = "out";
};

struct RunConfig {
  Experiment experiment = Experiment::verify;
  ModelParams model = ModelParams::reference(2);
  KernelParams kernel{2, 0.0};
  GridSpec grid;
  SolverConfig solver;
  SimConfig sim;
  FunctionSpec function;
  KernelTableSpec kernel_table;
  FlowSpec flow;
  SolveSpec solve;
  SimulateSpec simulate;
  VerifySpec verify;
  OutputSpec outputs;
  int threads = 0;
};

namespace detail {

// Typed reader over one JSON object that records errors by path and reports
// keys it was never asked about.
class Section {
 public:
  Section(const json* node, std::string path, std::vector<std::string>& errors)
      : node_(node), path_(std::move(path)), errors_(errors) {
    if (node_ && !node_->is_object()) {
      fail("", "must be an object");
      node_ = nullptr;
    }
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void fail(const std::string& key, const std::string& reason) { errors_.push_back(where(key) + ": " + reason); }

  const json* find(const std::string& key) {
    seen_.insert(key);
    if (!node_) return nullptr;
    auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (v->is_number())
        out = v->get<double>();
      else
        fail(key, "expected a number");
    }
  }

  template <class Int>
  void integer(const std::string& key, Int& out) {
    if (const json* v = find(key)) {
      if (v->is_number_integer() || v->is_number_unsigned())
        out = v->get<Int>();
      else if (v->is_number_float() && std::floor(v->get<double>()) == v->get<double>())
        out = static_cast<Int>(v->get<double>());
      else
        fail(key, "expected an integer");
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (v->is_boolean())
        out = v->get<bool>();
      else
        fail(key, "expected true or false");
    }
  }

  void string(const std::string& key, std::string& out, const std::vector<std::string>& allowed) {
    if (const json* v = find(key)) {
      if (!v->is_string()) {
        fail(key, "expected a string");
        return;
      }
      const auto s = v->get<std::string>();
      if (std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
        std::string list;
        for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
        fail(key, "'" + s + "' is not one of " + list);
        return;
      }
      out = s;
    }
  }

  void numbers(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->empty()) {
        fail(key, "expected a nonempty array of numbers");
        return;
      }
      std::vector<double> xs;
      for (const auto& x : *v) {
        if (!x.is_number()) {
          fail(key, "expected a nonempty array of numbers");
          return;
        }
        xs.push_back(x.get<double>());
      }
      out = std::move(xs);
    }
  }

  Section sub(const std::string& key) { return Section(find(key), where(key), errors_); }

  bool present() const { return node_ != nullptr; }
  const std::string& path() const { return path_; }

  void finish() {
    if (!node_) return;
    for (auto it = node_->begin(); it != node_->end(); ++it)
      if (!seen_.count(it.key())) fail(it.key(), "unknown key");
  }

 private:
  const json* node_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

template <class F>
void check(std::vector<std::string>& errors, const std::string& path, bool ok, F&& reason) {
  if (!ok) errors.push_back(path + ": " + reason());
}

// Runs a validate() that throws ConfigError and records its message.
template <class F>
void collect(std::vector<std::string>& errors, F&& validate) {
  try {
    validate();
  } catch (const std::exception& e) {
    errors.push_back(e.what());
  }
}

}  // namespace detail

// Parses and validates a JSON run configuration. `experiment` (from the
// command line) takes the place of the optional "experiment" key. Throws
// ConfigErrors listing every problem found.
inline RunConfig parse_config(const std::string& text, std::optional<Experiment> experiment = std::nullopt) {
  json doc;
  try {
    doc = text.empty() ? json::object() : json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigErrors({std::string("<root>: invalid JSON: ") + e.what()});
  }
  std::vector<std::string> errors;
  RunConfig cfg;
  detail::Section root(&doc, "", errors);

  std::string exp_name = experiment ? to_string(*experiment) : "verify";
  if (const json* e = root.find("experiment")) {
    if (!e->is_string() || !parse_experiment(e->get<std::string>()))
      root.fail("experiment", "expected one of kernel, flow, solve, simulate, verify");
    else if (experiment && e->get<std::string>() != exp_name)
      root.fail("experiment", "'" + e->get<std::string>() + "' conflicts with the requested '" + exp_name + "'");
    else
      exp_name = e->get<std::string>();
  }
  cfg.experiment = *parse_experiment(exp_name);

  auto model = root.sub("model");
  model.integer("d", cfg.model.d);
  if (cfg.model.d != 2 && cfg.model.d != 3) {
    errors.push_back("model.d: must be 2 or 3");
    cfg.model.d = 2;
  }
  // Reference values for the chosen dimension fill whatever is not given.
  {
    const int d = cfg.model.d;
    cfg.model = ModelParams::reference(d);
  }
  model.number("alpha", cfg.model.alpha);
  model.number("beta", cfg.model.beta);
  model.number("eta", cfg.model.eta);
  model.number("rho", cfg.model.rho);
  model.finish();
  const int d = cfg.model.d;

  auto kernel = root.sub("kernel");
  cfg.kernel = cfg.model.kernel();
  int kd = d;
  double kalpha = cfg.model.alpha;
  kernel.integer("d", kd);
  kernel.number("alpha", kalpha);
  kernel.number("rel_tol", cfg.kernel.rel_tol);
  detail::check(errors, "kernel.d", kd == d, [&] { return "differs from model.d = " + std::to_string(d); });
  detail::check(errors, "kernel.alpha", kalpha == cfg.model.alpha,
                [&] { return "differs from model.alpha = " + std::to_string(cfg.model.alpha); });
  kernel.numbers("times", cfg.kernel_table.times);
  kernel.numbers("rx", cfg.kernel_table.rx);
  kernel.numbers("ry", cfg.kernel_table.ry);
  kernel.numbers("cos_angle", cfg.kernel_table.cos_angle);
  kernel.finish();
  for (double t : cfg.kernel_table.times)
    detail::check(errors, "kernel.times", t > 0.0, [] { return "times must be positive"; });
  for (double r : cfg.kernel_table.rx)
    detail::check(errors, "kernel.rx", r > 0.0, [] { return "radii must be positive"; });
  for (double r : cfg.kernel_table.ry)
    detail::check(errors, "kernel.ry", r > 0.0, [] { return "radii must be positive"; });
  for (double c : cfg.kernel_table.cos_angle)
    detail::check(errors, "kernel.cos_angle", c >= -1.0 && c <= 1.0, [] { return "values must lie in [-1, 1]"; });

  auto fn = root.sub("test_function");
  fn.string("kind", cfg.function.kind, {"gaussian", "weight_power", "ball"});
  fn.number("sigma", cfg.function.sigma);
  fn.number("amplitude", cfg.function.amplitude);
  fn.number("xi", cfg.function.xi);
  fn.number("radius", cfg.function.radius);
  fn.number("width", cfg.function.width);
  fn.finish();
  detail::check(errors, "test_function.sigma", cfg.function.sigma > 0.0, [] { return "must be positive"; });
  detail::check(errors, "test_function.amplitude", cfg.function.amplitude >= 0.0, [] { return "must be nonnegative"; });
  detail::check(errors, "test_function.xi", cfg.function.xi >= 0.0 && cfg.function.xi <= 1.0,
                [] { return "must lie in [0, 1]"; });
  detail::check(errors, "test_function.radius", cfg.function.radius > 0.0, [] { return "must be positive"; });
  detail::check(errors, "test_function.width", cfg.function.width > 0.0, [] { return "must be positive"; });

  auto grid = root.sub("grid");
  grid.integer("n", cfg.grid.n);
  grid.number("r_min", cfg.grid.r_min);
  grid.number("r_knee", cfg.grid.r_knee);
  grid.number("r_max", cfg.grid.r_max);
  grid.finish();
  detail::collect(errors, [&] { cfg.grid.validate(); });

  auto solver = root.sub("solver");
  solver.number("T", cfg.solver.T);
  solver.string("method", cfg.solve.method, {"picard", "trotter"});
  solver.integer("n", cfg.solve.n);
  solver.string("init", cfg.solve.init, {"flow", "zero", "datum"});
  solver.boolean("residuals", cfg.solve.residuals);
  solver.number("picard_tol", cfg.solver.picard_tol);
  solver.integer("max_picard_iters", cfg.solver.max_picard_iters);
  solver.integer("panels_per_unit", cfg.solver.panels_per_unit);
  solver.integer("start_levels", cfg.solver.start_levels);
  solver.number("start_ratio", cfg.solver.start_ratio);
  solver.integer("tau_nodes", cfg.solver.tau_nodes);
  solver.integer("tau_nodes_start", cfg.solver.tau_nodes_start);
  solver.number("tau_grading", cfg.solver.tau_grading);
  solver.integer("stencil", cfg.solver.stencil);
  solver.number("restart_contraction", cfg.solver.restart_contraction);
  solver.boolean("independent_residual", cfg.solver.independent_residual);
  solver.finish();
  cfg.solver.trotter_n = cfg.solve.n;
  detail::collect(errors, [&] { cfg.solver.validate(); });

  auto flow = root.sub("flow");
  flow.numbers("times", cfg.flow.times);
  flow.finish();
  for (double t : cfg.flow.times)
    detail::check(errors, "flow.times", t > 0.0, [] { return "times must be positive"; });

  auto sim = root.sub("sim");
  sim.integer("trotter_n", cfg.sim.trotter_n);
  sim.integer("replicates", cfg.sim.replicates);
  sim.integer("seed", cfg.sim.seed);
  sim.integer("particle_cap", cfg.sim.particle_cap);
  sim.number("split_threshold", cfg.sim.split_threshold);
  sim.boolean("splitting", cfg.sim.splitting);
  sim.boolean("flow_first", cfg.sim.flow_first);
  sim.number("t", cfg.simulate.t);
  if (const json* atoms = sim.find("initial")) {
    if (!atoms->is_array() || atoms->empty()) {
      sim.fail("initial", "expected a nonempty array of atoms");
    } else {
      cfg.simulate.atoms.clear();
      for (std::size_t i = 0; i < atoms->size(); ++i) {
        detail::Section a(&(*atoms)[i], sim.where("initial") + "[" + std::to_string(i) + "]", errors);
        Atom atom;
        a.number("r", atom.r);
        a.number("cos_angle", atom.cos_angle);
        a.number("mass", atom.mass);
        a.finish();
        detail::check(errors, a.where("r"), atom.r > 0.0, [] { return "atoms must sit off the origin"; });
        detail::check(errors, a.where("cos_angle"), atom.cos_angle >= -1.0 && atom.cos_angle <= 1.0,
                      [] { return "must lie in [-1, 1]"; });
        detail::check(errors, a.where("mass"), atom.mass >= 0.0, [] { return "must be nonnegative"; });
        cfg.simulate.atoms.push_back(atom);
      }
    }
  }
  sim.finish();
  detail::check(errors, "sim.t", cfg.simulate.t >= 0.0, [] { return "must be nonnegative"; });
  detail::collect(errors, [&] { cfg.sim.validate(); });

  auto verify = root.sub("verify");
  if (const json* only = verify.find("only")) {
    if (!only->is_array()) {
      verify.fail("only", "expected an array of check ids");
    } else {
      for (const auto& x : *only) {
        if (!x.is_number_integer() || x.get<int>() < 1 || x.get<int>() > 11)
          verify.fail("only", "check ids run from 1 to 11");
        else
          cfg.verify.only.push_back(x.get<int>());
      }
    }
  }
  verify.integer("replicates", cfg.verify.replicates);
  verify.finish();
  detail::check(errors, "verify.replicates", cfg.verify.replicates >= 2, [] { return "must be at least 2"; });

  auto outputs = root.sub("outputs");
  if (const json* dir = outputs.find("dir")) {
    if (dir->is_string())
      cfg.outputs.dir = dir->get<std::string>();
    else
      outputs.fail("dir", "expected a string");
  }
  outputs.finish();

  root.integer("threads", cfg.threads);
  detail::check(errors, "threads", cfg.threads >= 0, [] { return "must be nonnegative"; });
  root.finish();

  if (cfg.experiment == Experiment::solve || cfg.experiment == Experiment::simulate) {
    const auto rep = validate_hypothesis(cfg.model);
    for (const auto& v : rep.violations) errors.push_back("model: hypothesis violated: " + v);
  } else if (!(cfg.model.beta > 0.0 && cfg.model.beta <= 1.0)) {
    errors.push_back("model.beta: must lie in (0, 1]");
  }
  if (!errors.empty()) throw ConfigErrors(std::move(errors));
  cfg.kernel.d = d;
  cfg.kernel.alpha = cfg.model.alpha;
  return cfg;
}

// The fully resolved configuration, as embedded in every summary.
inline json resolved_json(const RunConfig& c) {
  json atoms = json::array();
  for (const auto& a : c.simulate.atoms) atoms.push_back({{"r", a.r}, {"cos_angle", a.cos_angle}, {"mass", a.mass}});
  return {
      {"experiment", to_string(c.experiment)},
      {"model",
       {{"d", c.model.d}, {"alpha", c.model.alpha}, {"beta", c.model.beta}, {"eta", c.model.eta},
        {"rho", c.model.rho_value()}}},
      {"kernel",
       {{"d", c.kernel.d},
        {"alpha", c.kernel.alpha},
        {"rel_tol", c.kernel.rel_tol},
        {"times", c.kernel_table.times},
        {"rx", c.kernel_table.rx},
        {"ry", c.kernel_table.ry},
        {"cos_angle", c.kernel_table.cos_angle}}},
      {"test_function",
       {{"kind", c.function.kind},
        {"sigma", c.function.sigma},
        {"amplitude", c.function.amplitude},
        {"xi", c.function.xi},
        {"radius", c.function.radius},
        {"width", c.function.width}}},
      {"grid", {{"n", c.grid.n}, {"r_min", c.grid.r_min}, {"r_knee", c.grid.r_knee}, {"r_max", c.grid.r_max}}},
      {"solver",
       {{"T", c.solver.T},
        {"method", c.solve.method},
        {"n", c.solve.n},
        {"init", c.solve.init},
        {"residuals", c.solve.residuals},
        {"picard_tol", c.solver.picard_tol},
        {"max_picard_iters", c.solver.max_picard_iters},
        {"panels_per_unit", c.solver.panels_per_unit},
        {"start_levels", c.solver.start_levels},
        {"start_ratio", c.solver.start_ratio},
        {"tau_nodes", c.solver.tau_nodes},
        {"tau_nodes_start", c.solver.tau_nodes_start},
        {"tau_grading", c.solver.tau_grading},
        {"stencil", c.solver.stencil},
        {"restart_contraction", c.solver.restart_contraction},
        {"independent_residual", c.solver.independent_residual}}},
      {"flow", {{"times", c.flow.times}}},
      {"sim",
       {{"trotter_n", c.sim.trotter_n},
        {"replicates", c.sim.replicates},
        {"seed", c.sim.seed},
        {"particle_cap", c.sim.particle_cap},
        {"split_threshold", c.sim.split_threshold},
        {"splitting", c.sim.splitting},
        {"flow_first", c.sim.flow_first},
        {"t", c.simulate.t},
        {"initial", atoms}}},
      {"verify", {{"only", c.verify.only}, {"replicates", c.verify.replicates}}},
      {"outputs", {{"dir", c.outputs.dir}}},
      {"threads", c.threads},
  };
}

// Command-line overrides, applied after parsing.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<std::string> method;
  std::optional<int> n;
};

inline void apply_overrides(RunConfig& c, const Overrides& o) {
  std::vector<std::string> errors;
  if (o.seed) c.sim.seed = *o.seed;
  if (o.out) c.outputs.dir = *o.out;
  if (o.threads) {
    if (*o.threads < 0) errors.push_back("--threads: must be nonnegative");
    c.threads = std::max(0, *o.threads);
  }
  if (o.method) {
    if (*o.method != "picard" && *o.method != "trotter")
      errors.push_back("--method: '" + *o.method + "' is not one of picard, trotter");
    else
      c.solve.method = *o.method;
  }
  if (o.n) {
    if (*o.n < 1) errors.push_back("--n: must be at least 1");
    c.solve.n = *o.n;
    c.solver.trotter_n = *o.n;
  }
  if (!errors.empty()) throw ConfigErrors(std::move(errors));
}

inline json error_json(const std::string& kind, const std::string& message,
                       const std::vector<std::string>& details = {}) {
  return {{"status", "error"}, {"kind", kind}, {"message", message}, {"details", details}};
}

namespace detail {

inline std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// CSV writer with 17 significant digits for every float.
class Csv {
 public:
  Csv(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
  }

  template <class... Ts>
  void row(const Ts&... xs) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(xs), first = false), ...);
    out_ << "\n";
  }

 private:
  static std::string cell(double x) { return num(x); }
  static std::string cell(int x) { return std::to_string(x); }
  static std::string cell(std::size_t x) { return std::to_string(x); }
  static std::string cell(const std::string& x) { return x; }

  std::ofstream out_;
};

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline json estimate_json(const Estimate& e, double oracle) {
  const double z = e.se > 0.0 ? (e.mean - oracle) / e.se : 0.0;
  return {{"mean", e.mean}, {"se", e.se},           {"tolerance", 3.0 * e.se}, {"oracle", oracle},
          {"z", z},         {"count", e.count},     {"variance", e.variance},  {"variance_se", e.variance_se}};
}

struct Context {
  const RunConfig& config;
  std::filesystem::path dir;
  std::ostream& log;
  json summary;
};

inline int run_kernel(Context& ctx) {
  const auto& c = ctx.config;
  const KernelParams& kp = c.kernel;
  Csv csv(ctx.dir / "kernel.csv",
          {"d", "alpha", "t", "rx", "ry", "cos_angle", "heat", "image", "alpha_corr", "total", "tolerance"});
  std::size_t rows = 0;
  for (double t : c.kernel_table.times)
    for (double rx : c.kernel_table.rx)
      for (double ry : c.kernel_table.ry)
        for (double ca : c.kernel_table.cos_angle) {
          const auto kv = palpha_kernel(kp, t, SpacePoint::polar(kp.d, rx), SpacePoint::polar(kp.d, ry, ca));
          csv.row(kp.d, kp.alpha, t, rx, ry, ca, kv.heat, kv.image, kv.alpha_corr, kv.value,
                  kp.rel_tol * std::abs(kv.value));
          ++rows;
        }
  ctx.summary["rows"] = rows;
  ctx.log << "kernel: " << rows << " rows\n";
  return kOk;
}

inline int run_flow(Context& ctx) {
  const auto& c = ctx.config;
  const int d = c.model.d;
  const double rho = c.model.rho_value();
  const TestFunction f = c.function.make(d, rho);
  auto grid = RadialGrid::make(d, c.grid);
  // Discretisation error estimated against a grid of half the resolution.
  GridSpec coarse_spec = c.grid;
  coarse_spec.n = std::max(16, c.grid.n / 2);
  auto coarse = RadialGrid::make(d, coarse_spec);
  OperatorCache cache(grid, c.threads);
  OperatorCache coarse_cache(coarse, c.threads);
  const FieldSample fs = FieldSample::sample(grid, f);
  const FieldSample fc = FieldSample::sample(coarse, f);
  // Envelope profile (1 + t^{-p}) phi of the flowed function.
  const double p = 0.5 - (d + 1) * (rho - 1.0) / (4.0 * rho);
  Csv csv(ctx.dir / "flow.csv",
          {"t", "r", "value", "heat_part", "correction_part", "envelope_ratio", "tolerance"});
  json per_time = json::array();
  for (double t : c.flow.times) {
    const FieldSample heat = apply_heat(cache, t, fs);
    const FieldSample corr = apply_correction(cache, c.kernel.alpha, t, fs);
    const FieldSample value = apply_palpha(cache, c.kernel, t, fs);
    const FieldSample check = apply_palpha(coarse_cache, c.kernel, t, fc);
    double max_ratio = 0.0;
    for (std::size_t i = 0; i < grid->size(); ++i) {
      const double r = grid->nodes[i];
      const double ratio = value.values[i] / ((1.0 + std::pow(t, -p)) * reference_weight(d, r));
      max_ratio = std::max(max_ratio, ratio);
      csv.row(t, r, value.values[i], heat.values[i], corr.values[i], ratio, std::abs(value.values[i] - check(r)));
    }
    per_time.push_back({{"t", t}, {"h_norm", h_norm(value, rho)}, {"max_envelope_ratio", max_ratio}});
    cache.clear();
    coarse_cache.clear();
  }
  ctx.summary["h_norm_phi"] = h_norm(fs, rho);
  ctx.summary["times"] = per_time;
  ctx.log << "flow: " << c.flow.times.size() << " times on " << grid->size() << " nodes\n";
  return kOk;
}

inline int run_solve(Context& ctx) {
  const auto& c = ctx.config;
  const int d = c.model.d;
  const double rho = c.model.rho_value();
  auto grid = RadialGrid::make(d, c.grid);
  OperatorCache cache(grid, c.threads);
  SolverConfig sc = c.solver;
  sc.threads = c.threads;
  LogLaplaceSolver solver(c.model, cache, sc);
  const FieldSample phi = FieldSample::sample(grid, c.function.make(d, rho));
  const double T = sc.T;

  Solution sol;
  if (c.solve.method == "trotter") {
    sol = solver.trotter(phi, T, c.solve.n);
  } else {
    const auto init = c.solve.init == "zero"    ? LogLaplaceSolver::Init::zero
                      : c.solve.init == "datum" ? LogLaplaceSolver::Init::datum
                                                : LogLaplaceSolver::Init::flow;
    sol = solver.picard(phi, T, init);
  }
  if (c.solve.residuals) solver.attach_residuals(sol, phi);
  const Solution upper = solver.flow(phi, T);

  Csv csv(ctx.dir / "solve.csv", {"t", "r", "v", "upper_bound", "residual", "tolerance"});
  double max_res = 0.0;
  for (std::size_t k = 0; k < sol.times.size(); ++k) {
    const double t = sol.times[k];
    const FieldSample ub = upper.at(t);
    const double res = c.solve.residuals ? sol.residuals[k] : std::numeric_limits<double>::quiet_NaN();
    if (c.solve.residuals) max_res = std::max(max_res, res);
    const double tol = std::max(c.solve.method == "picard" ? sc.picard_tol : 0.0, std::isnan(res) ? 0.0 : res);
    for (std::size_t i = 0; i < grid->size(); ++i)
      csv.row(t, grid->nodes[i], sol.values[k].values[i], ub.values[i], res, tol);
  }
  ctx.summary["method"] = c.solve.method;
  ctx.summary["iterations"] = sol.iterations;
  ctx.summary["contraction"] = sol.contraction;
  ctx.summary["h_norm_phi"] = h_norm(phi, rho);
  ctx.summary["h_norm_final"] = h_norm(sol.values.back(), rho);
  if (c.solve.residuals) ctx.summary["max_residual"] = max_res;
  if (c.solve.method == "trotter") ctx.summary["n"] = c.solve.n;
  ctx.log << "solve (" << c.solve.method << "): " << sol.times.size() << " times";
  if (c.solve.residuals) ctx.log << ", max residual " << max_res;
  ctx.log << "\n";
  return kOk;
}

inline int run_simulate(Context& ctx) {
  const auto& c = ctx.config;
  const int d = c.model.d;
  const double rho = c.model.rho_value();
  auto grid = RadialGrid::make(d, c.grid);
  OperatorCache cache(grid, c.threads);
  SimConfig sc = c.sim;
  sc.threads = c.threads;
  const TestFunction phi = c.function.make(d, rho);
  ParticleCloud mu;
  mu.d = d;
  for (const auto& a : c.simulate.atoms)
    if (a.mass > 0.0) mu.particles.push_back({SpacePoint::polar(d, a.r, a.cos_angle), a.mass});

  const int n = sc.trotter_n;
  const int steps = static_cast<int>(std::floor(c.simulate.t * n + 1e-9));
  const double t_scheme = static_cast<double>(steps) / n;
  PathSimulator sim(cache, c.model, sc);
  CloudPairing pairing(cache, c.kernel, phi);

  // rows[replicate][slice] = (n_particles, total_mass, pairing)
  struct Row {
    std::size_t count;
    double mass;
    double pairing;
  };
  std::vector<std::vector<Row>> rows(sc.replicates);
  parallel_for(rows.size(), resolve_threads(c.threads), [&](std::size_t i) {
    auto rng = replicate_rng(sc.seed, i);
    sim.run(mu, t_scheme, rng, [&](const ParticleCloud& cl) {
      rows[i].push_back({cl.size(), pairing.total_mass(cl), pairing(cl)});
    });
  });

  std::vector<Estimate> slice_mean(steps + 1);
  for (int k = 0; k <= steps; ++k) {
    std::vector<double> xs;
    for (const auto& r : rows) xs.push_back(r[k].pairing);
    slice_mean[k] = estimate_from(xs);
  }
  Csv csv(ctx.dir / "simulate.csv", {"t", "replicate", "n_particles", "total_mass", "pairing_value", "tolerance"});
  for (int k = 0; k <= steps; ++k)
    for (std::size_t i = 0; i < rows.size(); ++i)
      csv.row(static_cast<double>(k) / n, i, rows[i][k].count, rows[i][k].mass, rows[i][k].pairing,
              3.0 * slice_mean[k].se);

  std::vector<double> final_pairing;
  std::vector<double> final_laplace;
  for (const auto& r : rows) {
    final_pairing.push_back(r.back().pairing);
    final_laplace.push_back(std::exp(-r.back().pairing));
  }
  // Oracles: the scheme's own log-Laplace functional at the same level, and
  // the first moment, which carries the initial flow step when it is used.
  LogLaplaceSolver solver(c.model, cache, c.solver);
  const FieldSample ph = FieldSample::sample(grid, phi);
  const double shift = sc.flow_first ? 1.0 / n : 0.0;
  double v_sum = 0.0;
  double mean_oracle = 0.0;
  double mean_literal = 0.0;
  if (sc.flow_first) {
    const Solution tr = solver.trotter(ph, t_scheme, n);
    const FieldSample& v = tr.values[steps];
    for (const auto& p : mu.particles) v_sum += p.mass * v(p.x.norm());
  } else {
    ctx.summary["laplace_oracle_note"] = "no level-n oracle without the initial flow step";
  }
  for (const auto& p : mu.particles) {
    if (t_scheme + shift > 0.0) mean_oracle += p.mass * apply_palpha_at(c.kernel, t_scheme + shift, phi, p.x, *grid);
    else mean_oracle += p.mass * phi(p.x);
    mean_literal += p.mass * (t_scheme > 0.0 ? apply_palpha_at(c.kernel, t_scheme, phi, p.x, *grid) : phi(p.x));
  }
  const Estimate lap = estimate_from(final_laplace);
  const Estimate mean = estimate_from(final_pairing);
  ctx.summary["t"] = t_scheme;
  ctx.summary["laplace"] = estimate_json(lap, std::exp(-v_sum));
  ctx.summary["mean"] = estimate_json(mean, mean_oracle);
  ctx.summary["mean"]["oracle_time"] = t_scheme + shift;
  ctx.summary["mean_against_flow_at_t"] = estimate_json(mean, mean_literal);
  ctx.log << "simulate: " << rows.size() << " replicates to t = " << t_scheme << ", laplace z "
          << ctx.summary["laplace"]["z"].get<double>() << ", mean z " << ctx.summary["mean"]["z"].get<double>()
          << "\n";
  return kOk;
}

inline int run_verify(Context& ctx) {
  const auto& c = ctx.config;
  verify::SuiteOptions opt;
  opt.grid = c.grid;
  opt.solver = c.solver;
  opt.replicates = c.verify.replicates;
  opt.seed = c.sim.seed;
  opt.threads = c.threads;
  opt.only.insert(c.verify.only.begin(), c.verify.only.end());
  Csv csv(ctx.dir / "verify.csv", {"id", "name", "passed", "measured", "tolerance", "seconds"});
  json checks = json::array();
  bool all = true;
  const auto results = verify::run_suite(opt, [&](const verify::Check& k) {
    char line[160];
    std::snprintf(line, sizeof line, "%-4d %-28s %-5s measured %-12.4g tolerance %-10.3g %7.1fs", k.id,
                  k.name.c_str(), k.passed ? "PASS" : "FAIL", k.measured, k.threshold, k.seconds);
    ctx.log << line << "\n     " << k.detail << "\n" << std::flush;
  });
  for (const auto& k : results) {
    all = all && k.passed;
    csv.row(static_cast<int>(k.id), k.name, std::string(k.passed ? "pass" : "fail"), k.measured, k.threshold,
            k.seconds);
    checks.push_back({{"id", k.id},
                      {"name", k.name},
                      {"passed", k.passed},
                      {"measured", k.measured},
                      {"tolerance", k.threshold},
                      {"detail", k.detail},
                      {"seconds", k.seconds}});
  }
  ctx.summary["checks"] = checks;
  ctx.summary["all_passed"] = all;
  return all ? kOk : kAcceptanceFailure;
}

}  // namespace detail

// Runs the configured experiment, writing CSV and a summary JSON into the
// output directory. Errors are reported as JSON on `err` and in error.json.
inline int run_experiment(const RunConfig& config, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  std::filesystem::path dir(config.outputs.dir);
  auto report = [&](int code, const json& e) {
    err << e.dump() << "\n";
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (!ec) {
      std::ofstream out(dir / "error.json");
      out << e.dump(2) << "\n";
    }
    return code;
  };
  try {
    std::filesystem::create_directories(dir);
    detail::Context ctx{config, dir, log, json::object()};
    ctx.summary["experiment"] = to_string(config.experiment);
    ctx.summary["config"] = resolved_json(config);
    int code = kOk;
    switch (config.experiment) {
      case Experiment::kernel: code = detail::run_kernel(ctx); break;
      case Experiment::flow: code = detail::run_flow(ctx); break;
      case Experiment::solve: code = detail::run_solve(ctx); break;
      case Experiment::simulate: code = detail::run_simulate(ctx); break;
      case Experiment::verify: code = detail::run_verify(ctx); break;
    }
    ctx.summary["status"] = code == kOk ? "ok" : "failed";
    ctx.summary["exit_code"] = code;
    detail::write_json(dir / (to_string(config.experiment) + "_summary.json"), ctx.summary);
    return code;
  } catch (const ConfigErrors& e) {
    return report(kConfigError, error_json("config", "invalid configuration", e.errors()));
  } catch (const ConfigError& e) {
    return report(kConfigError, error_json("config", e.what()));
  } catch (const NonConvergenceError& e) {
    json j = error_json("nonconvergence", e.what());
    j["achieved"] = e.achieved();
    return report(kNonConvergence, j);
  } catch (const ParticleCapError& e) {
    json j = error_json("particle_cap", e.what());
    j["count"] = e.count();
    return report(kRuntimeError, j);
  } catch (const DomainError& e) {
    return report(kRuntimeError, error_json("domain", e.what()));
  } catch (const std::exception& e) {
    return report(kRuntimeError, error_json("runtime", e.what()));
  }
}

// Parses, applies overrides and runs; configuration problems become exit
// status 2 with an error JSON.
inline int run_from_text(const std::string& text, Experiment experiment, const Overrides& overrides,
                         std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  RunConfig cfg;
  try {
    cfg = parse_config(text, experiment);
    apply_overrides(cfg, overrides);
  } catch (const ConfigErrors& e) {
    const json j = error_json("config", "invalid configuration", e.errors());
    err << j.dump() << "\n";
    // Only an explicit --out is trusted as a place to leave error.json.
    if (overrides.out) {
      std::error_code ec;
      std::filesystem::create_directories(*overrides.out, ec);
      if (!ec) std::ofstream(std::filesystem::path(*overrides.out) / "error.json") << j.dump(2) << "\n";
    }
    return kConfigError;
  }
  return run_experiment(cfg, log, err);
}

}  // namespace pointbirth::cli
