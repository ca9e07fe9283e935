#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "pointbirth/cli.hpp"

using namespace pointbirth;
using namespace pointbirth::cli;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pointbirth_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const char* kSmall = R"({
  "model": {"d": 2},
  "grid": {"n": 96},
  "solver": {"T": 0.5, "panels_per_unit": 16, "start_levels": 8},
  "sim": {"replicates": 40, "trotter_n": 4, "t": 0.5, "seed": 3}
})";

int run(const std::string& text, Experiment e, const fs::path& dir, std::string* err_text = nullptr,
        Overrides o = {}) {
  o.out = dir.string();
  std::ostringstream log, err;
  const int code = run_from_text(text, e, o, log, err);
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST(ParseConfig, DefaultsAndReferenceValues) {
  const RunConfig c = parse_config("{\"model\": {\"d\": 3}}", Experiment::solve);
  EXPECT_EQ(c.experiment, Experiment::solve);
  EXPECT_EQ(c.model.d, 3);
  EXPECT_DOUBLE_EQ(c.model.beta, 0.5);
  EXPECT_DOUBLE_EQ(c.model.rho_value(), 1.6);
  EXPECT_EQ(c.kernel.d, 3);
  const RunConfig empty = parse_config("");
  EXPECT_EQ(empty.experiment, Experiment::verify);
  EXPECT_EQ(empty.model.d, 2);
}

TEST(ParseConfig, RejectsHypothesisViolation) {
  try {
    parse_config(R"({"model": {"d": 3, "beta": 1.0, "rho": 1.5}})", Experiment::simulate);
    FAIL() << "expected a configuration error";
  } catch (const ConfigErrors& e) {
    EXPECT_NE(std::string(e.what()).find("hypothesis"), std::string::npos) << e.what();
  }
}

TEST(ParseConfig, NamesEveryOffendingField) {
  try {
    parse_config(R"({"grid": {"n": "many", "bogus": 1}, "threads": -2, "solver": {"method": "euler"}})");
    FAIL() << "expected a configuration error";
  } catch (const ConfigErrors& e) {
    const std::string all = e.what();
    EXPECT_NE(all.find("grid.n"), std::string::npos) << all;
    EXPECT_NE(all.find("grid.bogus: unknown key"), std::string::npos) << all;
    EXPECT_NE(all.find("threads"), std::string::npos) << all;
    EXPECT_NE(all.find("solver.method"), std::string::npos) << all;
    EXPECT_GE(e.errors().size(), 4u);
  }
  EXPECT_THROW(parse_config("{not json"), ConfigErrors);
  EXPECT_THROW(parse_config(R"({"experiment": "kernel"})", Experiment::solve), ConfigErrors);
}

TEST(ParseConfig, OverridesAndResolvedConfig) {
  RunConfig c = parse_config(kSmall, Experiment::solve);
  apply_overrides(c, Overrides{42u, std::string("x"), 2, std::string("trotter"), 16});
  EXPECT_EQ(c.sim.seed, 42u);
  EXPECT_EQ(c.outputs.dir, "x");
  EXPECT_EQ(c.threads, 2);
  EXPECT_EQ(c.solve.method, "trotter");
  EXPECT_EQ(c.solve.n, 16);
  Overrides bad;
  bad.method = "euler";
  EXPECT_THROW(apply_overrides(c, bad), ConfigErrors);
  // The resolved config parses back to itself.
  const json j = resolved_json(c);
  const RunConfig back = parse_config(j.dump());
  EXPECT_EQ(resolved_json(back), j);
}

TEST(Experiments, KernelTable) {
  const fs::path dir = fresh_dir("kernel");
  ASSERT_EQ(run(R"({"model": {"d": 3}})", Experiment::kernel, dir), kOk);
  const auto rows = lines(dir / "kernel.csv");
  ASSERT_EQ(rows.size(), 1u + 81u);
  EXPECT_EQ(rows[0], "d,alpha,t,rx,ry,cos_angle,heat,image,alpha_corr,total,tolerance");
  const json s = json::parse(slurp(dir / "kernel_summary.json"));
  EXPECT_EQ(s["status"], "ok");
  EXPECT_EQ(s["rows"], 81);
  EXPECT_EQ(s["config"]["model"]["d"], 3);
}

TEST(Experiments, FlowSolveAndSimulate) {
  const fs::path dir = fresh_dir("runs");
  ASSERT_EQ(run(kSmall, Experiment::flow, dir), kOk);
  EXPECT_GT(lines(dir / "flow.csv").size(), 1u);
  ASSERT_EQ(run(kSmall, Experiment::solve, dir), kOk);
  const json solve = json::parse(slurp(dir / "solve_summary.json"));
  EXPECT_EQ(solve["method"], "picard");
  EXPECT_GT(solve["h_norm_final"].get<double>(), 0.0);
  const auto rows = lines(dir / "solve.csv");
  ASSERT_GT(rows.size(), 1u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    double t, r, v, ub;
    ASSERT_EQ(std::sscanf(rows[i].c_str(), "%lf,%lf,%lf,%lf", &t, &r, &v, &ub), 4);
    EXPECT_LE(v, ub * (1.0 + 1e-9)) << rows[i];
  }
  ASSERT_EQ(run(kSmall, Experiment::simulate, dir), kOk);
  const json sim = json::parse(slurp(dir / "simulate_summary.json"));
  const auto lap = sim["laplace"];
  EXPECT_LT(std::abs(lap["mean"].get<double>() - lap["oracle"].get<double>()), 4.0 * lap["se"].get<double>());
  EXPECT_EQ(lines(dir / "simulate.csv")[0], "t,replicate,n_particles,total_mass,pairing_value,tolerance");
}

TEST(Experiments, SimulationIsReproducible) {
  const fs::path a = fresh_dir("rep_a"), b = fresh_dir("rep_b"), c = fresh_dir("rep_c");
  ASSERT_EQ(run(kSmall, Experiment::simulate, a), kOk);
  ASSERT_EQ(run(kSmall, Experiment::simulate, b), kOk);
  EXPECT_EQ(slurp(a / "simulate.csv"), slurp(b / "simulate.csv"));
  Overrides o;
  o.seed = 99;
  ASSERT_EQ(run(kSmall, Experiment::simulate, c, nullptr, o), kOk);
  EXPECT_NE(slurp(a / "simulate.csv"), slurp(c / "simulate.csv"));
  // Thread count does not change the replicates.
  Overrides t;
  t.threads = 3;
  const fs::path d = fresh_dir("rep_d");
  ASSERT_EQ(run(kSmall, Experiment::simulate, d, nullptr, t), kOk);
  EXPECT_EQ(slurp(a / "simulate.csv"), slurp(d / "simulate.csv"));
}

TEST(Experiments, TrotterResidualShrinksWithLevel) {
  double prev = INFINITY;
  for (int n : {4, 32}) {
    const fs::path dir = fresh_dir("trotter" + std::to_string(n));
    Overrides o;
    o.method = "trotter";
    o.n = n;
    ASSERT_EQ(run(kSmall, Experiment::solve, dir, nullptr, o), kOk);
    const double res = json::parse(slurp(dir / "solve_summary.json"))["max_residual"].get<double>();
    EXPECT_LT(res, prev) << "n = " << n;
    prev = res;
  }
}

TEST(Experiments, ConfigErrorsGiveJsonAndExitTwo) {
  const fs::path dir = fresh_dir("bad");
  std::string err;
  EXPECT_EQ(run(R"({"model": {"d": 5}})", Experiment::solve, dir, &err), kConfigError);
  const json e = json::parse(err);
  EXPECT_EQ(e["status"], "error");
  EXPECT_EQ(e["kind"], "config");
  EXPECT_NE(e["details"].dump().find("model.d"), std::string::npos);
  EXPECT_EQ(json::parse(slurp(dir / "error.json")), e);
}

TEST(Binary, SubcommandsAndExitCodes) {
  const char* exe = std::getenv("POINTBIRTH_CLI");
  if (!exe) GTEST_SKIP() << "POINTBIRTH_CLI not set";
  const fs::path dir = fresh_dir("binary");
  fs::create_directories(dir);
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << R"({"model": {"d": 3}})";
  const std::string base = std::string("\"") + exe + "\"";
  auto sh = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(sh(base + " kernel --config " + cfg.string() + " --out " + (dir / "k").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "k" / "kernel.csv"));
  EXPECT_EQ(sh(base + " nonsense"), 2);
  EXPECT_EQ(sh(base + " kernel --config " + (dir / "missing.json").string()), 2);
  std::ofstream(dir / "bad.json") << R"({"model": {"d": 3, "beta": 1.0}})";
  EXPECT_EQ(sh(base + " simulate --config " + (dir / "bad.json").string() + " --out " + (dir / "e").string()), 2);
  EXPECT_TRUE(fs::exists(dir / "e" / "error.json"));
}
