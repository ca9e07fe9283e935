#include <cstdio>
#include <set>
#include <vector>

#include "CLI11.hpp"
#include "pointbirth/verify.hpp"

using namespace pointbirth;

// Runs every acceptance check and prints one line per check. Checks listed in
// --expected-fail may fail without failing the run; an unexpected pass of one
// of them is reported but is not an error.
int main(int argc, char** argv) {
  CLI::App app{"pointbirth acceptance checks"};
  std::vector<int> expected_fail;
  std::vector<int> only;
  verify::SuiteOptions opt;
  app.add_option("--expected-fail", expected_fail, "check ids known to fail")->delimiter(',');
  app.add_option("--only", only, "run only these check ids")->delimiter(',');
  app.add_option("--replicates", opt.replicates, "simulation replicates")->check(CLI::PositiveNumber);
  app.add_option("--seed", opt.seed, "simulation seed");
  app.add_option("--threads", opt.threads, "worker threads (0: automatic)")->check(CLI::NonNegativeNumber);
  CLI11_PARSE(app, argc, argv);
  opt.only.insert(only.begin(), only.end());
  const std::set<int> known(expected_fail.begin(), expected_fail.end());

  const auto results = verify::run_suite(opt, [](const verify::Check& c) {
    std::fprintf(stderr, "  check %d done in %.1fs\n", c.id, c.seconds);
  });
  int unexpected = 0;
  for (const auto& c : results) {
    const bool tolerated = !c.passed && known.count(c.id) > 0;
    if (!c.passed && !tolerated) ++unexpected;
    const char* status = c.passed ? (known.count(c.id) ? "PASS (expected fail)" : "PASS")
                                  : (tolerated ? "FAIL (known)" : "FAIL");
    std::printf("[%2d] %-30s %-20s measured %.4g, threshold %.4g (%.1fs)\n       %s\n", c.id, c.name.c_str(), status,
                c.measured, c.threshold, c.seconds, c.detail.c_str());
  }
  std::printf("%s: %d unexpected failure(s)\n", unexpected ? "FAILED" : "OK", unexpected);
  return unexpected ? 1 : 0;
}
