// Named property suites over tensor_core, clocks and attention, shared by
// the selftest command, the unit tests and the acceptance runner. Each check
// is self-contained and deterministic.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace clockattn::suites {

struct CheckResult {
  std::string suite;   // e.g. "clocks.monotonicity"
  bool pass = false;
  std::string detail;  // failure explanation or summary statistic
};

struct SuiteOptions {
  int clock_instances = 300;      // random instances per clock-law check
  int max_len = 64;
  int max_width = 8;
  double eps_build = 1e-3;        // eps actually used to build gates
  double eps_contract = 1e-3;     // eps the invariants are asserted against
  std::uint64_t seed = 12345;
};

/// Runs every suite whose name contains `filter` (empty = all).
std::vector<CheckResult> run_property_suites(const std::string& filter = "",
                                             const SuiteOptions& opts = {});

/// Gradient certification of each tape op and of the full attention
/// forwards, against central finite differences.
std::vector<CheckResult> run_gradcheck_suites(std::uint64_t seed = 7, int instances = 10);

bool all_pass(const std::vector<CheckResult>& results);

}  // namespace clockattn::suites
