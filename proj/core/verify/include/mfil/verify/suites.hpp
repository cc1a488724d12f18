#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mfil::verify {

struct SuiteResult {
  std::string name;
  bool pass = false;
  double seconds = 0.0;
  /// key: value lines with the measured quantities.
  std::vector<std::string> details;
  /// Names of failed checks within the suite.
  std::vector<std::string> failures;
};

/// Seeds used by the full-model gradient suite.
inline constexpr std::uint64_t kGradcheckSeeds[5] = {11, 23, 37, 41, 53};

SuiteResult lti_equivalence_suite(std::uint64_t seed = 1);
SuiteResult zoh_suite();
SuiteResult scan_fast_path_suite(std::uint64_t seed = 2);
SuiteResult gradcheck_suite();
SuiteResult covariance_suite(std::uint64_t seed = 3);
SuiteResult structure_suite();
SuiteResult adaptive_merge_suite(std::uint64_t seed = 4);
SuiteResult erf_suite(std::uint64_t seed = 0);
SuiteResult primitive_oracle_suite(std::uint64_t seed = 5);
SuiteResult checkpoint_suite(std::uint64_t seed = 6);
SuiteResult block_invariant_suite(std::uint64_t seed = 7);

struct NamedSuite {
  std::string name;
  std::function<SuiteResult()> run;
};

/// Everything `verify` executes, in order.
std::vector<NamedSuite> all_suites();

std::string format(const SuiteResult& r);

}  // namespace mfil::verify
