#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace repirl::tools {

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Runs the exact-solver invariants over a seeded matrix of small synthetic
// MDPs (V in {2, 3}, T in 2..5, random tabular rewards).
std::vector<CheckResult> run_oracle_checks(std::uint64_t seed, int instances = 20);

}  // namespace repirl::tools
