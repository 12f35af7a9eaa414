#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace comatch {

struct CheckReport {
  std::vector<std::pair<std::string, bool>> checks;
  bool all_passed() const {
    for (const auto& [name, ok] : checks)
      if (!ok) return false;
    return !checks.empty();
  }
};

// fast end-to-end health check: numeric kernels against naive reference
// loops, worked examples, serialization round-trips, a tiny pose recovery
CheckReport run_selftest(uint64_t seed);

// analytic-gradient audits against central finite differences
CheckReport run_gradcheck(uint64_t seed);

}  // namespace comatch
