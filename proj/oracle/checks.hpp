#pragma once

// Named invariant and training checks shared by `mmi selftest` and the
// acceptance binary. Each check pins its own tolerance.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmi/config.hpp"

namespace mmi::checks {

struct Result {
  std::string id;
  std::string module;
  bool pass = false;
  double metric = 0;
  double tolerance = 0;
  std::string detail;
};

struct Options {
  RunConfig config;
  // Reduced trial counts for the self-test; the acceptance binary uses the
  // full counts.
  bool quick = false;
};

enum class Suite { Invariant, Training, Reconstruction };

struct Check {
  std::string id;
  std::string module;
  int criterion = 0;
  Suite suite = Suite::Invariant;
  std::function<Result(const Options&)> run;
};

const std::vector<Check>& registry();

/// Runs `check`, turning an escaping exception into a failed result.
Result run_check(const Check& check, const Options& options);

const char* suite_name(Suite suite);

}  // namespace mmi::checks
