// Finite-difference checks of every training loss on small random batches
// of two identities, in double precision.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xmreid {

struct GradSuiteEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
};

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 7, double tolerance = 1e-4);

}  // namespace xmreid
