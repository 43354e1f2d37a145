#pragma once

// Curated battery of gradient checks over the differentiable surface:
// sampling, offset handling, diffusion, the regression losses, the residual
// block, and the full network training loss. Inputs are seeded away from the
// non-smooth points of each operation.

#include <string>
#include <vector>

namespace wseg {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

// Runs every case, or only the named one when `only` is non-empty. Unknown
// names are rejected.
std::vector<GradCheckRow> run_gradcheck_suite(const std::string& only = "");

}  // namespace wseg
