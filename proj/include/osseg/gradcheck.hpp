#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace osseg {

struct GradcheckOptions {
  std::size_t seeds = 20;
  double step = 1e-3;
  double tolerance = 1e-4;
  /// Coordinates probed per seed for the whole-model cases (0 = all).
  std::size_t model_coordinates = 48;
  /// Name of a case whose analytic gradient is deliberately scaled by 1.01,
  /// to show that the harness catches a wrong gradient.
  std::string inject_fault;
  /// Run only cases whose name starts with this prefix.
  std::string filter;
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0;  // worst over seeds of max|analytic - fd| / max|fd|
  std::size_t checked = 0;   // coordinates compared
  std::size_t skipped = 0;   // coordinates whose +-step evaluations cross a kink
  double seconds = 0;
  bool passed = false;
};

std::vector<std::string> gradcheck_cases();

/// Central finite differences in double precision against reverse-mode
/// gradients of the same code, for every primitive, every loss and every
/// total-loss composition on a small model.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options);

}  // namespace osseg
