#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "sdelab/tape.hpp"

namespace sdelab {

// Builds a scalar output from leaf nodes created for the given parameters.
using TapeBuilder =
    std::function<Tape::NodeId(Tape&, const std::vector<Tape::NodeId>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  int n_checked = 0;
  // (parameter index, flat coordinate) pairs skipped because a relu input sat
  // within 10*step of its kink during one of the evaluations.
  std::vector<std::pair<int, int>> excluded;
};

// Compares reverse-mode gradients against central finite differences, one
// coordinate at a time. Reports rather than throws.
GradCheckReport grad_check(const TapeBuilder& build,
                           const std::vector<Tensor>& params, double step,
                           double tol);

}  // namespace sdelab
