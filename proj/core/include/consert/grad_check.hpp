#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "consert/tape.hpp"

namespace consert {

/// Builds the output under test from the given leaves on the given tape.
using GradCheckFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct GradCheckReport {
  /// max over leaves of ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)
  double max_relative_error = 0.0;
  /// Largest elementwise |analytic - numeric|, for diagnostics.
  double max_abs_error = 0.0;
  /// The same ratio over all leaves taken as one vector.
  double global_relative_error = 0.0;
  std::size_t worst_leaf = 0;
  std::vector<double> per_leaf_relative_error;
  bool passed = false;
};

/// Compares backward() against central differences.
///
/// Non-scalar outputs are reduced to a scalar with fixed pseudo-random
/// weights drawn from `projection_seed`, so every output element is covered.
/// Only the leaves passed in are probed; they must require gradients.
GradCheckReport grad_check(const GradCheckFn& fn, std::vector<Tensor> leaves,
                           float epsilon = 1e-3f, double tolerance = 1e-3,
                           std::uint64_t projection_seed = 17);

}  // namespace consert
