#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "ognet/autodiff.hpp"

namespace ognet {

struct GradCheckOptions {
  double step = 1e-5;
  /// Entries probed per input tensor; 0 probes every entry.
  Index max_entries_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_error = 0.0;
  Index entries_checked = 0;
};

/// Closure building a scalar on a fresh tape. It must bind the checked tensors
/// through `Tape::parameter` and be deterministic.
using ScalarClosure = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients of `fn` with central differences.
///
/// The error of an entry is |analytic - numeric| / max(1, |analytic|); the
/// result carries the maximum over all probed entries. Throws NumericError when
/// the closure produces a non-finite value.
GradCheckResult gradient_check(const ScalarClosure& fn, std::span<Tensor<double>* const> inputs,
                               const GradCheckOptions& options = {});

}  // namespace ognet
