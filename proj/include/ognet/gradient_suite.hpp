#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ognet/tensor.hpp"

namespace ognet {

struct GradientSuiteEntry {
  std::string name;
  std::string group;  // "ops", "layers" or "model"
  double max_error = 0.0;
  double tolerance = 0.0;
  Index cases = 0;
  Index entries = 0;

  bool passed() const { return max_error < tolerance; }
};

std::vector<std::string> gradient_suite_names();

/// Central-difference checks on randomized instances. `scope` is "all", a
/// group name, or one entry name; `cases` sets the instances per op and layer.
/// The model entry is the small network on 4 clouds of 64 points, 4 classes.
///
/// Throws ParameterError for an unknown scope.
std::vector<GradientSuiteEntry> run_gradient_suite(const std::string& scope, std::uint64_t seed = 0, int cases = 20);

}  // namespace ognet
