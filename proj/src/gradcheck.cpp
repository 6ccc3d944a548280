#include "ognet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace ognet {

namespace {

double evaluate(const ScalarClosure& fn) {
  Tape<double> tape;
  const double v = fn(tape).value()(0, 0);
  if (!std::isfinite(v)) throw NumericError("gradient_check: closure produced a non-finite value");
  return v;
}

}  // namespace

GradCheckResult gradient_check(const ScalarClosure& fn, std::span<Tensor<double>* const> inputs,
                               const GradCheckOptions& options) {
  std::vector<bool> previous;
  for (auto* t : inputs) {
    previous.push_back(t->requires_grad());
    t->set_requires_grad(true);
    t->zero_grad();
  }
  {
    Tape<double> tape;
    auto root = fn(tape);
    if (root.rows() != 1 || root.cols() != 1) throw DimensionError("gradient_check: closure must return a scalar");
    if (!std::isfinite(root.value()(0, 0))) throw NumericError("gradient_check: closure produced a non-finite value");
    tape.backward(root);
  }

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  const double h = options.step;
  for (auto* t : inputs) {
    const Matrix<double> analytic = t->grad();
    std::vector<Index> entries(static_cast<std::size_t>(t->size()));
    std::iota(entries.begin(), entries.end(), Index{0});
    if (options.max_entries_per_input > 0 && Index(entries.size()) > options.max_entries_per_input) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(options.max_entries_per_input));
    }
    for (Index e : entries) {
      double& slot = t->data().data()[e];
      const double saved = slot;
      slot = saved + h;
      const double up = evaluate(fn);
      slot = saved - h;
      const double down = evaluate(fn);
      slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.data()[e];
      if (!std::isfinite(a)) throw NumericError("gradient_check: non-finite analytic gradient");
      result.max_error = std::max(result.max_error, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
      ++result.entries_checked;
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i]->set_requires_grad(previous[i]);
  return result;
}

}  // namespace ognet
