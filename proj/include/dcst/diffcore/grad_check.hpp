#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dcst/diffcore/tape.hpp"

namespace dcst {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
};

/// Scalar-valued closure that records its computation on the given tape.
using ScalarFn = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients of `fn` w.r.t. `inputs` against central differences.
/// Error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Parameter*>& inputs, double step = 1e-6) {
  for (auto* p : inputs) p->zero_grad();
  {
    Tape tape;
    Var loss = fn(tape);
    tape.backward(loss);
  }
  auto evaluate = [&fn]() {
    Tape tape;
    tape.set_grad_enabled(false);
    return fn(tape).value().item();
  };
  GradCheckResult result;
  for (auto* p : inputs) {
    const Array analytic = p->grad();
    auto& w = p->value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + step;
      const double up = evaluate();
      w[i] = orig - step;
      const double down = evaluate();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = p->name();
        result.worst_index = i;
      }
    }
    p->zero_grad();
  }
  return result;
}

}  // namespace dcst
