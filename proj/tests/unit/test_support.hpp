#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dcst/diffcore.hpp"
#include "dcst/gradcheck_suite.hpp"

namespace dcst::test {

using gradcheck::weighted_sum;

/// Worst grad-check error across `seeds` runs of a seeded check.
inline GradCheckResult worst_over_seeds(int seeds, const std::function<GradCheckResult(std::uint64_t)>& check) {
  GradCheckResult worst;
  for (int s = 0; s < seeds; ++s) {
    auto r = check(static_cast<std::uint64_t>(s));
    if (r.max_rel_error >= worst.max_rel_error) worst = r;
  }
  return worst;
}

}  // namespace dcst::test
