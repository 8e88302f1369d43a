#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "aligndistill/gradients.hpp"

namespace aligndistill {

using Objective = std::function<double(const ParamSet&)>;

struct FiniteDiffEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // values at worst_index
  double numeric = 0.0;
  bool pass = true;
};

struct FiniteDiffReport {
  std::vector<FiniteDiffEntry> params;
  double epsilon = 0.0;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  bool pass = true;
  std::string failure;  // first failing parameter, or the one whose probe went non-finite

  const FiniteDiffEntry* find(const std::string& name) const;
};

// Central differences (f(θ+ε) - f(θ-ε)) / 2ε for every scalar in `params`,
// compared against `analytic`. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8). `analytic` must carry exactly the keys
// of `params`.
FiniteDiffReport finite_difference_check(const Objective& objective, const ParamSet& params,
                                         const ParamSet& analytic, double epsilon, double tolerance);

double relative_error(double analytic, double numeric);

}  // namespace aligndistill
