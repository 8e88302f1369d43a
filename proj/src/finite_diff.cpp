#include "aligndistill/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace aligndistill {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

const FiniteDiffEntry* FiniteDiffReport::find(const std::string& name) const {
  for (const auto& e : params)
    if (e.name == name) return &e;
  return nullptr;
}

FiniteDiffReport finite_difference_check(const Objective& objective, const ParamSet& params,
                                         const ParamSet& analytic, double epsilon, double tolerance) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_check: epsilon must be positive");
  if (params.size() != analytic.size())
    throw std::invalid_argument("finite_difference_check: analytic gradient keys differ from parameters");

  FiniteDiffReport report;
  report.epsilon = epsilon;
  report.tolerance = tolerance;

  ParamSet probe = params;
  for (const auto& [name, value] : params) {
    const auto it = analytic.find(name);
    if (it == analytic.end() || !it->second.same_dims(value))
      throw std::invalid_argument("finite_difference_check: no matching analytic gradient for " + name);
    const Tensor& grad = it->second;

    FiniteDiffEntry entry;
    entry.name = name;
    Tensor& slot = probe.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double original = slot[i];
      slot[i] = original + epsilon;
      const double up = objective(probe);
      slot[i] = original - epsilon;
      const double down = objective(probe);
      slot[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        entry.pass = false;
        entry.max_rel_error = INFINITY;
        entry.worst_index = i;
        break;
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double err = relative_error(grad[i], numeric);
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = grad[i];
        entry.numeric = numeric;
      }
    }
    if (!(entry.max_rel_error <= tolerance)) entry.pass = false;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    if (!entry.pass && report.pass) {
      report.pass = false;
      report.failure = name;
    }
    report.params.push_back(std::move(entry));
  }
  return report;
}

}  // namespace aligndistill
