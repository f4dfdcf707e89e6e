#pragma once

// Shared test utilities: relative-error comparison, central finite
// differences, and small random-instance generators driven by the library's
// own deterministic Rng (hand-rolled property-test harness).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aem/domain.hpp"
#include "aem/rng.hpp"

namespace testutil {

inline constexpr int kPropertyCases = 1000;

inline double rel_err(double got, double want) {
  const double denom = std::max({std::fabs(got), std::fabs(want), 1e-12});
  return std::fabs(got - want) / denom;
}

// Central finite difference of f along coordinate j of a flat parameter
// vector accessed through get/set callbacks.
inline double central_diff(const std::function<double()>& f, double& param, double h = 1e-6) {
  const double saved = param;
  param = saved + h;
  const double up = f();
  param = saved - h;
  const double down = f();
  param = saved;
  return (up - down) / (2.0 * h);
}

// Largest relative mismatch between an analytic gradient and central
// finite differences over every coordinate of `theta`.
// The denominator floor keeps central-difference round-off (about 1e-10 in
// absolute terms for O(1) losses) from masquerading as large relative error
// on coordinates whose true gradient is near zero.
inline double max_grad_mismatch(const std::function<double()>& loss, aem::Vec& theta,
                                const aem::Vec& analytic, double h = 1e-6) {
  double worst = 0.0;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double fd = central_diff(loss, theta[j], h);
    const double denom = std::max({std::fabs(fd), std::fabs(analytic[j]), 1e-4});
    worst = std::max(worst, std::fabs(fd - analytic[j]) / denom);
  }
  return worst;
}

// Random probability vector of length k (strictly positive entries).
inline aem::Vec random_simplex(aem::Rng& rng, std::size_t k) {
  aem::Vec p(k);
  double total = 0.0;
  for (double& x : p) {
    x = -std::log(1.0 - rng.uniform()) + 1e-4;
    total += x;
  }
  for (double& x : p) x /= total;
  return p;
}

// Random choice task: k inside options with q attributes in [-2, 2].
inline aem::ChoiceTask random_task(aem::Rng& rng, std::size_t k, std::size_t q,
                                   const std::string& id = "t") {
  aem::ChoiceTask t;
  t.task_id = id;
  t.options = aem::Mat(k, q);
  for (double& x : t.options.a) x = rng.uniform(-2.0, 2.0);
  return t;
}

inline aem::Vec random_vec(aem::Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  aem::Vec v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace testutil
