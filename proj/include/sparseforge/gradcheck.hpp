#ifndef SPARSEFORGE_GRADCHECK_HPP_
#define SPARSEFORGE_GRADCHECK_HPP_

// Finite-difference verification of the pruning function derivatives and of
// every autodiff op, in double precision.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace sparseforge::gradcheck {

struct CheckResult {
  std::string name;
  std::size_t samples = 0;
  std::size_t failures = 0;
  double max_error = 0.0;
  double tolerance = 0.0;

  bool passed() const noexcept { return samples > 0 && failures == 0; }
};

/// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = 1e-3);

/// theta_grad_x and theta_grad_t against central differences on random
/// (x, alpha, t) with alpha in [1, 1e3], t in [1e-3, 5], x in [-10, 10],
/// skipping x within `kink_radius` of +-t.
CheckResult check_theta_derivatives(std::uint64_t seed, std::size_t samples = 10000,
                                    double tolerance = 1e-4, double kink_radius = 1e-2);

/// One result per op of the autodiff layer.
std::vector<CheckResult> check_autodiff_ops(std::uint64_t seed, double tolerance = 1e-5);

/// Everything above.
std::vector<CheckResult> run_all(std::uint64_t seed);

}  // namespace sparseforge::gradcheck

#endif  // SPARSEFORGE_GRADCHECK_HPP_
