#ifndef SPARSEFORGE_PRUNING_MATH_HPP_
#define SPARSEFORGE_PRUNING_MATH_HPP_

// Scalar pruning function, its weak partial derivatives, the hard dead-zone
// map it converges to as alpha grows, and a numeric inverse.
//
//   theta(x; t) = relu(x - t) + t * s(a(x - t)) - relu(-x - t) - t * s(a(-x - t))
//
// with s the logistic sigmoid and a = alpha. All evaluation is in double.

#include <cstddef>

#include <span>

#include "sparseforge/tensor.hpp"

namespace sparseforge {

/// Sharpness and threshold of one weight group. alpha > 0, t >= 0.
class PruneParams {
 public:
  PruneParams(double alpha, double t);

  double alpha() const noexcept { return alpha_; }
  double t() const noexcept { return t_; }

 private:
  double alpha_;
  double t_;
};

namespace pruning_math {

inline constexpr double kSigmoidClamp = 500.0;
inline constexpr double kDefaultInverseTol = 1e-10;
inline constexpr int kInverseMaxIterations = 60;

/// Heaviside step with H(0) = 1.
inline double heaviside(double u) noexcept { return u >= 0.0 ? 1.0 : 0.0; }

/// Logistic sigmoid with its argument clamped to [-500, 500].
double sigmoid(double z) noexcept;

double theta(double x, const PruneParams& p);
double theta_grad_x(double x, const PruneParams& p);
double theta_grad_t(double x, const PruneParams& p);

/// Value and both partials from one pair of sigmoid evaluations.
struct ThetaEval {
  double value;
  double grad_x;
  double grad_t;
};
ThetaEval theta_eval(double x, const PruneParams& p);

/// theta_eval over a block of weights sharing one threshold. The float
/// overload computes in single precision with vectorized exponentials; the
/// double overload calls theta_eval per element. Outputs must match x in size.
void theta_eval_block(std::span<const float> x, const PruneParams& p, std::span<float> value,
                      std::span<float> grad_x, std::span<float> grad_t);
void theta_eval_block(std::span<const double> x, const PruneParams& p, std::span<double> value,
                      std::span<double> grad_x, std::span<double> grad_t);

/// Hard threshold: x if |x| >= t, else 0.
double theta_bar(double x, double t);

/// Bisection inverse of theta in x. Stops when the bracket is narrower than
/// `tol` (in weight units) or after 60 halvings.
double theta_inv(double y, const PruneParams& p, double tol = kDefaultInverseTol);

/// Element-wise theta. Output keeps the input's shape and scalar type.
template <typename T>
Tensor<T> theta_map(const Tensor<T>& w, const PruneParams& p);

}  // namespace pruning_math
}  // namespace sparseforge

#endif  // SPARSEFORGE_PRUNING_MATH_HPP_
