#include "sparseforge/pruning_math.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

namespace sparseforge {

PruneParams::PruneParams(double alpha, double t) : alpha_(alpha), t_(t) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw ConfigError("alpha must be a positive finite number, got " +
                      std::to_string(alpha));
  }
  if (!(t >= 0.0) || !std::isfinite(t)) {
    throw ConfigError("threshold must be non-negative and finite, got " +
                      std::to_string(t));
  }
}

namespace pruning_math {
namespace {

void require_finite(double x) {
  if (!std::isfinite(x)) throw DomainError("pruning function input is not finite");
}

}  // namespace

double sigmoid(double z) noexcept {
  z = std::clamp(z, -kSigmoidClamp, kSigmoidClamp);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

// s(z) and s(-z) = 1 - s(z) from a single exponential, both accurate in the tails.
struct SigmoidPair {
  double pos;
  double neg;
};

SigmoidPair sigmoid_pair(double z) noexcept {
  z = std::clamp(z, -kSigmoidClamp, kSigmoidClamp);
  const double e = std::exp(-std::abs(z));
  const double big = 1.0 / (1.0 + e);
  const double small = e / (1.0 + e);
  return z >= 0.0 ? SigmoidPair{big, small} : SigmoidPair{small, big};
}

// theta(x) = sign(x) g(|x|). Above the threshold g = |x| - t (1 - s(a u)) - t s(a v),
// inside it g = t (s(a u) - s(a v)); both forms keep 0 <= g <= |x| under rounding.
double odd_value(double x, double a, double t) noexcept {
  const double ax = std::abs(x);
  const double u = ax - t;
  const SigmoidPair su = sigmoid_pair(a * u);
  const double sv = sigmoid_pair(a * (-ax - t)).pos;
  const double g = u >= 0.0 ? ax - t * (su.neg + sv) : t * (su.pos - sv);
  return std::signbit(x) ? -g : g;
}

}  // namespace

ThetaEval theta_eval(double x, const PruneParams& p) {
  require_finite(x);
  const double a = p.alpha();
  const double t = p.t();
  const double up = x - t;   // right kink argument
  const double dn = -x - t;  // left kink argument
  const SigmoidPair sp_up = sigmoid_pair(a * up);
  const SigmoidPair sp_dn = sigmoid_pair(a * dn);
  const double s_up = sp_up.pos;
  const double s_dn = sp_dn.pos;
  const double ds_up = sp_up.pos * sp_up.neg;  // s(1 - s)
  const double ds_dn = sp_dn.pos * sp_dn.neg;

  ThetaEval r;
  r.value = odd_value(x, a, t);
  r.grad_x = heaviside(up) + heaviside(dn) + a * t * ds_up + a * t * ds_dn;
  r.grad_t = -heaviside(up) + heaviside(dn) + s_up - s_dn - a * t * ds_up +
             a * t * ds_dn;
  return r;
}

void theta_eval_block(std::span<const float> x, const PruneParams& p, std::span<float> value,
                      std::span<float> grad_x, std::span<float> grad_t) {
  constexpr Eigen::Index kChunk = 1024;
  using Array = Eigen::Array<float, Eigen::Dynamic, 1, 0, kChunk, 1>;
  if (value.size() != x.size() || grad_x.size() != x.size() || grad_t.size() != x.size()) {
    throw ShapeError("theta_eval_block output size mismatch");
  }
  const auto a = static_cast<float>(p.alpha());
  const auto t = static_cast<float>(p.t());
  const float at = a * t;
  const auto clamp = static_cast<float>(kSigmoidClamp);
  auto sigmoid_of = [&](const Array& u, Array& s, Array& ds) {
    const Array z = (a * u).max(-clamp).min(clamp);
    const Array e = (-z.abs()).exp();
    const Array big = (1.0f + e).inverse();
    const Array small = e * big;
    s = (z >= 0.0f).select(big, small);
    ds = big * small;
  };

  const auto total = static_cast<Eigen::Index>(x.size());
  for (Eigen::Index begin = 0; begin < total; begin += kChunk) {
    const Eigen::Index n = std::min(kChunk, total - begin);
    const Eigen::Map<const Eigen::ArrayXf> xs(x.data() + begin, n);
    if (!xs.allFinite()) throw DomainError("pruning function argument must be finite");
    const Array up = xs - t;
    const Array dn = -xs - t;
    Array s_up, ds_up, s_dn, ds_dn;
    sigmoid_of(up, s_up, ds_up);
    sigmoid_of(dn, s_dn, ds_dn);
    const Array h_up = (up >= 0.0f).cast<float>();
    const Array h_dn = (dn >= 0.0f).cast<float>();
    Eigen::Map<Eigen::ArrayXf>(value.data() + begin, n) =
        up.max(0.0f) + t * s_up - dn.max(0.0f) - t * s_dn;
    Eigen::Map<Eigen::ArrayXf>(grad_x.data() + begin, n) = h_up + h_dn + at * ds_up + at * ds_dn;
    Eigen::Map<Eigen::ArrayXf>(grad_t.data() + begin, n) =
        -h_up + h_dn + s_up - s_dn - at * ds_up + at * ds_dn;
  }
}

void theta_eval_block(std::span<const double> x, const PruneParams& p, std::span<double> value,
                      std::span<double> grad_x, std::span<double> grad_t) {
  if (value.size() != x.size() || grad_x.size() != x.size() || grad_t.size() != x.size()) {
    throw ShapeError("theta_eval_block output size mismatch");
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    const ThetaEval e = theta_eval(x[i], p);
    value[i] = e.value;
    grad_x[i] = e.grad_x;
    grad_t[i] = e.grad_t;
  }
}

double theta(double x, const PruneParams& p) {
  require_finite(x);
  return odd_value(x, p.alpha(), p.t());
}

double theta_grad_x(double x, const PruneParams& p) { return theta_eval(x, p).grad_x; }

double theta_grad_t(double x, const PruneParams& p) { return theta_eval(x, p).grad_t; }

double theta_bar(double x, double t) {
  require_finite(x);
  if (!(t >= 0.0) || !std::isfinite(t)) {
    throw DomainError("hard threshold must be non-negative and finite");
  }
  // relu(x-t) + t*H(x-t) - relu(-x-t) - t*H(-x-t) collapses to this
  return std::abs(x) >= t ? x : 0.0;
}

double theta_inv(double y, const PruneParams& p, double tol) {
  if (!(tol > 0.0)) throw ConfigError("inverse tolerance must be positive");
  require_finite(y);
  if (y == 0.0) return 0.0;

  const double target = std::abs(y);
  double lo = 0.0;
  double hi = target + 2.0 * p.t() + 1.0;
  if (theta(hi, p) < target) {
    throw InternalError("theta_inv bracket does not contain the root");
  }
  for (int i = 0; i < kInverseMaxIterations && hi - lo > tol; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (theta(mid, p) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double x = 0.5 * (lo + hi);
  return y < 0.0 ? -x : x;
}

template <typename T>
Tensor<T> theta_map(const Tensor<T>& w, const PruneParams& p) {
  Tensor<T> out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    out[i] = static_cast<T>(theta(static_cast<double>(w[i]), p));
  }
  return out;
}

template Tensor<float> theta_map(const Tensor<float>&, const PruneParams&);
template Tensor<double> theta_map(const Tensor<double>&, const PruneParams&);

}  // namespace pruning_math
}  // namespace sparseforge
