#include "sparseforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "sparseforge/autodiff.hpp"
#include "sparseforge/pruning_math.hpp"

namespace sparseforge::gradcheck {

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

CheckResult check_theta_derivatives(std::uint64_t seed, std::size_t samples, double tolerance,
                                    double kink_radius) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> log_alpha(0.0, 3.0);
  std::uniform_real_distribution<double> log_t(-3.0, std::log10(5.0));
  std::uniform_real_distribution<double> xs(-10.0, 10.0);
  CheckResult r{"theta derivatives", 0, 0, 0.0, tolerance};
  const double h = 1e-6;
  while (r.samples < samples) {
    const double alpha = std::pow(10.0, log_alpha(rng));
    const double t = std::pow(10.0, log_t(rng));
    const double x = xs(rng);
    if (std::abs(x - t) < kink_radius || std::abs(x + t) < kink_radius) continue;
    const PruneParams p(alpha, t);
    const double fd_x = (pruning_math::theta(x + h, p) - pruning_math::theta(x - h, p)) / (2 * h);
    const double fd_t = (pruning_math::theta(x, PruneParams(alpha, t + h)) -
                         pruning_math::theta(x, PruneParams(alpha, t - h))) /
                        (2 * h);
    const double err = std::max(relative_error(pruning_math::theta_grad_x(x, p), fd_x),
                                relative_error(pruning_math::theta_grad_t(x, p), fd_t));
    r.max_error = std::max(r.max_error, err);
    if (!(err <= tolerance)) ++r.failures;
    ++r.samples;
  }
  return r;
}

namespace {

using Var = Variable<double>;
using Builder = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

// Reduces any output to a scalar with non-uniform weights: sum(y) + sum(y^2).
Var reduce(Graph<double>& g, const Var& y) {
  return ad::add(g, ad::sum(g, y), ad::l2_sum(g, std::vector<Var>{y}));
}

Tensor<double> random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Values bounded away from zero, for ops with a kink at the origin.
Tensor<double> signed_away_from_zero(std::mt19937_64& rng, Shape shape) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Pairwise-distinct values, for max pooling.
Tensor<double> distinct(std::mt19937_64& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  std::vector<double> v(t.size());
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i] / static_cast<double>(v.size());
  return t;
}

// `check` selects which inputs are differentiated; the others still require
// grad so the op is taped.
CheckResult check_op(const std::string& name, std::vector<Tensor<double>> inputs,
                     const Builder& build, double tolerance, std::vector<bool> check = {}) {
  if (check.empty()) check.assign(inputs.size(), true);
  CheckResult r{name, 0, 0, 0.0, tolerance};
  std::vector<Var> vars;
  for (auto& t : inputs) vars.emplace_back(t, true);
  auto evaluate = [&]() {
    Graph<double> g;
    return reduce(g, build(g, vars)).value()[0];
  };
  {
    Graph<double> g;
    g.backward(reduce(g, build(g, vars)));
  }
  const double h = 1e-6;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    if (!check[i]) continue;
    auto value = vars[i].mutable_value().data();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double saved = value[k];
      value[k] = saved + h;
      const double up = evaluate();
      value[k] = saved - h;
      const double down = evaluate();
      value[k] = saved;
      const double err = relative_error(vars[i].grad()[k], (up - down) / (2 * h));
      r.max_error = std::max(r.max_error, err);
      if (!(err <= tolerance)) ++r.failures;
      ++r.samples;
    }
  }
  return r;
}

// Magnitudes outside [center - 0.25, center + 0.25], clear of every kink at
// +-t for thresholds near `center`.
Tensor<double> weights_off_kinks(std::mt19937_64& rng, Shape shape, double center) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Tensor<double> w(std::move(shape));
  for (auto& v : w.data()) {
    do {
      v = d(rng);
    } while (std::abs(std::abs(v) - center) < 0.25);
  }
  return w;
}

}  // namespace

std::vector<CheckResult> check_autodiff_ops(std::uint64_t seed, double tolerance) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  const std::vector<int> labels{2, 0, 1};

  out.push_back(check_op("matmul", {random_tensor(rng, {3, 4}, -1, 1), random_tensor(rng, {4, 2}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::matmul(g, v[0], v[1]); },
                         tolerance));
  out.push_back(check_op("matmul_bt",
                         {random_tensor(rng, {3, 4}, -1, 1), random_tensor(rng, {5, 4}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::matmul_bt(g, v[0], v[1]); },
                         tolerance));
  out.push_back(check_op("add", {random_tensor(rng, {2, 3}, -1, 1), random_tensor(rng, {2, 3}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::add(g, v[0], v[1]); },
                         tolerance));
  out.push_back(check_op("scale", {random_tensor(rng, {2, 3}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::scale(g, v[0], -1.7); },
                         tolerance));
  out.push_back(check_op("sum", {random_tensor(rng, {2, 3}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::sum(g, v[0]); }, tolerance));
  out.push_back(check_op("bias_add",
                         {random_tensor(rng, {2, 3, 2, 2}, -1, 1), random_tensor(rng, {3}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::bias_add(g, v[0], v[1]); },
                         tolerance));
  out.push_back(check_op("relu", {signed_away_from_zero(rng, {3, 4})},
                         [](auto& g, const auto& v) { return ad::relu(g, v[0]); }, tolerance));
  out.push_back(check_op("flatten", {random_tensor(rng, {2, 2, 3}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::flatten(g, v[0]); }, tolerance));
  out.push_back(check_op("reshape", {random_tensor(rng, {2, 6}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::reshape(g, v[0], {3, 4}); },
                         tolerance));
  out.push_back(check_op(
      "conv2d", {random_tensor(rng, {2, 2, 5, 5}, -1, 1), random_tensor(rng, {3, 2, 3, 3}, -1, 1)},
      [](auto& g, const auto& v) { return ad::conv2d(g, v[0], v[1], 1, 0); }, tolerance));
  out.push_back(check_op(
      "conv2d_stride_pad",
      {random_tensor(rng, {1, 2, 5, 5}, -1, 1), random_tensor(rng, {2, 2, 3, 3}, -1, 1)},
      [](auto& g, const auto& v) { return ad::conv2d(g, v[0], v[1], 2, 1); }, tolerance));
  out.push_back(check_op("max_pool2d", {distinct(rng, {2, 2, 4, 4})},
                         [](auto& g, const auto& v) { return ad::max_pool2d(g, v[0], 2, 2); },
                         tolerance));
  out.push_back(check_op("softmax_cross_entropy", {random_tensor(rng, {3, 4}, -2, 2)},
                         [&labels](auto& g, const auto& v) {
                           return ad::softmax_cross_entropy(g, v[0], labels);
                         },
                         tolerance));
  out.push_back(check_op("l2_sum", {random_tensor(rng, {2, 3}, -1, 1), random_tensor(rng, {4}, -1, 1)},
                         [](auto& g, const auto& v) { return ad::l2_sum(g, v); }, tolerance));
  const Tensor<double> t2(Shape{2}, std::vector<double>{0.3, 0.5});
  out.push_back(check_op("theta_map", {weights_off_kinks(rng, {2, 6}, 0.4), t2},
                         [](auto& g, const auto& v) { return ad::theta_map(g, v[0], v[1], 10.0); },
                         tolerance));
  out.push_back(check_op(
      "l1_sum_mapped", {weights_off_kinks(rng, {2, 6}, 0.4), t2},
      [](auto& g, const auto& v) { return ad::l1_sum_mapped(g, v[0], v[1], 10.0); }, tolerance,
      {false, true}));
  return out;
}

std::vector<CheckResult> run_all(std::uint64_t seed) {
  std::vector<CheckResult> out{check_theta_derivatives(seed)};
  for (auto& r : check_autodiff_ops(seed + 1)) out.push_back(std::move(r));
  return out;
}

}  // namespace sparseforge::gradcheck
