#include "sparseforge/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "sparseforge/kernels.hpp"
#include "sparseforge/pruning_math.hpp"

namespace sparseforge {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Splits the weights' flat storage into equally sized threshold groups.
template <typename T>
std::size_t group_size(const Variable<T>& w, const Variable<T>& thresholds) {
  const std::size_t groups = thresholds.size();
  require(thresholds.value().rank() == 1 && groups > 0 && w.size() % groups == 0,
          "threshold count " + std::to_string(groups) +
              " does not divide weight tensor " + shape_string(w.shape()));
  return w.size() / groups;
}

}  // namespace

// ---------------------------------------------------------------------------
// Variable

template <typename T>
Variable<T>::Variable(Tensor<T> value, bool requires_grad, std::string name)
    : node_(std::make_shared<VariableNode<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->name = std::move(name);
  if (requires_grad) node_->grad = Tensor<T>(node_->value.shape());
}

template <typename T>
void Variable<T>::set_grad_scale(T scale) const {
  if (!(scale > T{0})) throw ConfigError("grad_scale must be positive");
  node_->grad_scale = scale;
}

template <typename T>
void Variable<T>::zero_grad() const {
  if (node_->requires_grad) node_->grad.fill(T{0});
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Variable<T> Graph<T>::record(const char* op, Tensor<T> value,
                             std::initializer_list<Variable<T>> inputs, BackwardFn fn) {
  return record(op, std::move(value), std::vector<Variable<T>>(inputs), std::move(fn));
}

template <typename T>
Variable<T> Graph<T>::record(const char* op, Tensor<T> value,
                             const std::vector<Variable<T>>& inputs, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  const bool needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const Variable<T>& v) { return v.requires_grad(); });
  Variable<T> out(std::move(value), needs_grad, op);
  if (needs_grad) tape_.push_back({out, std::move(fn)});
  return out;
}

template <typename T>
void Graph<T>::backward(Variable<T> loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (auto& entry : tape_) entry.output.zero_grad();
  loss.mutable_grad()[0] = T{1};
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    it->backward(it->output.grad());
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace ad {

template <typename T>
Variable<T> matmul(Graph<T>& g, const Variable<T>& a, const Variable<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 &&
              a.shape()[1] == b.shape()[0],
          "matmul shape mismatch " + shape_string(a.shape()) + " * " +
              shape_string(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out({m, n});
  as_matrix(out, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  return g.record("matmul", std::move(out), {a, b},
                  [a, b, m, k, n](const Tensor<T>& dout) {
                    const auto dc = as_matrix(dout, m, n);
                    if (a.requires_grad()) {
                      as_matrix(a.mutable_grad(), m, k).noalias() +=
                          dc * as_matrix(b.value(), k, n).transpose();
                    }
                    if (b.requires_grad()) {
                      as_matrix(b.mutable_grad(), k, n).noalias() +=
                          as_matrix(a.value(), m, k).transpose() * dc;
                    }
                  });
}

template <typename T>
Variable<T> matmul_bt(Graph<T>& g, const Variable<T>& a, const Variable<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 &&
              a.shape()[1] == b.shape()[1],
          "matmul_bt shape mismatch " + shape_string(a.shape()) + " * " +
              shape_string(b.shape()) + "^T");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  Tensor<T> out({m, n});
  as_matrix(out, m, n).noalias() =
      as_matrix(a.value(), m, k) * as_matrix(b.value(), n, k).transpose();
  return g.record("matmul_bt", std::move(out), {a, b},
                  [a, b, m, k, n](const Tensor<T>& dout) {
                    const auto dc = as_matrix(dout, m, n);
                    if (a.requires_grad()) {
                      as_matrix(a.mutable_grad(), m, k).noalias() +=
                          dc * as_matrix(b.value(), n, k);
                    }
                    if (b.requires_grad()) {
                      as_matrix(b.mutable_grad(), n, k).noalias() +=
                          dc.transpose() * as_matrix(a.value(), m, k);
                    }
                  });
}

template <typename T>
Variable<T> add(Graph<T>& g, const Variable<T>& a, const Variable<T>& b) {
  require(a.shape() == b.shape(), "add shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return g.record("add", std::move(out), {a, b},
                  [a, b](const Tensor<T>& dout) {
                    for (const Variable<T>* v : {&a, &b}) {
                      if (!v->requires_grad()) continue;
                      auto& gr = v->mutable_grad();
                      for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += dout[i];
                    }
                  });
}

template <typename T>
Variable<T> scale(Graph<T>& g, const Variable<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  return g.record("scale", std::move(out), {a},
                  [a, factor](const Tensor<T>& dout) {
                    auto& gr = a.mutable_grad();
                    for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += dout[i] * factor;
                  });
}

template <typename T>
Variable<T> sum(Graph<T>& g, const Variable<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data()) acc += v;
  return g.record("sum", Tensor<T>::scalar(static_cast<T>(acc)), {a},
                  [a](const Tensor<T>& dout) {
                    auto& gr = a.mutable_grad();
                    for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += dout[0];
                  });
}

template <typename T>
Variable<T> bias_add(Graph<T>& g, const Variable<T>& x, const Variable<T>& b) {
  const Shape& s = x.shape();
  require((s.size() == 2 || s.size() == 4) && b.value().rank() == 1 && s[1] == b.size(),
          "bias_add shape mismatch " + shape_string(s) + " + " + shape_string(b.shape()));
  const std::size_t n = s[0], f = s[1];
  const std::size_t inner = s.size() == 4 ? s[2] * s[3] : 1;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < f; ++c) {
      T* p = out.data().data() + (i * f + c) * inner;
      const T bias = b.value()[c];
      for (std::size_t k = 0; k < inner; ++k) p[k] += bias;
    }
  }
  return g.record("bias_add", std::move(out), {x, b},
                  [x, b, n, f, inner](const Tensor<T>& dout) {
                    if (x.requires_grad()) {
                      auto& gx = x.mutable_grad();
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dout[i];
                    }
                    if (b.requires_grad()) {
                      auto& gb = b.mutable_grad();
                      for (std::size_t c = 0; c < f; ++c) {
                        T acc = T{0};
                        for (std::size_t i = 0; i < n; ++i) {
                          const T* p = dout.data().data() + (i * f + c) * inner;
                          for (std::size_t k = 0; k < inner; ++k) acc += p[k];
                        }
                        gb[c] += acc;
                      }
                    }
                  });
}

template <typename T>
Variable<T> relu(Graph<T>& g, const Variable<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x.value()[i] > T{0} ? x.value()[i] : T{0};
  }
  return g.record("relu", std::move(out), {x}, [x](const Tensor<T>& dout) {
    auto& gx = x.mutable_grad();
    const auto& v = x.value();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (v[i] > T{0}) gx[i] += dout[i];
    }
  });
}

template <typename T>
Variable<T> reshape(Graph<T>& g, const Variable<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {x}, [x](const Tensor<T>& dout) {
    auto& gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dout[i];
  });
}

template <typename T>
Variable<T> flatten(Graph<T>& g, const Variable<T>& x) {
  require(x.value().rank() >= 1, "flatten needs a batch dimension");
  const std::size_t n = x.shape()[0];
  return reshape(g, x, Shape{n, x.size() / n});
}

template <typename T>
Variable<T> conv2d(Graph<T>& g, const Variable<T>& input, const Variable<T>& kernels,
                   std::size_t stride, std::size_t padding) {
  const kernels::ConvGeometry geo =
      kernels::conv_geometry(input.shape(), kernels.shape(), stride, padding);
  const std::size_t patch = geo.patch();
  const std::size_t positions = geo.positions();
  const std::size_t cols = geo.batch * positions;

  auto col = std::make_shared<Tensor<T>>(Shape{patch, cols});
  kernels::im2col<T>(geo, input.value().data(), col->data());

  RowMatrix<T> prod = as_matrix(kernels.value(), geo.filters, patch) *
                      as_matrix(*col, patch, cols);
  Tensor<T> out({geo.batch, geo.filters, geo.out_h, geo.out_w});
  for (std::size_t n = 0; n < geo.batch; ++n) {
    for (std::size_t f = 0; f < geo.filters; ++f) {
      std::copy_n(prod.data() + f * cols + n * positions, positions,
                  out.data().data() + (n * geo.filters + f) * positions);
    }
  }

  return g.record(
      "conv2d", std::move(out), {input, kernels},
      [input, kernels, geo, col, patch, positions, cols](const Tensor<T>& dout) {
        RowMatrix<T> dprod(geo.filters, cols);
        for (std::size_t n = 0; n < geo.batch; ++n) {
          for (std::size_t f = 0; f < geo.filters; ++f) {
            std::copy_n(dout.data().data() + (n * geo.filters + f) * positions, positions,
                        dprod.data() + f * cols + n * positions);
          }
        }
        if (kernels.requires_grad()) {
          as_matrix(kernels.mutable_grad(), geo.filters, patch).noalias() +=
              dprod * as_matrix(*col, patch, cols).transpose();
        }
        if (input.requires_grad()) {
          Tensor<T> dcol({patch, cols});
          as_matrix(dcol, patch, cols).noalias() =
              as_matrix(kernels.value(), geo.filters, patch).transpose() * dprod;
          kernels::col2im_add<T>(geo, dcol.data(), input.mutable_grad().data());
        }
      });
}

template <typename T>
Variable<T> max_pool2d(Graph<T>& g, const Variable<T>& x, std::size_t size,
                       std::size_t stride) {
  const kernels::PoolGeometry geo = kernels::pool_geometry(x.shape(), size, stride);
  Tensor<T> out({geo.batch, geo.channels, geo.out_h, geo.out_w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  kernels::max_pool<T>(geo, x.value().data(), out.data(), *argmax);
  return g.record("max_pool2d", std::move(out), {x},
                  [x, argmax](const Tensor<T>& dout) {
                    auto& gx = x.mutable_grad();
                    for (std::size_t o = 0; o < argmax->size(); ++o) {
                      gx[(*argmax)[o]] += dout[o];
                    }
                  });
}

template <typename T>
Variable<T> softmax_cross_entropy(Graph<T>& g, const Variable<T>& logits,
                                  std::span<const int> labels) {
  require(logits.value().rank() == 2 && logits.shape()[0] == labels.size(),
          "softmax_cross_entropy expects [N x K] logits and N labels");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  auto probs = std::make_shared<Tensor<T>>(Shape{n, k});
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= k) {
      throw ConfigError("label " + std::to_string(lab[i]) + " outside [0, " +
                        std::to_string(k) + ")");
    }
    const T* z = logits.value().data().data() + i * k;
    const double zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) denom += std::exp(static_cast<double>(z[c]) - zmax);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < k; ++c) {
      (*probs)[i * k + c] =
          static_cast<T>(std::exp(static_cast<double>(z[c]) - zmax - log_denom));
    }
    total += log_denom + zmax - static_cast<double>(z[lab[i]]);
  }
  const double mean = total / static_cast<double>(n);
  return g.record("softmax_cross_entropy", Tensor<T>::scalar(static_cast<T>(mean)),
                  {logits},
                  [logits, probs, lab = std::move(lab), n, k](const Tensor<T>& dout) {
                    auto& gl = logits.mutable_grad();
                    const T s = dout[0] / static_cast<T>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t c = 0; c < k; ++c) {
                        const T onehot = static_cast<int>(c) == lab[i] ? T{1} : T{0};
                        gl[i * k + c] += s * ((*probs)[i * k + c] - onehot);
                      }
                    }
                  });
}

template <typename T>
Variable<T> l2_sum(Graph<T>& g, const std::vector<Variable<T>>& vars) {
  double acc = 0.0;
  for (const auto& v : vars) {
    for (T x : v.value().data()) acc += static_cast<double>(x) * x;
  }
  return g.record("l2_sum", Tensor<T>::scalar(static_cast<T>(acc)), vars,
                  [vars](const Tensor<T>& dout) {
                    for (auto& v : vars) {
                      if (!v.requires_grad()) continue;
                      auto& gr = v.mutable_grad();
                      const auto& val = v.value();
                      for (std::size_t i = 0; i < gr.size(); ++i) {
                        gr[i] += T{2} * val[i] * dout[0];
                      }
                    }
                  });
}

template <typename T>
Variable<T> theta_map(Graph<T>& g, const Variable<T>& w, const Variable<T>& thresholds,
                      double alpha) {
  const std::size_t per_group = group_size(w, thresholds);
  const std::size_t groups = thresholds.size();
  Tensor<T> out(w.shape());
  // cached partials for the backward pass
  auto dx = std::make_shared<std::vector<T>>(w.size());
  auto dt = std::make_shared<std::vector<T>>(w.size());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const PruneParams p(alpha, static_cast<double>(thresholds.value()[gi]));
    const std::size_t at = gi * per_group;
    pruning_math::theta_eval_block(w.value().data().subspan(at, per_group), p,
                                   out.data().subspan(at, per_group),
                                   std::span<T>(*dx).subspan(at, per_group),
                                   std::span<T>(*dt).subspan(at, per_group));
  }
  return g.record("theta_map", std::move(out), {w, thresholds},
                  [w, thresholds, dx, dt, groups, per_group](const Tensor<T>& dout) {
                    if (w.requires_grad()) {
                      auto& gw = w.mutable_grad();
                      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += dout[i] * (*dx)[i];
                    }
                    if (thresholds.requires_grad()) {
                      auto& gt = thresholds.mutable_grad();
                      for (std::size_t gi = 0; gi < groups; ++gi) {
                        double acc = 0.0;
                        for (std::size_t i = gi * per_group; i < (gi + 1) * per_group; ++i) {
                          acc += static_cast<double>(dout[i]) * (*dt)[i];
                        }
                        gt[gi] += static_cast<T>(acc);
                      }
                    }
                  });
}

template <typename T>
Variable<T> l1_sum_mapped(Graph<T>& g, const Variable<T>& w, const Variable<T>& thresholds,
                          double alpha) {
  const std::size_t per_group = group_size(w, thresholds);
  const std::size_t groups = thresholds.size();
  double total = 0.0;
  auto dt = std::make_shared<std::vector<double>>(groups, 0.0);
  std::vector<T> value(per_group), dx(per_group), dti(per_group);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const PruneParams p(alpha, static_cast<double>(thresholds.value()[gi]));
    pruning_math::theta_eval_block(w.value().data().subspan(gi * per_group, per_group), p,
                                   value, dx, dti);
    double acc = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) {
      total += std::abs(static_cast<double>(value[i]));
      if (value[i] > T{0}) {
        acc += dti[i];
      } else if (value[i] < T{0}) {
        acc -= dti[i];
      }
    }
    (*dt)[gi] = acc;
  }
  // Only the thresholds are wired as inputs: the weights get no adjoint.
  return g.record("l1_sum_mapped", Tensor<T>::scalar(static_cast<T>(total)), {thresholds},
                  [thresholds, dt](const Tensor<T>& dout) {
                    auto& gt = thresholds.mutable_grad();
                    for (std::size_t gi = 0; gi < dt->size(); ++gi) {
                      gt[gi] += static_cast<T>((*dt)[gi] * static_cast<double>(dout[0]));
                    }
                  });
}

#define SPARSEFORGE_INSTANTIATE_OPS(T)                                                    \
  template Variable<T> matmul(Graph<T>&, const Variable<T>&, const Variable<T>&);        \
  template Variable<T> matmul_bt(Graph<T>&, const Variable<T>&, const Variable<T>&);     \
  template Variable<T> add(Graph<T>&, const Variable<T>&, const Variable<T>&);           \
  template Variable<T> scale(Graph<T>&, const Variable<T>&, T);                          \
  template Variable<T> sum(Graph<T>&, const Variable<T>&);                               \
  template Variable<T> bias_add(Graph<T>&, const Variable<T>&, const Variable<T>&);      \
  template Variable<T> relu(Graph<T>&, const Variable<T>&);                              \
  template Variable<T> flatten(Graph<T>&, const Variable<T>&);                           \
  template Variable<T> reshape(Graph<T>&, const Variable<T>&, Shape);                    \
  template Variable<T> conv2d(Graph<T>&, const Variable<T>&, const Variable<T>&,         \
                              std::size_t, std::size_t);                                 \
  template Variable<T> max_pool2d(Graph<T>&, const Variable<T>&, std::size_t,            \
                                  std::size_t);                                          \
  template Variable<T> softmax_cross_entropy(Graph<T>&, const Variable<T>&,              \
                                             std::span<const int>);                      \
  template Variable<T> l2_sum(Graph<T>&, const std::vector<Variable<T>>&);               \
  template Variable<T> theta_map(Graph<T>&, const Variable<T>&, const Variable<T>&,      \
                                 double);                                                \
  template Variable<T> l1_sum_mapped(Graph<T>&, const Variable<T>&, const Variable<T>&, \
                                     double);

SPARSEFORGE_INSTANTIATE_OPS(float)
SPARSEFORGE_INSTANTIATE_OPS(double)

}  // namespace ad

template class Variable<float>;
template class Variable<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace sparseforge
