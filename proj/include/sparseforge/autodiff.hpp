#ifndef SPARSEFORGE_AUTODIFF_HPP_
#define SPARSEFORGE_AUTODIFF_HPP_

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph records every operation executed through the free functions in
// namespace `ad` together with a closure that propagates the adjoint of the
// op's output to its inputs. `Graph::backward` replays those closures in exact
// reverse order, so accumulation order (and therefore every gradient bit) is
// fixed by the forward execution order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparseforge/tensor.hpp"

namespace sparseforge {

template <typename T>
struct VariableNode {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  T grad_scale = T{1};
  std::string name;
};

/// Shared handle to a value/gradient pair. Copies alias the same node, and
/// constness applies to the handle, not the data behind it.
template <typename T>
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor<T> value, bool requires_grad = false,
                    std::string name = {});

  bool defined() const noexcept { return node_ != nullptr; }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }

  /// Gradient buffer; zeros of the value's shape when requires_grad.
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }

  /// Per-variable multiplier applied by the optimizer to the final update.
  T grad_scale() const { return node_->grad_scale; }
  void set_grad_scale(T scale) const;

  const std::string& name() const { return node_->name; }

  void zero_grad() const;

  bool same_node(const Variable& other) const noexcept { return node_ == other.node_; }

 private:
  std::shared_ptr<VariableNode<T>> node_;
};

template <typename T>
class Graph {
 public:
  /// Propagates the output adjoint into the inputs' gradient buffers.
  using BackwardFn = std::function<void(const Tensor<T>& out_grad)>;

  /// Wraps `value` as the output of op `op`. The output requires grad iff any
  /// input does, in which case `fn` is taped for the backward pass.
  Variable<T> record(const char* op, Tensor<T> value,
                     std::initializer_list<Variable<T>> inputs, BackwardFn fn);
  Variable<T> record(const char* op, Tensor<T> value,
                     const std::vector<Variable<T>>& inputs, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs the tape in reverse. Intermediate
  /// gradients are reset first; leaf gradients accumulate.
  void backward(Variable<T> loss);

  std::size_t size() const noexcept { return tape_.size(); }
  void clear() { tape_.clear(); }

 private:
  struct Entry {
    Variable<T> output;
    BackwardFn backward;
  };
  std::vector<Entry> tape_;
};

namespace ad {

/// [m x k] * [k x n]
template <typename T>
Variable<T> matmul(Graph<T>& g, const Variable<T>& a, const Variable<T>& b);

/// [m x k] * [n x k]^T, the fully connected layer with weights stored [out x in].
template <typename T>
Variable<T> matmul_bt(Graph<T>& g, const Variable<T>& a, const Variable<T>& b);

template <typename T>
Variable<T> add(Graph<T>& g, const Variable<T>& a, const Variable<T>& b);

template <typename T>
Variable<T> scale(Graph<T>& g, const Variable<T>& a, T factor);

/// Sum of all elements, shape [1].
template <typename T>
Variable<T> sum(Graph<T>& g, const Variable<T>& a);

/// x is [N x F] or [N x F x H x W]; b is [F] and broadcasts over the rest.
template <typename T>
Variable<T> bias_add(Graph<T>& g, const Variable<T>& x, const Variable<T>& b);

/// Sub-gradient at 0 is 0.
template <typename T>
Variable<T> relu(Graph<T>& g, const Variable<T>& x);

/// Collapses everything after the batch dimension.
template <typename T>
Variable<T> flatten(Graph<T>& g, const Variable<T>& x);

template <typename T>
Variable<T> reshape(Graph<T>& g, const Variable<T>& x, Shape shape);

/// Cross-correlation. input [N x C x H x W], kernels [F x C x kh x kw].
template <typename T>
Variable<T> conv2d(Graph<T>& g, const Variable<T>& input,
                   const Variable<T>& kernels, std::size_t stride,
                   std::size_t padding);

/// Window `size`, step `stride`, no padding. Ties go to the first maximum.
template <typename T>
Variable<T> max_pool2d(Graph<T>& g, const Variable<T>& x, std::size_t size,
                       std::size_t stride);

/// Mean cross-entropy of softmax(logits) against integer labels.
template <typename T>
Variable<T> softmax_cross_entropy(Graph<T>& g, const Variable<T>& logits,
                                  std::span<const int> labels);

/// Sum over all variables of the entry-wise squared 2-norm.
template <typename T>
Variable<T> l2_sum(Graph<T>& g, const std::vector<Variable<T>>& vars);

/// Element-wise pruning function. `thresholds` has shape [G]; the flat
/// weight storage is split into G equal contiguous groups, group i using
/// thresholds[i]. Adjoints flow to both the weights and the thresholds.
template <typename T>
Variable<T> theta_map(Graph<T>& g, const Variable<T>& w,
                      const Variable<T>& thresholds, double alpha);

/// sum |theta(w; t)| with the same grouping as theta_map. The adjoint only
/// reaches the thresholds; the weights never receive a contribution.
template <typename T>
Variable<T> l1_sum_mapped(Graph<T>& g, const Variable<T>& w,
                          const Variable<T>& thresholds, double alpha);

}  // namespace ad
}  // namespace sparseforge

#endif  // SPARSEFORGE_AUTODIFF_HPP_
