#ifndef SPARSEFORGE_NETWORK_HPP_
#define SPARSEFORGE_NETWORK_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparseforge/autodiff.hpp"
#include "sparseforge/tensor.hpp"

namespace sparseforge {

enum class LayerKind : std::uint8_t {
  kDense = 0,
  kConv2d = 1,
  kMaxPool = 2,
  kFlatten = 3,
  kRelu = 4,
};

enum class ThresholdGranularity : std::uint8_t {
  kPerLayer = 0,
  kPerFilter = 1,
};

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  std::size_t units = 0;    // dense outputs, or conv filters
  std::size_t kernel = 0;   // conv kernel side, or pool window side
  std::size_t stride = 1;
  std::size_t padding = 0;  // conv only
  bool prunable = false;
  ThresholdGranularity granularity = ThresholdGranularity::kPerLayer;

  static LayerSpec dense(std::string name, std::size_t units, bool prunable = true);
  static LayerSpec conv2d(std::string name, std::size_t filters, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0,
                          bool prunable = true,
                          ThresholdGranularity granularity = ThresholdGranularity::kPerFilter);
  static LayerSpec max_pool(std::size_t size, std::size_t stride);
  static LayerSpec flatten();
  static LayerSpec relu();

  bool has_weights() const { return kind == LayerKind::kDense || kind == LayerKind::kConv2d; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Shapes of one weighted layer. For dense layers the weight matrix is
/// [out x in]; for conv layers [filters x channels x k x k]. Either way row r
/// of the [rows x cols] view holds the incoming weights of output unit r.
struct ParamLayerInfo {
  std::size_t layer_index;
  std::string name;
  LayerKind kind;
  Shape weight_shape;
  std::size_t rows;
  std::size_t cols;
  std::size_t bias_size;
  bool prunable;
  std::size_t threshold_count;  // 0 when not prunable

  std::size_t weight_count() const { return rows * cols; }
};

/// Sequential architecture. Construction validates that consecutive shapes
/// compose and the last layer emits `classes` logits.
class NetworkSpec {
 public:
  NetworkSpec(std::string name, Shape input_shape, std::size_t classes,
              std::vector<LayerSpec> layers);

  const std::string& name() const noexcept { return name_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t classes() const noexcept { return classes_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }

  /// Per-sample output shape of every layer.
  const std::vector<Shape>& output_shapes() const noexcept { return output_shapes_; }
  const std::vector<ParamLayerInfo>& param_layers() const noexcept { return param_layers_; }

  std::size_t weight_count() const;
  std::size_t bias_count() const;
  std::size_t threshold_count() const;

  friend bool operator==(const NetworkSpec& a, const NetworkSpec& b) {
    return a.name_ == b.name_ && a.input_shape_ == b.input_shape_ &&
           a.classes_ == b.classes_ && a.layers_ == b.layers_;
  }

 private:
  std::string name_;
  Shape input_shape_;
  std::size_t classes_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> output_shapes_;
  std::vector<ParamLayerInfo> param_layers_;
};

/// 784-300-100-10 fully connected, layers fc1..fc3.
NetworkSpec build_lenet300();

/// conv1 20@5x5, pool 2, conv2 50@5x5, pool 2, fc3 500, fc4 10, with
/// per-filter thresholds on the conv layers.
NetworkSpec build_lenet5_small();

/// Looks up "lenet300" or "lenet5s".
NetworkSpec build_arch(const std::string& arch);

/// Weights and biases of every weighted layer, in layer order.
template <typename T>
struct Parameters {
  std::vector<Tensor<T>> weights;
  std::vector<Tensor<T>> biases;
};

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
template <typename T>
Parameters<T> init_weights(const NetworkSpec& spec, std::uint64_t seed);

/// Nearest-rank p-quantile of |values|: the ceil(p*n)-th smallest magnitude,
/// or 0 when p == 0.
double magnitude_quantile(std::span<const float> values, double p);
double magnitude_quantile(std::span<const double> values, double p);

enum class ForwardMode {
  kSibling,  // weights pass through theta(W; t)
  kPlain,    // the base network, weights used as-is
};

/// The base network with every prunable weight group W replaced by
/// theta(W; t) and a learnable threshold per group.
template <typename T>
class SiblingNetwork {
 public:
  SiblingNetwork(NetworkSpec spec, Parameters<T> params, double alpha,
                 std::vector<Tensor<T>> thresholds);

  // Variables are shared handles, so a copy would alias the parameters.
  SiblingNetwork(const SiblingNetwork&) = delete;
  SiblingNetwork& operator=(const SiblingNetwork&) = delete;
  SiblingNetwork(SiblingNetwork&&) noexcept = default;
  SiblingNetwork& operator=(SiblingNetwork&&) noexcept = default;

  /// Deep copy with fresh variables.
  SiblingNetwork clone() const;

  const NetworkSpec& spec() const noexcept { return spec_; }
  double alpha() const noexcept { return alpha_; }

  /// One entry per weighted layer (spec().param_layers() order). Threshold
  /// variables are undefined for layers that are not prunable.
  const std::vector<Variable<T>>& weights() const noexcept { return weights_; }
  const std::vector<Variable<T>>& biases() const noexcept { return biases_; }
  const std::vector<Variable<T>>& thresholds() const noexcept { return thresholds_; }

  /// Weights, biases and defined thresholds.
  std::vector<Variable<T>> trainable() const;
  void zero_grad();

  /// t <- max(t, 0) for every threshold.
  void project_thresholds();

  /// Copies current weights and biases out.
  Parameters<T> parameters() const;
  std::vector<Tensor<T>> threshold_values() const;

  /// `batch` is [N x ...] with trailing size matching the input shape.
  Variable<T> forward(Graph<T>& g, const Tensor<T>& batch,
                      ForwardMode mode = ForwardMode::kSibling) const;

 private:
  NetworkSpec spec_;
  double alpha_;
  std::vector<Variable<T>> weights_;
  std::vector<Variable<T>> biases_;
  std::vector<Variable<T>> thresholds_;
};

/// Thresholds start at the p_init magnitude quantile of their group
/// (per layer or per filter). p_init must lie in [0, 1).
template <typename T>
SiblingNetwork<T> build_sibling(const NetworkSpec& spec, Parameters<T> params,
                                double alpha, double p_init);

}  // namespace sparseforge

#endif  // SPARSEFORGE_NETWORK_HPP_
