#include "sparseforge/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sparseforge {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kMaxPool: return "pool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kRelu: return "relu";
  }
  return "?";
}

LayerSpec LayerSpec::dense(std::string name, std::size_t units, bool prunable) {
  LayerSpec s;
  s.kind = LayerKind::kDense;
  s.name = std::move(name);
  s.units = units;
  s.prunable = prunable;
  return s;
}

LayerSpec LayerSpec::conv2d(std::string name, std::size_t filters, std::size_t kernel,
                            std::size_t stride, std::size_t padding, bool prunable,
                            ThresholdGranularity granularity) {
  LayerSpec s;
  s.kind = LayerKind::kConv2d;
  s.name = std::move(name);
  s.units = filters;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  s.prunable = prunable;
  s.granularity = granularity;
  return s;
}

LayerSpec LayerSpec::max_pool(std::size_t size, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::kMaxPool;
  s.name = "pool";
  s.kernel = size;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::kFlatten;
  s.name = "flatten";
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::kRelu;
  s.name = "relu";
  return s;
}

NetworkSpec::NetworkSpec(std::string name, Shape input_shape, std::size_t classes,
                         std::vector<LayerSpec> layers)
    : name_(std::move(name)),
      input_shape_(std::move(input_shape)),
      classes_(classes),
      layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) {
    throw ShapeError("network input shape must be non-empty");
  }
  if (layers_.empty()) throw ShapeError("network has no layers");

  Shape cur = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    const std::string where = "layer " + std::to_string(i) + " (" + l.name + "): ";
    if (l.prunable && !l.has_weights()) {
      throw ConfigError(where + "only dense and conv2d layers can be prunable");
    }
    if (l.granularity == ThresholdGranularity::kPerFilter && l.kind != LayerKind::kConv2d) {
      throw ConfigError(where + "per-filter thresholds need a conv2d layer");
    }
    switch (l.kind) {
      case LayerKind::kDense: {
        if (cur.size() != 1) throw ShapeError(where + "dense input must be flat, got " + shape_string(cur));
        if (l.units == 0) throw ShapeError(where + "dense layer needs units");
        param_layers_.push_back({i, l.name, l.kind, Shape{l.units, cur[0]}, l.units, cur[0],
                                 l.units, l.prunable, l.prunable ? 1u : 0u});
        cur = Shape{l.units};
        break;
      }
      case LayerKind::kConv2d: {
        if (cur.size() != 3) throw ShapeError(where + "conv2d input must be CHW, got " + shape_string(cur));
        if (l.units == 0 || l.kernel == 0 || l.stride == 0) throw ShapeError(where + "bad conv2d parameters");
        if (cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) {
          throw ShapeError(where + "kernel larger than padded input");
        }
        const std::size_t oh = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
        const std::size_t ow = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
        const std::size_t thresholds =
            !l.prunable ? 0 : (l.granularity == ThresholdGranularity::kPerFilter ? l.units : 1);
        param_layers_.push_back({i, l.name, l.kind, Shape{l.units, cur[0], l.kernel, l.kernel},
                                 l.units, cur[0] * l.kernel * l.kernel, l.units, l.prunable,
                                 thresholds});
        cur = Shape{l.units, oh, ow};
        break;
      }
      case LayerKind::kMaxPool: {
        if (cur.size() != 3) throw ShapeError(where + "pool input must be CHW");
        if (l.kernel == 0 || l.stride == 0 || cur[1] < l.kernel || cur[2] < l.kernel) {
          throw ShapeError(where + "bad pool parameters");
        }
        cur = Shape{cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::kFlatten:
        cur = Shape{shape_size(cur)};
        break;
      case LayerKind::kRelu:
        break;
    }
    output_shapes_.push_back(cur);
  }
  if (cur != Shape{classes_}) {
    throw ShapeError("network output " + shape_string(cur) + " does not match " +
                     std::to_string(classes_) + " classes");
  }
}

std::size_t NetworkSpec::weight_count() const {
  std::size_t n = 0;
  for (const auto& p : param_layers_) n += p.weight_count();
  return n;
}

std::size_t NetworkSpec::bias_count() const {
  std::size_t n = 0;
  for (const auto& p : param_layers_) n += p.bias_size;
  return n;
}

std::size_t NetworkSpec::threshold_count() const {
  std::size_t n = 0;
  for (const auto& p : param_layers_) n += p.threshold_count;
  return n;
}

NetworkSpec build_lenet300() {
  return NetworkSpec("lenet300", Shape{784}, 10,
                     {LayerSpec::dense("fc1", 300), LayerSpec::relu(),
                      LayerSpec::dense("fc2", 100), LayerSpec::relu(),
                      LayerSpec::dense("fc3", 10)});
}

NetworkSpec build_lenet5_small() {
  return NetworkSpec("lenet5s", Shape{1, 28, 28}, 10,
                     {LayerSpec::conv2d("conv1", 20, 5), LayerSpec::max_pool(2, 2),
                      LayerSpec::relu(), LayerSpec::conv2d("conv2", 50, 5),
                      LayerSpec::max_pool(2, 2), LayerSpec::relu(), LayerSpec::flatten(),
                      LayerSpec::dense("fc3", 500), LayerSpec::relu(),
                      LayerSpec::dense("fc4", 10)});
}

NetworkSpec build_arch(const std::string& arch) {
  if (arch == "lenet300") return build_lenet300();
  if (arch == "lenet5s") return build_lenet5_small();
  throw ConfigError("unknown architecture '" + arch + "' (expected lenet300 or lenet5s)");
}

template <typename T>
Parameters<T> init_weights(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Parameters<T> params;
  for (const auto& info : spec.param_layers()) {
    // Glorot: fan counts include the receptive field for convolutions
    std::size_t fan_in = info.cols;
    std::size_t fan_out = info.rows;
    if (info.kind == LayerKind::kConv2d) {
      fan_out = info.rows * info.weight_shape[2] * info.weight_shape[3];
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor<T> w(info.weight_shape);
    for (auto& v : w.data()) v = static_cast<T>(dist(rng));
    params.weights.push_back(std::move(w));
    params.biases.emplace_back(Shape{info.bias_size});
  }
  return params;
}

namespace {

template <typename T>
double quantile_impl(std::span<const T> values, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("quantile level must lie in [0, 1)");
  if (values.empty()) throw ShapeError("quantile of an empty group");
  if (p == 0.0) return 0.0;
  std::vector<double> mags(values.size());
  std::transform(values.begin(), values.end(), mags.begin(),
                 [](T v) { return std::abs(static_cast<double>(v)); });
  const double n = static_cast<double>(mags.size());
  auto rank = static_cast<std::size_t>(std::ceil(p * n));
  rank = std::clamp<std::size_t>(rank, 1, mags.size());
  std::nth_element(mags.begin(), mags.begin() + static_cast<long>(rank - 1), mags.end());
  return mags[rank - 1];
}

}  // namespace

double magnitude_quantile(std::span<const float> values, double p) {
  return quantile_impl(values, p);
}

double magnitude_quantile(std::span<const double> values, double p) {
  return quantile_impl(values, p);
}

template <typename T>
SiblingNetwork<T>::SiblingNetwork(NetworkSpec spec, Parameters<T> params, double alpha,
                                  std::vector<Tensor<T>> thresholds)
    : spec_(std::move(spec)), alpha_(alpha) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  const auto& infos = spec_.param_layers();
  if (params.weights.size() != infos.size() || params.biases.size() != infos.size() ||
      thresholds.size() != infos.size()) {
    throw ShapeError("parameter count does not match network '" + spec_.name() + "'");
  }
  for (std::size_t i = 0; i < infos.size(); ++i) {
    const auto& info = infos[i];
    if (params.weights[i].shape() != info.weight_shape) {
      throw ShapeError(info.name + ": weight shape " + shape_string(params.weights[i].shape()) +
                       " expected " + shape_string(info.weight_shape));
    }
    if (params.biases[i].shape() != Shape{info.bias_size}) {
      throw ShapeError(info.name + ": bias shape mismatch");
    }
    weights_.emplace_back(std::move(params.weights[i]), true, info.name + ".weight");
    biases_.emplace_back(std::move(params.biases[i]), true, info.name + ".bias");
    if (info.prunable) {
      if (thresholds[i].shape() != Shape{info.threshold_count}) {
        throw ShapeError(info.name + ": expected " + std::to_string(info.threshold_count) +
                         " thresholds");
      }
      for (T v : thresholds[i].data()) {
        if (!(v >= T{0})) throw ConfigError(info.name + ": thresholds must be non-negative");
      }
      thresholds_.emplace_back(std::move(thresholds[i]), true, info.name + ".threshold");
    } else {
      thresholds_.emplace_back();
    }
  }
}

template <typename T>
SiblingNetwork<T> SiblingNetwork<T>::clone() const {
  SiblingNetwork<T> copy(spec_, parameters(), alpha_, threshold_values());
  for (std::size_t i = 0; i < thresholds_.size(); ++i) {
    if (thresholds_[i].defined()) copy.thresholds_[i].set_grad_scale(thresholds_[i].grad_scale());
  }
  return copy;
}

template <typename T>
std::vector<Variable<T>> SiblingNetwork<T>::trainable() const {
  std::vector<Variable<T>> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(weights_[i]);
    out.push_back(biases_[i]);
    if (thresholds_[i].defined()) out.push_back(thresholds_[i]);
  }
  return out;
}

template <typename T>
void SiblingNetwork<T>::zero_grad() {
  for (auto& v : trainable()) v.zero_grad();
}

template <typename T>
void SiblingNetwork<T>::project_thresholds() {
  for (auto& t : thresholds_) {
    if (!t.defined()) continue;
    for (auto& v : t.mutable_value().data()) v = std::max(v, T{0});
  }
}

template <typename T>
Parameters<T> SiblingNetwork<T>::parameters() const {
  Parameters<T> p;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    p.weights.push_back(weights_[i].value());
    p.biases.push_back(biases_[i].value());
  }
  return p;
}

template <typename T>
std::vector<Tensor<T>> SiblingNetwork<T>::threshold_values() const {
  std::vector<Tensor<T>> out;
  for (const auto& t : thresholds_) out.push_back(t.defined() ? t.value() : Tensor<T>());
  return out;
}

template <typename T>
Variable<T> SiblingNetwork<T>::forward(Graph<T>& g, const Tensor<T>& batch,
                                       ForwardMode mode) const {
  const std::size_t per_sample = shape_size(spec_.input_shape());
  if (batch.rank() < 1 || batch.size() % per_sample != 0 ||
      batch.size() / per_sample != batch.dim(0)) {
    throw ShapeError("batch " + shape_string(batch.shape()) + " does not match input " +
                     shape_string(spec_.input_shape()));
  }
  Shape in_shape{batch.dim(0)};
  in_shape.insert(in_shape.end(), spec_.input_shape().begin(), spec_.input_shape().end());
  Variable<T> x(batch.reshaped(std::move(in_shape)), false, "input");

  std::size_t p = 0;
  for (const LayerSpec& l : spec_.layers()) {
    switch (l.kind) {
      case LayerKind::kDense:
      case LayerKind::kConv2d: {
        Variable<T> w = weights_[p];
        if (mode == ForwardMode::kSibling && thresholds_[p].defined()) {
          w = ad::theta_map(g, w, thresholds_[p], alpha_);
        }
        x = l.kind == LayerKind::kDense ? ad::matmul_bt(g, x, w)
                                        : ad::conv2d(g, x, w, l.stride, l.padding);
        x = ad::bias_add(g, x, biases_[p]);
        ++p;
        break;
      }
      case LayerKind::kMaxPool:
        x = ad::max_pool2d(g, x, l.kernel, l.stride);
        break;
      case LayerKind::kFlatten:
        x = ad::flatten(g, x);
        break;
      case LayerKind::kRelu:
        x = ad::relu(g, x);
        break;
    }
  }
  return x;
}

template <typename T>
SiblingNetwork<T> build_sibling(const NetworkSpec& spec, Parameters<T> params, double alpha,
                                double p_init) {
  if (!(p_init >= 0.0 && p_init < 1.0)) {
    throw ConfigError("p_init must lie in [0, 1), got " + std::to_string(p_init));
  }
  const auto& infos = spec.param_layers();
  if (params.weights.size() != infos.size()) {
    throw ShapeError("parameter count does not match network '" + spec.name() + "'");
  }
  std::vector<Tensor<T>> thresholds;
  for (std::size_t i = 0; i < infos.size(); ++i) {
    const auto& info = infos[i];
    if (!info.prunable) {
      thresholds.emplace_back();
      continue;
    }
    const auto w = params.weights[i].data();
    const std::size_t groups = info.threshold_count;
    const std::size_t per_group = w.size() / groups;
    Tensor<T> t(Shape{groups});
    for (std::size_t gi = 0; gi < groups; ++gi) {
      t[gi] = static_cast<T>(magnitude_quantile(w.subspan(gi * per_group, per_group), p_init));
    }
    thresholds.push_back(std::move(t));
  }
  return SiblingNetwork<T>(spec, std::move(params), alpha, std::move(thresholds));
}

template Parameters<float> init_weights(const NetworkSpec&, std::uint64_t);
template Parameters<double> init_weights(const NetworkSpec&, std::uint64_t);
template class SiblingNetwork<float>;
template class SiblingNetwork<double>;
template SiblingNetwork<float> build_sibling(const NetworkSpec&, Parameters<float>, double, double);
template SiblingNetwork<double> build_sibling(const NetworkSpec&, Parameters<double>, double, double);

}  // namespace sparseforge
