#include "sparseforge/pruning_export.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "sparseforge/data_io.hpp"
#include "sparseforge/kernels.hpp"
#include "sparseforge/pruning_math.hpp"

namespace sparseforge {

// ---------------------------------------------------------------------------
// SparseLayer

void SparseLayer::validate() const {
  const std::string where = "sparse layer '" + name + "': ";
  if (row_offsets.size() != rows + 1) throw ShapeError(where + "row_offsets length != rows + 1");
  if (row_offsets.front() != 0) throw ShapeError(where + "row_offsets must start at 0");
  if (row_offsets.back() != values.size() || col_indices.size() != values.size()) {
    throw ShapeError(where + "nnz does not match stored entries");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_offsets[r] > row_offsets[r + 1]) throw ShapeError(where + "row_offsets decrease");
    for (std::size_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k) {
      if (col_indices[k] >= cols) throw ShapeError(where + "column index out of range");
      if (k > row_offsets[r] && col_indices[k] <= col_indices[k - 1]) {
        throw ShapeError(where + "column indices not strictly increasing");
      }
      if (values[k] == 0.0f) throw ShapeError(where + "explicit zero stored");
    }
  }
}

Tensor<float> SparseLayer::densify() const {
  Tensor<float> dense({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k) {
      dense[r * cols + col_indices[k]] = values[k];
    }
  }
  return dense;
}

SparseLayer SparseLayer::from_dense(std::string name, const Tensor<float>& weights,
                                    std::size_t rows, std::size_t cols,
                                    std::vector<float> bias, std::vector<double> thresholds) {
  if (weights.size() != rows * cols) throw ShapeError("dense weights do not match rows x cols");
  SparseLayer l;
  l.name = std::move(name);
  l.rows = rows;
  l.cols = cols;
  l.row_offsets.reserve(rows + 1);
  l.row_offsets.push_back(0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const float v = weights[r * cols + c];
      if (v != 0.0f) {
        l.col_indices.push_back(static_cast<std::uint32_t>(c));
        l.values.push_back(v);
      }
    }
    l.row_offsets.push_back(static_cast<std::uint32_t>(l.values.size()));
  }
  l.bias = std::move(bias);
  l.thresholds = std::move(thresholds);
  return l;
}

// ---------------------------------------------------------------------------
// SparseModel / DenseCheckpoint

void SparseModel::validate() const {
  const auto& infos = spec.param_layers();
  if (layers.size() != infos.size()) throw ShapeError("sparse model layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.rows != infos[i].rows || l.cols != infos[i].cols || l.bias.size() != infos[i].bias_size) {
      throw ShapeError("sparse layer '" + l.name + "' does not match the network spec");
    }
    if (l.thresholds.size() != infos[i].threshold_count) {
      throw ShapeError("sparse layer '" + l.name + "' has the wrong threshold count");
    }
    l.validate();
  }
}

Parameters<float> SparseModel::densify() const {
  Parameters<float> p;
  const auto& infos = spec.param_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    p.weights.push_back(layers[i].densify().reshaped(infos[i].weight_shape));
    p.biases.emplace_back(Shape{layers[i].bias.size()}, layers[i].bias);
  }
  return p;
}

DenseCheckpoint DenseCheckpoint::from_sibling(const SiblingNetwork<float>& sibling,
                                              const Provenance& provenance) {
  DenseCheckpoint c{sibling.spec(), sibling.parameters(), {}, provenance};
  c.provenance.alpha = sibling.alpha();
  for (const auto& t : sibling.thresholds()) {
    std::vector<double> v;
    if (t.defined()) v.assign(t.value().data().begin(), t.value().data().end());
    c.thresholds.push_back(std::move(v));
  }
  return c;
}

SiblingNetwork<float> DenseCheckpoint::to_sibling() const {
  std::vector<Tensor<float>> t;
  for (const auto& v : thresholds) {
    if (v.empty()) {
      t.emplace_back();
    } else {
      t.emplace_back(Shape{v.size()}, std::vector<float>(v.begin(), v.end()));
    }
  }
  return SiblingNetwork<float>(spec, params, provenance.alpha, std::move(t));
}

// ---------------------------------------------------------------------------
// prune

SparseModel prune(const DenseCheckpoint& checkpoint, double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
  SparseModel model{checkpoint.spec, {}, checkpoint.provenance};
  model.provenance.gamma = gamma;
  const double alpha = checkpoint.provenance.alpha;
  const auto& infos = checkpoint.spec.param_layers();

  for (std::size_t i = 0; i < infos.size(); ++i) {
    const auto& info = infos[i];
    const Tensor<float>& w = checkpoint.params.weights[i];
    const auto& bias = checkpoint.params.biases[i].storage();
    const auto& thresholds = checkpoint.thresholds[i];
    if (!info.prunable) {
      model.layers.push_back(SparseLayer::from_dense(info.name, w, info.rows, info.cols, bias));
      continue;
    }
    if (thresholds.size() != info.threshold_count) {
      throw ShapeError(info.name + ": checkpoint threshold count mismatch");
    }
    const std::size_t per_group = w.size() / thresholds.size();

    SparseLayer l;
    l.name = info.name;
    l.rows = info.rows;
    l.cols = info.cols;
    l.bias = bias;
    l.thresholds = thresholds;
    l.row_offsets.push_back(0);
    for (std::size_t r = 0; r < info.rows; ++r) {
      for (std::size_t c = 0; c < info.cols; ++c) {
        const std::size_t at = r * info.cols + c;
        const PruneParams p(alpha, thresholds[at / per_group]);
        const double mapped = pruning_math::theta(w[at], p);
        const double cut = pruning_math::theta_bar(mapped, gamma);
        if (cut == 0.0) continue;
        const auto value = static_cast<float>(pruning_math::theta_inv(cut, p));
        if (value == 0.0f) continue;
        l.col_indices.push_back(static_cast<std::uint32_t>(c));
        l.values.push_back(value);
      }
      l.row_offsets.push_back(static_cast<std::uint32_t>(l.values.size()));
    }
    model.layers.push_back(std::move(l));
  }
  return model;
}

SparseModel prune(const SiblingNetwork<float>& sibling, double gamma,
                  const Provenance& provenance) {
  return prune(DenseCheckpoint::from_sibling(sibling, provenance), gamma);
}

// ---------------------------------------------------------------------------
// stats

double LayerStats::pruning_percent() const {
  if (total == 0) return 0.0;
  return 100.0 * (1.0 - static_cast<double>(kept) / static_cast<double>(total));
}

double LayerStats::compression() const {
  if (kept == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(total) / static_cast<double>(kept);
}

long LayerStats::compression_factor() const {
  if (kept == 0) return 0;
  return std::lrint(compression());
}

ModelStats stats(const SparseModel& model) {
  ModelStats s;
  s.overall.name = "total";
  for (const auto& l : model.layers) {
    LayerStats ls{l.name, l.total(), l.nnz()};
    s.overall.total += ls.total;
    s.overall.kept += ls.kept;
    s.layers.push_back(std::move(ls));
  }
  return s;
}

namespace {

std::string factor_string(const LayerStats& l) {
  return l.kept == 0 ? std::string("inf") : std::to_string(l.compression_factor()) + "x";
}

std::string percent_string(const LayerStats& l) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << l.pruning_percent() << '%';
  return os.str();
}

}  // namespace

std::string format_stats_text(const ModelStats& s) {
  std::vector<const LayerStats*> cols;
  for (const auto& l : s.layers) cols.push_back(&l);
  cols.push_back(&s.overall);

  std::ostringstream os;
  auto row = [&](const std::string& label, auto cell) {
    os << std::left << std::setw(9) << label;
    for (const LayerStats* l : cols) os << std::right << std::setw(11) << cell(*l);
    os << '\n';
  };
  row("", [](const LayerStats& l) { return l.name; });
  row("weights", [](const LayerStats& l) { return std::to_string(l.total); });
  row("kept", [](const LayerStats& l) { return std::to_string(l.kept); });
  row("pruning", percent_string);
  row("factor", factor_string);
  return os.str();
}

std::string format_stats_csv(const ModelStats& s) {
  std::ostringstream os;
  os << "layer,total,kept,pruning_percent,compression,factor\n";
  auto line = [&os](const LayerStats& l) {
    os << l.name << ',' << l.total << ',' << l.kept << ',' << std::fixed << std::setprecision(4)
       << l.pruning_percent() << ',';
    if (l.kept == 0) {
      os << "inf,inf\n";
    } else {
      os << std::setprecision(6) << l.compression() << ',' << l.compression_factor() << '\n';
    }
    os.unsetf(std::ios::floatfield);
  };
  for (const auto& l : s.layers) line(l);
  line(s.overall);
  return os.str();
}

// ---------------------------------------------------------------------------
// inference

namespace {

Tensor<float> to_input(const NetworkSpec& spec, const Tensor<float>& batch) {
  const std::size_t per_sample = shape_size(spec.input_shape());
  if (batch.rank() < 1 || batch.size() != batch.dim(0) * per_sample) {
    throw ShapeError("batch " + shape_string(batch.shape()) + " does not match input " +
                     shape_string(spec.input_shape()));
  }
  Shape s{batch.dim(0)};
  s.insert(s.end(), spec.input_shape().begin(), spec.input_shape().end());
  return batch.reshaped(std::move(s));
}

Tensor<float> sparse_dense_layer(const SparseLayer& l, const Tensor<float>& x) {
  const std::size_t n = x.dim(0);
  Tensor<float> y({n, l.rows});
  for (std::size_t i = 0; i < n; ++i) {
    const float* xi = x.data().data() + i * l.cols;
    float* yi = y.data().data() + i * l.rows;
    for (std::size_t r = 0; r < l.rows; ++r) {
      float acc = 0.0f;
      for (std::size_t k = l.row_offsets[r]; k < l.row_offsets[r + 1]; ++k) {
        acc += l.values[k] * xi[l.col_indices[k]];
      }
      yi[r] = acc + l.bias[r];
    }
  }
  return y;
}

Tensor<float> sparse_conv_layer(const SparseLayer& l, const LayerSpec& spec,
                                const Tensor<float>& x) {
  const std::size_t channels = x.dim(1);
  const Shape kshape{l.rows, channels, spec.kernel, spec.kernel};
  const auto geo = kernels::conv_geometry(x.shape(), kshape, spec.stride, spec.padding);
  const std::size_t cols = geo.batch * geo.positions();
  std::vector<float> col(geo.patch() * cols);
  kernels::im2col<float>(geo, x.data(), col);

  Tensor<float> y({geo.batch, l.rows, geo.out_h, geo.out_w});
  std::vector<float> acc(cols);
  for (std::size_t f = 0; f < l.rows; ++f) {
    std::fill(acc.begin(), acc.end(), l.bias[f]);
    for (std::size_t k = l.row_offsets[f]; k < l.row_offsets[f + 1]; ++k) {
      const float v = l.values[k];
      const float* src = col.data() + static_cast<std::size_t>(l.col_indices[k]) * cols;
      for (std::size_t j = 0; j < cols; ++j) acc[j] += v * src[j];
    }
    for (std::size_t n = 0; n < geo.batch; ++n) {
      std::copy_n(acc.data() + n * geo.positions(), geo.positions(),
                  y.data().data() + (n * l.rows + f) * geo.positions());
    }
  }
  return y;
}

}  // namespace

Tensor<float> sparse_forward(const SparseModel& model, const Tensor<float>& batch) {
  Tensor<float> x = to_input(model.spec, batch);
  std::size_t p = 0;
  for (const LayerSpec& l : model.spec.layers()) {
    switch (l.kind) {
      case LayerKind::kDense:
        if (x.rank() != 2 || x.dim(1) != model.layers[p].cols) {
          throw ShapeError("sparse dense layer input mismatch");
        }
        x = sparse_dense_layer(model.layers[p++], x);
        break;
      case LayerKind::kConv2d:
        x = sparse_conv_layer(model.layers[p++], l, x);
        break;
      case LayerKind::kMaxPool: {
        const auto geo = kernels::pool_geometry(x.shape(), l.kernel, l.stride);
        Tensor<float> y({geo.batch, geo.channels, geo.out_h, geo.out_w});
        kernels::max_pool<float>(geo, x.data(), y.data(), {});
        x = std::move(y);
        break;
      }
      case LayerKind::kFlatten:
        x = x.reshaped(Shape{x.dim(0), x.size() / x.dim(0)});
        break;
      case LayerKind::kRelu:
        for (auto& v : x.data()) v = std::max(v, 0.0f);
        break;
    }
  }
  return x;
}

Tensor<float> dense_forward(const NetworkSpec& spec, const Parameters<float>& params,
                            const Tensor<float>& batch) {
  std::vector<Tensor<float>> no_thresholds(spec.param_layers().size());
  for (std::size_t i = 0; i < no_thresholds.size(); ++i) {
    const auto& info = spec.param_layers()[i];
    if (info.prunable) no_thresholds[i] = Tensor<float>(Shape{info.threshold_count});
  }
  SiblingNetwork<float> net(spec, params, 1.0, std::move(no_thresholds));
  Graph<float> g;
  return net.forward(g, batch, ForwardMode::kPlain).value();
}

std::size_t argmax_row(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

namespace {

template <typename Forward>
EvalResult evaluate_impl(const Dataset& data, std::optional<double> baseline,
                         std::size_t batch_size, Forward&& forward) {
  if (data.size() == 0) throw DataError(DataError::Kind::kEmpty, "evaluation dataset is empty");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - begin);
    const Dataset part = data.slice(begin, count);
    const Tensor<float> logits = forward(part.images);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      const auto row = logits.data().subspan(i * k, k);
      if (static_cast<int>(argmax_row(row)) == part.labels[i]) ++correct;
    }
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  if (baseline) r.delta_error_pct = 100.0 * (*baseline - r.accuracy);
  return r;
}

}  // namespace

EvalResult evaluate(const SparseModel& model, const Dataset& data,
                    std::optional<double> baseline_accuracy, std::size_t batch_size) {
  return evaluate_impl(data, baseline_accuracy, batch_size,
                       [&](const Tensor<float>& x) { return sparse_forward(model, x); });
}

EvalResult evaluate(const SiblingNetwork<float>& sibling, const Dataset& data, ForwardMode mode,
                    std::optional<double> baseline_accuracy, std::size_t batch_size) {
  return evaluate_impl(data, baseline_accuracy, batch_size, [&](const Tensor<float>& x) {
    Graph<float> g;
    return sibling.forward(g, x, mode).value();
  });
}

}  // namespace sparseforge
