#ifndef SPARSEFORGE_PRUNING_EXPORT_HPP_
#define SPARSEFORGE_PRUNING_EXPORT_HPP_

// Turning a trained sibling network into the deployable pruned network:
// every weight w of a group with threshold t is mapped through theta, cut by
// the hard threshold at gamma and mapped back with the numeric inverse. The
// result is stored per layer in CSR form.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparseforge/network.hpp"
#include "sparseforge/tensor.hpp"

namespace sparseforge {

struct Provenance {
  double alpha = 0.0;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// CSR weights of one layer. Row r holds the incoming weights of output unit
/// r (a dense neuron or a conv filter with its kernel flattened).
struct SparseLayer {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> row_offsets;
  std::vector<std::uint32_t> col_indices;
  std::vector<float> values;
  std::vector<float> bias;
  std::vector<double> thresholds;  // learned t per group; empty if not prunable

  std::size_t nnz() const noexcept { return values.size(); }
  std::size_t total() const noexcept { return rows * cols; }

  /// Throws ShapeError if any CSR invariant is broken.
  void validate() const;

  /// [rows x cols] with dropped entries as zeros.
  Tensor<float> densify() const;

  /// Keeps every non-zero entry of a dense [rows x cols] matrix.
  static SparseLayer from_dense(std::string name, const Tensor<float>& weights,
                                std::size_t rows, std::size_t cols, std::vector<float> bias,
                                std::vector<double> thresholds = {});

  friend bool operator==(const SparseLayer&, const SparseLayer&) = default;
};

struct SparseModel {
  NetworkSpec spec;
  std::vector<SparseLayer> layers;  // one per weighted layer
  Provenance provenance;

  void validate() const;
  Parameters<float> densify() const;
};

/// Dense sibling snapshot: raw weights, biases and learned thresholds.
struct DenseCheckpoint {
  NetworkSpec spec;
  Parameters<float> params;
  std::vector<std::vector<double>> thresholds;  // per weighted layer; empty if not prunable
  Provenance provenance;                        // gamma unused (0)

  static DenseCheckpoint from_sibling(const SiblingNetwork<float>& sibling,
                                      const Provenance& provenance);
  SiblingNetwork<float> to_sibling() const;
};

/// Drops w when |theta(w; t)| < gamma, otherwise stores
/// theta_inv(theta_bar(theta(w; t), gamma); t).
SparseModel prune(const DenseCheckpoint& checkpoint, double gamma);
SparseModel prune(const SiblingNetwork<float>& sibling, double gamma,
                  const Provenance& provenance = {});

struct LayerStats {
  std::string name;
  std::size_t total = 0;
  std::size_t kept = 0;

  double pruning_percent() const;
  /// total / kept; infinite when nothing is kept.
  double compression() const;
  /// Compression rounded to nearest, ties to even; 0 when nothing is kept.
  long compression_factor() const;
};

struct ModelStats {
  std::vector<LayerStats> layers;
  LayerStats overall;
};

/// Counts weights only; biases are never pruned and are excluded.
ModelStats stats(const SparseModel& model);

/// Aligned plain-text table, one column per layer plus the total.
std::string format_stats_text(const ModelStats& s);
/// CSV: layer,total,kept,pruning_percent,compression,factor
std::string format_stats_csv(const ModelStats& s);

/// CSR inference. Returns [N x classes] logits.
Tensor<float> sparse_forward(const SparseModel& model, const Tensor<float>& batch);

/// Plain dense inference of the base network with the given parameters.
Tensor<float> dense_forward(const NetworkSpec& spec, const Parameters<float>& params,
                            const Tensor<float>& batch);

struct Dataset;

struct EvalResult {
  double accuracy = 0.0;                   // fraction in [0, 1]
  std::optional<double> delta_error_pct;   // (error - baseline error) in points
};

std::size_t argmax_row(std::span<const float> row);

EvalResult evaluate(const SparseModel& model, const Dataset& data,
                    std::optional<double> baseline_accuracy = std::nullopt,
                    std::size_t batch_size = 500);
EvalResult evaluate(const SiblingNetwork<float>& sibling, const Dataset& data,
                    ForwardMode mode, std::optional<double> baseline_accuracy = std::nullopt,
                    std::size_t batch_size = 500);

}  // namespace sparseforge

#endif  // SPARSEFORGE_PRUNING_EXPORT_HPP_
