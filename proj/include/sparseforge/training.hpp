#ifndef SPARSEFORGE_TRAINING_HPP_
#define SPARSEFORGE_TRAINING_HPP_

// Joint optimization of weights and thresholds:
//   L = L0 + L_wd + L_t
//   L0   = mean softmax cross-entropy of the sibling network
//   L_wd = lambda_wd * sum ||W||^2 over raw weights
//   L_t  = lambda_t * sum |theta(W; t)|, whose adjoint reaches t only
// Thresholds move with learning rate lr * rho and are projected onto t >= 0
// after every step.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparseforge/autodiff.hpp"
#include "sparseforge/data_io.hpp"
#include "sparseforge/network.hpp"

namespace sparseforge {

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  double momentum = 0.0;  // sgd only
};

struct TrainConfig {
  double alpha = 1e2;
  double p_init = 1e-1;
  double rho = 1e-2;
  double lambda_t = 1e-2;
  double lambda_wd = 1e-4;
  double gamma = 1e-3;
  OptimizerConfig optimizer;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  /// kPlain trains the base network: no theta, no L_t, thresholds unused.
  ForwardMode mode = ForwardMode::kSibling;
  /// When false the thresholds keep their initial values.
  bool learn_thresholds = true;

  /// Throws ConfigError on any out-of-range field.
  void validate() const;

  /// One "key=value" per line, fixed order, round-trip precision.
  std::string canonical() const;

  /// FNV-1a 64 of canonical().
  std::uint64_t hash() const;
};

/// First-moment/second-moment state for Adam, velocity for SGD.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Variable<T>> vars);

  /// value -= lr * grad_scale * update(grad) for every variable.
  void step();

  std::size_t steps() const noexcept { return steps_; }
  const std::vector<Variable<T>>& variables() const noexcept { return vars_; }

 private:
  OptimizerConfig config_;
  std::vector<Variable<T>> vars_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

template <typename T>
struct LossTerms {
  Variable<T> total;
  Variable<T> data;          // L0
  Variable<T> weight_decay;  // L_wd
  Variable<T> threshold;     // L_t (zero in plain mode)
  Variable<T> logits;
};

template <typename T>
LossTerms<T> total_loss(Graph<T>& g, const SiblingNetwork<T>& net, const Tensor<T>& batch,
                        std::span<const int> labels, const TrainConfig& cfg);

/// Fresh optimizer over the weights and biases and, when learned, the
/// thresholds, whose grad_scale is set to cfg.rho.
template <typename T>
Optimizer<T> make_optimizer(const SiblingNetwork<T>& net, const TrainConfig& cfg);

/// One optimizer step followed by the projection t <- max(t, 0).
template <typename T>
void step(SiblingNetwork<T>& net, Optimizer<T>& opt);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double l0 = 0.0;
  double l_wd = 0.0;
  double l_t = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;                  // running, over the epoch's batches
  std::optional<double> test_accuracy;          // base network (plain) or sibling
  std::optional<double> pruned_test_accuracy;   // pruned at gamma
  std::vector<std::vector<double>> thresholds;  // per weighted layer, per group
  std::vector<double> live_fraction;            // per weighted layer, |theta(w)| >= gamma

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainReport {
  std::string arch;
  std::uint64_t config_hash = 0;
  std::vector<EpochRecord> epochs;

  /// One JSON object per line.
  std::string to_jsonl() const;
};

struct TrainResult {
  SiblingNetwork<float> network;
  TrainReport report;
};

/// Called after every epoch with the record just appended.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded shuffled mini-batch training. `test` is only used for reporting.
TrainResult train(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg,
                  const Dataset* test = nullptr, const EpochCallback& on_epoch = {});

/// Same, continuing from an existing network.
TrainResult train(SiblingNetwork<float> net, const Dataset& data, const TrainConfig& cfg,
                  const Dataset* test = nullptr, const EpochCallback& on_epoch = {});

struct HistogramBin {
  double left = 0.0;
  double right = 0.0;
  std::size_t count = 0;
};

/// `bins` equal-width bins over [-m, m], m = max |v|.
std::vector<HistogramBin> histogram(std::span<const float> values, std::size_t bins);
std::string histogram_csv(const std::vector<HistogramBin>& h);

/// Writes <prefix><layer>_hist.csv with the raw weights of every prunable layer.
std::vector<std::filesystem::path> write_histograms(const SiblingNetwork<float>& net,
                                                    const std::string& prefix,
                                                    std::size_t bins = 100);

/// Among weights of layer `layer` with |theta(w)| >= gamma, the fraction with
/// t <= |w| <= 2t for the group threshold t.
double band_fraction(const SiblingNetwork<float>& net, std::size_t layer, double gamma);

}  // namespace sparseforge

#endif  // SPARSEFORGE_TRAINING_HPP_
