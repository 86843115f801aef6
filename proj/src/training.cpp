#include "sparseforge/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "sparseforge/errors.hpp"
#include "sparseforge/pruning_export.hpp"
#include "sparseforge/pruning_math.hpp"

namespace sparseforge {

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  auto finite = [](double v) { return std::isfinite(v); };
  require(finite(alpha) && alpha > 0.0, "alpha must be positive");
  require(p_init >= 0.0 && p_init < 1.0, "p_init must lie in [0, 1)");
  require(finite(rho) && rho > 0.0, "rho must be positive");
  require(finite(lambda_t) && lambda_t >= 0.0, "lambda_t must be non-negative");
  require(finite(lambda_wd) && lambda_wd >= 0.0, "lambda_wd must be non-negative");
  require(finite(gamma) && gamma > 0.0, "gamma must be positive");
  require(finite(optimizer.lr) && optimizer.lr > 0.0, "learning rate must be positive");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(finite(optimizer.epsilon) && optimizer.epsilon > 0.0, "epsilon must be positive");
  require(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0, "momentum must lie in [0, 1)");
  require(batch_size > 0, "batch size must be positive");
  require(threads > 0, "threads must be positive");
}

std::string TrainConfig::canonical() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "alpha=" << alpha << '\n'
     << "p_init=" << p_init << '\n'
     << "rho=" << rho << '\n'
     << "lambda_t=" << lambda_t << '\n'
     << "lambda_wd=" << lambda_wd << '\n'
     << "gamma=" << gamma << '\n'
     << "optimizer=" << (optimizer.kind == OptimizerKind::kAdam ? "adam" : "sgd") << '\n'
     << "lr=" << optimizer.lr << '\n'
     << "beta1=" << optimizer.beta1 << '\n'
     << "beta2=" << optimizer.beta2 << '\n'
     << "epsilon=" << optimizer.epsilon << '\n'
     << "momentum=" << optimizer.momentum << '\n'
     << "batch_size=" << batch_size << '\n'
     << "epochs=" << epochs << '\n'
     << "seed=" << seed << '\n'
     << "threads=" << threads << '\n'
     << "mode=" << (mode == ForwardMode::kPlain ? "plain" : "sibling") << '\n'
     << "learn_thresholds=" << (learn_thresholds ? 1 : 0) << '\n';
  return os.str();
}

std::uint64_t TrainConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
Optimizer<T>::Optimizer(OptimizerConfig config, std::vector<Variable<T>> vars)
    : config_(config), vars_(std::move(vars)) {
  for (const auto& v : vars_) {
    if (!v.defined() || !v.requires_grad()) throw ConfigError("optimizer variable without grad");
    m_.emplace_back(v.size(), 0.0);
    if (config_.kind == OptimizerKind::kAdam) v_.emplace_back(v.size(), 0.0);
  }
}

template <typename T>
void Optimizer<T>::step() {
  ++steps_;
  const double lr = config_.lr;
  if (config_.kind == OptimizerKind::kAdam) {
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      auto value = vars_[i].mutable_value().data();
      const auto grad = vars_[i].grad().data();
      const double rate = lr * static_cast<double>(vars_[i].grad_scale());
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < value.size(); ++k) {
        const double g = grad[k];
        m[k] = b1 * m[k] + (1.0 - b1) * g;
        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
        const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
        value[k] = static_cast<T>(value[k] - rate * update);
      }
    }
  } else {
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      auto value = vars_[i].mutable_value().data();
      const auto grad = vars_[i].grad().data();
      const double rate = lr * static_cast<double>(vars_[i].grad_scale());
      auto& vel = m_[i];
      for (std::size_t k = 0; k < value.size(); ++k) {
        vel[k] = config_.momentum * vel[k] + grad[k];
        value[k] = static_cast<T>(value[k] - rate * vel[k]);
      }
    }
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

// ---------------------------------------------------------------------------
// loss and step

template <typename T>
LossTerms<T> total_loss(Graph<T>& g, const SiblingNetwork<T>& net, const Tensor<T>& batch,
                        std::span<const int> labels, const TrainConfig& cfg) {
  LossTerms<T> terms;
  terms.logits = net.forward(g, batch, cfg.mode);
  terms.data = ad::softmax_cross_entropy(g, terms.logits, labels);
  terms.weight_decay =
      ad::scale(g, ad::l2_sum(g, net.weights()), static_cast<T>(cfg.lambda_wd));

  Variable<T> l1;
  if (cfg.mode == ForwardMode::kSibling) {
    for (std::size_t i = 0; i < net.weights().size(); ++i) {
      if (!net.thresholds()[i].defined()) continue;
      auto term = ad::l1_sum_mapped(g, net.weights()[i], net.thresholds()[i], net.alpha());
      l1 = l1.defined() ? ad::add(g, l1, term) : term;
    }
  }
  terms.threshold = l1.defined() ? ad::scale(g, l1, static_cast<T>(cfg.lambda_t))
                                 : Variable<T>(Tensor<T>::scalar(T{0}));
  terms.total = ad::add(g, ad::add(g, terms.data, terms.weight_decay), terms.threshold);
  return terms;
}

template <typename T>
Optimizer<T> make_optimizer(const SiblingNetwork<T>& net, const TrainConfig& cfg) {
  std::vector<Variable<T>> vars;
  for (std::size_t i = 0; i < net.weights().size(); ++i) {
    vars.push_back(net.weights()[i]);
    vars.push_back(net.biases()[i]);
    const auto& t = net.thresholds()[i];
    if (t.defined()) {
      t.set_grad_scale(static_cast<T>(cfg.rho));
      if (cfg.learn_thresholds && cfg.mode == ForwardMode::kSibling) vars.push_back(t);
    }
  }
  return Optimizer<T>(cfg.optimizer, std::move(vars));
}

template <typename T>
void step(SiblingNetwork<T>& net, Optimizer<T>& opt) {
  opt.step();
  net.project_thresholds();
}

#define SPARSEFORGE_INSTANTIATE_TRAINING(T)                                                   \
  template LossTerms<T> total_loss<T>(Graph<T>&, const SiblingNetwork<T>&, const Tensor<T>&, \
                                      std::span<const int>, const TrainConfig&);             \
  template Optimizer<T> make_optimizer<T>(const SiblingNetwork<T>&, const TrainConfig&);     \
  template void step<T>(SiblingNetwork<T>&, Optimizer<T>&);

SPARSEFORGE_INSTANTIATE_TRAINING(float)
SPARSEFORGE_INSTANTIATE_TRAINING(double)

// ---------------------------------------------------------------------------
// train

namespace {

struct BatchStats {
  double l0 = 0.0, l_wd = 0.0, l_t = 0.0, total = 0.0;
  std::size_t correct = 0;
};

std::size_t count_correct(const Tensor<float>& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<int>(argmax_row(logits.data().subspan(i * k, k))) == labels[i]) ++correct;
  }
  return correct;
}

void gather(const Dataset& data, std::span<const std::size_t> idx, Tensor<float>& images,
            std::vector<int>& labels) {
  const std::size_t per = data.images.size() / data.size();
  Shape s = data.images.shape();
  s[0] = idx.size();
  std::vector<float> px(idx.size() * per);
  labels.resize(idx.size());
  const float* src = data.images.data().data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src + idx[i] * per, per, px.data() + i * per);
    labels[i] = data.labels[idx[i]];
  }
  images = Tensor<float>(std::move(s), std::move(px));
}

double value_of(const Variable<float>& v) { return static_cast<double>(v.value()[0]); }

// Computes loss and gradients of one mini-batch into the network's grads.
BatchStats single_pass(SiblingNetwork<float>& net, const Tensor<float>& images,
                       std::span<const int> labels, const TrainConfig& cfg) {
  net.zero_grad();
  Graph<float> g;
  auto terms = total_loss(g, net, images, labels, cfg);
  g.backward(terms.total);
  return {value_of(terms.data), value_of(terms.weight_decay), value_of(terms.threshold),
          value_of(terms.total), count_correct(terms.logits.value(), labels)};
}

// Data-parallel variant: worker w gets a contiguous slice, its cross-entropy
// is weighted by its share of the batch, and worker 0 alone carries the
// regularizers. Gradients are summed into the master in worker order.
class ParallelPass {
 public:
  ParallelPass(const SiblingNetwork<float>& master, std::size_t workers) {
    for (std::size_t w = 0; w < workers; ++w) clones_.push_back(master.clone());
  }

  BatchStats run(SiblingNetwork<float>& master, const Tensor<float>& images,
                 std::span<const int> labels, const TrainConfig& cfg) {
    const std::size_t n = labels.size();
    const std::size_t workers = std::min(clones_.size(), n);
    const std::size_t per = images.size() / n;
    std::vector<BatchStats> partial(workers);
    std::vector<std::exception_ptr> errors(workers);
    auto work = [&](std::size_t w) {
      try {
        const std::size_t begin = n * w / workers, end = n * (w + 1) / workers;
        auto& net = clones_[w];
        sync(master, net);
        net.zero_grad();
        Shape s = images.shape();
        s[0] = end - begin;
        Tensor<float> x(s, std::vector<float>(images.storage().begin() + begin * per,
                                              images.storage().begin() + end * per));
        const auto lab = labels.subspan(begin, end - begin);
        Graph<float> g;
        TrainConfig local = cfg;
        if (w != 0) {
          local.lambda_wd = 0.0;
          local.lambda_t = 0.0;
        }
        auto terms = total_loss(g, net, x, lab, local);
        const float share = static_cast<float>(end - begin) / static_cast<float>(n);
        auto weighted = ad::add(g, ad::scale(g, terms.data, share),
                                ad::add(g, terms.weight_decay, terms.threshold));
        g.backward(weighted);
        partial[w] = {value_of(terms.data) * share, value_of(terms.weight_decay),
                      value_of(terms.threshold), value_of(weighted),
                      count_correct(terms.logits.value(), lab)};
      } catch (...) {
        errors[w] = std::current_exception();
      }
    };
    std::vector<std::thread> threads;
    for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(work, w);
    work(0);
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    master.zero_grad();
    auto dst = master.trainable();
    BatchStats total;
    for (std::size_t w = 0; w < workers; ++w) {
      auto src = clones_[w].trainable();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        auto d = dst[i].mutable_grad().data();
        const auto s = src[i].grad().data();
        for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
      }
      total.l0 += partial[w].l0;
      total.l_wd += partial[w].l_wd;
      total.l_t += partial[w].l_t;
      total.total += partial[w].total;
      total.correct += partial[w].correct;
    }
    return total;
  }

 private:
  static void sync(const SiblingNetwork<float>& from, SiblingNetwork<float>& to) {
    auto src = from.trainable();
    auto dst = to.trainable();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].mutable_value() = src[i].value();
  }

  std::vector<SiblingNetwork<float>> clones_;
};

std::vector<double> live_fractions(const SiblingNetwork<float>& net, double gamma) {
  std::vector<double> out;
  for (std::size_t i = 0; i < net.weights().size(); ++i) {
    const auto& t = net.thresholds()[i];
    const auto w = net.weights()[i].value().data();
    if (!t.defined()) {
      out.push_back(1.0);
      continue;
    }
    const std::size_t per_group = w.size() / t.size();
    std::size_t live = 0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const PruneParams p(net.alpha(), t.value()[k / per_group]);
      if (std::abs(pruning_math::theta(w[k], p)) >= gamma) ++live;
    }
    out.push_back(static_cast<double>(live) / static_cast<double>(w.size()));
  }
  return out;
}

}  // namespace

TrainResult train(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg,
                  const Dataset* test, const EpochCallback& on_epoch) {
  cfg.validate();
  return train(build_sibling<float>(spec, init_weights<float>(spec, cfg.seed), cfg.alpha,
                                    cfg.p_init),
               data, cfg, test, on_epoch);
}

TrainResult train(SiblingNetwork<float> net, const Dataset& data, const TrainConfig& cfg,
                  const Dataset* test, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.size() == 0) throw DataError(DataError::Kind::kEmpty, "training dataset is empty");

  TrainReport report;
  report.arch = net.spec().name();
  report.config_hash = cfg.hash();

  Optimizer<float> opt = make_optimizer(net, cfg);
  std::optional<ParallelPass> parallel;
  if (cfg.threads > 1) parallel.emplace(net, cfg.threads);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Tensor<float> images;
  std::vector<int> labels;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    BatchStats sum;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - begin);
      gather(data, std::span<const std::size_t>(order).subspan(begin, count), images, labels);
      BatchStats b;
      try {
        b = parallel ? parallel->run(net, images, labels, cfg)
                     : single_pass(net, images, labels, cfg);
      } catch (const NumericError& e) {
        throw DivergenceError("diverged in epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches + 1) + ": " + e.what());
      }
      if (!std::isfinite(b.total)) {
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches + 1));
      }
      step(net, opt);
      sum.l0 += b.l0;
      sum.l_wd += b.l_wd;
      sum.l_t += b.l_t;
      sum.total += b.total;
      sum.correct += b.correct;
      ++batches;
    }

    EpochRecord r;
    r.epoch = epoch;
    r.l0 = sum.l0 / static_cast<double>(batches);
    r.l_wd = sum.l_wd / static_cast<double>(batches);
    r.l_t = sum.l_t / static_cast<double>(batches);
    r.total = sum.total / static_cast<double>(batches);
    r.train_accuracy = static_cast<double>(sum.correct) / static_cast<double>(data.size());
    for (const auto& t : net.thresholds()) {
      r.thresholds.emplace_back();
      if (t.defined()) r.thresholds.back().assign(t.value().data().begin(), t.value().data().end());
    }
    r.live_fraction = live_fractions(net, cfg.gamma);
    if (test != nullptr) {
      r.test_accuracy = evaluate(net, *test, cfg.mode).accuracy;
      if (cfg.mode == ForwardMode::kSibling) {
        r.pruned_test_accuracy = evaluate(prune(net, cfg.gamma), *test).accuracy;
      }
    }
    report.epochs.push_back(std::move(r));
    if (on_epoch) on_epoch(report.epochs.back());
  }
  return {std::move(net), std::move(report)};
}

std::string TrainReport::to_jsonl() const {
  std::string out;
  for (const auto& r : epochs) {
    nlohmann::json j;
    j["arch"] = arch;
    j["config_hash"] = config_hash;
    j["epoch"] = r.epoch;
    j["l0"] = r.l0;
    j["l_wd"] = r.l_wd;
    j["l_t"] = r.l_t;
    j["total"] = r.total;
    j["train_accuracy"] = r.train_accuracy;
    j["test_accuracy"] = r.test_accuracy ? nlohmann::json(*r.test_accuracy) : nlohmann::json();
    j["pruned_test_accuracy"] =
        r.pruned_test_accuracy ? nlohmann::json(*r.pruned_test_accuracy) : nlohmann::json();
    j["thresholds"] = r.thresholds;
    j["live_fraction"] = r.live_fraction;
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// weight distribution

std::vector<HistogramBin> histogram(std::span<const float> values, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  double m = 0.0;
  for (float v : values) m = std::max(m, static_cast<double>(std::abs(v)));
  if (m == 0.0) m = 1.0;
  const double width = 2.0 * m / static_cast<double>(bins);
  std::vector<HistogramBin> h(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    h[b].left = -m + width * static_cast<double>(b);
    h[b].right = b + 1 == bins ? m : -m + width * static_cast<double>(b + 1);
  }
  for (float v : values) {
    auto b = static_cast<std::size_t>((static_cast<double>(v) + m) / width);
    ++h[std::min(b, bins - 1)].count;
  }
  return h;
}

std::string histogram_csv(const std::vector<HistogramBin>& h) {
  std::ostringstream os;
  os << std::setprecision(9) << "bin_left,bin_right,count\n";
  for (const auto& b : h) os << b.left << ',' << b.right << ',' << b.count << '\n';
  return os.str();
}

std::vector<std::filesystem::path> write_histograms(const SiblingNetwork<float>& net,
                                                    const std::string& prefix, std::size_t bins) {
  std::vector<std::filesystem::path> written;
  const auto& infos = net.spec().param_layers();
  for (std::size_t i = 0; i < infos.size(); ++i) {
    if (!infos[i].prunable) continue;
    std::filesystem::path path = prefix + infos[i].name + "_hist.csv";
    std::ofstream out(path);
    if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
    out << histogram_csv(histogram(net.weights()[i].value().data(), bins));
    written.push_back(std::move(path));
  }
  return written;
}

double band_fraction(const SiblingNetwork<float>& net, std::size_t layer, double gamma) {
  const auto& t = net.thresholds().at(layer);
  if (!t.defined()) throw ConfigError("layer " + std::to_string(layer) + " is not prunable");
  const auto w = net.weights()[layer].value().data();
  const std::size_t per_group = w.size() / t.size();
  std::size_t live = 0, band = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double tk = t.value()[k / per_group];
    const double a = std::abs(static_cast<double>(w[k]));
    if (std::abs(pruning_math::theta(w[k], PruneParams(net.alpha(), tk))) < gamma) continue;
    ++live;
    if (a >= tk && a <= 2.0 * tk) ++band;
  }
  return live == 0 ? 0.0 : static_cast<double>(band) / static_cast<double>(live);
}

}  // namespace sparseforge
