// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   acceptance            all criteria
//   acceptance 1 2 9      a subset

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sparseforge/data_io.hpp"
#include "sparseforge/errors.hpp"
#include "sparseforge/gradcheck.hpp"
#include "sparseforge/network.hpp"
#include "sparseforge/pruning_export.hpp"
#include "sparseforge/pruning_math.hpp"
#include "sparseforge/training.hpp"

namespace {

using namespace sparseforge;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

// ---- 1: derivatives against central differences ------------------------------------

Outcome criterion_1() {
  const auto start = Clock::now();
  constexpr int kSamples = 10'000;
  constexpr double kTol = 1e-4;
  constexpr double kKink = 1e-2;
  constexpr long double kStep = 1e-6L;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> log_a(0.0, 3.0), log_t(-3.0, std::log10(5.0)),
      ux(-10.0, 10.0);
  int checked = 0;
  int failures = 0;
  double worst = 0.0;
  while (checked < kSamples) {
    const double a = std::pow(10.0, log_a(rng));
    const double t = std::pow(10.0, log_t(rng));
    const double x = ux(rng);
    if (std::abs(x - t) < kKink || std::abs(x + t) < kKink) continue;
    const PruneParams p(a, t);
    const long double la = a, lt = t, lx = x;
    const auto fd_x = static_cast<double>(
        (oracle::theta(lx + kStep, la, lt) - oracle::theta(lx - kStep, la, lt)) / (2 * kStep));
    const auto fd_t = static_cast<double>(
        (oracle::theta(lx, la, lt + kStep) - oracle::theta(lx, la, lt - kStep)) / (2 * kStep));
    const double ex = oracle::rel_err(pruning_math::theta_grad_x(x, p), fd_x);
    const double et = oracle::rel_err(pruning_math::theta_grad_t(x, p), fd_t);
    worst = std::max({worst, ex, et});
    if (!(ex <= kTol && et <= kTol)) ++failures;
    ++checked;
  }
  const double elapsed = seconds_since(start);
  return {failures == 0 && elapsed < 10.0,
          fmt("%d samples, %d failures, max rel err %.2e (tol %.0e), %.2f s (limit 10 s)", checked,
              failures, worst, kTol, elapsed)};
}

// ---- 2: weak convergence to the hard threshold --------------------------------------

Outcome criterion_2() {
  const auto start = Clock::now();
  constexpr double kAlpha = 1e4;
  constexpr double kNeighborhood = 1e-2;
  bool pass = true;
  std::string detail;
  for (double t : {0.5, 1.0, 2.0}) {
    const PruneParams p(kAlpha, t);
    double worst = 0.0;
    std::size_t points = 0;
    for (int i = -100'000; i <= 100'000; ++i) {
      const double x = i * 1e-4 * 4.0 * t;  // [-4t, 4t]
      if (std::abs(x - t) < kNeighborhood || std::abs(x + t) < kNeighborhood) continue;
      const double bar = static_cast<double>(oracle::theta_bar(x, t));
      worst = std::max(worst, std::abs(pruning_math::theta(x, p) - bar));
      ++points;
    }
    const double bound = 1e-2 * std::max(t, 1.0);
    pass = pass && worst <= bound;
    detail += fmt("t=%g: max dev %.2e over %zu points (bound %.0e); ", t, worst, points, bound);
  }
  const double elapsed = seconds_since(start);
  return {pass && elapsed < 1.0, detail + fmt("%.2f s (limit 1 s)", elapsed)};
}

// ---- 3: inverse and the export pipeline ------------------------------------------

Outcome criterion_3() {
  const auto start = Clock::now();
  constexpr double kTol = 1e-8;

  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> lx(-10, 10), la(0, 3), lt(-3, std::log10(5.0));
  int round_trips = 0;
  double worst_inv = 0.0;
  while (round_trips < 10'000) {
    const PruneParams p(std::pow(10, la(rng)), std::pow(10, lt(rng)));
    const double x = lx(rng);
    const double y = pruning_math::theta(x, p);
    if (!std::isnormal(y)) continue;  // theta underflows deep inside the dead zone
    worst_inv = std::max(worst_inv, std::abs(pruning_math::theta_inv(y, p) - x));
    ++round_trips;
  }

  // one 100x100 dense layer: 10^4 weights
  const NetworkSpec spec("probe", {100}, 100, {LayerSpec::dense("fc", 100)});
  constexpr double kAlpha = 100.0, kThreshold = 0.08, kGamma = 1e-3;
  Parameters<float> params = init_weights<float>(spec, 7);
  std::normal_distribution<float> nd(0.0f, 0.05f);
  for (auto& w : params.weights[0].data()) w = nd(rng);
  const DenseCheckpoint checkpoint{spec, params, {{kThreshold}}, Provenance{kAlpha, 0, 7, 0}};
  const Parameters<float> pruned = prune(checkpoint, kGamma).densify();

  std::size_t support_mismatch = 0, kept = 0;
  double worst_value = 0.0;
  const auto& w = params.weights[0];
  for (std::size_t k = 0; k < w.size(); ++k) {
    const long double y = oracle::theta(w[k], kAlpha, kThreshold);
    const bool keep = std::fabs(y) >= kGamma;
    const float got = pruned.weights[0][k];
    if ((got != 0.0f) != keep) ++support_mismatch;
    if (keep) {
      ++kept;
      worst_value = std::max(worst_value, std::abs(static_cast<double>(got) - w[k]));
    }
  }
  const double elapsed = seconds_since(start);
  const bool pass = worst_inv <= kTol && support_mismatch == 0 && worst_value <= kTol &&
                    elapsed < 10.0;
  return {pass, fmt("round trip: %d samples, max err %.2e; export: %zu weights, %zu kept, "
                    "%zu support mismatches, max value err %.2e (tol %.0e); %.2f s (limit 10 s)",
                    round_trips, worst_inv, w.size(), kept, support_mismatch, worst_value, kTol,
                    elapsed)};
}

// ---- 4: autodiff ops and determinism --------------------------------------------

Dataset synthetic_mnist(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.split = "synthetic";
  d.images = Tensor<float>({n, 1, 28, 28});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0, 0.3f);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 10);
    for (std::size_t p = 0; p < 784; ++p) d.images[i * 784 + p] = noise(rng);
    for (std::size_t p = 0; p < 28; ++p) {
      d.images[i * 784 + static_cast<std::size_t>(label) * 56 + p] = 1.0f;
    }
    d.labels.push_back(label);
  }
  return d;
}

bool same_parameters(const SiblingNetwork<float>& a, const SiblingNetwork<float>& b) {
  for (std::size_t i = 0; i < a.weights().size(); ++i) {
    if (a.weights()[i].value().storage() != b.weights()[i].value().storage()) return false;
    if (a.biases()[i].value().storage() != b.biases()[i].value().storage()) return false;
  }
  for (std::size_t i = 0; i < a.thresholds().size(); ++i) {
    if (a.thresholds()[i].value().storage() != b.thresholds()[i].value().storage()) return false;
  }
  return true;
}

Outcome criterion_4() {
  const auto start = Clock::now();
  std::size_t ops = 0, failed_ops = 0;
  std::string failed_names;
  for (const auto& r : gradcheck::check_autodiff_ops(404)) {
    ++ops;
    if (!r.passed()) {
      ++failed_ops;
      failed_names += " " + r.name;
    }
  }

  bool identical = true;
  for (const char* arch : {"lenet300", "lenet5s"}) {
    const Dataset d = synthetic_mnist(96, 4);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.threads = 2;
    cfg.seed = 44;
    const auto first = train(build_arch(arch), d, cfg, &d);
    std::vector<std::unique_ptr<char[]>> heap_noise;
    for (int i = 1; i < 64; ++i) heap_noise.emplace_back(new char[static_cast<std::size_t>(i * 24)]);
    const auto second = train(build_arch(arch), d, cfg, &d);
    identical = identical && first.report.epochs == second.report.epochs &&
                same_parameters(first.network, second.network);
  }
  const double elapsed = seconds_since(start);
  return {failed_ops == 0 && ops > 0 && identical && elapsed < 30.0,
          fmt("%zu ops checked, %zu failed%s; seeded runs %s; %.2f s (limit 30 s)", ops, failed_ops,
              failed_names.c_str(), identical ? "bit-identical" : "DIFFER", elapsed)};
}

// ---- 9: serialization and IDX parsing ----------------------------------------------

std::string read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  write_bytes(path, std::string(bytes.begin(), bytes.end()));
}

std::optional<DataError::Kind> idx_error(const std::vector<std::uint8_t>& images,
                                         const std::optional<std::vector<std::uint8_t>>& labels) {
  const fs::path dir = oracle::temp_dir("acceptance_idx");
  write_bytes(dir / "x-images-idx3-ubyte", images);
  if (labels) write_bytes(dir / "x-labels-idx1-ubyte", *labels);
  try {
    load_mnist_split(dir, "x");
  } catch (const DataError& e) {
    return e.kind();
  }
  return std::nullopt;
}

Outcome criterion_9() {
  const auto start = Clock::now();
  const fs::path dir = oracle::temp_dir("acceptance_spfg");
  int spfg_checks = 0, spfg_failures = 0;
  for (const char* arch : {"lenet300", "lenet5s"}) {
    const NetworkSpec spec = build_arch(arch);
    const auto sib = build_sibling<float>(spec, init_weights<float>(spec, 9), 100, 0.3);
    const DenseCheckpoint checkpoint = DenseCheckpoint::from_sibling(sib, Provenance{100, 0, 9, 1});
    const SparseModel model = prune(checkpoint, 1e-3);

    save_model(model, dir / "a.spfg");
    save_model(load_sparse_model(dir / "a.spfg"), dir / "b.spfg");
    spfg_failures += read_bytes(dir / "a.spfg") != read_bytes(dir / "b.spfg");
    spfg_failures += !(load_sparse_model(dir / "b.spfg").layers == model.layers);

    save_model(checkpoint, dir / "c.spfg");
    save_model(load_checkpoint(dir / "c.spfg"), dir / "d.spfg");
    spfg_failures += read_bytes(dir / "c.spfg") != read_bytes(dir / "d.spfg");

    std::string flipped = read_bytes(dir / "a.spfg");
    flipped[flipped.size() / 2] = static_cast<char>(flipped[flipped.size() / 2] ^ 0x10);
    write_bytes(dir / "e.spfg", flipped);
    try {
      load_sparse_model(dir / "e.spfg");
      ++spfg_failures;
    } catch (const FormatError& e) {
      spfg_failures += e.kind() != FormatError::Kind::kChecksumMismatch;
    }
    spfg_checks += 4;
  }

  using K = DataError::Kind;
  std::vector<std::uint8_t> px(2 * 784, 0);
  px[0] = 255;
  px[784 + 29] = 1;
  const auto images = oracle::idx_images(2, 28, 28, px);
  const auto labels = oracle::idx_labels({7, 2});
  int idx_failures = 0;
  {
    const fs::path good = oracle::temp_dir("acceptance_idx_good");
    write_bytes(good / "t10k-images-idx3-ubyte", images);
    write_bytes(good / "t10k-labels-idx1-ubyte", labels);
    const Dataset d = load_mnist_split(good, "t10k");
    idx_failures += !(d.size() == 2 && d.labels == std::vector<int>{7, 2} &&
                      d.images[0] == 1.0f && d.images[784 + 29] == 1.0f / 255.0f);
  }
  const std::vector<std::pair<std::optional<K>, K>> corpus{
      {idx_error(images, std::nullopt), K::kMissingFile},
      {idx_error({0, 0, 8}, labels), K::kTruncated},
      {idx_error(oracle::idx_images(2, 28, 28, px, 0x00000801), labels), K::kBadMagic},
      {idx_error(images, oracle::idx_labels({7, 2}, 0x00000803)), K::kBadMagic},
      {idx_error(oracle::idx_images(2, 27, 28, std::vector<std::uint8_t>(2 * 27 * 28)), labels),
       K::kBadDimensions},
      {idx_error(oracle::idx_images(2, 28, 28, std::vector<std::uint8_t>(884)), labels),
       K::kTruncated},
      {idx_error(images, oracle::idx_labels({7, 2, 1})), K::kCountMismatch},
      {idx_error(images, oracle::idx_labels({7}, 0x00000801, 2)), K::kTruncated},
      {idx_error(images, oracle::idx_labels({7, 10})), K::kBadLabel},
      {idx_error(oracle::idx_images(0, 28, 28, {}), oracle::idx_labels({})), K::kEmpty},
  };
  for (const auto& [got, want] : corpus) idx_failures += got != want;

  const double elapsed = seconds_since(start);
  return {spfg_failures == 0 && idx_failures == 0 && elapsed < 5.0,
          fmt("SPFG: %d checks, %d failures; IDX: 1 valid + %zu corrupt fixtures, %d failures; "
              "%.2f s (limit 5 s)",
              spfg_checks, spfg_failures, corpus.size(), idx_failures, elapsed)};
}

// ---- 5-8: MNIST training runs ------------------------------------------------------

fs::path mnist_dir() {
  if (const char* env = std::getenv("SPARSEFORGE_DATA_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
  return SPARSEFORGE_MNIST_DIR;
}

struct Run {
  SiblingNetwork<float> network;
  double accuracy = 0.0;  // pruned model, or base network for plain runs
  std::optional<ModelStats> stats;
};

class Runs {
 public:
  const MnistData& data() {
    if (!data_) data_ = load_mnist(mnist_dir());
    return *data_;
  }

  const Run& get(const std::string& arch, std::size_t epochs, ForwardMode mode,
                 double lambda_wd) {
    const std::string key = fmt("%s/%zu/%d/%g", arch.c_str(), epochs, static_cast<int>(mode),
                                lambda_wd);
    if (auto it = runs_.find(key); it != runs_.end()) return it->second;
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.mode = mode;
    cfg.lambda_wd = lambda_wd;
    std::cerr << "training " << key << '\n';
    const auto start = Clock::now();
    auto progress = [&](const EpochRecord& r) {
      std::cerr << fmt("  %s epoch %zu/%zu loss %.4f train %.2f%% (%.0f s)\n", key.c_str(), r.epoch,
                       epochs, r.total, 100.0 * r.train_accuracy,
                       seconds_since(start));
    };
    TrainResult result = train(build_arch(arch), data().train, cfg, nullptr, progress);
    Run run{std::move(result.network), 0.0, std::nullopt};
    if (mode == ForwardMode::kPlain) {
      run.accuracy = evaluate(run.network, data().test, ForwardMode::kPlain).accuracy;
    } else {
      const SparseModel model = prune(run.network, cfg.gamma);
      run.accuracy = evaluate(model, data().test).accuracy;
      run.stats = stats(model);
    }
    return runs_.emplace(key, std::move(run)).first->second;
  }

 private:
  std::optional<MnistData> data_;
  std::map<std::string, Run> runs_;
};

std::string layer_summary(const ModelStats& s) {
  std::string out;
  for (const auto& l : s.layers) {
    if (!out.empty()) out += ", ";
    out += fmt("%s %.1f%%", l.name.c_str(), l.pruning_percent());
  }
  return out;
}

Outcome compression_criterion(Runs& runs, const std::string& arch, std::size_t epochs,
                              double min_compression, std::optional<std::size_t> max_kept,
                              std::optional<double> min_fc1_percent) {
  const Run& pruned = runs.get(arch, epochs, ForwardMode::kSibling, 1e-4);
  const Run& base = runs.get(arch, epochs, ForwardMode::kPlain, 1e-4);
  const ModelStats& s = *pruned.stats;
  const double compression = s.overall.compression();
  const double delta = 100.0 * (base.accuracy - pruned.accuracy);
  bool pass = compression >= min_compression && delta <= 0.5;
  if (max_kept) pass = pass && s.overall.kept <= *max_kept;
  if (min_fc1_percent) pass = pass && s.layers.front().pruning_percent() >= *min_fc1_percent;
  return {pass, fmt("kept %zu of %zu, compression %.2fx (min %.0fx); baseline acc %.2f%%, pruned "
                    "acc %.2f%%, delta error %+.2f points (max +0.50); %s",
                    s.overall.kept, s.overall.total, compression, min_compression,
                    100.0 * base.accuracy, 100.0 * pruned.accuracy, delta,
                    layer_summary(s).c_str())};
}

Outcome criterion_5(Runs& runs) {
  return compression_criterion(runs, "lenet300", 20, 12.0, 22'000, 90.0);
}

Outcome criterion_6(Runs& runs) {
  const ModelStats& s = *runs.get("lenet300", 20, ForwardMode::kSibling, 1e-4).stats;
  const auto largest = std::max_element(s.layers.begin(), s.layers.end(),
                                        [](const auto& a, const auto& b) { return a.total < b.total; });
  bool pass = true;
  for (const auto& l : s.layers) {
    if (&l != &*largest) pass = pass && largest->pruning_percent() > l.pruning_percent();
  }
  return {pass, fmt("largest layer %s; %s", largest->name.c_str(), layer_summary(s).c_str())};
}

Outcome criterion_7(Runs& runs) {
  return compression_criterion(runs, "lenet5s", 10, 8.0, std::nullopt, std::nullopt);
}

Outcome criterion_8(Runs& runs) {
  constexpr double kGamma = 1e-3;
  const double with_wd =
      band_fraction(runs.get("lenet300", 20, ForwardMode::kSibling, 1e-4).network, 0, kGamma);
  const double without_wd =
      band_fraction(runs.get("lenet300", 20, ForwardMode::kSibling, 0.0).network, 0, kGamma);
  return {with_wd > without_wd,
          fmt("fc1 survivors with t <= |w| <= 2t: %.4f with weight decay 1e-4, %.4f without",
              with_wd, without_wd)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9};

  Runs runs;
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"theta derivatives vs central differences", criterion_1}},
      {2, {"weak convergence to the hard threshold", criterion_2}},
      {3, {"inverse round trip and export oracle", criterion_3}},
      {4, {"autodiff finite differences and determinism", criterion_4}},
      {5, {"LeNet-300-100 compression and accuracy", [&] { return criterion_5(runs); }}},
      {6, {"largest layer pruned hardest", [&] { return criterion_6(runs); }}},
      {7, {"small LeNet-5 compression and accuracy", [&] { return criterion_7(runs); }}},
      {8, {"weights gather above the threshold with weight decay", [&] { return criterion_8(runs); }}},
      {9, {"SPFG round trip and IDX corpus", criterion_9}},
  };

  int failures = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << '\n';
      return 2;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << it->second.first
              << "): " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
