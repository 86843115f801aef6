#include "sparseforge/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>

#include "sparseforge/data_io.hpp"
#include "sparseforge/errors.hpp"
#include "sparseforge/gradcheck.hpp"
#include "sparseforge/network.hpp"
#include "sparseforge/pruning_export.hpp"
#include "sparseforge/training.hpp"

namespace sparseforge::cli {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::string arch = "lenet300";
  std::string data_dir;
  std::string out;
  std::string model;
  std::string baseline;
  std::string report_format = "text";
  std::string optimizer = "adam";
  bool plain = false;
  TrainConfig train;
};

void add_options(CLI::App& app, Options& o) {
  TrainConfig& c = o.train;
  app.add_option("--arch", o.arch, "Network architecture")
      ->check(CLI::IsMember({"lenet300", "lenet5s"}))
      ->capture_default_str();
  app.add_option("--data-dir", o.data_dir,
                 "Directory with the MNIST IDX files (default: $SPARSEFORGE_DATA_DIR)");
  app.add_option("--out", o.out, "Output directory (train) or model file (prune)");
  app.add_option("--model", o.model, "Input model file");
  app.add_option("--baseline", o.baseline,
                 "Baseline for eval: a model file or an accuracy in [0, 1]");
  app.add_option("--epochs", c.epochs, "Training epochs")->capture_default_str();
  app.add_option("--batch-size", c.batch_size, "Mini-batch size")->capture_default_str();
  app.add_option("--lr", c.optimizer.lr, "Base learning rate")->capture_default_str();
  app.add_option("--optimizer", o.optimizer, "Optimizer")
      ->check(CLI::IsMember({"adam", "sgd"}))
      ->capture_default_str();
  app.add_option("--momentum", c.optimizer.momentum, "SGD momentum")->capture_default_str();
  app.add_option("--alpha", c.alpha, "Sharpness of the pruning function")->capture_default_str();
  app.add_option("--p-init", c.p_init, "Magnitude quantile used to initialize thresholds")
      ->capture_default_str();
  app.add_option("--rho", c.rho, "Learning-rate factor for thresholds")->capture_default_str();
  app.add_option("--lambda-t", c.lambda_t, "Sparsity regularization weight")
      ->capture_default_str();
  app.add_option("--lambda-wd", c.lambda_wd, "Weight decay")->capture_default_str();
  app.add_option("--gamma", c.gamma, "Export cutoff on |theta(w)|")->capture_default_str();
  app.add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", c.threads, "Data-parallel workers")->capture_default_str();
  app.add_option("--report-format", o.report_format, "Statistics format")
      ->check(CLI::IsMember({"text", "csv"}))
      ->capture_default_str();
  app.add_flag("--plain", o.plain, "Train the base network without pruning (baseline)");
}

fs::path data_dir(const Options& o) {
  if (!o.data_dir.empty()) return o.data_dir;
  if (const char* env = std::getenv("SPARSEFORGE_DATA_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
  throw DataError(DataError::Kind::kMissingFile,
                  "no data directory: pass --data-dir or set SPARSEFORGE_DATA_DIR");
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ConfigError(flag + " is required");
}

std::string percent(double fraction) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * fraction << '%';
  return os.str();
}

std::string format_stats(const ModelStats& s, const std::string& format) {
  return format == "csv" ? format_stats_csv(s) : format_stats_text(s);
}

int cmd_train(Options& o, std::ostream& out, std::ostream& err) {
  require(o.out, "--out");
  TrainConfig& cfg = o.train;
  cfg.optimizer.kind = o.optimizer == "sgd" ? OptimizerKind::kSgd : OptimizerKind::kAdam;
  cfg.mode = o.plain ? ForwardMode::kPlain : ForwardMode::kSibling;
  cfg.validate();
  const NetworkSpec spec = build_arch(o.arch);

  SiblingNetwork<float> net = build_sibling<float>(spec, init_weights<float>(spec, cfg.seed),
                                                   cfg.alpha, cfg.p_init);
  TrainReport report{spec.name(), cfg.hash(), {}};
  std::optional<MnistData> data;
  if (cfg.epochs > 0) {
    data = load_mnist(data_dir(o));
    auto start = std::chrono::steady_clock::now();
    auto progress = [&](const EpochRecord& r) {
      const auto now = std::chrono::steady_clock::now();
      err << "epoch " << r.epoch << "/" << cfg.epochs << "  loss " << r.total << "  l0 " << r.l0
          << "  l_wd " << r.l_wd << "  l_t " << r.l_t << "  test "
          << (r.test_accuracy ? percent(*r.test_accuracy) : "-");
      if (r.pruned_test_accuracy) err << "  pruned " << percent(*r.pruned_test_accuracy);
      err << "  (" << std::chrono::duration<double>(now - start).count() << " s)\n";
      start = now;
    };
    auto result = train(std::move(net), data->train, cfg, &data->test, progress);
    net = std::move(result.network);
    report = std::move(result.report);
  }

  const fs::path dir = o.out;
  fs::create_directories(dir);
  const Provenance provenance{cfg.alpha, 0.0, cfg.seed, cfg.hash()};
  save_model(DenseCheckpoint::from_sibling(net, provenance), dir / "checkpoint.spfg");
  {
    std::ofstream jsonl(dir / "report.jsonl");
    if (!jsonl) throw FormatError(FormatError::Kind::kIo, "cannot write report.jsonl");
    jsonl << report.to_jsonl();
  }
  write_histograms(net, (dir / "").string());
  out << "checkpoint: " << (dir / "checkpoint.spfg").string() << '\n';

  if (!o.plain) {
    const SparseModel model = prune(net, cfg.gamma, provenance);
    save_model(model, dir / "model.spfg");
    out << "pruned model: " << (dir / "model.spfg").string() << '\n';
    out << format_stats(stats(model), o.report_format);
    if (data) out << "pruned test accuracy: " << percent(evaluate(model, data->test).accuracy) << '\n';
  } else if (data) {
    out << "test accuracy: " << percent(evaluate(net, data->test, ForwardMode::kPlain).accuracy)
        << '\n';
  }
  return kSuccess;
}

int cmd_prune(const Options& o, std::ostream& out) {
  require(o.model, "--model");
  require(o.out, "--out");
  const DenseCheckpoint checkpoint = load_checkpoint(o.model);
  const SparseModel model = prune(checkpoint, o.train.gamma);
  save_model(model, o.out);
  out << format_stats(stats(model), o.report_format);
  return kSuccess;
}

double model_accuracy(const fs::path& path, const Dataset& test) {
  auto model = load_model(path);
  if (auto* sparse = std::get_if<SparseModel>(&model)) return evaluate(*sparse, test).accuracy;
  const auto& checkpoint = std::get<DenseCheckpoint>(model);
  return evaluate(checkpoint.to_sibling(), test, ForwardMode::kPlain).accuracy;
}

std::optional<double> parse_accuracy(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("--baseline accuracy must lie in [0, 1]");
    return v;
  } catch (const std::logic_error&) {
    return std::nullopt;
  }
}

int cmd_eval(const Options& o, std::ostream& out) {
  require(o.model, "--model");
  const Dataset test = load_mnist_split(data_dir(o), "t10k");
  const double accuracy = model_accuracy(o.model, test);
  out << "accuracy: " << percent(accuracy) << '\n' << "error: " << percent(1.0 - accuracy) << '\n';
  if (!o.baseline.empty()) {
    std::optional<double> base = parse_accuracy(o.baseline);
    if (!base) base = model_accuracy(o.baseline, test);
    const double delta = 100.0 * (*base - accuracy);
    out << "baseline accuracy: " << percent(*base) << '\n'
        << "delta error: " << std::showpos << std::fixed << std::setprecision(2) << delta
        << std::noshowpos << " points\n";
  }
  return kSuccess;
}

int cmd_report(const Options& o, std::ostream& out) {
  require(o.model, "--model");
  out << format_stats(stats(load_sparse_model(o.model)), o.report_format);
  return kSuccess;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  bool ok = true;
  for (const auto& r : gradcheck::run_all(o.train.seed)) {
    out << (r.passed() ? "PASS " : "FAIL ") << r.name << "  samples " << r.samples
        << "  failures " << r.failures << "  max_error " << r.max_error << "  tol "
        << r.tolerance << '\n';
    ok = ok && r.passed();
  }
  return ok ? kSuccess : kVerificationFailure;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Differentiable threshold pruning for small convolutional and dense networks",
               "sparseforge"};
  Options o;
  add_options(app, o);
  app.set_config("--config", "", "key=value configuration file; flags win on conflict");
  app.require_subcommand(1);
  app.fallthrough();
  auto* train_cmd = app.add_subcommand("train", "Train a sibling network, prune it and save both");
  auto* prune_cmd = app.add_subcommand("prune", "Re-cut a checkpoint at --gamma");
  auto* eval_cmd = app.add_subcommand("eval", "Test accuracy of a model file");
  auto* report_cmd = app.add_subcommand("report", "Per-layer pruning statistics");
  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "Finite-difference checks of all derivatives");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(o, out, err);
    if (prune_cmd->parsed()) return cmd_prune(o, out);
    if (eval_cmd->parsed()) return cmd_eval(o, out);
    if (report_cmd->parsed()) return cmd_report(o, out);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const FormatError& e) {
    err << "model file error: " << e.what() << '\n';
    return kDataError;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace sparseforge::cli
