#include "sparseforge/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sparseforge/data_io.hpp"
#include "sparseforge/pruning_export.hpp"

namespace sparseforge {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sparseforge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("sparseforge_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Class k lights up image row 2k.
void write_split(const fs::path& dir, const std::string& prefix, std::uint32_t n,
                 std::uint64_t seed) {
  std::vector<std::uint8_t> px(n * 784), labels(n);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(0, 60);
  for (std::uint32_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint8_t>(i % 10);
    for (std::size_t p = 0; p < 784; ++p) px[i * 784 + p] = static_cast<std::uint8_t>(noise(rng));
    for (std::size_t p = 0; p < 28; ++p) px[i * 784 + labels[i] * 56 + p] = 255;
  }
  write_bytes(dir / (prefix + "-images-idx3-ubyte"), oracle::idx_images(n, 28, 28, px));
  write_bytes(dir / (prefix + "-labels-idx1-ubyte"), oracle::idx_labels(labels));
}

fs::path tiny_mnist() {
  const fs::path dir = fresh_dir("data");
  write_split(dir, "train", 64, 1);
  write_split(dir, "t10k", 20, 2);
  return dir;
}

std::map<std::string, std::string> directory_contents(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    files[e.path().filename().string()] = read_bytes(e.path());
  }
  return files;
}

// fc1 94.7% pruned, 266200 / 14010 = 19x overall
SparseModel table_fixture() {
  const NetworkSpec spec = build_lenet300();
  SparseModel m{spec, {}, Provenance{100, 1e-3, 1, 2}};
  const std::vector<std::size_t> kept{12'500, 1'100, 410};
  const auto infos = spec.param_layers();
  for (std::size_t i = 0; i < infos.size(); ++i) {
    Tensor<float> w({infos[i].rows * infos[i].cols});
    for (std::size_t k = 0; k < kept[i]; ++k) w[k] = 0.5f;
    m.layers.push_back(SparseLayer::from_dense(infos[i].name, w, infos[i].rows, infos[i].cols,
                                               std::vector<float>(infos[i].bias_size, 0.0f),
                                               std::vector<double>(infos[i].threshold_count, 0.1)));
  }
  return m;
}

// ---- usage -----------------------------------------------------------------------

TEST(CliTest, HelpListsEveryFlagWithItsDefault) {
  const Result r = run_cli({"--help"});
  EXPECT_EQ(r.code, cli::kSuccess);
  for (const std::string flag :
       {"--arch", "--data-dir", "--out", "--model", "--baseline", "--epochs", "--batch-size",
        "--lr", "--alpha", "--p-init", "--rho", "--lambda-t", "--lambda-wd", "--gamma", "--seed",
        "--threads", "--report-format"}) {
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  }
  auto line_of = [&](const std::string& flag) {
    const auto at = r.out.find(flag);
    return r.out.substr(at, r.out.find('\n', at) - at);
  };
  EXPECT_NE(line_of("--alpha").find("100"), std::string::npos) << line_of("--alpha");
  EXPECT_NE(line_of("--p-init").find("0.1"), std::string::npos) << line_of("--p-init");
  EXPECT_NE(line_of("--rho").find("0.01"), std::string::npos) << line_of("--rho");
  EXPECT_NE(line_of("--lambda-t").find("0.01"), std::string::npos) << line_of("--lambda-t");
  EXPECT_NE(line_of("--lambda-wd").find("0.0001"), std::string::npos) << line_of("--lambda-wd");
  EXPECT_NE(line_of("--gamma").find("0.001"), std::string::npos) << line_of("--gamma");
  EXPECT_NE(line_of("--epochs").find("20"), std::string::npos) << line_of("--epochs");
  EXPECT_NE(line_of("--batch-size").find("64"), std::string::npos) << line_of("--batch-size");
}

TEST(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli({}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"train", "--bogus"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"train", "--arch", "vgg"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"train", "--epochs", "0"}).code, cli::kUsage);  // no --out
  const fs::path dir = fresh_dir("usage");
  const Result bad_gamma = run_cli({"train", "--epochs", "0", "--gamma", "-1", "--out", dir.string()});
  EXPECT_EQ(bad_gamma.code, cli::kUsage);
  EXPECT_FALSE(bad_gamma.err.empty());
  EXPECT_EQ(run_cli({"prune", "--out", (dir / "m.spfg").string()}).code, cli::kUsage);
}

// ---- train -----------------------------------------------------------------------

TEST(CliTest, ZeroEpochsWritesUntrainedArtifacts) {
  const fs::path dir = fresh_dir("zero");
  const Result r = run_cli({"train", "--epochs", "0", "--out", dir.string()});
  ASSERT_EQ(r.code, cli::kSuccess) << r.err;
  ASSERT_TRUE(fs::exists(dir / "checkpoint.spfg"));
  ASSERT_TRUE(fs::exists(dir / "model.spfg"));
  ASSERT_TRUE(fs::exists(dir / "report.jsonl"));
  EXPECT_EQ(read_bytes(dir / "report.jsonl"), "");
  const DenseCheckpoint c = load_checkpoint(dir / "checkpoint.spfg");
  EXPECT_EQ(c.spec.name(), "lenet300");
  const SparseModel m = load_sparse_model(dir / "model.spfg");
  EXPECT_EQ(stats(m).overall.total, 266'200u);
  EXPECT_NE(r.out.find("fc1"), std::string::npos);
}

TEST(CliTest, SameSeedGivesIdenticalArtifacts) {
  const fs::path data = tiny_mnist();
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* name : {"seed_a", "seed_b"}) {
    const fs::path dir = fresh_dir(name);
    const Result r = run_cli({"train", "--epochs", "2", "--batch-size", "16", "--seed", "7",
                              "--threads", "2", "--data-dir", data.string(), "--out",
                              dir.string()});
    ASSERT_EQ(r.code, cli::kSuccess) << r.err;
    EXPECT_NE(r.out.find("pruned test accuracy"), std::string::npos);
    runs.push_back(directory_contents(dir));
  }
  ASSERT_GE(runs[0].size(), 3u);
  EXPECT_EQ(runs[0], runs[1]);

  const fs::path other = fresh_dir("seed_c");
  ASSERT_EQ(run_cli({"train", "--epochs", "2", "--batch-size", "16", "--seed", "8", "--data-dir",
                     data.string(), "--out", other.string()})
                .code,
            cli::kSuccess);
  EXPECT_NE(read_bytes(other / "checkpoint.spfg"), runs[0]["checkpoint.spfg"]);
}

TEST(CliTest, DataDirFallsBackToEnvironment) {
  const fs::path data = tiny_mnist();
  const fs::path dir = fresh_dir("env");
  ::setenv("SPARSEFORGE_DATA_DIR", data.c_str(), 1);
  const Result r = run_cli({"train", "--epochs", "1", "--batch-size", "32", "--out", dir.string()});
  ::unsetenv("SPARSEFORGE_DATA_DIR");
  EXPECT_EQ(r.code, cli::kSuccess) << r.err;
  const Result missing =
      run_cli({"train", "--epochs", "1", "--out", fresh_dir("env_missing").string()});
  EXPECT_EQ(missing.code, cli::kDataError);
}

TEST(CliTest, DataErrorsExitTwo) {
  const fs::path dir = fresh_dir("data_err");
  EXPECT_EQ(run_cli({"train", "--epochs", "1", "--data-dir", (dir / "absent").string(), "--out",
                     dir.string()})
                .code,
            cli::kDataError);
  write_bytes(dir / "garbage.spfg", {1, 2, 3, 4});
  EXPECT_EQ(run_cli({"report", "--model", (dir / "garbage.spfg").string()}).code, cli::kDataError);
  EXPECT_EQ(run_cli({"prune", "--model", (dir / "nothing.spfg").string(), "--out",
                     (dir / "m.spfg").string()})
                .code,
            cli::kDataError);
}

TEST(CliTest, DivergenceExitsThree) {
  const fs::path data = tiny_mnist();
  const fs::path dir = fresh_dir("diverge");
  const Result r = run_cli({"train", "--epochs", "1", "--batch-size", "16", "--lr", "1e30",
                            "--data-dir", data.string(), "--out", dir.string()});
  EXPECT_EQ(r.code, cli::kDivergence) << r.err;
  EXPECT_FALSE(r.err.empty());
}

TEST(CliTest, ConfigFileIsReadAndFlagsWin) {
  const fs::path dir = fresh_dir("config");
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "arch=lenet5s\nepochs=0\n";
  }
  const fs::path a = dir / "a";
  ASSERT_EQ(run_cli({"train", "--config", (dir / "run.cfg").string(), "--out", a.string()}).code,
            cli::kSuccess);
  EXPECT_EQ(load_checkpoint(a / "checkpoint.spfg").spec.name(), "lenet5s");
  const fs::path b = dir / "b";
  ASSERT_EQ(run_cli({"train", "--config", (dir / "run.cfg").string(), "--arch", "lenet300",
                     "--out", b.string()})
                .code,
            cli::kSuccess);
  EXPECT_EQ(load_checkpoint(b / "checkpoint.spfg").spec.name(), "lenet300");
}

// ---- prune / report / eval ---------------------------------------------------------

TEST(CliTest, RepruningAtLargerGammaNeverKeepsMore) {
  const fs::path dir = fresh_dir("reprune");
  ASSERT_EQ(run_cli({"train", "--epochs", "0", "--out", dir.string()}).code, cli::kSuccess);
  std::size_t prev = SIZE_MAX;
  for (const char* gamma : {"1e-4", "1e-3", "1e-2", "3e-2", "1e-1"}) {
    const fs::path model = dir / (std::string("m") + gamma + ".spfg");
    const Result r = run_cli({"prune", "--model", (dir / "checkpoint.spfg").string(), "--gamma",
                              gamma, "--out", model.string()});
    ASSERT_EQ(r.code, cli::kSuccess) << r.err;
    const std::size_t kept = stats(load_sparse_model(model)).overall.kept;
    EXPECT_LE(kept, prev) << "gamma " << gamma;
    prev = kept;
  }
  // the 1e-3 cut reproduces the model written by train
  EXPECT_EQ(read_bytes(dir / "m1e-3.spfg").size(), read_bytes(dir / "model.spfg").size());
}

TEST(CliTest, ReportPrintsTableAndCsv) {
  const fs::path dir = fresh_dir("report");
  save_model(table_fixture(), dir / "m.spfg");
  const Result text = run_cli({"report", "--model", (dir / "m.spfg").string()});
  ASSERT_EQ(text.code, cli::kSuccess) << text.err;
  EXPECT_NE(text.out.find("94.7%"), std::string::npos) << text.out;
  EXPECT_NE(text.out.find("19x"), std::string::npos) << text.out;
  const Result csv =
      run_cli({"report", "--model", (dir / "m.spfg").string(), "--report-format", "csv"});
  ASSERT_EQ(csv.code, cli::kSuccess);
  EXPECT_EQ(csv.out.substr(0, csv.out.find('\n')),
            "layer,total,kept,pruning_percent,compression,factor");
  EXPECT_NE(csv.out.find("fc1,235200,12500,"), std::string::npos) << csv.out;
  // read-only inputs: repeating the command gives the same output
  EXPECT_EQ(run_cli({"report", "--model", (dir / "m.spfg").string()}).out, text.out);
}

TEST(CliTest, EvalPrintsAccuracyAndDelta) {
  const fs::path data = tiny_mnist();
  const fs::path dir = fresh_dir("eval");
  save_model(table_fixture(), dir / "m.spfg");
  const Result r = run_cli({"eval", "--model", (dir / "m.spfg").string(), "--data-dir",
                            data.string(), "--baseline", "1"});
  ASSERT_EQ(r.code, cli::kSuccess) << r.err;
  // constant logits: argmax picks class 0, two of the twenty test images
  EXPECT_NE(r.out.find("accuracy: 10.00%"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("baseline accuracy: 100.00%"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("delta error: +90.00 points"), std::string::npos) << r.out;
  const Result self = run_cli({"eval", "--model", (dir / "m.spfg").string(), "--data-dir",
                               data.string(), "--baseline", (dir / "m.spfg").string()});
  EXPECT_NE(self.out.find("delta error: +0.00 points"), std::string::npos) << self.out;
  EXPECT_EQ(run_cli({"eval", "--model", (dir / "m.spfg").string(), "--data-dir", data.string(),
                     "--baseline", "1.5"})
                .code,
            cli::kUsage);
}

TEST(CliTest, GradcheckPasses) {
  const Result r = run_cli({"gradcheck", "--seed", "3"});
  EXPECT_EQ(r.code, cli::kSuccess) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

}  // namespace
}  // namespace sparseforge
