#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "stretchnas/cli/commands.hpp"

using namespace stretchnas;
using namespace stretchnas::cli;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("stretchnas_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

const char* kToy = R"(
[run]
seed = 4

[data]
generator = two-rings
samples = 300
test_samples = 200

[supernet]
layers = 2
nodes = 5
channels = 4

[search]
epochs = 2
batch_size = 32
lambda = 10

[retrain]
epochs = 2
batch_size = 32
)";

fs::path write_config(const fs::path& dir, const std::string& text, const std::string& name = "run.ini") {
  write_text_file(dir / name, text);
  return dir / name;
}

std::string toy_with_search(const std::string& extra) {
  std::string text = kToy;
  return text.insert(text.find("[search]\n") + 9, extra);
}

Overrides out_to(const fs::path& dir) {
  Overrides o;
  o.out = dir.string();
  return o;
}

struct Captured {
  std::ostringstream out, err;
  Streams streams() { return {out, err}; }
};

int expect_config_error(const std::string& text, const std::string& fragment) {
  try {
    parse_run_config(text).require_complete();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    return 1;
  }
  ADD_FAILURE() << "accepted: " << text;
  return 0;
}

}  // namespace

TEST(RunConfigParse, ReadsEverySection) {
  const auto cfg = parse_run_config(R"(
# comment
[run]
seed = 9
out = somewhere
[data]
generator = xor-grid
samples = 120 ; trailing comment
noise = 0.05
split = 0.5, 0.25, 0.25
[supernet]
layers = 3
nodes = 6
channels = 4
topology = output-pair
ops = identity, sep_conv_3x3
reductions = 1
[search]
optimizer = milenas
epochs = 4
lambda = 2.5
lambda_prime = 0.5
lr_arch = 1e-3
[retrain]
epochs = 7
eval_chunk = 10
)");
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.out, "somewhere");
  EXPECT_EQ(cfg.data.synthetic.generator, data::Generator::XorGrid);
  EXPECT_EQ(cfg.data.synthetic.n_samples, 120u);
  EXPECT_DOUBLE_EQ(cfg.split[0], 0.5);
  EXPECT_EQ(cfg.supernet.layers, 3);
  EXPECT_EQ(cfg.supernet.n_nodes, 6);
  EXPECT_EQ(cfg.supernet.topology_mode, topology::TopologyMode::OutputPair);
  EXPECT_EQ(cfg.supernet.ops.size(), 2u);
  EXPECT_EQ(cfg.supernet.reduction_positions, std::set<int>{1});
  EXPECT_EQ(cfg.optimizer, optimization::OptimizerMode::Milenas);
  EXPECT_DOUBLE_EQ(cfg.hyper.lambda_prime, 0.5);
  EXPECT_DOUBLE_EQ(cfg.hyper.lr_arch, 1e-3);
  EXPECT_EQ(cfg.retrain.epochs, 7);
  EXPECT_EQ(cfg.retrain.eval_chunk, 10u);
  EXPECT_NO_THROW(cfg.require_complete());
}

TEST(RunConfigParse, DefaultsAndReductionKeywords) {
  const auto plain = parse_run_config("[supernet]\nlayers = 6\n");
  EXPECT_EQ(plain.supernet.reduction_positions, search_space::default_reduction_positions(6));
  EXPECT_TRUE(parse_run_config("[supernet]\nreductions = none\n").supernet.reduction_positions.empty());
  EXPECT_FALSE(parse_run_config("[supernet]\ntopology = none\n").supernet.topology_mode.has_value());
}

TEST(RunConfigParse, StrictErrors) {
  expect_config_error("[search]\nfoo = 1\n", "line 2: unknown key 'foo'");
  expect_config_error("[nope]\n", "line 1: unknown section");
  expect_config_error("[run]\nseed = 1\nseed = 2\n", "line 3: duplicate key");
  expect_config_error("[run]\nseed =\n", "empty value");
  expect_config_error("[run]\nseed\n", "expected 'key = value'");
  expect_config_error("seed = 1\n", "outside of any section");
  expect_config_error("[run]\nseed = x\n", "line 2");
  expect_config_error("[supernet]\nops = identity, warp\n", "unknown operation 'warp'");
  expect_config_error("[supernet]\nlayers = 2\nreductions = 5\n", "outside 0..layers-1");
  expect_config_error("[data]\nsplit = 0.5, 0.5\n", "three");
  expect_config_error("[search]\noptimizer = milenas\n", "missing lambda_prime");
}

TEST(Commands, SearchWritesArtifacts) {
  TempDir dir;
  Captured io;
  const auto cfg = write_config(dir.path(), kToy);
  ASSERT_EQ(cmd_search(cfg, out_to(dir.path() / "s"), io.streams()), kOk) << io.err.str();
  for (const char* f : {"checkpoint.ckpt", "checkpoints/epoch_001.ckpt", "checkpoints/epoch_002.ckpt", "metrics.csv",
                        "metrics.svg", "arch_variables.json", "search_report.json"})
    EXPECT_TRUE(fs::exists(dir.path() / "s" / f)) << f;
  const auto ckpt = optimization::load_checkpoint(read_text_file(dir.path() / "s" / "checkpoint.ckpt"));
  EXPECT_EQ(ckpt.state.epoch, 2);
  const auto vars = nlohmann::json::parse(read_text_file(dir.path() / "s" / "arch_variables.json"));
  EXPECT_TRUE(vars.contains("beta.normal.n1"));
  EXPECT_EQ(read_text_file(dir.path() / "s" / "metrics.svg").rfind("<svg", 0), 0u);
}

TEST(Commands, SameSeedGivesIdenticalMetrics) {
  TempDir dir;
  Captured io;
  const auto cfg = write_config(dir.path(), kToy);
  ASSERT_EQ(cmd_search(cfg, out_to(dir.path() / "a"), io.streams()), kOk);
  ASSERT_EQ(cmd_search(cfg, out_to(dir.path() / "b"), io.streams()), kOk);
  EXPECT_EQ(read_text_file(dir.path() / "a" / "metrics.csv"), read_text_file(dir.path() / "b" / "metrics.csv"));
  auto other = out_to(dir.path() / "c");
  other.seed = 5;
  ASSERT_EQ(cmd_search(cfg, other, io.streams()), kOk);
  EXPECT_NE(read_text_file(dir.path() / "a" / "metrics.csv"), read_text_file(dir.path() / "c" / "metrics.csv"));
}

TEST(Commands, MissingLambdaPrimeExitsWithConfigError) {
  TempDir dir;
  Captured io;
  const auto cfg = write_config(dir.path(), toy_with_search("optimizer = milenas\n"));
  EXPECT_EQ(cmd_search(cfg, out_to(dir.path() / "s"), io.streams()), kConfigError);
  EXPECT_NE(io.err.str().find("missing lambda_prime"), std::string::npos);
  Overrides o = out_to(dir.path() / "s");
  o.opt = "milenas";
  EXPECT_EQ(cmd_search(write_config(dir.path(), kToy, "darts.ini"), o, io.streams()), kConfigError);
}

TEST(Commands, NumericFailureExitsThreeWithCheckpoint) {
  TempDir dir;
  Captured io;
  const auto cfg = write_config(dir.path(), toy_with_search("lr_w = 1e30\nlr_w_min = 0\ngrad_clip = 1e300\n"));
  EXPECT_EQ(cmd_search(cfg, out_to(dir.path() / "s"), io.streams()), kNumericError);
  EXPECT_TRUE(fs::exists(dir.path() / "s" / "checkpoint_abort.ckpt"));
  EXPECT_NO_THROW(optimization::load_checkpoint(read_text_file(dir.path() / "s" / "checkpoint_abort.ckpt")));
}

TEST(Commands, DeriveOfUniformBetaIsRejected) {
  TempDir dir;
  Captured io;
  search_space::SupernetConfig config;
  optimization::SearchHyperparams hyper;
  const auto state = optimization::SearchState::create(config, hyper, 1);
  const auto path = dir.path() / "zero.ckpt";
  write_text_file(path, optimization::save_checkpoint(config, hyper, optimization::OptimizerMode::Darts, state));
  EXPECT_EQ(cmd_derive(path, {}, io.streams()), kInvalidDecode);
  EXPECT_NE(io.out.str().find("removed nodes: 3,4"), std::string::npos) << io.out.str();
  EXPECT_FALSE(fs::exists(dir.path() / "genotype.arch"));
  EXPECT_TRUE(fs::exists(dir.path() / "derive_report.json"));
}

TEST(Commands, DeriveRepairAndFormats) {
  TempDir dir;
  Captured io;
  search_space::SupernetConfig config;
  optimization::SearchHyperparams hyper;
  const auto state = optimization::SearchState::create(config, hyper, 1);
  const auto path = dir.path() / "zero.ckpt";
  write_text_file(path, optimization::save_checkpoint(config, hyper, optimization::OptimizerMode::Darts, state));

  Overrides o = out_to(dir.path() / "arch");
  o.repair = true;
  o.format = ExportFormat::Arch;
  ASSERT_EQ(cmd_derive(path, o, io.streams()), kOk) << io.err.str();
  EXPECT_TRUE(fs::exists(dir.path() / "arch" / "genotype.arch"));
  EXPECT_FALSE(fs::exists(dir.path() / "arch" / "normal.dot"));
  const auto g = derivation::import_genotype(read_text_file(dir.path() / "arch" / "genotype.arch"));
  EXPECT_TRUE(derivation::validate(g.normal).valid);
  EXPECT_TRUE(derivation::validate(g.reduce).valid);

  o.out = (dir.path() / "dot").string();
  o.format = ExportFormat::Dot;
  ASSERT_EQ(cmd_derive(path, o, io.streams()), kOk);
  EXPECT_FALSE(fs::exists(dir.path() / "dot" / "genotype.arch"));
  EXPECT_TRUE(fs::exists(dir.path() / "dot" / "normal.dot"));
  EXPECT_TRUE(fs::exists(dir.path() / "dot" / "reduce.dot"));
  EXPECT_THROW(parse_format("svg"), ConfigError);
}

TEST(Commands, RetrainReportAndLayerCheck) {
  TempDir dir;
  Captured io;
  const auto cfg = write_config(dir.path(), kToy);
  derivation::Genotype g;
  for (auto [cell, kind] : {std::pair{&g.normal, derivation::CellKind::Normal}, {&g.reduce, derivation::CellKind::Reduction}}) {
    cell->n_nodes = 5;
    cell->kind = kind;
    cell->removed.assign(5, false);
    cell->provenance.layers = 2;
    for (int j = 3; j <= 5; ++j) cell->edges.push_back({{j - 1, j}, search_space::OperationKind::Identity});
    cell->edges.push_back({{1, 3}, search_space::OperationKind::SepConv3x3});
  }
  const auto arch = dir.path() / "g.arch";
  write_text_file(arch, derivation::export_genotype(g));

  ASSERT_EQ(cmd_retrain(arch, cfg, out_to(dir.path() / "r1"), io.streams()), kOk) << io.err.str();
  ASSERT_EQ(cmd_retrain(arch, cfg, out_to(dir.path() / "r2"), io.streams()), kOk);
  const auto a = nlohmann::json::parse(read_text_file(dir.path() / "r1" / "retrain_report.json"));
  const auto b = nlohmann::json::parse(read_text_file(dir.path() / "r2" / "retrain_report.json"));
  const double acc = a.at("test_accuracy");
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_GT(a.at("params").get<long>(), 0);
  EXPECT_GT(a.at("flops").get<long>(), 0);
  EXPECT_NEAR(acc, b.at("test_accuracy").get<double>(), 1e-6);

  const auto deeper = write_config(dir.path(), std::string(kToy).replace(std::string(kToy).find("layers = 2"), 10, "layers = 3"), "l3.ini");
  EXPECT_EQ(cmd_retrain(arch, deeper, out_to(dir.path() / "r3"), io.streams()), kInconsistent);
  EXPECT_NE(io.err.str().find("inconsistent layers"), std::string::npos);
  Overrides forced = out_to(dir.path() / "r3");
  forced.force = true;
  EXPECT_EQ(cmd_retrain(arch, deeper, forced, io.streams()), kOk);
}

TEST(Commands, VerifySpacesPasses) {
  TempDir dir;
  Captured io;
  EXPECT_EQ(cmd_verify("spaces", out_to(dir.path()), io.streams()), kOk);
  EXPECT_NE(io.out.str().find("PASS space sizes N=9"), std::string::npos);
  const auto doc = nlohmann::json::parse(read_text_file(dir.path() / "verify_spaces.json"));
  EXPECT_TRUE(doc.at("passed").get<bool>());
  EXPECT_EQ(doc.at("checks").size(), 6u);
  EXPECT_EQ(cmd_verify("everything", {}, io.streams()), kConfigError);
}

TEST(Commands, CompareBaselineReportsBothArchitectures) {
  TempDir dir;
  Captured io;
  const auto cfg = write_config(dir.path(), kToy);
  Overrides o = out_to(dir.path() / "cmp");
  o.repair = true;
  ASSERT_EQ(cmd_compare_baseline(cfg, o, io.streams()), kOk) << io.err.str();
  const auto first = read_text_file(dir.path() / "cmp" / "compare_report.json");
  const auto report = nlohmann::json::parse(first);
  for (const char* label : {"stretchable", "darts_top2"}) {
    ASSERT_TRUE(report.contains(label));
    EXPECT_TRUE(report[label]["retrain"].contains("depth"));
    EXPECT_TRUE(report[label]["retrain"].contains("params"));
  }
  // The baseline keeps exactly two inputs per intermediate node.
  EXPECT_EQ(report["darts_top2"]["normal"]["edge_count"].get<int>(), 6);

  o.out = (dir.path() / "cmp2").string();
  ASSERT_EQ(cmd_compare_baseline(cfg, o, io.streams()), kOk);
  auto second = nlohmann::json::parse(read_text_file(dir.path() / "cmp2" / "compare_report.json"));
  auto strip = [](nlohmann::json r) {
    for (const char* label : {"stretchable", "darts_top2"}) r[label].erase("search_seconds");
    return r;
  };
  EXPECT_EQ(strip(report), strip(second));
}

TEST(Commands, IngestWritesReadableDataset) {
  TempDir dir;
  Captured io;
  const auto images = dir.path() / "img";
  fs::create_directories(images);
  std::string labels = "filename,label\n";
  for (int k = 0; k < 4; ++k) {
    data::Image img{1, 2, 2, std::vector<Real>(4, static_cast<Real>(k) / 4)};
    data::write_netpbm(images / ("p" + std::to_string(k) + ".pgm"), img);
    labels += "p" + std::to_string(k) + ".pgm," + std::to_string(k % 2) + "\n";
  }
  write_text_file(dir.path() / "labels.csv", labels);
  Overrides o;
  o.out = (dir.path() / "ds.txt").string();
  ASSERT_EQ(cmd_ingest(images, dir.path() / "labels.csv", std::nullopt, o, io.streams()), kOk) << io.err.str();
  const auto d = data::load_dataset(read_text_file(dir.path() / "ds.txt"));
  EXPECT_EQ(d.size(), 4u);
  EXPECT_EQ(d.sample_shape, (ad::Shape{1, 2, 2}));

  write_text_file(dir.path() / "labels.csv", labels + "absent.pgm,1\n");
  EXPECT_EQ(cmd_ingest(images, dir.path() / "labels.csv", std::nullopt, o, io.streams()), kConfigError);
  EXPECT_NE(io.err.str().find("absent.pgm"), std::string::npos);
}

TEST(Commands, FileSourceHoldsOutATestSet) {
  TempDir dir;
  Captured io;
  data::SyntheticSpec spec;
  spec.n_samples = 100;
  write_text_file(dir.path() / "pool.txt", data::save_dataset(data::generate(spec, 3)));
  const auto cfg = parse_run_config("[data]\nsource = file\ndataset_file = pool.txt\ntest_fraction = 0.25\n");
  const auto loaded = load_data(cfg.data, cfg.seed, dir.path());
  EXPECT_EQ(loaded.test.size(), 25u);
  EXPECT_EQ(loaded.train.size(), 75u);
  EXPECT_THROW(load_data(parse_run_config("[data]\nsource = file\n").data, 1, dir.path()), ConfigError);
}

#ifdef STRETCHNAS_CLI_PATH
namespace {
int run_binary(const std::string& args) {
  const std::string cmd = std::string("\"") + STRETCHNAS_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST(Binary, ExitCodes) {
  TempDir dir;
  EXPECT_EQ(run_binary(""), kConfigError);
  EXPECT_EQ(run_binary("frobnicate"), kConfigError);
  EXPECT_EQ(run_binary("verify spaces"), kOk);
  EXPECT_EQ(run_binary("verify bogus"), kConfigError);
  EXPECT_EQ(run_binary("search --config \"" + (dir.path() / "missing.ini").string() + "\""), kConfigError);
  write_text_file(dir.path() / "bad.ini", "[search]\nlambda_prime = -1\noptimizer = milenas\n");
  EXPECT_EQ(run_binary("search --config \"" + (dir.path() / "bad.ini").string() + "\""), kConfigError);
  write_text_file(dir.path() / "run.ini", kToy);
  EXPECT_EQ(run_binary("search --config \"" + (dir.path() / "run.ini").string() + "\" --mode sideways"), kConfigError);
  EXPECT_EQ(run_binary("search --config \"" + (dir.path() / "run.ini").string() + "\" --out \"" +
                       (dir.path() / "s").string() + "\" --mode input-pair --opt darts --seed 3"),
            kOk);
  EXPECT_EQ(run_binary("derive \"" + (dir.path() / "s" / "checkpoint.ckpt").string() + "\" --format both"), kOk);
  EXPECT_TRUE(fs::exists(dir.path() / "s" / "genotype.arch"));
  EXPECT_EQ(run_binary("derive \"" + (dir.path() / "s" / "checkpoint.ckpt").string() + "\" --format png"), kConfigError);
}
#endif
