#include <CLI11.hpp>

#include "stretchnas/cli/commands.hpp"

namespace cli = stretchnas::cli;

int main(int argc, char** argv) {
  CLI::App app{"Differentiable architecture search with stretchable cells"};
  app.require_subcommand(1);

  cli::Overrides o;
  std::uint64_t seed = 0;
  std::string out, mode, opt, format = "both";
  std::string config, positional, label_file;

  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", seed, "Override the run seed"); };
  auto add_out = [&](CLI::App* c, const char* help) { c->add_option("--out", out, help); };

  auto* search = app.add_subcommand("search", "Search a supernet and checkpoint every epoch");
  search->add_option("--config", config, "Run configuration (INI)")->required();
  add_seed(search);
  add_out(search, "Output directory");
  search->add_option("--mode", mode, "Topology mode: input-pair, output-pair, arbitrary or none");
  search->add_option("--opt", opt, "Optimizer: darts or milenas");

  auto* derive = app.add_subcommand("derive", "Decode a checkpoint into a discrete architecture");
  derive->add_option("checkpoint", positional, "Checkpoint file")->required();
  add_out(derive, "Output directory (default: the checkpoint's directory)");
  derive->add_option("--format", format, "dot, arch or both");
  derive->add_flag("--repair", o.repair, "Give starved nodes their most probable input");

  auto* retrain = app.add_subcommand("retrain", "Train a derived architecture from scratch");
  retrain->add_option("architecture", positional, "Architecture file")->required();
  retrain->add_option("--config", config, "Run configuration (INI)")->required();
  add_seed(retrain);
  add_out(retrain, "Output directory");
  retrain->add_flag("--force", o.force, "Accept a layer count different from the search");

  auto* verify = app.add_subcommand("verify", "Run a property suite: spaces, oracle, regularizer or gradcheck");
  verify->add_option("suite", positional, "Suite name")->required();
  add_out(verify, "Directory for the JSON report");

  auto* compare = app.add_subcommand("compare-baseline", "Stretchable search next to a top-2 DARTS baseline");
  compare->add_option("--config", config, "Run configuration (INI)")->required();
  add_seed(compare);
  add_out(compare, "Output directory");
  compare->add_flag("--repair", o.repair, "Repair starved nodes before retraining");

  auto* ingest = app.add_subcommand("ingest", "Convert PGM/PPM images and labels into a dataset file");
  ingest->add_option("image_dir", positional, "Directory of .pgm/.ppm images");
  ingest->add_option("label_file", label_file, "CSV of filename,label");
  ingest->add_option("--config", config, "Dump the dataset a run configuration describes");
  add_seed(ingest);
  add_out(ingest, "Output dataset file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kConfigError;
  }

  auto set = [](auto& field, const auto& value, CLI::App* c, const char* name) {
    if (c->count(name) > 0) field = value;
  };
  CLI::App* used = app.get_subcommands().front();
  if (used->get_option_no_throw("--seed")) set(o.seed, seed, used, "--seed");
  if (used->get_option_no_throw("--out")) set(o.out, out, used, "--out");
  if (used->get_option_no_throw("--mode")) set(o.mode, mode, used, "--mode");
  if (used->get_option_no_throw("--opt")) set(o.opt, opt, used, "--opt");

  if (used == search) return cli::cmd_search(config, o);
  if (used == derive) {
    const int code = cli::run_guarded([&] { o.format = cli::parse_format(format); return 0; }, std::cerr);
    return code != 0 ? code : cli::cmd_derive(positional, o);
  }
  if (used == retrain) return cli::cmd_retrain(positional, config, o);
  if (used == verify) return cli::cmd_verify(positional, o);
  if (used == compare) return cli::cmd_compare_baseline(config, o);
  std::optional<std::filesystem::path> dir, labels, cfg;
  if (!positional.empty()) dir = positional;
  if (!label_file.empty()) labels = label_file;
  if (!config.empty()) cfg = config;
  return cli::cmd_ingest(dir, labels, cfg, o);
}
