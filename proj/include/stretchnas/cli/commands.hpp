#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include <json.hpp>

#include "stretchnas/cli/config.hpp"
#include "stretchnas/cli/svg.hpp"
#include "stretchnas/derivation/io.hpp"
#include "stretchnas/optimization/checkpoint.hpp"
#include "stretchnas/verify/suites.hpp"

namespace stretchnas::cli {

using json = nlohmann::ordered_json;
using ad::Real;

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kNumericError = 3,
  kInvalidDecode = 4,
  kInconsistent = 5,
};

struct InvalidDecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ExportFormat { Dot, Arch, Both };

inline ExportFormat parse_format(std::string_view t) {
  if (t == "dot") return ExportFormat::Dot;
  if (t == "arch") return ExportFormat::Arch;
  if (t == "both") return ExportFormat::Both;
  throw ConfigError("unknown format '" + std::string(t) + "' (expected dot, arch or both)");
}

/// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;  // topology mode
  std::optional<std::string> opt;   // optimizer
  bool repair = false;
  bool force = false;
  ExportFormat format = ExportFormat::Both;
};

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

/// Maps failures to the documented exit codes and prints the diagnostic.
inline int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const InvalidDecodeError& e) {
    err << "invalid architecture: " << e.what() << "\n";
    return kInvalidDecode;
  } catch (const ConsistencyError& e) {
    err << "error: " << e.what() << "\n";
    return kInconsistent;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline RunConfig resolve_config(const fs::path& path, const Overrides& o) {
  RunConfig cfg = load_run_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.mode) {
    if (*o.mode == "none") cfg.supernet.topology_mode.reset();
    else cfg.supernet.topology_mode = topology::parse_topology_mode(*o.mode);
  }
  if (o.opt) cfg.optimizer = optimization::parse_optimizer_mode(*o.opt);
  cfg.require_complete();
  return cfg;
}

inline json cell_json(const derivation::DerivedArchitecture& a) {
  const auto report = derivation::validate(a);
  json removed = json::array(), starved = json::array(), edges = json::array();
  for (int k = kInputNodes + 1; k <= a.n_nodes; ++k)
    if (a.is_removed(k)) removed.push_back(k);
  for (int k : report.starved) starved.push_back(k);
  for (const auto& e : a.edges)
    if (derivation::feeds_kept(a, e)) edges.push_back({e.edge.from, e.edge.to, search_space::op_name(e.op)});
  return {{"valid", report.valid}, {"edges", edges}, {"edge_count", edges.size()}, {"removed", removed},
          {"starved", starved},    {"depth", derivation::cell_depth(a)}};
}

inline std::string cell_summary(const derivation::DerivedArchitecture& a) {
  const auto report = derivation::validate(a);
  std::string removed;
  for (int k = kInputNodes + 1; k <= a.n_nodes; ++k)
    if (a.is_removed(k)) removed += (removed.empty() ? "" : ",") + std::to_string(k);
  return std::string(derivation::to_string(a.kind)) + ": " + std::to_string(optimization::kept_edge_count(a)) +
         " edges, removed nodes: " + (removed.empty() ? "none" : removed) + ", depth " +
         std::to_string(derivation::cell_depth(a)) + ", " + report.summary();
}

namespace detail {

inline json metrics_json(const optimization::EpochMetrics& m) {
  return {{"epoch", m.epoch},       {"L_tr", m.train_loss},
          {"L_val", m.val_loss},    {"r_beta", m.r_beta},
          {"beta_entropy_mean", m.beta_entropy_mean}, {"decoded_edge_count", m.decoded_edge_count}};
}

inline json arch_variables_json(const search_space::ArchitectureVariables& arch) {
  json out = json::object();
  for (const auto& [name, t] : arch.named()) {
    json scores = json::array(), probs = json::array();
    for (Real v : t.data()) scores.push_back(static_cast<double>(v));
    for (Real v : derivation::probabilities(t)) probs.push_back(static_cast<double>(v));
    out[name] = {{"scores", scores}, {"probabilities", probs}};
  }
  return out;
}

struct SearchOutcome {
  optimization::SearchState state;
  std::vector<optimization::EpochMetrics> metrics;
  SupernetConfig config;
  std::string hash;
  double seconds = 0;
};

// Runs a search writing checkpoints, metrics and plots under `dir`.
inline SearchOutcome run_search(const RunConfig& cfg, const SupernetConfig& config,
                                const optimization::SplitDatasets& splits, const fs::path& dir, Streams io) {
  fs::create_directories(dir / "checkpoints");
  SearchOutcome result;
  result.config = config;
  result.hash = optimization::config_hash(config, cfg.hyper, cfg.optimizer);
  result.state = optimization::SearchState::create(config, cfg.hyper, cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  optimization::SearchCallbacks callbacks;
  callbacks.on_epoch = [&](const optimization::EpochMetrics& m, const optimization::SearchState& s) {
    result.metrics.push_back(m);
    const std::string ckpt = optimization::save_checkpoint(config, cfg.hyper, cfg.optimizer, s);
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", m.epoch);
    write_text_file(dir / "checkpoints" / name, ckpt);
    write_text_file(dir / "checkpoint.ckpt", ckpt);
    write_text_file(dir / "metrics.csv", optimization::metrics_csv(result.metrics));
    char line[200];
    std::snprintf(line, sizeof line, "epoch %d/%d  L_tr %.4g  L_val %.4g  r %.3g  H %.4g  edges %zu\n", m.epoch,
                  cfg.hyper.epochs, m.train_loss, m.val_loss, m.r_beta, m.beta_entropy_mean, m.decoded_edge_count);
    io.out << line << std::flush;
  };
  callbacks.on_abort = [&](const optimization::SearchState& s) {
    const auto path = dir / "checkpoint_abort.ckpt";
    write_text_file(path, optimization::save_checkpoint(config, cfg.hyper, cfg.optimizer, s));
    io.err << "state at the failing epoch saved to " << path.string() << "\n";
  };
  write_text_file(dir / "metrics.csv", optimization::metrics_csv({}));
  optimization::search_loop(result.state, splits, cfg.hyper, cfg.optimizer, callbacks);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text_file(dir / "metrics.svg", metrics_svg(result.metrics));
  write_text_file(dir / "arch_variables.json", arch_variables_json(result.state.arch).dump(2) + "\n");
  return result;
}

inline json retrain_json(const derivation::RetrainResult& r, const derivation::RetrainOptions& o) {
  return {{"test_accuracy", r.test_accuracy},
          {"train_accuracy", r.train_accuracy},
          {"params", r.cost.params},
          {"flops", r.cost.flops},
          {"depth", {{"normal", r.depth_normal}, {"reduce", r.depth_reduce}}},
          {"epochs", o.epochs},
          {"seed", o.seed},
          {"epoch_losses", r.epoch_losses}};
}

inline derivation::RetrainOptions retrain_options(const RunConfig& cfg, bool force) {
  auto o = cfg.retrain;
  o.seed = cfg.seed;
  o.force = force;
  return o;
}

// Decoded genotype; with `repair`, starved nodes receive their most probable
// input. Throws InvalidDecodeError if a cell stays invalid.
inline derivation::Genotype derive_or_throw(const optimization::SearchState& state,
                                            const derivation::Provenance& provenance, bool repair, Streams io) {
  auto genotype = optimization::current_genotype(state, provenance);
  const auto& ops = state.net.config().ops;
  const auto& arch = state.arch;
  for (auto* cell : {&genotype.normal, &genotype.reduce}) {
    if (derivation::validate(*cell).valid || !repair || !arch.beta_normal) continue;
    const bool red = cell->kind == derivation::CellKind::Reduction;
    *cell = derivation::repair(*cell, red ? arch.alpha_reduce : arch.alpha_normal,
                               red ? *arch.beta_reduce : *arch.beta_normal, ops);
    io.out << "repaired " << derivation::to_string(cell->kind) << " cell\n";
  }
  return genotype;
}

inline void require_valid(const derivation::Genotype& g) {
  std::string problems;
  for (const auto* cell : {&g.normal, &g.reduce}) {
    const auto report = derivation::validate(*cell);
    if (!report.valid) problems += std::string(problems.empty() ? "" : "; ") + std::string(derivation::to_string(cell->kind)) + " cell " + report.summary();
  }
  if (!problems.empty()) throw InvalidDecodeError(problems);
}

}  // namespace detail

/// search: checkpoints every epoch, metrics CSV and SVG, final variables.
inline int cmd_search(const fs::path& config_path, const Overrides& o, Streams io = {}) {
  return run_guarded(
      [&] {
        const RunConfig cfg = resolve_config(config_path, o);
        const auto data = load_data(cfg.data, cfg.seed, config_path.parent_path());
        const auto config = fitted_supernet(cfg, data.train);
        const auto splits = optimization::split_dataset(data.train, cfg.split, cfg.seed);
        const fs::path dir = cfg.out;
        io.out << "search: " << splits.train.size() << "/" << splits.val_alpha.size() << "/" << splits.val_beta.size()
               << " samples, optimizer " << optimization::to_string(cfg.optimizer) << ", topology "
               << (config.topology_mode ? topology::to_string(*config.topology_mode) : "none") << ", config "
               << optimization::config_hash(config, cfg.hyper, cfg.optimizer) << "\n";
        const auto result = detail::run_search(cfg, config, splits, dir, io);
        json report = {{"config_hash", result.hash},
                       {"optimizer", optimization::to_string(cfg.optimizer)},
                       {"seed", cfg.seed},
                       {"epochs", result.metrics.size()},
                       {"seconds", result.seconds},
                       {"final", result.metrics.empty() ? json(nullptr) : detail::metrics_json(result.metrics.back())},
                       {"checkpoint", (dir / "checkpoint.ckpt").string()}};
        write_text_file(dir / "search_report.json", report.dump(2) + "\n");
        io.out << "wrote " << (dir / "checkpoint.ckpt").string() << ", metrics.csv, metrics.svg, arch_variables.json\n";
        return int{kOk};
      },
      io.err);
}

/// derive: architecture file and/or DOT plus a validity report.
inline int cmd_derive(const fs::path& checkpoint_path, const Overrides& o, Streams io = {}) {
  return run_guarded(
      [&] {
        const auto ckpt = optimization::load_checkpoint(read_text_file(checkpoint_path));
        const derivation::Provenance provenance{ckpt.config.layers, ckpt.hash(), ckpt.state.epoch};
        const auto genotype = detail::derive_or_throw(ckpt.state, provenance, o.repair, io);
        const fs::path dir = o.out ? fs::path(*o.out) : checkpoint_path.parent_path();
        fs::create_directories(dir.empty() ? "." : dir);
        for (const auto* cell : {&genotype.normal, &genotype.reduce}) io.out << cell_summary(*cell) << "\n";
        const bool valid = derivation::validate(genotype.normal).valid && derivation::validate(genotype.reduce).valid;
        json report = {{"checkpoint", checkpoint_path.string()},
                       {"config_hash", provenance.config_hash},
                       {"epoch", provenance.epoch},
                       {"layers", provenance.layers},
                       {"valid", valid},
                       {"normal", cell_json(genotype.normal)},
                       {"reduce", cell_json(genotype.reduce)}};
        write_text_file(dir / "derive_report.json", report.dump(2) + "\n");
        detail::require_valid(genotype);
        if (o.format != ExportFormat::Dot) write_text_file(dir / "genotype.arch", derivation::export_genotype(genotype));
        if (o.format != ExportFormat::Arch) {
          write_text_file(dir / "normal.dot", derivation::export_dot(genotype.normal));
          write_text_file(dir / "reduce.dot", derivation::export_dot(genotype.reduce));
        }
        io.out << "wrote derived architecture to " << dir.string() << "\n";
        return int{kOk};
      },
      io.err);
}

/// retrain: fresh weights on the derived genotype; JSON accuracy report.
inline int cmd_retrain(const fs::path& arch_path, const fs::path& config_path, const Overrides& o, Streams io = {}) {
  return run_guarded(
      [&] {
        const RunConfig cfg = resolve_config(config_path, o);
        const auto genotype = derivation::import_genotype(read_text_file(arch_path));
        detail::require_valid(genotype);
        const auto data = load_data(cfg.data, cfg.seed, config_path.parent_path());
        const auto config = fitted_supernet(cfg, data.train);
        const auto options = detail::retrain_options(cfg, o.force);
        const auto result = derivation::retrain_from_scratch(genotype, config, data.train, data.test, options);
        json report = detail::retrain_json(result, options);
        report["architecture"] = arch_path.string();
        report["layers"] = config.layers;
        write_text_file(fs::path(cfg.out) / "retrain_report.json", report.dump(2) + "\n");
        io.out << report.dump(2) << "\n";
        return int{kOk};
      },
      io.err);
}

/// verify: one line per property, JSON report under --out; exit 0 iff all pass.
inline int cmd_verify(const std::string& suite_name, const Overrides& o, Streams io = {}) {
  return run_guarded(
      [&] {
        const auto suite = verify::parse_suite(suite_name);
        const auto report = verify::run_suite(suite, verify::thread_budget());
        json checks = json::array();
        for (const auto& c : report.checks) {
          char secs[32];
          std::snprintf(secs, sizeof secs, "%.2fs", c.seconds);
          io.out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << " (" << secs << ")\n";
          checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}, {"seconds", c.seconds}});
        }
        json doc = {{"suite", verify::to_string(suite)}, {"passed", report.passed()}, {"checks", checks}};
        if (o.out) write_text_file(fs::path(*o.out) / ("verify_" + std::string(verify::to_string(suite)) + ".json"),
                                   doc.dump(2) + "\n");
        io.out << verify::to_string(suite) << ": " << (report.passed() ? "all passed" : "FAILED") << "\n";
        return report.passed() ? int{kOk} : int{kFailure};
      },
      io.err);
}

/// compare-baseline: hand-crafted DARTS search (zero op, top-2 decode) next
/// to the stretchable search on the same splits and seed, both retrained.
inline int cmd_compare_baseline(const fs::path& config_path, const Overrides& o, Streams io = {}) {
  return run_guarded(
      [&] {
        RunConfig cfg = resolve_config(config_path, o);
        if (!cfg.supernet.topology_mode) cfg.supernet.topology_mode = topology::TopologyMode::Arbitrary;
        const auto data = load_data(cfg.data, cfg.seed, config_path.parent_path());
        const auto splits = optimization::split_dataset(data.train, cfg.split, cfg.seed);
        const fs::path dir = cfg.out;
        const auto options = detail::retrain_options(cfg, false);

        auto stretch_config = fitted_supernet(cfg, data.train);
        std::erase(stretch_config.ops, search_space::OperationKind::Zero);
        auto base_config = stretch_config;
        base_config.topology_mode.reset();
        base_config.ops.push_back(search_space::OperationKind::Zero);

        json report = json::object();
        bool all_valid = true;
        for (const auto& [label, config] : {std::pair{"stretchable", stretch_config}, std::pair{"darts_top2", base_config}}) {
          io.out << "== " << label << " search\n";
          const auto search = detail::run_search(cfg, config, splits, dir / label, io);
          const derivation::Provenance provenance{config.layers, search.hash, search.state.epoch};
          const auto genotype = detail::derive_or_throw(search.state, provenance, o.repair, io);
          for (const auto* cell : {&genotype.normal, &genotype.reduce}) io.out << cell_summary(*cell) << "\n";
          json entry = {{"config_hash", search.hash},
                        {"search_seconds", search.seconds},
                        {"normal", cell_json(genotype.normal)},
                        {"reduce", cell_json(genotype.reduce)}};
          const bool valid = derivation::validate(genotype.normal).valid && derivation::validate(genotype.reduce).valid;
          entry["valid"] = valid;
          if (valid) {
            write_text_file(dir / label / "genotype.arch", derivation::export_genotype(genotype));
            const auto r = derivation::retrain_from_scratch(genotype, config, data.train, data.test, options);
            entry["retrain"] = detail::retrain_json(r, options);
            io.out << label << ": test accuracy " << r.test_accuracy << ", params " << r.cost.params << ", depth "
                   << r.depth_normal << "/" << r.depth_reduce << "\n";
          } else {
            all_valid = false;
          }
          report[label] = entry;
        }
        report["seed"] = cfg.seed;
        write_text_file(dir / "compare_report.json", report.dump(2) + "\n");
        io.out << "wrote " << (dir / "compare_report.json").string() << "\n";
        if (!all_valid) throw InvalidDecodeError("a derived architecture is invalid; see compare_report.json");
        return int{kOk};
      },
      io.err);
}

/// ingest: PGM/PPM directory plus label CSV, or the dataset a config
/// describes, written as a dataset file.
inline int cmd_ingest(const std::optional<fs::path>& image_dir, const std::optional<fs::path>& label_file,
                      const std::optional<fs::path>& config_path, const Overrides& o, Streams io = {}) {
  return run_guarded(
      [&] {
        Dataset d;
        if (image_dir) {
          if (!label_file) throw ConfigError("ingest needs a label file next to the image directory");
          d = data::ingest_images(*image_dir, *label_file);
        } else if (config_path) {
          RunConfig cfg = load_run_config(*config_path);
          if (o.seed) cfg.seed = *o.seed;
          d = load_data(cfg.data, cfg.seed, config_path->parent_path()).train;
        } else {
          throw ConfigError("ingest needs an image directory and label file, or --config");
        }
        const fs::path path = o.out ? fs::path(*o.out) : fs::path("dataset.txt");
        write_text_file(path, data::save_dataset(d));
        io.out << "ingested " << d.size() << " samples of shape " << ad::shape_str(d.sample_shape) << ", "
               << d.n_classes << " classes -> " << path.string() << "\n";
        return int{kOk};
      },
      io.err);
}

}  // namespace stretchnas::cli
