#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stretchnas/data/images.hpp"
#include "stretchnas/data/synthetic.hpp"
#include "stretchnas/derivation/retrain.hpp"
#include "stretchnas/optimization/search.hpp"

namespace stretchnas::cli {

namespace fs = std::filesystem;
using optimization::Dataset;
using optimization::OptimizerMode;
using optimization::SearchHyperparams;
using search_space::SupernetConfig;

enum class DataSource { Synthetic, Images, File };

struct DataSpec {
  DataSource source = DataSource::Synthetic;
  data::SyntheticSpec synthetic;
  std::size_t test_samples = 0;  // synthetic; 0 means n_samples
  std::string image_dir;
  std::string label_file;
  std::string dataset_file;
  std::string test_image_dir;
  std::string test_label_file;
  std::string test_dataset_file;
  double test_fraction = 0.2;  // held out when no explicit test set is given
};

/// Everything a command needs, read from one INI-style file.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "stretchnas-out";
  DataSpec data;
  std::array<double, 3> split{1.0 / 3, 1.0 / 3, 1.0 / 3};
  SupernetConfig supernet;
  bool reductions_given = false;
  SearchHyperparams hyper;
  bool lambda_prime_given = false;
  OptimizerMode optimizer = OptimizerMode::Darts;
  derivation::RetrainOptions retrain;

  // Checks that depend on the final optimizer choice.
  void require_complete() const {
    if (optimizer == OptimizerMode::Milenas && !lambda_prime_given)
      throw ConfigError("missing lambda_prime (required in [search] when optimizer = milenas)");
    hyper.validate();
    if (retrain.epochs < 0 || retrain.batch_size == 0 || retrain.eval_chunk == 0)
      throw ConfigError("[retrain] epochs must be non-negative and batch sizes positive");
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream in(v);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class ValueReader {
 public:
  ValueReader(std::string key, std::string value, std::size_t line)
      : key_(std::move(key)), value_(std::move(value)), line_(line) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("line " + std::to_string(line_) + ": " + key_ + ": " + what);
  }

  double real() const {
    try {
      std::size_t used = 0;
      const double v = std::stod(value_, &used);
      if (used == value_.size() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    fail("expected a number, got '" + value_ + "'");
  }

  long long integer(long long lo = 0) const {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(value_, &used);
      if (used == value_.size() && v >= lo) return v;
    } catch (const std::exception&) {
    }
    fail("expected an integer >= " + std::to_string(lo) + ", got '" + value_ + "'");
  }

  std::size_t count(long long lo = 0) const { return static_cast<std::size_t>(integer(lo)); }
  const std::string& text() const { return value_; }

  template <typename F>
  auto parsed(F&& parse) const {
    try {
      return parse(value_);
    } catch (const ConfigError& e) {
      fail(e.what());
    }
  }

 private:
  std::string key_;
  std::string value_;
  std::size_t line_;
};

using Setter = std::function<void(RunConfig&, const ValueReader&)>;

inline std::map<std::string, std::map<std::string, Setter>> config_schema() {
  using R = RunConfig;
  using V = ValueReader;
  std::map<std::string, std::map<std::string, Setter>> s;
  s["run"] = {
      {"seed", [](R& c, const V& v) { c.seed = static_cast<std::uint64_t>(v.integer()); }},
      {"out", [](R& c, const V& v) { c.out = v.text(); }},
  };
  s["data"] = {
      {"source",
       [](R& c, const V& v) {
         const auto& t = v.text();
         if (t == "synthetic") c.data.source = DataSource::Synthetic;
         else if (t == "images") c.data.source = DataSource::Images;
         else if (t == "file") c.data.source = DataSource::File;
         else v.fail("expected synthetic, images or file");
       }},
      {"generator", [](R& c, const V& v) { c.data.synthetic.generator = v.parsed(data::parse_generator); }},
      {"samples", [](R& c, const V& v) { c.data.synthetic.n_samples = v.count(3); }},
      {"test_samples", [](R& c, const V& v) { c.data.test_samples = v.count(1); }},
      {"noise", [](R& c, const V& v) { c.data.synthetic.noise = v.real(); }},
      {"classes", [](R& c, const V& v) { c.data.synthetic.n_classes = v.count(2); }},
      {"image_size", [](R& c, const V& v) { c.data.synthetic.image_size = v.count(1); }},
      {"image_dir", [](R& c, const V& v) { c.data.image_dir = v.text(); }},
      {"label_file", [](R& c, const V& v) { c.data.label_file = v.text(); }},
      {"dataset_file", [](R& c, const V& v) { c.data.dataset_file = v.text(); }},
      {"test_image_dir", [](R& c, const V& v) { c.data.test_image_dir = v.text(); }},
      {"test_label_file", [](R& c, const V& v) { c.data.test_label_file = v.text(); }},
      {"test_dataset_file", [](R& c, const V& v) { c.data.test_dataset_file = v.text(); }},
      {"test_fraction",
       [](R& c, const V& v) {
         c.data.test_fraction = v.real();
         if (!(c.data.test_fraction > 0 && c.data.test_fraction < 1)) v.fail("must lie in (0, 1)");
       }},
      {"split",
       [](R& c, const V& v) {
         const auto parts = split_list(v.text());
         if (parts.size() != 3) v.fail("expected three comma-separated ratios");
         double total = 0;
         for (std::size_t k = 0; k < 3; ++k) {
           c.split[k] = V("split", parts[k], 0).real();
           if (c.split[k] < 0) v.fail("ratios must be non-negative");
           total += c.split[k];
         }
         if (std::abs(total - 1.0) > 1e-6) v.fail("ratios must sum to 1");
         for (auto& r : c.split) r /= total;
       }},
  };
  s["supernet"] = {
      {"layers", [](R& c, const V& v) { c.supernet.layers = static_cast<int>(v.integer(1)); }},
      {"nodes", [](R& c, const V& v) { c.supernet.n_nodes = static_cast<int>(v.integer(4)); }},
      {"channels", [](R& c, const V& v) { c.supernet.init_channels = v.count(1); }},
      {"topology",
       [](R& c, const V& v) {
         if (v.text() == "none") c.supernet.topology_mode.reset();
         else c.supernet.topology_mode = v.parsed([](const std::string& t) { return topology::parse_topology_mode(t); });
       }},
      {"ops",
       [](R& c, const V& v) {
         c.supernet.ops.clear();
         for (const auto& name : split_list(v.text())) {
           auto op = search_space::try_parse_op(name);
           if (!op) v.fail("unknown operation '" + name + "'");
           c.supernet.ops.push_back(*op);
         }
         if (c.supernet.ops.empty()) v.fail("at least one operation is required");
       }},
      {"reductions",
       [](R& c, const V& v) {
         c.reductions_given = v.text() != "default";
         c.supernet.reduction_positions.clear();
         if (!c.reductions_given || v.text() == "none") return;
         for (const auto& p : split_list(v.text()))
           c.supernet.reduction_positions.insert(static_cast<int>(V("reductions", p, 0).integer()));
       }},
  };
  s["search"] = {
      {"optimizer", [](R& c, const V& v) { c.optimizer = v.parsed(optimization::parse_optimizer_mode); }},
      {"epochs", [](R& c, const V& v) { c.hyper.epochs = static_cast<int>(v.integer()); }},
      {"batch_size", [](R& c, const V& v) { c.hyper.batch_size = v.count(1); }},
      {"lr_w", [](R& c, const V& v) { c.hyper.lr_w = v.real(); }},
      {"lr_w_min", [](R& c, const V& v) { c.hyper.lr_w_min = v.real(); }},
      {"momentum_w", [](R& c, const V& v) { c.hyper.momentum_w = v.real(); }},
      {"weight_decay_w", [](R& c, const V& v) { c.hyper.weight_decay_w = v.real(); }},
      {"grad_clip", [](R& c, const V& v) { c.hyper.grad_clip = v.real(); }},
      {"lr_arch", [](R& c, const V& v) { c.hyper.lr_arch = v.real(); }},
      {"arch_beta1", [](R& c, const V& v) { c.hyper.arch_beta1 = v.real(); }},
      {"arch_beta2", [](R& c, const V& v) { c.hyper.arch_beta2 = v.real(); }},
      {"weight_decay_arch", [](R& c, const V& v) { c.hyper.weight_decay_arch = v.real(); }},
      {"lambda", [](R& c, const V& v) { c.hyper.lambda = v.real(); }},
      {"lambda_prime",
       [](R& c, const V& v) {
         c.hyper.lambda_prime = v.real();
         c.lambda_prime_given = true;
       }},
  };
  s["retrain"] = {
      {"epochs", [](R& c, const V& v) { c.retrain.epochs = static_cast<int>(v.integer()); }},
      {"batch_size", [](R& c, const V& v) { c.retrain.batch_size = v.count(1); }},
      {"lr", [](R& c, const V& v) { c.retrain.lr = v.real(); }},
      {"lr_min", [](R& c, const V& v) { c.retrain.lr_min = v.real(); }},
      {"momentum", [](R& c, const V& v) { c.retrain.momentum = v.real(); }},
      {"weight_decay", [](R& c, const V& v) { c.retrain.weight_decay = v.real(); }},
      {"grad_clip", [](R& c, const V& v) { c.retrain.grad_clip = v.real(); }},
      {"eval_chunk", [](R& c, const V& v) { c.retrain.eval_chunk = v.count(1); }},
  };
  return s;
}

}  // namespace detail

/// Sections of `key = value` lines; '#' and ';' start comments. Unknown
/// sections or keys, repeated keys and malformed lines are errors.
inline RunConfig parse_run_config(const std::string& text) {
  const auto schema = detail::config_schema();
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.erase(comment);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) { throw ConfigError("line " + std::to_string(line_no) + ": " + what); };
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header '" + line + "'");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (!schema.count(section)) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    if (section.empty()) fail("key outside of any section");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& keys = schema.at(section);
    auto it = keys.find(key);
    if (it == keys.end()) fail("unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(section + "." + key).second) fail("duplicate key '" + key + "' in [" + section + "]");
    if (value.empty()) fail("empty value for '" + key + "'");
    it->second(cfg, detail::ValueReader(key, value, line_no));
  }
  if (!cfg.reductions_given) cfg.supernet.reduction_positions = search_space::default_reduction_positions(cfg.supernet.layers);
  for (int p : cfg.supernet.reduction_positions)
    if (p < 0 || p >= cfg.supernet.layers) throw ConfigError("reduction position " + std::to_string(p) + " is outside 0..layers-1");
  return cfg;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw std::runtime_error("cannot write '" + path.string() + "'");
}

inline RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_text_file(path)); }

struct LoadedData {
  Dataset train;  // search splits and retraining draw from this
  Dataset test;
};

/// Training pool and test set described by `spec`. Synthetic test data is a
/// fresh draw with seed + 1000; otherwise an explicit test set or a
/// seeded hold-out fraction is used. Paths are relative to `base`.
inline LoadedData load_data(const DataSpec& spec, std::uint64_t seed, const fs::path& base = {}) {
  auto path = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
  LoadedData out;
  if (spec.source == DataSource::Synthetic) {
    out.train = data::generate(spec.synthetic, seed);
    auto test_spec = spec.synthetic;
    if (spec.test_samples) test_spec.n_samples = spec.test_samples;
    out.test = data::generate(test_spec, seed + 1000);
    return out;
  }
  std::optional<Dataset> test;
  if (spec.source == DataSource::Images) {
    if (spec.image_dir.empty() || spec.label_file.empty())
      throw ConfigError("[data] source = images needs image_dir and label_file");
    out.train = data::ingest_images(path(spec.image_dir), path(spec.label_file));
    if (!spec.test_image_dir.empty()) {
      if (spec.test_label_file.empty()) throw ConfigError("[data] test_image_dir needs test_label_file");
      test = data::ingest_images(path(spec.test_image_dir), path(spec.test_label_file));
    }
  } else {
    if (spec.dataset_file.empty()) throw ConfigError("[data] source = file needs dataset_file");
    out.train = data::load_dataset(read_text_file(path(spec.dataset_file)));
    if (!spec.test_dataset_file.empty()) test = data::load_dataset(read_text_file(path(spec.test_dataset_file)));
  }
  if (test) {
    out.test = std::move(*test);
    if (out.test.sample_shape != out.train.sample_shape) throw ConfigError("test set sample shape differs from training set");
  } else {
    auto parts = optimization::split_dataset(out.train, {1 - spec.test_fraction, spec.test_fraction, 0.0}, seed + 1000);
    out.train = optimization::concat(parts.train, parts.val_beta);  // rounding leftover stays in training
    out.test = std::move(parts.val_alpha);
  }
  return out;
}

// Supernet configuration with the sample shape and class count of `data`.
inline SupernetConfig fitted_supernet(const RunConfig& cfg, const Dataset& data) {
  SupernetConfig c = cfg.supernet;
  c.input_shape = data.sample_shape;
  c.n_classes = data.n_classes;
  return c;
}

}  // namespace stretchnas::cli
