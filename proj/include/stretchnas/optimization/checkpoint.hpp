#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "stretchnas/optimization/search.hpp"

namespace stretchnas::optimization {

inline constexpr std::string_view kCheckpointHeader = "stretchnas-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string hex_bits(double v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
  return buf;
}

inline double from_hex_bits(std::string_view text) {
  std::uint64_t bits = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), bits, 16);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.size() != 16)
    throw ConfigError("malformed hex value '" + std::string(text) + "'");
  return std::bit_cast<double>(bits);
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& fmt) {
  std::string out;
  for (std::size_t k = 0; k < items.size(); ++k) out += (k ? "," : "") + fmt(items[k]);
  return out;
}

/// Stable key-value description of a search setup; also the input of the
/// provenance hash.
inline std::vector<std::pair<std::string, std::string>> describe(const SupernetConfig& config,
                                                                 const SearchHyperparams& hyper, OptimizerMode mode) {
  std::vector<std::string> ops;
  for (auto k : config.ops) ops.emplace_back(search_space::op_name(k));
  std::vector<int> reductions(config.reduction_positions.begin(), config.reduction_positions.end());
  std::vector<std::size_t> shape(config.input_shape.begin(), config.input_shape.end());
  return {
      {"layers", std::to_string(config.layers)},
      {"init_channels", std::to_string(config.init_channels)},
      {"n_classes", std::to_string(config.n_classes)},
      {"n_nodes", std::to_string(config.n_nodes)},
      {"ops", join<std::string>(ops, [](const std::string& s) { return s; })},
      {"reductions", reductions.empty() ? "-" : join<int>(reductions, [](const int& v) { return std::to_string(v); })},
      {"topology", config.topology_mode ? std::string(topology::to_string(*config.topology_mode)) : "none"},
      {"input_shape", join<std::size_t>(shape, [](const std::size_t& v) { return std::to_string(v); })},
      {"optimizer", std::string(to_string(mode))},
      {"lr_w", format_real(hyper.lr_w)},
      {"lr_w_min", format_real(hyper.lr_w_min)},
      {"momentum_w", format_real(hyper.momentum_w)},
      {"weight_decay_w", format_real(hyper.weight_decay_w)},
      {"grad_clip", format_real(hyper.grad_clip)},
      {"lr_arch", format_real(hyper.lr_arch)},
      {"arch_beta1", format_real(hyper.arch_beta1)},
      {"arch_beta2", format_real(hyper.arch_beta2)},
      {"weight_decay_arch", format_real(hyper.weight_decay_arch)},
      {"lambda", format_real(hyper.lambda)},
      {"lambda_prime", format_real(hyper.lambda_prime)},
      {"batch_size", std::to_string(hyper.batch_size)},
      {"epochs", std::to_string(hyper.epochs)},
  };
}

// FNV-1a 64 of the setup description, as 16 hex digits.
inline std::string config_hash(const SupernetConfig& config, const SearchHyperparams& hyper, OptimizerMode mode) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : describe(config, hyper, mode)) {
    for (char c : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Named views of every tensor and optimizer buffer a checkpoint stores.
template <typename State>
auto state_buffers(State& state) {
  using Buffer = std::conditional_t<std::is_const_v<State>, const std::vector<Real>, std::vector<Real>>;
  std::vector<std::pair<std::string, Buffer*>> out;
  const auto weights = state.net.named_parameters();
  for (std::size_t k = 0; k < weights.size(); ++k) out.emplace_back("sgd.v." + weights[k].first, &state.w_opt.velocity().at(k));
  const auto arch = state.arch.named();
  for (std::size_t k = 0; k < arch.size(); ++k) {
    out.emplace_back("adam.m." + arch[k].first, &state.arch_opt.first_moment().at(k));
    out.emplace_back("adam.v." + arch[k].first, &state.arch_opt.second_moment().at(k));
  }
  return out;
}

struct Checkpoint {
  SupernetConfig config;
  SearchHyperparams hyper;
  OptimizerMode mode = OptimizerMode::Darts;
  SearchState state;

  std::string hash() const { return config_hash(config, hyper, mode); }
};

inline std::string save_checkpoint(const SupernetConfig& config, const SearchHyperparams& hyper, OptimizerMode mode,
                                   const SearchState& state) {
  std::ostringstream out;
  out << kCheckpointHeader << " " << kCheckpointVersion << "\n";
  for (const auto& [k, v] : describe(config, hyper, mode)) out << "config " << k << " " << v << "\n";
  out << "epoch " << state.epoch << "\n";
  out << "adam_steps " << state.arch_opt.steps() << "\n";
  out << "rng " << state.rng << "\n";
  auto write_tensor = [&](const std::string& name, std::span<const Real> values, const ad::Shape& shape) {
    out << "tensor " << name << " ";
    for (std::size_t k = 0; k < shape.size(); ++k) out << (k ? "x" : "") << shape[k];
    if (shape.empty()) out << "scalar";
    for (Real v : values) out << " " << hex_bits(static_cast<double>(v));
    out << "\n";
  };
  for (const auto& [name, t] : state.net.named_parameters()) write_tensor("w." + name, t.data(), t.shape());
  for (const auto& [name, t] : state.arch.named()) write_tensor(name, t.data(), t.shape());
  for (const auto& [name, buf] : state_buffers(state)) write_tensor(name, *buf, {buf->size()});
  out << "end\n";
  return out.str();
}

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t k = s.find(sep, start);
    out.push_back(s.substr(start, k == std::string_view::npos ? std::string_view::npos : k - start));
    if (k == std::string_view::npos) break;
    start = k + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view text, const std::string& what) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ConfigError("checkpoint: bad " + what + " '" + std::string(text) + "'");
  return value;
}

inline double parse_real(std::string_view text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(text), &used);
    if (used != text.size()) throw ConfigError("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("checkpoint: bad " + what + " '" + std::string(text) + "'");
  }
}

}  // namespace detail

/// Builds a search setup from the key-value description written by describe().
inline void apply_description(const std::map<std::string, std::string>& kv, SupernetConfig& config,
                              SearchHyperparams& hyper, OptimizerMode& mode) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("checkpoint: missing config key '" + key + "'");
    return it->second;
  };
  config.layers = detail::parse_number<int>(get("layers"), "layers");
  config.init_channels = detail::parse_number<std::size_t>(get("init_channels"), "init_channels");
  config.n_classes = detail::parse_number<std::size_t>(get("n_classes"), "n_classes");
  config.n_nodes = detail::parse_number<int>(get("n_nodes"), "n_nodes");
  config.ops.clear();
  for (auto name : detail::split(get("ops"), ',')) config.ops.push_back(search_space::parse_op(name));
  config.reduction_positions.clear();
  if (get("reductions") != "-")
    for (auto v : detail::split(get("reductions"), ','))
      config.reduction_positions.insert(detail::parse_number<int>(v, "reduction"));
  const std::string& topo = get("topology");
  config.topology_mode = topo == "none" ? std::nullopt : std::optional(topology::parse_topology_mode(topo));
  config.input_shape.clear();
  for (auto v : detail::split(get("input_shape"), ','))
    config.input_shape.push_back(detail::parse_number<std::size_t>(v, "input_shape"));
  mode = parse_optimizer_mode(get("optimizer"));
  hyper.lr_w = detail::parse_real(get("lr_w"), "lr_w");
  hyper.lr_w_min = detail::parse_real(get("lr_w_min"), "lr_w_min");
  hyper.momentum_w = detail::parse_real(get("momentum_w"), "momentum_w");
  hyper.weight_decay_w = detail::parse_real(get("weight_decay_w"), "weight_decay_w");
  hyper.grad_clip = detail::parse_real(get("grad_clip"), "grad_clip");
  hyper.lr_arch = detail::parse_real(get("lr_arch"), "lr_arch");
  hyper.arch_beta1 = detail::parse_real(get("arch_beta1"), "arch_beta1");
  hyper.arch_beta2 = detail::parse_real(get("arch_beta2"), "arch_beta2");
  hyper.weight_decay_arch = detail::parse_real(get("weight_decay_arch"), "weight_decay_arch");
  hyper.lambda = detail::parse_real(get("lambda"), "lambda");
  hyper.lambda_prime = detail::parse_real(get("lambda_prime"), "lambda_prime");
  hyper.batch_size = detail::parse_number<std::size_t>(get("batch_size"), "batch_size");
  hyper.epochs = detail::parse_number<int>(get("epochs"), "epochs");
}

inline Checkpoint load_checkpoint(std::string_view text) {
  Checkpoint ckpt;
  std::map<std::string, std::string> kv;
  std::map<std::string, std::pair<std::string, std::vector<double>>> tensors;
  std::string rng_state;
  long long adam_steps = 0;
  bool header = false, ended = false, have_epoch = false;
  std::size_t line_no = 0;
  for (auto line : detail::split(text, '\n')) {
    ++line_no;
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) -> ConfigError {
      return ConfigError("checkpoint line " + std::to_string(line_no) + ": " + what);
    };
    if (ended) throw fail("content after 'end'");
    const auto space = line.find(' ');
    const std::string_view key = line.substr(0, space);
    const std::string_view rest = space == std::string_view::npos ? std::string_view{} : line.substr(space + 1);
    if (!header) {
      if (key != kCheckpointHeader || rest != std::to_string(kCheckpointVersion))
        throw fail("not a version " + std::to_string(kCheckpointVersion) + " checkpoint");
      header = true;
    } else if (key == "config") {
      const auto sp = rest.find(' ');
      if (sp == std::string_view::npos) throw fail("config entry without value");
      kv[std::string(rest.substr(0, sp))] = std::string(rest.substr(sp + 1));
    } else if (key == "epoch") {
      ckpt.state.epoch = detail::parse_number<int>(rest, "epoch");
      have_epoch = true;
    } else if (key == "adam_steps") {
      adam_steps = detail::parse_number<long long>(rest, "adam_steps");
    } else if (key == "rng") {
      rng_state = std::string(rest);
    } else if (key == "tensor") {
      auto parts = detail::split(rest, ' ');
      if (parts.size() < 2) throw fail("tensor entry without shape");
      std::vector<double> values;
      for (std::size_t k = 2; k < parts.size(); ++k) values.push_back(from_hex_bits(parts[k]));
      tensors[std::string(parts[0])] = {std::string(parts[1]), std::move(values)};
    } else if (key == "end") {
      ended = true;
    } else {
      throw fail("unknown entry '" + std::string(key) + "'");
    }
  }
  if (!header) throw ConfigError("checkpoint: empty file");
  if (!ended) throw ConfigError("checkpoint: truncated (no 'end')");
  if (!have_epoch || rng_state.empty()) throw ConfigError("checkpoint: missing epoch or rng state");

  apply_description(kv, ckpt.config, ckpt.hyper, ckpt.mode);
  ckpt.state = [&] {
    SearchState s = SearchState::create(ckpt.config, ckpt.hyper, 0);
    s.epoch = ckpt.state.epoch;
    return s;
  }();
  std::istringstream rng_in(rng_state);
  rng_in >> ckpt.state.rng;
  if (rng_in.fail()) throw ConfigError("checkpoint: malformed rng state");
  ckpt.state.arch_opt.set_steps(adam_steps);

  auto take = [&](const std::string& name, std::span<Real> dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("checkpoint: missing tensor '" + name + "'");
    if (it->second.second.size() != dst.size())
      throw ConfigError("checkpoint: tensor '" + name + "' has " + std::to_string(it->second.second.size()) +
                        " values, expected " + std::to_string(dst.size()));
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<Real>(it->second.second[k]);
    tensors.erase(it);
  };
  for (auto& [name, t] : ckpt.state.net.named_parameters()) take("w." + name, t.mutable_data());
  for (auto& [name, t] : ckpt.state.arch.named()) take(name, t.mutable_data());
  for (auto& [name, buf] : state_buffers(ckpt.state)) take(name, *buf);
  if (!tensors.empty()) throw ConfigError("checkpoint: unexpected tensor '" + tensors.begin()->first + "'");
  return ckpt;
}

// Independent deep copy of a search state.
inline SearchState clone_state(const SupernetConfig& config, const SearchHyperparams& hyper, OptimizerMode mode,
                               const SearchState& state) {
  return load_checkpoint(save_checkpoint(config, hyper, mode, state)).state;
}

}  // namespace stretchnas::optimization
