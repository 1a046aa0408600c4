#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedpmt/error.hpp"
#include "fedpmt/nn.hpp"

namespace fedpmt {

struct ExperimentConfig {
  // dataset
  std::string dataset_kind = "synthetic";  // synthetic | idx
  int classes = 10;
  std::size_t dim = 20;
  std::size_t samples_per_class = 200;
  std::size_t test_samples_per_class = 50;
  double separation = 3.0;
  std::uint64_t data_seed = 1;
  std::string idx_images, idx_labels, idx_test_images, idx_test_labels;
  // partition
  std::string partition_kind = "iid";  // iid | noniid2
  std::size_t per_device = 100;
  // model
  std::string model_arch;
  // strategy
  std::string strategy = "fedavg";  // fedavg | fedpmt | feddrop
  int fedpmt_option = 1;
  std::size_t num_widths = 1;
  std::optional<std::vector<std::size_t>> layer_counts;
  std::optional<std::vector<double>> feddrop_rates;
  // population
  std::size_t num_devices = 8;
  std::size_t sample_size = 8;
  std::vector<double> kappas = {1.0};
  bool stratified = false;
  // local work
  std::optional<std::size_t> local_steps;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 12;
  double eta = 0.01;
  // timing
  double base_full_time = 10.0;
  std::optional<double> deadline;
  std::optional<std::vector<double>> time_ratios;
  // loop
  std::size_t rounds = 10;
  std::size_t eval_every = 1;
  std::vector<double> accuracy_targets;
  std::uint64_t seed = 1;

  std::vector<std::pair<std::string, std::string>> raw;  // parsed lines, for echo
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) out.push_back(trim(tok));
  return out;
}

inline double to_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad numeric value for " + key + ": '" + v + "'");
  }
}

inline std::uint64_t to_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const unsigned long long d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad integer value for " + key + ": '" + v + "'");
  }
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean value for " + key + ": '" + v + "'");
}

inline std::vector<double> to_double_list(const std::string& v, const std::string& key) {
  std::vector<double> out;
  for (const auto& t : split(v, ',')) out.push_back(to_double(t, key));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

inline std::vector<std::size_t> to_u64_list(const std::string& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& t : split(v, ','))
    out.push_back(static_cast<std::size_t>(to_u64(t, key)));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

}  // namespace detail

// Layer-list syntax: comma-separated tokens, first one `input:...`.
//   input:D | input:C:H:W | dense:IN:OUT | conv:IN:OUT:K[:STRIDE[:PAD]]
//   pool:W | relu | flatten | softmax:CLASSES
inline ModelSpec parse_model_arch(const std::string& arch) {
  const auto tokens = detail::split(arch, ',');
  if (tokens.empty()) throw ConfigError("model.arch is empty");
  ModelSpec spec;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto f = detail::split(tokens[i], ':');
    const std::string& kind = f[0];
    const auto want = [&](std::size_t lo, std::size_t hi) {
      if (f.size() - 1 < lo || f.size() - 1 > hi)
        throw ConfigError("bad layer token '" + tokens[i] + "'");
    };
    const auto num = [&](std::size_t j) {
      return static_cast<std::size_t>(detail::to_u64(f[j], "model.arch"));
    };
    if (kind == "input") {
      if (i != 0) throw ConfigError("input:... must be the first token");
      want(1, 3);
      for (std::size_t j = 1; j < f.size(); ++j) spec.input_shape.push_back(num(j));
    } else if (kind == "dense") {
      want(2, 2);
      spec.layers.push_back(Dense{num(1), num(2)});
    } else if (kind == "conv") {
      want(3, 5);
      Conv2d c;
      c.in_channels = num(1);
      c.out_channels = num(2);
      c.kernel = num(3);
      c.stride = f.size() > 4 ? num(4) : 1;
      c.padding = f.size() > 5 ? num(5) : 0;
      spec.layers.push_back(c);
    } else if (kind == "pool") {
      want(1, 1);
      spec.layers.push_back(MaxPool2d{num(1)});
    } else if (kind == "relu") {
      want(0, 0);
      spec.layers.push_back(Relu{});
    } else if (kind == "flatten") {
      want(0, 0);
      spec.layers.push_back(Flatten{});
    } else if (kind == "softmax") {
      want(1, 1);
      spec.layers.push_back(SoftmaxXent{num(1)});
    } else {
      throw ConfigError("unknown layer kind '" + kind + "'");
    }
  }
  if (spec.input_shape.empty()) throw ConfigError("model.arch must start with input:...");
  spec.validate();
  return spec;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value: '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty()) throw ConfigError("empty key or value: '" + line + "'");
    cfg.raw.emplace_back(key, val);

    using namespace detail;
    if (key == "dataset.kind") {
      if (val != "synthetic" && val != "idx") throw ConfigError("dataset.kind must be synthetic|idx");
      cfg.dataset_kind = val;
    } else if (key == "dataset.classes") cfg.classes = static_cast<int>(to_u64(val, key));
    else if (key == "dataset.dim") cfg.dim = to_u64(val, key);
    else if (key == "dataset.samples_per_class") cfg.samples_per_class = to_u64(val, key);
    else if (key == "dataset.test_samples_per_class") cfg.test_samples_per_class = to_u64(val, key);
    else if (key == "dataset.separation") cfg.separation = to_double(val, key);
    else if (key == "dataset.seed") cfg.data_seed = to_u64(val, key);
    else if (key == "dataset.images") cfg.idx_images = val;
    else if (key == "dataset.labels") cfg.idx_labels = val;
    else if (key == "dataset.test_images") cfg.idx_test_images = val;
    else if (key == "dataset.test_labels") cfg.idx_test_labels = val;
    else if (key == "partition.kind") {
      if (val != "iid" && val != "noniid2") throw ConfigError("partition.kind must be iid|noniid2");
      cfg.partition_kind = val;
    } else if (key == "partition.per_device") cfg.per_device = to_u64(val, key);
    else if (key == "model.arch") cfg.model_arch = val;
    else if (key == "strategy") {
      if (val != "fedavg" && val != "fedpmt" && val != "feddrop")
        throw ConfigError("strategy must be fedavg|fedpmt|feddrop");
      cfg.strategy = val;
    } else if (key == "fedpmt.option") {
      cfg.fedpmt_option = static_cast<int>(to_u64(val, key));
      if (cfg.fedpmt_option != 1 && cfg.fedpmt_option != 2)
        throw ConfigError("fedpmt.option must be 1 or 2");
    } else if (key == "fedpmt.widths") cfg.num_widths = to_u64(val, key);
    else if (key == "fedpmt.layer_counts") cfg.layer_counts = to_u64_list(val, key);
    else if (key == "feddrop.rates") cfg.feddrop_rates = to_double_list(val, key);
    else if (key == "devices.count") cfg.num_devices = to_u64(val, key);
    else if (key == "devices.sample") cfg.sample_size = to_u64(val, key);
    else if (key == "devices.kappas") cfg.kappas = to_double_list(val, key);
    else if (key == "devices.stratified") cfg.stratified = to_bool(val, key);
    else if (key == "local.steps") cfg.local_steps = to_u64(val, key);
    else if (key == "local.epochs") cfg.local_epochs = to_u64(val, key);
    else if (key == "local.batch") cfg.batch_size = to_u64(val, key);
    else if (key == "eta") cfg.eta = to_double(val, key);
    else if (key == "time.base_full") cfg.base_full_time = to_double(val, key);
    else if (key == "time.deadline") cfg.deadline = to_double(val, key);
    else if (key == "time.ratios") cfg.time_ratios = to_double_list(val, key);
    else if (key == "rounds") cfg.rounds = to_u64(val, key);
    else if (key == "eval_every") cfg.eval_every = to_u64(val, key);
    else if (key == "eval.targets") cfg.accuracy_targets = to_double_list(val, key);
    else if (key == "seed") cfg.seed = to_u64(val, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  if (cfg.model_arch.empty()) throw ConfigError("model.arch is required");
  if (cfg.rounds == 0) throw ConfigError("rounds must be positive");
  if (cfg.sample_size > cfg.num_devices)
    throw ConfigError("devices.sample must not exceed devices.count");
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace fedpmt
