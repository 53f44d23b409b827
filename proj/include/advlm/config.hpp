// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` run configuration. Every subcommand has a fixed key
// schema with defaults; files and flags may only set keys in that schema.

#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "advlm/advsoft.hpp"
#include "advlm/error.hpp"
#include "advlm/model.hpp"
#include "advlm/train.hpp"

namespace advlm {

struct KeySpec {
  std::string name;
  std::string default_value;
  std::string help;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class Settings {
 public:
  explicit Settings(std::vector<KeySpec> schema) : schema_(std::move(schema)) {
    for (const auto& k : schema_) values_[k.name] = k.default_value;
  }

  const std::vector<KeySpec>& schema() const { return schema_; }

  bool has_key(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, std::string_view value) {
    if (!has_key(key)) throw ConfigError("unknown config key '" + key + "'");
    const auto v = detail::trim(value);
    if (v.find_first_of("#\n") != std::string_view::npos) {
      throw ConfigError("value for '" + key + "' may not contain '#' or a newline");
    }
    values_[key] = std::string(v);
    explicit_.insert(key);
  }

  /// True once a file or flag has assigned the key (defaults do not count).
  bool was_set(const std::string& key) const { return explicit_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    const auto& s = get(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + s + "'");
    return v;
  }

  std::uint64_t get_uint(const std::string& key) const {
    const auto& s = get(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  bool get_bool(const std::string& key) const {
    const auto& s = get(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + s + "'");
  }

  AdvConfig get_adv(const std::string& key) const {
    try {
      return AdvConfig::parse(get(key));
    } catch (const Error& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }

  /// Reads `key = value` lines; `#` starts a comment; blank lines are
  /// skipped. A key may appear once per text.
  void merge_text(std::string_view text, const std::string& origin = "config") {
    std::set<std::string> seen;
    std::size_t lineno = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
      ++lineno;
      std::string_view line = raw;
      if (auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const auto where = origin + ":" + std::to_string(lineno);
      if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
      const std::string key(detail::trim(line.substr(0, eq)));
      if (key.empty()) throw ConfigError(where + ": missing key");
      if (!has_key(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
      if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
      set(key, line.substr(eq + 1));
    }
  }

  /// Every key in schema order, one `key = value` per line.
  std::string serialize() const {
    std::string out;
    for (const auto& k : schema_) out += k.name + " = " + values_.at(k.name) + "\n";
    return out;
  }

  bool operator==(const Settings& o) const { return values_ == o.values_; }

 private:
  std::vector<KeySpec> schema_;
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

inline std::vector<KeySpec> train_keys() {
  return {
      {"corpus", "", "training text, one sentence per line (required)"},
      {"valid_corpus", "", "validation text; empty holds out the tail of corpus"},
      {"valid_fraction", "0.1", "share of corpus lines held out when valid_corpus is empty"},
      {"out_dir", "run", "directory for model.ckpt, vocab.tsv and train_log.csv"},
      {"min_count", "1", "drop training words seen fewer times (they become <unk>)"},
      {"embed_dim", "64", "embedding size, tied between input and softmax"},
      {"hidden_dim", "64", "LSTM size of inner layers (last layer uses embed_dim)"},
      {"num_layers", "1", "stacked LSTM layers"},
      {"init_range", "0.1", "uniform init half-width; 0 gives an all-zero model"},
      {"epochs", "20", "passes over the training text; 0 writes the initial model"},
      {"batch_size", "20", "parallel streams during training"},
      {"bptt_len", "35", "truncated backprop window"},
      {"learning_rate", "4.0", "SGD step size"},
      {"grad_clip", "0.25", "global gradient-norm limit"},
      {"seed", "1", "RNG seed for init and noise (falls back to ADVLM_SEED)"},
      {"adv", "adaptive:0.005", "off | fixed:<eps> | adaptive:<alpha>"},
      {"input_noise_start", "0.2", "input-embedding noise std at the first epoch"},
      {"input_noise_end", "0.0", "input-embedding noise std at the last epoch"},
      {"eval_interval", "1", "validate every N epochs (and after the last)"},
      {"eval_batch_size", "10", "parallel streams during validation"},
  };
}

inline std::vector<KeySpec> eval_keys() {
  return {
      {"checkpoint", "run/model.ckpt", "model file written by train"},
      {"vocab", "run/vocab.tsv", "vocabulary written by train"},
      {"corpus", "", "text to score (required)"},
      {"batch_size", "10", "parallel streams"},
      {"bptt_len", "35", "window length"},
  };
}

inline std::vector<KeySpec> analyze_keys() {
  return {
      {"checkpoint", "run/model.ckpt", "model file written by train"},
      {"vocab", "run/vocab.tsv", "vocabulary written by train"},
      {"corpus", "", "text whose context vectors serve as probes (optional)"},
      {"radius", "adaptive:0.005", "recognizability radius: fixed:<eps> | adaptive:<alpha> | off"},
      {"max_contexts", "5000", "context-vector probes kept from corpus"},
      {"random_probes", "1000", "random directions scaled to the median context norm"},
      {"batch_size", "10", "parallel streams when collecting contexts"},
      {"bptt_len", "35", "window length when collecting contexts"},
      {"seed", "1", "RNG seed for random probes (falls back to ADVLM_SEED)"},
      {"out_dir", "run", "directory for report.json and nn_distances.csv"},
  };
}

inline std::vector<KeySpec> verify_keys() {
  return {
      {"seed", "1", "base RNG seed (falls back to ADVLM_SEED)"},
      {"quick", "false", "run a tenth of the instances"},
  };
}

inline LMConfig lm_config_from(const Settings& s, std::size_t vocab_size) {
  LMConfig c;
  c.vocab_size = vocab_size;
  c.embed_dim = s.get_uint("embed_dim");
  c.hidden_dim = s.get_uint("hidden_dim");
  c.num_layers = s.get_uint("num_layers");
  c.init_range = s.get_double("init_range");
  if (c.num_layers == 1 && !s.was_set("hidden_dim")) c.hidden_dim = c.embed_dim;
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline TrainConfig train_config_from(const Settings& s) {
  TrainConfig t;
  t.epochs = s.get_uint("epochs");
  t.batch_size = s.get_uint("batch_size");
  t.bptt_len = s.get_uint("bptt_len");
  t.learning_rate = s.get_double("learning_rate");
  t.grad_clip = s.get_double("grad_clip");
  t.seed = s.get_uint("seed");
  t.adv = s.get_adv("adv");
  t.input_noise_start = s.get_double("input_noise_start");
  t.input_noise_end = s.get_double("input_noise_end");
  t.eval_interval = s.get_uint("eval_interval");
  t.eval_batch_size = s.get_uint("eval_batch_size");
  t.validate();
  return t;
}

}  // namespace advlm
