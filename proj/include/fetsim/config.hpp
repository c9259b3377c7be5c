#pragma once

// Config file handling: INI-style sections mirroring the module split
// (model / privacy / linkage / train), a single key registry driving parsing,
// validation and the generated reference, and "section.key=value" overrides
// for command-line flags. Unknown keys are collected and reported together.

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/fet.hpp"
#include "fetsim/splitavg.hpp"
#include "fetsim/train.hpp"

namespace fetsim {

struct LinkageConfig {
  double key_noise = 0.05;
  KeyMode key_mode = KeyMode::pca;
  long key_dims = 4;
};

struct FullConfig {
  ModelConfig model;
  PrivacySpec privacy;
  TrainConfig train;
  LinkageConfig linkage;
  ModelKind model_kind = ModelKind::fet;
};

namespace detail {

struct ConfigKey {
  std::string section;
  std::string key;
  std::string type_name;
  std::string default_value;
  std::string description;
  std::function<void(FullConfig&, const std::string&)> setter;
};

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("expected boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v) {
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (...) {
    throw ValidationError("expected number, got '" + v + "'");
  }
}

inline long parse_long(const std::string& v) {
  try {
    size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (...) {
    throw ValidationError("expected integer, got '" + v + "'");
  }
}

inline const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> keys = {
      // [model]
      {"model", "hidden_size", "int", "64", "transformer hidden width H",
       [](FullConfig& c, const std::string& v) { c.model.hidden_size = parse_long(v); }},
      {"model", "num_heads", "int", "4", "attention heads (must divide hidden_size)",
       [](FullConfig& c, const std::string& v) { c.model.num_heads = parse_long(v); }},
      {"model", "num_blocks", "int", "6", "encoder and decoder depth",
       [](FullConfig& c, const std::string& v) { c.model.num_blocks = parse_long(v); }},
      {"model", "num_neighbors", "int", "10", "K linked records per secondary party",
       [](FullConfig& c, const std::string& v) { c.model.num_neighbors = parse_long(v); }},
      {"model", "party_dropout", "float", "0", "fraction r_d of secondaries zeroed per step",
       [](FullConfig& c, const std::string& v) { c.model.party_dropout = parse_double(v); }},
      {"model", "pe_avg_frequency", "int", "1",
       "average positional encoders every T_pe epochs (0 = off)",
       [](FullConfig& c, const std::string& v) { c.model.pe_avg_frequency = parse_long(v); }},
      {"model", "aggregator", "sum_avg|concat", "sum_avg", "secondary aggregation mode",
       [](FullConfig& c, const std::string& v) {
         if (v == "sum_avg")
           c.model.aggregator = AggregatorMode::sum_avg;
         else if (v == "concat")
           c.model.aggregator = AggregatorMode::concat;
         else
           throw ValidationError("aggregator must be sum_avg or concat, got '" + v + "'");
       }},
      {"model", "dynamic_mask", "bool", "true", "trainable key-conditioned attention mask",
       [](FullConfig& c, const std::string& v) { c.model.dynamic_mask = parse_bool(v); }},
      {"model", "mask_input", "encoded|raw", "encoded", "what the mask MLP consumes",
       [](FullConfig& c, const std::string& v) {
         if (v == "encoded")
           c.model.mask_input = MaskInput::encoded;
         else if (v == "raw")
           c.model.mask_input = MaskInput::raw;
         else
           throw ValidationError("mask_input must be encoded or raw, got '" + v + "'");
       }},
      {"model", "ffn_multiplier", "int", "2", "feed-forward width as a multiple of hidden_size",
       [](FullConfig& c, const std::string& v) { c.model.ffn_multiplier = parse_long(v); }},
      {"model", "mask_mlp_hidden", "int", "64", "mask MLP hidden width (two layers)",
       [](FullConfig& c, const std::string& v) { c.model.mask_mlp_hidden = parse_long(v); }},
      {"model", "block_dropout", "float", "0", "elementwise dropout inside blocks",
       [](FullConfig& c, const std::string& v) { c.model.block_dropout = parse_double(v); }},

      // [privacy]
      {"privacy", "enabled", "bool", "false", "turn the SplitAvg privacy layer on",
       [](FullConfig& c, const std::string& v) { c.privacy.enabled = parse_bool(v); }},
      {"privacy", "noise_multiplier", "float", "0", "sigma of the distributed Gaussian noise",
       [](FullConfig& c, const std::string& v) { c.privacy.noise_multiplier = parse_double(v); }},
      {"privacy", "clip_norm", "float", "1", "C, per-sample bound of the aggregated sum",
       [](FullConfig& c, const std::string& v) { c.privacy.clip_norm = parse_double(v); }},
      {"privacy", "subsample_rate", "float", "1", "q, secondary candidate sampling rate",
       [](FullConfig& c, const std::string& v) { c.privacy.subsample_rate = parse_double(v); }},
      {"privacy", "delta", "float", "1e-5", "delta of the (eps, delta) guarantee",
       [](FullConfig& c, const std::string& v) { c.privacy.delta = parse_double(v); }},
      {"privacy", "epsilon_cap", "float", "0", "halt training when eps exceeds this (0 = off)",
       [](FullConfig& c, const std::string& v) { c.privacy.epsilon = parse_double(v); }},
      {"privacy", "use_mpc", "bool", "true", "aggregate through simulated secure summation",
       [](FullConfig& c, const std::string& v) { c.privacy.use_mpc = parse_bool(v); }},
      {"privacy", "noise_at_eval", "bool", "true", "apply noise to eval-time representations",
       [](FullConfig& c, const std::string& v) { c.privacy.noise_at_eval = parse_bool(v); }},

      // [linkage]
      {"linkage", "key_noise", "float", "0.05", "Gaussian noise scale added to each party's keys",
       [](FullConfig& c, const std::string& v) { c.linkage.key_noise = parse_double(v); }},
      {"linkage", "key_mode", "pca|random", "pca", "key derivation for synthesize",
       [](FullConfig& c, const std::string& v) {
         if (v == "pca")
           c.linkage.key_mode = KeyMode::pca;
         else if (v == "random")
           c.linkage.key_mode = KeyMode::random;
         else
           throw ValidationError("key_mode must be pca or random, got '" + v + "'");
       }},
      {"linkage", "key_dims", "int", "4", "identifier dimensions",
       [](FullConfig& c, const std::string& v) { c.linkage.key_dims = parse_long(v); }},

      // [train]
      {"train", "model", "fet|solo|top1sim", "fet", "which model to train",
       [](FullConfig& c, const std::string& v) { c.model_kind = model_kind_from_name(v); }},
      {"train", "epochs", "int", "50", "maximum training epochs",
       [](FullConfig& c, const std::string& v) { c.train.epochs = parse_long(v); }},
      {"train", "batch_size", "int", "8192", "training batch size",
       [](FullConfig& c, const std::string& v) { c.train.batch_size = parse_long(v); }},
      {"train", "lr", "float", "1e-3", "learning rate",
       [](FullConfig& c, const std::string& v) { c.train.lr = parse_double(v); }},
      {"train", "weight_decay", "float", "1e-5", "decoupled weight decay",
       [](FullConfig& c, const std::string& v) { c.train.weight_decay = parse_double(v); }},
      {"train", "seed", "int", "0", "global seed",
       [](FullConfig& c, const std::string& v) { c.train.seed = parse_long(v); }},
      {"train", "task", "regression|classification", "regression", "learning task",
       [](FullConfig& c, const std::string& v) {
         if (v == "regression")
           c.train.task = TaskKind::regression;
         else if (v == "classification")
           c.train.task = TaskKind::classification;
         else
           throw ValidationError("task must be regression or classification, got '" + v + "'");
       }},
      {"train", "early_stop_patience", "int", "10", "epochs without val improvement before stop",
       [](FullConfig& c, const std::string& v) { c.train.early_stop_patience = parse_long(v); }},
      {"train", "eval_noise", "bool", "true", "keep DP noise during evaluation",
       [](FullConfig& c, const std::string& v) { c.train.eval_noise = parse_bool(v); }},
      {"train", "optimizer", "sgd|adam", "sgd", "parameter update rule",
       [](FullConfig& c, const std::string& v) {
         if (v == "sgd")
           c.train.optimizer = Optimizer::Kind::sgd;
         else if (v == "adam")
           c.train.optimizer = Optimizer::Kind::adam;
         else
           throw ValidationError("optimizer must be sgd or adam, got '" + v + "'");
       }},
      {"train", "val_fraction", "float", "0.15", "validation share of the primary rows",
       [](FullConfig& c, const std::string& v) { c.train.val_fraction = parse_double(v); }},
      {"train", "test_fraction", "float", "0.15", "test share of the primary rows",
       [](FullConfig& c, const std::string& v) { c.train.test_fraction = parse_double(v); }},
  };
  return keys;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// Applies one "section.key" assignment; throws on unknown keys.
inline void apply_config_value(FullConfig& cfg, const std::string& section, const std::string& key,
                               const std::string& value) {
  for (const auto& entry : detail::config_registry()) {
    if (entry.section == section && entry.key == key) {
      entry.setter(cfg, value);
      return;
    }
  }
  throw ValidationError("unknown config key: " + section + "." + key);
}

// Parses INI text; every offending key is reported in one error.
inline FullConfig parse_config_text(const std::string& text, FullConfig base = {}) {
  FullConfig cfg = base;
  std::vector<std::string> bad;
  std::string section;
  std::istringstream in(text);
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      bad.push_back("line " + std::to_string(lineno) + ": '" + line + "' (expected key = value)");
      continue;
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      apply_config_value(cfg, section, key, value);
    } catch (const ValidationError& e) {
      bad.push_back(section + "." + key + ": " + e.what());
    }
  }
  if (!bad.empty()) {
    std::string msg = "invalid config keys:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ValidationError(msg);
  }
  return cfg;
}

inline FullConfig parse_config_file(const std::string& path, FullConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), base);
}

// Applies "section.key=value" overrides (command-line flags beat file values).
inline void apply_overrides(FullConfig& cfg, const std::vector<std::string>& overrides) {
  std::vector<std::string> bad;
  for (const auto& ov : overrides) {
    const size_t eq = ov.find('=');
    const size_t dot = ov.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      bad.push_back(ov + " (expected section.key=value)");
      continue;
    }
    try {
      apply_config_value(cfg, ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1),
                         detail::trim(ov.substr(eq + 1)));
    } catch (const ValidationError& e) {
      bad.push_back(std::string(e.what()));
    }
  }
  if (!bad.empty()) {
    std::string msg = "invalid config keys:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ValidationError(msg);
  }
}

// The fully resolved config rendered back as INI; stored inside manifests so
// a run can be reproduced from its artifacts alone.
inline std::string render_config(const FullConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  auto boolean = [](bool b) { return b ? "true" : "false"; };
  out << "[model]\n";
  out << "hidden_size = " << cfg.model.hidden_size << "\n";
  out << "num_heads = " << cfg.model.num_heads << "\n";
  out << "num_blocks = " << cfg.model.num_blocks << "\n";
  out << "num_neighbors = " << cfg.model.num_neighbors << "\n";
  out << "party_dropout = " << cfg.model.party_dropout << "\n";
  out << "pe_avg_frequency = " << cfg.model.pe_avg_frequency << "\n";
  out << "aggregator = " << (cfg.model.aggregator == AggregatorMode::concat ? "concat" : "sum_avg")
      << "\n";
  out << "dynamic_mask = " << boolean(cfg.model.dynamic_mask) << "\n";
  out << "mask_input = " << (cfg.model.mask_input == MaskInput::raw ? "raw" : "encoded") << "\n";
  out << "ffn_multiplier = " << cfg.model.ffn_multiplier << "\n";
  out << "mask_mlp_hidden = " << cfg.model.mask_mlp_hidden << "\n";
  out << "block_dropout = " << cfg.model.block_dropout << "\n";
  out << "\n[privacy]\n";
  out << "enabled = " << boolean(cfg.privacy.enabled) << "\n";
  out << "noise_multiplier = " << cfg.privacy.noise_multiplier << "\n";
  out << "clip_norm = " << cfg.privacy.clip_norm << "\n";
  out << "subsample_rate = " << cfg.privacy.subsample_rate << "\n";
  out << "delta = " << cfg.privacy.delta << "\n";
  out << "epsilon_cap = " << cfg.privacy.epsilon << "\n";
  out << "use_mpc = " << boolean(cfg.privacy.use_mpc) << "\n";
  out << "noise_at_eval = " << boolean(cfg.privacy.noise_at_eval) << "\n";
  out << "\n[linkage]\n";
  out << "key_noise = " << cfg.linkage.key_noise << "\n";
  out << "key_mode = " << (cfg.linkage.key_mode == KeyMode::random ? "random" : "pca") << "\n";
  out << "key_dims = " << cfg.linkage.key_dims << "\n";
  out << "\n[train]\n";
  const char* mk = cfg.model_kind == ModelKind::fet ? "fet"
                   : cfg.model_kind == ModelKind::solo ? "solo"
                                                       : "top1sim";
  out << "model = " << mk << "\n";
  out << "epochs = " << cfg.train.epochs << "\n";
  out << "batch_size = " << cfg.train.batch_size << "\n";
  out << "lr = " << cfg.train.lr << "\n";
  out << "weight_decay = " << cfg.train.weight_decay << "\n";
  out << "seed = " << cfg.train.seed << "\n";
  out << "task = " << (cfg.train.task == TaskKind::classification ? "classification" : "regression")
      << "\n";
  out << "early_stop_patience = " << cfg.train.early_stop_patience << "\n";
  out << "eval_noise = " << boolean(cfg.train.eval_noise) << "\n";
  out << "optimizer = " << (cfg.train.optimizer == Optimizer::Kind::adam ? "adam" : "sgd") << "\n";
  out << "val_fraction = " << cfg.train.val_fraction << "\n";
  out << "test_fraction = " << cfg.train.test_fraction << "\n";
  return out.str();
}

// Markdown key reference, generated from the registry (shipped in docs/).
inline std::string config_reference_markdown() {
  std::ostringstream out;
  out << "# Config reference\n\n"
      << "INI-style file with sections `[model]`, `[privacy]`, `[linkage]`, `[train]`.\n"
      << "Command-line `--set section.key=value` overrides file values.\n";
  std::string current;
  for (const auto& e : detail::config_registry()) {
    if (e.section != current) {
      current = e.section;
      out << "\n## [" << current << "]\n\n";
      out << "| key | type | default | description |\n";
      out << "|-----|------|---------|-------------|\n";
    }
    out << "| `" << e.key << "` | " << e.type_name << " | `" << e.default_value << "` | "
        << e.description << " |\n";
  }
  return out.str();
}

}  // namespace fetsim
