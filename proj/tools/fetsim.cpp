// fetsim command line: ties synthesis, linkage, training, evaluation,
// ablations and privacy accounting into reproducible runs. Every command that
// writes artifacts drops a manifest.json next to them; a run can be replayed
// from its manifest alone.
//
// Exit codes: 0 success, 2 validation error, 3 privacy budget halt,
// 4 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "fetsim/config.hpp"
#include "fetsim/data.hpp"
#include "fetsim/fet.hpp"
#include "fetsim/linkage.hpp"
#include "fetsim/manifest.hpp"
#include "fetsim/train.hpp"

namespace fs = std::filesystem;
using namespace fetsim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitBudget = 3;
constexpr int kExitNumeric = 4;

struct CommonArgs {
  std::string config_path;
  std::string manifest_path;
  std::vector<std::string> overrides;
  long seed_flag = -1;
};

FullConfig resolve_config(const CommonArgs& args) {
  FullConfig cfg;
  if (const char* env = std::getenv("FETSIM_SEED"))
    cfg.train.seed = std::strtoull(env, nullptr, 10);
  if (!args.manifest_path.empty()) {
    RunManifest m = RunManifest::read(args.manifest_path);
    cfg = parse_config_text(m.config_text, cfg);
  }
  if (!args.config_path.empty()) cfg = parse_config_file(args.config_path, cfg);
  apply_overrides(cfg, args.overrides);
  if (args.seed_flag >= 0) cfg.train.seed = static_cast<uint64_t>(args.seed_flag);
  return cfg;
}

Table table_from_csv(const std::string& path) {
  CsvDataset csv = read_party_csv(path);
  if (csv.labels.empty())
    throw ValidationError("input CSV " + path + " is missing the required column: label");
  Table t;
  t.features = std::move(csv.features);
  t.labels = std::move(csv.labels);
  t.feature_names = std::move(csv.feature_names);
  return t;
}

Table load_table(const std::string& input_csv, long digits, uint64_t seed) {
  if (digits > 0) {
    Rng rng = Rng(seed).stream(0x646967697473ULL);
    return make_digits(digits, rng);
  }
  if (input_csv.empty())
    throw ValidationError("either --input or --digits is required");
  return table_from_csv(input_csv);
}

std::vector<PartyDataset> load_party_dir(const std::string& dir) {
  std::vector<PartyDataset> parties;
  for (long p = 0;; ++p) {
    const std::string path = dir + "/party_" + std::to_string(p) + ".csv";
    if (!fs::exists(path)) break;
    CsvDataset csv = read_party_csv(path);
    PartyDataset party;
    party.keys = std::move(csv.keys);
    party.features = std::move(csv.features);
    party.labels = std::move(csv.labels);
    party.feature_names = std::move(csv.feature_names);
    party.role = p == 0 ? PartyRole::primary : PartyRole::secondary;
    parties.push_back(std::move(party));
  }
  if (parties.empty())
    throw ValidationError("no party_0.csv found under " + dir);
  if (parties[0].labels.empty())
    throw ValidationError(dir + "/party_0.csv is missing the required column: label");
  for (size_t p = 1; p < parties.size(); ++p)
    if (parties[p].keys.cols != parties[0].keys.cols)
      throw ValidationError("key dimensions disagree between party files");
  return parties;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ','))
    if (!cell.empty()) out.push_back(detail::parse_double(cell));
  if (out.empty()) throw ValidationError("empty grid: '" + text + "'");
  return out;
}

// ---------------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------------

int cmd_synthesize(const CommonArgs& common, const std::string& input_csv, long digits,
                   long parties_total, double key_noise_flag, const std::string& out_dir) {
  FullConfig cfg = resolve_config(common);
  if (key_noise_flag >= 0.0) cfg.linkage.key_noise = key_noise_flag;
  Table table = load_table(input_csv, digits, cfg.train.seed);

  Rng rng = Rng(cfg.train.seed).stream(0x73796e7468ULL);
  auto parties = split_features(table, parties_total, cfg.linkage.key_noise, rng,
                                cfg.linkage.key_mode, cfg.linkage.key_dims);

  fs::create_directories(out_dir);
  RunManifest manifest;
  manifest.command = "synthesize";
  manifest.config_text = render_config(cfg);
  manifest.seed = cfg.train.seed;
  if (!input_csv.empty()) manifest.add_input(input_csv);
  for (size_t p = 0; p < parties.size(); ++p) {
    const std::string path = out_dir + "/party_" + std::to_string(p) + ".csv";
    write_party_csv(path, parties[p].keys, parties[p].features, parties[p].feature_names,
                    p == 0 ? &parties[p].labels : nullptr);
    manifest.outputs.push_back(path);
  }
  manifest.write(out_dir + "/manifest.json");
  std::cout << "wrote " << parties.size() << " party files under " << out_dir << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// link
// ---------------------------------------------------------------------------

int cmd_link(const CommonArgs& common, const std::string& data_dir, long neighbors, double rate,
             long epoch, const std::string& out_path) {
  FullConfig cfg = resolve_config(common);
  auto parties = load_party_dir(data_dir);
  if (parties.size() < 2) throw ValidationError("link requires at least one secondary party");

  LinkageIndex idx;
  idx.seed = cfg.train.seed;
  idx.subsample_rate = rate;
  idx.k_neighbors = static_cast<uint32_t>(neighbors);
  idx.epoch = static_cast<uint32_t>(epoch);
  idx.batch_rows = parties[0].size();
  for (size_t p = 1; p < parties.size(); ++p) {
    Rng sub = Rng(cfg.train.seed).stream(0x73756273ULL, p, epoch, 0);
    const auto pool = subsample_indices(parties[p].size(), rate, sub, neighbors);
    const DataMatrix cand = parties[p].keys.select_rows(pool);
    auto local = knn_link(parties[0].keys, cand, neighbors);
    for (auto& id : local) id = pool[id];
    idx.neighbor_ids.push_back(std::move(local));
  }
  write_linkage_index(out_path, idx);

  RunManifest manifest;
  manifest.command = "link";
  manifest.config_text = render_config(cfg);
  manifest.seed = cfg.train.seed;
  for (size_t p = 0; p < parties.size(); ++p)
    manifest.add_input(data_dir + "/party_" + std::to_string(p) + ".csv");
  manifest.outputs.push_back(out_path);
  manifest.write(fs::path(out_path).parent_path().empty()
                     ? "manifest.json"
                     : (fs::path(out_path).parent_path() / "manifest.json").string());
  std::cout << "linked " << parties.size() - 1 << " parties, K=" << neighbors << ", q=" << rate
            << " -> " << out_path << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train / evaluate
// ---------------------------------------------------------------------------

std::vector<PartyDataset> load_training_parties(const FullConfig& cfg, const std::string& data_dir,
                                                const std::string& input_csv, long digits,
                                                long parties_total) {
  if (!data_dir.empty()) return load_party_dir(data_dir);
  Table table = load_table(input_csv, digits, cfg.train.seed);
  Rng rng = Rng(cfg.train.seed).stream(0x73796e7468ULL);
  return split_features(table, parties_total, cfg.linkage.key_noise, rng, cfg.linkage.key_mode,
                        cfg.linkage.key_dims);
}

int cmd_train(const CommonArgs& common, const std::string& data_dir, const std::string& input_csv,
              long digits, long parties_total, const std::string& out_dir) {
  FullConfig cfg = resolve_config(common);
  auto parties = load_training_parties(cfg, data_dir, input_csv, digits, parties_total);
  cfg.privacy.num_parties = static_cast<int>(parties.size()) - 1;

  fs::create_directories(out_dir);
  RunMetrics metrics;
  if (cfg.model_kind == ModelKind::fet) {
    auto res = train_fet(cfg.train, parties, cfg.model, cfg.privacy);
    metrics = res.metrics;
    save_checkpoint(out_dir + "/checkpoint.bin", res.models);
  } else if (cfg.model_kind == ModelKind::solo) {
    auto res = train_solo(cfg.train, parties);
    metrics = res.metrics;
    ParamSet ps;
    res.model.collect(ps, "solo");
    save_params(out_dir + "/checkpoint.bin", ps);
  } else {
    auto res = train_top1sim(cfg.train, parties);
    metrics = res.metrics;
    ParamSet ps;
    res.model.collect(ps);
    save_params(out_dir + "/checkpoint.bin", ps);
  }

  write_metrics_jsonl(out_dir + "/metrics.jsonl", metrics);
  write_summary_csv(out_dir + "/summary.csv", metrics);

  RunManifest manifest;
  manifest.command = "train";
  manifest.config_text = render_config(cfg);
  manifest.seed = cfg.train.seed;
  if (!data_dir.empty())
    for (size_t p = 0; p < parties.size(); ++p)
      manifest.add_input(data_dir + "/party_" + std::to_string(p) + ".csv");
  else if (!input_csv.empty())
    manifest.add_input(input_csv);
  manifest.outputs = {out_dir + "/metrics.jsonl", out_dir + "/summary.csv",
                      out_dir + "/checkpoint.bin"};
  manifest.write(out_dir + "/manifest.json");

  std::cout << "best epoch " << metrics.best_epoch << ", val " << metrics.best_val_metric
            << ", test " << metrics.test_at_best;
  if (cfg.privacy.enabled) std::cout << ", eps " << metrics.epsilon_consumed;
  std::cout << " (" << metrics.train_seconds << "s)\n";
  if (metrics.budget_exceeded) {
    std::cerr << "privacy budget exhausted: eps " << metrics.epsilon_consumed << " exceeds cap "
              << cfg.privacy.epsilon << "\n";
    return kExitBudget;
  }
  return kExitOk;
}

int cmd_evaluate(const CommonArgs& common, const std::string& data_dir,
                 const std::string& checkpoint, const std::string& split) {
  FullConfig cfg = resolve_config(common);
  auto parties = load_party_dir(data_dir);
  cfg.privacy.num_parties = static_cast<int>(parties.size()) - 1;

  if (cfg.model_kind != ModelKind::fet)
    throw ValidationError("evaluate currently reloads fet checkpoints; rerun train for baselines");

  PreparedData data = prepare_data(parties, cfg.train);
  ModelConfig mcfg = cfg.model;
  mcfg.num_parties = static_cast<long>(parties.size()) - 1;
  mcfg.output_dim = data.output_dim;
  mcfg.key_dims = parties[0].keys.cols;
  std::vector<long> dims;
  for (const auto& p : data.parties) dims.push_back(p.features.cols);
  Rng init_rng = Rng(cfg.train.seed).stream(0x696e6974ULL);
  auto models = build_fet_models(mcfg, dims, init_rng);
  load_checkpoint(checkpoint, models);

  const std::vector<long>* rows = nullptr;
  std::vector<long> all;
  if (split == "test")
    rows = &data.split.test;
  else if (split == "val")
    rows = &data.split.val;
  else if (split == "train")
    rows = &data.split.train;
  else if (split == "all") {
    all.resize(parties[0].size());
    std::iota(all.begin(), all.end(), 0);
    rows = &all;
  } else {
    throw ValidationError("unknown split: " + split + " (expected train|val|test|all)");
  }
  const double metric = evaluate_fet(models, mcfg, cfg.privacy, data, *rows, cfg.train, 9000);
  std::cout << (cfg.train.task == TaskKind::classification ? "accuracy " : "rmse ") << metric
            << " on " << split << " (" << rows->size() << " rows)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate / accountant
// ---------------------------------------------------------------------------

int cmd_ablate(const CommonArgs& common, const std::string& suite_name, const std::string& grid_text,
               const std::string& input_csv, long digits, long parties_total, long n_seeds,
               long jobs, const std::string& out_path) {
  FullConfig cfg = resolve_config(common);
  const AblationSuite suite = ablation_suite_from_name(suite_name);
  const auto grid = parse_grid(grid_text);
  Table table = load_table(input_csv, digits, cfg.train.seed);

  auto points = run_ablation(suite, grid, table, parties_total - 1, cfg.linkage.key_noise,
                             cfg.train, cfg.model, cfg.privacy, n_seeds, cfg.model_kind, jobs);
  write_ablation_csv(out_path, suite, points);

  RunManifest manifest;
  manifest.command = "ablate";
  manifest.config_text = render_config(cfg);
  manifest.seed = cfg.train.seed;
  if (!input_csv.empty()) manifest.add_input(input_csv);
  manifest.outputs.push_back(out_path);
  const fs::path parent = fs::path(out_path).parent_path();
  manifest.write(parent.empty() ? "manifest.json" : (parent / "manifest.json").string());

  for (const auto& p : points)
    std::cout << suite_name << " " << p.value << ": " << p.mean_metric << " +/- " << p.std_metric
              << "\n";
  return kExitOk;
}

int cmd_accountant(const std::string& sigmas_text, double q, long steps, double delta,
                   long parties, const std::string& out_path) {
  const auto sigmas = parse_grid(sigmas_text);
  auto rows = dp::epsilon_curve(sigmas, q, steps, delta, static_cast<int>(parties));
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw ValidationError("cannot write " + out_path);
    out = &file;
  }
  out->precision(12);
  *out << "sigma,eps_with_mpc,eps_rdp_no_mpc\n";
  for (const auto& r : rows)
    *out << r.sigma << ',' << r.eps_with_mpc << ',' << r.eps_rdp_no_mpc << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fetsim: multi-party fuzzy vertical federated learning simulator"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string input_csv, data_dir, out_dir = "out", out_path, split = "test";
  std::string suite, grid_text, checkpoint, sigmas_text;
  long digits = 0, parties_total = 2, neighbors = 10, steps = 1000, n_seeds = 5, jobs = 1,
       epoch = 0;
  double key_noise_flag = -1.0, rate = 1.0, q = 0.01, delta = 1e-5;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "INI config file");
    sub->add_option("--from-manifest", common.manifest_path,
                    "replay the config recorded in a manifest.json");
    sub->add_option("--set", common.overrides, "override: section.key=value (repeatable)");
    sub->add_option("--seed", common.seed_flag, "global seed (beats config; FETSIM_SEED is the fallback)");
  };

  auto* synth = app.add_subcommand("synthesize", "split a table into fuzzily linked party files");
  add_common(synth);
  synth->add_option("--input", input_csv, "raw CSV with a label column");
  synth->add_option("--digits", digits, "generate a synthetic digit table with N rows instead");
  synth->add_option("--parties", parties_total, "total party count (primary + secondaries)")
      ->required();
  synth->add_option("--key-noise", key_noise_flag, "Gaussian key noise scale (overrides config)");
  synth->add_option("--out", out_dir, "output directory");

  auto* link = app.add_subcommand("link", "write a kNN linkage index for a party directory");
  add_common(link);
  link->add_option("--data", data_dir, "directory with party_*.csv files")->required();
  link->add_option("--neighbors", neighbors, "K neighbors");
  link->add_option("--subsample", rate, "secondary subsample rate q");
  link->add_option("--epoch", epoch, "epoch tag for the subsample stream");
  link->add_option("--out", out_path, "output index file")->required();

  auto* train = app.add_subcommand("train", "train fet | solo | top1sim and write metrics");
  add_common(train);
  train->add_option("--data", data_dir, "directory with party_*.csv files");
  train->add_option("--input", input_csv, "raw CSV; synthesizes parties in memory");
  train->add_option("--digits", digits, "synthetic digit table with N rows");
  train->add_option("--parties", parties_total, "total party count for --input/--digits");
  train->add_option("--model", [&common](const std::vector<std::string>& v) {
    common.overrides.push_back("train.model=" + v[0]);
    return true;
  }, "fet | solo | top1sim");
  train->add_option("--sigma", [&common](const std::vector<std::string>& v) {
    common.overrides.push_back("privacy.noise_multiplier=" + v[0]);
    common.overrides.push_back("privacy.enabled=true");
    return true;
  }, "noise multiplier (enables the privacy layer)");
  train->add_option("--eps-cap", [&common](const std::vector<std::string>& v) {
    common.overrides.push_back("privacy.epsilon_cap=" + v[0]);
    return true;
  }, "halt when the composed epsilon exceeds this");
  train->add_option("--out", out_dir, "output directory");

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
  add_common(eval);
  eval->add_option("--data", data_dir, "directory with party_*.csv files")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "train | val | test | all");

  auto* abl = app.add_subcommand("ablate", "sweep one knob over a grid");
  add_common(abl);
  abl->add_option("--suite", suite,
                  "dynamic_mask | party_dropout | pe_frequency | key_noise | neighbors_K | "
                  "num_parties | splitavg_noise")
      ->required();
  abl->add_option("--grid", grid_text, "comma-separated grid values")->required();
  abl->add_option("--input", input_csv, "raw CSV with a label column");
  abl->add_option("--digits", digits, "synthetic digit table with N rows");
  abl->add_option("--parties", parties_total, "total party count");
  abl->add_option("--seeds", n_seeds, "runs per grid point");
  abl->add_option("--jobs", jobs, "parallel grid points");
  abl->add_option("--out", out_path, "output CSV")->required();

  auto* acct = app.add_subcommand("accountant", "emit the epsilon-sigma curve as CSV");
  acct->add_option("--sigmas", sigmas_text, "comma-separated noise multipliers")->required();
  acct->add_option("--q", q, "subsample rate");
  acct->add_option("--steps", steps, "number of composed releases (B*T)");
  acct->add_option("--delta", delta, "delta");
  acct->add_option("--parties", parties_total, "party count for the no-MPC column");
  acct->add_option("--out", out_path, "output CSV (stdout when omitted)");

  auto* ref = app.add_subcommand("config-reference", "print the generated config key reference");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synthesize(common, input_csv, digits, parties_total, key_noise_flag, out_dir);
    if (link->parsed()) return cmd_link(common, data_dir, neighbors, rate, epoch, out_path);
    if (train->parsed())
      return cmd_train(common, data_dir, input_csv, digits, parties_total, out_dir);
    if (eval->parsed()) return cmd_evaluate(common, data_dir, checkpoint, split);
    if (abl->parsed())
      return cmd_ablate(common, suite, grid_text, input_csv, digits, parties_total, n_seeds, jobs,
                        out_path);
    if (acct->parsed()) return cmd_accountant(sigmas_text, q, steps, delta, parties_total, out_path);
    if (ref->parsed()) {
      std::cout << config_reference_markdown();
      return kExitOk;
    }
  } catch (const BudgetError& e) {
    std::cerr << "budget error: " << e.what() << "\n";
    return kExitBudget;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ContractError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DimError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}
