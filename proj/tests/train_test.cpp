#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "fetsim/train.hpp"

using namespace fetsim;

namespace {

// Small, fast defaults shared by the loop tests.
TrainConfig tiny_train(TaskKind task, long epochs, uint64_t seed = 3) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 64;
  t.lr = 1e-3;
  t.weight_decay = 1e-5;
  t.seed = seed;
  t.task = task;
  t.early_stop_patience = 50;  // effectively off unless a test wants it
  t.optimizer = Optimizer::Kind::adam;
  return t;
}

ModelConfig tiny_model(long K = 3) {
  ModelConfig m;
  m.hidden_size = 16;
  m.num_heads = 2;
  m.num_blocks = 1;
  m.num_neighbors = K;
  m.mask_mlp_hidden = 16;
  return m;
}

std::vector<double> loss_trace(const RunMetrics& m) {
  std::vector<double> out;
  for (const auto& e : m.epochs) out.push_back(e.train_loss);
  return out;
}

std::vector<double> val_trace(const RunMetrics& m) {
  std::vector<double> out;
  for (const auto& e : m.epochs) out.push_back(e.val_metric);
  return out;
}

}  // namespace

TEST_CASE("fet training descends on a tiny regression") {
  Rng rng(400);
  Table t = make_tabular(300, 8, 0, rng);
  Rng synth(401);
  auto parties = split_features(t, 2, 0.05, synth);
  PrivacySpec privacy;  // sigma = 0, r_d = 0
  auto res = train_fet(tiny_train(TaskKind::regression, 6), parties, tiny_model(), privacy);
  const auto losses = loss_trace(res.metrics);
  REQUIRE(losses.size() >= 5);
  for (int e = 1; e < 5; ++e) REQUIRE(losses[e] < losses[e - 1]);
}

TEST_CASE("initial classification loss sits at ln(C)") {
  Rng rng(402);
  Table t = make_tabular(400, 10, 10, rng);
  Rng synth(403);
  auto parties = split_features(t, 3, 0.05, synth);
  PrivacySpec privacy;
  auto res = train_fet(tiny_train(TaskKind::classification, 1), parties, tiny_model(), privacy);
  const double expect = std::log(10.0);
  REQUIRE(std::fabs(res.metrics.initial_train_loss - expect) < 0.10 * expect);
}

TEST_CASE("fet training replays identically under a fixed seed") {
  Rng rng(404);
  Table t = make_tabular(250, 9, 3, rng);
  Rng synth(405);
  auto parties = split_features(t, 3, 0.05, synth);
  PrivacySpec privacy;
  auto cfg = tiny_train(TaskKind::classification, 4, 77);
  auto a = train_fet(cfg, parties, tiny_model(), privacy);
  auto b = train_fet(cfg, parties, tiny_model(), privacy);
  REQUIRE(loss_trace(a.metrics) == loss_trace(b.metrics));
  REQUIRE(val_trace(a.metrics) == val_trace(b.metrics));
  REQUIRE(a.metrics.test_at_best == b.metrics.test_at_best);
}

TEST_CASE("solo on zero-variance features converges to the constant predictor") {
  const long n = 400;
  std::vector<PartyDataset> parties(1);
  parties[0].role = PartyRole::primary;
  parties[0].features = DataMatrix(n, 4);
  for (auto& v : parties[0].features.values) v = 2.5;  // constant
  parties[0].keys = DataMatrix(n, 2);                  // zero keys
  parties[0].labels.resize(n);
  Rng rng(406);
  for (auto& y : parties[0].labels) y = rng.normal(3.0, 2.0);
  for (long c = 0; c < 4; ++c) parties[0].feature_names.push_back("f" + std::to_string(c));

  auto cfg = tiny_train(TaskKind::regression, 40, 5);
  auto res = train_solo(cfg, parties);

  // Best constant predictor on the test rows: the training-label mean.
  double train_mean = 0.0;
  for (long r : res.data.split.train) train_mean += parties[0].labels[r];
  train_mean /= res.data.split.train.size();
  double best_const = 0.0;
  for (long r : res.data.split.test) {
    const double d = parties[0].labels[r] - train_mean;
    best_const += d * d;
  }
  best_const = std::sqrt(best_const / res.data.split.test.size());
  REQUIRE(std::fabs(res.metrics.test_at_best - best_const) < 0.02 * best_const);
}

TEST_CASE("solo separates a linearly separable toy task") {
  Rng rng(407);
  Table t = make_tabular(400, 6, 2, rng, /*noise=*/0.25);
  Rng synth(408);
  auto parties = split_features(t, 1, 0.0, synth);
  auto cfg = tiny_train(TaskKind::classification, 20, 6);
  auto res = train_solo(cfg, parties);
  REQUIRE(res.metrics.test_at_best > 0.95);

  // Determinism replay.
  auto res2 = train_solo(cfg, parties);
  REQUIRE(loss_trace(res.metrics) == loss_trace(res2.metrics));
}

TEST_CASE("top1sim degrades as keys get fuzzier") {
  Rng rng(409);
  Table t = make_tabular(500, 12, 4, rng, /*noise=*/0.4);
  auto cfg = tiny_train(TaskKind::classification, 15, 7);

  auto run_at = [&](double key_noise) {
    double mean = 0.0;
    for (uint64_t s = 0; s < 2; ++s) {
      Rng synth(410 + s);
      auto parties = split_features(t, 3, key_noise, synth);
      auto c = cfg;
      c.seed = 7 + s;
      mean += train_top1sim(c, parties).metrics.test_at_best;
    }
    return mean / 2;
  };
  const double exact = run_at(0.0);
  const double heavy = run_at(0.5);
  REQUIRE(exact > heavy);
  // Exact linkage reconstructs the joined table, which is near separable.
  REQUIRE(exact > 0.85);

  // Determinism replay.
  Rng synth(410);
  auto parties = split_features(t, 3, 0.0, synth);
  auto a = train_top1sim(cfg, parties);
  auto b = train_top1sim(cfg, parties);
  REQUIRE(loss_trace(a.metrics) == loss_trace(b.metrics));
}

TEST_CASE("privacy bookkeeping matches the accountant") {
  Rng rng(411);
  Table t = make_tabular(300, 8, 0, rng);
  Rng synth(412);
  auto parties = split_features(t, 3, 0.05, synth);
  PrivacySpec privacy;
  privacy.enabled = true;
  privacy.use_mpc = false;
  privacy.noise_multiplier = 2.0;
  privacy.clip_norm = 1.0;
  privacy.subsample_rate = 0.5;
  privacy.num_parties = 2;
  auto cfg = tiny_train(TaskKind::regression, 3, 8);
  cfg.batch_size = 50;
  auto res = train_fet(cfg, parties, tiny_model(), privacy);

  // 70/15/15 split of 300 rows: 210 train rows -> ceil(210/50) = 5 batches.
  const long batches_per_epoch = 5;
  REQUIRE(res.metrics.steps == 3 * batches_per_epoch);
  const double expect =
      dp::compose_epsilon(privacy.noise_multiplier, privacy.subsample_rate, res.metrics.steps,
                          privacy.delta);
  REQUIRE(res.metrics.epsilon_consumed == expect);
  // Epoch records expose a nondecreasing epsilon trace.
  for (size_t e = 1; e < res.metrics.epochs.size(); ++e)
    REQUIRE(res.metrics.epochs[e].epsilon >= res.metrics.epochs[e - 1].epsilon);
}

TEST_CASE("training halts when the privacy budget runs out") {
  Rng rng(413);
  Table t = make_tabular(300, 8, 0, rng);
  Rng synth(414);
  auto parties = split_features(t, 2, 0.05, synth);
  PrivacySpec privacy;
  privacy.enabled = true;
  privacy.use_mpc = false;
  privacy.noise_multiplier = 1.0;
  privacy.clip_norm = 1.0;
  privacy.subsample_rate = 0.5;
  privacy.epsilon = 2.0;  // tight cap
  auto cfg = tiny_train(TaskKind::regression, 50, 9);
  cfg.batch_size = 50;
  auto res = train_fet(cfg, parties, tiny_model(), privacy);
  REQUIRE(res.metrics.budget_exceeded);
  REQUIRE(res.metrics.steps < 50 * 5);
  REQUIRE(dp::compose_epsilon(privacy.noise_multiplier, privacy.subsample_rate,
                              res.metrics.steps, privacy.delta) > privacy.epsilon);
}

TEST_CASE("early stopping reports the metric at the best validation epoch") {
  Rng rng(415);
  Table t = make_tabular(300, 9, 3, rng);
  Rng synth(416);
  auto parties = split_features(t, 2, 0.05, synth);
  PrivacySpec privacy;
  auto cfg = tiny_train(TaskKind::classification, 12, 10);
  cfg.early_stop_patience = 3;
  auto res = train_fet(cfg, parties, tiny_model(), privacy);
  REQUIRE(res.metrics.best_epoch >= 0);
  const auto& at_best = res.metrics.epochs[res.metrics.best_epoch];
  REQUIRE(res.metrics.test_at_best == at_best.test_metric);
  REQUIRE(res.metrics.best_val_metric == at_best.val_metric);
  for (const auto& e : res.metrics.epochs)
    REQUIRE(e.val_metric <= res.metrics.best_val_metric);
}

TEST_CASE("single-point ablation equals a direct training call") {
  Rng rng(417);
  Table t = make_tabular(250, 8, 3, rng);
  auto tcfg = tiny_train(TaskKind::classification, 4, 11);
  auto mcfg = tiny_model();
  PrivacySpec privacy;
  auto points = run_ablation(AblationSuite::party_dropout, {0.0}, t, 2, 0.05, tcfg, mcfg,
                             privacy, /*n_seeds=*/1);
  REQUIRE(points.size() == 1);
  REQUIRE(points[0].per_seed.size() == 1);
  REQUIRE(points[0].std_metric == 0.0);

  Rng synth = Rng(tcfg.seed).stream(0x73796e7468ULL);
  auto parties = split_features(t, 3, 0.05, synth);
  auto direct = train_fet(tcfg, parties, mcfg, privacy);
  REQUIRE(points[0].mean_metric == direct.metrics.test_at_best);
}

TEST_CASE("full party dropout degrades the model") {
  Rng rng(418);
  Table t = make_tabular(400, 12, 4, rng, /*noise=*/0.5);
  auto tcfg = tiny_train(TaskKind::classification, 10, 12);
  auto mcfg = tiny_model();
  PrivacySpec privacy;
  auto points = run_ablation(AblationSuite::party_dropout, {0.0, 1.0}, t, 3, 0.05, tcfg, mcfg,
                             privacy, /*n_seeds=*/2);
  REQUIRE(points[0].value == 0.0);
  REQUIRE(points[1].value == 1.0);
  REQUIRE(points[1].mean_metric < points[0].mean_metric);
}

TEST_CASE("top1sim key-noise ablation trends downward") {
  Rng rng(419);
  Table t = make_tabular(400, 12, 4, rng, /*noise=*/0.4);
  auto tcfg = tiny_train(TaskKind::classification, 12, 13);
  auto mcfg = tiny_model();
  PrivacySpec privacy;
  auto points = run_ablation(AblationSuite::key_noise, {0.0, 0.05, 0.2}, t, 2, 0.05, tcfg, mcfg,
                             privacy, /*n_seeds=*/2, ModelKind::top1sim);
  REQUIRE(points[0].mean_metric >= points[1].mean_metric - 0.01);
  REQUIRE(points[1].mean_metric >= points[2].mean_metric - 0.01);
  REQUIRE(points[0].mean_metric > points[2].mean_metric);
}

TEST_CASE("concat and averaged aggregation stay in the same band") {
  Rng rng(420);
  Table t = make_tabular(300, 9, 3, rng);
  Rng synth(421);
  auto parties = split_features(t, 3, 0.05, synth);
  PrivacySpec privacy;
  auto tcfg = tiny_train(TaskKind::classification, 8, 14);

  auto avg_cfg = tiny_model();
  auto cat_cfg = tiny_model();
  cat_cfg.aggregator = AggregatorMode::concat;
  auto avg = train_fet(tcfg, parties, avg_cfg, privacy);
  auto cat = train_fet(tcfg, parties, cat_cfg, privacy);

  const auto la = loss_trace(avg.metrics), lc = loss_trace(cat.metrics);
  const size_t n = std::min(la.size(), lc.size());
  double mean_gap = 0.0;
  for (size_t i = 0; i < n; ++i) mean_gap += std::fabs(la[i] - lc[i]);
  mean_gap /= n;
  REQUIRE(mean_gap < 0.30);
  REQUIRE(std::fabs(avg.metrics.test_at_best - cat.metrics.test_at_best) < 0.10);
}

TEST_CASE("metric helpers satisfy their identities") {
  REQUIRE(rmse({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == 0.0);
  REQUIRE(accuracy({0.1, 0.9, 0.8, 0.2}, 2, {1.0, 0.0}) == 1.0);

  // Constant predictor at the label mean scores the label standard deviation.
  Rng rng(422);
  std::vector<double> labels(2000);
  for (auto& y : labels) y = rng.normal(5.0, 3.0);
  double mean = 0.0;
  for (double y : labels) mean += y;
  mean /= labels.size();
  std::vector<double> constant(labels.size(), mean);
  double var = 0.0;
  for (double y : labels) var += (y - mean) * (y - mean);
  REQUIRE(std::fabs(rmse(constant, labels) - std::sqrt(var / labels.size())) < 1e-12);

  // Hand-computed small case.
  const double got = rmse({1.0, 4.0}, {2.0, 2.0});
  REQUIRE(std::fabs(got - std::sqrt((1.0 + 4.0) / 2.0)) < 1e-15);
  REQUIRE(accuracy({0.3, 0.7, 0.6, 0.4, 0.2, 0.8}, 2, {0.0, 0.0, 1.0}) ==
          Catch::Approx(2.0 / 3.0));
}

TEST_CASE("metrics writers emit parseable files") {
  RunMetrics m;
  m.epochs.push_back({0, 1.5, 0.6, 0.58, 0.0, 0.1});
  m.epochs.push_back({1, 1.2, 0.7, 0.69, 0.0, 0.1});
  m.best_epoch = 1;
  m.best_val_metric = 0.7;
  m.test_at_best = 0.69;
  const std::string jsonl = "/tmp/fetsim_test_metrics.jsonl";
  const std::string csv = "/tmp/fetsim_test_summary.csv";
  write_metrics_jsonl(jsonl, m);
  write_summary_csv(csv, m);
  std::ifstream j(jsonl);
  std::string line;
  long lines = 0;
  while (std::getline(j, line)) {
    REQUIRE(line.find("\"epoch\":") != std::string::npos);
    ++lines;
  }
  REQUIRE(lines == 2);
  std::ifstream c(csv);
  std::getline(c, line);
  REQUIRE(line.find("test_at_best") != std::string::npos);
  std::getline(c, line);
  REQUIRE(line.find("0.69") != std::string::npos);
  std::remove(jsonl.c_str());
  std::remove(csv.c_str());
}
