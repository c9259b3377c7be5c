#pragma once

// Training loops and experiment machinery: the federated-transformer loop
// (subsample -> link -> encode -> clip -> aggregate -> decode -> backprop,
// with the accountant advanced once per batch and PE averaging every T_pe
// epochs), the Solo and Top1Sim baselines, evaluation metrics, early stopping
// on the validation split, and the ablation driver.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "fetsim/accountant.hpp"
#include "fetsim/common.hpp"
#include "fetsim/data.hpp"
#include "fetsim/fet.hpp"
#include "fetsim/linkage.hpp"
#include "fetsim/nn.hpp"
#include "fetsim/splitavg.hpp"

namespace fetsim {

enum class TaskKind { regression, classification };

struct TrainConfig {
  long epochs = 50;
  long batch_size = 8192;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  uint64_t seed = 0;
  TaskKind task = TaskKind::regression;
  long early_stop_patience = 10;
  bool eval_noise = true;
  Optimizer::Kind optimizer = Optimizer::Kind::sgd;
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  bool resample_per_batch = true;  // subsample redraw granularity (per batch)

  void validate() const {
    check_contract(epochs >= 1, "train: epochs must be >= 1");
    check_contract(batch_size >= 1, "train: batch size must be >= 1");
    check_contract(val_fraction >= 0.0 && test_fraction >= 0.0 &&
                       val_fraction + test_fraction < 1.0,
                   "train: split fractions must leave a training set");
  }
};

struct EpochRecord {
  long epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double test_metric = 0.0;
  double epsilon = 0.0;
  double seconds = 0.0;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  double initial_train_loss = 0.0;
  long best_epoch = -1;
  double best_val_metric = 0.0;
  double test_at_best = 0.0;
  double train_seconds = 0.0;
  double epsilon_consumed = 0.0;
  uint64_t bytes_uploaded = 0;
  long steps = 0;
  bool budget_exceeded = false;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double rmse(const std::vector<double>& pred, const std::vector<double>& target) {
  check_dim(pred.size() == target.size(), "rmse: size mismatch");
  double s = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  return std::sqrt(s / pred.size());
}

// Fraction of rows whose argmax logit equals the label.
inline double accuracy(const std::vector<double>& logits, long num_classes,
                       const std::vector<double>& labels) {
  check_dim(logits.size() == labels.size() * num_classes, "accuracy: size mismatch");
  long correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    long arg = 0;
    for (long c = 1; c < num_classes; ++c)
      if (logits[i * num_classes + c] > logits[i * num_classes + arg]) arg = c;
    if (arg == static_cast<long>(labels[i])) ++correct;
  }
  return static_cast<double>(correct) / labels.size();
}

inline bool metric_improved(TaskKind task, double candidate, double incumbent) {
  return task == TaskKind::classification ? candidate > incumbent : candidate < incumbent;
}

// ---------------------------------------------------------------------------
// Shared preprocessing
// ---------------------------------------------------------------------------

struct ColumnStats {
  std::vector<double> mean, std;
};

inline ColumnStats fit_column_stats(const DataMatrix& m, const std::vector<long>* rows = nullptr) {
  ColumnStats st;
  st.mean.assign(m.cols, 0.0);
  st.std.assign(m.cols, 0.0);
  const long n = rows ? static_cast<long>(rows->size()) : m.rows;
  check_contract(n > 0, "fit_column_stats: empty selection");
  for (long i = 0; i < n; ++i) {
    const long r = rows ? (*rows)[i] : i;
    for (long c = 0; c < m.cols; ++c) st.mean[c] += m.at(r, c);
  }
  for (auto& v : st.mean) v /= n;
  for (long i = 0; i < n; ++i) {
    const long r = rows ? (*rows)[i] : i;
    for (long c = 0; c < m.cols; ++c) {
      const double d = m.at(r, c) - st.mean[c];
      st.std[c] += d * d;
    }
  }
  for (auto& v : st.std) v = std::sqrt(v / n);
  return st;
}

inline void apply_column_stats(DataMatrix& m, const ColumnStats& st) {
  for (long r = 0; r < m.rows; ++r)
    for (long c = 0; c < m.cols; ++c) {
      const double s = st.std[c] > 1e-12 ? st.std[c] : 1.0;
      m.at(r, c) = (m.at(r, c) - st.mean[c]) / s;
    }
}

struct LabelTransform {
  double mean = 0.0, std = 1.0;
  double encode(double y) const { return (y - mean) / std; }
  double decode(double y) const { return y * std + mean; }
};

struct PreparedData {
  std::vector<PartyDataset> parties;  // standardized copies
  SplitIndices split;
  LabelTransform label_tf;
  long num_classes = 1;
  long output_dim = 1;
};

inline PreparedData prepare_data(const std::vector<PartyDataset>& raw, const TrainConfig& cfg) {
  check_contract(!raw.empty() && raw[0].role == PartyRole::primary,
                 "prepare_data: party 0 must be the primary");
  check_contract(!raw[0].labels.empty(), "prepare_data: primary party has no labels");
  PreparedData out;
  out.parties = raw;

  Table probe;
  probe.features = raw[0].features;  // only labels matter for the split
  probe.labels = raw[0].labels;
  probe.classification = cfg.task == TaskKind::classification;
  if (probe.classification) {
    long mx = 0;
    for (double y : raw[0].labels) {
      check_contract(y >= 0.0 && y == std::floor(y),
                     "prepare_data: classification labels must be non-negative integers");
      mx = std::max(mx, static_cast<long>(y));
    }
    probe.num_classes = mx + 1;
    out.num_classes = mx + 1;
    out.output_dim = out.num_classes;
  }
  Rng split_rng = Rng(cfg.seed).stream(0x73706c6974ULL);
  out.split = split_train_val_test(probe, cfg.val_fraction, cfg.test_fraction, split_rng);

  // Features: primary standardized on its training rows, secondaries on their
  // full tables (they have no row split).
  ColumnStats primary_stats = fit_column_stats(raw[0].features, &out.split.train);
  apply_column_stats(out.parties[0].features, primary_stats);
  for (size_t p = 1; p < raw.size(); ++p) {
    ColumnStats st = fit_column_stats(raw[p].features);
    apply_column_stats(out.parties[p].features, st);
  }

  if (cfg.task == TaskKind::regression) {
    double m = 0.0;
    for (long r : out.split.train) m += raw[0].labels[r];
    m /= out.split.train.size();
    double v = 0.0;
    for (long r : out.split.train) {
      const double d = raw[0].labels[r] - m;
      v += d * d;
    }
    out.label_tf.mean = m;
    out.label_tf.std = std::max(std::sqrt(v / out.split.train.size()), 1e-12);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Federated transformer training (the main loop)
// ---------------------------------------------------------------------------

struct FetTrainResult {
  RunMetrics metrics;
  std::vector<PartyModel> models;
  PreparedData data;
};

namespace detail {

// Full-pool linkage for a row set, cached when no subsampling is active.
inline std::vector<std::vector<long>> full_candidate_pools(const std::vector<PartyDataset>& parties) {
  std::vector<std::vector<long>> pools;
  for (size_t p = 1; p < parties.size(); ++p) {
    std::vector<long> all(parties[p].size());
    std::iota(all.begin(), all.end(), 0);
    pools.push_back(std::move(all));
  }
  return pools;
}

inline std::vector<double> batch_labels_encoded(const LinkedBatch& batch, TaskKind task,
                                                const LabelTransform& tf) {
  std::vector<double> out = batch.labels;
  if (task == TaskKind::regression)
    for (auto& y : out) y = tf.encode(y);
  return out;
}

inline Tensor batch_loss(const Tensor& pred, const std::vector<double>& labels, TaskKind task,
                         long num_classes) {
  if (task == TaskKind::classification) {
    std::vector<int> ints(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) ints[i] = static_cast<int>(labels[i]);
    return cross_entropy_loss(pred, ints);
  }
  return mse_loss(reshape(pred, {pred.dim(0)}), labels);
}

}  // namespace detail

// Evaluation over prebuilt linked batches (the linkage of a fixed row set
// against the full pools never changes; callers cache it across epochs).
inline double evaluate_fet_batches(std::vector<PartyModel>& models, const ModelConfig& mcfg,
                                   const PrivacySpec& privacy,
                                   const std::vector<LinkedBatch>& batches,
                                   const PreparedData& data, const TrainConfig& tcfg,
                                   uint64_t eval_tag) {
  check_contract(!batches.empty(), "evaluate: empty row set");
  if (tcfg.task == TaskKind::classification)
    check_contract(mcfg.output_dim == data.num_classes, "evaluate: task/output mismatch");
  PrivacySpec spec = privacy;
  spec.noise_at_eval = privacy.noise_at_eval && tcfg.eval_noise;
  std::vector<double> preds;
  std::vector<double> labels;
  Rng root(tcfg.seed);
  for (size_t b = 0; b < batches.size(); ++b) {
    Rng step = root.stream(0x6576616cULL, eval_tag, b);
    Tensor out = fet_forward(batches[b], models, mcfg, spec, RunMode::eval, step);
    preds.insert(preds.end(), out.data().begin(), out.data().end());
    labels.insert(labels.end(), batches[b].labels.begin(), batches[b].labels.end());
  }
  if (tcfg.task == TaskKind::classification) return accuracy(preds, data.num_classes, labels);
  for (auto& p : preds) p = data.label_tf.decode(p);
  return rmse(preds, labels);
}

inline std::vector<LinkedBatch> build_eval_batches(const PreparedData& data,
                                                   const std::vector<long>& rows, long batch_size,
                                                   long num_neighbors) {
  const auto pools = detail::full_candidate_pools(data.parties);
  std::vector<LinkedBatch> batches;
  for (size_t start = 0; start < rows.size(); start += batch_size) {
    const size_t end = std::min(rows.size(), start + batch_size);
    std::vector<long> ids(rows.begin() + start, rows.begin() + end);
    batches.push_back(build_linked_batch(data.parties, ids, pools, num_neighbors));
  }
  return batches;
}

// Predictions are de-standardized before the regression metric;
// classification reports argmax accuracy.
inline double evaluate_fet(std::vector<PartyModel>& models, const ModelConfig& mcfg,
                           const PrivacySpec& privacy, const PreparedData& data,
                           const std::vector<long>& rows, const TrainConfig& tcfg,
                           uint64_t eval_tag) {
  check_contract(!rows.empty(), "evaluate: empty row set");
  const auto batches = build_eval_batches(data, rows, tcfg.batch_size, mcfg.num_neighbors);
  return evaluate_fet_batches(models, mcfg, privacy, batches, data, tcfg, eval_tag);
}

inline FetTrainResult train_fet(const TrainConfig& tcfg, const std::vector<PartyDataset>& raw,
                                ModelConfig mcfg, PrivacySpec privacy) {
  tcfg.validate();
  privacy.validate();
  const auto t_start = std::chrono::steady_clock::now();

  FetTrainResult result;
  result.data = prepare_data(raw, tcfg);
  PreparedData& data = result.data;
  mcfg.num_parties = static_cast<long>(raw.size()) - 1;
  mcfg.output_dim = data.output_dim;
  mcfg.key_dims = raw[0].keys.cols;
  mcfg.validate();
  check_contract(mcfg.num_parties >= 1, "train_fet: need at least one secondary party");

  // Enough sampled candidates to link K neighbors on every secondary.
  for (size_t p = 1; p < raw.size(); ++p)
    check_contract(static_cast<long>(std::floor(privacy.subsample_rate * raw[p].size())) >=
                       mcfg.num_neighbors,
                   "train_fet: q*N < K on secondary party " + std::to_string(p - 1));

  std::vector<long> dims;
  for (const auto& p : data.parties) dims.push_back(p.features.cols);
  Rng init_rng = Rng(tcfg.seed).stream(0x696e6974ULL);
  result.models = build_fet_models(mcfg, dims, init_rng);
  ParamSet params = collect_all_params(result.models);
  const auto param_tensors = params.tensors();

  Optimizer opt;
  opt.kind = tcfg.optimizer;
  opt.lr = tcfg.lr;
  opt.weight_decay = tcfg.weight_decay;

  dp::AccountantState accountant;
  accountant.sigma = privacy.noise_multiplier;
  accountant.subsample_rate = privacy.subsample_rate;
  accountant.delta = privacy.delta;

  const bool full_pool = privacy.subsample_rate >= 1.0;
  // With no subsampling the linkage over all rows is deterministic; compute it
  // once and slice per batch.
  std::vector<std::vector<long>> cached_links;  // per secondary: N_p * K
  if (full_pool) {
    const auto pools = detail::full_candidate_pools(data.parties);
    for (size_t p = 1; p < data.parties.size(); ++p)
      cached_links.push_back(
          knn_link(data.parties[0].keys, data.parties[p].keys, mcfg.num_neighbors));
  }

  RunMetrics& metrics = result.metrics;
  // The validation/test linkage never changes; build those batches once.
  const auto val_batches =
      build_eval_batches(data, data.split.val, tcfg.batch_size, mcfg.num_neighbors);
  const auto test_batches =
      build_eval_batches(data, data.split.test, tcfg.batch_size, mcfg.num_neighbors);
  Rng shuffle_root = Rng(tcfg.seed).stream(0x73687566ULL);
  std::vector<long> train_ids = data.split.train;
  double best = tcfg.task == TaskKind::classification ? -1.0
                                                      : std::numeric_limits<double>::infinity();
  long since_best = 0;
  bool first_batch = true;

  for (long epoch = 0; epoch < tcfg.epochs && !metrics.budget_exceeded; ++epoch) {
    const auto e_start = std::chrono::steady_clock::now();
    Rng shuffle = shuffle_root.stream(epoch);
    for (size_t i = train_ids.size(); i > 1; --i)
      std::swap(train_ids[i - 1], train_ids[shuffle.next_below(i)]);

    double loss_sum = 0.0;
    long batch_count = 0;
    for (size_t start = 0; start < train_ids.size(); start += tcfg.batch_size) {
      const size_t end = std::min(train_ids.size(), start + tcfg.batch_size);
      std::vector<long> ids(train_ids.begin() + start, train_ids.begin() + end);

      LinkedBatch batch;
      if (full_pool) {
        // Slice the cached full linkage.
        batch.primary_ids = ids;
        batch.num_neighbors = mcfg.num_neighbors;
        const long B = static_cast<long>(ids.size());
        const long d_k = data.parties[0].keys.cols;
        DataMatrix pk = data.parties[0].keys.select_rows(ids);
        DataMatrix pf = data.parties[0].features.select_rows(ids);
        batch.primary_keys = Tensor::from_data({B, 1, d_k}, pk.values);
        batch.primary_features =
            Tensor::from_data({B, 1, data.parties[0].features.cols}, pf.values);
        batch.labels.resize(B);
        for (long i = 0; i < B; ++i) batch.labels[i] = data.parties[0].labels[ids[i]];
        for (size_t p = 1; p < data.parties.size(); ++p) {
          const auto& links = cached_links[p - 1];
          const long K = mcfg.num_neighbors;
          std::vector<long> source(B * K);
          for (long i = 0; i < B; ++i)
            for (long t = 0; t < K; ++t) source[i * K + t] = links[ids[i] * K + t];
          const long d_f = data.parties[p].features.cols;
          std::vector<double> kb(B * K * d_k), fb(B * K * d_f);
          for (long i = 0; i < B * K; ++i) {
            std::copy_n(data.parties[p].keys.row(source[i]), d_k, kb.begin() + i * d_k);
            std::copy_n(data.parties[p].features.row(source[i]), d_f, fb.begin() + i * d_f);
          }
          batch.neighbor_ids.push_back(std::move(source));
          batch.neighbor_keys.push_back(Tensor::from_data({B, K, d_k}, std::move(kb)));
          batch.neighbor_features.push_back(Tensor::from_data({B, K, d_f}, std::move(fb)));
        }
      } else {
        // Fresh secondary subsample per (epoch, batch), then link inside it.
        std::vector<std::vector<long>> pools;
        for (size_t p = 1; p < data.parties.size(); ++p) {
          Rng sub = Rng(tcfg.seed).stream(0x73756273ULL, p, epoch, batch_count);
          pools.push_back(subsample_indices(data.parties[p].size(), privacy.subsample_rate, sub,
                                            mcfg.num_neighbors));
        }
        batch = build_linked_batch(data.parties, ids, pools, mcfg.num_neighbors);
      }

      Rng step = Rng(tcfg.seed).stream(0x73746570ULL, epoch, batch_count);
      ForwardStats stats;
      Tensor pred = fet_forward(batch, result.models, mcfg, privacy, RunMode::train, step, &stats);
      Tensor loss = detail::batch_loss(
          pred, detail::batch_labels_encoded(batch, tcfg.task, data.label_tf), tcfg.task,
          data.num_classes);
      if (first_batch) {
        metrics.initial_train_loss = loss.scalar();
        first_batch = false;
      }
      backward(loss);
      // Parties dropped from this step contributed nothing and take no update.
      std::vector<Tensor> touched;
      for (const auto& p : param_tensors)
        if (p.has_grad()) touched.push_back(p);
      opt.step(touched);
      loss_sum += loss.scalar();
      ++batch_count;
      metrics.steps += 1;
      metrics.bytes_uploaded += stats.bytes_uploaded;

      if (privacy.enabled) {
        accountant.advance(1);
        if (privacy.epsilon > 0.0) {
          const double eps_now = dp::compose_epsilon(accountant);
          if (eps_now > privacy.epsilon) {
            metrics.budget_exceeded = true;
            break;
          }
        }
      }
    }

    // Periodic positional-encoding averaging across every party.
    if (mcfg.pe_avg_frequency > 0 && (epoch + 1) % mcfg.pe_avg_frequency == 0) {
      std::vector<PositionalEncoder*> layers;
      for (auto& m : result.models) layers.push_back(&m.pe);
      pe_average(layers);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / std::max(batch_count, 1L);
    rec.epsilon = privacy.enabled ? dp::compose_epsilon(accountant) : 0.0;
    rec.val_metric = evaluate_fet_batches(result.models, mcfg, privacy, val_batches, data, tcfg,
                                          1000 + epoch);
    rec.test_metric = evaluate_fet_batches(result.models, mcfg, privacy, test_batches, data, tcfg,
                                           2000 + epoch);
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - e_start).count();
    metrics.epochs.push_back(rec);

    if (metrics.best_epoch < 0 || metric_improved(tcfg.task, rec.val_metric, best)) {
      best = rec.val_metric;
      metrics.best_epoch = epoch;
      metrics.best_val_metric = rec.val_metric;
      metrics.test_at_best = rec.test_metric;
      since_best = 0;
    } else if (++since_best >= tcfg.early_stop_patience) {
      break;
    }
  }

  metrics.epsilon_consumed = privacy.enabled ? dp::compose_epsilon(accountant) : 0.0;
  metrics.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Solo baseline: an MLP on the primary party alone (keys + features).
// ---------------------------------------------------------------------------

struct MlpTrainResult {
  RunMetrics metrics;
  Mlp model;
  PreparedData data;
};

namespace detail {

inline Tensor mlp_inputs(const PreparedData& data, const std::vector<long>& rows) {
  const auto& party = data.parties[0];
  const long d_k = party.keys.cols, d_f = party.features.cols;
  const long b = static_cast<long>(rows.size());
  std::vector<double> buf(b * (d_k + d_f));
  for (long i = 0; i < b; ++i) {
    std::copy_n(party.keys.row(rows[i]), d_k, buf.begin() + i * (d_k + d_f));
    std::copy_n(party.features.row(rows[i]), d_f, buf.begin() + i * (d_k + d_f) + d_k);
  }
  return Tensor::from_data({b, d_k + d_f}, std::move(buf));
}

inline std::vector<double> rows_labels(const PreparedData& data, const std::vector<long>& rows,
                                       TaskKind task) {
  std::vector<double> out(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) out[i] = data.parties[0].labels[rows[i]];
  if (task == TaskKind::regression)
    for (auto& y : out) y = data.label_tf.encode(y);
  return out;
}

// Generic batched trainer for the MLP-style baselines.
template <typename ForwardFn>
RunMetrics train_mlp_loop(const TrainConfig& tcfg, const PreparedData& data, ForwardFn&& forward,
                          const std::vector<Tensor>& params, TaskKind task, long num_classes) {
  const auto t_start = std::chrono::steady_clock::now();
  RunMetrics metrics;
  Optimizer opt;
  opt.kind = tcfg.optimizer;
  opt.lr = tcfg.lr;
  opt.weight_decay = tcfg.weight_decay;

  auto eval_rows = [&](const std::vector<long>& rows) {
    std::vector<double> preds, labels;
    for (size_t start = 0; start < rows.size(); start += tcfg.batch_size) {
      const size_t end = std::min(rows.size(), start + tcfg.batch_size);
      std::vector<long> ids(rows.begin() + start, rows.begin() + end);
      Tensor out = forward(ids, /*training=*/false);
      preds.insert(preds.end(), out.data().begin(), out.data().end());
      for (long r : ids) labels.push_back(data.parties[0].labels[r]);
    }
    if (task == TaskKind::classification) return accuracy(preds, num_classes, labels);
    for (auto& p : preds) p = data.label_tf.decode(p);
    return rmse(preds, labels);
  };

  Rng shuffle_root = Rng(tcfg.seed).stream(0x73687566ULL);
  std::vector<long> train_ids = data.split.train;
  double best = task == TaskKind::classification ? -1.0 : std::numeric_limits<double>::infinity();
  long since_best = 0;
  bool first_batch = true;

  for (long epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto e_start = std::chrono::steady_clock::now();
    Rng shuffle = shuffle_root.stream(epoch);
    for (size_t i = train_ids.size(); i > 1; --i)
      std::swap(train_ids[i - 1], train_ids[shuffle.next_below(i)]);
    double loss_sum = 0.0;
    long batch_count = 0;
    for (size_t start = 0; start < train_ids.size(); start += tcfg.batch_size) {
      const size_t end = std::min(train_ids.size(), start + tcfg.batch_size);
      std::vector<long> ids(train_ids.begin() + start, train_ids.begin() + end);
      Tensor pred = forward(ids, /*training=*/true);
      Tensor loss =
          detail::batch_loss(pred, detail::rows_labels(data, ids, task), task, num_classes);
      if (first_batch) {
        metrics.initial_train_loss = loss.scalar();
        first_batch = false;
      }
      backward(loss);
      opt.step(params);
      loss_sum += loss.scalar();
      ++batch_count;
      metrics.steps += 1;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / std::max(batch_count, 1L);
    rec.val_metric = eval_rows(data.split.val);
    rec.test_metric = eval_rows(data.split.test);
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - e_start).count();
    metrics.epochs.push_back(rec);
    if (metrics.best_epoch < 0 || metric_improved(task, rec.val_metric, best)) {
      best = rec.val_metric;
      metrics.best_epoch = epoch;
      metrics.best_val_metric = rec.val_metric;
      metrics.test_at_best = rec.test_metric;
      since_best = 0;
    } else if (++since_best >= tcfg.early_stop_patience) {
      break;
    }
  }
  metrics.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return metrics;
}

}  // namespace detail

inline MlpTrainResult train_solo(const TrainConfig& tcfg, const std::vector<PartyDataset>& raw) {
  tcfg.validate();
  MlpTrainResult result;
  result.data = prepare_data(raw, tcfg);
  const long d_in = result.data.parties[0].keys.cols + result.data.parties[0].features.cols;
  Rng init_rng = Rng(tcfg.seed).stream(0x696e6974ULL);
  result.model = Mlp(d_in, {400, 400}, result.data.output_dim, init_rng, 0.25);
  ParamSet ps;
  result.model.collect(ps, "solo");
  auto forward = [&](const std::vector<long>& ids, bool) {
    return result.model.forward(detail::mlp_inputs(result.data, ids));
  };
  result.metrics = detail::train_mlp_loop(tcfg, result.data, forward, ps.tensors(), tcfg.task,
                                          result.data.num_classes);
  return result;
}

// ---------------------------------------------------------------------------
// Top1Sim baseline: one nearest neighbor per secondary party, per-party local
// MLPs (one hidden layer of 200), concatenated into an aggregation MLP.
// ---------------------------------------------------------------------------

struct Top1SimModel {
  std::vector<Mlp> locals;  // primary first
  Mlp aggregate;

  void collect(ParamSet& ps) const {
    for (size_t i = 0; i < locals.size(); ++i)
      locals[i].collect(ps, "local" + std::to_string(i));
    aggregate.collect(ps, "aggregate");
  }
};

struct Top1TrainResult {
  RunMetrics metrics;
  Top1SimModel model;
  PreparedData data;
};

inline Top1TrainResult train_top1sim(const TrainConfig& tcfg,
                                     const std::vector<PartyDataset>& raw) {
  tcfg.validate();
  check_contract(raw.size() >= 2, "train_top1sim: needs at least one secondary party");
  Top1TrainResult result;
  result.data = prepare_data(raw, tcfg);
  PreparedData& data = result.data;

  // Top-1 linkage against the full pools, computed once.
  std::vector<std::vector<long>> top1;
  for (size_t p = 1; p < data.parties.size(); ++p)
    top1.push_back(knn_link(data.parties[0].keys, data.parties[p].keys, 1));

  const long hidden = 200;
  Rng init_rng = Rng(tcfg.seed).stream(0x696e6974ULL);
  result.model.locals.emplace_back(data.parties[0].keys.cols + data.parties[0].features.cols,
                                   std::vector<long>{}, hidden, init_rng);
  for (size_t p = 1; p < data.parties.size(); ++p)
    result.model.locals.emplace_back(data.parties[p].features.cols, std::vector<long>{}, hidden,
                                     init_rng);
  result.model.aggregate = Mlp(static_cast<long>(data.parties.size()) * hidden, {hidden},
                               data.output_dim, init_rng, 0.25);
  ParamSet ps;
  result.model.collect(ps);

  auto forward = [&](const std::vector<long>& ids, bool) {
    std::vector<Tensor> parts;
    parts.push_back(relu(result.model.locals[0].forward(detail::mlp_inputs(data, ids))));
    for (size_t p = 1; p < data.parties.size(); ++p) {
      const auto& party = data.parties[p];
      const long d_f = party.features.cols;
      std::vector<double> buf(ids.size() * d_f);
      for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(party.features.row(top1[p - 1][ids[i]]), d_f, buf.begin() + i * d_f);
      Tensor x = Tensor::from_data({static_cast<long>(ids.size()), d_f}, std::move(buf));
      parts.push_back(relu(result.model.locals[p].forward(x)));
    }
    return result.model.aggregate.forward(concat_last(parts));
  };
  result.metrics = detail::train_mlp_loop(tcfg, data, forward, ps.tensors(), tcfg.task,
                                          data.num_classes);
  return result;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

enum class AblationSuite {
  dynamic_mask,
  party_dropout,
  pe_frequency,
  key_noise,
  neighbors_k,
  num_parties,
  splitavg_noise
};

inline const char* ablation_suite_name(AblationSuite s) {
  switch (s) {
    case AblationSuite::dynamic_mask: return "dynamic_mask";
    case AblationSuite::party_dropout: return "party_dropout";
    case AblationSuite::pe_frequency: return "pe_frequency";
    case AblationSuite::key_noise: return "key_noise";
    case AblationSuite::neighbors_k: return "neighbors_K";
    case AblationSuite::num_parties: return "num_parties";
    case AblationSuite::splitavg_noise: return "splitavg_noise";
  }
  return "?";
}

inline AblationSuite ablation_suite_from_name(const std::string& name) {
  for (AblationSuite s :
       {AblationSuite::dynamic_mask, AblationSuite::party_dropout, AblationSuite::pe_frequency,
        AblationSuite::key_noise, AblationSuite::neighbors_k, AblationSuite::num_parties,
        AblationSuite::splitavg_noise})
    if (name == ablation_suite_name(s)) return s;
  throw ValidationError("unknown ablation suite: " + name);
}

struct AblationPoint {
  double value = 0.0;
  double mean_metric = 0.0;
  double std_metric = 0.0;
  std::vector<double> per_seed;
};

enum class ModelKind { fet, solo, top1sim };

inline ModelKind model_kind_from_name(const std::string& name) {
  if (name == "fet") return ModelKind::fet;
  if (name == "solo") return ModelKind::solo;
  if (name == "top1sim") return ModelKind::top1sim;
  throw ValidationError("unknown model: " + name + " (expected fet|solo|top1sim)");
}

// One row per grid point, mean +/- sample std over n_seeds independent runs.
// Suites that touch synthesis (key_noise, num_parties) re-split the raw table.
// jobs > 1 runs grid points on a small thread pool; every run stays
// independently seeded, so parallel and serial results are identical.
inline std::vector<AblationPoint> run_ablation(AblationSuite suite, const std::vector<double>& grid,
                                               const Table& table, long num_secondary,
                                               double key_noise, const TrainConfig& base_tcfg,
                                               const ModelConfig& base_mcfg,
                                               const PrivacySpec& base_privacy, long n_seeds = 5,
                                               ModelKind model = ModelKind::fet, long jobs = 1) {
  check_contract(!grid.empty(), "run_ablation: empty grid");
  check_contract(n_seeds >= 1, "run_ablation: need at least one seed");

  auto run_point = [&](double value) {
    AblationPoint pt;
    pt.value = value;
    for (long s = 0; s < n_seeds; ++s) {
      TrainConfig tcfg = base_tcfg;
      tcfg.seed = base_tcfg.seed + 1000 * s;
      ModelConfig mcfg = base_mcfg;
      PrivacySpec privacy = base_privacy;
      long parties_k = num_secondary;
      double noise = key_noise;
      switch (suite) {
        case AblationSuite::dynamic_mask: mcfg.dynamic_mask = value != 0.0; break;
        case AblationSuite::party_dropout: mcfg.party_dropout = value; break;
        case AblationSuite::pe_frequency: mcfg.pe_avg_frequency = static_cast<long>(value); break;
        case AblationSuite::key_noise: noise = value; break;
        case AblationSuite::neighbors_k: mcfg.num_neighbors = static_cast<long>(value); break;
        case AblationSuite::num_parties: parties_k = static_cast<long>(value); break;
        case AblationSuite::splitavg_noise:
          privacy.noise_multiplier = value;
          privacy.enabled = value > 0.0;
          break;
      }
      Rng synth = Rng(tcfg.seed).stream(0x73796e7468ULL);
      auto parties = split_features(table, parties_k + 1, noise, synth);
      double metric = 0.0;
      switch (model) {
        case ModelKind::fet: metric = train_fet(tcfg, parties, mcfg, privacy).metrics.test_at_best; break;
        case ModelKind::solo: metric = train_solo(tcfg, parties).metrics.test_at_best; break;
        case ModelKind::top1sim: metric = train_top1sim(tcfg, parties).metrics.test_at_best; break;
      }
      pt.per_seed.push_back(metric);
    }
    double m = 0.0;
    for (double v : pt.per_seed) m += v;
    m /= pt.per_seed.size();
    double var = 0.0;
    for (double v : pt.per_seed) var += (v - m) * (v - m);
    pt.mean_metric = m;
    pt.std_metric = pt.per_seed.size() > 1 ? std::sqrt(var / (pt.per_seed.size() - 1)) : 0.0;
    return pt;
  };

  std::vector<AblationPoint> points(grid.size());
  if (jobs <= 1 || grid.size() == 1) {
    for (size_t i = 0; i < grid.size(); ++i) points[i] = run_point(grid[i]);
    return points;
  }
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1))
      points[i] = run_point(grid[i]);
  };
  std::vector<std::thread> pool;
  const size_t n_workers = std::min<size_t>(jobs, grid.size());
  pool.reserve(n_workers);
  for (size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return points;
}

// ---------------------------------------------------------------------------
// Metric writers: JSON-lines per epoch plus a one-row CSV summary.
// ---------------------------------------------------------------------------

// Timing lives only in the in-memory RunMetrics (and on stdout): the emitted
// files must regenerate bit-identically from a manifest replay.
inline void write_metrics_jsonl(const std::string& path, const RunMetrics& m) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write metrics file: " + path);
  out.precision(17);
  for (const auto& e : m.epochs) {
    out << "{\"epoch\":" << e.epoch << ",\"train_loss\":" << e.train_loss
        << ",\"val_metric\":" << e.val_metric << ",\"test_metric\":" << e.test_metric
        << ",\"epsilon\":" << e.epsilon << "}\n";
  }
}

inline void write_summary_csv(const std::string& path, const RunMetrics& m) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write summary file: " + path);
  out.precision(17);
  out << "best_epoch,best_val_metric,test_at_best,epochs_run,steps,epsilon_consumed,"
         "bytes_uploaded,budget_exceeded\n";
  out << m.best_epoch << ',' << m.best_val_metric << ',' << m.test_at_best << ','
      << m.epochs.size() << ',' << m.steps << ',' << m.epsilon_consumed << ','
      << m.bytes_uploaded << ',' << (m.budget_exceeded ? 1 : 0) << '\n';
}

inline void write_ablation_csv(const std::string& path, AblationSuite suite,
                               const std::vector<AblationPoint>& points) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write ablation file: " + path);
  out.precision(17);
  out << "suite,value,mean_metric,std_metric,n_seeds\n";
  for (const auto& p : points)
    out << ablation_suite_name(suite) << ',' << p.value << ',' << p.mean_metric << ','
        << p.std_metric << ',' << p.per_seed.size() << '\n';
}

}  // namespace fetsim
