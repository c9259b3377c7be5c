#pragma once

// The federated transformer: per-party encoders over linked neighbor
// sequences, key-conditioned dynamic masking, party dropout, aggregation of
// secondary representations (dropout-corrected mean under the privacy layer,
// or plain concatenation for the split-concat baseline), and the primary
// decoder that cross-attends its own representation over the aggregate.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/linkage.hpp"
#include "fetsim/nn.hpp"
#include "fetsim/positional.hpp"
#include "fetsim/splitavg.hpp"
#include "fetsim/tensor.hpp"

namespace fetsim {

enum class AggregatorMode { sum_avg, concat };
enum class MaskInput { encoded, raw };

struct ModelConfig {
  long hidden_size = 64;
  long num_heads = 4;
  long num_blocks = 6;
  long num_neighbors = 10;   // K
  long num_parties = 1;      // k secondary parties
  long key_dims = 4;
  double party_dropout = 0.0;   // r_d
  long pe_avg_frequency = 1;    // T_pe in epochs; 0 disables averaging
  AggregatorMode aggregator = AggregatorMode::sum_avg;
  bool dynamic_mask = true;
  MaskInput mask_input = MaskInput::encoded;
  long ffn_multiplier = 2;
  double block_dropout = 0.0;   // elementwise dropout inside blocks; off by default
  long output_dim = 1;
  long mask_mlp_hidden = 64;

  void validate() const {
    check_contract(hidden_size >= 1 && num_heads >= 1, "model: hidden/heads must be positive");
    check_contract(hidden_size % num_heads == 0, "model: hidden size must divide by heads");
    check_contract(num_blocks >= 1, "model: need at least one block");
    check_contract(num_neighbors >= 1, "model: K must be >= 1");
    check_contract(num_parties >= 1, "model: need at least one secondary party");
    check_contract(party_dropout >= 0.0 && party_dropout <= 1.0,
                   "model: party dropout rate must lie in [0,1]");
    check_contract(key_dims >= 1, "model: key dims must be positive");
    check_contract(pe_avg_frequency >= 0, "model: pe averaging frequency must be >= 0");
  }
};

struct PartyModel {
  bool is_primary = false;
  bool has_mask = false;              // secondary with dynamic masking enabled
  PositionalEncoder pe;
  Linear input_proj;
  std::vector<EncoderBlock> encoder;
  Mlp mask_mlp;                       // present iff has_mask
  std::vector<DecoderBlock> decoder;  // primary only
  Linear head;                        // primary only

  void collect(ParamSet& ps, const std::string& prefix) const {
    pe.collect(ps, prefix + ".pe");
    input_proj.collect(ps, prefix + ".input_proj");
    for (size_t i = 0; i < encoder.size(); ++i)
      encoder[i].collect(ps, prefix + ".encoder" + std::to_string(i));
    if (has_mask) mask_mlp.collect(ps, prefix + ".mask_mlp");
    for (size_t i = 0; i < decoder.size(); ++i)
      decoder[i].collect(ps, prefix + ".decoder" + std::to_string(i));
    if (is_primary) head.collect(ps, prefix + ".head");
  }
};

// Builds the primary model (index 0) followed by the k secondary models.
// feature_dims holds the per-party feature widths, primary first.
inline std::vector<PartyModel> build_fet_models(const ModelConfig& cfg,
                                                const std::vector<long>& feature_dims, Rng& rng) {
  cfg.validate();
  check_contract(static_cast<long>(feature_dims.size()) == cfg.num_parties + 1,
                 "build_fet_models: feature_dims must cover primary + secondaries");
  const long h = cfg.hidden_size;
  const long ff = cfg.ffn_multiplier * h;
  std::vector<PartyModel> models(cfg.num_parties + 1);
  for (long p = 0; p <= cfg.num_parties; ++p) {
    Rng party_rng = rng.stream(0x6d6f64656cULL, static_cast<uint64_t>(p));
    PartyModel& m = models[p];
    m.is_primary = p == 0;
    m.pe = PositionalEncoder(cfg.key_dims, h);
    m.input_proj = Linear(feature_dims[p], h, party_rng);
    for (long b = 0; b < cfg.num_blocks; ++b)
      m.encoder.emplace_back(h, cfg.num_heads, ff, party_rng);
    if (m.is_primary) {
      const long memory_dim =
          cfg.aggregator == AggregatorMode::concat ? cfg.num_parties * h : h;
      for (long b = 0; b < cfg.num_blocks; ++b)
        m.decoder.emplace_back(h, cfg.num_heads, ff, party_rng, memory_dim);
      // Shrunk head init keeps fresh models near the uniform prediction.
      m.head = Linear(h, cfg.output_dim, party_rng, 0.25);
    } else if (cfg.dynamic_mask) {
      m.has_mask = true;
      const long mask_in = cfg.mask_input == MaskInput::encoded ? h : cfg.key_dims;
      m.mask_mlp = Mlp(mask_in, {cfg.mask_mlp_hidden, cfg.mask_mlp_hidden}, 1, party_rng);
    }
  }
  return models;
}

inline ParamSet collect_all_params(const std::vector<PartyModel>& models) {
  ParamSet ps;
  for (size_t p = 0; p < models.size(); ++p)
    models[p].collect(ps, "party" + std::to_string(p));
  return ps;
}

// ---------------------------------------------------------------------------
// Party dropout
// ---------------------------------------------------------------------------

struct PartyDropoutDraw {
  std::vector<int> active_ids;  // ascending secondary ids
  int active_count = 0;
};

// Training: exactly round(r_d * k) parties are zeroed, uniformly at random,
// with at least one survivor; inference keeps everyone. The divisor downstream
// is the active count.
inline PartyDropoutDraw party_dropout_draw(int k, double rate, bool training, Rng& rng) {
  check_contract(rate >= 0.0 && rate <= 1.0, "party_dropout: rate must lie in [0,1]");
  check_contract(k >= 1, "party_dropout: no parties");
  PartyDropoutDraw draw;
  if (!training || rate == 0.0) {
    draw.active_ids.resize(k);
    for (int i = 0; i < k; ++i) draw.active_ids[i] = i;
    draw.active_count = k;
    return draw;
  }
  long drop = std::lround(rate * k);
  drop = std::min<long>(drop, k - 1);  // ceiling: at least one survivor
  std::vector<int> ids(k);
  for (int i = 0; i < k; ++i) ids[i] = i;
  for (long i = 0; i < drop; ++i) {
    const long j = i + static_cast<long>(rng.next_below(k - i));
    std::swap(ids[i], ids[j]);
  }
  draw.active_ids.assign(ids.begin() + drop, ids.end());
  std::sort(draw.active_ids.begin(), draw.active_ids.end());
  draw.active_count = static_cast<int>(draw.active_ids.size());
  return draw;
}

// Concatenation along the hidden axis; the split-concat baseline aggregator.
inline Tensor aggregate_concat(const std::vector<Tensor>& reps) {
  check_contract(!reps.empty(), "aggregate_concat: no inputs");
  return concat_last(reps);
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

enum class RunMode { train, eval };

struct ForwardStats {
  uint64_t bytes_uploaded = 0;  // representation payloads sent by secondaries
  int active_parties = 0;
};

struct ForwardHooks {
  // Per-secondary override of the dynamic mask logits (B*K each); test surface.
  const std::vector<std::vector<double>>* mask_override = nullptr;
  mpc::Transcript* transcript = nullptr;
};

inline Tensor fet_forward(const LinkedBatch& batch, std::vector<PartyModel>& models,
                          const ModelConfig& cfg, const PrivacySpec& privacy, RunMode mode,
                          Rng& step_rng, ForwardStats* stats = nullptr,
                          const ForwardHooks& hooks = {}) {
  const long k = cfg.num_parties;
  check_dim(static_cast<long>(batch.neighbor_features.size()) == k,
            "fet_forward: batch carries " + std::to_string(batch.neighbor_features.size()) +
                " secondary parties, config says " + std::to_string(k));
  check_contract(static_cast<long>(models.size()) == k + 1, "fet_forward: model count mismatch");
  if (cfg.aggregator == AggregatorMode::concat)
    check_contract(!privacy.enabled, "concat aggregator has no privacy analysis; disable DP");
  const bool training = mode == RunMode::train;
  const long B = static_cast<long>(batch.primary_ids.size());
  const long H = cfg.hidden_size;

  Rng dropout_rng = step_rng.stream(0x64726f70ULL);
  const PartyDropoutDraw draw =
      party_dropout_draw(static_cast<int>(k), cfg.party_dropout, training, dropout_rng);
  Rng block_drop_rng = step_rng.stream(0x62647270ULL);
  const BlockDropout block_drop{cfg.block_dropout, training, &block_drop_rng};

  const bool add_noise =
      privacy.enabled && privacy.noise_multiplier > 0.0 && (training || privacy.noise_at_eval);

  // Secondary encoders, in party-id order for deterministic reduction.
  std::vector<Tensor> reps, masks;
  reps.reserve(draw.active_count);
  masks.reserve(draw.active_count);
  for (int h : draw.active_ids) {
    PartyModel& m = models[h + 1];
    const Tensor& keys = batch.neighbor_keys[h];
    Tensor enc = m.pe.encode(keys);
    Tensor x = add(m.input_proj.forward(batch.neighbor_features[h]), enc);

    const bool use_mask = cfg.dynamic_mask || hooks.mask_override;
    Tensor mask_logits;
    if (hooks.mask_override) {
      mask_logits = Tensor::from_data({B, cfg.num_neighbors}, (*hooks.mask_override)[h]);
    } else if (cfg.dynamic_mask) {
      Tensor mask_in = cfg.mask_input == MaskInput::encoded ? enc : keys;
      mask_logits = reshape(m.mask_mlp.forward(mask_in), {B, cfg.num_neighbors});
    } else {
      mask_logits = Tensor::zeros({B, cfg.num_neighbors});
    }

    // Key-padding semantics: the party's own mask gates its records both in
    // its encoder self-attention and later in the decoder cross-attention.
    for (auto& block : m.encoder) x = block.forward(x, use_mask ? &mask_logits : nullptr, block_drop);

    if (privacy.enabled) x = clip_representation(x, privacy.clip_norm, static_cast<int>(k));
    reps.push_back(x);
    masks.push_back(mask_logits);
  }
  if (stats) {
    stats->active_parties = draw.active_count;
    if (training)
      stats->bytes_uploaded +=
          static_cast<uint64_t>(draw.active_count) * B * cfg.num_neighbors * H * sizeof(double);
  }

  // Primary encoder (sequence length 1).
  PartyModel& primary = models[0];
  Tensor q = add(primary.input_proj.forward(batch.primary_features),
                 primary.pe.encode(batch.primary_keys));
  for (auto& block : primary.encoder) q = block.forward(q, nullptr, block_drop);
  if (privacy.enabled) q = clip_representation(q, privacy.clip_norm, static_cast<int>(k));

  // Aggregate the secondary sequences.
  Tensor memory;
  Tensor mask_mean;
  if (cfg.aggregator == AggregatorMode::concat) {
    memory = aggregate_concat(reps);
    mask_mean = scale(weighted_sum(masks, std::vector<double>(masks.size(), 1.0)),
                      1.0 / draw.active_count);
  } else {
    std::vector<Rng> noise_streams;
    if (add_noise)
      for (int h : draw.active_ids)
        noise_streams.push_back(step_rng.stream(0x6e6f697365ULL, static_cast<uint64_t>(h)));
    memory = secure_aggregate(reps, privacy, add_noise ? &noise_streams : nullptr,
                              hooks.transcript);
    mask_mean = scale(weighted_sum(masks, std::vector<double>(masks.size(), 1.0)),
                      1.0 / draw.active_count);
    if (privacy.enabled && privacy.use_mpc && (cfg.dynamic_mask || hooks.mask_override)) {
      // The averaged mask is also only revealed as an aggregate.
      Rng mask_rng = step_rng.stream(0x6d61736bULL);
      std::vector<mpc::ShareVector> shares;
      for (const auto& m : masks)
        shares.push_back(mpc::share(mpc::encode(m.data()), std::max<int>(draw.active_count, 2),
                                    mask_rng));
      const auto summed = mpc::decode(mpc::secure_sum(shares, hooks.transcript, 1));
      std::vector<double> corr(mask_mean.numel());
      for (long i = 0; i < mask_mean.numel(); ++i)
        corr[i] = summed[i] / draw.active_count - mask_mean.data()[i];
      mask_mean = add(mask_mean, Tensor::from_data(mask_mean.shape(), std::move(corr)));
    }
  }

  // Decoder over the aggregated sequence with the combined dynamic mask.
  const bool use_mask = cfg.dynamic_mask || hooks.mask_override;
  for (auto& block : primary.decoder) q = block.forward(q, memory, use_mask ? &mask_mean : nullptr, block_drop);
  Tensor out = primary.head.forward(reshape(q, {B, H}));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary of named parameter arrays (docs/formats.md).
// ---------------------------------------------------------------------------

inline void save_params(const std::string& path, const ParamSet& ps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint: " + path);
  out.write("FETCKPT1", 8);
  const uint32_t count = static_cast<uint32_t>(ps.items.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, tensor] : ps.items) {
    const uint32_t name_len = static_cast<uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&name_len), 4);
    out.write(name.data(), name_len);
    const uint32_t ndim = static_cast<uint32_t>(tensor.shape().size());
    out.write(reinterpret_cast<const char*>(&ndim), 4);
    for (long d : tensor.shape()) {
      const uint64_t dd = static_cast<uint64_t>(d);
      out.write(reinterpret_cast<const char*>(&dd), 8);
    }
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              tensor.numel() * sizeof(double));
  }
}

inline void load_params(const std::string& path, ParamSet& ps) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != "FETCKPT1")
    throw ValidationError("not a checkpoint file: " + path);
  uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  std::map<std::string, std::pair<Shape, std::vector<double>>> entries;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), 4);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint32_t ndim = 0;
    in.read(reinterpret_cast<char*>(&ndim), 4);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      uint64_t dd = 0;
      in.read(reinterpret_cast<char*>(&dd), 8);
      shape[d] = static_cast<long>(dd);
    }
    std::vector<double> data(shape_numel(shape));
    in.read(reinterpret_cast<char*>(data.data()), data.size() * sizeof(double));
    entries[name] = {shape, std::move(data)};
  }
  if (!in) throw ValidationError("truncated checkpoint: " + path);

  check_contract(ps.items.size() == entries.size(),
                 "checkpoint: parameter count mismatch (" + std::to_string(entries.size()) +
                     " stored, " + std::to_string(ps.items.size()) + " in model)");
  for (auto& [name, tensor] : ps.items) {
    auto it = entries.find(name);
    check_contract(it != entries.end(), "checkpoint: missing parameter " + name);
    check_contract(it->second.first == tensor.shape(), "checkpoint: shape mismatch for " + name);
    tensor.data() = it->second.second;
  }
}

inline void save_checkpoint(const std::string& path, const std::vector<PartyModel>& models) {
  save_params(path, collect_all_params(models));
}

inline void load_checkpoint(const std::string& path, std::vector<PartyModel>& models) {
  ParamSet ps = collect_all_params(models);
  load_params(path, ps);
}

}  // namespace fetsim
