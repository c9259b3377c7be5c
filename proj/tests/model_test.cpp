#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <numeric>

#include "fetsim/fet.hpp"
#include "fetsim/positional.hpp"
#include "oracles.hpp"

using namespace fetsim;

namespace {

// ---------------------------------------------------------------------------
// Scripted re-implementation of every block with plain loops; the reference
// side for the forward-pass check.
// ---------------------------------------------------------------------------

using Vec = std::vector<double>;

Vec oracle_linear(const Vec& x, long rows, long in, const Linear& lin) {
  const long out = lin.weight.dim(1);
  Vec y(rows * out, 0.0);
  for (long r = 0; r < rows; ++r)
    for (long o = 0; o < out; ++o) {
      double s = lin.bias.data()[o];
      for (long i = 0; i < in; ++i) s += x[r * in + i] * lin.weight.data()[i * out + o];
      y[r * out + o] = s;
    }
  return y;
}

Vec oracle_pe(const Vec& keys, long rows, const PositionalEncoder& pe) {
  const long H = pe.hidden, dk = pe.key_dims;
  const long per_dim = static_cast<long>(pe.frequencies.size());
  Vec phi(rows * H, 0.0);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < dk; ++c)
      for (long j = 0; j < per_dim; ++j) {
        const long base = (c * per_dim + j) * 2;
        const double angle = pe.frequencies[j] * keys[r * dk + c];
        if (base < H) phi[r * H + base] = std::sin(angle);
        if (base + 1 < H) phi[r * H + base + 1] = std::cos(angle);
      }
  Vec proj(rows * H, 0.0);
  for (long r = 0; r < rows; ++r)
    for (long o = 0; o < H; ++o) {
      double s = pe.proj_bias.data()[o];
      for (long i = 0; i < H; ++i) s += phi[r * H + i] * pe.proj_weight.data()[i * H + o];
      proj[r * H + o] = phi[r * H + o] + s;
    }
  return proj;
}

// Multi-head attention including the projections, additive key logits shared
// across heads and query positions.
Vec oracle_mha(const Vec& q_in, long Lq, const Vec& kv_in, long Lk, long B, long H, long kv_dim,
               const MultiHeadAttention& mha, const Vec* key_logits) {
  const long heads = mha.num_heads, dh = H / heads;
  Vec q = oracle_linear(q_in, B * Lq, H, mha.wq);
  Vec k = oracle_linear(kv_in, B * Lk, kv_dim, mha.wk);
  Vec v = oracle_linear(kv_in, B * Lk, kv_dim, mha.wv);
  Vec ctx(B * Lq * H, 0.0);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  for (long b = 0; b < B; ++b)
    for (long h = 0; h < heads; ++h)
      for (long i = 0; i < Lq; ++i) {
        Vec scores(Lk);
        for (long j = 0; j < Lk; ++j) {
          double s = 0.0;
          for (long d = 0; d < dh; ++d)
            s += q[(b * Lq + i) * H + h * dh + d] * k[(b * Lk + j) * H + h * dh + d];
          s *= sc;
          if (key_logits) s += (*key_logits)[b * Lk + j];
          scores[j] = s;
        }
        const double mx = *std::max_element(scores.begin(), scores.end());
        double denom = 0.0;
        for (auto& s : scores) {
          s = std::exp(s - mx);
          denom += s;
        }
        for (auto& s : scores) s /= denom;
        for (long d = 0; d < dh; ++d) {
          double o = 0.0;
          for (long j = 0; j < Lk; ++j) o += scores[j] * v[(b * Lk + j) * H + h * dh + d];
          ctx[(b * Lq + i) * H + h * dh + d] = o;
        }
      }
  return oracle_linear(ctx, B * Lq, H, mha.wo);
}

Vec oracle_ln(const Vec& x, long rows, const LayerNorm& ln) {
  return oracle::naive_layer_norm(x, ln.gain.data(), ln.bias.data(), rows, ln.gain.dim(0));
}

Vec oracle_add(const Vec& a, const Vec& b) {
  Vec out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vec oracle_relu(const Vec& x) {
  Vec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : 0.0;
  return out;
}

Vec oracle_encoder_block(const Vec& x, long B, long L, long H, const EncoderBlock& blk,
                         const Vec* key_logits) {
  Vec attn = oracle_mha(x, L, x, L, B, H, H, blk.attn, key_logits);
  Vec h = oracle_ln(oracle_add(x, attn), B * L, blk.norm1);
  Vec f1 = oracle_relu(oracle_linear(h, B * L, H, blk.ff1));
  Vec f2 = oracle_linear(f1, B * L, blk.ff1.weight.dim(1), blk.ff2);
  return oracle_ln(oracle_add(h, f2), B * L, blk.norm2);
}

Vec oracle_decoder_block(const Vec& y, const Vec& memory, long B, long Lk, long H, long mem_dim,
                         const DecoderBlock& blk, const Vec* key_logits) {
  Vec self_attn = oracle_mha(y, 1, y, 1, B, H, H, blk.self_attn, nullptr);
  Vec h = oracle_ln(oracle_add(y, self_attn), B, blk.norm1);
  Vec cross = oracle_mha(h, 1, memory, Lk, B, H, mem_dim, blk.cross_attn, key_logits);
  h = oracle_ln(oracle_add(h, cross), B, blk.norm2);
  Vec f1 = oracle_relu(oracle_linear(h, B, H, blk.ff1));
  Vec f2 = oracle_linear(f1, B, blk.ff1.weight.dim(1), blk.ff2);
  return oracle_ln(oracle_add(h, f2), B, blk.norm3);
}

Vec oracle_mlp(const Vec& x, long rows, long in, const Mlp& mlp) {
  Vec h = x;
  long cur = in;
  for (size_t i = 0; i < mlp.layers.size(); ++i) {
    h = oracle_linear(h, rows, cur, mlp.layers[i]);
    cur = mlp.layers[i].weight.dim(1);
    if (i + 1 < mlp.layers.size()) h = oracle_relu(h);
  }
  return h;
}

// Toy linked batch over synthetic parties.
struct ToySetup {
  std::vector<PartyDataset> parties;
  LinkedBatch batch;
  ModelConfig cfg;
  std::vector<PartyModel> models;
};

ToySetup make_toy(long num_secondary, long B, long K, uint64_t seed, long hidden = 8,
                  long blocks = 1) {
  Rng rng(seed);
  Table t = make_tabular(40, 4 * (num_secondary + 1), 0, rng);
  ToySetup s;
  s.parties = split_features(t, num_secondary + 1, 0.05, rng, KeyMode::pca, 2);
  std::vector<long> rows;
  for (long i = 0; i < B; ++i) rows.push_back(i * 3 + 1);
  std::vector<long> all(40);
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::vector<long>> candidates(num_secondary, all);
  s.batch = build_linked_batch(s.parties, rows, candidates, K);

  s.cfg.hidden_size = hidden;
  s.cfg.num_heads = 2;
  s.cfg.num_blocks = blocks;
  s.cfg.num_neighbors = K;
  s.cfg.num_parties = num_secondary;
  s.cfg.key_dims = 2;
  s.cfg.output_dim = 1;
  s.cfg.mask_mlp_hidden = 16;
  std::vector<long> dims;
  for (const auto& p : s.parties) dims.push_back(p.features.cols);
  Rng model_rng(seed + 1);
  s.models = build_fet_models(s.cfg, dims, model_rng);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

TEST_CASE("positional encoding is a pure function of the key") {
  PositionalEncoder pe(3, 12);
  Rng rng(300);
  Tensor keys = Tensor::from_data({2, 2, 3}, {0.1, -0.4, 0.9, 0.1, -0.4, 0.9,
                                              0.1, -0.4, 0.9, 0.1, -0.4, 0.9});
  Tensor enc = pe.encode(keys);
  // All four positions carry the same key, so all four encodings agree.
  for (long p = 1; p < 4; ++p)
    for (long c = 0; c < 12; ++c)
      REQUIRE(enc.data()[p * 12 + c] == enc.data()[c]);
}

TEST_CASE("zero keys through a zero-initialized projection give the sinusoid base") {
  PositionalEncoder pe(2, 8);
  Tensor zero_keys = Tensor::zeros({1, 1, 2});
  Tensor enc = pe.encode(zero_keys);
  // sin(0) = 0, cos(0) = 1 in alternating slots.
  for (long i = 0; i < 8; ++i) REQUIRE(enc.data()[i] == (i % 2 == 0 ? 0.0 : 1.0));
}

TEST_CASE("positional encoding matches an independent re-implementation") {
  Rng rng(301);
  PositionalEncoder pe(2, 8);
  // Give the learnable part some content.
  for (auto& w : pe.proj_weight.data()) w = rng.normal(0.0, 0.3);
  for (auto& b : pe.proj_bias.data()) b = rng.normal(0.0, 0.3);
  Tensor keys = Tensor::uniform({3, 4, 2}, rng, -1.0, 1.0);
  Tensor enc = pe.encode(keys);
  Vec expect = oracle_pe(keys.data(), 12, pe);
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::fabs(enc.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("key dimension mismatch raises") {
  PositionalEncoder pe(4, 16);
  Tensor keys = Tensor::zeros({2, 3, 3});
  REQUIRE_THROWS_AS(pe.encode(keys), DimError);
}

TEST_CASE("pe_average is the elementwise mean with broadcast") {
  // Idempotent on equal layers.
  PositionalEncoder a(2, 8), b(2, 8);
  a.proj_bias.data()[0] = 1.0;
  b.proj_bias.data()[0] = 1.0;
  pe_average({&a, &b});
  REQUIRE(a.proj_bias.data()[0] == 1.0);
  REQUIRE(b.proj_bias.data()[0] == 1.0);

  // Two parties at 1 and 3 meet at 2.
  a.proj_bias.data()[0] = 1.0;
  b.proj_bias.data()[0] = 3.0;
  pe_average({&a, &b});
  REQUIRE(a.proj_bias.data()[0] == 2.0);
  REQUIRE(b.proj_bias.data()[0] == 2.0);

  // Five random parties against the elementwise-loop oracle.
  Rng rng(302);
  std::vector<PositionalEncoder> layers;
  for (int i = 0; i < 5; ++i) {
    layers.emplace_back(2, 8);
    for (auto& w : layers.back().proj_weight.data()) w = rng.normal();
    for (auto& v : layers.back().proj_bias.data()) v = rng.normal();
  }
  std::vector<double> expect_w(64, 0.0), expect_b(8, 0.0);
  for (const auto& l : layers) {
    for (int i = 0; i < 64; ++i) expect_w[i] += l.proj_weight.data()[i] / 5.0;
    for (int i = 0; i < 8; ++i) expect_b[i] += l.proj_bias.data()[i] / 5.0;
  }
  std::vector<PositionalEncoder*> ptrs;
  for (auto& l : layers) ptrs.push_back(&l);
  pe_average(ptrs);
  for (const auto& l : layers) {
    for (int i = 0; i < 64; ++i) REQUIRE(std::fabs(l.proj_weight.data()[i] - expect_w[i]) < 1e-12);
    for (int i = 0; i < 8; ++i) REQUIRE(std::fabs(l.proj_bias.data()[i] - expect_b[i]) < 1e-12);
  }

  PositionalEncoder other(3, 8);
  std::vector<PositionalEncoder*> bad = {&layers[0], &other};
  REQUIRE_THROWS_AS(pe_average(bad), ContractError);
}

TEST_CASE("pe alignment: after averaging, cross-party equals within-party exactly") {
  Rng rng(303);
  PositionalEncoder pa(2, 8), pb(2, 8);
  for (auto& w : pa.proj_weight.data()) w = rng.normal(0.0, 0.5);
  for (auto& w : pb.proj_weight.data()) w = rng.normal(0.0, 0.5);

  const long n = 20;
  Tensor keys = Tensor::uniform({1, n, 2}, rng, -1.0, 1.0);

  auto pair_distances = [&](const Tensor& ea, const Tensor& eb) {
    // Correlation between key distances and encoding distances where the two
    // sides of each pair come from the two layers.
    std::vector<double> kd, ed;
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < n; ++j) {
        if (i == j) continue;
        double s = 0.0;
        for (long c = 0; c < 2; ++c) {
          const double d = keys.data()[i * 2 + c] - keys.data()[j * 2 + c];
          s += d * d;
        }
        kd.push_back(std::sqrt(s));
        s = 0.0;
        for (long c = 0; c < 8; ++c) {
          const double d = ea.data()[i * 8 + c] - eb.data()[j * 8 + c];
          s += d * d;
        }
        ed.push_back(std::sqrt(s));
      }
    const long m = static_cast<long>(kd.size());
    double mk = 0, me = 0;
    for (long i = 0; i < m; ++i) {
      mk += kd[i];
      me += ed[i];
    }
    mk /= m;
    me /= m;
    double cov = 0, vk = 0, ve = 0;
    for (long i = 0; i < m; ++i) {
      cov += (kd[i] - mk) * (ed[i] - me);
      vk += (kd[i] - mk) * (kd[i] - mk);
      ve += (ed[i] - me) * (ed[i] - me);
    }
    return cov / std::sqrt(vk * ve);
  };

  Tensor enc_a0 = pa.encode(keys), enc_b0 = pb.encode(keys);
  const double cross_before = pair_distances(enc_a0, enc_b0);
  const double within_before = pair_distances(enc_a0, enc_a0);
  REQUIRE(cross_before != within_before);

  pe_average({&pa, &pb});
  Tensor enc_a = pa.encode(keys), enc_b = pb.encode(keys);
  // Identical layers produce bitwise identical encodings, so the two
  // correlations collapse to exactly the same number.
  REQUIRE(enc_a.data() == enc_b.data());
  REQUIRE(pair_distances(enc_a, enc_b) == pair_distances(enc_a, enc_a));
}

// ---------------------------------------------------------------------------
// Dynamic masking
// ---------------------------------------------------------------------------

TEST_CASE("zeroed mask mlp with a final bias emits a constant mask") {
  Rng rng(304);
  Mlp mlp(8, {16, 16}, 1, rng);
  for (auto& l : mlp.layers) {
    std::fill(l.weight.data().begin(), l.weight.data().end(), 0.0);
    std::fill(l.bias.data().begin(), l.bias.data().end(), 0.0);
  }
  mlp.layers.back().bias.data()[0] = -2.5;
  Tensor in = Tensor::uniform({4, 5, 8}, rng, -2.0, 2.0);
  Tensor out = mlp.forward(in);
  for (double v : out.data()) REQUIRE(v == -2.5);
}

TEST_CASE("identical keys get identical mask values") {
  ToySetup s = make_toy(1, 2, 3, 42);
  PartyModel& sec = s.models[1];
  Rng rng(305);
  Tensor keys = Tensor::from_data({1, 2, 2}, {0.3, -0.7, 0.3, -0.7});
  Tensor enc = sec.pe.encode(keys);
  Tensor logits = sec.mask_mlp.forward(enc);
  REQUIRE(logits.data()[0] == logits.data()[1]);
}

TEST_CASE("mask mlp matches a hand-rolled forward pass") {
  Rng rng(306);
  Mlp mlp(4, {16, 16}, 1, rng);
  Tensor in = Tensor::uniform({6, 4}, rng, -1.0, 1.0);
  Tensor out = mlp.forward(in);
  Vec expect = oracle_mlp(in.data(), 6, 4, mlp);
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::fabs(out.data()[i] - expect[i]) < 1e-12);
}

// ---------------------------------------------------------------------------
// Party dropout
// ---------------------------------------------------------------------------

TEST_CASE("party dropout keeps everyone at rate zero or in eval") {
  Rng rng(307);
  auto d1 = party_dropout_draw(5, 0.0, true, rng);
  REQUIRE(d1.active_count == 5);
  auto d2 = party_dropout_draw(5, 0.9, false, rng);
  REQUIRE(d2.active_count == 5);
}

TEST_CASE("party dropout drops round(r_d * k) parties") {
  Rng rng(308);
  auto d = party_dropout_draw(5, 0.6, true, rng);
  REQUIRE(d.active_count == 2);
  // Full dropout hits the one-survivor ceiling.
  auto e = party_dropout_draw(5, 1.0, true, rng);
  REQUIRE(e.active_count == 1);
  REQUIRE_THROWS_AS(party_dropout_draw(5, 1.5, true, rng), ContractError);
  REQUIRE_THROWS_AS(party_dropout_draw(5, -0.1, true, rng), ContractError);
}

TEST_CASE("party dropout survival frequencies concentrate") {
  Rng rng(309);
  const int k = 10, trials = 10000;
  std::vector<long> survived(k, 0);
  for (int t = 0; t < trials; ++t) {
    auto d = party_dropout_draw(k, 0.5, true, rng);
    REQUIRE(d.active_count == 5);
    for (int id : d.active_ids) survived[id]++;
  }
  for (int i = 0; i < k; ++i) {
    REQUIRE(survived[i] > 5000 - 150);
    REQUIRE(survived[i] < 5000 + 150);
  }
}

TEST_CASE("dropout-corrected mean keeps constant representations fixed") {
  PrivacySpec spec;  // disabled: pure mean semantics
  for (int active : {1, 2, 3, 4, 5}) {
    std::vector<Tensor> reps(active, Tensor::full({2, 1, 4}, 0.75));
    Tensor agg = secure_aggregate(reps, spec, nullptr);
    for (double v : agg.data()) REQUIRE(v == 0.75);
  }
  Rng rng(310);
  const double c = rng.normal();
  for (int active : {2, 3, 5}) {
    std::vector<Tensor> reps(active, Tensor::full({1, 1, 3}, c));
    Tensor agg = secure_aggregate(reps, spec, nullptr);
    for (double v : agg.data()) REQUIRE(std::fabs(v - c) <= 2e-16 * std::fabs(c));
  }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

TEST_CASE("forward matches the block-by-block scripted recomputation") {
  ToySetup s = make_toy(1, 2, 3, 1234);
  PrivacySpec privacy;  // disabled
  Rng step(77);
  Tensor pred = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step);

  const long B = 2, K = 3, H = 8;
  PartyModel& sec = s.models[1];
  PartyModel& pri = s.models[0];

  // Secondary party path.
  Vec enc = oracle_pe(s.batch.neighbor_keys[0].data(), B * K, sec.pe);
  Vec x = oracle_add(
      oracle_linear(s.batch.neighbor_features[0].data(), B * K, s.parties[1].features.cols,
                    sec.input_proj),
      enc);
  Vec mask = oracle_mlp(enc, B * K, H, sec.mask_mlp);
  x = oracle_encoder_block(x, B, K, H, sec.encoder[0], &mask);

  // Primary encoder (L = 1), no mask.
  Vec penc = oracle_pe(s.batch.primary_keys.data(), B, pri.pe);
  Vec y = oracle_add(
      oracle_linear(s.batch.primary_features.data(), B, s.parties[0].features.cols,
                    pri.input_proj),
      penc);
  y = oracle_encoder_block(y, B, 1, H, pri.encoder[0], nullptr);

  // Single secondary: the aggregate is the representation itself and the
  // combined mask is the party's own mask.
  y = oracle_decoder_block(y, x, B, K, H, H, pri.decoder[0], &mask);
  Vec out = oracle_linear(y, B, H, pri.head);

  REQUIRE(pred.numel() == static_cast<long>(out.size()));
  for (size_t i = 0; i < out.size(); ++i)
    REQUIRE(std::fabs(pred.data()[i] - out[i]) < 1e-10);
}

TEST_CASE("forward is deterministic under a fixed seed") {
  ToySetup s = make_toy(2, 3, 4, 555);
  PrivacySpec privacy;
  auto run = [&]() {
    Rng step(99);
    return fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::train, step);
  };
  REQUIRE(run().data() == run().data());
}

TEST_CASE("swapping two secondary parties leaves predictions unchanged") {
  ToySetup s = make_toy(2, 3, 4, 901);
  PrivacySpec privacy;
  Rng step(7);
  Tensor before = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step);

  // Permute the two secondaries: data and models move together.
  std::swap(s.batch.neighbor_keys[0], s.batch.neighbor_keys[1]);
  std::swap(s.batch.neighbor_features[0], s.batch.neighbor_features[1]);
  std::swap(s.batch.neighbor_ids[0], s.batch.neighbor_ids[1]);
  std::swap(s.models[1], s.models[2]);
  Rng step2(7);
  Tensor after = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step2);
  REQUIRE(before.data() == after.data());
}

TEST_CASE("rotating several parties changes predictions only at rounding level") {
  ToySetup s = make_toy(3, 2, 3, 902);
  PrivacySpec privacy;
  Rng step(8);
  Tensor before = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step);

  // Rotate parties 0 <- 1 <- 2 <- 0.
  auto rot = [](auto& v) { std::rotate(v.begin(), v.begin() + 1, v.end()); };
  rot(s.batch.neighbor_keys);
  rot(s.batch.neighbor_features);
  rot(s.batch.neighbor_ids);
  std::rotate(s.models.begin() + 1, s.models.begin() + 2, s.models.end());
  Rng step2(8);
  Tensor after = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step2);
  for (long i = 0; i < before.numel(); ++i)
    REQUIRE(std::fabs(before.data()[i] - after.data()[i]) < 1e-9);
}

TEST_CASE("masked-out records cannot influence the prediction") {
  ToySetup s = make_toy(1, 2, 4, 903);
  PrivacySpec privacy;  // off: no clip coupling across positions

  // Mask out neighbor 2 of row 0 and neighbor 0 of row 1.
  std::vector<std::vector<double>> overrides(1, std::vector<double>(2 * 4, 0.0));
  overrides[0][0 * 4 + 2] = -1e9;
  overrides[0][1 * 4 + 0] = -1e9;
  ForwardHooks hooks;
  hooks.mask_override = &overrides;

  Rng step(11);
  Tensor before = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step, nullptr, hooks);

  // Arbitrarily perturb exactly those records' features.
  const long d_f = s.parties[1].features.cols;
  auto& feats = s.batch.neighbor_features[0].data();
  for (long c = 0; c < d_f; ++c) {
    feats[(0 * 4 + 2) * d_f + c] = 1e4 * (c + 1);
    feats[(1 * 4 + 0) * d_f + c] = -3e3 * (c + 2);
  }
  Rng step2(11);
  Tensor after = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step2, nullptr, hooks);
  for (long i = 0; i < before.numel(); ++i)
    REQUIRE(std::fabs(before.data()[i] - after.data()[i]) < 1e-9);
}

TEST_CASE("gradients reach every parameter through the full forward") {
  ToySetup s = make_toy(2, 2, 3, 904);
  PrivacySpec privacy;
  privacy.enabled = true;
  privacy.use_mpc = false;
  privacy.clip_norm = 4.0;
  privacy.noise_multiplier = 0.1;
  privacy.num_parties = 2;

  Rng step(13);
  Tensor pred = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::train, step);
  Tensor loss = mse_loss(reshape(pred, {2}), {0.3, -0.8});
  backward(loss);

  ParamSet ps = collect_all_params(s.models);
  long with_grad = 0, total = 0;
  for (auto& [name, t] : ps.items) {
    ++total;
    if (t.has_grad()) {
      double mag = 0.0;
      for (double g : t.grad()) mag += std::fabs(g);
      if (mag > 0.0) ++with_grad;
    }
  }
  // Every parameter family participates: allow only zero-initialized PE
  // projections of parties whose gradient genuinely vanishes elsewhere.
  REQUIRE(with_grad > total * 8 / 10);
  // Mask MLPs specifically receive gradient.
  for (int h = 1; h <= 2; ++h) {
    ParamSet mask_ps;
    s.models[h].mask_mlp.collect(mask_ps, "m");
    bool any = false;
    for (auto& [n, t] : mask_ps.items)
      if (t.has_grad())
        for (double g : t.grad())
          if (g != 0.0) any = true;
    REQUIRE(any);
  }
}

TEST_CASE("concat aggregator shapes and contract") {
  Rng rng(905);
  Tensor a = Tensor::randn({2, 3, 4}, rng);
  REQUIRE(aggregate_concat({a}).data() == a.data());
  Tensor b = Tensor::randn({2, 3, 4}, rng);
  Tensor cat = aggregate_concat({a, b});
  REQUIRE(cat.shape() == Shape({2, 3, 8}));

  ToySetup s = make_toy(2, 2, 3, 906, 8, 1);
  s.cfg.aggregator = AggregatorMode::concat;
  std::vector<long> dims;
  for (const auto& p : s.parties) dims.push_back(p.features.cols);
  Rng mrng(907);
  s.models = build_fet_models(s.cfg, dims, mrng);
  PrivacySpec privacy;
  Rng step(14);
  Tensor pred = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step);
  REQUIRE(pred.shape() == Shape({2, 1}));

  privacy.enabled = true;
  privacy.noise_multiplier = 1.0;
  REQUIRE_THROWS_AS(fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step),
                    ContractError);
}

TEST_CASE("checkpoints round-trip the full parameter set") {
  ToySetup s = make_toy(2, 2, 3, 908);
  const std::string path = "/tmp/fetsim_test_ckpt.bin";
  PrivacySpec privacy;
  Rng step(15);
  Tensor before = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step);
  save_checkpoint(path, s.models);

  // Scramble, then restore.
  ParamSet ps = collect_all_params(s.models);
  Rng noise(909);
  for (auto& [n, t] : ps.items)
    for (auto& v : t.data()) v += noise.normal();
  load_checkpoint(path, s.models);
  Rng step2(15);
  Tensor after = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step2);
  REQUIRE(after.data() == before.data());
  std::remove(path.c_str());
}

TEST_CASE("finite differences through the whole two-party model") {
  // Small toy model; the acceptance suite runs the full-size version.
  ToySetup s = make_toy(1, 2, 3, 910);
  PrivacySpec privacy;
  auto run = [&]() {
    Rng step(16);
    Tensor pred = fet_forward(s.batch, s.models, s.cfg, privacy, RunMode::eval, step);
    return mse_loss(reshape(pred, {2}), {0.25, -0.5});
  };
  backward(run());
  ParamSet ps = collect_all_params(s.models);
  REQUIRE(oracle::fd_worst_rel_error([&]() { return run().scalar(); }, ps.tensors()) < 1e-3);
}
