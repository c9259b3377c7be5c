#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fetsim/splitavg.hpp"
#include "oracles.hpp"

using namespace fetsim;

namespace {

// Scalar-loop reference: v / max(1, ||k v|| / C) per sample.
std::vector<double> clip_oracle(const std::vector<double>& data, long batch, long per_sample,
                                double c, int k) {
  std::vector<double> out(data.size());
  for (long b = 0; b < batch; ++b) {
    double ss = 0.0;
    for (long j = 0; j < per_sample; ++j) ss += data[b * per_sample + j] * data[b * per_sample + j];
    const double norm = std::sqrt(ss);
    const double scale = std::max(1.0, k * norm / c);
    for (long j = 0; j < per_sample; ++j) out[b * per_sample + j] = data[b * per_sample + j] / scale;
  }
  return out;
}

Tensor rep_of(const std::vector<double>& data, long b, long l, long h) {
  return Tensor::from_data({b, l, h}, data);
}

}  // namespace

TEST_CASE("clipping forces the norm bound") {
  // C=1, k=2: a unit-norm sample lands on 0.5, a small one is untouched.
  Tensor big = rep_of({1.0, 0.0, 0.0, 0.0}, 1, 2, 2);
  Tensor clipped = clip_representation(big, 1.0, 2);
  double norm = 0.0;
  for (double v : clipped.data()) norm += v * v;
  REQUIRE(std::fabs(std::sqrt(norm) - 0.5) < 1e-12);

  Tensor small = rep_of({0.3, 0.0, 0.0, 0.0}, 1, 2, 2);
  Tensor untouched = clip_representation(small, 1.0, 2);
  REQUIRE(untouched.data() == small.data());
}

TEST_CASE("clipping matches the scalar-loop oracle") {
  Rng rng(200);
  const long batch = 16, seq = 3, hidden = 5;
  Tensor rep = Tensor::randn({batch, seq, hidden}, rng, 0.4);
  const double c = 1.0;
  const int k = 3;
  Tensor clipped = clip_representation(rep, c, k);
  auto expect = clip_oracle(rep.data(), batch, seq * hidden, c, k);
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::fabs(clipped.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("clipping preserves direction and never grows the norm") {
  Rng rng(201);
  for (int rep_i = 0; rep_i < 50; ++rep_i) {
    Tensor rep = Tensor::randn({4, 2, 6}, rng, rng.uniform(0.01, 3.0));
    Tensor clipped = clip_representation(rep, 0.8, 2);
    for (long b = 0; b < 4; ++b) {
      double dot = 0.0, n1 = 0.0, n2 = 0.0;
      for (long j = 0; j < 12; ++j) {
        const double x = rep.data()[b * 12 + j], y = clipped.data()[b * 12 + j];
        dot += x * y;
        n1 += x * x;
        n2 += y * y;
      }
      REQUIRE(std::sqrt(n2) <= std::sqrt(n1) + 1e-15);
      if (n1 > 0.0) REQUIRE(dot / std::sqrt(n1 * n2) > 1.0 - 1e-12);
      REQUIRE(std::sqrt(n2) <= 0.4 * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("disabled aggregation is the exact arithmetic mean") {
  PrivacySpec spec;  // enabled = false
  Rng rng(202);
  Tensor a = Tensor::randn({2, 1, 4}, rng);
  Tensor b = Tensor::randn({2, 1, 4}, rng);
  Tensor got = secure_aggregate({a, b}, spec, nullptr);
  for (long i = 0; i < got.numel(); ++i)
    REQUIRE(got.data()[i] == (a.data()[i] + b.data()[i]) / 2.0);

  // Mean of equals is the input; opposite vectors cancel.
  Tensor v = Tensor::randn({1, 1, 4}, rng);
  Tensor same = secure_aggregate({v, v}, spec, nullptr);
  REQUIRE(same.data() == v.data());
  Tensor neg = scale(v, -1.0);
  Tensor zero = secure_aggregate({v, neg}, spec, nullptr);
  for (double x : zero.data()) REQUIRE(x == 0.0);
}

TEST_CASE("zero active parties is a contract error") {
  PrivacySpec spec;
  REQUIRE_THROWS_AS(secure_aggregate({}, spec, nullptr), ContractError);
}

TEST_CASE("aggregate noise variance matches the closed form") {
  // Zero inputs; the aggregate times the active count is the noise sum, whose
  // per-coordinate variance must be C^2 sigma^2 regardless of dropout.
  PrivacySpec spec;
  spec.enabled = true;
  spec.use_mpc = false;
  spec.clip_norm = 0.7;
  spec.noise_multiplier = 1.3;
  const double target = spec.clip_norm * spec.clip_norm * spec.noise_multiplier * spec.noise_multiplier;

  Rng root(203);
  for (int active : {2, 5}) {
    const long dim = 4;
    double ss = 0.0;
    long count = 0;
    const int reps = 50000 / dim;
    for (int r = 0; r < reps; ++r) {
      std::vector<Tensor> zeros(active, Tensor::zeros({1, 1, dim}));
      std::vector<Rng> streams;
      for (int h = 0; h < active; ++h) streams.push_back(root.stream(h, r));
      Tensor agg = secure_aggregate(zeros, spec, &streams);
      for (double v : agg.data()) {
        const double sum_coord = v * active;
        ss += sum_coord * sum_coord;
        ++count;
      }
    }
    const double var = ss / count;
    REQUIRE(std::fabs(var - target) / target < 0.03);
  }
}

TEST_CASE("clipped sums stay inside the sensitivity ball") {
  Rng rng(204);
  PrivacySpec spec;
  spec.enabled = true;
  spec.use_mpc = false;
  spec.clip_norm = 1.0;
  spec.noise_multiplier = 0.5;
  for (int k : {2, 5}) {
    spec.num_parties = k;
    for (int rep_i = 0; rep_i < 20; ++rep_i) {
      std::vector<Tensor> clipped;
      std::vector<Rng> streams;
      for (int h = 0; h < k; ++h) {
        Tensor raw = Tensor::randn({3, 2, 4}, rng, rng.uniform(0.05, 2.0));
        clipped.push_back(clip_representation(raw, spec.clip_norm, k));
        streams.push_back(rng.stream(h, rep_i));
      }
      REQUIRE_NOTHROW(secure_aggregate(clipped, spec, &streams));
      // Direct check of the bound as well.
      for (long b = 0; b < 3; ++b) {
        double ss = 0.0;
        for (long j = 0; j < 8; ++j) {
          double acc = 0.0;
          for (int h = 0; h < k; ++h) acc += clipped[h].data()[b * 8 + j];
          ss += acc * acc;
        }
        REQUIRE(std::sqrt(ss) <= spec.clip_norm);
      }
    }
  }
}

TEST_CASE("mpc aggregation agrees with the plaintext path") {
  Rng rng(205);
  PrivacySpec spec;
  spec.enabled = true;
  spec.clip_norm = 1.0;
  spec.noise_multiplier = 0.8;
  spec.num_parties = 3;

  std::vector<Tensor> clipped;
  for (int h = 0; h < 3; ++h) {
    Tensor raw = Tensor::randn({4, 2, 8}, rng, 0.5);
    clipped.push_back(clip_representation(raw, spec.clip_norm, 3));
  }
  auto make_streams = [&]() {
    std::vector<Rng> s;
    for (int h = 0; h < 3; ++h) s.push_back(Rng(900 + h));
    return s;
  };
  spec.use_mpc = true;
  auto s1 = make_streams();
  mpc::Transcript transcript;
  Tensor with_mpc = secure_aggregate(clipped, spec, &s1, &transcript);
  spec.use_mpc = false;
  auto s2 = make_streams();
  Tensor plain = secure_aggregate(clipped, spec, &s2);
  for (long i = 0; i < plain.numel(); ++i)
    REQUIRE(std::fabs(with_mpc.data()[i] - plain.data()[i]) < 1e-4);
  REQUIRE_FALSE(transcript.messages.empty());
}

TEST_CASE("gradients flow through clip and aggregate") {
  Rng rng(206);
  Tensor a = Tensor::randn({2, 1, 6}, rng, 1.5, true);
  Tensor b = Tensor::randn({2, 1, 6}, rng, 0.05, true);
  PrivacySpec spec;
  spec.enabled = true;
  spec.use_mpc = false;
  spec.clip_norm = 1.0;
  spec.noise_multiplier = 0.3;
  auto run = [&]() {
    std::vector<Rng> streams = {Rng(77), Rng(78)};
    std::vector<Tensor> clipped = {clip_representation(a, spec.clip_norm, 2),
                                   clip_representation(b, spec.clip_norm, 2)};
    Tensor agg = secure_aggregate(clipped, spec, &streams);
    return sum(mul(agg, agg));
  };
  backward(run());
  REQUIRE(oracle::fd_worst_rel_error([&]() { return run().scalar(); }, {a, b}) < 1e-3);
}

TEST_CASE("subsampling amplification is the (q eps, q delta) map") {
  auto [e1, d1] = amplify_by_subsampling(2.0, 1e-5, 0.5);
  REQUIRE(e1 == 1.0);
  REQUIRE(d1 == 5e-6);

  auto [e2, d2] = amplify_by_subsampling(3.7, 2e-6, 1.0);
  REQUIRE(e2 == 3.7);
  REQUIRE(d2 == 2e-6);

  Rng rng(207);
  for (int i = 0; i < 10; ++i) {
    const double eps = rng.uniform(0.1, 10.0), delta = rng.uniform(1e-8, 1e-4);
    auto [e, d] = amplify_by_subsampling(eps, delta, 0.1);
    REQUIRE(std::fabs(e - 0.1 * eps) < 1e-15);
    REQUIRE(std::fabs(d - 0.1 * delta) < 1e-18);
  }
  REQUIRE_THROWS_AS(amplify_by_subsampling(1.0, 1e-5, 0.0), ContractError);
  REQUIRE_THROWS_AS(amplify_by_subsampling(1.0, 1e-5, 1.5), ContractError);
}

TEST_CASE("privacy spec validation") {
  PrivacySpec spec;
  spec.enabled = true;
  spec.noise_multiplier = 0.0;
  REQUIRE_THROWS_AS(spec.validate(), ContractError);
  spec.noise_multiplier = 1.0;
  spec.clip_norm = 0.0;
  REQUIRE_THROWS_AS(spec.validate(), ContractError);
  spec.clip_norm = 1.0;
  REQUIRE_NOTHROW(spec.validate());
}
