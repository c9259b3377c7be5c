#pragma once

// Simulated secure multi-party summation over the ring Z_{2^64} with additive
// secret sharing of fixed-point encoded vectors. The network is simulated
// in-process; every wire message is recorded in a transcript with a byte-exact
// schema (see docs/formats.md) so a socket transport could be swapped in.
//
// Protocol per summation round:
//   1. every input owner i splits its vector into k additive shares and sends
//      share j to holder j (the owner keeps its own share locally);
//   2. every holder j sums the shares it holds and sends the partial sum to
//      the aggregator (party id = k);
//   3. the aggregator adds the k partial sums and decodes.
// The aggregator's view is the k partial sums, each marginally uniform.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_set>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/rng.hpp"
#include "fetsim/stats.hpp"

namespace fetsim::mpc {

constexpr int kDefaultFracBits = 24;

struct FixedPointVector {
  std::vector<uint64_t> values;
  int frac_bits = kDefaultFracBits;
};

inline uint64_t encode_scalar(double x, int frac_bits) {
  const double scaled = x * static_cast<double>(1ULL << frac_bits);
  check_contract(std::fabs(x) < std::ldexp(1.0, 63 - frac_bits),
                 "fixed-point encode: magnitude exceeds ring headroom");
  const long long rounded = std::llround(scaled);
  return static_cast<uint64_t>(rounded);
}

inline double decode_scalar(uint64_t v, int frac_bits) {
  return static_cast<double>(static_cast<int64_t>(v)) / static_cast<double>(1ULL << frac_bits);
}

inline FixedPointVector encode(const std::vector<double>& xs, int frac_bits = kDefaultFracBits) {
  FixedPointVector out;
  out.frac_bits = frac_bits;
  out.values.reserve(xs.size());
  for (double x : xs) out.values.push_back(encode_scalar(x, frac_bits));
  return out;
}

inline std::vector<double> decode(const FixedPointVector& v) {
  std::vector<double> out;
  out.reserve(v.values.size());
  for (uint64_t w : v.values) out.push_back(decode_scalar(w, v.frac_bits));
  return out;
}

struct ShareVector {
  std::vector<std::vector<uint64_t>> party_shares;  // k shares, ring elements
  int share_of = -1;                                // logical owner id
  int frac_bits = kDefaultFracBits;
};

// k-1 shares uniform, last = x - sum(others) mod 2^64.
inline ShareVector share(const FixedPointVector& x, int k, Rng& rng) {
  check_contract(k >= 2, "share: need at least two parties");
  ShareVector out;
  out.frac_bits = x.frac_bits;
  out.party_shares.assign(k, std::vector<uint64_t>(x.values.size()));
  for (size_t c = 0; c < x.values.size(); ++c) {
    uint64_t acc = 0;
    for (int j = 0; j + 1 < k; ++j) {
      const uint64_t r = rng.next_u64();
      out.party_shares[j][c] = r;
      acc += r;
    }
    out.party_shares[k - 1][c] = x.values[c] - acc;
  }
  return out;
}

// One simulated wire message. Serialized layout, all little-endian:
//   u64 round | u32 sender | u32 receiver | u64 vector length | u32 scale
// followed by `length` u64 ring elements.
struct Message {
  uint64_t round = 0;
  uint32_t sender = 0;
  uint32_t receiver = 0;
  uint32_t scale = kDefaultFracBits;
  std::vector<uint64_t> payload;

  std::vector<uint8_t> serialize() const {
    std::vector<uint8_t> out(8 + 4 + 4 + 8 + 4 + payload.size() * 8);
    uint8_t* p = out.data();
    auto put64 = [&p](uint64_t v) {
      for (int i = 0; i < 8; ++i) *p++ = static_cast<uint8_t>(v >> (8 * i));
    };
    auto put32 = [&p](uint32_t v) {
      for (int i = 0; i < 4; ++i) *p++ = static_cast<uint8_t>(v >> (8 * i));
    };
    put64(round);
    put32(sender);
    put32(receiver);
    put64(static_cast<uint64_t>(payload.size()));
    put32(scale);
    for (uint64_t w : payload) put64(w);
    return out;
  }
};

struct Transcript {
  std::vector<Message> messages;
};

// Sums the parties' shared inputs; only share messages and partial sums hit
// the simulated wire. Ring addition commutes, so the reduce order cannot
// change the result.
inline FixedPointVector secure_sum(const std::vector<ShareVector>& inputs,
                                   Transcript* transcript = nullptr, uint64_t round_id = 0) {
  check_contract(!inputs.empty(), "secure_sum: no inputs");
  const int owners = static_cast<int>(inputs.size());
  const int holders = static_cast<int>(inputs[0].party_shares.size());
  const size_t len = inputs[0].party_shares[0].size();
  const int frac_bits = inputs[0].frac_bits;
  for (const auto& sv : inputs) {
    check_contract(static_cast<int>(sv.party_shares.size()) == holders,
                   "secure_sum: holder count differs across inputs");
    check_contract(sv.frac_bits == frac_bits, "secure_sum: fixed-point scale mismatch");
    for (const auto& s : sv.party_shares)
      check_contract(s.size() == len, "secure_sum: vector length mismatch");
  }

  // Round 1: owner i ships share j to holder j; the owner's own share (i == j)
  // never touches the wire.
  if (transcript) {
    for (int i = 0; i < owners; ++i)
      for (int j = 0; j < holders; ++j) {
        if (i == j) continue;
        Message m;
        m.round = round_id * 2;
        m.sender = static_cast<uint32_t>(i);
        m.receiver = static_cast<uint32_t>(j);
        m.scale = static_cast<uint32_t>(frac_bits);
        m.payload = inputs[i].party_shares[j];
        transcript->messages.push_back(std::move(m));
      }
  }

  // Round 2: each holder sums its shares and ships the partial to the
  // aggregator (id = holders).
  FixedPointVector total;
  total.frac_bits = frac_bits;
  total.values.assign(len, 0);
  for (int j = 0; j < holders; ++j) {
    std::vector<uint64_t> partial(len, 0);
    for (int i = 0; i < owners; ++i)
      for (size_t c = 0; c < len; ++c) partial[c] += inputs[i].party_shares[j][c];
    if (transcript) {
      Message m;
      m.round = round_id * 2 + 1;
      m.sender = static_cast<uint32_t>(j);
      m.receiver = static_cast<uint32_t>(holders);
      m.scale = static_cast<uint32_t>(frac_bits);
      m.payload = partial;
      transcript->messages.push_back(std::move(m));
    }
    for (size_t c = 0; c < len; ++c) total.values[c] += partial[c];
  }
  return total;
}

// Plain-language verdict of the honest-but-curious transcript audit.
struct LeakageReport {
  bool passed = false;
  double min_p_value = 0.0;               // worst per-sender chi-square tail
  std::vector<double> sender_p_values;    // indexed by sender id
  bool plaintext_found = false;           // any input word verbatim on the wire
};

// Chi-square uniformity of every sender's outgoing bytes plus a scan for
// verbatim plaintext ring elements in any payload.
inline LeakageReport transcript_leakage_check(const Transcript& transcript,
                                              const std::vector<FixedPointVector>& plaintexts) {
  LeakageReport report;

  int max_sender = -1;
  for (const auto& m : transcript.messages) max_sender = std::max(max_sender, static_cast<int>(m.sender));
  if (max_sender < 0) return report;

  std::vector<std::vector<long>> histograms(max_sender + 1, std::vector<long>(256, 0));
  std::vector<long> totals(max_sender + 1, 0);
  std::unordered_set<uint64_t> plain_words;
  for (const auto& pv : plaintexts)
    for (uint64_t w : pv.values) plain_words.insert(w);

  for (const auto& m : transcript.messages) {
    for (uint64_t w : m.payload) {
      if (plain_words.count(w)) report.plaintext_found = true;
      for (int i = 0; i < 8; ++i) {
        histograms[m.sender][(w >> (8 * i)) & 0xff]++;
        totals[m.sender]++;
      }
    }
  }

  report.min_p_value = 1.0;
  report.sender_p_values.assign(max_sender + 1, 1.0);
  for (int s = 0; s <= max_sender; ++s) {
    if (totals[s] == 0) continue;
    const double expect = static_cast<double>(totals[s]) / 256.0;
    double chi2 = 0.0;
    for (long count : histograms[s]) {
      const double d = count - expect;
      chi2 += d * d / expect;
    }
    const double p = chi_square_tail(chi2, 255);
    report.sender_p_values[s] = p;
    report.min_p_value = std::min(report.min_p_value, p);
  }
  report.passed = !report.plaintext_found && report.min_p_value > 0.01;
  return report;
}

}  // namespace fetsim::mpc
