#pragma once

// Fuzzy record linkage and data synthesis: key derivation (PCA of the primary
// party's feature block, min-max scaled to [-1,1], independently noised per
// party), candidate subsampling, exact brute-force kNN alignment, and the
// LinkedBatch construction that feeds the models. Linkage runs in the clear
// inside the trusted simulator.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/data.hpp"
#include "fetsim/rng.hpp"
#include "fetsim/tensor.hpp"

namespace fetsim {

enum class PartyRole { primary, secondary };

struct PartyDataset {
  DataMatrix keys;       // N x d_k, same d_k across parties
  DataMatrix features;   // N x d_f
  std::vector<double> labels;  // primary only
  PartyRole role = PartyRole::secondary;
  std::vector<std::string> feature_names;

  long size() const { return features.rows; }
};

// ---------------------------------------------------------------------------
// PCA key derivation
// ---------------------------------------------------------------------------

// Projection of the centered data onto the top principal components
// (covariance eigenvectors, descending eigenvalues, sign fixed so each
// component's largest-magnitude loading is positive). Rank-deficient inputs
// get zero-padded components and a warning.
inline DataMatrix derive_keys_pca(const DataMatrix& features, long out_dims = 4,
                                  bool* rank_warning = nullptr) {
  const long n = features.rows, d = features.cols;
  check_contract(n > out_dims, "derive_keys_pca: need more rows than key dimensions");
  for (double v : features.values)
    check_contract(std::isfinite(v), "derive_keys_pca: non-finite feature value");

  Eigen::MatrixXd x(n, d);
  for (long r = 0; r < n; ++r)
    for (long c = 0; c < d; ++c) x(r, c) = features.at(r, c);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  check_contract(solver.info() == Eigen::Success, "derive_keys_pca: eigensolver failed");
  // Ascending order from Eigen; walk from the back for descending.
  const auto& vals = solver.eigenvalues();
  const auto& vecs = solver.eigenvectors();
  const double max_eig = std::max(vals(d - 1), 0.0);

  DataMatrix keys(n, out_dims);
  bool warned = false;
  for (long kcomp = 0; kcomp < out_dims; ++kcomp) {
    const long src = d - 1 - kcomp;
    if (src < 0 || vals(src) <= 1e-12 * std::max(max_eig, 1e-300)) {
      warned = true;  // zero component padding
      continue;
    }
    Eigen::VectorXd v = vecs.col(src);
    // Sign convention: largest-magnitude loading positive, first occurrence.
    long arg = 0;
    for (long j = 1; j < d; ++j)
      if (std::fabs(v(j)) > std::fabs(v(arg))) arg = j;
    if (v(arg) < 0.0) v = -v;
    const Eigen::VectorXd proj = x * v;
    for (long r = 0; r < n; ++r) keys.at(r, kcomp) = proj(r);
  }
  if (warned) {
    if (rank_warning)
      *rank_warning = true;
    else
      std::cerr << "warning: feature rank below requested key dimensions; "
                   "padding with zero components\n";
  }
  return keys;
}

// Per-dimension min-max scaling to [-1,1]; constant columns map to 0.
inline void minmax_scale_keys(DataMatrix& keys) {
  for (long c = 0; c < keys.cols; ++c) {
    double lo = keys.at(0, c), hi = keys.at(0, c);
    for (long r = 1; r < keys.rows; ++r) {
      lo = std::min(lo, keys.at(r, c));
      hi = std::max(hi, keys.at(r, c));
    }
    const double span = hi - lo;
    for (long r = 0; r < keys.rows; ++r)
      keys.at(r, c) = span > 0.0 ? 2.0 * (keys.at(r, c) - lo) / span - 1.0 : 0.0;
  }
}

// keys' = keys + iid N(0, sigma^2); sigma = 0 is the exact-linkage mode.
inline DataMatrix fuzz_keys(const DataMatrix& keys, double noise_scale, Rng& rng) {
  check_contract(noise_scale >= 0.0, "fuzz_keys: negative noise scale");
  DataMatrix out = keys;
  if (noise_scale == 0.0) return out;
  for (auto& v : out.values) v += rng.normal(0.0, noise_scale);
  return out;
}

// ---------------------------------------------------------------------------
// Subsampling and kNN
// ---------------------------------------------------------------------------

// Uniform sample of floor(q*N) distinct row ids (ascending). Throws when the
// sample cannot cover `min_size` rows.
inline std::vector<long> subsample_indices(long n, double q, Rng& rng, long min_size = 1) {
  check_contract(q > 0.0 && q <= 1.0, "subsample: rate must be in (0,1]");
  const long m = static_cast<long>(std::floor(q * n));
  check_contract(m >= min_size, "subsample: floor(q*N) = " + std::to_string(m) +
                                    " is below the required " + std::to_string(min_size));
  std::vector<long> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  // Partial Fisher-Yates: the first m slots become the sample.
  for (long i = 0; i < m; ++i) {
    const long j = i + static_cast<long>(rng.next_below(n - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Exact brute-force kNN: row i of the result holds the indices of the K
// candidates closest to primary key i in Euclidean distance, ascending, ties
// broken by candidate index.
inline std::vector<long> knn_link(const DataMatrix& primary_keys, const DataMatrix& candidate_keys,
                                  long k_neighbors) {
  check_dim(primary_keys.cols == candidate_keys.cols, "knn_link: key dimensions disagree");
  const long b = primary_keys.rows, m = candidate_keys.rows, d = primary_keys.cols;
  check_contract(m >= k_neighbors, "knn_link: fewer candidates than requested neighbors");
  std::vector<long> out(b * k_neighbors);
  std::vector<std::pair<double, long>> dist(m);
  for (long i = 0; i < b; ++i) {
    const double* p = primary_keys.row(i);
    for (long j = 0; j < m; ++j) {
      const double* c = candidate_keys.row(j);
      double s = 0.0;
      for (long t = 0; t < d; ++t) {
        const double diff = p[t] - c[t];
        s += diff * diff;
      }
      dist[j] = {s, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + k_neighbors, dist.end());
    for (long t = 0; t < k_neighbors; ++t) out[i * k_neighbors + t] = dist[t].second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature splitting / party synthesis
// ---------------------------------------------------------------------------

enum class KeyMode { pca, random };

// Partitions the feature columns of `table` into k contiguous random groups
// (sizes differ by at most one, each group keeping the original column
// order). Party 0 is the primary and receives the labels. Keys are derived
// from the primary block (or drawn uniformly in [-1,1] in random mode),
// min-max scaled, and every party receives an independently fuzzed copy.
inline std::vector<PartyDataset> split_features(const Table& table, long k, double key_noise,
                                                Rng& rng, KeyMode key_mode = KeyMode::pca,
                                                long key_dims = 4) {
  const long d = table.features.cols;
  check_contract(k >= 1, "split_features: need at least one party");
  check_contract(d >= k, "split_features: fewer feature columns than parties");

  std::vector<long> perm(d);
  std::iota(perm.begin(), perm.end(), 0);
  for (long i = d; i > 1; --i) std::swap(perm[i - 1], perm[rng.next_below(i)]);

  // Contiguous groups over the permuted order, earlier groups get the extra
  // column; assignment is random, the in-group column order stays original.
  std::vector<std::vector<long>> groups(k);
  const long base = d / k, extra = d % k;
  long pos = 0;
  for (long g = 0; g < k; ++g) {
    const long sz = base + (g < extra ? 1 : 0);
    groups[g].assign(perm.begin() + pos, perm.begin() + pos + sz);
    std::sort(groups[g].begin(), groups[g].end());
    pos += sz;
  }

  std::vector<PartyDataset> parties(k);
  for (long g = 0; g < k; ++g) {
    parties[g].features = table.features.select_cols(groups[g]);
    for (long c : groups[g]) parties[g].feature_names.push_back(table.feature_names[c]);
    parties[g].role = g == 0 ? PartyRole::primary : PartyRole::secondary;
  }
  parties[0].labels = table.labels;

  DataMatrix base_keys;
  if (key_mode == KeyMode::pca) {
    base_keys = derive_keys_pca(parties[0].features, key_dims);
    minmax_scale_keys(base_keys);
  } else {
    base_keys = DataMatrix(table.features.rows, key_dims);
    for (auto& v : base_keys.values) v = rng.uniform(-1.0, 1.0);
  }
  for (long g = 0; g < k; ++g) {
    Rng stream = rng.stream(0x4b455953ULL, static_cast<uint64_t>(g));
    parties[g].keys = fuzz_keys(base_keys, key_noise, stream);
  }
  return parties;
}

// ---------------------------------------------------------------------------
// Linked batches
// ---------------------------------------------------------------------------

struct LinkedBatch {
  std::vector<long> primary_ids;                      // B rows of the primary
  std::vector<std::vector<long>> neighbor_ids;        // per secondary: B*K source rows
  long num_neighbors = 0;

  Tensor primary_keys;                 // [B, 1, d_k]
  Tensor primary_features;             // [B, 1, d_fP]
  std::vector<Tensor> neighbor_keys;      // per secondary: [B, K, d_k]
  std::vector<Tensor> neighbor_features;  // per secondary: [B, K, d_f]
  std::vector<double> labels;             // aligned with primary_ids (may be empty)
};

// Links each primary row in `primary_ids` against `candidates[h]` (row ids
// into secondary party h) and materializes the tensors. Feature matrices are
// taken as-is; any normalization is the caller's concern.
inline LinkedBatch build_linked_batch(const std::vector<PartyDataset>& parties,
                                      const std::vector<long>& primary_ids,
                                      const std::vector<std::vector<long>>& candidates,
                                      long k_neighbors) {
  check_contract(!parties.empty() && parties[0].role == PartyRole::primary,
                 "build_linked_batch: party 0 must be primary");
  const long b = static_cast<long>(primary_ids.size());
  const long d_k = parties[0].keys.cols;
  const long num_secondary = static_cast<long>(parties.size()) - 1;
  check_contract(static_cast<long>(candidates.size()) == num_secondary,
                 "build_linked_batch: one candidate set per secondary party");

  LinkedBatch batch;
  batch.primary_ids = primary_ids;
  batch.num_neighbors = k_neighbors;

  const DataMatrix pk = parties[0].keys.select_rows(primary_ids);
  const DataMatrix pf = parties[0].features.select_rows(primary_ids);
  batch.primary_keys = Tensor::from_data({b, 1, d_k}, pk.values);
  batch.primary_features = Tensor::from_data({b, 1, parties[0].features.cols}, pf.values);
  if (!parties[0].labels.empty()) {
    batch.labels.resize(b);
    for (long i = 0; i < b; ++i) batch.labels[i] = parties[0].labels[primary_ids[i]];
  }

  for (long h = 0; h < num_secondary; ++h) {
    const PartyDataset& sec = parties[h + 1];
    const DataMatrix cand_keys = sec.keys.select_rows(candidates[h]);
    const std::vector<long> local = knn_link(pk, cand_keys, k_neighbors);
    std::vector<long> source(b * k_neighbors);
    for (size_t i = 0; i < local.size(); ++i) source[i] = candidates[h][local[i]];
    const long d_f = sec.features.cols;
    std::vector<double> keys_buf(b * k_neighbors * d_k);
    std::vector<double> feat_buf(b * k_neighbors * d_f);
    for (long i = 0; i < b * k_neighbors; ++i) {
      std::copy_n(sec.keys.row(source[i]), d_k, keys_buf.begin() + i * d_k);
      std::copy_n(sec.features.row(source[i]), d_f, feat_buf.begin() + i * d_f);
    }
    batch.neighbor_ids.push_back(std::move(source));
    batch.neighbor_keys.push_back(Tensor::from_data({b, k_neighbors, d_k}, std::move(keys_buf)));
    batch.neighbor_features.push_back(Tensor::from_data({b, k_neighbors, d_f}, std::move(feat_buf)));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Linkage index cache file (see docs/formats.md)
// ---------------------------------------------------------------------------

struct LinkageIndex {
  uint64_t seed = 0;
  double subsample_rate = 1.0;
  uint32_t k_neighbors = 0;
  uint32_t epoch = 0;
  std::vector<std::vector<long>> neighbor_ids;  // per secondary: B*K
  long batch_rows = 0;
};

inline void write_linkage_index(const std::string& path, const LinkageIndex& idx) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write linkage index: " + path);
  out.write("FETLINK1", 8);
  auto put = [&out](const void* p, size_t n) { out.write(static_cast<const char*>(p), n); };
  put(&idx.seed, 8);
  put(&idx.subsample_rate, 8);
  put(&idx.k_neighbors, 4);
  put(&idx.epoch, 4);
  const uint64_t rows = static_cast<uint64_t>(idx.batch_rows);
  const uint32_t parties = static_cast<uint32_t>(idx.neighbor_ids.size());
  put(&rows, 8);
  put(&parties, 4);
  for (const auto& ids : idx.neighbor_ids) {
    check_contract(ids.size() == static_cast<size_t>(idx.batch_rows) * idx.k_neighbors,
                   "write_linkage_index: inconsistent index size");
    for (long v : ids) {
      const int64_t w = v;
      put(&w, 8);
    }
  }
}

inline LinkageIndex read_linkage_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read linkage index: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != "FETLINK1")
    throw ValidationError("not a linkage index file: " + path);
  LinkageIndex idx;
  auto get = [&in](void* p, size_t n) { in.read(static_cast<char*>(p), n); };
  get(&idx.seed, 8);
  get(&idx.subsample_rate, 8);
  get(&idx.k_neighbors, 4);
  get(&idx.epoch, 4);
  uint64_t rows = 0;
  uint32_t parties = 0;
  get(&rows, 8);
  get(&parties, 4);
  idx.batch_rows = static_cast<long>(rows);
  idx.neighbor_ids.resize(parties);
  for (auto& ids : idx.neighbor_ids) {
    ids.resize(rows * idx.k_neighbors);
    for (auto& v : ids) {
      int64_t w = 0;
      get(&w, 8);
      v = static_cast<long>(w);
    }
  }
  if (!in) throw ValidationError("truncated linkage index: " + path);
  return idx;
}

}  // namespace fetsim
