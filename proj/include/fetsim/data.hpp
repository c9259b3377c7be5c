#pragma once

// Plain data containers (no gradient tape), CSV I/O in the canonical party
// schema, and the synthetic dataset generators used by tests and demos.
//
// CSV schema: header row; `label` column on the primary file; `key_0..key_{d-1}`
// identifier columns; every remaining column is a feature.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fetsim/common.hpp"
#include "fetsim/rng.hpp"

namespace fetsim {

struct DataMatrix {
  long rows = 0;
  long cols = 0;
  std::vector<double> values;  // row-major

  DataMatrix() = default;
  DataMatrix(long r, long c) : rows(r), cols(c), values(r * c, 0.0) {}

  double& at(long r, long c) { return values[r * cols + c]; }
  double at(long r, long c) const { return values[r * cols + c]; }
  const double* row(long r) const { return values.data() + r * cols; }

  DataMatrix select_rows(const std::vector<long>& ids) const {
    DataMatrix out(static_cast<long>(ids.size()), cols);
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy_n(row(ids[i]), cols, out.values.begin() + i * cols);
    return out;
  }

  DataMatrix select_cols(const std::vector<long>& ids) const {
    DataMatrix out(rows, static_cast<long>(ids.size()));
    for (long r = 0; r < rows; ++r)
      for (size_t j = 0; j < ids.size(); ++j) out.at(r, j) = at(r, ids[j]);
    return out;
  }
};

// A raw table before party splitting: features plus labels.
struct Table {
  DataMatrix features;
  std::vector<double> labels;
  std::vector<std::string> feature_names;
  bool classification = false;
  long num_classes = 0;
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

struct CsvDataset {
  DataMatrix keys;      // key_0.. columns, may be empty (cols == 0)
  DataMatrix features;  // everything that is not label/key
  std::vector<double> labels;  // empty unless a label column exists
  std::vector<std::string> feature_names;
};

inline CsvDataset read_party_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open CSV file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty CSV file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);

  long label_col = -1;
  std::vector<long> key_cols, feature_cols;
  std::vector<std::string> feature_names;
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "label")
      label_col = static_cast<long>(i);
    else if (header[i].rfind("key_", 0) == 0)
      key_cols.push_back(static_cast<long>(i));
    else {
      feature_cols.push_back(static_cast<long>(i));
      feature_names.push_back(header[i]);
    }
  }

  std::vector<std::vector<double>> rows;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ValidationError(path + ": line " + std::to_string(lineno) + " has " +
                            std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(header.size()));
    std::vector<double> vals(cells.size());
    for (size_t i = 0; i < cells.size(); ++i) {
      try {
        vals[i] = std::stod(cells[i]);
      } catch (...) {
        throw ValidationError(path + ": line " + std::to_string(lineno) +
                              ": cannot parse value '" + cells[i] + "'");
      }
    }
    rows.push_back(std::move(vals));
  }

  CsvDataset out;
  const long n = static_cast<long>(rows.size());
  out.keys = DataMatrix(n, static_cast<long>(key_cols.size()));
  out.features = DataMatrix(n, static_cast<long>(feature_cols.size()));
  out.feature_names = std::move(feature_names);
  if (label_col >= 0) out.labels.resize(n);
  for (long r = 0; r < n; ++r) {
    for (size_t j = 0; j < key_cols.size(); ++j) out.keys.at(r, j) = rows[r][key_cols[j]];
    for (size_t j = 0; j < feature_cols.size(); ++j) out.features.at(r, j) = rows[r][feature_cols[j]];
    if (label_col >= 0) out.labels[r] = rows[r][label_col];
  }
  return out;
}

inline void write_party_csv(const std::string& path, const DataMatrix& keys,
                            const DataMatrix& features,
                            const std::vector<std::string>& feature_names,
                            const std::vector<double>* labels) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write CSV file: " + path);
  out.precision(17);
  bool first = true;
  auto emit = [&](const std::string& s) {
    if (!first) out << ',';
    out << s;
    first = false;
  };
  if (labels) emit("label");
  for (long j = 0; j < keys.cols; ++j) emit("key_" + std::to_string(j));
  for (long j = 0; j < features.cols; ++j)
    emit(j < static_cast<long>(feature_names.size()) ? feature_names[j]
                                                     : "f" + std::to_string(j));
  out << '\n';
  for (long r = 0; r < features.rows; ++r) {
    first = true;
    if (labels) {
      if (!first) out << ',';
      out << (*labels)[r];
      first = false;
    }
    for (long j = 0; j < keys.cols; ++j) {
      if (!first) out << ',';
      out << keys.at(r, j);
      first = false;
    }
    for (long j = 0; j < features.cols; ++j) {
      if (!first) out << ',';
      out << features.at(r, j);
      first = false;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic digit images: 5x7 glyphs rendered onto a 14x14 canvas through a
// random affine map (rotation, scale, shear, shift) with pixel noise. A
// classification task with enough structure that fuzzy cross-party linkage
// carries signal.
// ---------------------------------------------------------------------------

namespace detail {
// Classic 5x7 column-encoded digit glyphs (bit j of column i = row j).
inline const uint8_t kDigitGlyphs[10][5] = {
    {0x3E, 0x51, 0x49, 0x45, 0x3E}, {0x00, 0x42, 0x7F, 0x40, 0x00},
    {0x42, 0x61, 0x51, 0x49, 0x46}, {0x21, 0x41, 0x45, 0x4B, 0x31},
    {0x18, 0x14, 0x12, 0x7F, 0x10}, {0x27, 0x45, 0x45, 0x45, 0x39},
    {0x3C, 0x4A, 0x49, 0x49, 0x30}, {0x01, 0x71, 0x09, 0x05, 0x03},
    {0x36, 0x49, 0x49, 0x49, 0x36}, {0x06, 0x49, 0x49, 0x29, 0x1E}};

inline double glyph_sample(int digit, double u, double v) {
  // u across columns [0,5), v down rows [0,7); bilinear over the bitmap.
  const auto& g = kDigitGlyphs[digit];
  auto pixel = [&](long cu, long cv) -> double {
    if (cu < 0 || cu >= 5 || cv < 0 || cv >= 7) return 0.0;
    return (g[cu] >> cv) & 1 ? 1.0 : 0.0;
  };
  const long u0 = static_cast<long>(std::floor(u)), v0 = static_cast<long>(std::floor(v));
  const double fu = u - u0, fv = v - v0;
  return pixel(u0, v0) * (1 - fu) * (1 - fv) + pixel(u0 + 1, v0) * fu * (1 - fv) +
         pixel(u0, v0 + 1) * (1 - fu) * fv + pixel(u0 + 1, v0 + 1) * fu * fv;
}
}  // namespace detail

constexpr long kDigitCanvas = 16;

struct DigitStyle {
  long canvas = kDigitCanvas;
  double field_scale = 0.5;       // amplitude of the latent linkage field
  double pixel_noise = 0.45;      // iid Gaussian per pixel
  double dirty_threshold = 0.35;  // records with z0 above this sit in the dirty segment
  double dirty_rate = 0.6;        // fraction of the dirty segment showing a wrong glyph
};

// Synthetic digit rows built for the fuzzy-linkage regime. Every record owns
//   * a 4-dim style latent z (uniform): it drives a per-pixel linear field and
//     the glyph's pose, so the top principal components of ANY pixel subset
//     recover z -- that is what the derived keys latch onto;
//   * an independent digit label rendered as a 5x7 glyph: class content that
//     the keys deliberately do NOT carry, so completing it requires the other
//     parties' pixels of the SAME record.
// Heavy pixel noise makes a single party's fragment a weak classifier, and a
// key-space segment renders mismatched glyphs (dirty linkage), which a
// key-conditioned mask can learn to distrust.
inline Table make_digits(long n, Rng& rng, const DigitStyle& style = {}) {
  Table t;
  t.classification = true;
  t.num_classes = 10;
  const long side = style.canvas;
  const long pixels = side * side;
  t.features = DataMatrix(n, pixels);
  t.labels.resize(n);
  t.feature_names.reserve(pixels);
  for (long p = 0; p < pixels; ++p) t.feature_names.push_back("px" + std::to_string(p));

  // Fixed per-pixel projection of the latent; drawn first so the field is a
  // stable function of the generator seed.
  std::vector<double> proj(pixels * 4);
  for (auto& u : proj) u = rng.normal(0.0, 1.0);

  for (long i = 0; i < n; ++i) {
    double z[4];
    for (double& v : z) v = rng.uniform(-1.0, 1.0);
    const int digit = static_cast<int>(rng.next_below(10));
    t.labels[i] = digit;

    int shown = digit;
    if (z[0] > style.dirty_threshold && rng.next_double() < style.dirty_rate)
      shown = static_cast<int>((digit + 1 + rng.next_below(9)) % 10);

    // Pose varies smoothly with the latent plus a little independent jitter;
    // stroke intensity is idiosyncratic per record, so fragments of the same
    // record are matchable across parties by brightness.
    const double theta = 0.35 * z[0] + rng.uniform(-0.05, 0.05);
    const double scale = 1.75 + 0.25 * z[3] + rng.uniform(-0.05, 0.05);
    const double tx = 1.6 * z[1] + rng.uniform(-0.4, 0.4);
    const double ty = 1.6 * z[2] + rng.uniform(-0.4, 0.4);
    const double shear = rng.uniform(-0.10, 0.10);
    const double gain = rng.uniform(0.5, 1.5);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (long y = 0; y < side; ++y) {
      for (long x = 0; x < side; ++x) {
        const long p = y * side + x;
        const double cx = x - (side - 1) / 2.0 - tx;
        const double cy = y - (side - 1) / 2.0 - ty;
        double gx = (ct * cx + st * cy);
        double gy = (-st * cx + ct * cy);
        gx = gx / scale - shear * gy;
        gy = gy / scale;
        double val = detail::glyph_sample(shown, gx + 2.0, gy + 3.0) * gain;
        double field = 0.0;
        for (int c = 0; c < 4; ++c) field += proj[p * 4 + c] * z[c];
        val += style.field_scale * field / 2.0;
        val += rng.normal(0.0, style.pixel_noise);
        t.features.at(i, p) = val;
      }
    }
  }
  return t;
}

// Small tabular generator for fast unit tests: classification draws
// class-dependent Gaussian blobs, regression a noisy linear map.
inline Table make_tabular(long n, long d, long classes, Rng& rng, double noise = 0.3) {
  Table t;
  t.features = DataMatrix(n, d);
  t.labels.resize(n);
  t.feature_names.reserve(d);
  for (long j = 0; j < d; ++j) t.feature_names.push_back("f" + std::to_string(j));
  if (classes > 1) {
    t.classification = true;
    t.num_classes = classes;
    DataMatrix centers(classes, d);
    for (long c = 0; c < classes; ++c)
      for (long j = 0; j < d; ++j) centers.at(c, j) = rng.normal(0.0, 1.5);
    for (long i = 0; i < n; ++i) {
      const long c = static_cast<long>(rng.next_below(classes));
      t.labels[i] = static_cast<double>(c);
      for (long j = 0; j < d; ++j) t.features.at(i, j) = centers.at(c, j) + rng.normal(0.0, noise);
    }
  } else {
    std::vector<double> w(d);
    for (auto& x : w) x = rng.normal(0.0, 1.0);
    for (long i = 0; i < n; ++i) {
      double y = 0.0;
      for (long j = 0; j < d; ++j) {
        t.features.at(i, j) = rng.normal(0.0, 1.0);
        y += w[j] * t.features.at(i, j);
      }
      t.labels[i] = y + rng.normal(0.0, noise);
    }
  }
  return t;
}

// Stratified (for classification) or plain shuffled split into
// train/validation/test index sets.
struct SplitIndices {
  std::vector<long> train, val, test;
};

inline SplitIndices split_train_val_test(const Table& t, double val_frac, double test_frac,
                                         Rng& rng) {
  const long n = t.features.rows;
  std::vector<long> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  SplitIndices out;
  auto assign = [&](std::vector<long>& pool) {
    const long n_val = static_cast<long>(std::floor(pool.size() * val_frac));
    const long n_test = static_cast<long>(std::floor(pool.size() * test_frac));
    for (size_t i = 0; i < pool.size(); ++i) {
      if (static_cast<long>(i) < n_val)
        out.val.push_back(pool[i]);
      else if (static_cast<long>(i) < n_val + n_test)
        out.test.push_back(pool[i]);
      else
        out.train.push_back(pool[i]);
    }
  };
  auto shuffle = [&](std::vector<long>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.next_below(i)]);
  };
  if (t.classification) {
    std::vector<std::vector<long>> by_class(t.num_classes);
    for (long i = 0; i < n; ++i) by_class[static_cast<long>(t.labels[i])].push_back(i);
    for (auto& pool : by_class) {
      shuffle(pool);
      assign(pool);
    }
  } else {
    shuffle(ids);
    assign(ids);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace fetsim
