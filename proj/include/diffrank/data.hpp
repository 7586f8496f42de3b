#ifndef DIFFRANK_DATA_HPP_
#define DIFFRANK_DATA_HPP_

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "diffrank/rng.hpp"
#include "diffrank/serialize.hpp"
#include "diffrank/tensor.hpp"

namespace diffrank {

// Binarization scheme of the source collection. LETOR 4.0 grades 0..2 map
// {0}->0, {1,2}->1; MSLR-WEB10K grades 0..4 map {0,1}->0, {2,3,4}->1.
enum class LabelScheme { kLetor, kMslr };

inline int grade_levels(LabelScheme s) {
  return s == LabelScheme::kLetor ? 3 : 5;
}

inline int binarize(int grade, LabelScheme scheme) {
  if (grade < 0 || grade >= grade_levels(scheme)) {
    throw std::domain_error("binarize: grade " + std::to_string(grade) +
                            " out of range for scheme");
  }
  const int threshold = scheme == LabelScheme::kLetor ? 1 : 2;
  return grade >= threshold ? 1 : 0;
}

struct Row {
  std::vector<Real> features;
  int grade = 0;
  int binary_label = 0;

  bool operator==(const Row&) const = default;
};

struct QueryGroup {
  std::string query_id;
  std::vector<Row> rows;

  bool operator==(const QueryGroup&) const = default;
};

struct Dataset {
  std::vector<QueryGroup> queries;
  int feature_count = 0;
  LabelScheme scheme = LabelScheme::kLetor;

  int grade_range() const { return grade_levels(scheme); }
  size_t query_count() const { return queries.size(); }
  size_t total_rows() const {
    size_t n = 0;
    for (const auto& q : queries) n += q.rows.size();
    return n;
  }

  bool operator==(const Dataset&) const = default;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline ParseError parse_error(const std::string& path, size_t line,
                              const std::string& what) {
  return ParseError(path + ":" + std::to_string(line) + ": " + what);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' ||
                        s.front() == '\r'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                        s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Parses an SVMLight-with-qid file: `<grade> qid:<id> 1:<v> 2:<v> ... #cmt`.
// Rows are grouped by qid preserving first-appearance order; feature indices
// are 1-based and missing indices are filled with 0.
inline Dataset parse_letor(const std::string& path, int feature_count,
                           LabelScheme scheme) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);

  Dataset ds;
  ds.feature_count = feature_count;
  ds.scheme = scheme;
  std::unordered_map<std::string, size_t> group_of;

  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv(line);
    if (const size_t hash = sv.find('#'); hash != std::string_view::npos) {
      sv = sv.substr(0, hash);
    }
    sv = detail::trim(sv);
    if (sv.empty()) continue;

    Row row;
    row.features.assign(static_cast<size_t>(feature_count), Real(0));

    size_t field = 0;
    std::string qid;
    size_t pos = 0;
    while (pos < sv.size()) {
      while (pos < sv.size() && (sv[pos] == ' ' || sv[pos] == '\t')) ++pos;
      if (pos >= sv.size()) break;
      size_t end = pos;
      while (end < sv.size() && sv[end] != ' ' && sv[end] != '\t') ++end;
      const std::string_view tok = sv.substr(pos, end - pos);
      pos = end;

      if (field == 0) {
        int grade = -1;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(),
                                       grade);
        if (ec != std::errc() || p != tok.data() + tok.size() || grade < 0) {
          throw detail::parse_error(path, line_no,
                                    "expected integer grade, got '" +
                                        std::string(tok) + "'");
        }
        row.grade = grade;
      } else if (field == 1) {
        if (!tok.starts_with("qid:") || tok.size() == 4) {
          throw detail::parse_error(path, line_no,
                                    "expected qid:<id>, got '" +
                                        std::string(tok) + "'");
        }
        qid = std::string(tok.substr(4));
      } else {
        const size_t colon = tok.find(':');
        if (colon == std::string_view::npos || colon == 0 ||
            colon + 1 == tok.size()) {
          throw detail::parse_error(path, line_no,
                                    "expected <index>:<value>, got '" +
                                        std::string(tok) + "'");
        }
        int idx = 0;
        auto [pi, eci] = std::from_chars(tok.data(), tok.data() + colon, idx);
        if (eci != std::errc() || pi != tok.data() + colon) {
          throw detail::parse_error(path, line_no,
                                    "bad feature index in '" +
                                        std::string(tok) + "'");
        }
        if (idx < 1 || idx > feature_count) {
          throw detail::parse_error(
              path, line_no,
              "feature index " + std::to_string(idx) + " outside 1.." +
                  std::to_string(feature_count));
        }
        double val = 0;
        auto [pv, ecv] = std::from_chars(tok.data() + colon + 1,
                                         tok.data() + tok.size(), val);
        if (ecv != std::errc() || pv != tok.data() + tok.size()) {
          throw detail::parse_error(path, line_no,
                                    "bad feature value in '" +
                                        std::string(tok) + "'");
        }
        row.features[static_cast<size_t>(idx - 1)] = static_cast<Real>(val);
      }
      ++field;
    }
    if (field < 2) {
      throw detail::parse_error(path, line_no, "line has no qid field");
    }
    if (row.grade >= grade_levels(scheme)) {
      throw detail::parse_error(path, line_no,
                                "grade " + std::to_string(row.grade) +
                                    " out of range for scheme");
    }
    row.binary_label = binarize(row.grade, scheme);

    auto [it, inserted] = group_of.try_emplace(qid, ds.queries.size());
    if (inserted) {
      ds.queries.push_back(QueryGroup{qid, {}});
    }
    ds.queries[it->second].rows.push_back(std::move(row));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Quantile transformation
// ---------------------------------------------------------------------------

// Inverse standard normal CDF. Rational approximation (Acklam) polished with
// one Halley step through erfc; accurate to ~1e-15 over (0, 1).
inline double inverse_normal_cdf(double p) {
  if (!(p > 0.0) || !(p < 1.0)) {
    throw std::domain_error("inverse_normal_cdf: p must be in (0, 1)");
  }
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q +
          c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double err = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = err * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

enum class QuantileOutput { kUniform, kNormal };

// Per-feature mapping through the empirical CDF of the training split,
// optionally followed by the inverse normal CDF. Fit once, then frozen.
class QuantileTransform {
 public:
  QuantileTransform() = default;

  static QuantileTransform fit(const Dataset& train, int quantile_count = 1000,
                               QuantileOutput output = QuantileOutput::kNormal) {
    if (train.queries.empty()) {
      throw std::invalid_argument("quantile fit: empty training data");
    }
    const size_t n_rows = train.total_rows();
    const int q = std::max(2, std::min<int>(quantile_count,
                                            static_cast<int>(n_rows)));
    QuantileTransform t;
    t.output_ = output;
    t.quantiles_.resize(static_cast<size_t>(train.feature_count));

    std::vector<Real> column(n_rows);
    for (int f = 0; f < train.feature_count; ++f) {
      size_t i = 0;
      for (const auto& group : train.queries) {
        for (const auto& row : group.rows) {
          column[i++] = row.features[static_cast<size_t>(f)];
        }
      }
      std::sort(column.begin(), column.end());
      auto& ref = t.quantiles_[static_cast<size_t>(f)];
      ref.resize(static_cast<size_t>(q));
      for (int k = 0; k < q; ++k) {
        // linear interpolation of order statistics at p = k/(q-1)
        const double h = static_cast<double>(k) * (n_rows - 1) / (q - 1);
        const size_t lo = static_cast<size_t>(h);
        const double frac = h - static_cast<double>(lo);
        const Real v_lo = column[lo];
        const Real v_hi = column[std::min(lo + 1, n_rows - 1)];
        ref[static_cast<size_t>(k)] =
            static_cast<Real>(v_lo + frac * (v_hi - v_lo));
      }
    }
    return t;
  }

  bool fitted() const { return !quantiles_.empty(); }
  int feature_count() const { return static_cast<int>(quantiles_.size()); }
  QuantileOutput output() const { return output_; }

  // Empirical CDF value in [0, 1] for one feature, before any inverse-normal
  // mapping. Tied reference values are resolved by averaging the leftmost and
  // rightmost interpolants, so a point mass of fraction f occupies the middle
  // of its [p, p+f] quantile band and a constant feature maps to 0.5. Values
  // outside the fitted range clamp to the extremes.
  double cdf(int feature, Real v) const {
    const auto& qv = quantiles_[static_cast<size_t>(feature)];
    const size_t m = qv.size();
    if (v < qv[0]) return 0.0;
    if (v > qv[m - 1]) return 1.0;

    const auto prob = [&](size_t i) {
      return static_cast<double>(i) / static_cast<double>(m - 1);
    };
    // leftmost: first element >= v
    double fwd;
    {
      const auto it = std::lower_bound(qv.begin(), qv.end(), v);
      const size_t i = static_cast<size_t>(it - qv.begin());
      if (*it == v) {
        fwd = prob(i);
      } else {
        const double span = static_cast<double>(qv[i] - qv[i - 1]);
        fwd = prob(i - 1) + (prob(i) - prob(i - 1)) *
                                (static_cast<double>(v - qv[i - 1]) / span);
      }
    }
    // rightmost: last element <= v
    double bwd;
    {
      const auto it = std::upper_bound(qv.begin(), qv.end(), v);
      const size_t j = static_cast<size_t>(it - qv.begin());  // first > v
      if (qv[j - 1] == v) {
        bwd = prob(j - 1);
      } else {
        const double span = static_cast<double>(qv[j] - qv[j - 1]);
        bwd = prob(j - 1) + (prob(j) - prob(j - 1)) *
                                (static_cast<double>(v - qv[j - 1]) / span);
      }
    }
    return 0.5 * (fwd + bwd);
  }

  Real transform_one(int feature, Real v) const {
    double p = cdf(feature, v);
    if (output_ == QuantileOutput::kUniform) return static_cast<Real>(p);
    p = std::clamp(p, kClip, 1.0 - kClip);
    return static_cast<Real>(inverse_normal_cdf(p));
  }

  std::vector<Real> apply(std::span<const Real> x) const {
    if (static_cast<int>(x.size()) != feature_count()) {
      throw std::invalid_argument("quantile apply: feature count mismatch");
    }
    std::vector<Real> out(x.size());
    for (size_t f = 0; f < x.size(); ++f) {
      out[f] = transform_one(static_cast<int>(f), x[f]);
    }
    return out;
  }

  void apply_in_place(Dataset& ds) const {
    if (ds.feature_count != feature_count()) {
      throw std::invalid_argument("quantile apply: feature count mismatch");
    }
    for (auto& group : ds.queries) {
      for (auto& row : group.rows) {
        for (size_t f = 0; f < row.features.size(); ++f) {
          row.features[f] = transform_one(static_cast<int>(f),
                                          row.features[f]);
        }
      }
    }
  }

  void save(const std::string& path) const {
    io::Writer w(path);
    w.magic("DRKQUANT");
    w.u32(1);
    w.u32(static_cast<uint32_t>(quantiles_.size()));
    w.u8(output_ == QuantileOutput::kNormal ? 1 : 0);
    for (const auto& q : quantiles_) w.array(q);
    w.close();
  }

  static QuantileTransform load(const std::string& path) {
    io::Reader r(path);
    r.expect_magic("DRKQUANT");
    if (r.u32() != 1) throw std::runtime_error("transform file: bad version");
    const uint32_t f = r.u32();
    QuantileTransform t;
    t.output_ = r.u8() ? QuantileOutput::kNormal : QuantileOutput::kUniform;
    t.quantiles_.reserve(f);
    for (uint32_t i = 0; i < f; ++i) t.quantiles_.push_back(r.array<Real>());
    return t;
  }

  static constexpr double kClip = 1e-7;

 private:
  std::vector<std::vector<Real>> quantiles_;
  QuantileOutput output_ = QuantileOutput::kNormal;
};

// ---------------------------------------------------------------------------
// Pair construction, subsampling, perturbation
// ---------------------------------------------------------------------------

// Orientation-normalized preference pair: the document at `doc_i` has a
// strictly higher graded label than the one at `doc_j`.
struct PairSample {
  int query_index = 0;
  int doc_i = 0;
  int doc_j = 0;
};

// All strict-preference ordered pairs of one query, capped at
// `max_pairs_per_query` by a uniform draw. Deterministic under a fixed rng.
inline std::vector<PairSample> make_pairs(const Dataset& ds, int query_index,
                                          int max_pairs_per_query, Rng& rng) {
  const QueryGroup& g = ds.queries[static_cast<size_t>(query_index)];
  std::vector<PairSample> pairs;
  const int n = static_cast<int>(g.rows.size());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (g.rows[static_cast<size_t>(i)].grade >
          g.rows[static_cast<size_t>(j)].grade) {
        pairs.push_back(PairSample{query_index, i, j});
      }
    }
  }
  if (max_pairs_per_query > 0 &&
      static_cast<int>(pairs.size()) > max_pairs_per_query) {
    // partial Fisher-Yates: the first max_pairs entries are a uniform subset
    for (int k = 0; k < max_pairs_per_query; ++k) {
      const size_t j = static_cast<size_t>(k) + static_cast<size_t>(
          rng.uniform_int(pairs.size() - static_cast<size_t>(k)));
      std::swap(pairs[static_cast<size_t>(k)], pairs[j]);
    }
    pairs.resize(static_cast<size_t>(max_pairs_per_query));
  }
  return pairs;
}

inline std::vector<PairSample> make_all_pairs(const Dataset& ds,
                                              int max_pairs_per_query,
                                              Rng& rng) {
  std::vector<PairSample> all;
  for (size_t q = 0; q < ds.queries.size(); ++q) {
    auto pairs = make_pairs(ds, static_cast<int>(q), max_pairs_per_query, rng);
    all.insert(all.end(), pairs.begin(), pairs.end());
  }
  return all;
}

// Keeps ceil(K * Q) whole queries, drawn uniformly without replacement, in
// their original order. K = 1 is the identity.
inline Dataset subsample(const Dataset& train, double fraction,
                         uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw std::invalid_argument("subsample: fraction must be in (0, 1]");
  }
  if (fraction == 1.0) return train;

  const size_t q = train.queries.size();
  const size_t keep = static_cast<size_t>(
      std::ceil(fraction * static_cast<double>(q)));
  std::vector<size_t> idx(q);
  for (size_t i = 0; i < q; ++i) idx[i] = i;
  Rng rng(seed);
  for (size_t k = 0; k < keep; ++k) {
    const size_t j = k + static_cast<size_t>(rng.uniform_int(q - k));
    std::swap(idx[k], idx[j]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());

  Dataset out;
  out.feature_count = train.feature_count;
  out.scheme = train.scheme;
  out.queries.reserve(keep);
  for (size_t i : idx) out.queries.push_back(train.queries[i]);
  return out;
}

// Training-time noise injection: x + Normal(0, noise_std^2) per coordinate.
inline std::vector<Real> perturb_features(std::span<const Real> x,
                                          double noise_std, Rng& rng) {
  if (noise_std < 0) {
    throw std::invalid_argument("perturb_features: noise_std must be >= 0");
  }
  std::vector<Real> out(x.begin(), x.end());
  if (noise_std == 0) return out;
  for (Real& v : out) v += static_cast<Real>(rng.normal(0.0, noise_std));
  return out;
}

// ---------------------------------------------------------------------------
// Binary cache
// ---------------------------------------------------------------------------

struct DatasetBundle {
  Dataset train, vali, test;
  // set when the cached features have already been quantile-transformed
  bool transformed = false;

  bool operator==(const DatasetBundle&) const = default;
};

namespace detail {

inline void write_dataset(io::Writer& w, const Dataset& ds) {
  w.u64(ds.queries.size());
  for (const auto& g : ds.queries) {
    w.str(g.query_id);
    w.u64(g.rows.size());
    for (const auto& row : g.rows) {
      w.i32(row.grade);
      w.u8(static_cast<uint8_t>(row.binary_label));
      w.array(row.features);
    }
  }
}

inline Dataset read_dataset(io::Reader& r, int feature_count,
                            LabelScheme scheme) {
  Dataset ds;
  ds.feature_count = feature_count;
  ds.scheme = scheme;
  const uint64_t nq = r.u64();
  ds.queries.resize(nq);
  for (auto& g : ds.queries) {
    g.query_id = r.str();
    const uint64_t nr = r.u64();
    g.rows.resize(nr);
    for (auto& row : g.rows) {
      row.grade = r.i32();
      row.binary_label = r.u8();
      row.features = r.array<Real>();
      if (row.features.size() != static_cast<size_t>(feature_count)) {
        throw std::runtime_error("cache: row feature count mismatch");
      }
    }
  }
  return ds;
}

}  // namespace detail

inline void save_cache(const DatasetBundle& b, const std::string& path) {
  io::Writer w(path);
  w.magic("DRKCACHE");
  w.u32(1);
  w.u8(b.train.scheme == LabelScheme::kMslr ? 1 : 0);
  w.u32(static_cast<uint32_t>(b.train.feature_count));
  w.u8(b.transformed ? 1 : 0);
  detail::write_dataset(w, b.train);
  detail::write_dataset(w, b.vali);
  detail::write_dataset(w, b.test);
  w.close();
}

inline DatasetBundle load_cache(const std::string& path) {
  io::Reader r(path);
  r.expect_magic("DRKCACHE");
  if (r.u32() != 1) throw std::runtime_error("cache: bad version");
  const LabelScheme scheme = r.u8() ? LabelScheme::kMslr : LabelScheme::kLetor;
  const int f = static_cast<int>(r.u32());
  DatasetBundle b;
  b.transformed = r.u8() != 0;
  b.train = detail::read_dataset(r, f, scheme);
  b.vali = detail::read_dataset(r, f, scheme);
  b.test = detail::read_dataset(r, f, scheme);
  return b;
}

}  // namespace diffrank

#endif  // DIFFRANK_DATA_HPP_
