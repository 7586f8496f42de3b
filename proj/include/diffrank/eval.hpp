#ifndef DIFFRANK_EVAL_HPP_
#define DIFFRANK_EVAL_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffrank/data.hpp"
#include "diffrank/model.hpp"

namespace diffrank {

// Scored documents of one query, evaluated against graded labels. Ties in
// score keep the original document order (stable sort).
struct QueryRanking {
  std::string query_id;
  std::vector<Real> scores;
  std::vector<int> grades;
};

namespace detail {

inline std::vector<size_t> rank_order(const std::vector<Real>& scores) {
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace detail

// NDCG@k with gain 2^grade - 1 and discount log2(position + 1). Queries
// whose labels are all zero score 0 and still count toward averages.
inline double ndcg_at_k(const QueryRanking& q, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  if (q.scores.size() != q.grades.size()) {
    throw std::invalid_argument("ndcg_at_k: scores/grades length mismatch");
  }
  const auto order = detail::rank_order(q.scores);
  const int n = static_cast<int>(order.size());
  const int cut = std::min(k, n);

  double dcg = 0;
  for (int pos = 1; pos <= cut; ++pos) {
    const int g = q.grades[order[static_cast<size_t>(pos - 1)]];
    dcg += (std::pow(2.0, g) - 1.0) / std::log2(pos + 1.0);
  }

  std::vector<int> ideal = q.grades;
  std::sort(ideal.begin(), ideal.end(), std::greater<int>());
  double idcg = 0;
  for (int pos = 1; pos <= cut; ++pos) {
    idcg += (std::pow(2.0, ideal[static_cast<size_t>(pos - 1)]) - 1.0) /
            std::log2(pos + 1.0);
  }
  if (idcg <= 0) return 0.0;
  return dcg / idcg;
}

// MAP@k: mean of precision@position over relevant hits in the top k,
// normalized by min(total relevant, k). Relevant = grade >= threshold.
inline double map_at_k(const QueryRanking& q, int k,
                       int relevant_threshold = 1) {
  if (k < 1) throw std::invalid_argument("map_at_k: k must be >= 1");
  if (q.scores.size() != q.grades.size()) {
    throw std::invalid_argument("map_at_k: scores/grades length mismatch");
  }
  int total_relevant = 0;
  for (int g : q.grades) total_relevant += (g >= relevant_threshold);
  if (total_relevant == 0) return 0.0;

  const auto order = detail::rank_order(q.scores);
  const int cut = std::min<int>(k, static_cast<int>(order.size()));
  double sum_precision = 0;
  int hits = 0;
  for (int pos = 1; pos <= cut; ++pos) {
    if (q.grades[order[static_cast<size_t>(pos - 1)]] >= relevant_threshold) {
      ++hits;
      sum_precision += static_cast<double>(hits) / pos;
    }
  }
  return sum_precision / std::min(total_relevant, k);
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

namespace detail {

inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

// regularized incomplete beta I_x(a, b)
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log(1 - x);
  const double bt = std::exp(ln_bt);
  if (x < (a + 1) / (a + b + 2)) {
    return bt * betacf(a, b, x) / a;
  }
  return 1.0 - bt * betacf(b, a, 1 - x) / b;
}

}  // namespace detail

// Two-sided p-value of Student's t with `dof` degrees of freedom.
inline double student_t_two_sided_p(double t, double dof) {
  if (std::isinf(t)) return 0.0;
  return detail::incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

struct TTestResult {
  double t = 0;
  double p = 1;
  bool significant = false;
};

// Two-sided paired t-test on aligned per-query metric vectors. Zero variance
// of the differences degenerates to p = 1 when the means agree and p = 0
// otherwise.
inline TTestResult paired_t_test(std::span<const double> a,
                                 std::span<const double> b,
                                 double alpha = 0.05) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument(
        "paired_t_test: need equal-length vectors with n >= 2");
  }
  const size_t n = a.size();
  double mean = 0;
  for (size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double var = 0;
  for (size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n - 1);

  TTestResult res;
  if (var == 0.0) {
    if (mean == 0.0) {
      res.t = 0.0;
      res.p = 1.0;
    } else {
      res.t = mean > 0 ? std::numeric_limits<double>::infinity()
                       : -std::numeric_limits<double>::infinity();
      res.p = 0.0;
    }
  } else {
    res.t = mean / std::sqrt(var / static_cast<double>(n));
    res.p = student_t_two_sided_p(res.t, static_cast<double>(n - 1));
  }
  res.significant = res.p < alpha;
  return res;
}

// ---------------------------------------------------------------------------
// Model evaluation over a dataset split
// ---------------------------------------------------------------------------

struct RunReport {
  std::vector<std::string> query_ids;
  std::vector<double> ndcg10;
  std::vector<double> map10;
  double mean_ndcg10 = 0;
  double mean_map10 = 0;
  int k = 10;
};

// Scores every document in inference mode (generative models see clean
// features, t = 0 and a [MASK] label) and averages NDCG@k / MAP@k over
// queries. Evaluation always uses the original graded labels.
inline RunReport evaluate(const DenoiserNet& net, const Dataset& split,
                          int k = 10) {
  if (net.config().feature_count != split.feature_count) {
    throw std::invalid_argument("evaluate: feature count mismatch");
  }
  RunReport report;
  report.k = k;
  report.query_ids.reserve(split.queries.size());
  for (const auto& group : split.queries) {
    const int n = static_cast<int>(group.rows.size());
    Values feats(static_cast<size_t>(n) * split.feature_count);
    QueryRanking ranking;
    ranking.query_id = group.query_id;
    ranking.grades.reserve(group.rows.size());
    for (int r = 0; r < n; ++r) {
      const Row& row = group.rows[static_cast<size_t>(r)];
      std::copy(row.features.begin(), row.features.end(),
                feats.begin() + static_cast<ptrdiff_t>(
                                    static_cast<size_t>(r) *
                                    split.feature_count));
      ranking.grades.push_back(row.grade);
    }
    ranking.scores = net.score_rows(feats, n);

    report.query_ids.push_back(group.query_id);
    report.ndcg10.push_back(ndcg_at_k(ranking, k));
    report.map10.push_back(map_at_k(ranking, k));
  }
  const double nq = static_cast<double>(report.ndcg10.size());
  if (nq > 0) {
    double s1 = 0, s2 = 0;
    for (size_t i = 0; i < report.ndcg10.size(); ++i) {
      s1 += report.ndcg10[i];
      s2 += report.map10[i];
    }
    report.mean_ndcg10 = s1 / nq;
    report.mean_map10 = s2 / nq;
  }
  return report;
}

}  // namespace diffrank

#endif  // DIFFRANK_EVAL_HPP_
