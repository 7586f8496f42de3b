#ifndef DIFFRANK_DIFFUSION_HPP_
#define DIFFRANK_DIFFUSION_HPP_

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "diffrank/rng.hpp"
#include "diffrank/tensor.hpp"

namespace diffrank {

// Continuous-time corruption schedules. Numeric features follow the
// power-mean family sigma(t) = sigma_max * t^rho; the categorical mask
// survival follows the log-linear family alpha(t) = 1 - t, which satisfies
// alpha(0) = 1, alpha(1) = 0 and is strictly decreasing. The masked-loss
// weight is the (sign-normalized) -alpha'(t) / (1 - alpha(t)) = 1/t, so
// sampled times are clamped away from the t -> 0 singularity.
struct DiffusionSchedule {
  Real sigma_max = Real(1);
  Real rho = Real(1);
  Real t_min = Real(0.02);  // 1/50: matches a 50-step discretization

  void validate() const {
    if (!(t_min > 0 && t_min < 1)) {
      throw std::invalid_argument("schedule: t_min must be in (0, 1)");
    }
    if (sigma_max < 0) throw std::invalid_argument("schedule: sigma_max < 0");
    if (rho <= 0) throw std::invalid_argument("schedule: rho must be > 0");
  }

  Real sigma_num(Real t) const {
    return sigma_max * static_cast<Real>(std::pow(t, rho));
  }
  Real alpha(Real t) const { return Real(1) - t; }
  Real mask_prob(Real t) const { return Real(1) - alpha(t); }

  Real mask_weight(Real t) const {
    if (t < t_min) {
      throw std::domain_error("mask_weight: t below t_min singularity guard");
    }
    return Real(1) / t;
  }
};

// lambda_cat stays 1; lambda_num anneals linearly over the training budget.
struct LossWeights {
  Real lambda_num_start = Real(1.0);
  Real lambda_num_end = Real(0.1);
  int64_t total_steps = 1;
  Real lambda_cat = Real(1.0);

  Real lambda_num(int64_t step) const {
    if (total_steps <= 1) return lambda_num_start;
    double frac = static_cast<double>(step) /
                  static_cast<double>(total_steps - 1);
    frac = std::min(std::max(frac, 0.0), 1.0);
    return static_cast<Real>(lambda_num_start +
                             (lambda_num_end - lambda_num_start) * frac);
  }
};

inline std::vector<Real> sample_time(Rng& rng, int batch, Real t_min) {
  if (!(t_min > 0 && t_min < 1)) {
    throw std::invalid_argument("sample_time: t_min must be in (0, 1)");
  }
  std::vector<Real> t(static_cast<size_t>(batch));
  for (Real& v : t) v = static_cast<Real>(rng.uniform(t_min, 1.0));
  return t;
}

// x_t = x_0 + sigma(t) * eps with eps ~ N(0, I); returns (x_t, eps).
inline void corrupt_numeric(std::span<const Real> x0, Real t,
                            const DiffusionSchedule& sched, Rng& rng,
                            std::span<Real> x_t, std::span<Real> eps) {
  if (!(t >= 0 && t <= 1)) {
    throw std::domain_error("corrupt_numeric: t outside [0, 1]");
  }
  const Real sigma = sched.sigma_num(t);
  for (size_t i = 0; i < x0.size(); ++i) {
    eps[i] = static_cast<Real>(rng.normal());
    x_t[i] = x0[i] + sigma * eps[i];
  }
}

// With probability 1 - alpha(t) the label moves to the [MASK] state.
inline bool corrupt_label(Real t, const DiffusionSchedule& sched, Rng& rng) {
  if (!(t >= 0 && t <= 1)) {
    throw std::domain_error("corrupt_label: t outside [0, 1]");
  }
  return rng.bernoulli(sched.mask_prob(t));
}

// One corrupted pointwise batch: noised features, the drawn noise (training
// target), per-row time and the label state after tied-to-time masking.
struct CorruptedBatch {
  Values x_t;                  // n x F
  Values eps;                  // n x F
  std::vector<Real> t;         // n
  std::vector<uint8_t> masked; // n
  int n = 0, features = 0;
};

inline CorruptedBatch corrupt_rows(const Values& x0, int n, int features,
                                   const std::vector<Real>& t,
                                   const DiffusionSchedule& sched, Rng& rng,
                                   bool force_mask = false) {
  CorruptedBatch b;
  b.n = n;
  b.features = features;
  b.t = t;
  b.x_t.resize(x0.size());
  b.eps.resize(x0.size());
  b.masked.resize(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    const size_t off = static_cast<size_t>(r) * features;
    corrupt_numeric(
        std::span<const Real>(x0.data() + off, static_cast<size_t>(features)),
        t[static_cast<size_t>(r)], sched, rng,
        std::span<Real>(b.x_t.data() + off, static_cast<size_t>(features)),
        std::span<Real>(b.eps.data() + off, static_cast<size_t>(features)));
    b.masked[static_cast<size_t>(r)] =
        force_mask || corrupt_label(t[static_cast<size_t>(r)], sched, rng);
  }
  return b;
}

// Tied corruption of a preference pair: one shared t per pair, independent
// Gaussian noise per side, and a single mask flag covering both labels (a
// pair is never half-masked).
struct CorruptedPairBatch {
  CorruptedBatch i, j;
};

inline CorruptedPairBatch corrupt_pair_rows(const Values& xi, const Values& xj,
                                            int n, int features,
                                            const std::vector<Real>& t,
                                            const DiffusionSchedule& sched,
                                            Rng& rng, bool force_mask = false) {
  CorruptedPairBatch b;
  b.i = corrupt_rows(xi, n, features, t, sched, rng, force_mask);
  b.j.n = n;
  b.j.features = features;
  b.j.t = t;
  b.j.masked = b.i.masked;
  b.j.x_t.resize(xj.size());
  b.j.eps.resize(xj.size());
  for (int r = 0; r < n; ++r) {
    const size_t off = static_cast<size_t>(r) * features;
    corrupt_numeric(
        std::span<const Real>(xj.data() + off, static_cast<size_t>(features)),
        t[static_cast<size_t>(r)], sched, rng,
        std::span<Real>(b.j.x_t.data() + off, static_cast<size_t>(features)),
        std::span<Real>(b.j.eps.data() + off, static_cast<size_t>(features)));
  }
  return b;
}

// Mean over rows of || chi - eps ||^2.
inline Tensor loss_num(const Tensor& chi, const Values& eps) {
  if (static_cast<size_t>(chi.size()) != eps.size()) {
    throw std::invalid_argument("loss_num: shape mismatch");
  }
  Tensor diff = sub(chi, Tape::constant(eps, chi.rows(), chi.cols()));
  return scale(sum(mul(diff, diff)), Real(1) / static_cast<Real>(chi.rows()));
}

// Mean over masked rows of w(t) * (-log softmax(psi)[y0]); unmasked rows
// contribute nothing. `unit_weight` replaces w(t) by 1.
inline Tensor loss_cat_pointwise(const Tensor& psi_logits,
                                 const std::vector<int>& y0,
                                 const std::vector<Real>& t,
                                 const std::vector<uint8_t>& masked,
                                 const DiffusionSchedule& sched,
                                 bool unit_weight = false) {
  const int n = psi_logits.rows();
  if (static_cast<int>(y0.size()) != n || static_cast<int>(t.size()) != n ||
      static_cast<int>(masked.size()) != n) {
    throw std::invalid_argument("loss_cat: row count mismatch");
  }
  Values w(static_cast<size_t>(n), Real(0));
  int n_masked = 0;
  for (int r = 0; r < n; ++r) {
    if (!masked[static_cast<size_t>(r)]) continue;
    ++n_masked;
    w[static_cast<size_t>(r)] =
        unit_weight ? Real(1) : sched.mask_weight(t[static_cast<size_t>(r)]);
  }
  Tensor ce = softmax_cross_entropy_rows(psi_logits, y0);
  Tensor weighted = mul(ce, Tape::constant(std::move(w), n, 1));
  return scale(sum(weighted), Real(1) / static_cast<Real>(std::max(1, n_masked)));
}

// Pairwise form over score pairs (s_i preferred): mean over masked pairs of
// w(t) * log(1 + exp(-(s_i - s_j) / tau)). Softmax over the two scores with
// target "i" gives the same value; the logistic form is used directly.
inline Tensor loss_cat_pairwise(const Tensor& score_i, const Tensor& score_j,
                                const std::vector<Real>& t,
                                const std::vector<uint8_t>& masked,
                                const DiffusionSchedule& sched, Real tau = 1,
                                bool unit_weight = false) {
  const int n = score_i.rows();
  if (score_i.cols() != 1 || score_j.cols() != 1 || score_j.rows() != n ||
      static_cast<int>(t.size()) != n ||
      static_cast<int>(masked.size()) != n) {
    throw std::invalid_argument("loss_cat_pairwise: shape mismatch");
  }
  Values w(static_cast<size_t>(n), Real(0));
  int n_masked = 0;
  for (int r = 0; r < n; ++r) {
    if (!masked[static_cast<size_t>(r)]) continue;
    ++n_masked;
    w[static_cast<size_t>(r)] =
        unit_weight ? Real(1) : sched.mask_weight(t[static_cast<size_t>(r)]);
  }
  Tensor margin = scale(sub(score_i, score_j), Real(-1) / tau);
  Tensor weighted = mul(softplus(margin), Tape::constant(std::move(w), n, 1));
  return scale(sum(weighted), Real(1) / static_cast<Real>(std::max(1, n_masked)));
}

// L = lambda_num(step) * L_num + lambda_cat * L_cat.
inline Tensor total_loss(const Tensor& l_num, const Tensor& l_cat,
                         const LossWeights& weights, int64_t step) {
  return add(scale(l_num, weights.lambda_num(step)),
             scale(l_cat, weights.lambda_cat));
}

}  // namespace diffrank

#endif  // DIFFRANK_DIFFUSION_HPP_
