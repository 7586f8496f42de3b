#ifndef DIFFRANK_OBJECTIVES_HPP_
#define DIFFRANK_OBJECTIVES_HPP_

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffrank/data.hpp"
#include "diffrank/diffusion.hpp"
#include "diffrank/model.hpp"
#include "diffrank/tensor.hpp"

namespace diffrank {

enum class ObjectiveKind : uint32_t {
  kDiscPointwise = 0,
  kDiscPairwise = 1,
  kGenPointwise = 2,
  kGenPairwise = 3,
};

inline bool is_pairwise(ObjectiveKind k) {
  return k == ObjectiveKind::kDiscPairwise || k == ObjectiveKind::kGenPairwise;
}
inline bool is_generative(ObjectiveKind k) {
  return k == ObjectiveKind::kGenPointwise || k == ObjectiveKind::kGenPairwise;
}

inline std::string objective_name(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kDiscPointwise: return "disc_pointwise";
    case ObjectiveKind::kDiscPairwise: return "disc_pairwise";
    case ObjectiveKind::kGenPointwise: return "gen_pointwise";
    case ObjectiveKind::kGenPairwise: return "gen_pairwise";
  }
  throw std::invalid_argument("unknown objective");
}

inline ObjectiveKind objective_from_name(const std::string& s) {
  if (s == "disc_pointwise") return ObjectiveKind::kDiscPointwise;
  if (s == "disc_pairwise") return ObjectiveKind::kDiscPairwise;
  if (s == "gen_pointwise") return ObjectiveKind::kGenPointwise;
  if (s == "gen_pairwise") return ObjectiveKind::kGenPairwise;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

inline ModelIo model_io_for(ObjectiveKind k, bool squared_variant = false) {
  switch (k) {
    case ObjectiveKind::kDiscPointwise:
      return squared_variant ? ModelIo::kDiscScore : ModelIo::kDiscLogits;
    case ObjectiveKind::kDiscPairwise: return ModelIo::kDiscScore;
    case ObjectiveKind::kGenPointwise: return ModelIo::kGenPointwise;
    case ObjectiveKind::kGenPairwise: return ModelIo::kGenPairwise;
  }
  throw std::invalid_argument("unknown objective");
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct RowRef {
  int query_index = 0;
  int row_index = 0;
};

struct PointBatch {
  Values x;                 // n x features, row major
  std::vector<int> label;   // binarized
  int n = 0, features = 0;
};

// Orientation-normalized pairs: side i is strictly preferred.
struct PairFeatureBatch {
  Values xi, xj;            // n x features each
  int n = 0, features = 0;
};

inline PointBatch make_point_batch(const Dataset& ds,
                                   std::span<const RowRef> refs) {
  PointBatch b;
  b.n = static_cast<int>(refs.size());
  b.features = ds.feature_count;
  b.x.resize(refs.size() * static_cast<size_t>(ds.feature_count));
  b.label.resize(refs.size());
  for (size_t r = 0; r < refs.size(); ++r) {
    const Row& row = ds.queries[static_cast<size_t>(refs[r].query_index)]
                         .rows[static_cast<size_t>(refs[r].row_index)];
    std::copy(row.features.begin(), row.features.end(),
              b.x.begin() + static_cast<ptrdiff_t>(r * row.features.size()));
    b.label[r] = row.binary_label;
  }
  return b;
}

inline PairFeatureBatch make_pair_batch(const Dataset& ds,
                                        std::span<const PairSample> pairs) {
  PairFeatureBatch b;
  b.n = static_cast<int>(pairs.size());
  b.features = ds.feature_count;
  b.xi.resize(pairs.size() * static_cast<size_t>(ds.feature_count));
  b.xj.resize(pairs.size() * static_cast<size_t>(ds.feature_count));
  for (size_t r = 0; r < pairs.size(); ++r) {
    const QueryGroup& g = ds.queries[static_cast<size_t>(pairs[r].query_index)];
    const Row& ri = g.rows[static_cast<size_t>(pairs[r].doc_i)];
    const Row& rj = g.rows[static_cast<size_t>(pairs[r].doc_j)];
    std::copy(ri.features.begin(), ri.features.end(),
              b.xi.begin() + static_cast<ptrdiff_t>(r * ri.features.size()));
    std::copy(rj.features.begin(), rj.features.end(),
              b.xj.begin() + static_cast<ptrdiff_t>(r * rj.features.size()));
  }
  return b;
}

// Training-time feature noise (the perturbation ablation).
inline void perturb_in_place(Values& x, double noise_std, Rng& rng) {
  if (noise_std == 0) return;
  for (Real& v : x) v += static_cast<Real>(rng.normal(0.0, noise_std));
}

// ---------------------------------------------------------------------------
// Discriminative objectives
// ---------------------------------------------------------------------------

// Mean softmax cross entropy of the class logits against binarized labels.
// `fwd` maps a feature matrix to logits, so a degenerately-conditioned
// denoiser can stand in for the discriminative net.
template <typename Fwd>
Tensor disc_pointwise_loss_fn(Fwd&& fwd, const PointBatch& batch) {
  Tensor logits = fwd(Tape::constant(batch.x, batch.n, batch.features));
  return softmax_cross_entropy(logits, batch.label);
}

inline Tensor disc_pointwise_loss(const DenoiserNet& net,
                                  const DenoiserNet::Bound& b,
                                  const PointBatch& batch, bool training,
                                  Rng* rng) {
  return disc_pointwise_loss_fn(
      [&](const Tensor& x) {
        return net.forward_discriminative(b, x, training, rng);
      },
      batch);
}

// Mean squared error of a scalar score head against the binary label.
inline Tensor disc_pointwise_squared_loss(const DenoiserNet& net,
                                          const DenoiserNet::Bound& b,
                                          const PointBatch& batch,
                                          bool training, Rng* rng) {
  Tensor s = net.forward_discriminative(
      b, Tape::constant(batch.x, batch.n, batch.features), training, rng);
  if (s.cols() != 1) {
    throw std::logic_error("squared loss requires a scalar score head");
  }
  Values y(batch.label.begin(), batch.label.end());
  Tensor diff = sub(s, Tape::constant(std::move(y), batch.n, 1));
  return mean(mul(diff, diff));
}

// RankNet: mean log(1 + exp(-(s_i - s_j) / tau)) over preference pairs.
template <typename Fwd>
Tensor disc_pairwise_loss_fn(Fwd&& fwd, const PairFeatureBatch& batch,
                             Real tau = 1) {
  Tensor si = fwd(Tape::constant(batch.xi, batch.n, batch.features));
  Tensor sj = fwd(Tape::constant(batch.xj, batch.n, batch.features));
  if (si.cols() != 1 || sj.cols() != 1) {
    throw std::logic_error("pairwise loss requires a scalar score head");
  }
  return mean(softplus(scale(sub(si, sj), Real(-1) / tau)));
}

inline Tensor disc_pairwise_loss(const DenoiserNet& net,
                                 const DenoiserNet::Bound& b,
                                 const PairFeatureBatch& batch, Real tau,
                                 bool training, Rng* rng) {
  return disc_pairwise_loss_fn(
      [&](const Tensor& x) {
        return net.forward_discriminative(b, x, training, rng);
      },
      batch, tau);
}

// ---------------------------------------------------------------------------
// Generative (denoising) objectives
// ---------------------------------------------------------------------------

struct GenLossOptions {
  bool force_mask = false;          // corrupt every label to [MASK]
  bool unit_time_weight = false;    // w(t) = 1 instead of 1/t
  std::optional<Real> fixed_time;   // overrides t ~ U[t_min, 1]
};

struct GenLossParts {
  Tensor total;
  Tensor l_num;
  Tensor l_cat;
  int n_masked = 0;
};

// Pointwise: corrupt features and label, denoise, combine
// lambda_num(step) * L_num (all rows) + L_cat (masked rows).
inline GenLossParts gen_pointwise_loss(const DenoiserNet& net,
                                       const DenoiserNet::Bound& b,
                                       const PointBatch& batch,
                                       const DiffusionSchedule& sched,
                                       const LossWeights& weights,
                                       int64_t step, Rng& rng, bool training,
                                       const GenLossOptions& opt = {}) {
  sched.validate();
  std::vector<Real> t =
      opt.fixed_time
          ? std::vector<Real>(static_cast<size_t>(batch.n), *opt.fixed_time)
          : sample_time(rng, batch.n, sched.t_min);
  CorruptedBatch cb = corrupt_rows(batch.x, batch.n, batch.features, t, sched,
                                   rng, opt.force_mask);

  std::vector<int> y_in(static_cast<size_t>(batch.n));
  for (int r = 0; r < batch.n; ++r) {
    y_in[static_cast<size_t>(r)] = cb.masked[static_cast<size_t>(r)]
                                       ? net.mask_index()
                                       : batch.label[static_cast<size_t>(r)];
  }

  Tensor x_t = Tape::constant(cb.x_t, batch.n, batch.features);
  auto out = net.forward_denoiser(b, x_t, net.one_hot_labels(y_in), cb.t,
                                  training, training ? &rng : nullptr);

  GenLossParts parts;
  parts.l_num = loss_num(out.chi, cb.eps);
  parts.l_cat = loss_cat_pointwise(out.psi, batch.label, cb.t, cb.masked,
                                   sched, opt.unit_time_weight);
  parts.total = total_loss(parts.l_num, parts.l_cat, weights, step);
  for (uint8_t m : cb.masked) parts.n_masked += m;
  return parts;
}

// Pairwise: one shared t per pair, independent noise per side, tied label
// masking, the scalar-head denoiser applied to each side. L_num accumulates
// both sides' noise predictions; L_cat is the weighted logistic loss on the
// score pair.
inline GenLossParts gen_pairwise_loss(const DenoiserNet& net,
                                      const DenoiserNet::Bound& b,
                                      const PairFeatureBatch& batch,
                                      const DiffusionSchedule& sched,
                                      const LossWeights& weights, int64_t step,
                                      Rng& rng, bool training, Real tau = 1,
                                      const GenLossOptions& opt = {}) {
  sched.validate();
  std::vector<Real> t =
      opt.fixed_time
          ? std::vector<Real>(static_cast<size_t>(batch.n), *opt.fixed_time)
          : sample_time(rng, batch.n, sched.t_min);

  // the pair is one tabular row: both sides share t and the mask state
  CorruptedPairBatch cp = corrupt_pair_rows(batch.xi, batch.xj, batch.n,
                                            batch.features, t, sched, rng,
                                            opt.force_mask);

  // tied label input: class 0 ("first document preferred") when clean
  std::vector<int> y_in(static_cast<size_t>(batch.n));
  for (int r = 0; r < batch.n; ++r) {
    y_in[static_cast<size_t>(r)] =
        cp.i.masked[static_cast<size_t>(r)] ? net.mask_index() : 0;
  }
  Tensor labels = net.one_hot_labels(y_in);

  auto out_i = net.forward_denoiser(
      b, Tape::constant(cp.i.x_t, batch.n, batch.features), labels, t,
      training, training ? &rng : nullptr);
  auto out_j = net.forward_denoiser(
      b, Tape::constant(cp.j.x_t, batch.n, batch.features), labels, t,
      training, training ? &rng : nullptr);

  GenLossParts parts;
  // per pair, || chi_i - eps_i ||^2 + || chi_j - eps_j ||^2, averaged over pairs
  parts.l_num =
      add(loss_num(out_i.chi, cp.i.eps), loss_num(out_j.chi, cp.j.eps));
  parts.l_cat = loss_cat_pairwise(out_i.psi, out_j.psi, t, cp.i.masked, sched,
                                  tau, opt.unit_time_weight);
  parts.total = total_loss(parts.l_num, parts.l_cat, weights, step);
  for (uint8_t m : cp.i.masked) parts.n_masked += m;
  return parts;
}

}  // namespace diffrank

#endif  // DIFFRANK_OBJECTIVES_HPP_
