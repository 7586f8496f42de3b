#ifndef DIFFRANK_TRAIN_HPP_
#define DIFFRANK_TRAIN_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffrank/data.hpp"
#include "diffrank/eval.hpp"
#include "diffrank/model.hpp"
#include "diffrank/objectives.hpp"

namespace diffrank {

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
  Real learning_rate = Real(1e-3);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  Real weight_decay = Real(1e-4);
};

struct OptimState {
  std::vector<Values> m, v;
  int64_t step = 0;

  static OptimState init(const std::vector<Param>& params) {
    OptimState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(static_cast<size_t>(p.size()), Real(0));
      s.v.emplace_back(static_cast<size_t>(p.size()), Real(0));
    }
    return s;
  }
};

// Decoupled weight decay applied multiplicatively before the bias-corrected
// Adam update. Throws on non-finite gradients.
inline void adamw_step(std::vector<Param>& params, OptimState& state,
                       const AdamWConfig& cfg) {
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adamw: optimizer state shape mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].grad.size() != params[i].value.size()) {
      throw std::invalid_argument("adamw: gradient missing for " +
                                  params[i].name);
    }
    for (Real g : params[i].grad) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("adamw: non-finite gradient in " +
                                 params[i].name);
      }
    }
  }
  state.step += 1;
  const Real bc1 = Real(1) - static_cast<Real>(std::pow(cfg.beta1, state.step));
  const Real bc2 = Real(1) - static_cast<Real>(std::pow(cfg.beta2, state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Values& theta = params[i].value;
    const Values& g = params[i].grad;
    Values& m = state.m[i];
    Values& v = state.v[i];
    for (size_t k = 0; k < theta.size(); ++k) {
      theta[k] *= Real(1) - cfg.learning_rate * cfg.weight_decay;
      m[k] = cfg.beta1 * m[k] + (Real(1) - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (Real(1) - cfg.beta2) * g[k] * g[k];
      const Real m_hat = m[k] / bc1;
      const Real v_hat = v[k] / bc2;
      theta[k] -= cfg.learning_rate * m_hat /
                  (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  ObjectiveKind objective = ObjectiveKind::kDiscPointwise;
  bool squared = false;  // squared-loss variant of disc_pointwise
  std::string cache;
  std::string out_dir;
  std::string dataset_name = "dataset";
  uint64_t seed = 0;
  bool seed_set = false;
  int epochs = 200;
  int batch_size = 1024;  // rows (pointwise) or pairs (pairwise)
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int hidden_dim = 256;
  int num_hidden_layers = 4;
  double dropout = 0.1;
  int time_embed_dim = 16;
  int eval_interval = 0;  // steps between validation passes; 0 = every epoch
  double k_fraction = 1.0;
  uint64_t subsample_seed = 9601;  // fixed across runs so subsets coincide
  double noise_std = 0.0;          // training-time feature perturbation
  double t_min = 0.02;
  double sigma_max = 1.0;
  double rho = 1.0;
  double lambda_num_start = 1.0;
  double lambda_num_end = 0.1;
  double tau = 1.0;
  bool pair_time_weight = true;  // weight the pairwise L_cat by 1/t
  int max_pairs_per_query = 200;

  void validate() const {
    if (!seed_set) throw std::invalid_argument("config: seed is mandatory");
    if (cache.empty()) throw std::invalid_argument("config: cache path missing");
    if (epochs < 1 || batch_size < 1) {
      throw std::invalid_argument("config: epochs and batch_size must be >= 1");
    }
    if (!(k_fraction > 0.0) || k_fraction > 1.0) {
      throw std::invalid_argument("config: k_fraction outside (0, 1]");
    }
    if (noise_std < 0) throw std::invalid_argument("config: noise_std < 0");
    if (noise_std > 0 && is_generative(objective)) {
      throw std::invalid_argument(
          "config: feature perturbation is defined for discriminative "
          "objectives only");
    }
    if (squared && objective != ObjectiveKind::kDiscPointwise) {
      throw std::invalid_argument(
          "config: squared variant applies to disc_pointwise only");
    }
  }

  std::string method_name() const {
    std::string name = objective_name(objective);
    if (squared) name += "_squared";
    if (noise_std > 0) name += "_perturbed";
    return name;
  }

  DiffusionSchedule schedule() const {
    DiffusionSchedule s;
    s.sigma_max = static_cast<Real>(sigma_max);
    s.rho = static_cast<Real>(rho);
    s.t_min = static_cast<Real>(t_min);
    return s;
  }
};

namespace detail {

inline std::string trim_copy(const std::string& s) {
  return std::string(trim(std::string_view(s)));
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean for " + key);
}

}  // namespace detail

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  RunConfig cfg;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const size_t hash = line.find('#'); hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    const std::string trimmed = detail::trim_copy(line);
    if (trimmed.empty()) continue;
    const size_t eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                  ": expected key = value");
    }
    const std::string key = detail::trim_copy(trimmed.substr(0, eq));
    const std::string val = detail::trim_copy(trimmed.substr(eq + 1));
    bool known = true;
    try {
      if (key == "objective") cfg.objective = objective_from_name(val);
      else if (key == "squared") cfg.squared = detail::parse_bool(val, key);
      else if (key == "cache") cfg.cache = val;
      else if (key == "out_dir") cfg.out_dir = val;
      else if (key == "dataset_name") cfg.dataset_name = val;
      else if (key == "seed") { cfg.seed = std::stoull(val); cfg.seed_set = true; }
      else if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "learning_rate") cfg.learning_rate = std::stod(val);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(val);
      else if (key == "hidden_dim") cfg.hidden_dim = std::stoi(val);
      else if (key == "num_hidden_layers") cfg.num_hidden_layers = std::stoi(val);
      else if (key == "dropout") cfg.dropout = std::stod(val);
      else if (key == "time_embed_dim") cfg.time_embed_dim = std::stoi(val);
      else if (key == "eval_interval") cfg.eval_interval = std::stoi(val);
      else if (key == "k_fraction") cfg.k_fraction = std::stod(val);
      else if (key == "subsample_seed") cfg.subsample_seed = std::stoull(val);
      else if (key == "noise_std") cfg.noise_std = std::stod(val);
      else if (key == "t_min") cfg.t_min = std::stod(val);
      else if (key == "sigma_max") cfg.sigma_max = std::stod(val);
      else if (key == "rho") cfg.rho = std::stod(val);
      else if (key == "lambda_num_start") cfg.lambda_num_start = std::stod(val);
      else if (key == "lambda_num_end") cfg.lambda_num_end = std::stod(val);
      else if (key == "tau") cfg.tau = std::stod(val);
      else if (key == "pair_time_weight") cfg.pair_time_weight = detail::parse_bool(val, key);
      else if (key == "max_pairs_per_query") cfg.max_pairs_per_query = std::stoi(val);
      else known = false;
    } catch (const std::exception& e) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                  ": bad value for " + key + " (" + e.what() +
                                  ")");
    }
    if (!known) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                  ": unknown key '" + key + "'");
    }
  }
  return cfg;
}

// Resolved snapshot in the same flat format; identical configs produce
// identical bytes.
inline void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write config: " + path);
  char buf[64];
  const auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "objective = " << objective_name(cfg.objective) << "\n"
      << "squared = " << (cfg.squared ? "true" : "false") << "\n"
      << "cache = " << cfg.cache << "\n"
      << "out_dir = " << cfg.out_dir << "\n"
      << "dataset_name = " << cfg.dataset_name << "\n"
      << "seed = " << cfg.seed << "\n"
      << "epochs = " << cfg.epochs << "\n"
      << "batch_size = " << cfg.batch_size << "\n"
      << "learning_rate = " << num(cfg.learning_rate) << "\n"
      << "weight_decay = " << num(cfg.weight_decay) << "\n"
      << "hidden_dim = " << cfg.hidden_dim << "\n"
      << "num_hidden_layers = " << cfg.num_hidden_layers << "\n"
      << "dropout = " << num(cfg.dropout) << "\n"
      << "time_embed_dim = " << cfg.time_embed_dim << "\n"
      << "eval_interval = " << cfg.eval_interval << "\n"
      << "k_fraction = " << num(cfg.k_fraction) << "\n"
      << "subsample_seed = " << cfg.subsample_seed << "\n"
      << "noise_std = " << num(cfg.noise_std) << "\n"
      << "t_min = " << num(cfg.t_min) << "\n"
      << "sigma_max = " << num(cfg.sigma_max) << "\n"
      << "rho = " << num(cfg.rho) << "\n"
      << "lambda_num_start = " << num(cfg.lambda_num_start) << "\n"
      << "lambda_num_end = " << num(cfg.lambda_num_end) << "\n"
      << "tau = " << num(cfg.tau) << "\n"
      << "pair_time_weight = " << (cfg.pair_time_weight ? "true" : "false")
      << "\n"
      << "max_pairs_per_query = " << cfg.max_pairs_per_query << "\n";
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogEntry {
  int64_t step = 0;
  double train_loss = 0;
  double val_ndcg10 = 0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;

  void save_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write log: " + path);
    out << "step,train_loss,val_ndcg10\n";
    char buf[96];
    for (const auto& e : entries) {
      std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g\n",
                    static_cast<long long>(e.step), e.train_loss,
                    e.val_ndcg10);
      out << buf;
    }
  }
};

struct TrainResult {
  DenoiserNet best;
  TrainLog log;
  double best_val_ndcg10 = 0;
  int64_t total_steps = 0;
  bool aborted = false;
  std::string abort_reason;
};

// Epoch loop with per-epoch reshuffling, periodic validation and
// best-checkpoint retention. Single-threaded and deterministic under a
// fixed seed.
inline TrainResult train(const RunConfig& cfg, const DatasetBundle& data) {
  cfg.validate();
  if (data.vali.queries.empty()) {
    throw std::invalid_argument("train: empty validation split");
  }

  const Dataset train_ds =
      subsample(data.train, cfg.k_fraction, cfg.subsample_seed);
  if (train_ds.queries.empty()) {
    throw std::invalid_argument("train: empty training split");
  }

  NetConfig net_cfg;
  net_cfg.io = model_io_for(cfg.objective, cfg.squared);
  net_cfg.feature_count = train_ds.feature_count;
  net_cfg.hidden_dim = cfg.hidden_dim;
  net_cfg.num_hidden_layers = cfg.num_hidden_layers;
  net_cfg.dropout_rate = static_cast<Real>(cfg.dropout);
  net_cfg.label_classes = 2;
  net_cfg.time_embed_dim = cfg.time_embed_dim;

  Rng master(cfg.seed);
  DenoiserNet net = DenoiserNet::init(net_cfg, master.fork(1).seed());
  Rng train_rng = master.fork(2);

  const bool pairwise = is_pairwise(cfg.objective);
  std::vector<RowRef> rows;
  std::vector<PairSample> pairs;
  if (pairwise) {
    Rng pair_rng = master.fork(3);
    pairs = make_all_pairs(train_ds, cfg.max_pairs_per_query, pair_rng);
    if (pairs.empty()) {
      throw std::invalid_argument("train: no preference pairs in training data");
    }
  } else {
    for (size_t q = 0; q < train_ds.queries.size(); ++q) {
      for (size_t r = 0; r < train_ds.queries[q].rows.size(); ++r) {
        rows.push_back(RowRef{static_cast<int>(q), static_cast<int>(r)});
      }
    }
  }
  const int64_t items =
      pairwise ? static_cast<int64_t>(pairs.size())
               : static_cast<int64_t>(rows.size());
  const int64_t steps_per_epoch =
      (items + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;

  const DiffusionSchedule sched = cfg.schedule();
  LossWeights weights;
  weights.lambda_num_start = static_cast<Real>(cfg.lambda_num_start);
  weights.lambda_num_end = static_cast<Real>(cfg.lambda_num_end);
  weights.total_steps = total_steps;
  GenLossOptions gen_opt;
  gen_opt.unit_time_weight = pairwise && !cfg.pair_time_weight;

  AdamWConfig adam;
  adam.learning_rate = static_cast<Real>(cfg.learning_rate);
  adam.weight_decay = static_cast<Real>(cfg.weight_decay);
  OptimState optim = OptimState::init(net.params());

  TrainResult result;
  double best_val = -1.0;
  double loss_accum = 0;
  int64_t loss_count = 0;
  int64_t step = 0;

  const auto run_validation = [&]() {
    const RunReport val = evaluate(net, data.vali, 10);
    const double train_loss =
        loss_count > 0 ? loss_accum / static_cast<double>(loss_count) : 0.0;
    result.log.entries.push_back(
        TrainLogEntry{step, train_loss, val.mean_ndcg10});
    loss_accum = 0;
    loss_count = 0;
    if (val.mean_ndcg10 > best_val) {
      best_val = val.mean_ndcg10;
      result.best = net;
      result.best.train_step = static_cast<uint64_t>(step);
      result.best.best_val_metric = val.mean_ndcg10;
    }
  };

  for (int epoch = 0; epoch < cfg.epochs && !result.aborted; ++epoch) {
    Rng shuffle_rng = master.fork(1000 + static_cast<uint64_t>(epoch));
    if (pairwise) {
      shuffle_rng.shuffle(pairs);
    } else {
      shuffle_rng.shuffle(rows);
    }

    for (int64_t offset = 0; offset < items; offset += cfg.batch_size) {
      const int64_t take = std::min<int64_t>(cfg.batch_size, items - offset);
      Tape tape;
      auto bound = net.bind(tape);
      Tensor loss;
      if (pairwise) {
        PairFeatureBatch batch = make_pair_batch(
            train_ds, std::span<const PairSample>(
                          pairs.data() + offset, static_cast<size_t>(take)));
        if (cfg.noise_std > 0) {
          perturb_in_place(batch.xi, cfg.noise_std, train_rng);
          perturb_in_place(batch.xj, cfg.noise_std, train_rng);
        }
        if (cfg.objective == ObjectiveKind::kDiscPairwise) {
          loss = disc_pairwise_loss(net, bound, batch,
                                    static_cast<Real>(cfg.tau), true,
                                    &train_rng);
        } else {
          loss = gen_pairwise_loss(net, bound, batch, sched, weights, step,
                                   train_rng, true,
                                   static_cast<Real>(cfg.tau), gen_opt)
                     .total;
        }
      } else {
        PointBatch batch = make_point_batch(
            train_ds, std::span<const RowRef>(rows.data() + offset,
                                              static_cast<size_t>(take)));
        if (cfg.noise_std > 0) {
          perturb_in_place(batch.x, cfg.noise_std, train_rng);
        }
        if (cfg.objective == ObjectiveKind::kDiscPointwise) {
          loss = cfg.squared
                     ? disc_pointwise_squared_loss(net, bound, batch, true,
                                                   &train_rng)
                     : disc_pointwise_loss(net, bound, batch, true,
                                           &train_rng);
        } else {
          loss = gen_pointwise_loss(net, bound, batch, sched, weights, step,
                                    train_rng, true, gen_opt)
                     .total;
        }
      }

      const double loss_value = loss.scalar();
      if (!std::isfinite(loss_value)) {
        result.aborted = true;
        result.abort_reason = "non-finite training loss at step " +
                              std::to_string(step);
        break;
      }
      tape.backward(loss);
      net.read_grads(tape, bound);
      try {
        adamw_step(net.params(), optim, adam);
      } catch (const std::runtime_error& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        break;
      }
      ++step;
      loss_accum += loss_value;
      ++loss_count;

      if (cfg.eval_interval > 0 && step % cfg.eval_interval == 0) {
        run_validation();
      }
    }
    if (!result.aborted && cfg.eval_interval == 0) {
      run_validation();
    }
  }
  // make sure the run ends with a validation point and a selected model
  if (result.log.entries.empty() ||
      result.log.entries.back().step != step) {
    if (!result.aborted) run_validation();
  }
  if (best_val < 0) {
    // aborted before any validation: keep the current parameters
    result.best = net;
    result.best.train_step = static_cast<uint64_t>(step);
    const RunReport val = evaluate(net, data.vali, 10);
    result.best.best_val_metric = val.mean_ndcg10;
    best_val = val.mean_ndcg10;
  }
  result.best_val_ndcg10 = best_val;
  result.total_steps = step;
  return result;
}

}  // namespace diffrank

#endif  // DIFFRANK_TRAIN_HPP_
