#ifndef DIFFRANK_MODEL_HPP_
#define DIFFRANK_MODEL_HPP_

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffrank/rng.hpp"
#include "diffrank/serialize.hpp"
#include "diffrank/tensor.hpp"

namespace diffrank {

// I/O wiring of the shared feedforward backbone.
//   kDiscLogits   x -> class logits
//   kDiscScore    x -> scalar score
//   kGenPointwise [x_t, y_onehot+mask, t_embed] -> [feature noise, class logits]
//   kGenPairwise  [x_t, y_onehot+mask, t_embed] -> [feature noise, scalar score]
enum class ModelIo : uint32_t {
  kDiscLogits = 0,
  kDiscScore = 1,
  kGenPointwise = 2,
  kGenPairwise = 3,
};

inline bool is_generative(ModelIo io) {
  return io == ModelIo::kGenPointwise || io == ModelIo::kGenPairwise;
}

struct NetConfig {
  ModelIo io = ModelIo::kDiscLogits;
  int feature_count = 0;
  int hidden_dim = 256;
  int num_hidden_layers = 4;
  Real dropout_rate = Real(0.1);
  int label_classes = 2;
  int time_embed_dim = 16;

  void validate() const {
    if (feature_count < 1) throw std::invalid_argument("config: feature_count < 1");
    if (hidden_dim < 1) throw std::invalid_argument("config: hidden_dim < 1");
    if (num_hidden_layers < 1) {
      throw std::invalid_argument("config: num_hidden_layers < 1");
    }
    if (dropout_rate < 0 || dropout_rate >= 1) {
      throw std::invalid_argument("config: dropout_rate outside [0, 1)");
    }
    if (label_classes < 2) throw std::invalid_argument("config: label_classes < 2");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
      throw std::invalid_argument("config: time_embed_dim must be even and >= 2");
    }
  }

  // width of the one-hot label input including the [MASK] dimension
  int label_input_dim() const { return label_classes + 1; }

  int input_dim() const {
    if (is_generative(io)) {
      return feature_count + label_input_dim() + time_embed_dim;
    }
    return feature_count;
  }

  // the label head never emits a [MASK] logit: the model must commit to a
  // real class, so the output is one dimension narrower than the label input
  int noise_dim() const { return is_generative(io) ? feature_count : 0; }
  int score_dim() const {
    switch (io) {
      case ModelIo::kDiscLogits:
      case ModelIo::kGenPointwise:
        return label_classes;
      case ModelIo::kDiscScore:
      case ModelIo::kGenPairwise:
        return 1;
    }
    return 0;
  }
  int output_dim() const { return noise_dim() + score_dim(); }

  bool operator==(const NetConfig&) const = default;
};

// Fixed sinusoidal encoding of the diffusion time t in [0, 1]; frequencies
// run geometrically from 1 to 1000.
class TimeEmbedding {
 public:
  explicit TimeEmbedding(int dim) : dim_(dim) {
    const int half = dim / 2;
    freqs_.resize(static_cast<size_t>(half));
    for (int i = 0; i < half; ++i) {
      const double e = half > 1 ? static_cast<double>(i) / (half - 1) : 0.0;
      freqs_[static_cast<size_t>(i)] = static_cast<Real>(std::pow(1000.0, e));
    }
  }

  int dim() const { return dim_; }

  void write(Real t, std::span<Real> out) const {
    for (size_t i = 0; i < freqs_.size(); ++i) {
      out[2 * i] = std::sin(freqs_[i] * t);
      out[2 * i + 1] = std::cos(freqs_[i] * t);
    }
  }

  std::vector<Real> embed(Real t) const {
    std::vector<Real> out(static_cast<size_t>(dim_));
    write(t, out);
    return out;
  }

 private:
  int dim_;
  std::vector<Real> freqs_;
};

struct Param {
  std::string name;
  int rows = 0, cols = 0;
  Values value;
  Values grad;

  int64_t size() const { return static_cast<int64_t>(rows) * cols; }
};

// Feedforward scorer/denoiser: num_hidden_layers blocks of
// linear -> SiLU -> LayerNorm -> dropout, then a linear head.
class DenoiserNet {
 public:
  DenoiserNet() = default;

  static DenoiserNet init(const NetConfig& cfg, uint64_t seed) {
    cfg.validate();
    DenoiserNet net;
    net.cfg_ = cfg;
    net.time_ = TimeEmbedding(cfg.time_embed_dim);
    Rng rng(seed);

    int in = cfg.input_dim();
    for (int l = 0; l < cfg.num_hidden_layers; ++l) {
      const std::string tag = "h" + std::to_string(l);
      net.params_.push_back(uniform_init(tag + ".w", in, cfg.hidden_dim, rng));
      net.params_.push_back(zeros(tag + ".b", 1, cfg.hidden_dim));
      net.params_.push_back(ones(tag + ".ln_gain", 1, cfg.hidden_dim));
      net.params_.push_back(zeros(tag + ".ln_bias", 1, cfg.hidden_dim));
      in = cfg.hidden_dim;
    }
    net.params_.push_back(uniform_init("head.w", in, cfg.output_dim(), rng));
    net.params_.push_back(zeros("head.b", 1, cfg.output_dim()));
    return net;
  }

  const NetConfig& config() const { return cfg_; }
  const TimeEmbedding& time_embedding() const { return time_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  uint64_t train_step = 0;
  double best_val_metric = 0.0;

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // (in, out) of every linear layer, hidden plus head
  std::vector<std::pair<int, int>> layer_dims() const {
    std::vector<std::pair<int, int>> dims;
    for (const auto& p : params_) {
      if (p.name.ends_with(".w")) dims.emplace_back(p.rows, p.cols);
    }
    return dims;
  }

  struct Bound {
    std::vector<Tensor> p;
  };

  // Leaf views recorded on the tape; gradients flow into every parameter.
  Bound bind(Tape& tape) const {
    Bound b;
    b.p.reserve(params_.size());
    for (const auto& p : params_) {
      b.p.push_back(tape.leaf_view(p.value, p.rows, p.cols));
    }
    return b;
  }

  // Constant views for inference; forward passes record nothing.
  Bound bind_const() const {
    Bound b;
    b.p.reserve(params_.size());
    for (const auto& p : params_) {
      ValuesPtr alias(ValuesPtr(), &p.value);
      b.p.emplace_back(alias, p.rows, p.cols);
    }
    return b;
  }

  // Copies d(loss)/d(param) off the tape, overwriting previous contents.
  void read_grads(const Tape& tape, const Bound& b) {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto g = tape.grad(b.p[i]);
      params_[i].grad.assign(g.begin(), g.end());
    }
  }

  Tensor forward_backbone(const Bound& b, Tensor h, bool training,
                          Rng* rng) const {
    if (training && rng == nullptr) {
      throw std::logic_error("forward: training mode requires an rng");
    }
    size_t k = 0;
    for (int l = 0; l < cfg_.num_hidden_layers; ++l) {
      const Tensor& w = b.p[k++];
      const Tensor& bias = b.p[k++];
      const Tensor& gain = b.p[k++];
      const Tensor& ln_bias = b.p[k++];
      h = silu(add_rowvec(matmul(h, w), bias));
      h = layernorm(h, gain, ln_bias);
      if (training && cfg_.dropout_rate > 0) {
        h = dropout(h, cfg_.dropout_rate, true, *rng);
      }
    }
    return add_rowvec(matmul(h, b.p[k]), b.p[k + 1]);
  }

  // x -> logits (kDiscLogits) or score (kDiscScore)
  Tensor forward_discriminative(const Bound& b, const Tensor& x, bool training,
                                Rng* rng) const {
    if (is_generative(cfg_.io)) {
      throw std::logic_error("forward_discriminative on a generative config");
    }
    check_width(x, cfg_.feature_count, "features");
    return forward_backbone(b, x, training, rng);
  }

  struct DenoiserOut {
    Tensor chi;  // feature-noise prediction, width feature_count
    Tensor psi;  // label logits (pointwise) or scalar score (pairwise)
  };

  // [x_t | y_onehot | embed(t)] -> (chi, psi). y rows must be one-hot over
  // label_classes + 1 slots (the extra slot is [MASK]); t entries in [0, 1].
  DenoiserOut forward_denoiser(const Bound& b, const Tensor& x_t,
                               const Tensor& y_in,
                               const std::vector<Real>& t, bool training,
                               Rng* rng) const {
    if (!is_generative(cfg_.io)) {
      throw std::logic_error("forward_denoiser on a discriminative config");
    }
    check_width(x_t, cfg_.feature_count, "features");
    check_width(y_in, cfg_.label_input_dim(), "label input");
    if (y_in.rows() != x_t.rows() ||
        static_cast<int>(t.size()) != x_t.rows()) {
      throw std::invalid_argument("forward_denoiser: row count mismatch");
    }
    check_one_hot(y_in);
    for (Real tv : t) {
      if (!(tv >= 0 && tv <= 1)) {
        throw std::domain_error("forward_denoiser: t outside [0, 1]");
      }
    }

    Values emb(static_cast<size_t>(x_t.rows()) * cfg_.time_embed_dim);
    for (int r = 0; r < x_t.rows(); ++r) {
      time_.write(t[static_cast<size_t>(r)],
                  std::span<Real>(emb.data() +
                                      static_cast<size_t>(r) *
                                          cfg_.time_embed_dim,
                                  static_cast<size_t>(cfg_.time_embed_dim)));
    }
    Tensor t_emb = Tape::constant(std::move(emb), x_t.rows(),
                                  cfg_.time_embed_dim);

    Tensor out = forward_backbone(b, concat_cols({x_t, y_in, t_emb}),
                                  training, rng);
    DenoiserOut split;
    split.chi = slice_cols(out, 0, cfg_.noise_dim());
    split.psi = slice_cols(out, cfg_.noise_dim(), cfg_.output_dim());
    return split;
  }

  // One-hot label input for a batch; index label_classes selects [MASK].
  Tensor one_hot_labels(const std::vector<int>& indices) const {
    const int width = cfg_.label_input_dim();
    Values v(indices.size() * static_cast<size_t>(width), Real(0));
    for (size_t r = 0; r < indices.size(); ++r) {
      const int idx = indices[r];
      if (idx < 0 || idx > cfg_.label_classes) {
        throw std::out_of_range("one_hot_labels: index out of range");
      }
      v[r * static_cast<size_t>(width) + static_cast<size_t>(idx)] = Real(1);
    }
    return Tape::constant(std::move(v), static_cast<int>(indices.size()),
                          width);
  }

  int mask_index() const { return cfg_.label_classes; }

  // Relevance scores for a feature matrix, inference mode (dropout off;
  // generative nets see clean features, t = 0 and a [MASK] label). For
  // two-class logit heads the score is the softmax probability of the
  // highest class; scalar heads score directly.
  std::vector<Real> score_rows(const Values& features, int n_rows) const {
    if (n_rows == 0) return {};
    Tensor x = Tape::constant(features, n_rows, cfg_.feature_count);
    const Bound b = bind_const();
    std::vector<Real> scores(static_cast<size_t>(n_rows));

    Tensor head;
    if (is_generative(cfg_.io)) {
      std::vector<int> mask(static_cast<size_t>(n_rows), mask_index());
      std::vector<Real> t0(static_cast<size_t>(n_rows), Real(0));
      head = forward_denoiser(b, x, one_hot_labels(mask), t0, false, nullptr)
                 .psi;
    } else {
      head = forward_discriminative(b, x, false, nullptr);
    }
    if (head.cols() == 1) {
      for (int r = 0; r < n_rows; ++r) scores[static_cast<size_t>(r)] = head.at(r, 0);
    } else {
      for (int r = 0; r < n_rows; ++r) {
        const auto p = softmax_values(std::span<const Real>(
            head.values().data() + static_cast<size_t>(r) * head.cols(),
            static_cast<size_t>(head.cols())));
        scores[static_cast<size_t>(r)] = p[static_cast<size_t>(head.cols() - 1)];
      }
    }
    return scores;
  }

  void save(const std::string& path) const {
    io::Writer w(path);
    w.magic("DRKCKPT1");
    w.u32(1);
    w.u32(static_cast<uint32_t>(cfg_.io));
    w.u32(static_cast<uint32_t>(cfg_.feature_count));
    w.u32(static_cast<uint32_t>(cfg_.hidden_dim));
    w.u32(static_cast<uint32_t>(cfg_.num_hidden_layers));
    w.f64(static_cast<double>(cfg_.dropout_rate));
    w.u32(static_cast<uint32_t>(cfg_.label_classes));
    w.u32(static_cast<uint32_t>(cfg_.time_embed_dim));
    w.u64(train_step);
    w.f64(best_val_metric);
    w.u32(static_cast<uint32_t>(params_.size()));
    for (const auto& p : params_) {
      w.str(p.name);
      w.u32(static_cast<uint32_t>(p.rows));
      w.u32(static_cast<uint32_t>(p.cols));
      w.array(p.value);
    }
    w.close();
  }

  static DenoiserNet load(const std::string& path) {
    io::Reader r(path);
    r.expect_magic("DRKCKPT1");
    if (r.u32() != 1) throw std::runtime_error("checkpoint: bad version");
    NetConfig cfg;
    cfg.io = static_cast<ModelIo>(r.u32());
    cfg.feature_count = static_cast<int>(r.u32());
    cfg.hidden_dim = static_cast<int>(r.u32());
    cfg.num_hidden_layers = static_cast<int>(r.u32());
    cfg.dropout_rate = static_cast<Real>(r.f64());
    cfg.label_classes = static_cast<int>(r.u32());
    cfg.time_embed_dim = static_cast<int>(r.u32());

    DenoiserNet net;
    net.cfg_ = cfg;
    net.time_ = TimeEmbedding(cfg.time_embed_dim);
    net.train_step = r.u64();
    net.best_val_metric = r.f64();
    const uint32_t n = r.u32();
    net.params_.resize(n);
    for (auto& p : net.params_) {
      p.name = r.str();
      p.rows = static_cast<int>(r.u32());
      p.cols = static_cast<int>(r.u32());
      p.value = r.array<Real>();
      if (p.size() != static_cast<int64_t>(p.value.size())) {
        throw std::runtime_error("checkpoint: parameter shape mismatch");
      }
    }
    return net;
  }

 private:
  static Param uniform_init(std::string name, int rows, int cols, Rng& rng) {
    Param p{std::move(name), rows, cols, Values(), Values()};
    const Real bound = Real(1) / std::sqrt(static_cast<Real>(rows));
    p.value.resize(static_cast<size_t>(p.size()));
    for (Real& v : p.value) {
      v = static_cast<Real>(rng.uniform(-bound, bound));
    }
    return p;
  }
  static Param zeros(std::string name, int rows, int cols) {
    Param p{std::move(name), rows, cols, Values(), Values()};
    p.value.assign(static_cast<size_t>(p.size()), Real(0));
    return p;
  }
  static Param ones(std::string name, int rows, int cols) {
    Param p{std::move(name), rows, cols, Values(), Values()};
    p.value.assign(static_cast<size_t>(p.size()), Real(1));
    return p;
  }

  static void check_width(const Tensor& t, int want, const char* what) {
    if (t.cols() != want) {
      throw std::invalid_argument(std::string("forward: ") + what +
                                  " width " + std::to_string(t.cols()) +
                                  ", expected " + std::to_string(want));
    }
  }

  static void check_one_hot(const Tensor& y) {
    for (int r = 0; r < y.rows(); ++r) {
      int ones_seen = 0;
      for (int c = 0; c < y.cols(); ++c) {
        const Real v = y.at(r, c);
        if (v == Real(1)) {
          ++ones_seen;
        } else if (v != Real(0)) {
          throw std::invalid_argument("forward_denoiser: label input not one-hot");
        }
      }
      if (ones_seen != 1) {
        throw std::invalid_argument("forward_denoiser: label input not one-hot");
      }
    }
  }

  NetConfig cfg_;
  TimeEmbedding time_{16};
  std::vector<Param> params_;
};

}  // namespace diffrank

#endif  // DIFFRANK_MODEL_HPP_
