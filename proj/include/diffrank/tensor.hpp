#ifndef DIFFRANK_TENSOR_HPP_
#define DIFFRANK_TENSOR_HPP_

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffrank/rng.hpp"

namespace diffrank {

#ifdef DIFFRANK_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Values = std::vector<Real>;
using ValuesPtr = std::shared_ptr<const Values>;

using EigenMatrix =
    Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenMatrix>;
using EigenConstMap = Eigen::Map<const EigenMatrix>;

class Tape;

// Immutable dense 2-D array. Scalars are 1x1, row vectors 1xN. A tensor that
// participates in gradient computation carries the id of its node on the tape
// that recorded it; plain data tensors carry node() == -1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(ValuesPtr values, int rows, int cols, Tape* tape = nullptr,
         int node = -1)
      : values_(std::move(values)), rows_(rows), cols_(cols), tape_(tape),
        node_(node) {
    if (static_cast<int64_t>(rows) * cols !=
        static_cast<int64_t>(values_->size())) {
      throw std::invalid_argument("tensor: shape does not match value count");
    }
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int64_t size() const { return static_cast<int64_t>(rows_) * cols_; }
  std::vector<int> shape() const { return {rows_, cols_}; }

  const Values& values() const { return *values_; }
  const ValuesPtr& values_ptr() const { return values_; }
  Real at(int r, int c) const { return (*values_)[static_cast<size_t>(r) * cols_ + c]; }

  Real scalar() const {
    if (size() != 1) throw std::logic_error("tensor: scalar() on non-scalar");
    return (*values_)[0];
  }

  bool requires_grad() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }

  EigenConstMap map() const {
    return EigenConstMap(values_->data(), rows_, cols_);
  }

 private:
  ValuesPtr values_;
  int rows_ = 0;
  int cols_ = 0;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Per-step record of differentiable operations. Nodes are appended in
// execution order, so walking them from the loss node downward visits the
// graph in reverse topological order. Rebuilt for every training step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Records a gradient-carrying input that owns a copy of the data.
  Tensor leaf(Values v, int rows, int cols) {
    auto ptr = std::make_shared<const Values>(std::move(v));
    const int id = add_node(static_cast<int64_t>(rows) * cols, nullptr);
    return Tensor(ptr, rows, cols, this, id);
  }

  // Records a gradient-carrying view over storage owned by the caller (model
  // parameters). The storage must outlive the tape.
  Tensor leaf_view(const Values& storage, int rows, int cols) {
    ValuesPtr alias(ValuesPtr(), &storage);
    const int id = add_node(static_cast<int64_t>(rows) * cols, nullptr);
    return Tensor(alias, rows, cols, this, id);
  }

  // Plain data: participates in forward math but records no gradient.
  static Tensor constant(Values v, int rows, int cols) {
    return Tensor(std::make_shared<const Values>(std::move(v)), rows, cols);
  }

  static Tensor scalar_constant(Real v) { return constant({v}, 1, 1); }

  void backward(const Tensor& loss) {
    if (loss.size() != 1 || !loss.requires_grad() || loss.tape() != this) {
      throw std::logic_error("backward: loss must be a scalar on this tape");
    }
    if (backward_run_) {
      throw std::logic_error("backward: tape already traversed; reset first");
    }
    backward_run_ = true;
    nodes_[loss.node()].grad[0] = Real(1);
    for (int i = loss.node(); i >= 0; --i) {
      if (nodes_[i].backprop) nodes_[i].backprop();
    }
  }

  std::span<const Real> grad(const Tensor& t) const {
    if (!t.requires_grad() || t.tape() != this) {
      throw std::logic_error("grad: tensor is not recorded on this tape");
    }
    if (!backward_run_) throw std::logic_error("grad: run backward first");
    return nodes_[t.node()].grad;
  }

  void reset() {
    nodes_.clear();
    backward_run_ = false;
  }

  size_t node_count() const { return nodes_.size(); }
  bool backward_run() const { return backward_run_; }

  // --- used by ops ---
  int add_node(int64_t numel, std::function<void()> backprop) {
    nodes_.push_back(Node{Values(static_cast<size_t>(numel), Real(0)),
                          std::move(backprop)});
    return static_cast<int>(nodes_.size() - 1);
  }
  Values& grad_buf(int node) { return nodes_[node].grad; }
  void set_backprop(int node, std::function<void()> fn) {
    nodes_[node].backprop = std::move(fn);
  }

 private:
  struct Node {
    Values grad;
    std::function<void()> backprop;
  };
  std::vector<Node> nodes_;
  bool backward_run_ = false;
};

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->requires_grad()) continue;
    if (tape == nullptr) {
      tape = t->tape();
    } else if (tape != t->tape()) {
      throw std::logic_error("op: operands live on different tapes");
    }
  }
  return tape;
}

// Wraps freshly computed values either as a recorded node (when any operand
// is on a tape) or as a constant.
template <typename BackpropFactory>
Tensor make_result(Tape* tape, Values out, int rows, int cols,
                   BackpropFactory&& factory) {
  if (tape == nullptr) {
    return Tape::constant(std::move(out), rows, cols);
  }
  auto ptr = std::make_shared<const Values>(std::move(out));
  const int id = tape->add_node(static_cast<int64_t>(rows) * cols, nullptr);
  Tensor result(ptr, rows, cols, tape, id);
  tape->set_backprop(id, factory(result));
  return result;
}

inline Real sigmoid(Real x) {
  if (x >= 0) {
    return Real(1) / (Real(1) + std::exp(-x));
  }
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument(
        "matmul: inner dimensions disagree (" + std::to_string(a.cols()) +
        " vs " + std::to_string(b.rows()) + ")");
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Values out(static_cast<size_t>(m) * n);
  EigenMap(out.data(), m, n).noalias() = a.map() * b.map();

  Tape* tape = detail::common_tape({&a, &b});
  return detail::make_result(tape, std::move(out), m, n, [&](const Tensor& y) {
    return [tape, a, b, y, m, k, n]() {
      EigenConstMap dy(tape->grad_buf(y.node()).data(), m, n);
      if (a.requires_grad()) {
        EigenMap da(tape->grad_buf(a.node()).data(), m, k);
        da.noalias() += dy * b.map().transpose();
      }
      if (b.requires_grad()) {
        EigenMap db(tape->grad_buf(b.node()).data(), k, n);
        db.noalias() += a.map().transpose() * dy;
      }
    };
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  Values out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];

  Tape* tape = detail::common_tape({&a, &b});
  return detail::make_result(
      tape, std::move(out), a.rows(), a.cols(), [&](const Tensor& y) {
        return [tape, a, b, y]() {
          const Values& dy = tape->grad_buf(y.node());
          if (a.requires_grad()) {
            Values& da = tape->grad_buf(a.node());
            for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
          }
          if (b.requires_grad()) {
            Values& db = tape->grad_buf(b.node());
            for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
          }
        };
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("sub: shape mismatch");
  }
  Values out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];

  Tape* tape = detail::common_tape({&a, &b});
  return detail::make_result(
      tape, std::move(out), a.rows(), a.cols(), [&](const Tensor& y) {
        return [tape, a, b, y]() {
          const Values& dy = tape->grad_buf(y.node());
          if (a.requires_grad()) {
            Values& da = tape->grad_buf(a.node());
            for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
          }
          if (b.requires_grad()) {
            Values& db = tape->grad_buf(b.node());
            for (size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
          }
        };
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("mul: shape mismatch");
  }
  Values out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];

  Tape* tape = detail::common_tape({&a, &b});
  return detail::make_result(
      tape, std::move(out), a.rows(), a.cols(), [&](const Tensor& y) {
        return [tape, a, b, y]() {
          const Values& dy = tape->grad_buf(y.node());
          if (a.requires_grad()) {
            Values& da = tape->grad_buf(a.node());
            for (size_t i = 0; i < dy.size(); ++i)
              da[i] += dy[i] * b.values()[i];
          }
          if (b.requires_grad()) {
            Values& db = tape->grad_buf(b.node());
            for (size_t i = 0; i < dy.size(); ++i)
              db[i] += dy[i] * a.values()[i];
          }
        };
      });
}

inline Tensor scale(const Tensor& a, Real k) {
  Values out(a.values());
  for (Real& v : out) v *= k;

  Tape* tape = detail::common_tape({&a});
  return detail::make_result(
      tape, std::move(out), a.rows(), a.cols(), [&](const Tensor& y) {
        return [tape, a, y, k]() {
          const Values& dy = tape->grad_buf(y.node());
          Values& da = tape->grad_buf(a.node());
          for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * k;
        };
      });
}

// a[m x n] + broadcast of v[1 x n] over rows.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) {
    throw std::invalid_argument("add_rowvec: v must be 1 x cols(a)");
  }
  const int m = a.rows(), n = a.cols();
  Values out(a.values());
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out[static_cast<size_t>(r) * n + c] += v.values()[c];

  Tape* tape = detail::common_tape({&a, &v});
  return detail::make_result(tape, std::move(out), m, n, [&](const Tensor& y) {
    return [tape, a, v, y, m, n]() {
      const Values& dy = tape->grad_buf(y.node());
      if (a.requires_grad()) {
        Values& da = tape->grad_buf(a.node());
        for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (v.requires_grad()) {
        Values& dv = tape->grad_buf(v.node());
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c)
            dv[c] += dy[static_cast<size_t>(r) * n + c];
      }
    };
  });
}

inline Tensor silu(const Tensor& x) {
  Values out(x.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const Real v = x.values()[i];
    out[i] = v * detail::sigmoid(v);
  }

  Tape* tape = detail::common_tape({&x});
  return detail::make_result(
      tape, std::move(out), x.rows(), x.cols(), [&](const Tensor& y) {
        return [tape, x, y]() {
          const Values& dy = tape->grad_buf(y.node());
          Values& dx = tape->grad_buf(x.node());
          for (size_t i = 0; i < dy.size(); ++i) {
            const Real v = x.values()[i];
            const Real s = detail::sigmoid(v);
            dx[i] += dy[i] * s * (Real(1) + v * (Real(1) - s));
          }
        };
      });
}

// log(1 + e^x), overflow-safe; derivative sigmoid(x).
inline Tensor softplus(const Tensor& x) {
  Values out(x.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const Real v = x.values()[i];
    out[i] = std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v)));
  }

  Tape* tape = detail::common_tape({&x});
  return detail::make_result(
      tape, std::move(out), x.rows(), x.cols(), [&](const Tensor& y) {
        return [tape, x, y]() {
          const Values& dy = tape->grad_buf(y.node());
          Values& dx = tape->grad_buf(x.node());
          for (size_t i = 0; i < dy.size(); ++i) {
            dx[i] += dy[i] * detail::sigmoid(x.values()[i]);
          }
        };
      });
}

// Per-row standardization of x[m x d] with learned gain/bias[1 x d].
inline Tensor layernorm(const Tensor& x, const Tensor& gain,
                        const Tensor& bias, Real eps = Real(1e-5)) {
  const int m = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 ||
      bias.cols() != d) {
    throw std::invalid_argument("layernorm: gain/bias must be 1 x cols(x)");
  }
  if (!(eps > Real(0))) throw std::invalid_argument("layernorm: eps must be > 0");

  auto xhat = std::make_shared<Values>(static_cast<size_t>(m) * d);
  auto inv_std = std::make_shared<Values>(static_cast<size_t>(m));
  Values out(static_cast<size_t>(m) * d);
  for (int r = 0; r < m; ++r) {
    const Real* row = x.values().data() + static_cast<size_t>(r) * d;
    Real mean = 0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    Real var = 0;
    for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= d;
    const Real is = Real(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < d; ++c) {
      const Real xh = (row[c] - mean) * is;
      (*xhat)[static_cast<size_t>(r) * d + c] = xh;
      out[static_cast<size_t>(r) * d + c] = gain.values()[c] * xh + bias.values()[c];
    }
  }

  Tape* tape = detail::common_tape({&x, &gain, &bias});
  return detail::make_result(tape, std::move(out), m, d, [&](const Tensor& y) {
    return [tape, x, gain, bias, y, xhat, inv_std, m, d]() {
      const Values& dy = tape->grad_buf(y.node());
      for (int r = 0; r < m; ++r) {
        const size_t off = static_cast<size_t>(r) * d;
        if (x.requires_grad()) {
          // d/dx of (x - mean) * inv_std, with mean/var both functions of x.
          Real sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (int c = 0; c < d; ++c) {
            const Real dxh = dy[off + c] * gain.values()[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * (*xhat)[off + c];
          }
          Values& dx = tape->grad_buf(x.node());
          const Real is = (*inv_std)[r];
          for (int c = 0; c < d; ++c) {
            const Real dxh = dy[off + c] * gain.values()[c];
            dx[off + c] += is * (dxh - sum_dxhat / d -
                                 (*xhat)[off + c] * sum_dxhat_xhat / d);
          }
        }
        if (gain.requires_grad()) {
          Values& dg = tape->grad_buf(gain.node());
          for (int c = 0; c < d; ++c) dg[c] += dy[off + c] * (*xhat)[off + c];
        }
        if (bias.requires_grad()) {
          Values& db = tape->grad_buf(bias.node());
          for (int c = 0; c < d; ++c) db[c] += dy[off + c];
        }
      }
    };
  });
}

// Inverted dropout: training mode zeroes elements with probability `rate` and
// scales survivors by 1/(1-rate); inference mode is the identity.
inline Tensor dropout(const Tensor& x, Real rate, bool training, Rng& rng) {
  if (!(rate >= Real(0)) || rate >= Real(1)) {
    throw std::invalid_argument("dropout: rate must be in [0, 1)");
  }
  if (!training || rate == Real(0)) return x;

  const Real keep_scale = Real(1) / (Real(1) - rate);
  auto mask = std::make_shared<Values>(x.values().size());
  Values out(x.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const Real m = rng.bernoulli(rate) ? Real(0) : keep_scale;
    (*mask)[i] = m;
    out[i] = x.values()[i] * m;
  }

  Tape* tape = detail::common_tape({&x});
  return detail::make_result(
      tape, std::move(out), x.rows(), x.cols(), [&](const Tensor& y) {
        return [tape, x, y, mask]() {
          const Values& dy = tape->grad_buf(y.node());
          Values& dx = tape->grad_buf(x.node());
          for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
        };
      });
}

// Per-row -log softmax(logits)[target], max-subtracted for stability.
// Output is [m x 1].
inline Tensor softmax_cross_entropy_rows(const Tensor& logits,
                                         const std::vector<int>& targets) {
  const int m = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != m) {
    throw std::invalid_argument("softmax_ce: one target per row required");
  }
  for (int t : targets) {
    if (t < 0 || t >= c) {
      throw std::out_of_range("softmax_ce: target index out of range");
    }
  }

  auto probs = std::make_shared<Values>(static_cast<size_t>(m) * c);
  Values out(static_cast<size_t>(m));
  for (int r = 0; r < m; ++r) {
    const Real* row = logits.values().data() + static_cast<size_t>(r) * c;
    Real mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const Real log_z = std::log(z);
    for (int j = 0; j < c; ++j) {
      (*probs)[static_cast<size_t>(r) * c + j] = std::exp(row[j] - mx) / z;
    }
    out[r] = log_z - (row[targets[r]] - mx);
  }

  Tape* tape = detail::common_tape({&logits});
  return detail::make_result(tape, std::move(out), m, 1, [&](const Tensor& y) {
    return [tape, logits, y, probs, targets, m, c]() {
      const Values& dy = tape->grad_buf(y.node());
      Values& dl = tape->grad_buf(logits.node());
      for (int r = 0; r < m; ++r) {
        const size_t off = static_cast<size_t>(r) * c;
        for (int j = 0; j < c; ++j) {
          const Real indicator = (j == targets[r]) ? Real(1) : Real(0);
          dl[off + j] += dy[r] * ((*probs)[off + j] - indicator);
        }
      }
    };
  });
}

inline Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;

  Tape* tape = detail::common_tape({&x});
  return detail::make_result(tape, Values{s}, 1, 1, [&](const Tensor& y) {
    return [tape, x, y]() {
      const Real dy = tape->grad_buf(y.node())[0];
      Values& dx = tape->grad_buf(x.node());
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy;
    };
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), Real(1) / static_cast<Real>(x.size()));
}

// Mean over rows of -log softmax(logits)[target]. Scalar output.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& targets) {
  return mean(softmax_cross_entropy_rows(logits, targets));
}

inline Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = xs[0].rows();
  int total = 0;
  for (const Tensor& t : xs) {
    if (t.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    total += t.cols();
  }
  Values out(static_cast<size_t>(m) * total);
  int base = 0;
  for (const Tensor& t : xs) {
    for (int r = 0; r < m; ++r) {
      std::copy(t.values().begin() + static_cast<size_t>(r) * t.cols(),
                t.values().begin() + static_cast<size_t>(r + 1) * t.cols(),
                out.begin() + static_cast<size_t>(r) * total + base);
    }
    base += t.cols();
  }

  Tape* tape = nullptr;
  for (const Tensor& t : xs) {
    if (!t.requires_grad()) continue;
    if (tape == nullptr) {
      tape = t.tape();
    } else if (tape != t.tape()) {
      throw std::logic_error("op: operands live on different tapes");
    }
  }
  return detail::make_result(
      tape, std::move(out), m, total, [&](const Tensor& y) {
        return [tape, xs, y, m, total]() {
          const Values& dy = tape->grad_buf(y.node());
          int base = 0;
          for (const Tensor& t : xs) {
            if (t.requires_grad()) {
              Values& dt = tape->grad_buf(t.node());
              for (int r = 0; r < m; ++r)
                for (int c = 0; c < t.cols(); ++c)
                  dt[static_cast<size_t>(r) * t.cols() + c] +=
                      dy[static_cast<size_t>(r) * total + base + c];
            }
            base += t.cols();
          }
        };
      });
}

// Columns [c0, c1) of x.
inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (c0 < 0 || c1 > x.cols() || c0 >= c1) {
    throw std::invalid_argument("slice_cols: bad column range");
  }
  const int m = x.rows(), w = c1 - c0, n = x.cols();
  Values out(static_cast<size_t>(m) * w);
  for (int r = 0; r < m; ++r)
    std::copy(x.values().begin() + static_cast<size_t>(r) * n + c0,
              x.values().begin() + static_cast<size_t>(r) * n + c1,
              out.begin() + static_cast<size_t>(r) * w);

  Tape* tape = detail::common_tape({&x});
  return detail::make_result(tape, std::move(out), m, w, [&](const Tensor& y) {
    return [tape, x, y, m, w, n, c0]() {
      const Values& dy = tape->grad_buf(y.node());
      Values& dx = tape->grad_buf(x.node());
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c)
          dx[static_cast<size_t>(r) * n + c0 + c] +=
              dy[static_cast<size_t>(r) * w + c];
    };
  });
}

// Softmax of a single row, returned as plain values (no gradient).
inline Values softmax_values(std::span<const Real> row) {
  Values p(row.size());
  Real mx = row[0];
  for (Real v : row) mx = std::max(mx, v);
  Real z = 0;
  for (size_t i = 0; i < row.size(); ++i) {
    p[i] = std::exp(row[i] - mx);
    z += p[i];
  }
  for (Real& v : p) v /= z;
  return p;
}

}  // namespace diffrank

#endif  // DIFFRANK_TENSOR_HPP_
