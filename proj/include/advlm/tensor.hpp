// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors and a define-by-run reverse-mode tape.
//
// A Tensor is a shared handle: copying it aliases the same storage, so a
// parameter captured by the tape sees the gradient written during backward.
// Every differentiable op lives on Tape; ops whose inputs do not require
// gradients (or that run on a non-recording tape) are computed but not
// recorded.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "advlm/error.hpp"

namespace advlm {

using Shape = std::vector<std::size_t>;
using TokenId = std::size_t;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty == no gradient yet
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw DimensionError("shape " + to_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.data_ = std::make_shared<detail::TensorData>();
    t.data_->shape = std::move(shape);
    t.data_->values = std::move(values);
    t.data_->requires_grad = requires_grad;
    return t;
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return from({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> v;
    const std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return from({rows.size(), cols}, std::move(v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t size() const { return data_->values.size(); }
  std::size_t dim(std::size_t i) const { return data_->shape.at(i); }

  std::span<const double> values() const { return data_->values; }
  std::span<double> mutable_values() { return data_->values; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return data_->values[0];
  }
  double operator[](std::size_t i) const { return data_->values[i]; }
  double at(std::size_t r, std::size_t c) const { return data_->values[r * dim(1) + c]; }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool on) { data_->requires_grad = on; }

  bool has_grad() const { return !data_->grad.empty(); }
  /// Gradient values; all zeros when no gradient has been accumulated.
  std::span<const double> grad() const {
    data_->ensure_grad();
    return data_->grad;
  }
  std::span<double> mutable_grad() {
    data_->ensure_grad();
    return data_->grad;
  }
  void zero_grad() { data_->grad.clear(); }

  /// Deep copy of shape and values; the copy carries no gradient.
  Tensor clone() const { return from(shape(), data_->values, requires_grad()); }

  bool is_same(const Tensor& other) const { return data_ == other.data_; }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorData> data_;
};

namespace kernel {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      if (s == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      if (s == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += s * bi[j];
    }
  }
}

inline std::vector<double> transpose(std::size_t rows, std::size_t cols, const double* a) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// max + log(sum(exp(x - max)))
inline double log_sum_exp(std::span<const double> x) {
  const double mx = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace kernel

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  /// [m x k] * [k x n]
  Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
      throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                           to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    kernel::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data_->values.data());
    record("matmul", out, {a, b}, [m, k, n](Node& o, Node& x, Node& y) {
      if (x.requires_grad) {
        x.ensure_grad();
        auto yt = kernel::transpose(k, n, y.values.data());
        kernel::gemm_nn(m, n, k, o.grad.data(), yt.data(), x.grad.data());
      }
      if (y.requires_grad) {
        y.ensure_grad();
        kernel::gemm_tn(m, k, n, x.values.data(), o.grad.data(), y.grad.data());
      }
    });
    return out;
  }

  /// [m x k] * [n x k]^T; the output-embedding product uses this with the tied matrix.
  Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_bt");
    require_rank(b, 2, "matmul_bt");
    if (a.dim(1) != b.dim(1)) {
      throw DimensionError("matmul_bt: inner dimensions differ, " + to_string(a.shape()) +
                           " x " + to_string(b.shape()) + "^T");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::zeros({m, n});
    auto bt = kernel::transpose(n, k, b.values().data());
    kernel::gemm_nn(m, k, n, a.values().data(), bt.data(), out.data_->values.data());
    record("matmul_bt", out, {a, b}, [m, k, n](Node& o, Node& x, Node& y) {
      if (x.requires_grad) {
        x.ensure_grad();
        kernel::gemm_nn(m, n, k, o.grad.data(), y.values.data(), x.grad.data());
      }
      if (y.requires_grad) {
        y.ensure_grad();
        kernel::gemm_tn(m, n, k, o.grad.data(), x.values.data(), y.grad.data());
      }
    });
    return out;
  }

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    Tensor out = a.clone();
    out.set_requires_grad(false);
    auto& ov = out.data_->values;
    const auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
    record("add", out, {a, b}, [](Node& o, Node& x, Node& y) {
      accumulate(x, o.grad, 1.0);
      accumulate(y, o.grad, 1.0);
    });
    return out;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    Tensor out = a.clone();
    out.set_requires_grad(false);
    auto& ov = out.data_->values;
    const auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
    record("sub", out, {a, b}, [](Node& o, Node& x, Node& y) {
      accumulate(x, o.grad, 1.0);
      accumulate(y, o.grad, -1.0);
    });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    Tensor out = a.clone();
    out.set_requires_grad(false);
    auto& ov = out.data_->values;
    const auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
    record("mul", out, {a, b}, [](Node& o, Node& x, Node& y) {
      if (x.requires_grad) {
        x.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) x.grad[i] += o.grad[i] * y.values[i];
      }
      if (y.requires_grad) {
        y.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) y.grad[i] += o.grad[i] * x.values[i];
      }
    });
    return out;
  }

  Tensor scale(const Tensor& a, double s) {
    Tensor out = map(a, [s](double v) { return s * v; });
    record("scale", out, {a}, [s](Node& o, Node& x) { accumulate(x, o.grad, s); });
    return out;
  }

  Tensor tanh(const Tensor& a) {
    Tensor out = map(a, [](double v) { return std::tanh(v); });
    record("tanh", out, {a}, [](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double y = o.values[i];
        x.grad[i] += o.grad[i] * (1.0 - y * y);
      }
    });
    return out;
  }

  Tensor sigmoid(const Tensor& a) {
    Tensor out = map(a, kernel::sigmoid);
    record("sigmoid", out, {a}, [](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double y = o.values[i];
        x.grad[i] += o.grad[i] * y * (1.0 - y);
      }
    });
    return out;
  }

  Tensor exp(const Tensor& a) {
    Tensor out = map(a, [](double v) { return std::exp(v); });
    record("exp", out, {a}, [](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) x.grad[i] += o.grad[i] * o.values[i];
    });
    return out;
  }

  Tensor log(const Tensor& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!(a[i] > 0.0)) {
        throw DomainError("log: non-positive operand " + std::to_string(a[i]) + " at index " +
                          std::to_string(i));
      }
    }
    Tensor out = map(a, [](double v) { return std::log(v); });
    record("log", out, {a}, [](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) x.grad[i] += o.grad[i] / x.values[i];
    });
    return out;
  }

  /// [m x n] + [n] broadcast over rows.
  Tensor add_bias(const Tensor& a, const Tensor& bias) {
    require_rank(a, 2, "add_bias");
    if (bias.rank() != 1 || bias.dim(0) != a.dim(1)) {
      throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not fit " +
                           to_string(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = a.clone();
    out.set_requires_grad(false);
    auto& ov = out.data_->values;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += bias[j];
    record("add_bias", out, {a, bias}, [m, n](Node& o, Node& x, Node& b) {
      accumulate(x, o.grad, 1.0);
      if (b.requires_grad) {
        b.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) b.grad[j] += o.grad[i * n + j];
      }
    });
    return out;
  }

  Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out = Tensor::scalar(s);
    record("sum", out, {a}, [](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (auto& g : x.grad) g += o.grad[0];
    });
    return out;
  }

  /// Stable log-sum-exp. A vector reduces to a scalar; a matrix reduces each
  /// row, giving one value per row. The backward weights are the softmax.
  Tensor log_sum_exp(const Tensor& a) {
    if (a.rank() != 1 && a.rank() != 2) {
      throw DimensionError("log_sum_exp: expected vector or matrix, got " + to_string(a.shape()));
    }
    const bool rows = a.rank() == 2;
    const std::size_t m = rows ? a.dim(0) : 1;
    const std::size_t n = rows ? a.dim(1) : a.dim(0);
    Tensor out = rows ? Tensor::zeros({m}) : Tensor::scalar(0.0);
    auto weights = std::make_shared<std::vector<double>>(m * n);
    const auto av = a.values();
    for (std::size_t i = 0; i < m; ++i) {
      auto row = av.subspan(i * n, n);
      const double lse = kernel::log_sum_exp(row);
      out.data_->values[i] = lse;
      for (std::size_t j = 0; j < n; ++j) (*weights)[i * n + j] = std::exp(row[j] - lse);
    }
    record("log_sum_exp", out, {a}, [weights, m, n](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) x.grad[i * n + j] += o.grad[i] * (*weights)[i * n + j];
    });
    return out;
  }

  /// Euclidean norm, of a vector (scalar result) or of each matrix row. The
  /// gradient at the origin is taken to be zero.
  Tensor l2_norm(const Tensor& a) {
    if (a.rank() != 1 && a.rank() != 2) {
      throw DimensionError("l2_norm: expected vector or matrix, got " + to_string(a.shape()));
    }
    const bool rows = a.rank() == 2;
    const std::size_t m = rows ? a.dim(0) : 1;
    const std::size_t n = rows ? a.dim(1) : a.dim(0);
    Tensor out = rows ? Tensor::zeros({m}) : Tensor::scalar(0.0);
    const auto av = a.values();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
      out.data_->values[i] = std::sqrt(s);
    }
    record("l2_norm", out, {a}, [m, n](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double norm = o.values[i];
        if (norm == 0.0) continue;
        const double s = o.grad[i] / norm;
        for (std::size_t j = 0; j < n; ++j) x.grad[i * n + j] += s * x.values[i * n + j];
      }
    });
    return out;
  }

  /// Same values, no gradient path back to `a`.
  static Tensor detach(const Tensor& a) {
    Tensor out = a.clone();
    out.set_requires_grad(false);
    return out;
  }

  /// Row lookup; repeated ids scatter-add into the same gradient row.
  Tensor gather_rows(const Tensor& m, std::span<const TokenId> ids) {
    require_rank(m, 2, "gather_rows");
    const std::size_t rows = m.dim(0), d = m.dim(1);
    if (ids.empty()) throw DimensionError("gather_rows: empty id list");
    for (auto id : ids) {
      if (id >= rows) {
        throw IndexError("gather_rows: id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(rows) + ")");
      }
    }
    Tensor out = Tensor::zeros({ids.size(), d});
    auto& ov = out.data_->values;
    const auto mv = m.values();
    for (std::size_t r = 0; r < ids.size(); ++r)
      std::copy_n(mv.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, ov.begin() + static_cast<std::ptrdiff_t>(r * d));
    std::vector<TokenId> idx(ids.begin(), ids.end());
    record("gather_rows", out, {m}, [idx = std::move(idx), d](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) x.grad[idx[r] * d + j] += o.grad[r * d + j];
    });
    return out;
  }

  Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require_rank(a, 2, "slice_rows");
    if (count == 0 || begin + count > a.dim(0)) {
      throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                           std::to_string(begin + count) + ") outside " + to_string(a.shape()));
    }
    const std::size_t n = a.dim(1);
    const auto av = a.values().subspan(begin * n, count * n);
    Tensor out = Tensor::from({count, n}, {av.begin(), av.end()});
    record("slice_rows", out, {a}, [begin, n](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) x.grad[begin * n + i] += o.grad[i];
    });
    return out;
  }

  Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    require_rank(a, 2, "slice_cols");
    if (count == 0 || begin + count > a.dim(1)) {
      throw DimensionError("slice_cols: cols [" + std::to_string(begin) + ", " +
                           std::to_string(begin + count) + ") outside " + to_string(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({m, count});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) out.data_->values[i * count + j] = a[i * n + begin + j];
    record("slice_cols", out, {a}, [m, n, begin, count](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) x.grad[i * n + begin + j] += o.grad[i * count + j];
    });
    return out;
  }

  /// Stacks matrices with equal column counts vertically.
  Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
    std::size_t m = 0;
    for (const auto& p : parts) {
      if (p.rank() != 2 || p.dim(1) != n) {
        throw DimensionError("concat_rows: " + to_string(p.shape()) + " does not stack with " +
                             to_string(parts[0].shape()));
      }
      m += p.dim(0);
    }
    std::vector<double> v;
    v.reserve(m * n);
    for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
    Tensor out = Tensor::from({m, n}, std::move(v));
    if (!should_record(parts)) return out;
    std::vector<std::shared_ptr<Node>> inputs;
    for (const auto& p : parts) inputs.push_back(p.data_);
    out.set_requires_grad(true);
    ops_.push_back({"concat_rows", out.data_, [inputs, o = out.data_.get()] {
                      std::size_t off = 0;
                      for (const auto& x : inputs) {
                        const std::size_t len = x->values.size();
                        if (x->requires_grad) {
                          x->ensure_grad();
                          for (std::size_t i = 0; i < len; ++i) x->grad[i] += o->grad[off + i];
                        }
                        off += len;
                      }
                    }});
    return out;
  }

  /// out[r] = a[r, ids[r]]
  Tensor pick(const Tensor& a, std::span<const TokenId> ids) {
    require_rank(a, 2, "pick");
    check_row_ids(a, ids, "pick");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({m});
    for (std::size_t r = 0; r < m; ++r) out.data_->values[r] = a[r * n + ids[r]];
    std::vector<TokenId> idx(ids.begin(), ids.end());
    record("pick", out, {a}, [idx = std::move(idx), n](Node& o, Node& x) {
      if (!x.requires_grad) return;
      x.ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) x.grad[r * n + idx[r]] += o.grad[r];
    });
    return out;
  }

  /// Copy of `a` with a[r, ids[r]] reduced by offsets[r]; every other entry
  /// passes through unchanged.
  Tensor offset_at(const Tensor& a, std::span<const TokenId> ids, const Tensor& offsets) {
    require_rank(a, 2, "offset_at");
    check_row_ids(a, ids, "offset_at");
    if (offsets.rank() != 1 || offsets.dim(0) != a.dim(0)) {
      throw DimensionError("offset_at: offsets " + to_string(offsets.shape()) + " vs " +
                           to_string(a.shape()));
    }
    const std::size_t n = a.dim(1);
    Tensor out = a.clone();
    out.set_requires_grad(false);
    for (std::size_t r = 0; r < a.dim(0); ++r) out.data_->values[r * n + ids[r]] -= offsets[r];
    std::vector<TokenId> idx(ids.begin(), ids.end());
    record("offset_at", out, {a, offsets}, [idx = std::move(idx), n](Node& o, Node& x, Node& off) {
      accumulate(x, o.grad, 1.0);
      if (off.requires_grad) {
        off.ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r) off.grad[r] -= o.grad[r * n + idx[r]];
      }
    });
    return out;
  }

  /// Replays the tape in reverse from a scalar loss. Intermediate gradients are
  /// reset on each call; leaf gradients accumulate across calls until cleared.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
    }
    auto it = std::find_if(ops_.rbegin(), ops_.rend(),
                           [&](const Op& op) { return op.out == loss.data_; });
    if (it == ops_.rend()) {
      throw ContractError("backward: loss was not produced on this tape");
    }
    for (auto& op : ops_) op.out->grad.clear();
    loss.data_->ensure_grad();
    loss.data_->grad[0] = 1.0;
    for (; it != ops_.rend(); ++it) {
      if (!it->out->grad.empty()) it->backward();
    }
  }

 private:
  using Node = detail::TensorData;

  struct Op {
    std::string_view name;
    std::shared_ptr<Node> out;
    std::function<void()> backward;
  };

  static void require_rank(const Tensor& a, std::size_t r, std::string_view op) {
    if (!a.defined() || a.rank() != r) {
      throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                           (a.defined() ? to_string(a.shape()) : std::string("undefined")));
    }
  }

  static void require_same(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape()) {
      throw DimensionError(std::string(op) + ": shapes differ, " + to_string(a.shape()) + " vs " +
                           to_string(b.shape()));
    }
  }

  static void check_row_ids(const Tensor& a, std::span<const TokenId> ids, std::string_view op) {
    if (ids.size() != a.dim(0)) {
      throw DimensionError(std::string(op) + ": " + std::to_string(ids.size()) + " ids for " +
                           to_string(a.shape()));
    }
    for (auto id : ids) {
      if (id >= a.dim(1)) {
        throw IndexError(std::string(op) + ": id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(a.dim(1)) + ")");
      }
    }
  }

  static void accumulate(Node& x, const std::vector<double>& g, double s) {
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) x.grad[i] += s * g[i];
  }

  template <class F>
  static Tensor map(const Tensor& a, F f) {
    std::vector<double> v(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(av[i]);
    return Tensor::from(a.shape(), std::move(v));
  }

  bool should_record(std::span<const Tensor> inputs) const {
    return recording_ && std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
  }

  // The closure receives the output node followed by each input node. The
  // output's raw pointer is safe because the Op keeps it alive.
  template <class F>
  void record(std::string_view name, Tensor& out, std::initializer_list<Tensor> inputs, F f) {
    if (!should_record({inputs.begin(), inputs.size()})) return;
    out.set_requires_grad(true);
    Node* o = out.data_.get();
    if constexpr (std::is_invocable_v<F, Node&, Node&>) {
      auto x = inputs.begin()[0].data_;
      ops_.push_back({name, out.data_, [f, o, x] { f(*o, *x); }});
    } else {
      auto x = inputs.begin()[0].data_;
      auto y = inputs.begin()[1].data_;
      ops_.push_back({name, out.data_, [f, o, x, y] { f(*o, *x, *y); }});
    }
  }

  bool recording_;
  std::vector<Op> ops_;
};

}  // namespace advlm
