// Dense-tensor numerical core with reverse-mode automatic differentiation.
//
// A Tape records operations in execution order; backward() replays them in
// reverse, accumulating gradients into shared node storage. Parameters are
// tape-less tensors whose storage persists across tapes, so their gradients
// survive tape destruction and can be consumed by an optimizer.
//
// Everything is single-threaded and bitwise deterministic for fixed inputs.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace lbr {

// Raised on dimension/shape violations.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a forward op produces (or is asked to produce) a non-finite
// value, or when a precondition like a fully-masked softmax row is hit.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Row-major boolean matrix; true = allowed.
struct BoolMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> v;

  BoolMatrix() = default;
  BoolMatrix(int r, int c, bool fill = false)
      : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill ? 1 : 0) {}

  bool at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j] != 0; }
  void set(int i, int j, bool b) { v[static_cast<std::size_t>(i) * cols + j] = b ? 1 : 0; }
};

using BoolVec = std::vector<std::uint8_t>;

template <class T>
class Tape;

namespace detail {

template <class T>
struct NodeStorage {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated only when requires_grad
  bool requires_grad = false;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

}  // namespace detail

// Lightweight handle to a value (and optional gradient) living either on a
// tape or as a persistent parameter. Copies share storage.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  // Persistent parameter / constant, not bound to any tape yet.
  static Tensor parameter(std::vector<int> shape, std::vector<T> value, bool requires_grad = true) {
    auto s = std::make_shared<detail::NodeStorage<T>>();
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("tensor: negative dimension");
      n *= d;
    }
    if (n != static_cast<std::int64_t>(value.size()))
      throw ShapeError("tensor: shape/data size mismatch");
    s->shape = std::move(shape);
    s->value = std::move(value);
    s->requires_grad = requires_grad;
    if (requires_grad) s->grad.assign(s->value.size(), T(0));
    return Tensor(std::move(s), nullptr, -1);
  }

  static Tensor constant(std::vector<int> shape, std::vector<T> value) {
    return parameter(std::move(shape), std::move(value), false);
  }

  bool defined() const { return s_ != nullptr; }
  const std::vector<int>& shape() const { return s_->shape; }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return s_->numel(); }
  bool requires_grad() const { return s_->requires_grad; }

  const std::vector<T>& value() const { return s_->value; }
  std::vector<T>& mutable_value() { return s_->value; }
  const std::vector<T>& grad() const {
    if (!s_->requires_grad) throw std::logic_error("tensor: grad requested on non-grad tensor");
    return s_->grad;
  }
  std::vector<T>& mutable_grad() {
    if (!s_->requires_grad) throw std::logic_error("tensor: grad requested on non-grad tensor");
    return s_->grad;
  }
  void zero_grad() {
    if (s_->requires_grad) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  // Identifier on the tape that created this tensor; -1 for free parameters.
  int node_id() const { return id_; }
  const Tape<T>* tape() const { return tape_; }

  T scalar() const {
    if (numel() != 1) throw ShapeError("tensor: scalar() on non-scalar");
    return s_->value[0];
  }

 private:
  friend class Tape<T>;
  Tensor(std::shared_ptr<detail::NodeStorage<T>> s, const Tape<T>* tape, int id)
      : s_(std::move(s)), tape_(tape), id_(id) {}

  std::shared_ptr<detail::NodeStorage<T>> s_;
  const Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void mm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ar = a + static_cast<std::size_t>(i) * k;
    T* cr = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void mm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ar = a + static_cast<std::size_t>(i) * k;
    T* cr = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* br = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
      cr[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void mm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ar = a + static_cast<std::size_t>(i) * k;
    const T* br = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ar[p];
      T* cr = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace detail

// Records operations in topological (execution) order. backward() walks the
// record in reverse exactly once per node.
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  int num_nodes() const { return next_id_; }
  std::size_t num_ops() const { return ops_.size(); }

  Tensor<T> leaf(std::vector<int> shape, std::vector<T> value, bool requires_grad = false) {
    Tensor<T> t = Tensor<T>::parameter(std::move(shape), std::move(value), requires_grad && recording_);
    check_finite(t.value(), "leaf");
    t.tape_ = this;
    t.id_ = next_id_++;
    return t;
  }

  // [m,k] x [k,n] -> [m,n]
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_2d(a, "matmul lhs");
    require_2d(b, "matmul rhs");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
      throw ShapeError("matmul: inner dimensions disagree (" + std::to_string(k) + " vs " +
                       std::to_string(k2) + ")");
    std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
    detail::mm_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
    return make_node("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Ctx& c) {
      if (c.parent_grad(0))
        detail::mm_nt_acc(c.out_grad(), c.parent_value(1), c.parent_grad(0), m, n, k);
      if (c.parent_grad(1))
        detail::mm_tn_acc(c.parent_value(0), c.out_grad(), c.parent_grad(1), m, k, n);
    });
  }

  // [m,k] x [n,k]^T -> [m,n]
  Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require_2d(a, "matmul_nt lhs");
    require_2d(b, "matmul_nt rhs");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (k != b.dim(1))
      throw ShapeError("matmul_nt: inner dimensions disagree (" + std::to_string(k) + " vs " +
                       std::to_string(b.dim(1)) + ")");
    std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
    detail::mm_nt_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
    return make_node("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](Ctx& c) {
      if (c.parent_grad(0))
        detail::mm_acc(c.out_grad(), c.parent_value(1), c.parent_grad(0), m, n, k);
      if (c.parent_grad(1))
        detail::mm_tn_acc(c.out_grad(), c.parent_value(0), c.parent_grad(1), m, n, k);
    });
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    const std::size_t n = a.value().size();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
    return make_node("add", a.shape(), std::move(out), {a, b}, [n](Ctx& c) {
      for (int p = 0; p < 2; ++p)
        if (T* g = c.parent_grad(p))
          for (std::size_t i = 0; i < n; ++i) g[i] += c.out_grad()[i];
    });
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
    const std::size_t n = a.value().size();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
    return make_node("mul", a.shape(), std::move(out), {a, b}, [n](Ctx& c) {
      if (T* g = c.parent_grad(0))
        for (std::size_t i = 0; i < n; ++i) g[i] += c.out_grad()[i] * c.parent_value(1)[i];
      if (T* g = c.parent_grad(1))
        for (std::size_t i = 0; i < n; ++i) g[i] += c.out_grad()[i] * c.parent_value(0)[i];
    });
  }

  Tensor<T> scale(const Tensor<T>& a, T factor) {
    const std::size_t n = a.value().size();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * factor;
    return make_node("scale", a.shape(), std::move(out), {a}, [n, factor](Ctx& c) {
      if (T* g = c.parent_grad(0))
        for (std::size_t i = 0; i < n; ++i) g[i] += c.out_grad()[i] * factor;
    });
  }

  // Row-wise softmax over allowed entries; masked entries are exactly zero.
  // A row with no allowed entry is an error, never a silent uniform.
  Tensor<T> masked_softmax(const Tensor<T>& logits, const BoolMatrix& mask) {
    require_2d(logits, "masked_softmax");
    const int rows = logits.dim(0), cols = logits.dim(1);
    if (mask.rows != rows || mask.cols != cols)
      throw ShapeError("masked_softmax: mask shape mismatch");
    std::vector<T> out(static_cast<std::size_t>(rows) * cols, T(0));
    const T* x = logits.value().data();
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < cols; ++j)
        if (mask.at(i, j) && x[off + j] > mx) mx = x[off + j];
      if (mx == -std::numeric_limits<T>::infinity())
        throw NumericError("masked_softmax: fully masked row " + std::to_string(i));
      T sum = T(0);
      for (int j = 0; j < cols; ++j)
        if (mask.at(i, j)) {
          const T e = std::exp(x[off + j] - mx);
          out[off + j] = e;
          sum += e;
        }
      const T inv = T(1) / sum;
      for (int j = 0; j < cols; ++j)
        if (mask.at(i, j)) out[off + j] *= inv;
    }
    BoolMatrix m = mask;
    return make_node("masked_softmax", {rows, cols}, std::move(out), {logits},
                     [rows, cols, m](Ctx& c) {
                       T* g = c.parent_grad(0);
                       if (!g) return;
                       const T* p = c.out_value();
                       const T* dy = c.out_grad();
                       for (int i = 0; i < rows; ++i) {
                         const std::size_t off = static_cast<std::size_t>(i) * cols;
                         T dot = T(0);
                         for (int j = 0; j < cols; ++j)
                           if (m.at(i, j)) dot += dy[off + j] * p[off + j];
                         for (int j = 0; j < cols; ++j)
                           if (m.at(i, j)) g[off + j] += p[off + j] * (dy[off + j] - dot);
                       }
                     });
  }

  // Mean negative log-likelihood over positions selected by position_mask.
  Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                          const BoolVec& position_mask) {
    require_2d(logits, "cross_entropy");
    const int n = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<int>(targets.size()) != n || static_cast<int>(position_mask.size()) != n)
      throw ShapeError("cross_entropy: targets/mask length mismatch");
    int selected = 0;
    for (int i = 0; i < n; ++i) {
      if (targets[i] < 0 || targets[i] >= vocab)
        throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[i]) +
                                " out of range at position " + std::to_string(i));
      if (position_mask[i]) ++selected;
    }
    if (selected == 0) throw NumericError("cross_entropy: no selected positions");
    const T* x = logits.value().data();
    T total = T(0);
    for (int i = 0; i < n; ++i) {
      if (!position_mask[i]) continue;
      const std::size_t off = static_cast<std::size_t>(i) * vocab;
      T mx = x[off];
      for (int j = 1; j < vocab; ++j)
        if (x[off + j] > mx) mx = x[off + j];
      T sum = T(0);
      for (int j = 0; j < vocab; ++j) sum += std::exp(x[off + j] - mx);
      total += (mx + std::log(sum)) - x[off + targets[i]];
    }
    std::vector<T> out{total / static_cast<T>(selected)};
    std::vector<int> tgt = targets;
    BoolVec pm = position_mask;
    return make_node("cross_entropy", {1}, std::move(out), {logits},
                     [n, vocab, tgt, pm, selected](Ctx& c) {
                       T* g = c.parent_grad(0);
                       if (!g) return;
                       const T up = c.out_grad()[0] / static_cast<T>(selected);
                       const T* x2 = c.parent_value(0);
                       for (int i = 0; i < n; ++i) {
                         if (!pm[i]) continue;
                         const std::size_t off = static_cast<std::size_t>(i) * vocab;
                         T mx = x2[off];
                         for (int j = 1; j < vocab; ++j)
                           if (x2[off + j] > mx) mx = x2[off + j];
                         T sum = T(0);
                         for (int j = 0; j < vocab; ++j) sum += std::exp(x2[off + j] - mx);
                         const T inv = T(1) / sum;
                         for (int j = 0; j < vocab; ++j) {
                           T p = std::exp(x2[off + j] - mx) * inv;
                           if (j == tgt[i]) p -= T(1);
                           g[off + j] += up * p;
                         }
                       }
                     });
  }

  // Row-wise RMS normalization with a learned per-column gain.
  Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-5)) {
    require_2d(x, "rmsnorm");
    const int rows = x.dim(0), cols = x.dim(1);
    if (gain.shape() != std::vector<int>{cols}) throw ShapeError("rmsnorm: gain shape mismatch");
    std::vector<T> out(static_cast<std::size_t>(rows) * cols);
    std::vector<T> inv_rms(rows);
    const T* xv = x.value().data();
    const T* gv = gain.value().data();
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      T ss = T(0);
      for (int j = 0; j < cols; ++j) ss += xv[off + j] * xv[off + j];
      const T inv = T(1) / std::sqrt(ss / static_cast<T>(cols) + eps);
      inv_rms[i] = inv;
      for (int j = 0; j < cols; ++j) out[off + j] = xv[off + j] * inv * gv[j];
    }
    return make_node("rmsnorm", {rows, cols}, std::move(out), {x, gain},
                     [rows, cols, inv_rms](Ctx& c) {
                       const T* xv2 = c.parent_value(0);
                       const T* gv2 = c.parent_value(1);
                       const T* dy = c.out_grad();
                       T* gx = c.parent_grad(0);
                       T* gg = c.parent_grad(1);
                       for (int i = 0; i < rows; ++i) {
                         const std::size_t off = static_cast<std::size_t>(i) * cols;
                         const T inv = inv_rms[i];
                         if (gx) {
                           T dot = T(0);
                           for (int j = 0; j < cols; ++j)
                             dot += dy[off + j] * gv2[j] * xv2[off + j];
                           const T coef = dot * inv * inv * inv / static_cast<T>(cols);
                           for (int j = 0; j < cols; ++j)
                             gx[off + j] += dy[off + j] * gv2[j] * inv - coef * xv2[off + j];
                         }
                         if (gg)
                           for (int j = 0; j < cols; ++j)
                             gg[j] += dy[off + j] * xv2[off + j] * inv;
                       }
                     });
  }

  // tanh-approximation GELU.
  Tensor<T> gelu(const Tensor<T>& x) {
    const std::size_t n = x.value().size();
    std::vector<T> out(n);
    const T c0 = std::sqrt(T(2) / T(3.14159265358979323846));
    const T c1 = T(0.044715);
    for (std::size_t i = 0; i < n; ++i) {
      const T v = x.value()[i];
      out[i] = T(0.5) * v * (T(1) + std::tanh(c0 * (v + c1 * v * v * v)));
    }
    return make_node("gelu", x.shape(), std::move(out), {x}, [n, c0, c1](Ctx& c) {
      T* g = c.parent_grad(0);
      if (!g) return;
      const T* xv = c.parent_value(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xv[i];
        const T u = c0 * (v + c1 * v * v * v);
        const T t = std::tanh(u);
        const T du = c0 * (T(1) + T(3) * c1 * v * v);
        const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
        g[i] += c.out_grad()[i] * d;
      }
    });
  }

  // Gather rows of a [V,d] table -> [n,d]. Duplicate ids accumulate gradient.
  Tensor<T> rows_from_table(const Tensor<T>& table, const std::vector<int>& ids) {
    require_2d(table, "rows_from_table");
    const int v = table.dim(0), d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    for (int id : ids)
      if (id < 0 || id >= v)
        throw std::out_of_range("rows_from_table: id " + std::to_string(id) + " out of range");
    std::vector<T> out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i)
      std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * d, d,
                  out.data() + static_cast<std::size_t>(i) * d);
    std::vector<int> idv = ids;
    return make_node("rows_from_table", {n, d}, std::move(out), {table}, [n, d, idv](Ctx& c) {
      T* g = c.parent_grad(0);
      if (!g) return;
      for (int i = 0; i < n; ++i) {
        const T* src = c.out_grad() + static_cast<std::size_t>(i) * d;
        T* dst = g + static_cast<std::size_t>(idv[i]) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }

  Tensor<T> slice_rows(const Tensor<T>& x, int start, int len) {
    require_2d(x, "slice_rows");
    const int rows = x.dim(0), cols = x.dim(1);
    if (start < 0 || len <= 0 || start + len > rows) throw ShapeError("slice_rows: range invalid");
    std::vector<T> out(static_cast<std::size_t>(len) * cols);
    std::copy_n(x.value().data() + static_cast<std::size_t>(start) * cols, out.size(), out.data());
    return make_node("slice_rows", {len, cols}, std::move(out), {x}, [start, len, cols](Ctx& c) {
      if (T* g = c.parent_grad(0)) {
        const std::size_t n = static_cast<std::size_t>(len) * cols;
        T* dst = g + static_cast<std::size_t>(start) * cols;
        for (std::size_t i = 0; i < n; ++i) dst[i] += c.out_grad()[i];
      }
    });
  }

  Tensor<T> slice_cols(const Tensor<T>& x, int start, int len) {
    require_2d(x, "slice_cols");
    const int rows = x.dim(0), cols = x.dim(1);
    if (start < 0 || len <= 0 || start + len > cols) throw ShapeError("slice_cols: range invalid");
    std::vector<T> out(static_cast<std::size_t>(rows) * len);
    for (int i = 0; i < rows; ++i)
      std::copy_n(x.value().data() + static_cast<std::size_t>(i) * cols + start, len,
                  out.data() + static_cast<std::size_t>(i) * len);
    return make_node("slice_cols", {rows, len}, std::move(out), {x},
                     [rows, cols, start, len](Ctx& c) {
                       if (T* g = c.parent_grad(0))
                         for (int i = 0; i < rows; ++i) {
                           const T* src = c.out_grad() + static_cast<std::size_t>(i) * len;
                           T* dst = g + static_cast<std::size_t>(i) * cols + start;
                           for (int j = 0; j < len; ++j) dst[j] += src[j];
                         }
                     });
  }

  Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const int cols = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
      require_2d(p, "concat_rows");
      if (p.dim(1) != cols) throw ShapeError("concat_rows: column mismatch");
      rows += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(rows) * cols);
    for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
    std::vector<int> sizes;
    for (const auto& p : parts) sizes.push_back(p.dim(0));
    return make_node("concat_rows", {rows, cols}, std::move(out), parts, [sizes, cols](Ctx& c) {
      std::size_t off = 0;
      for (std::size_t p = 0; p < sizes.size(); ++p) {
        const std::size_t n = static_cast<std::size_t>(sizes[p]) * cols;
        if (T* g = c.parent_grad(static_cast<int>(p)))
          for (std::size_t i = 0; i < n; ++i) g[i] += c.out_grad()[off + i];
        off += n;
      }
    });
  }

  Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
      require_2d(p, "concat_cols");
      if (p.dim(0) != rows) throw ShapeError("concat_cols: row mismatch");
      cols += p.dim(1);
    }
    std::vector<T> out(static_cast<std::size_t>(rows) * cols);
    int at = 0;
    for (const auto& p : parts) {
      const int w = p.dim(1);
      for (int i = 0; i < rows; ++i)
        std::copy_n(p.value().data() + static_cast<std::size_t>(i) * w, w,
                    out.data() + static_cast<std::size_t>(i) * cols + at);
      at += w;
    }
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    return make_node("concat_cols", {rows, cols}, std::move(out), parts,
                     [rows, cols, widths](Ctx& c) {
                       int at2 = 0;
                       for (std::size_t p = 0; p < widths.size(); ++p) {
                         const int w = widths[p];
                         if (T* g = c.parent_grad(static_cast<int>(p)))
                           for (int i = 0; i < rows; ++i) {
                             const T* src = c.out_grad() + static_cast<std::size_t>(i) * cols + at2;
                             T* dst = g + static_cast<std::size_t>(i) * w;
                             for (int j = 0; j < w; ++j) dst[j] += src[j];
                           }
                         at2 += w;
                       }
                     });
  }

  // Rows scaled to unit L2 norm; a zero row is an error.
  Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    require_2d(x, "l2_normalize_rows");
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(static_cast<std::size_t>(rows) * cols);
    std::vector<T> inv_norm(rows);
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      T ss = T(0);
      for (int j = 0; j < cols; ++j) ss += x.value()[off + j] * x.value()[off + j];
      if (ss <= T(0)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
      const T inv = T(1) / std::sqrt(ss);
      inv_norm[i] = inv;
      for (int j = 0; j < cols; ++j) out[off + j] = x.value()[off + j] * inv;
    }
    return make_node("l2_normalize_rows", {rows, cols}, std::move(out), {x},
                     [rows, cols, inv_norm](Ctx& c) {
                       T* g = c.parent_grad(0);
                       if (!g) return;
                       const T* y = c.out_value();
                       const T* dy = c.out_grad();
                       for (int i = 0; i < rows; ++i) {
                         const std::size_t off = static_cast<std::size_t>(i) * cols;
                         T dot = T(0);
                         for (int j = 0; j < cols; ++j) dot += dy[off + j] * y[off + j];
                         for (int j = 0; j < cols; ++j)
                           g[off + j] += (dy[off + j] - dot * y[off + j]) * inv_norm[i];
                       }
                     });
  }

  Tensor<T> sum(const Tensor<T>& x) {
    T total = T(0);
    for (T v : x.value()) total += v;
    const std::size_t n = x.value().size();
    return make_node("sum", {1}, std::vector<T>{total}, {x}, [n](Ctx& c) {
      if (T* g = c.parent_grad(0))
        for (std::size_t i = 0; i < n; ++i) g[i] += c.out_grad()[0];
    });
  }

  // Reverse pass from a scalar loss. Gradients accumulate into every
  // reachable tensor that requires gradient, including free parameters.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ShapeError("backward: loss must be a scalar");
    if (loss.tape_ != this)
      throw std::logic_error("backward: loss does not live on this tape");
    if (!loss.s_->requires_grad)
      throw std::logic_error("backward: loss does not depend on any tracked tensor");
    loss.s_->grad[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward(it->ctx);
  }

  // Parent node-ids per recorded op, in execution order (diagnostics).
  std::vector<std::vector<int>> op_parent_ids() const {
    std::vector<std::vector<int>> out;
    out.reserve(ops_.size());
    for (const auto& op : ops_) out.push_back(op.parent_ids);
    return out;
  }

 private:
  // Backward closures see parents/output through this view.
  struct Ctx {
    std::vector<std::shared_ptr<detail::NodeStorage<T>>> parents;
    std::shared_ptr<detail::NodeStorage<T>> out;

    const T* parent_value(int i) const { return parents[i]->value.data(); }
    T* parent_grad(int i) {
      return parents[i]->requires_grad ? parents[i]->grad.data() : nullptr;
    }
    const T* out_value() const { return out->value.data(); }
    const T* out_grad() const { return out->grad.data(); }
  };

  struct OpRecord {
    std::vector<int> parent_ids;
    Ctx ctx;
    std::function<void(Ctx&)> backward;
  };

  void require_2d(const Tensor<T>& t, const char* what) const {
    if (!t.defined()) throw std::logic_error(std::string(what) + ": undefined tensor");
    if (t.shape().size() != 2) throw ShapeError(std::string(what) + ": expected 2-d tensor");
    check_operand(t, what);
  }

  void check_operand(const Tensor<T>& t, const char* what) const {
    if (t.tape_ != nullptr && t.tape_ != this)
      throw std::logic_error(std::string(what) + ": operand belongs to another tape");
  }

  int id_of(const Tensor<T>& t) {
    if (t.tape_ == this) return t.id_;
    // Free parameter: register it on this tape once.
    auto [it, inserted] = watched_.try_emplace(t.s_.get(), next_id_);
    if (inserted) ++next_id_;
    return it->second;
  }

  void check_finite(const std::vector<T>& v, const char* op) const {
    for (T x : v)
      if (!std::isfinite(x))
        throw NumericError(std::string("non-finite value produced by ") + op);
  }

  template <class F>
  Tensor<T> make_node(const char* op, std::vector<int> shape, std::vector<T> value,
                      const std::vector<Tensor<T>>& parents, F&& bwd) {
    for (const auto& p : parents) check_operand(p, op);
    check_finite(value, op);
    bool needs_grad = false;
    if (recording_)
      for (const auto& p : parents)
        if (p.s_->requires_grad) needs_grad = true;
    auto s = std::make_shared<detail::NodeStorage<T>>();
    s->shape = std::move(shape);
    s->value = std::move(value);
    s->requires_grad = needs_grad;
    if (needs_grad) s->grad.assign(s->value.size(), T(0));
    Tensor<T> out(s, this, -1);
    if (needs_grad) {
      OpRecord rec;
      for (const auto& p : parents) rec.parent_ids.push_back(id_of(p));
      for (const auto& p : parents) rec.ctx.parents.push_back(p.s_);
      rec.ctx.out = s;
      rec.backward = std::forward<F>(bwd);
      ops_.push_back(std::move(rec));
    }
    out.id_ = next_id_++;
    return out;
  }

  bool recording_;
  int next_id_ = 0;
  std::vector<OpRecord> ops_;
  std::unordered_map<const detail::NodeStorage<T>*, int> watched_;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace lbr
