#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mscd/errors.hpp"

namespace mscd {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Autograd mode + MAC accounting
// ---------------------------------------------------------------------------

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev_; }
  bool prev_;
};

// Multiply-accumulate counter for conv/matmul, used by count_flops.
inline int64_t& mac_counter() {
  thread_local int64_t macs = 0;
  return macs;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  std::function<void()> backward_fn;  // pulls from this->grad into parents

  int64_t numel() const { return int64_t(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Value-semantic handle onto a shared buffer participating in a recorded
// computation. Operations never mutate their inputs; each produces a fresh
// tensor whose backward_fn scatters into the parents' grads.
template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;

  Tensor() : impl_(std::make_shared<Impl>()) {}

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (int64_t d : shape)
      if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data.assign(size_t(shape_numel(impl_->shape)), fill);
    impl_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (int64_t(data.size()) != shape_numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return int64_t(impl_->shape.size()); }
  int64_t dim(int64_t i) const {
    if (i < 0) i += rank();
    return impl_->shape[size_t(i)];
  }
  int64_t numel() const { return impl_->numel(); }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  const std::vector<T>& data() const { return impl_->data; }
  std::vector<T>& mutable_data() { return impl_->data; }
  const std::vector<T>& grad() const { return impl_->grad; }
  std::vector<T>& mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }

  T item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  T at(int64_t i) const { return impl_->data[size_t(i)]; }

  void zero_grad() { impl_->grad.clear(); }

  std::shared_ptr<Impl> impl() const { return impl_; }

  // Graph-free copy of the values.
  Tensor detach() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

 private:
  std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<TensorImpl<T>>> parents,
                      std::function<void(TensorImpl<T>*)> backward) {
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(data));
  bool needs = false;
  if (grad_enabled())
    for (auto& p : parents)
      if (p->requires_grad) needs = true;
  if (needs) {
    auto* impl = out.impl().get();
    impl->requires_grad = true;
    impl->parents = std::move(parents);
    impl->backward_fn = [impl, backward = std::move(backward)]() { backward(impl); };
  }
  return out;
}

// Strides of `in` aligned to the trailing axes of `out`; broadcast axes get
// stride 0. Throws on incompatible extents.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t s = 1;
  std::vector<int64_t> in_strides(in.size());
  for (int64_t i = int64_t(in.size()) - 1; i >= 0; --i) {
    in_strides[size_t(i)] = s;
    s *= in[size_t(i)];
  }
  int64_t off = int64_t(out.size()) - int64_t(in.size());
  if (off < 0) throw ShapeError("cannot broadcast " + shape_str(in) + " to " + shape_str(out));
  for (size_t i = 0; i < in.size(); ++i) {
    int64_t od = out[size_t(off) + i], id = in[i];
    if (id == od)
      strides[size_t(off) + i] = in_strides[i];
    else if (id == 1)
      strides[size_t(off) + i] = 0;
    else
      throw ShapeError("cannot broadcast " + shape_str(in) + " to " + shape_str(out));
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db)
      out[i] = da;
    else if (da == 1)
      out[i] = db;
    else if (db == 1)
      out[i] = da;
    else
      throw ShapeError("incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
  }
  return out;
}

// Odometer walk over `shape` producing offsets for two stride sets.
template <typename Fn>
void for_each_broadcast(const Shape& shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
  const int64_t n = shape_numel(shape);
  const size_t r = shape.size();
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    fn(lin, oa, ob);
    for (int64_t d = int64_t(r) - 1; d >= 0; --d) {
      idx[size_t(d)]++;
      oa += sa[size_t(d)];
      ob += sb[size_t(d)];
      if (idx[size_t(d)] < shape[size_t(d)]) break;
      oa -= sa[size_t(d)] * shape[size_t(d)];
      ob -= sb[size_t(d)] * shape[size_t(d)];
      idx[size_t(d)] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with numpy-style broadcasting
// ---------------------------------------------------------------------------

// FwdFn: (a, b) -> y.  DaFn/DbFn: (a, b, gy) -> contribution to da/db.
template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, DaFn dfa, DbFn dfb) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
  const int64_t n = shape_numel(out_shape);
  std::vector<T> y(size_t(n), T(0));
  auto ai = a.impl();
  auto bi = b.impl();
  if (a.shape() == b.shape()) {
    const T* pa = ai->data.data();
    const T* pb = bi->data.data();
    for (int64_t i = 0; i < n; ++i) y[size_t(i)] = fwd(pa[i], pb[i]);
  } else {
    auto sa = detail::broadcast_strides(a.shape(), out_shape);
    auto sb = detail::broadcast_strides(b.shape(), out_shape);
    const T* pa = ai->data.data();
    const T* pb = bi->data.data();
    detail::for_each_broadcast(out_shape, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
      y[size_t(lin)] = fwd(pa[oa], pb[ob]);
    });
  }
  return detail::make_result<T>(
      out_shape, std::move(y), {ai, bi},
      [ai, bi, out_shape, dfa, dfb](TensorImpl<T>* self) {
        const T* g = self->grad.data();
        const T* pa = ai->data.data();
        const T* pb = bi->data.data();
        const bool same = ai->shape == bi->shape && ai->shape == out_shape;
        if (ai->requires_grad) ai->ensure_grad();
        if (bi->requires_grad) bi->ensure_grad();
        if (same) {
          const int64_t n = self->numel();
          for (int64_t i = 0; i < n; ++i) {
            if (ai->requires_grad) ai->grad[size_t(i)] += dfa(pa[i], pb[i], g[i]);
            if (bi->requires_grad) bi->grad[size_t(i)] += dfb(pa[i], pb[i], g[i]);
          }
        } else {
          auto sa = detail::broadcast_strides(ai->shape, out_shape);
          auto sb = detail::broadcast_strides(bi->shape, out_shape);
          detail::for_each_broadcast(out_shape, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
            if (ai->requires_grad) ai->grad[size_t(oa)] += dfa(pa[oa], pb[ob], g[lin]);
            if (bi->requires_grad) bi->grad[size_t(ob)] += dfb(pa[oa], pb[ob], g[lin]);
          });
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T, T y, T g) { return g * y; }, [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

// FwdFn: a -> y.  DFn: (a, y, gy) -> da contribution.
template <typename T, typename FwdFn, typename DFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn fwd, DFn dfn) {
  auto ai = a.impl();
  const int64_t n = a.numel();
  std::vector<T> y(size_t(n), T(0));
  const T* pa = ai->data.data();
  for (int64_t i = 0; i < n; ++i) y[size_t(i)] = fwd(pa[i]);
  return detail::make_result<T>(
      a.shape(), std::move(y), {ai}, [ai, dfn](TensorImpl<T>* self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        const int64_t n = self->numel();
        for (int64_t i = 0; i < n; ++i)
          ai->grad[size_t(i)] +=
              dfn(ai->data[size_t(i)], self->data[size_t(i)], self->grad[size_t(i)]);
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return -x; }, [](T, T, T g) { return -g; });
}

// Subgradient 0 at 0.
template <typename T>
Tensor<T> abs_val(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::abs(x); },
      [](T x, T, T g) { return x > 0 ? g : (x < 0 ? -g : T(0)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > 0 ? x : T(0); },
      [](T x, T, T g) { return x > 0 ? g : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::sqrt(x); },
      [](T, T y, T g) { return g / (T(2) * y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary_op(a, [s](T x) { return s * x; }, [s](T, T, T g) { return s * g; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op(a, [s](T x) { return x + s; }, [](T, T, T g) { return g; });
}

// Gradient passes through only in the open interval (straight clamp).
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary_op(
      a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](T x, T, T g) { return (x > lo && x < hi) ? g : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto ai = a.impl();
  T acc = 0;
  for (T v : ai->data) acc += v;
  return detail::make_result<T>({1}, {acc}, {ai}, [ai](TensorImpl<T>* self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const T g = self->grad[0];
    for (auto& v : ai->grad) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

// Sum over a set of axes, keeping them as size-1 (simplifies broadcasting
// back in composite ops like batch_norm).
template <typename T>
Tensor<T> sum_axes(const Tensor<T>& a, std::vector<int64_t> axes) {
  auto ai = a.impl();
  const Shape& in = a.shape();
  std::vector<bool> reduce(in.size(), false);
  for (int64_t ax : axes) {
    if (ax < 0) ax += int64_t(in.size());
    if (ax < 0 || ax >= int64_t(in.size())) throw UsageError("sum_axes: axis out of range");
    reduce[size_t(ax)] = true;
  }
  Shape out = in;
  for (size_t i = 0; i < in.size(); ++i)
    if (reduce[i]) out[i] = 1;
  std::vector<T> y(size_t(shape_numel(out)), T(0));
  auto so = detail::broadcast_strides(out, in);  // out broadcast over in
  const T* pa = ai->data.data();
  auto sa = detail::broadcast_strides(in, in);
  detail::for_each_broadcast(in, sa, so, [&](int64_t, int64_t oa, int64_t ob) {
    y[size_t(ob)] += pa[oa];
  });
  return detail::make_result<T>(out, std::move(y), {ai}, [ai, out](TensorImpl<T>* self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const Shape& in = ai->shape;
    auto so = detail::broadcast_strides(out, in);
    auto sa = detail::broadcast_strides(in, in);
    const T* g = self->grad.data();
    detail::for_each_broadcast(in, sa, so, [&](int64_t, int64_t oa, int64_t ob) {
      ai->grad[size_t(oa)] += g[ob];
    });
  });
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& a, std::vector<int64_t> axes) {
  Tensor<T> s = sum_axes(a, axes);
  return scale(s, T(s.numel()) / T(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  auto ai = a.impl();
  std::vector<T> y = ai->data;
  return detail::make_result<T>(std::move(shape), std::move(y), {ai},
                                [ai](TensorImpl<T>* self) {
                                  if (!ai->requires_grad) return;
                                  ai->ensure_grad();
                                  const int64_t n = self->numel();
                                  for (int64_t i = 0; i < n; ++i)
                                    ai->grad[size_t(i)] += self->grad[size_t(i)];
                                });
}

// Swap the last two axes (rank >= 2).
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  Shape out = a.shape();
  std::swap(out[out.size() - 1], out[out.size() - 2]);
  const int64_t rows = a.dim(-2), cols = a.dim(-1);
  const int64_t batch = a.numel() / (rows * cols);
  auto ai = a.impl();
  std::vector<T> y(size_t(a.numel()));
  const T* pa = ai->data.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c)
        y[size_t(b * rows * cols + c * rows + r)] = pa[b * rows * cols + r * cols + c];
  return detail::make_result<T>(out, std::move(y), {ai},
                                [ai, rows, cols, batch](TensorImpl<T>* self) {
                                  if (!ai->requires_grad) return;
                                  ai->ensure_grad();
                                  const T* g = self->grad.data();
                                  for (int64_t b = 0; b < batch; ++b)
                                    for (int64_t r = 0; r < rows; ++r)
                                      for (int64_t c = 0; c < cols; ++c)
                                        ai->grad[size_t(b * rows * cols + r * cols + c)] +=
                                            g[b * rows * cols + c * rows + r];
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis < 0) axis += int64_t(s0.size());
  Shape out = s0;
  int64_t total = 0;
  for (auto& p : parts) {
    if (p.rank() != int64_t(s0.size())) throw ShapeError("concat rank mismatch");
    for (int64_t d = 0; d < p.rank(); ++d)
      if (d != axis && p.dim(d) != s0[size_t(d)])
        throw ShapeError("concat extent mismatch at axis " + std::to_string(d));
    total += p.dim(axis);
  }
  out[size_t(axis)] = total;

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= s0[size_t(d)];
  for (int64_t d = axis + 1; d < int64_t(s0.size()); ++d) inner *= s0[size_t(d)];

  std::vector<T> y(size_t(shape_numel(out)));
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  std::vector<int64_t> extents;
  for (auto& p : parts) {
    impls.push_back(p.impl());
    extents.push_back(p.dim(axis));
  }
  int64_t dst_off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const T* src = impls[pi]->data.data();
    const int64_t chunk = extents[pi] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * chunk, src + (o + 1) * chunk,
                y.begin() + o * total * inner + dst_off);
    dst_off += chunk;
  }
  return detail::make_result<T>(
      out, std::move(y), impls,
      [impls, extents, outer, inner, total](TensorImpl<T>* self) {
        const T* g = self->grad.data();
        int64_t src_off = 0;
        for (size_t pi = 0; pi < impls.size(); ++pi) {
          const int64_t chunk = extents[pi] * inner;
          if (impls[pi]->requires_grad) {
            impls[pi]->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
              const T* gp = g + o * total * inner + src_off;
              T* dst = impls[pi]->grad.data() + o * chunk;
              for (int64_t i = 0; i < chunk; ++i) dst[i] += gp[i];
            }
          }
          src_off += chunk;
        }
      });
}

// ---------------------------------------------------------------------------
// Matmul (rank 2 or 3, optional transposes; rank-2 operand broadcasts over
// the other operand's batch axis)
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] (+)= opA(A) * opB(B), row-major.
template <typename T>
void gemm(int64_t M, int64_t N, int64_t K, const T* A, bool ta, const T* B, bool tb, T* C,
          bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  mac_counter() += M * N * K;
  if (!ta && !tb) {
    for (int64_t m = 0; m < M; ++m)
      for (int64_t k = 0; k < K; ++k) {
        const T a = A[m * K + k];
        const T* brow = B + k * N;
        T* crow = C + m * N;
        for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
  } else if (!ta && tb) {
    for (int64_t m = 0; m < M; ++m)
      for (int64_t n = 0; n < N; ++n) {
        T acc = 0;
        const T* arow = A + m * K;
        const T* brow = B + n * K;
        for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        C[m * N + n] += acc;
      }
  } else if (ta && !tb) {
    for (int64_t k = 0; k < K; ++k)
      for (int64_t m = 0; m < M; ++m) {
        const T a = A[k * M + m];
        const T* brow = B + k * N;
        T* crow = C + m * N;
        for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
  } else {
    for (int64_t m = 0; m < M; ++m)
      for (int64_t n = 0; n < N; ++n) {
        T acc = 0;
        for (int64_t k = 0; k < K; ++k) acc += A[k * M + m] * B[n * K + k];
        C[m * N + n] += acc;
      }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3)
    throw ShapeError("matmul supports rank 2 or 3, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t ab = a.rank() == 3 ? a.dim(0) : 1;
  const int64_t bb = b.rank() == 3 ? b.dim(0) : 1;
  if (ab != bb && ab != 1 && bb != 1)
    throw ShapeError("matmul batch mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t batch = std::max(ab, bb);
  const int64_t M = trans_a ? a.dim(-1) : a.dim(-2);
  const int64_t Ka = trans_a ? a.dim(-2) : a.dim(-1);
  const int64_t Kb = trans_b ? b.dim(-1) : b.dim(-2);
  const int64_t N = trans_b ? b.dim(-2) : b.dim(-1);
  if (Ka != Kb)
    throw ShapeError("matmul inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t K = Ka;
  Shape out = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, M, N} : Shape{M, N};

  auto ai = a.impl();
  auto bi = b.impl();
  const int64_t a_step = ab == 1 ? 0 : M * K;
  const int64_t b_step = bb == 1 ? 0 : K * N;
  std::vector<T> y(size_t(batch * M * N));
  for (int64_t bidx = 0; bidx < batch; ++bidx)
    detail::gemm(M, N, K, ai->data.data() + bidx * a_step, trans_a,
                 bi->data.data() + bidx * b_step, trans_b, y.data() + bidx * M * N, false);

  return detail::make_result<T>(
      out, std::move(y), {ai, bi},
      [ai, bi, batch, M, N, K, a_step, b_step, trans_a, trans_b](TensorImpl<T>* self) {
        const T* g = self->grad.data();
        if (ai->requires_grad) {
          ai->ensure_grad();
          for (int64_t bidx = 0; bidx < batch; ++bidx) {
            const T* gB = g + bidx * M * N;
            const T* B = bi->data.data() + bidx * b_step;
            T* dA = ai->grad.data() + bidx * a_step;
            // dA = dC * opB^T   (or its transpose when trans_a)
            if (!trans_a)
              detail::gemm(M, K, N, gB, false, B, !trans_b, dA, true);
            else
              detail::gemm(K, M, N, B, trans_b, gB, true, dA, true);
          }
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (int64_t bidx = 0; bidx < batch; ++bidx) {
            const T* gB = g + bidx * M * N;
            const T* A = ai->data.data() + bidx * a_step;
            T* dB = bi->grad.data() + bidx * b_step;
            if (!trans_b)
              detail::gemm(K, N, M, A, !trans_a, gB, false, dB, true);
            else
              detail::gemm(N, K, M, gB, true, A, trans_a, dB, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax over the last axis (max-stabilized, full Jacobian backward)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& a) {
  const int64_t cols = a.dim(-1);
  const int64_t rows = a.numel() / cols;
  auto ai = a.impl();
  for (T v : ai->data)
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  std::vector<T> y(size_t(a.numel()));
  const T* pa = ai->data.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = pa + r * cols;
    T mx = row[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    T denom = 0;
    T* yr = y.data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(row[c] - mx);
      denom += yr[c];
    }
    for (int64_t c = 0; c < cols; ++c) yr[c] /= denom;
  }
  return detail::make_result<T>(
      a.shape(), std::move(y), {ai}, [ai, rows, cols](TensorImpl<T>* self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        const T* g = self->grad.data();
        const T* yv = self->data.data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = g + r * cols;
          const T* yr = yv + r * cols;
          T dot = 0;
          for (int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
          T* ar = ai->grad.data() + r * cols;
          for (int64_t c = 0; c < cols; ++c) ar[c] += yr[c] * (gr[c] - dot);
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw UsageError("backward: loss must be scalar");
  auto root = loss.impl();
  if (!root->requires_grad) return;

  // Topological order via iterative post-order DFS.
  std::vector<TensorImpl<T>*> order;
  std::vector<std::pair<TensorImpl<T>*, size_t>> stack;
  std::unordered_set<TensorImpl<T>*> visited;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      TensorImpl<T>* p = node->parents[child++].get();
      if (p->requires_grad && visited.insert(p).second) {
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn();
  }
}

}  // namespace mscd
