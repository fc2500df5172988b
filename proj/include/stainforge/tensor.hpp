#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stainforge/common.hpp"

namespace stainforge {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // allocated lazily; same length as values once touched
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
};

template <class T>
class Tape;

// Dense n-d tensor handle with value semantics on the handle (cheap copies
// share the node). All storage is contiguous row-major.
template <class T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

    static Tensor filled(Shape shape, T value) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->values.assign(numel_of(t.node_->shape), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> values) {
        if (numel_of(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.node_->values) v = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[i]; }
    int64_t numel() const { return static_cast<int64_t>(node_->values.size()); }

    std::span<T> data() { return node_->values; }
    std::span<const T> data() const { return node_->values; }
    T* raw() { return node_->values.data(); }
    const T* raw() const { return node_->values.data(); }

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a scalar, got " + shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<T> grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Deep copy of values; grad/graph state not carried over.
    Tensor clone() const {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = node_->shape;
        t.node_->values = node_->values;
        return t;
    }

    bool all_finite() const {
        for (T v : node_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Wengert list: ops append backward closures in execution order, which is a
// valid topological order, so replaying in reverse visits each node once.
template <class T>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
      public:
        explicit Scope(Tape& tape) : prev_(active_) { active_ = &tape; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        Tape* prev_;
    };

    static Tape* active() { return active_; }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    size_t size() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

    void backward(Tensor<T>& loss) {
        if (consumed_) throw NumericError("backward called on an already consumed tape");
        if (loss.numel() != 1)
            throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        loss.grad()[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        consumed_ = true;
    }

    // Releases every closure and therefore all intermediate buffers they
    // keep alive.
    void clear() {
        steps_.clear();
        consumed_ = false;
    }

  private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
    static inline thread_local Tape* active_ = nullptr;
};

namespace detail {

template <class T>
bool grad_mode(const Tensor<T>& a) {
    return Tape<T>::active() != nullptr && a.requires_grad();
}

template <class T>
bool grad_mode(const Tensor<T>& a, const Tensor<T>& b) {
    return Tape<T>::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 on broadcast (size-1) dims, aligned to out rank.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
        size_t oi = out.size() - in.size() + i;
        strides[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : s;
        s *= in[i];
    }
    return strides;
}

// Applies fn elementwise over the broadcast of a and b into out. Rows are
// distributed across threads; each output element is written exactly once.
template <class T, class Fn>
void ewise_binary(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, Fn fn) {
    const Shape& os = out.shape();
    const int64_t n = out.numel();
    if (a.shape() == b.shape()) {
        const T* pa = a.raw();
        const T* pb = b.raw();
        T* po = out.raw();
#pragma omp parallel for schedule(static) num_threads(thread_cap())
        for (int64_t i = 0; i < n; ++i) po[i] = fn(pa[i], pb[i]);
        return;
    }
    const int64_t inner = os.empty() ? 1 : os.back();
    const int64_t rows = n / std::max<int64_t>(inner, 1);
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    const int64_t ia = sa.empty() ? 0 : sa.back();
    const int64_t ib = sb.empty() ? 0 : sb.back();
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* po = out.raw();
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (int64_t row = 0; row < rows; ++row) {
        int64_t rem = row;
        int64_t offa = 0, offb = 0;
        for (int d = static_cast<int>(os.size()) - 2; d >= 0; --d) {
            int64_t idx = rem % os[d];
            rem /= os[d];
            offa += idx * sa[d];
            offb += idx * sb[d];
        }
        T* o = po + row * inner;
        const T* ra = pa + offa;
        const T* rb = pb + offb;
        if (ia == 1 && ib == 1) {
            for (int64_t i = 0; i < inner; ++i) o[i] = fn(ra[i], rb[i]);
        } else if (ia == 1 && ib == 0) {
            T vb = *rb;
            for (int64_t i = 0; i < inner; ++i) o[i] = fn(ra[i], vb);
        } else if (ia == 0 && ib == 1) {
            T va = *ra;
            for (int64_t i = 0; i < inner; ++i) o[i] = fn(va, rb[i]);
        } else {
            o[0] = fn(*ra, *rb);
            for (int64_t i = 1; i < inner; ++i) o[i] = o[0];
        }
    }
}

// Reduces `src` (shaped like `from`) into the (broadcast-source) shape `to`.
template <class T>
std::vector<T> sum_to(std::span<const T> src, const Shape& from, const Shape& to) {
    std::vector<T> out(numel_of(to), T(0));
    if (from == to) {
        std::copy(src.begin(), src.end(), out.begin());
        return out;
    }
    auto strides = broadcast_strides(to, from);
    const int64_t n = numel_of(from);
    const int64_t inner = from.empty() ? 1 : from.back();
    const int64_t rows = n / std::max<int64_t>(inner, 1);
    const int64_t is = strides.empty() ? 0 : strides.back();
    for (int64_t row = 0; row < rows; ++row) {
        int64_t rem = row;
        int64_t off = 0;
        for (int d = static_cast<int>(from.size()) - 2; d >= 0; --d) {
            int64_t idx = rem % from[d];
            rem /= from[d];
            off += idx * strides[d];
        }
        const T* s = src.data() + row * inner;
        if (is == 1) {
            for (int64_t i = 0; i < inner; ++i) out[off + i] += s[i];
        } else {
            T acc(0);
            for (int64_t i = 0; i < inner; ++i) acc += s[i];
            out[off] += acc;
        }
    }
    return out;
}

template <class T, class Range>
void accumulate(Tensor<T>& t, const Range& g) {
    auto dst = t.grad();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

template <class T, class Range>
void accumulate_sum_to(Tensor<T>& t, const Range& g, const Shape& gshape) {
    if (gshape == t.shape()) {
        accumulate(t, g);
    } else {
        auto reduced = sum_to<T>(std::span<const T>(g.data(), g.size()), gshape, t.shape());
        accumulate(t, reduced);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

enum class EwiseKind { add, sub, mul, silu, square, sqrt, abs };

template <class T, class Fwd, class Bwd>
Tensor<T> ewise_binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
    Shape os = detail::broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::zeros(os);
    detail::ewise_binary(a, b, out, fwd);
    if (detail::grad_mode(a, b)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::active()->record([ac, bc, oc, bwd]() mutable {
            if (!oc.has_grad()) return;
            bwd(ac, bc, oc);
        });
    }
    return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return ewise_binary_op(
        a, b, [](T x, T y) { return x + y; },
        [](Tensor<T>& ac, Tensor<T>& bc, Tensor<T>& oc) {
            if (ac.requires_grad()) detail::accumulate_sum_to(ac, oc.grad(), oc.shape());
            if (bc.requires_grad()) detail::accumulate_sum_to(bc, oc.grad(), oc.shape());
        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return ewise_binary_op(
        a, b, [](T x, T y) { return x - y; },
        [](Tensor<T>& ac, Tensor<T>& bc, Tensor<T>& oc) {
            if (ac.requires_grad()) detail::accumulate_sum_to(ac, oc.grad(), oc.shape());
            if (bc.requires_grad()) {
                std::vector<T> neg(oc.grad().begin(), oc.grad().end());
                for (T& v : neg) v = -v;
                detail::accumulate_sum_to(bc, neg, oc.shape());
            }
        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return ewise_binary_op(
        a, b, [](T x, T y) { return x * y; },
        [](Tensor<T>& ac, Tensor<T>& bc, Tensor<T>& oc) {
            Tensor<T> gt = Tensor<T>::from_data(
                oc.shape(), std::vector<T>(oc.grad().begin(), oc.grad().end()));
            if (ac.requires_grad()) {
                Tensor<T> prod = Tensor<T>::zeros(oc.shape());
                detail::ewise_binary(gt, bc, prod, [](T x, T y) { return x * y; });
                detail::accumulate_sum_to(ac, prod.data(), oc.shape());
            }
            if (bc.requires_grad()) {
                Tensor<T> prod = Tensor<T>::zeros(oc.shape());
                detail::ewise_binary(gt, ac, prod, [](T x, T y) { return x * y; });
                detail::accumulate_sum_to(bc, prod.data(), oc.shape());
            }
        });
}

template <class T, class Fwd, class Deriv>
Tensor<T> ewise_unary_op(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.raw();
    T* po = out.raw();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    if (detail::grad_mode(a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        Tape<T>::active()->record([ac, oc, deriv]() mutable {
            if (!oc.has_grad()) return;
            auto g = oc.grad();
            auto dst = ac.grad();
            const T* px = ac.raw();
            const T* py = oc.raw();
            for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * deriv(px[i], py[i]);
        });
    }
    return out;
}

template <class T>
T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    return ewise_unary_op(
        a, [](T x) { return x * sigmoid_scalar(x); },
        [](T x, T) {
            T s = sigmoid_scalar(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    return ewise_unary_op(
        a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
    return ewise_unary_op(
        a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
    return ewise_unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return ewise_unary_op(
        a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    return ewise_unary_op(
        a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

// Dispatcher mirroring the op-kind surface; binary kinds require b.
template <class T>
Tensor<T> elementwise(EwiseKind kind, const Tensor<T>& a, const Tensor<T>* b = nullptr) {
    switch (kind) {
        case EwiseKind::add:
        case EwiseKind::sub:
        case EwiseKind::mul:
            if (b == nullptr) throw ShapeError("binary elementwise kind requires two operands");
            if (kind == EwiseKind::add) return add(a, *b);
            if (kind == EwiseKind::sub) return sub(a, *b);
            return mul(a, *b);
        case EwiseKind::silu:
            return silu(a);
        case EwiseKind::square:
            return square(a);
        case EwiseKind::sqrt:
            return sqrt(a);
        case EwiseKind::abs:
            return abs(a);
    }
    throw ShapeError("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;
}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::EMap<T>(out.raw(), m, n).noalias() =
        detail::ECMap<T>(a.raw(), m, k) * detail::ECMap<T>(b.raw(), k, n);
    if (detail::grad_mode(a, b)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::active()->record([ac, bc, oc, m, k, n]() mutable {
            if (!oc.has_grad()) return;
            detail::ECMap<T> g(oc.grad().data(), m, n);
            if (ac.requires_grad()) {
                detail::EMap<T> da(ac.grad().data(), m, k);
                da.noalias() += g * detail::ECMap<T>(bc.raw(), k, n).transpose();
            }
            if (bc.requires_grad()) {
                detail::EMap<T> db(bc.grad().data(), k, n);
                db.noalias() += detail::ECMap<T>(ac.raw(), m, k).transpose() * g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: NCHW cross-correlation, im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

// col is [C_in*kh*kw, oh*ow] for one item.
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, T* col) {
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                T* dst = col + ((c * kh + ky) * kw + kx) * (oh * ow);
                const T* src = x + c * H * W;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + ow, T(0));
                        dst += ow;
                        continue;
                    }
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        *dst++ = (ix >= 0 && ix < W) ? src[iy * W + ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, T* x) {
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const T* src = col + ((c * kh + ky) * kw + kx) * (oh * ow);
                T* dst = x + c * H * W;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy >= 0 && iy < H) {
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            int64_t ix = ox * stride + kx - pad;
                            if (ix >= 0 && ix < W) dst[iy * W + ix] += src[ox];
                        }
                    }
                    src += ow;
                }
            }
        }
    }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int64_t stride = 1, int64_t padding = 0) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw ShapeError("conv2d expects NCHW input and OIHW weight");
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Co = weight.dim(0), Ci = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (C != Ci)
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(C) +
                         ", weight expects " + std::to_string(Ci));
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel dims must be odd");
    if (bias.defined() && bias.numel() != Co) throw ShapeError("conv2d bias length mismatch");
    const int64_t oh = (H + 2 * padding - kh) / stride + 1;
    const int64_t ow = (W + 2 * padding - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw ShapeError("conv2d output would be empty");
    const int64_t K = C * kh * kw, HW = oh * ow;

    Tensor<T> out = Tensor<T>::zeros({N, Co, oh, ow});
#pragma omp parallel num_threads(thread_cap())
    {
        std::vector<T> col(K * HW);
#pragma omp for schedule(static)
        for (int64_t n = 0; n < N; ++n) {
            detail::im2col(input.raw() + n * C * H * W, C, H, W, kh, kw, stride, padding, oh, ow,
                           col.data());
            detail::EMap<T> o(out.raw() + n * Co * HW, Co, HW);
            o.noalias() = detail::ECMap<T>(weight.raw(), Co, K) * detail::ECMap<T>(col.data(), K, HW);
            if (bias.defined()) {
                for (int64_t c = 0; c < Co; ++c)
                    o.row(c).array() += static_cast<T>(bias.raw()[c]);
            }
        }
    }

    bool track = Tape<T>::active() != nullptr &&
                 (input.requires_grad() || weight.requires_grad() ||
                  (bias.defined() && bias.requires_grad()));
    if (track) {
        out.set_requires_grad(true);
        Tensor<T> xc = input, wc = weight, bc = bias, oc = out;
        Tape<T>::active()->record([xc, wc, bc, oc, N, C, H, W, Co, kh, kw, stride, padding, oh, ow,
                                   K, HW]() mutable {
            if (!oc.has_grad()) return;
            const T* g = oc.grad().data();
            if (bc.defined() && bc.requires_grad()) {
                auto db = bc.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < Co; ++c) {
                        T acc(0);
                        const T* gp = g + (n * Co + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) acc += gp[i];
                        db[c] += acc;
                    }
            }
            if (wc.requires_grad()) {
                // Per-item partials reduced in item order keeps the result
                // independent of the thread count.
                std::vector<std::vector<T>> partial(N);
#pragma omp parallel num_threads(thread_cap())
                {
                    std::vector<T> col(K * HW);
#pragma omp for schedule(static)
                    for (int64_t n = 0; n < N; ++n) {
                        detail::im2col(xc.raw() + n * C * H * W, C, H, W, kh, kw, stride, padding,
                                       oh, ow, col.data());
                        partial[n].assign(Co * K, T(0));
                        detail::EMap<T>(partial[n].data(), Co, K).noalias() =
                            detail::ECMap<T>(g + n * Co * HW, Co, HW) *
                            detail::ECMap<T>(col.data(), K, HW).transpose();
                    }
                }
                auto dw = wc.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t i = 0; i < Co * K; ++i) dw[i] += partial[n][i];
            }
            if (xc.requires_grad()) {
                auto dx = xc.grad();
#pragma omp parallel num_threads(thread_cap())
                {
                    std::vector<T> colg(K * HW);
#pragma omp for schedule(static)
                    for (int64_t n = 0; n < N; ++n) {
                        detail::EMap<T>(colg.data(), K, HW).noalias() =
                            detail::ECMap<T>(wc.raw(), Co, K).transpose() *
                            detail::ECMap<T>(g + n * Co * HW, Co, HW);
                        detail::col2im_add(colg.data(), C, H, W, kh, kw, stride, padding, oh, ow,
                                           dx.data() + n * C * H * W);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// group_norm
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> group_norm(const Tensor<T>& input, int64_t groups, const Tensor<T>& gain,
                     const Tensor<T>& shift, T eps = T(1e-5)) {
    if (input.rank() != 4) throw ShapeError("group_norm expects NCHW input");
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (groups < 1 || C % groups != 0)
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible by " +
                         std::to_string(groups) + " groups");
    if (gain.numel() != C || shift.numel() != C)
        throw ShapeError("group_norm gain/shift must have one entry per channel");
    if (eps <= T(0)) throw ShapeError("group_norm eps must be positive");
    const int64_t cpg = C / groups;
    const int64_t m = cpg * H * W;

    Tensor<T> out = Tensor<T>::zeros(input.shape());
    auto stats = std::make_shared<std::vector<T>>(N * groups * 2);  // mean, rstd pairs
#pragma omp parallel for schedule(static) collapse(2) num_threads(thread_cap())
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t gidx = 0; gidx < groups; ++gidx) {
            const T* x = input.raw() + (n * C + gidx * cpg) * H * W;
            double sum = 0, sq = 0;
            for (int64_t i = 0; i < m; ++i) {
                sum += x[i];
                sq += static_cast<double>(x[i]) * x[i];
            }
            double mean = sum / m;
            double var = sq / m - mean * mean;
            T rstd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            (*stats)[(n * groups + gidx) * 2] = static_cast<T>(mean);
            (*stats)[(n * groups + gidx) * 2 + 1] = rstd;
            T* o = out.raw() + (n * C + gidx * cpg) * H * W;
            for (int64_t c = 0; c < cpg; ++c) {
                T gn = gain.raw()[gidx * cpg + c];
                T sh = shift.raw()[gidx * cpg + c];
                const T* xc = x + c * H * W;
                T* oc = o + c * H * W;
                for (int64_t i = 0; i < H * W; ++i)
                    oc[i] = (xc[i] - static_cast<T>(mean)) * rstd * gn + sh;
            }
        }
    }

    bool track = Tape<T>::active() != nullptr &&
                 (input.requires_grad() || gain.requires_grad() || shift.requires_grad());
    if (track) {
        out.set_requires_grad(true);
        Tensor<T> xc = input, gc = gain, sc = shift, oc = out;
        Tape<T>::active()->record([xc, gc, sc, oc, stats, N, C, H, W, groups, cpg, m]() mutable {
            if (!oc.has_grad()) return;
            const T* g = oc.grad().data();
            const int64_t hw = H * W;
            if (gc.requires_grad() || sc.requires_grad()) {
                auto dgain = gc.requires_grad() ? gc.grad() : std::span<T>();
                auto dshift = sc.requires_grad() ? sc.grad() : std::span<T>();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        T mean = (*stats)[(n * groups + c / cpg) * 2];
                        T rstd = (*stats)[(n * groups + c / cpg) * 2 + 1];
                        const T* xp = xc.raw() + (n * C + c) * hw;
                        const T* gp = g + (n * C + c) * hw;
                        T dg(0), ds(0);
                        for (int64_t i = 0; i < hw; ++i) {
                            dg += gp[i] * (xp[i] - mean) * rstd;
                            ds += gp[i];
                        }
                        if (gc.requires_grad()) dgain[c] += dg;
                        if (sc.requires_grad()) dshift[c] += ds;
                    }
            }
            if (xc.requires_grad()) {
                auto dx = xc.grad();
#pragma omp parallel for schedule(static) collapse(2) num_threads(thread_cap())
                for (int64_t n = 0; n < N; ++n) {
                    for (int64_t gidx = 0; gidx < groups; ++gidx) {
                        T mean = (*stats)[(n * groups + gidx) * 2];
                        T rstd = (*stats)[(n * groups + gidx) * 2 + 1];
                        const T* x = xc.raw() + (n * C + gidx * cpg) * hw;
                        const T* gp = g + (n * C + gidx * cpg) * hw;
                        double sum_dxhat = 0, sum_dxhat_xhat = 0;
                        for (int64_t c = 0; c < cpg; ++c) {
                            T gn = gc.raw()[gidx * cpg + c];
                            for (int64_t i = 0; i < hw; ++i) {
                                T xhat = (x[c * hw + i] - mean) * rstd;
                                T dxhat = gp[c * hw + i] * gn;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += static_cast<double>(dxhat) * xhat;
                            }
                        }
                        T mu1 = static_cast<T>(sum_dxhat / m);
                        T mu2 = static_cast<T>(sum_dxhat_xhat / m);
                        T* dxp = dx.data() + (n * C + gidx * cpg) * hw;
                        for (int64_t c = 0; c < cpg; ++c) {
                            T gn = gc.raw()[gidx * cpg + c];
                            for (int64_t i = 0; i < hw; ++i) {
                                T xhat = (x[c * hw + i] - mean) * rstd;
                                T dxhat = gp[c * hw + i] * gn;
                                dxp[c * hw + i] += rstd * (dxhat - mu1 - xhat * mu2);
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceKind { sum, mean, max };

namespace detail {
inline Shape reduced_shape(const Shape& in, const std::vector<int>& axes, bool keepdims) {
    std::vector<bool> drop(in.size(), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= static_cast<int>(in.size()))
            throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for " +
                             shape_str(in));
        if (drop[ax]) throw ShapeError("reduce: duplicate axis " + std::to_string(ax));
        drop[ax] = true;
    }
    Shape out;
    for (size_t i = 0; i < in.size(); ++i) {
        if (drop[i]) {
            if (keepdims) out.push_back(1);
        } else {
            out.push_back(in[i]);
        }
    }
    if (out.empty()) out.push_back(1);
    return out;
}
}  // namespace detail

template <class T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& a, std::vector<int> axes = {},
                 bool keepdims = false) {
    const Shape& in = a.shape();
    if (axes.empty())
        for (size_t i = 0; i < in.size(); ++i) axes.push_back(static_cast<int>(i));
    Shape os = detail::reduced_shape(in, axes, keepdims);
    Tensor<T> out = Tensor<T>::zeros(os);

    // Map each input element to its output slot.
    std::vector<bool> drop(in.size(), false);
    for (int ax : axes) drop[ax] = true;
    std::vector<int64_t> out_stride(in.size(), 0);
    {
        int64_t s = 1;
        for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
            if (!drop[i]) {
                out_stride[i] = s;
                s *= in[i];
            }
        }
    }
    const int64_t n = a.numel();
    const int64_t count = n / out.numel();
    const T* pa = a.raw();

    auto out_index = [in_shape = in, out_stride](int64_t flat) {
        int64_t off = 0;
        for (int d = static_cast<int>(in_shape.size()) - 1; d >= 0; --d) {
            int64_t idx = flat % in_shape[d];
            flat /= in_shape[d];
            off += idx * out_stride[d];
        }
        return off;
    };

    std::shared_ptr<std::vector<int64_t>> argmax;
    if (kind == ReduceKind::max) {
        argmax = std::make_shared<std::vector<int64_t>>(out.numel(), -1);
        T* po = out.raw();
        std::fill(po, po + out.numel(), std::numeric_limits<T>::lowest());
        for (int64_t i = 0; i < n; ++i) {
            int64_t oi = out_index(i);
            if (pa[i] > po[oi]) {
                po[oi] = pa[i];
                (*argmax)[oi] = i;
            }
        }
    } else {
        std::vector<double> acc(out.numel(), 0.0);
        for (int64_t i = 0; i < n; ++i) acc[out_index(i)] += pa[i];
        T* po = out.raw();
        for (int64_t i = 0; i < out.numel(); ++i)
            po[i] = static_cast<T>(kind == ReduceKind::mean ? acc[i] / count : acc[i]);
    }

    if (detail::grad_mode(a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        Tape<T>::active()->record([ac, oc, kind, out_index, argmax, count]() mutable {
            if (!oc.has_grad()) return;
            auto g = oc.grad();
            auto dx = ac.grad();
            if (kind == ReduceKind::max) {
                for (int64_t oi = 0; oi < oc.numel(); ++oi)
                    if ((*argmax)[oi] >= 0) dx[(*argmax)[oi]] += g[oi];
            } else {
                T inv = kind == ReduceKind::mean ? T(1) / static_cast<T>(count) : T(1);
                const int64_t n = ac.numel();
                for (int64_t i = 0; i < n; ++i) dx[i] += g[out_index(i)] * inv;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::vector<int> axes = {}, bool keepdims = false) {
    return reduce(ReduceKind::sum, a, std::move(axes), keepdims);
}
template <class T>
Tensor<T> reduce_mean(const Tensor<T>& a, std::vector<int> axes = {}, bool keepdims = false) {
    return reduce(ReduceKind::mean, a, std::move(axes), keepdims);
}
template <class T>
Tensor<T> reduce_max(const Tensor<T>& a, std::vector<int> axes = {}, bool keepdims = false) {
    return reduce(ReduceKind::max, a, std::move(axes), keepdims);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    Tensor<T> out = Tensor<T>::from_data(std::move(shape),
                                         std::vector<T>(a.data().begin(), a.data().end()));
    if (detail::grad_mode(a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        Tape<T>::active()->record([ac, oc]() mutable {
            if (!oc.has_grad()) return;
            detail::accumulate(ac, oc.grad());
        });
    }
    return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) throw ShapeError("concat axis out of range");
    Shape os = s0;
    os[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(s0.size()))
            throw ShapeError("concat rank mismatch");
        for (int d = 0; d < p.rank(); ++d)
            if (d != axis && p.dim(d) != s0[d]) throw ShapeError("concat non-axis dim mismatch");
        os[axis] += p.dim(axis);
    }
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= os[d];
    for (size_t d = axis + 1; d < os.size(); ++d) inner *= os[d];

    Tensor<T> out = Tensor<T>::zeros(os);
    int64_t offset = 0;
    for (const auto& p : parts) {
        int64_t rows = p.dim(axis) * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.raw() + (o * os[axis] * inner) + offset * inner,
                        p.raw() + o * rows, rows * sizeof(T));
        offset += p.dim(axis);
    }

    bool track = false;
    if (Tape<T>::active())
        for (const auto& p : parts) track = track || p.requires_grad();
    if (track) {
        out.set_requires_grad(true);
        std::vector<Tensor<T>> pc = parts;
        Tensor<T> oc = out;
        int64_t cat = os[axis];
        Tape<T>::active()->record([pc, oc, outer, inner, cat]() mutable {
            if (!oc.has_grad()) return;
            const T* g = oc.grad().data();
            int64_t offset = 0;
            for (auto& p : pc) {
                int64_t rows = (p.numel() / outer);
                if (p.requires_grad()) {
                    auto dst = p.grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* src = g + o * cat * inner + offset * inner;
                        T* d = dst.data() + o * rows;
                        for (int64_t i = 0; i < rows; ++i) d[i] += src[i];
                    }
                }
                offset += rows / inner;
            }
        });
    }
    return out;
}

// Stack rank-R tensors into rank R+1 along a new leading axis.
template <class T>
Tensor<T> stack0(const std::vector<Tensor<T>>& parts) {
    std::vector<Tensor<T>> expanded;
    expanded.reserve(parts.size());
    for (const auto& p : parts) {
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(p, s));
    }
    return concat(expanded, 0);
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& a) {
    if (a.rank() != 4) throw ShapeError("upsample_nearest2x expects NCHW");
    const int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor<T> out = Tensor<T>::zeros({N, C, 2 * H, 2 * W});
    const T* pa = a.raw();
    T* po = out.raw();
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = pa + nc * H * W;
        T* dst = po + nc * 4 * H * W;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                T v = src[y * W + x];
                T* d = dst + (2 * y) * 2 * W + 2 * x;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    if (detail::grad_mode(a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        Tape<T>::active()->record([ac, oc, N, C, H, W]() mutable {
            if (!oc.has_grad()) return;
            const T* g = oc.grad().data();
            auto dx = ac.grad();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const T* gs = g + nc * 4 * H * W;
                T* d = dx.data() + nc * H * W;
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x = 0; x < W; ++x) {
                        const T* gp = gs + (2 * y) * 2 * W + 2 * x;
                        d[y * W + x] += gp[0] + gp[1] + gp[2 * W] + gp[2 * W + 1];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward entry point
// ---------------------------------------------------------------------------

template <class T>
void backward(Tensor<T>& loss) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) throw NumericError("backward requires an active tape");
    tape->backward(loss);
}

}  // namespace stainforge
