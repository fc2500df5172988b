// Test-only reference implementations: brute-force oracles and a central
// finite-difference gradient checker. Everything here is independent of the
// reverse-mode path it is used to verify.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "stainforge/image.hpp"
#include "stainforge/tensor.hpp"

namespace reference {

using stainforge::Rng;
using stainforge::Shape;
using stainforge::Tensor;

template <class Dst, class Src>
Tensor<Dst> cast_tensor(const Tensor<Src>& t) {
    std::vector<Dst> v(t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) v[i] = static_cast<Dst>(t.raw()[i]);
    return Tensor<Dst>::from_data(t.shape(), std::move(v));
}

// Central finite differences of a scalar-valued functor, evaluated in double
// regardless of the precision under test. `f` must be callable on
// vector<Tensor<U>> for U in {T, double}.
// `scale_floor` bounds the normalization from below: gradient components
// smaller than the floor sit inside the finite-difference noise band
// (~eps*|f|/h) and are compared at the floor instead of their own magnitude.
template <class T, class F>
double gradcheck_max_rel_err(F f, const std::vector<Tensor<T>>& inputs,
                             std::vector<int> check_indices = {}, int max_coords = 24,
                             uint64_t seed = 20240901, double scale_floor = 1e-4) {
    if (check_indices.empty())
        for (size_t i = 0; i < inputs.size(); ++i) check_indices.push_back(static_cast<int>(i));

    // Reverse-mode gradients at precision T.
    std::vector<Tensor<T>> ad_inputs;
    for (const auto& t : inputs) ad_inputs.push_back(t.clone());
    for (int idx : check_indices) ad_inputs[idx].set_requires_grad(true);
    stainforge::Tape<T> tape;
    {
        typename stainforge::Tape<T>::Scope scope(tape);
        Tensor<T> loss = f(ad_inputs);
        stainforge::backward(loss);
    }

    // Finite differences in double.
    std::vector<Tensor<double>> fd_inputs;
    for (const auto& t : inputs) fd_inputs.push_back(cast_tensor<double>(t));
    auto eval = [&]() { return static_cast<double>(f(fd_inputs).item()); };

    Rng rng(seed);
    double max_err = 0.0;
    for (int idx : check_indices) {
        const int64_t n = fd_inputs[idx].numel();
        std::vector<int64_t> coords;
        if (n <= max_coords) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < max_coords; ++i) coords.push_back(rng.uniform_int(n));
        }
        // Error is normalized by the gradient scale of the tensor: the FD
        // oracle cannot resolve individual near-cancelling coordinates below
        // that scale.
        double scale = scale_floor;
        for (T ad : ad_inputs[idx].grad())
            scale = std::max(scale, std::abs(static_cast<double>(ad)));
        std::vector<std::pair<int64_t, double>> diffs;
        for (int64_t c : coords) {
            double* slot = fd_inputs[idx].raw() + c;
            const double x = *slot;
            const double h = 1e-4 * std::max(1.0, std::abs(x));
            *slot = x + h;
            double fp = eval();
            *slot = x - h;
            double fm = eval();
            *slot = x;
            double fd = (fp - fm) / (2.0 * h);
            double ad = static_cast<double>(ad_inputs[idx].grad()[c]);
            scale = std::max(scale, std::abs(fd));
            diffs.emplace_back(c, std::abs(ad - fd));
        }
        for (auto& [c, d] : diffs) max_err = std::max(max_err, d / scale);
    }
    return max_err;
}

// Explicit-tiling broadcast oracle: materializes both operands at the
// broadcast shape, then combines elementwise.
template <class T, class Fn>
std::vector<T> tiled_broadcast(const Tensor<T>& a, const Tensor<T>& b, const Shape& out, Fn fn) {
    auto at = [&](const Tensor<T>& t, int64_t flat) {
        const Shape& s = t.shape();
        int64_t off = 0, stride = 1;
        for (int d = static_cast<int>(out.size()) - 1; d >= 0; --d) {
            int64_t idx = flat % out[d];
            flat /= out[d];
            int sd = d - (static_cast<int>(out.size()) - static_cast<int>(s.size()));
            if (sd >= 0) {
                int64_t dim = s[sd];
                off += (dim == 1 ? 0 : idx) * stride;
                stride *= dim;
            }
        }
        return t.raw()[off];
    };
    int64_t n = stainforge::numel_of(out);
    std::vector<T> res(n);
    for (int64_t i = 0; i < n; ++i) res[i] = fn(at(a, i), at(b, i));
    return res;
}

template <class T>
std::vector<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n, T(0));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += double(a.raw()[i * k + p]) * b.raw()[p * n + j];
            out[i * n + j] = static_cast<T>(acc);
        }
    return out;
}

// Direct cross-correlation, quadruple loop.
template <class T>
std::vector<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                            int64_t stride, int64_t pad) {
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int64_t oh = (H + 2 * pad - kh) / stride + 1;
    int64_t ow = (W + 2 * pad - kw) / stride + 1;
    std::vector<T> out(N * Co * oh * ow, T(0));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = b.defined() ? double(b.raw()[co]) : 0.0;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t iy = oy * stride + ky - pad;
                                int64_t ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += double(x.raw()[((n * C + c) * H + iy) * W + ix]) *
                                       w.raw()[((co * C + c) * kh + ky) * kw + kx];
                            }
                    out[((n * Co + co) * oh + oy) * ow + ox] = static_cast<T>(acc);
                }
    return out;
}

// Direct-formula SSIM: per valid window position, weighted statistics are
// recomputed from scratch. Deliberately not the separable-filter route.
inline double ssim_direct(const stainforge::Image& a, const stainforge::Image& b,
                          double data_range, int window = 11, double sigma = 1.5,
                          double k1 = 0.01, double k2 = 0.03) {
    const int H = a.height, W = a.width;
    std::vector<double> kw(static_cast<size_t>(window) * window);
    double ksum = 0;
    for (int y = 0; y < window; ++y)
        for (int x = 0; x < window; ++x) {
            double dy = y - window / 2, dx = x - window / 2;
            kw[y * window + x] = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            ksum += kw[y * window + x];
        }
    for (double& v : kw) v /= ksum;
    const double c1 = (k1 * data_range) * (k1 * data_range);
    const double c2 = (k2 * data_range) * (k2 * data_range);
    double total = 0;
    int64_t count = 0;
    for (int y0 = 0; y0 + window <= H; ++y0)
        for (int x0 = 0; x0 + window <= W; ++x0) {
            double ma = 0, mb = 0;
            for (int y = 0; y < window; ++y)
                for (int x = 0; x < window; ++x) {
                    double w = kw[y * window + x];
                    ma += w * a.at(0, y0 + y, x0 + x);
                    mb += w * b.at(0, y0 + y, x0 + x);
                }
            double va = 0, vb = 0, cov = 0;
            for (int y = 0; y < window; ++y)
                for (int x = 0; x < window; ++x) {
                    double w = kw[y * window + x];
                    double da = a.at(0, y0 + y, x0 + x);
                    double db = b.at(0, y0 + y, x0 + x);
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            va -= ma * ma;
            vb -= mb * mb;
            cov -= ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

inline double pearson_direct(const stainforge::Image& a, const stainforge::Image& b) {
    const int64_t n = static_cast<int64_t>(a.pix.size());
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (int64_t i = 0; i < n; ++i) {
        sa += a.pix[i];
        sb += b.pix[i];
        saa += double(a.pix[i]) * a.pix[i];
        sbb += double(b.pix[i]) * b.pix[i];
        sab += double(a.pix[i]) * b.pix[i];
    }
    double num = sab - sa * sb / n;
    double den = std::sqrt((saa - sa * sa / n) * (sbb - sb * sb / n));
    if (den == 0) return 0;
    return num / den;
}

inline double psnr_direct(const stainforge::Image& a, const stainforge::Image& b,
                          double data_range) {
    double mse = 0;
    for (size_t i = 0; i < a.pix.size(); ++i) {
        double d = double(a.pix[i]) - b.pix[i];
        mse += d * d;
    }
    mse /= a.pix.size();
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10 * std::log10(data_range * data_range / mse);
}

inline std::pair<double, double> mean_var(const double* x, int64_t n) {
    double sum = 0;
    for (int64_t i = 0; i < n; ++i) sum += x[i];
    double mean = sum / n;
    double var = 0;
    for (int64_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    return {mean, var / n};
}

}  // namespace reference
