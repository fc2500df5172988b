#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stainforge/tensor.hpp"

namespace stainforge {

enum class ScheduleKind { linear, scaled_linear };

// Per-timestep beta / alpha-bar tables. Timesteps are 1-indexed at the API
// boundary (t in 1..T); tables are 0-indexed internally. Constructed in
// 64-bit regardless of the tensor precision used downstream.
struct NoiseSchedule {
    int timesteps = 0;
    std::vector<double> betas;       // beta_1..beta_T
    std::vector<double> alpha_bars;  // cumulative product of (1 - beta)

    double beta(int t) const {
        check_t(t);
        return betas[t - 1];
    }
    // alpha_bar(0) == 1 is the clean-signal boundary used by DDIM.
    double alpha_bar(int t) const {
        if (t == 0) return 1.0;
        check_t(t);
        return alpha_bars[t - 1];
    }

    void check_t(int t) const {
        if (t < 1 || t > timesteps)
            throw DataError("timestep " + std::to_string(t) + " outside 1.." +
                            std::to_string(timesteps));
    }
};

inline NoiseSchedule make_schedule(int timesteps, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::scaled_linear) {
    if (timesteps < 1) throw DataError("schedule needs at least one timestep");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw DataError("schedule requires 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.timesteps = timesteps;
    s.betas.resize(timesteps);
    s.alpha_bars.resize(timesteps);
    for (int k = 0; k < timesteps; ++k) {
        double frac = timesteps == 1 ? 0.0 : static_cast<double>(k) / (timesteps - 1);
        double beta;
        if (kind == ScheduleKind::linear) {
            beta = beta_start + (beta_end - beta_start) * frac;
        } else {
            double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * frac;
            beta = r * r;
        }
        s.betas[k] = beta;
    }
    double prod = 1.0;
    for (int k = 0; k < timesteps; ++k) {
        prod *= 1.0 - s.betas[k];
        s.alpha_bars[k] = prod;
    }
    return s;
}

// Matches the SD v2 backbone the model architecture mirrors.
inline NoiseSchedule default_schedule(int timesteps = 1000) {
    return make_schedule(timesteps, 0.00085, 0.012, ScheduleKind::scaled_linear);
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int t, const Tensor<T>& eps,
                          const NoiseSchedule& s) {
    if (z0.shape() != eps.shape())
        throw ShapeError("forward_diffuse: eps shape " + shape_str(eps.shape()) +
                         " differs from z0 " + shape_str(z0.shape()));
    s.check_t(t);
    double ab = s.alpha_bar(t);
    return add(scale(z0, static_cast<T>(std::sqrt(ab))),
               scale(eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

// v* = sqrt(abar_t) eps - sqrt(1 - abar_t) z0
template <class T>
Tensor<T> v_target(const Tensor<T>& z0, const Tensor<T>& eps, int t, const NoiseSchedule& s) {
    if (z0.shape() != eps.shape()) throw ShapeError("v_target: shape mismatch");
    s.check_t(t);
    double ab = s.alpha_bar(t);
    return sub(scale(eps, static_cast<T>(std::sqrt(ab))),
               scale(z0, static_cast<T>(std::sqrt(1.0 - ab))));
}

// Algebraic inverse: z0 = sqrt(abar_t) z_t - sqrt(1 - abar_t) v
template <class T>
Tensor<T> recover_z0(const Tensor<T>& z_t, const Tensor<T>& v, int t, const NoiseSchedule& s) {
    if (z_t.shape() != v.shape()) throw ShapeError("recover_z0: shape mismatch");
    s.check_t(t);
    double ab = s.alpha_bar(t);
    return sub(scale(z_t, static_cast<T>(std::sqrt(ab))),
               scale(v, static_cast<T>(std::sqrt(1.0 - ab))));
}

// Companion identity: eps = sqrt(1 - abar_t) z_t + sqrt(abar_t) v
template <class T>
Tensor<T> recover_eps(const Tensor<T>& z_t, const Tensor<T>& v, int t, const NoiseSchedule& s) {
    if (z_t.shape() != v.shape()) throw ShapeError("recover_eps: shape mismatch");
    s.check_t(t);
    double ab = s.alpha_bar(t);
    return add(scale(z_t, static_cast<T>(std::sqrt(1.0 - ab))),
               scale(v, static_cast<T>(std::sqrt(ab))));
}

enum class NoiseKind { gaussian, multi_resolution, zero };

struct NoiseSpec {
    NoiseKind kind = NoiseKind::gaussian;
    int pyramid_levels = 0;    // 0: derive from the field size
    double level_decay = 0.5;  // weight ratio between pyramid levels
};

namespace detail {

// Nearest-neighbor upsample of a [h,w] field by 2^level into dst [H,W].
template <class T>
void upsample_into(const std::vector<T>& src, int64_t h, int64_t w, int64_t H, int64_t W,
                   double weight, std::vector<T>& dst) {
    int64_t fy = H / h + (H % h ? 1 : 0);  // replication factor (power of two)
    (void)fy;
    for (int64_t y = 0; y < H; ++y) {
        int64_t sy = std::min<int64_t>(y * h / H, h - 1);
        for (int64_t x = 0; x < W; ++x) {
            int64_t sx = std::min<int64_t>(x * w / W, w - 1);
            dst[y * W + x] += static_cast<T>(weight) * src[sy * w + sx];
        }
    }
}

}  // namespace detail

// Gaussian, multi-resolution pyramid, or zero noise. Deterministic for a
// fixed seed; a one-level pyramid is bit-identical to plain gaussian.
template <class T>
Tensor<T> sample_noise(const NoiseSpec& spec, const Shape& shape, uint64_t seed) {
    Tensor<T> out = Tensor<T>::zeros(shape);
    if (spec.kind == NoiseKind::zero) return out;

    Rng rng(seed);
    if (shape.size() < 2) throw ShapeError("sample_noise needs at least 2 spatial dims");
    const int64_t W = shape[shape.size() - 1];
    const int64_t H = shape[shape.size() - 2];
    const int64_t fields = out.numel() / (H * W);

    if (spec.kind == NoiseKind::gaussian) {
        for (T& v : out.data()) v = static_cast<T>(rng.normal());
        return out;
    }

    int levels = spec.pyramid_levels;
    if (levels <= 0)
        levels = std::max<int>(1, static_cast<int>(std::floor(std::log2(std::min(H, W)))));
    int64_t min_dim = std::min(H, W);
    if (min_dim < (int64_t(1) << (levels - 1)))
        throw ShapeError("sample_noise: field " + std::to_string(H) + "x" + std::to_string(W) +
                         " too small for " + std::to_string(levels) + " pyramid levels");

    double var = 0.0;
    for (int l = 0; l < levels; ++l) var += std::pow(spec.level_decay, 2.0 * l);
    const double norm = 1.0 / std::sqrt(var);

    std::vector<T> field(H * W);
    std::vector<T> level_buf;
    for (int64_t f = 0; f < fields; ++f) {
        std::fill(field.begin(), field.end(), T(0));
        for (int l = 0; l < levels; ++l) {
            int64_t h = (H + (int64_t(1) << l) - 1) >> l;
            int64_t w = (W + (int64_t(1) << l) - 1) >> l;
            level_buf.resize(h * w);
            for (T& v : level_buf) v = static_cast<T>(rng.normal());
            if (l == 0) {
                for (int64_t i = 0; i < H * W; ++i) field[i] += level_buf[i];
            } else {
                detail::upsample_into(level_buf, h, w, H, W, std::pow(spec.level_decay, l), field);
            }
        }
        T* dst = out.raw() + f * H * W;
        for (int64_t i = 0; i < H * W; ++i) dst[i] = static_cast<T>(field[i] * norm);
    }
    return out;
}

}  // namespace stainforge
