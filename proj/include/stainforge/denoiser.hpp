#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stainforge/nn.hpp"
#include "stainforge/tensor.hpp"

namespace stainforge {

// Ordered marker registry; index m is stable across save/load.
struct MarkerPanel {
    std::vector<std::string> names;

    int size() const { return static_cast<int>(names.size()); }

    int index_of(const std::string& name) const {
        for (int i = 0; i < size(); ++i)
            if (names[i] == name) return i;
        throw DataError("unknown marker '" + name + "'");
    }

    void validate() const {
        if (names.empty()) throw DataError("marker panel is empty");
        for (int i = 0; i < size(); ++i)
            for (int j = i + 1; j < size(); ++j)
                if (names[i] == names[j]) throw DataError("duplicate marker '" + names[i] + "'");
    }

    bool operator==(const MarkerPanel&) const = default;
};

struct MarkerCondition {
    int marker_index = 0;
    int panel_size = 1;

    std::vector<double> one_hot() const {
        std::vector<double> v(panel_size, 0.0);
        v[marker_index] = 1.0;
        return v;
    }
};

inline MarkerCondition condition_for(const MarkerPanel& panel, const std::string& name) {
    return MarkerCondition{panel.index_of(name), panel.size()};
}

// Interleaved sin/cos over geometric frequencies; entries stay in [-1, 1].
template <class T>
Tensor<T> time_embedding(double t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ShapeError("embedding dim must be even and >= 2");
    std::vector<T> v(dim);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -static_cast<double>(i) / half);
        v[2 * i] = static_cast<T>(std::sin(t * freq));
        v[2 * i + 1] = static_cast<T>(std::cos(t * freq));
    }
    return Tensor<T>::from_data({dim}, std::move(v));
}

// Marker index run through the same sinusoidal basis as the timestep; the
// learned projection to the conditioning space lives in DenoiserParams.
template <class T>
Tensor<T> marker_embedding(const MarkerCondition& c, int dim) {
    if (c.marker_index < 0 || c.marker_index >= c.panel_size)
        throw DataError("marker index out of range");
    return time_embedding<T>(static_cast<double>(c.marker_index), dim);
}

// ---------------------------------------------------------------------------
// U-Net parameters
// ---------------------------------------------------------------------------

template <class T>
struct ResBlockParam {
    NormParam<T> norm1;
    ConvParam<T> conv1;
    DenseParam<T> emb;  // conditioning projection to the block width
    NormParam<T> norm2;
    ConvParam<T> conv2;
    ConvParam<T> skip;  // 1x1, present only when channel count changes
    bool has_skip = false;
};

// 3 resolutions at widths [w, 2w, 4w], 2 residual blocks per resolution,
// group norm + SiLU, skip connections across matching resolutions. Marker
// identity enters only via the embedding pathway, so the parameter count is
// independent of the panel size.
template <class T>
struct DenoiserParams {
    int latent_channels = 3;
    int width = 32;
    int embed_dim = 128;
    int groups = 8;

    ConvParam<T> in_conv;  // accepts 2*latent_channels (source || target)
    DenseParam<T> marker_proj;
    DenseParam<T> time_mlp1, time_mlp2;
    std::array<std::array<ResBlockParam<T>, 2>, 3> enc;
    std::array<ConvParam<T>, 2> down;
    std::array<ResBlockParam<T>, 2> mid;
    std::array<std::array<ResBlockParam<T>, 2>, 3> dec;
    std::array<ConvParam<T>, 2> up;
    NormParam<T> out_norm;
    ConvParam<T> out_conv;

    int level_width(int level) const { return width << level; }

    template <class Fn>
    void for_each_param(Fn fn) {
        auto conv = [&](const std::string& name, ConvParam<T>& c) {
            fn(name + ".w", c.w);
            fn(name + ".b", c.b);
        };
        auto dense = [&](const std::string& name, DenseParam<T>& d) {
            fn(name + ".w", d.w);
            fn(name + ".b", d.b);
        };
        auto norm = [&](const std::string& name, NormParam<T>& np) {
            fn(name + ".gain", np.gain);
            fn(name + ".shift", np.shift);
        };
        auto block = [&](const std::string& name, ResBlockParam<T>& b) {
            norm(name + ".norm1", b.norm1);
            conv(name + ".conv1", b.conv1);
            dense(name + ".emb", b.emb);
            norm(name + ".norm2", b.norm2);
            conv(name + ".conv2", b.conv2);
            if (b.has_skip) conv(name + ".skip", b.skip);
        };
        conv("in_conv", in_conv);
        dense("marker_proj", marker_proj);
        dense("time_mlp1", time_mlp1);
        dense("time_mlp2", time_mlp2);
        for (int l = 0; l < 3; ++l)
            for (int i = 0; i < 2; ++i)
                block("enc" + std::to_string(l) + ".rb" + std::to_string(i), enc[l][i]);
        for (int l = 0; l < 2; ++l) conv("down" + std::to_string(l), down[l]);
        for (int i = 0; i < 2; ++i) block("mid.rb" + std::to_string(i), mid[i]);
        for (int l = 0; l < 2; ++l) conv("up" + std::to_string(l), up[l]);
        for (int l = 2; l >= 0; --l)
            for (int i = 0; i < 2; ++i)
                block("dec" + std::to_string(l) + ".rb" + std::to_string(i), dec[l][i]);
        norm("out_norm", out_norm);
        conv("out_conv", out_conv);
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        for_each_param([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for_each_param([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    void set_requires_grad(bool on) {
        for_each_param([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
    }
};

// New conv weight accepting a duplicated input: concat(w/2, w/2) along the
// input-channel axis, so conv(adapted, [u||u]) == conv(original, u).
template <class T>
Tensor<T> adapt_input_channels(const Tensor<T>& weight) {
    if (weight.rank() != 4) throw ShapeError("adapt_input_channels expects an OIHW conv weight");
    Tensor<T> half = scale(weight, T(0.5));
    return concat<T>({half, half}, 1);
}

namespace detail {

template <class T>
ResBlockParam<T> init_block(int64_t ci, int64_t co, int64_t dim, Rng& rng) {
    ResBlockParam<T> b;
    b.norm1 = init_norm<T>(ci);
    b.conv1 = init_conv<T>(co, ci, 3, rng);
    b.emb = init_dense<T>(dim, co, rng);
    b.norm2 = init_norm<T>(co);
    b.conv2 = init_conv<T>(co, co, 3, rng);
    b.has_skip = ci != co;
    if (b.has_skip) b.skip = init_conv<T>(co, ci, 1, rng);
    return b;
}

}  // namespace detail

// Kaiming fan-in initialization; the output conv is zero-initialized so the
// untrained network predicts v == 0.
template <class T>
DenoiserParams<T> init_params(int latent_channels, int width, int embed_dim, uint64_t seed) {
    if (width < 8) throw DataError("denoiser width must be >= 8");
    if (width % 8 != 0) throw DataError("denoiser width must be divisible by the 8 norm groups");
    if (embed_dim < 2 || embed_dim % 2 != 0) throw DataError("embed_dim must be even");
    Rng rng(seed);
    DenoiserParams<T> p;
    p.latent_channels = latent_channels;
    p.width = width;
    p.embed_dim = embed_dim;

    const int64_t w0 = width, w1 = 2 * width, w2 = 4 * width;
    // Single-latent input conv, then the duplicate-and-halve adaptation for
    // the concatenated [source || target] pair.
    ConvParam<T> base = detail::init_conv<T>(w0, latent_channels, 3, rng);
    p.in_conv.w = adapt_input_channels(base.w);
    p.in_conv.b = base.b;

    p.marker_proj = detail::init_dense<T>(embed_dim, embed_dim, rng);
    p.time_mlp1 = detail::init_dense<T>(embed_dim, embed_dim, rng);
    p.time_mlp2 = detail::init_dense<T>(embed_dim, embed_dim, rng);

    p.enc[0][0] = detail::init_block<T>(w0, w0, embed_dim, rng);
    p.enc[0][1] = detail::init_block<T>(w0, w0, embed_dim, rng);
    p.down[0] = detail::init_conv<T>(w0, w0, 3, rng);
    p.enc[1][0] = detail::init_block<T>(w0, w1, embed_dim, rng);
    p.enc[1][1] = detail::init_block<T>(w1, w1, embed_dim, rng);
    p.down[1] = detail::init_conv<T>(w1, w1, 3, rng);
    p.enc[2][0] = detail::init_block<T>(w1, w2, embed_dim, rng);
    p.enc[2][1] = detail::init_block<T>(w2, w2, embed_dim, rng);

    p.mid[0] = detail::init_block<T>(w2, w2, embed_dim, rng);
    p.mid[1] = detail::init_block<T>(w2, w2, embed_dim, rng);

    p.dec[2][0] = detail::init_block<T>(2 * w2, w2, embed_dim, rng);
    p.dec[2][1] = detail::init_block<T>(2 * w2, w2, embed_dim, rng);
    p.up[1] = detail::init_conv<T>(w1, w2, 3, rng);
    p.dec[1][0] = detail::init_block<T>(2 * w1, w1, embed_dim, rng);
    p.dec[1][1] = detail::init_block<T>(2 * w1, w1, embed_dim, rng);
    p.up[0] = detail::init_conv<T>(w0, w1, 3, rng);
    p.dec[0][0] = detail::init_block<T>(2 * w0, w0, embed_dim, rng);
    p.dec[0][1] = detail::init_block<T>(2 * w0, w0, embed_dim, rng);

    p.out_norm = detail::init_norm<T>(w0);
    p.out_conv.w = Tensor<T>::zeros({latent_channels, w0, 3, 3});
    p.out_conv.b = Tensor<T>::zeros({latent_channels});
    return p;
}

namespace detail {

template <class T>
Tensor<T> resblock_fwd(const Tensor<T>& x, const Tensor<T>& cond, const ResBlockParam<T>& b,
                       int groups) {
    Tensor<T> h = silu(group_norm(x, groups, b.norm1.gain, b.norm1.shift));
    h = conv2d(h, b.conv1.w, b.conv1.b, 1, 1);
    Tensor<T> e = dense_fwd(silu(cond), b.emb);
    e = reshape(e, {e.dim(0), e.dim(1), 1, 1});
    h = add(h, e);
    h = silu(group_norm(h, groups, b.norm2.gain, b.norm2.shift));
    h = conv2d(h, b.conv2.w, b.conv2.b, 1, 1);
    Tensor<T> sk = b.has_skip ? conv2d(x, b.skip.w, b.skip.b, 1, 0) : x;
    return add(h, sk);
}

}  // namespace detail

// Batched U-Net evaluation: source and noisy-target latents concatenated on
// the channel axis, conditioned per item on (t, marker).
template <class T>
Tensor<T> denoiser_forward_batch(DenoiserParams<T>& p, const Tensor<T>& x, const Tensor<T>& z_t,
                                 std::span<const int> ts, std::span<const MarkerCondition> conds) {
    if (x.shape() != z_t.shape())
        throw ShapeError("denoiser: source latent " + shape_str(x.shape()) +
                         " and target latent " + shape_str(z_t.shape()) + " differ");
    if (x.rank() != 4) throw ShapeError("denoiser expects NCHW latents");
    const int64_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
    if (x.dim(1) != p.latent_channels) throw ShapeError("denoiser: latent channel mismatch");
    if (H % 4 != 0 || W % 4 != 0)
        throw ShapeError("denoiser: spatial dims must be divisible by 4");
    if (static_cast<int64_t>(ts.size()) != N || static_cast<int64_t>(conds.size()) != N)
        throw ShapeError("denoiser: need one (t, condition) pair per batch item");
    for (int t : ts)
        if (t < 1) throw DataError("denoiser: timestep must be >= 1");

    // Conditioning: sinusoidal time embedding plus the projected sinusoidal
    // marker embedding, then a small MLP shared by every block.
    std::vector<T> tvals(N * p.embed_dim), mvals(N * p.embed_dim);
    for (int64_t n = 0; n < N; ++n) {
        Tensor<T> te = time_embedding<T>(static_cast<double>(ts[n]), p.embed_dim);
        Tensor<T> me = marker_embedding<T>(conds[n], p.embed_dim);
        std::copy(te.data().begin(), te.data().end(), tvals.begin() + n * p.embed_dim);
        std::copy(me.data().begin(), me.data().end(), mvals.begin() + n * p.embed_dim);
    }
    Tensor<T> tsin = Tensor<T>::from_data({N, p.embed_dim}, std::move(tvals));
    Tensor<T> msin = Tensor<T>::from_data({N, p.embed_dim}, std::move(mvals));
    Tensor<T> cond = add(tsin, detail::dense_fwd(msin, p.marker_proj));
    cond = detail::dense_fwd(silu(detail::dense_fwd(cond, p.time_mlp1)), p.time_mlp2);

    Tensor<T> h = conv2d(concat<T>({x, z_t}, 1), p.in_conv.w, p.in_conv.b, 1, 1);

    Tensor<T> s00 = detail::resblock_fwd(h, cond, p.enc[0][0], p.groups);
    Tensor<T> s01 = detail::resblock_fwd(s00, cond, p.enc[0][1], p.groups);
    Tensor<T> d0 = conv2d(s01, p.down[0].w, p.down[0].b, 2, 1);
    Tensor<T> s10 = detail::resblock_fwd(d0, cond, p.enc[1][0], p.groups);
    Tensor<T> s11 = detail::resblock_fwd(s10, cond, p.enc[1][1], p.groups);
    Tensor<T> d1 = conv2d(s11, p.down[1].w, p.down[1].b, 2, 1);
    Tensor<T> s20 = detail::resblock_fwd(d1, cond, p.enc[2][0], p.groups);
    Tensor<T> s21 = detail::resblock_fwd(s20, cond, p.enc[2][1], p.groups);

    Tensor<T> m = detail::resblock_fwd(s21, cond, p.mid[0], p.groups);
    m = detail::resblock_fwd(m, cond, p.mid[1], p.groups);

    m = detail::resblock_fwd(concat<T>({m, s21}, 1), cond, p.dec[2][0], p.groups);
    m = detail::resblock_fwd(concat<T>({m, s20}, 1), cond, p.dec[2][1], p.groups);
    m = conv2d(upsample_nearest2x(m), p.up[1].w, p.up[1].b, 1, 1);
    m = detail::resblock_fwd(concat<T>({m, s11}, 1), cond, p.dec[1][0], p.groups);
    m = detail::resblock_fwd(concat<T>({m, s10}, 1), cond, p.dec[1][1], p.groups);
    m = conv2d(upsample_nearest2x(m), p.up[0].w, p.up[0].b, 1, 1);
    m = detail::resblock_fwd(concat<T>({m, s01}, 1), cond, p.dec[0][0], p.groups);
    m = detail::resblock_fwd(concat<T>({m, s00}, 1), cond, p.dec[0][1], p.groups);

    m = silu(group_norm(m, p.groups, p.out_norm.gain, p.out_norm.shift));
    return conv2d(m, p.out_conv.w, p.out_conv.b, 1, 1);
}

// Single-item evaluation of v_hat([x, z_t], t, c_m) on [C,H,W] latents.
template <class T>
Tensor<T> denoiser_forward(DenoiserParams<T>& p, const Tensor<T>& x, const Tensor<T>& z_t, int t,
                           const MarkerCondition& c) {
    if (x.rank() != 3 || z_t.rank() != 3)
        throw ShapeError("denoiser_forward expects [C,H,W] latents");
    Shape batched = {1, x.dim(0), x.dim(1), x.dim(2)};
    Tensor<T> xb = reshape(x, batched);
    Tensor<T> zb = reshape(z_t, batched);
    std::array<int, 1> ts = {t};
    std::array<MarkerCondition, 1> cs = {c};
    Tensor<T> out = denoiser_forward_batch(p, xb, zb, ts, cs);
    return reshape(out, {out.dim(1), out.dim(2), out.dim(3)});
}

}  // namespace stainforge
