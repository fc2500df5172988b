#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "stainforge/image.hpp"
#include "stainforge/nn.hpp"
#include "stainforge/optim.hpp"

namespace stainforge {

// Image values on disk are [0,1]; model-facing tensors are [-1,1]. The
// mapping happens at the codec boundary, so an identity codec is a true
// pass-through on model-range tensors.
template <class T>
Tensor<T> to_model_range(const Tensor<T>& img01) {
    return add_scalar(scale(img01, T(2)), T(-1));
}

template <class T>
Tensor<T> to_image_range(const Tensor<T>& model) {
    return scale(add_scalar(model, T(1)), T(0.5));
}

// I_m [1,H,W] -> three identical channels.
template <class T>
Tensor<T> replicate_channels(const Tensor<T>& im) {
    if (im.rank() != 3 || im.dim(0) != 1)
        throw ShapeError("replicate_channels expects a [1,H,W] image, got " +
                         shape_str(im.shape()));
    return concat<T>({im, im, im}, 0);
}

// [3,H,W] -> per-pixel mean, the final single-channel prediction.
template <class T>
Tensor<T> average_channels(const Tensor<T>& im) {
    if (im.rank() == 3) {
        if (im.dim(0) != 3) throw ShapeError("average_channels expects 3 channels");
        return reduce_mean(im, {0}, true);
    }
    if (im.rank() == 4) {
        if (im.dim(1) != 3) throw ShapeError("average_channels expects 3 channels");
        return reduce_mean(im, {1}, true);
    }
    throw ShapeError("average_channels expects [3,H,W] or [N,3,H,W]");
}

enum class CodecKind { identity, tiny_ae };

// Stand-in for the frozen latent encoder/decoder pair: either a pixel-space
// identity or a small convolutional autoencoder with 4x downsampling and 4
// latent channels, pretrained then frozen before diffusion training.
template <class T>
struct Codec {
    CodecKind kind = CodecKind::identity;
    int latent_channels = 3;
    int spatial_factor = 1;
    int width = 16;
    bool frozen = true;
    bool trained = true;  // identity is trivially usable
    bool training_flagged = false;
    T latent_scale = T(1);

    // tiny_ae weights
    std::array<ConvParam<T>, 4> enc;
    std::array<ConvParam<T>, 4> dec;

    template <class Fn>
    void for_each_param(Fn fn) {
        if (kind == CodecKind::identity) return;
        for (int i = 0; i < 4; ++i) {
            fn("enc" + std::to_string(i) + ".w", enc[i].w);
            fn("enc" + std::to_string(i) + ".b", enc[i].b);
        }
        for (int i = 0; i < 4; ++i) {
            fn("dec" + std::to_string(i) + ".w", dec[i].w);
            fn("dec" + std::to_string(i) + ".b", dec[i].b);
        }
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        for_each_param([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
        return out;
    }

    void set_frozen(bool on) {
        frozen = on;
        for_each_param([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(!on); });
    }
};

template <class T>
Codec<T> make_identity_codec() {
    return Codec<T>{};
}

template <class T>
Codec<T> make_tiny_ae(int width, uint64_t seed) {
    if (width < 8) throw DataError("tiny_ae width must be >= 8");
    Codec<T> c;
    c.kind = CodecKind::tiny_ae;
    c.latent_channels = 4;
    c.spatial_factor = 4;
    c.width = width;
    c.trained = false;
    Rng rng(seed);
    c.enc[0] = detail::init_conv<T>(width, 3, 3, rng);
    c.enc[1] = detail::init_conv<T>(width, width, 3, rng);
    c.enc[2] = detail::init_conv<T>(2 * width, width, 3, rng);
    c.enc[3] = detail::init_conv<T>(4, 2 * width, 3, rng);
    c.dec[0] = detail::init_conv<T>(2 * width, 4, 3, rng);
    c.dec[1] = detail::init_conv<T>(width, 2 * width, 3, rng);
    c.dec[2] = detail::init_conv<T>(width, width, 3, rng);
    c.dec[3] = detail::init_conv<T>(3, width, 3, rng);
    c.set_frozen(true);
    return c;
}

namespace detail {

template <class T>
Tensor<T> tiny_ae_encode(const Codec<T>& c, const Tensor<T>& x) {
    Tensor<T> h = silu(conv2d(x, c.enc[0].w, c.enc[0].b, 1, 1));
    h = silu(conv2d(h, c.enc[1].w, c.enc[1].b, 2, 1));
    h = silu(conv2d(h, c.enc[2].w, c.enc[2].b, 2, 1));
    return conv2d(h, c.enc[3].w, c.enc[3].b, 1, 1);
}

template <class T>
Tensor<T> tiny_ae_decode(const Codec<T>& c, const Tensor<T>& z) {
    Tensor<T> h = silu(conv2d(z, c.dec[0].w, c.dec[0].b, 1, 1));
    h = silu(conv2d(upsample_nearest2x(h), c.dec[1].w, c.dec[1].b, 1, 1));
    h = silu(conv2d(upsample_nearest2x(h), c.dec[2].w, c.dec[2].b, 1, 1));
    return conv2d(h, c.dec[3].w, c.dec[3].b, 1, 1);
}

}  // namespace detail

// Model-range [N,3,H,W] -> latent [N,C_lat,H',W'].
template <class T>
Tensor<T> encode_batch(const Codec<T>& c, const Tensor<T>& image) {
    if (image.rank() != 4 || image.dim(1) != 3)
        throw ShapeError("encode expects [N,3,H,W] model-range images");
    if (image.dim(2) % c.spatial_factor != 0 || image.dim(3) % c.spatial_factor != 0)
        throw ShapeError("encode: spatial dims must be divisible by " +
                         std::to_string(c.spatial_factor));
    if (c.kind == CodecKind::identity) return image;
    Tensor<T> z = detail::tiny_ae_encode(c, image);
    if (c.latent_scale != T(1)) z = scale(z, T(1) / c.latent_scale);
    return z;
}

template <class T>
Tensor<T> decode_batch(const Codec<T>& c, const Tensor<T>& latent) {
    if (latent.rank() != 4 || latent.dim(1) != c.latent_channels)
        throw ShapeError("decode: latent shape " + shape_str(latent.shape()) +
                         " does not match codec with " + std::to_string(c.latent_channels) +
                         " channels");
    if (c.kind == CodecKind::identity) return latent;
    Tensor<T> z = c.latent_scale != T(1) ? scale(latent, c.latent_scale) : latent;
    return detail::tiny_ae_decode(c, z);
}

template <class T>
Tensor<T> encode(const Codec<T>& c, const Tensor<T>& image) {
    if (image.rank() != 3) throw ShapeError("encode expects [3,H,W]");
    Tensor<T> b = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    Tensor<T> z = encode_batch(c, b);
    return reshape(z, {z.dim(1), z.dim(2), z.dim(3)});
}

template <class T>
Tensor<T> decode(const Codec<T>& c, const Tensor<T>& latent) {
    if (latent.rank() != 3) throw ShapeError("decode expects [C,H,W]");
    Tensor<T> b = reshape(latent, {1, latent.dim(0), latent.dim(1), latent.dim(2)});
    Tensor<T> img = decode_batch(c, b);
    return reshape(img, {img.dim(1), img.dim(2), img.dim(3)});
}

// Reconstruction pretraining on [0,1] images, then freezing. Latents are
// rescaled to unit standard deviation over the pretraining set; the scale is
// stored with the codec.
template <class T>
Codec<T> pretrain_tiny_ae(const std::vector<Image>& images, int epochs, uint64_t seed,
                          int width = 16, int batch = 8, double lr = 2e-3) {
    if (images.empty()) throw DataError("pretrain_tiny_ae: empty dataset");
    for (const auto& im : images)
        if (im.channels != 3) throw DataError("pretrain_tiny_ae expects 3-channel images");

    Codec<T> codec = make_tiny_ae<T>(width, seed);
    if (epochs <= 0) {
        // Unusable for stage 2 until pretrained.
        codec.trained = false;
        codec.training_flagged = true;
        codec.set_frozen(true);
        return codec;
    }

    codec.set_frozen(false);
    AdamConfig ocfg;
    ocfg.lr = lr;
    ocfg.warmup_steps = 0;
    Adam<T> opt(codec.parameters(), ocfg);
    Rng order_rng(splitmix64(seed) ^ 0x5eedull);

    double prev_epoch_loss = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<size_t> idx(images.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1], idx[order_rng.uniform_int(static_cast<int64_t>(i))]);

        double epoch_loss = 0;
        int64_t steps = 0;
        for (size_t off = 0; off < idx.size(); off += batch) {
            std::vector<Tensor<T>> items;
            for (size_t k = off; k < std::min(idx.size(), off + batch); ++k)
                items.push_back(to_model_range(image_to_tensor<T>(images[idx[k]])));
            Tensor<T> x = stack0(items);
            Tape<T> tape;
            double loss_val;
            {
                typename Tape<T>::Scope scope(tape);
                Tensor<T> recon = detail::tiny_ae_decode(codec, detail::tiny_ae_encode(codec, x));
                Tensor<T> loss = reduce_mean(square(sub(recon, x)));
                loss_val = static_cast<double>(loss.item());
                if (!std::isfinite(loss_val))
                    throw NumericError("pretrain_tiny_ae: reconstruction loss diverged");
                backward(loss);
            }
            opt.step();
            opt.zero_grad();
            epoch_loss += loss_val;
            ++steps;
        }
        epoch_loss /= std::max<int64_t>(1, steps);
        if (epoch_loss > prev_epoch_loss) codec.training_flagged = true;
        prev_epoch_loss = epoch_loss;
    }

    codec.set_frozen(true);
    codec.trained = true;

    // Unit-variance latent normalization over the pretraining set.
    double sq = 0;
    int64_t n = 0;
    for (const auto& im : images) {
        Tensor<T> z = detail::tiny_ae_encode(codec, reshape(to_model_range(image_to_tensor<T>(im)),
                                                            {1, 3, im.height, im.width}));
        for (T v : z.data()) sq += static_cast<double>(v) * v;
        n += z.numel();
    }
    double std_dev = std::sqrt(sq / std::max<int64_t>(1, n));
    codec.latent_scale = static_cast<T>(std_dev > 0 ? std_dev : 1.0);
    return codec;
}

}  // namespace stainforge
