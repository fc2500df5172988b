#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stainforge/tensor.hpp"

namespace stainforge {

// Channels-first float image with values in [0,1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> pix;  // CHW

    static Image zeros(int c, int h, int w) {
        Image im;
        im.channels = c;
        im.height = h;
        im.width = w;
        im.pix.assign(static_cast<size_t>(c) * h * w, 0.0f);
        return im;
    }

    float& at(int c, int y, int x) { return pix[(static_cast<size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const {
        return pix[(static_cast<size_t>(c) * height + y) * width + x];
    }

    int64_t pixel_count() const { return static_cast<int64_t>(height) * width; }
    bool same_dims(const Image& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

template <class T>
Tensor<T> image_to_tensor(const Image& im) {
    std::vector<T> v(im.pix.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(im.pix[i]);
    return Tensor<T>::from_data({im.channels, im.height, im.width}, std::move(v));
}

template <class T>
Image tensor_to_image(const Tensor<T>& t) {
    if (t.rank() != 3) throw ShapeError("tensor_to_image expects [C,H,W]");
    Image im = Image::zeros(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)),
                            static_cast<int>(t.dim(2)));
    for (size_t i = 0; i < im.pix.size(); ++i) im.pix[i] = static_cast<float>(t.raw()[i]);
    return im;
}

template <class T>
void clamp_values(Tensor<T>& t, T lo, T hi) {
    for (T& v : t.data()) v = std::min(hi, std::max(lo, v));
}

inline int64_t quantize(float v, int bit_depth) {
    int64_t maxv = (int64_t(1) << bit_depth) - 1;
    double q = std::lround(std::min(1.0f, std::max(0.0f, v)) * static_cast<double>(maxv));
    return static_cast<int64_t>(q);
}

// Fixed pseudo-color palette; marker index i maps to hue i (wraps past 12).
inline std::array<float, 3> marker_color(int index) {
    static const std::array<std::array<float, 3>, 12> palette = {{
        {0.10f, 0.35f, 1.00f},  // blue
        {0.10f, 0.90f, 0.20f},  // green
        {1.00f, 0.15f, 0.15f},  // red
        {1.00f, 0.90f, 0.10f},  // yellow
        {1.00f, 0.20f, 1.00f},  // magenta
        {0.10f, 0.95f, 0.95f},  // cyan
        {1.00f, 0.55f, 0.10f},  // orange
        {0.95f, 0.95f, 0.95f},  // white
        {0.60f, 0.25f, 0.95f},  // purple
        {0.20f, 1.00f, 0.60f},  // spring green
        {1.00f, 0.50f, 0.70f},  // pink
        {0.15f, 0.60f, 0.55f},  // teal
    }};
    return palette[index % palette.size()];
}

// Additive pseudo-color composite of single-channel marker images.
inline Image compose_overlay(const std::vector<Image>& markers) {
    if (markers.empty()) throw DataError("overlay needs at least one marker image");
    Image out = Image::zeros(3, markers[0].height, markers[0].width);
    for (size_t m = 0; m < markers.size(); ++m) {
        const Image& im = markers[m];
        if (im.channels != 1 || im.height != out.height || im.width != out.width)
            throw ShapeError("overlay inputs must be single-channel and equally sized");
        auto color = marker_color(static_cast<int>(m));
        for (int c = 0; c < 3; ++c)
            for (int64_t i = 0; i < im.pixel_count(); ++i)
                out.pix[c * im.pixel_count() + i] += color[c] * im.pix[i];
    }
    for (float& v : out.pix) v = std::min(1.0f, v);
    return out;
}

}  // namespace stainforge
