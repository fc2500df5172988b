#pragma once

#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "stainforge/image.hpp"

namespace stainforge {

struct LoadedImage {
    Image image;
    int bit_depth = 8;
};

// Reads PNG (8/16-bit) and TIFF; grayscale or RGB(A). Values normalized to
// [0,1] by the stored bit depth.
inline LoadedImage load_image(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (m.empty()) throw DataError("cannot read image '" + path + "'");
    int depth = m.depth();
    if (depth != CV_8U && depth != CV_16U)
        throw DataError("unsupported sample type in '" + path + "' (need 8- or 16-bit unsigned)");
    const int bit_depth = depth == CV_8U ? 8 : 16;
    const float scale = 1.0f / ((1 << bit_depth) - 1);
    int in_ch = m.channels();
    int out_ch = in_ch >= 3 ? 3 : 1;

    LoadedImage out;
    out.bit_depth = bit_depth;
    out.image = Image::zeros(out_ch, m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y) {
        for (int x = 0; x < m.cols; ++x) {
            for (int c = 0; c < out_ch; ++c) {
                // OpenCV stores BGR; flip to RGB on the way in.
                int src_c = out_ch == 3 ? 2 - c : 0;
                float v;
                if (bit_depth == 8)
                    v = m.ptr<uint8_t>(y)[x * in_ch + src_c] * scale;
                else
                    v = m.ptr<uint16_t>(y)[x * in_ch + src_c] * scale;
                out.image.at(c, y, x) = v;
            }
        }
    }
    return out;
}

inline void save_png(const std::string& path, const Image& im, int bit_depth = 8) {
    if (bit_depth != 8 && bit_depth != 16) throw DataError("PNG bit depth must be 8 or 16");
    if (im.channels != 1 && im.channels != 3)
        throw DataError("PNG writer expects 1 or 3 channels");
    cv::Mat m(im.height, im.width,
              bit_depth == 8 ? CV_8UC(im.channels) : CV_16UC(im.channels));
    for (int y = 0; y < im.height; ++y) {
        for (int x = 0; x < im.width; ++x) {
            for (int c = 0; c < im.channels; ++c) {
                int dst_c = im.channels == 3 ? 2 - c : 0;  // RGB -> BGR
                int64_t q = quantize(im.at(c, y, x), bit_depth);
                if (bit_depth == 8)
                    m.ptr<uint8_t>(y)[x * im.channels + dst_c] = static_cast<uint8_t>(q);
                else
                    m.ptr<uint16_t>(y)[x * im.channels + dst_c] = static_cast<uint16_t>(q);
            }
        }
    }
    if (!cv::imwrite(path, m)) throw DataError("cannot write image '" + path + "'");
}

}  // namespace stainforge
