#pragma once

#include <cmath>
#include <cstdint>

#include "stainforge/tensor.hpp"

namespace stainforge {

template <class T>
struct ConvParam {
    Tensor<T> w, b;
};

template <class T>
struct NormParam {
    Tensor<T> gain, shift;
};

template <class T>
struct DenseParam {
    Tensor<T> w, b;  // w is [in, out]
};

namespace detail {

template <class T>
Tensor<T> kaiming_conv(Shape shape, Rng& rng) {
    int64_t fan_in = shape[1] * shape[2] * shape[3];
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    return Tensor<T>::randn(std::move(shape), rng, stddev);
}

template <class T>
Tensor<T> kaiming_dense(int64_t in, int64_t out, Rng& rng) {
    double stddev = std::sqrt(2.0 / static_cast<double>(in));
    return Tensor<T>::randn({in, out}, rng, stddev);
}

template <class T>
ConvParam<T> init_conv(int64_t co, int64_t ci, int64_t k, Rng& rng) {
    return {kaiming_conv<T>({co, ci, k, k}, rng), Tensor<T>::zeros({co})};
}

template <class T>
DenseParam<T> init_dense(int64_t in, int64_t out, Rng& rng) {
    return {kaiming_dense<T>(in, out, rng), Tensor<T>::zeros({out})};
}

template <class T>
NormParam<T> init_norm(int64_t c) {
    return {Tensor<T>::filled({c}, T(1)), Tensor<T>::zeros({c})};
}

template <class T>
Tensor<T> dense_fwd(const Tensor<T>& x, const DenseParam<T>& d) {
    return add(matmul(x, d.w), reshape(d.b, {1, d.b.numel()}));
}

}  // namespace detail

}  // namespace stainforge
