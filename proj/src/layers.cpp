#include "punet/layers.hpp"

#include <cmath>

namespace punet {

namespace {

template <typename T>
Tensor<T> normal_tensor(Rng& rng, Shape s, double stddev) {
    Tensor<T> t(s);
    for (Index i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<T>(rng.normal() * stddev);
    }
    return t;
}

}  // namespace

template <typename T>
Conv<T> make_conv(Rng& rng, Index c_in, Index c_out, Index k, int stride, int dilation) {
    if (c_in < 1 || c_out < 1 || k < 1 || k % 2 == 0) {
        throw std::invalid_argument("make_conv: channels must be positive and kernel odd");
    }
    const double fan_in = static_cast<double>(c_in * k * k);
    Conv<T> p;
    p.weight = Var<T>(normal_tensor<T>(rng, Shape{c_out, c_in, k, k}, std::sqrt(2.0 / fan_in)));
    p.bias = Var<T>(Tensor<T>::vector(c_out));
    p.opt.stride = stride;
    p.opt.dilation = dilation;
    p.opt.padding = dilation * static_cast<int>(k - 1) / 2;
    return p;
}

template <typename T>
Linear<T> make_linear(Rng& rng, Index in, Index out) {
    if (in < 1 || out < 1) {
        throw std::invalid_argument("make_linear: dimensions must be positive");
    }
    Linear<T> p;
    p.weight = Var<T>(normal_tensor<T>(rng, Shape::matrix(out, in),
                                       std::sqrt(1.0 / static_cast<double>(in))));
    p.bias = Var<T>(Tensor<T>::vector(out));
    return p;
}

template <typename T>
LayerNormParams<T> make_layer_norm(Index d, double eps) {
    LayerNormParams<T> p;
    p.gamma = Var<T>(Tensor<T>::vector(d, T(1)));
    p.beta = Var<T>(Tensor<T>::vector(d));
    p.eps = eps;
    return p;
}

template <typename T>
BatchNormParams<T> make_batch_norm(Index c) {
    BatchNormParams<T> p;
    p.gamma = Var<T>(Tensor<T>::vector(c, T(1)));
    p.beta = Var<T>(Tensor<T>::vector(c));
    p.state.running_mean = Tensor<T>::vector(c);
    p.state.running_var = Tensor<T>::vector(c, T(1));
    return p;
}

#define PUNET_INSTANTIATE_LAYERS(T)                                          \
    template Conv<T> make_conv(Rng&, Index, Index, Index, int, int);         \
    template Linear<T> make_linear(Rng&, Index, Index);                      \
    template LayerNormParams<T> make_layer_norm(Index, double);              \
    template BatchNormParams<T> make_batch_norm(Index);

PUNET_INSTANTIATE_LAYERS(float)
PUNET_INSTANTIATE_LAYERS(double)

}  // namespace punet
