#pragma once

// Raw tensor kernels behind the autograd ops. The top-level namespace holds the
// OpenMP/GEMM kernels used for training; `reference` holds straightforward serial
// loops that the tests and the benchmark compare against.

#include <cstddef>
#include <vector>

#include "tnseg/tensor.hpp"

namespace tnseg::kernels {

struct ConvGeometry {
    std::size_t n, cin, h, w;
    std::size_t cout, kh, kw;
    std::size_t stride, pad;
    std::size_t ho, wo;
};

/// Validates shapes and computes the output extents. Throws ShapeError naming the axis.
ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, const Shape& bias, std::size_t stride,
                           std::size_t pad);

struct ConvGrads {
    Tensor input;   // empty when not requested
    Tensor kernel;
    Tensor bias;
};

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      std::size_t pad);
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad, bool need_input_grad);

/// Per-channel mean and biased variance over (N,H,W).
struct ChannelMoments {
    std::vector<double> mean;
    std::vector<double> var;
};
ChannelMoments channel_moments(const Tensor& x);

struct PoolResult {
    Tensor out;
    std::vector<std::size_t> argmax;  // flat input index per output element (max pooling only)
};
PoolResult maxpool2d_forward(const Tensor& x, std::size_t k);
Tensor maxpool2d_backward(const Shape& in_shape, const std::vector<std::size_t>& argmax, const Tensor& grad_out);
Tensor avgpool2d_forward(const Tensor& x, std::size_t k);
Tensor avgpool2d_backward(const Shape& in_shape, const Tensor& grad_out, std::size_t k);
Tensor upsample_nearest_forward(const Tensor& x, std::size_t k);
Tensor upsample_nearest_backward(const Shape& in_shape, const Tensor& grad_out, std::size_t k);

namespace reference {

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      std::size_t pad);
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad);
ChannelMoments channel_moments(const Tensor& x);

}  // namespace reference

}  // namespace tnseg::kernels
