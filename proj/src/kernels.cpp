#include "tnseg/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <limits>
#include <string>

namespace tnseg::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

std::string axis_msg(const char* what, std::size_t got, std::size_t want) {
    return std::string(what) + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

// Rows [oh0, oh1) of the unfolded input:
// col[(ci*kh + i)*kw + j][(oh - oh0)*wo + ow] = x[ci][oh*s + i - pad][ow*s + j - pad]
void im2col(const double* x, const ConvGeometry& g, std::size_t oh0, std::size_t oh1, double* col) {
    const std::size_t plane = (oh1 - oh0) * g.wo;
#pragma omp parallel for schedule(static) if (g.cin > 1)
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* xc = x + ci * g.h * g.w;
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                double* row = col + ((ci * g.kh + i) * g.kw + j) * plane;
                for (std::size_t oh = oh0; oh < oh1; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + (oh - oh0) * g.wo;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<std::size_t>(ih) * g.w;
                    for (std::size_t ow = 0; ow < g.wo; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[iw];
                    }
                }
            }
        }
    }
}

// Output rows per GEMM tile, sized so the unfolded tile stays in L2.
std::size_t tile_rows(const ConvGeometry& g) {
    constexpr std::size_t kTileBytes = 512 * 1024;
    const std::size_t row_bytes = g.cin * g.kh * g.kw * g.wo * sizeof(double);
    return std::clamp<std::size_t>(kTileBytes / std::max<std::size_t>(row_bytes, 1), 1, g.ho);
}

// Same-padding stride-1 convolutions: the input gradient is a forward convolution of the
// output gradient with the spatially flipped, channel-transposed kernel.
bool is_same_stride1(const ConvGeometry& g) {
    return g.stride == 1 && g.kh == g.kw && g.kh % 2 == 1 && g.pad == g.kh / 2;
}

void col2im(const double* col, const ConvGeometry& g, double* dx) {
    const std::size_t plane = g.ho * g.wo;
#pragma omp parallel for schedule(static) if (g.cin > 1)
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        double* dxc = dx + ci * g.h * g.w;
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const double* row = col + ((ci * g.kh + i) * g.kw + j) * plane;
                for (std::size_t oh = 0; oh < g.ho; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    double* dst = dxc + static_cast<std::size_t>(ih) * g.w;
                    const double* src = row + oh * g.wo;
                    for (std::size_t ow = 0; ow < g.wo; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

void check_pool_shape(const Shape& s, std::size_t k) {
    if (s.size() != 4) throw ShapeError("pooling expects a rank-4 tensor, got " + shape_str(s));
    if (k == 0) throw ShapeError("pooling factor must be positive");
    if (s[2] % k != 0) throw ShapeError("height (axis 2) " + std::to_string(s[2]) + " not divisible by " + std::to_string(k));
    if (s[3] % k != 0) throw ShapeError("width (axis 3) " + std::to_string(s[3]) + " not divisible by " + std::to_string(k));
}

}  // namespace

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, const Shape& bias, std::size_t stride,
                           std::size_t pad) {
    if (input.size() != 4) throw ShapeError("conv2d input must be rank 4 [N,Cin,H,W], got " + shape_str(input));
    if (kernel.size() != 4) throw ShapeError("conv2d kernel must be rank 4 [Cout,Cin,kh,kw], got " + shape_str(kernel));
    if (kernel[1] != input[1]) throw ShapeError("conv2d channel axis 1: " + axis_msg("kernel Cin", kernel[1], input[1]));
    if (bias.size() != 1 || bias[0] != kernel[0]) {
        throw ShapeError("conv2d bias axis 0: expected [" + std::to_string(kernel[0]) + "], got " + shape_str(bias));
    }
    if (stride == 0) throw ShapeError("conv2d stride must be >= 1");
    if (kernel[2] > input[2] + 2 * pad) throw ShapeError("conv2d axis 2: kernel height exceeds padded input height");
    if (kernel[3] > input[3] + 2 * pad) throw ShapeError("conv2d axis 3: kernel width exceeds padded input width");
    ConvGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
    g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
    return g;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      std::size_t pad) {
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), bias.shape(), stride, pad);
    const std::size_t K = g.cin * g.kh * g.kw;
    const std::size_t P = g.ho * g.wo;
    Tensor out(Shape{g.n, g.cout, g.ho, g.wo});
    const bool pointwise = is_pointwise(g);
    const std::size_t rows = pointwise ? g.ho : tile_rows(g);
    Buffer col(pointwise ? 0 : K * rows * g.wo);
    ConstMapMat W(kernel.ptr(), g.cout, K);
    for (std::size_t n = 0; n < g.n; ++n) {
        const double* xn = input.ptr() + n * g.cin * g.h * g.w;
        double* yn = out.ptr() + n * g.cout * P;
        if (pointwise) {
            MapMat(yn, g.cout, P).noalias() = W * ConstMapMat(xn, K, P);
        } else {
            for (std::size_t oh0 = 0; oh0 < g.ho; oh0 += rows) {
                const std::size_t oh1 = std::min(g.ho, oh0 + rows);
                const std::size_t cols = (oh1 - oh0) * g.wo;
                im2col(xn, g, oh0, oh1, col.data());
                // Output tile is a column block of the [Cout, P] plane.
                Eigen::Map<RowMat, 0, Eigen::OuterStride<>> Y(yn + oh0 * g.wo, g.cout, cols, Eigen::OuterStride<>(P));
                Y.noalias() = W * ConstMapMat(col.data(), K, cols);
            }
        }
        MapMat Y(yn, g.cout, P);
        for (std::size_t co = 0; co < g.cout; ++co) Y.row(co).array() += bias[co];
    }
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad, bool need_input_grad) {
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), Shape{kernel.dim(0)}, stride, pad);
    if (grad_out.shape() != Shape{g.n, g.cout, g.ho, g.wo}) {
        throw ShapeError("conv2d backward: grad shape " + shape_str(grad_out.shape()) + " does not match output");
    }
    const std::size_t K = g.cin * g.kh * g.kw;
    const std::size_t P = g.ho * g.wo;
    ConvGrads grads;
    grads.kernel = Tensor(kernel.shape());
    grads.bias = Tensor(Shape{g.cout});

    const bool pointwise = is_pointwise(g);
    const std::size_t rows = pointwise ? g.ho : tile_rows(g);
    Buffer col(pointwise ? 0 : K * rows * g.wo);
    MapMat dW(grads.kernel.ptr(), g.cout, K);
    for (std::size_t n = 0; n < g.n; ++n) {
        const double* xn = input.ptr() + n * g.cin * g.h * g.w;
        const double* dyn = grad_out.ptr() + n * g.cout * P;
        if (pointwise) {
            dW.noalias() += ConstMapMat(dyn, g.cout, P) * ConstMapMat(xn, K, P).transpose();
        } else {
            for (std::size_t oh0 = 0; oh0 < g.ho; oh0 += rows) {
                const std::size_t oh1 = std::min(g.ho, oh0 + rows);
                const std::size_t cols = (oh1 - oh0) * g.wo;
                im2col(xn, g, oh0, oh1, col.data());
                Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> dY(dyn + oh0 * g.wo, g.cout, cols,
                                                                     Eigen::OuterStride<>(P));
                dW.noalias() += dY * ConstMapMat(col.data(), K, cols).transpose();
            }
        }
        ConstMapMat dY(dyn, g.cout, P);
        for (std::size_t co = 0; co < g.cout; ++co) grads.bias[co] += dY.row(co).sum();
    }
    if (!need_input_grad) return grads;

    if (is_same_stride1(g) && !pointwise) {
        Tensor flipped(Shape{g.cin, g.cout, g.kh, g.kw});
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t ci = 0; ci < g.cin; ++ci)
                for (std::size_t i = 0; i < g.kh; ++i)
                    for (std::size_t j = 0; j < g.kw; ++j)
                        flipped.at(ci, co, g.kh - 1 - i, g.kw - 1 - j) = kernel.at(co, ci, i, j);
        grads.input = conv2d_forward(grad_out, flipped, Tensor(Shape{g.cin}), 1, g.pad);
        return grads;
    }

    grads.input = Tensor(input.shape());
    ConstMapMat W(kernel.ptr(), g.cout, K);
    Buffer dcol(pointwise ? 0 : K * P);
    for (std::size_t n = 0; n < g.n; ++n) {
        ConstMapMat dY(grad_out.ptr() + n * g.cout * P, g.cout, P);
        double* dxn = grads.input.ptr() + n * g.cin * g.h * g.w;
        if (pointwise) {
            MapMat(dxn, K, P).noalias() = W.transpose() * dY;
        } else {
            MapMat(dcol.data(), K, P).noalias() = W.transpose() * dY;
            col2im(dcol.data(), g, dxn);
        }
    }
    return grads;
}

ChannelMoments channel_moments(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("channel statistics expect [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const double count = static_cast<double>(N * HW);
    ChannelMoments m{std::vector<double>(C), std::vector<double>(C)};
#pragma omp parallel for schedule(static) if (C > 1)
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const double* p = x.ptr() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) s += p[i];
        }
        const double mean = s / count;
        double ss = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const double* p = x.ptr() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                const double d = p[i] - mean;
                ss += d * d;
            }
        }
        m.mean[c] = mean;
        m.var[c] = ss / count;
    }
    return m;
}

PoolResult maxpool2d_forward(const Tensor& x, std::size_t k) {
    check_pool_shape(x.shape(), k);
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H / k, Wo = W / k;
    PoolResult r{Tensor(Shape{N, C, Ho, Wo}), std::vector<std::size_t>(N * C * Ho * Wo)};
#pragma omp parallel for schedule(static)
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        for (std::size_t i = 0; i < Ho; ++i) {
            for (std::size_t j = 0; j < Wo; ++j) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t arg = 0;
                for (std::size_t a = 0; a < k; ++a) {
                    for (std::size_t b = 0; b < k; ++b) {
                        const std::size_t idx = (nc * H + i * k + a) * W + j * k + b;
                        if (x[idx] > best) {
                            best = x[idx];
                            arg = idx;
                        }
                    }
                }
                const std::size_t o = (nc * Ho + i) * Wo + j;
                r.out[o] = best;
                r.argmax[o] = arg;
            }
        }
    }
    return r;
}

Tensor maxpool2d_backward(const Shape& in_shape, const std::vector<std::size_t>& argmax, const Tensor& grad_out) {
    Tensor dx(in_shape);
    // Windows do not overlap, so each input index receives at most one contribution.
    for (std::size_t o = 0; o < grad_out.size(); ++o) dx[argmax[o]] += grad_out[o];
    return dx;
}

Tensor avgpool2d_forward(const Tensor& x, std::size_t k) {
    check_pool_shape(x.shape(), k);
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H / k, Wo = W / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor out(Shape{N, C, Ho, Wo});
#pragma omp parallel for schedule(static)
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        for (std::size_t i = 0; i < Ho; ++i) {
            for (std::size_t j = 0; j < Wo; ++j) {
                double s = 0.0;
                for (std::size_t a = 0; a < k; ++a) {
                    for (std::size_t b = 0; b < k; ++b) s += x[(nc * H + i * k + a) * W + j * k + b];
                }
                out[(nc * Ho + i) * Wo + j] = s * inv;
            }
        }
    }
    return out;
}

Tensor avgpool2d_backward(const Shape& in_shape, const Tensor& grad_out, std::size_t k) {
    const std::size_t NC = in_shape[0] * in_shape[1], H = in_shape[2], W = in_shape[3];
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor dx(in_shape);
#pragma omp parallel for schedule(static)
    for (std::size_t nc = 0; nc < NC; ++nc) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                dx[(nc * H + h) * W + w] = grad_out[(nc * (H / k) + h / k) * (W / k) + w / k] * inv;
            }
        }
    }
    return dx;
}

Tensor upsample_nearest_forward(const Tensor& x, std::size_t k) {
    if (x.rank() != 4) throw ShapeError("upsample expects a rank-4 tensor, got " + shape_str(x.shape()));
    if (k == 0) throw ShapeError("upsample factor must be positive");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out(Shape{x.dim(0), x.dim(1), H * k, W * k});
    const std::size_t Ho = H * k, Wo = W * k;
#pragma omp parallel for schedule(static)
    for (std::size_t nc = 0; nc < NC; ++nc) {
        for (std::size_t h = 0; h < Ho; ++h) {
            for (std::size_t w = 0; w < Wo; ++w) out[(nc * Ho + h) * Wo + w] = x[(nc * H + h / k) * W + w / k];
        }
    }
    return out;
}

Tensor upsample_nearest_backward(const Shape& in_shape, const Tensor& grad_out, std::size_t k) {
    const std::size_t NC = in_shape[0] * in_shape[1], H = in_shape[2], W = in_shape[3];
    const std::size_t Ho = H * k, Wo = W * k;
    Tensor dx(in_shape);
#pragma omp parallel for schedule(static)
    for (std::size_t nc = 0; nc < NC; ++nc) {
        for (std::size_t h = 0; h < Ho; ++h) {
            for (std::size_t w = 0; w < Wo; ++w) dx[(nc * H + h / k) * W + w / k] += grad_out[(nc * Ho + h) * Wo + w];
        }
    }
    return dx;
}

namespace reference {

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      std::size_t pad) {
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), bias.shape(), stride, pad);
    Tensor out(Shape{g.n, g.cout, g.ho, g.wo});
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t co = 0; co < g.cout; ++co) {
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
                for (std::size_t ow = 0; ow < g.wo; ++ow) {
                    double acc = bias[co];
                    for (std::size_t ci = 0; ci < g.cin; ++ci) {
                        for (std::size_t i = 0; i < g.kh; ++i) {
                            for (std::size_t j = 0; j < g.kw; ++j) {
                                const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
                                const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.h) || iw >= static_cast<long>(g.w)) {
                                    continue;
                                }
                                acc += kernel.at(co, ci, i, j) * input.at(n, ci, ih, iw);
                            }
                        }
                    }
                    out.at(n, co, oh, ow) = acc;
                }
            }
        }
    }
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad) {
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), Shape{kernel.dim(0)}, stride, pad);
    ConvGrads grads{Tensor(input.shape()), Tensor(kernel.shape()), Tensor(Shape{g.cout})};
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t co = 0; co < g.cout; ++co) {
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
                for (std::size_t ow = 0; ow < g.wo; ++ow) {
                    const double dy = grad_out.at(n, co, oh, ow);
                    grads.bias[co] += dy;
                    for (std::size_t ci = 0; ci < g.cin; ++ci) {
                        for (std::size_t i = 0; i < g.kh; ++i) {
                            for (std::size_t j = 0; j < g.kw; ++j) {
                                const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
                                const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.h) || iw >= static_cast<long>(g.w)) {
                                    continue;
                                }
                                grads.kernel.at(co, ci, i, j) += dy * input.at(n, ci, ih, iw);
                                grads.input.at(n, ci, ih, iw) += dy * kernel.at(co, ci, i, j);
                            }
                        }
                    }
                }
            }
        }
    }
    return grads;
}

ChannelMoments channel_moments(const Tensor& x) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    ChannelMoments m{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
    const double count = static_cast<double>(N * H * W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) m.mean[c] += x.at(n, c, h, w);
        m.mean[c] /= count;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    const double d = x.at(n, c, h, w) - m.mean[c];
                    m.var[c] += d * d;
                }
        m.var[c] /= count;
    }
    return m;
}

}  // namespace reference

}  // namespace tnseg::kernels
