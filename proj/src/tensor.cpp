#include "sparseconv/tensor.hpp"

#include <algorithm>
#include <limits>

#include "sparseconv/error.hpp"

namespace sparseconv {

std::string to_string(const Shape& shape) {
    return std::to_string(shape.height) + "x" + std::to_string(shape.width) + "x" +
           std::to_string(shape.channels);
}

Tensor::Tensor(Shape shape) : shape_(shape), data_(shape.size(), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
        throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + to_string(shape_));
    }
}

ConvParams ConvParams::square(std::size_t kernel, std::size_t stride, std::size_t pad,
                              std::size_t in_channels, std::size_t out_channels) {
    ConvParams p;
    p.kernel_h = p.kernel_w = kernel;
    p.stride_h = p.stride_w = stride;
    p.pad_h = p.pad_w = pad;
    p.in_channels = in_channels;
    p.out_channels = out_channels;
    return p;
}

void ConvParams::validate() const {
    if (kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0 || dilation_h == 0 ||
        dilation_w == 0 || in_channels == 0 || out_channels == 0) {
        throw ConfigError("conv parameters must all be >= 1 (padding excepted)");
    }
}

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                               std::size_t pad, std::size_t dilation) {
    const std::size_t span = dilation * (kernel - 1) + 1;
    const std::size_t padded = extent + 2 * pad;
    if (padded < span) return 0;
    return (padded - span) / stride + 1;
}

Shape ConvParams::output_shape(const Shape& in) const {
    validate();
    if (in.channels != in_channels) {
        throw ConfigError("conv expects " + std::to_string(in_channels) + " input channels, got " +
                          to_string(in));
    }
    const std::size_t oh = conv_output_extent(in.height, kernel_h, stride_h, pad_h, dilation_h);
    const std::size_t ow = conv_output_extent(in.width, kernel_w, stride_w, pad_w, dilation_w);
    if (oh == 0 || ow == 0) {
        throw ConfigError("conv kernel does not fit input " + to_string(in));
    }
    return {oh, ow, out_channels};
}

ConvWeights::ConvWeights(const ConvParams& params)
    : out_channels(params.out_channels),
      kernel_h(params.kernel_h),
      kernel_w(params.kernel_w),
      in_channels(params.in_channels),
      filters(params.out_channels * params.patch_len(), 0.0f),
      bias(params.out_channels, 0.0f) {}

void ConvWeights::check_against(const ConvParams& params) const {
    if (out_channels != params.out_channels || kernel_h != params.kernel_h ||
        kernel_w != params.kernel_w || in_channels != params.in_channels ||
        filters.size() != out_channels * patch_len() || bias.size() != out_channels) {
        throw ConfigError("conv weights do not match conv parameters");
    }
}

Tensor direct_conv2d(const Tensor& input, const ConvWeights& weights, const ConvParams& params) {
    const Shape out_shape = params.output_shape(input.shape());
    weights.check_against(params);
    const Shape& in = input.shape();
    Tensor out(out_shape);

    for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
            for (std::size_t n = 0; n < out_shape.channels; ++n) {
                float acc = 0.0f;
                for (std::size_t ky = 0; ky < params.kernel_h; ++ky) {
                    // Signed arithmetic: taps may fall into the padding band.
                    const auto iy = static_cast<std::ptrdiff_t>(oy * params.stride_h + ky * params.dilation_h) -
                                    static_cast<std::ptrdiff_t>(params.pad_h);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.height)) continue;
                    for (std::size_t kx = 0; kx < params.kernel_w; ++kx) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * params.stride_w + kx * params.dilation_w) -
                                        static_cast<std::ptrdiff_t>(params.pad_w);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.width)) continue;
                        const float* px = input.data() + input.offset(static_cast<std::size_t>(iy),
                                                                      static_cast<std::size_t>(ix));
                        for (std::size_t c = 0; c < in.channels; ++c) {
                            acc += px[c] * weights.tap(n, ky, kx, c);
                        }
                    }
                }
                out.at(oy, ox, n) = acc + weights.bias[n];
            }
        }
    }
    return out;
}

Tensor relu(const Tensor& t) {
    Tensor out = t;
    relu_inplace(out);
    return out;
}

void relu_inplace(Tensor& t) {
    for (float& v : t.values()) v = v > 0.0f ? v : 0.0f;
}

Tensor pool2d(const Tensor& t, PoolKind kind, std::size_t kernel, std::size_t stride) {
    Tensor out;
    pool2d_into(t, kind, kernel, stride, out);
    return out;
}

void pool2d_into(const Tensor& t, PoolKind kind, std::size_t kernel, std::size_t stride, Tensor& out) {
    const Shape& in = t.shape();
    if (kernel == 0 || stride == 0) throw ConfigError("pool kernel and stride must be >= 1");
    if (kernel > in.height || kernel > in.width) {
        throw ConfigError("pool kernel " + std::to_string(kernel) + " larger than input " +
                          to_string(in));
    }
    const Shape out_shape{conv_output_extent(in.height, kernel, stride, 0, 1),
                          conv_output_extent(in.width, kernel, stride, 0, 1), in.channels};
    out.reshape_for_overwrite(out_shape);
    const std::size_t channels = in.channels;
    const float inv_area = 1.0f / static_cast<float>(kernel * kernel);

    for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
            float* dst = out.data() + out.offset(oy, ox);
            std::fill_n(dst, channels, kind == PoolKind::max ? -std::numeric_limits<float>::infinity() : 0.0f);
            for (std::size_t ky = 0; ky < kernel; ++ky) {
                for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const float* src = t.data() + t.offset(oy * stride + ky, ox * stride + kx);
                    if (kind == PoolKind::max) {
                        for (std::size_t c = 0; c < channels; ++c) dst[c] = std::max(dst[c], src[c]);
                    } else {
                        for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
                    }
                }
            }
            if (kind == PoolKind::avg) {
                for (std::size_t c = 0; c < channels; ++c) dst[c] *= inv_area;
            }
        }
    }
}

Tensor global_avg_pool(const Tensor& t) {
    const Shape& in = t.shape();
    Tensor out(Shape{1, 1, in.channels});
    for (std::size_t p = 0; p < in.positions(); ++p) {
        for (std::size_t c = 0; c < in.channels; ++c) out.data()[c] += t.data()[p * in.channels + c];
    }
    const float inv = 1.0f / static_cast<float>(in.positions());
    for (float& v : out.values()) v *= inv;
    return out;
}

Tensor elementwise_add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ConfigError("elementwise_add shape mismatch: " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
    }
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

std::vector<float> fully_connected(std::span<const float> x, const FcWeights& fc) {
    if (x.size() != fc.inputs || fc.weights.size() != fc.inputs * fc.outputs ||
        fc.bias.size() != fc.outputs) {
        throw ConfigError("fully_connected dimension mismatch: input length " +
                          std::to_string(x.size()) + ", weights " + std::to_string(fc.outputs) +
                          "x" + std::to_string(fc.inputs));
    }
    std::vector<float> y(fc.outputs);
    for (std::size_t o = 0; o < fc.outputs; ++o) {
        const float* row = fc.weights.data() + o * fc.inputs;
        float acc = 0.0f;
        for (std::size_t i = 0; i < fc.inputs; ++i) acc += row[i] * x[i];
        y[o] = acc + fc.bias[o];
    }
    return y;
}

}  // namespace sparseconv
