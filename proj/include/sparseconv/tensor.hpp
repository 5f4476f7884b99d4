#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace sparseconv {

/// Spatial shape of a single activation tensor, channel-last (HWC).
struct Shape {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;

    std::size_t size() const { return height * width * channels; }
    std::size_t positions() const { return height * width; }
    bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& shape);

/// Dense float tensor in height -> width -> channel row-major order.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    std::vector<float>& storage() { return data_; }
    const std::vector<float>& storage() const { return data_; }

    /// Changes the shape, keeping the allocation when it is large enough.
    /// Element values are unspecified afterwards.
    void reshape_for_overwrite(Shape shape) {
        shape_ = shape;
        data_.resize(shape.size());
    }

    std::size_t offset(std::size_t y, std::size_t x, std::size_t c = 0) const {
        return (y * shape_.width + x) * shape_.channels + c;
    }
    float& at(std::size_t y, std::size_t x, std::size_t c) { return data_[offset(y, x, c)]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return data_[offset(y, x, c)]; }

    /// Channel vector at one spatial position.
    std::span<float> pixel(std::size_t y, std::size_t x) {
        return {data_.data() + offset(y, x), shape_.channels};
    }
    std::span<const float> pixel(std::size_t y, std::size_t x) const {
        return {data_.data() + offset(y, x), shape_.channels};
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_{};
    std::vector<float> data_;
};

/// Convolution hyper-parameters. Padding is symmetric zero padding per axis.
struct ConvParams {
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
    std::size_t pad_h = 0;
    std::size_t pad_w = 0;
    std::size_t dilation_h = 1;
    std::size_t dilation_w = 1;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;

    static ConvParams square(std::size_t kernel, std::size_t stride, std::size_t pad,
                             std::size_t in_channels, std::size_t out_channels);

    std::size_t patch_len() const { return kernel_h * kernel_w * in_channels; }

    /// Throws ConfigError if any count is zero.
    void validate() const;

    /// Output shape for an input of `in`; throws ConfigError on channel
    /// mismatch or an empty output grid.
    Shape output_shape(const Shape& in) const;

    bool operator==(const ConvParams&) const = default;
};

/// floor((extent + 2*pad - dilation*(kernel-1) - 1) / stride) + 1, or 0 when
/// the dilated kernel does not fit.
std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                               std::size_t pad, std::size_t dilation);

/// Filters stored as n rows of kernel_h*kernel_w*c, each row unrolled in tap
/// order (kernel row -> kernel col -> channel). Row r is also row r of the
/// GEMM weight matrix.
struct ConvWeights {
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t in_channels = 0;
    std::vector<float> filters;
    std::vector<float> bias;

    ConvWeights() = default;
    explicit ConvWeights(const ConvParams& params);

    std::size_t patch_len() const { return kernel_h * kernel_w * in_channels; }
    std::span<const float> row(std::size_t r) const {
        return {filters.data() + r * patch_len(), patch_len()};
    }
    float& tap(std::size_t n, std::size_t ky, std::size_t kx, std::size_t c) {
        return filters[((n * kernel_h + ky) * kernel_w + kx) * in_channels + c];
    }
    float tap(std::size_t n, std::size_t ky, std::size_t kx, std::size_t c) const {
        return filters[((n * kernel_h + ky) * kernel_w + kx) * in_channels + c];
    }

    /// Throws ConfigError unless dimensions and buffer sizes agree with params.
    void check_against(const ConvParams& params) const;

    bool operator==(const ConvWeights&) const = default;
};

/// Fully connected weights: `outputs` rows of `inputs` columns.
struct FcWeights {
    std::size_t outputs = 0;
    std::size_t inputs = 0;
    std::vector<float> weights;
    std::vector<float> bias;

    bool operator==(const FcWeights&) const = default;
};

enum class PoolKind { max, avg };

/// Naive nested-loop convolution. Accumulates each output in tap order
/// (kernel row -> kernel col -> channel) starting from zero, then adds bias.
Tensor direct_conv2d(const Tensor& input, const ConvWeights& weights, const ConvParams& params);

Tensor relu(const Tensor& t);
void relu_inplace(Tensor& t);

/// Square window pooling without padding.
Tensor pool2d(const Tensor& t, PoolKind kind, std::size_t kernel, std::size_t stride);
void pool2d_into(const Tensor& t, PoolKind kind, std::size_t kernel, std::size_t stride, Tensor& out);

/// Mean over all spatial positions, one value per channel (1x1xC).
Tensor global_avg_pool(const Tensor& t);

Tensor elementwise_add(const Tensor& a, const Tensor& b);

/// y = W x + b.
std::vector<float> fully_connected(std::span<const float> x, const FcWeights& fc);

}  // namespace sparseconv
