#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "sparseconv/mask.hpp"
#include "sparseconv/tensor.hpp"

namespace sparseconv {

/// Tap reference that falls into the zero padding band.
inline constexpr std::uint32_t kPadTap = std::numeric_limits<std::uint32_t>::max();

struct OutputPosition {
    std::uint32_t y = 0;
    std::uint32_t x = 0;
    bool operator==(const OutputPosition&) const = default;
};

/// Sparse im2col in indirection form. For every kept output position (in
/// row-major output order) it stores kernel_h*kernel_w element offsets into
/// the input tensor, each pointing at the start of a tap's channel vector,
/// or kPadTap for taps in the padding band.
struct IndirectionBuffer {
    Shape input_shape;
    Shape output_shape;
    ConvParams params;
    std::vector<OutputPosition> retained_positions;
    std::vector<std::uint32_t> taps;

    std::size_t retained_count() const { return retained_positions.size(); }
    std::size_t taps_per_position() const { return params.kernel_h * params.kernel_w; }
    std::size_t patch_len() const { return params.patch_len(); }
    std::span<const std::uint32_t> taps_for(std::size_t column) const {
        return {taps.data() + column * taps_per_position(), taps_per_position()};
    }
};

/// `mask == nullptr` behaves as an all-ones mask. Throws ConfigError when the
/// mask grid differs from the conv output grid.
IndirectionBuffer build_indirection(const Shape& input_shape, const ConvParams& params,
                                    const SpatialMask* mask);

/// patch_len x columns activation matrix. Each column (one kept output
/// position) is stored contiguously: element (t, j) is data[j * patch_len + t].
struct PackedActivations {
    std::size_t patch_len = 0;
    std::size_t columns = 0;
    std::vector<float> data;

    float at(std::size_t t, std::size_t j) const { return data[j * patch_len + t]; }
    std::span<const float> column(std::size_t j) const {
        return {data.data() + j * patch_len, patch_len};
    }
};

/// Gathers every retained column in tap order. Reuses `out`'s storage.
void pack_columns(const Tensor& input, const IndirectionBuffer& buf, PackedActivations& out);
PackedActivations pack_columns(const Tensor& input, const IndirectionBuffer& buf);

/// Conv weights re-laid out for the GEMM: panels of kPanelWidth output
/// channels, each panel stored tap-major (patch_len x kPanelWidth). The last
/// panel is zero-filled past out_channels.
struct PackedWeights {
    static constexpr std::size_t kPanelWidth = 16;

    std::size_t out_channels = 0;
    std::size_t patch_len = 0;
    std::vector<float> panels;
    std::vector<float> bias;

    std::size_t panel_count() const { return (out_channels + kPanelWidth - 1) / kPanelWidth; }
};

PackedWeights pack_weights(const ConvWeights& weights);

/// Multiply-accumulate instrumentation for the GEMM.
struct GemmStats {
    std::uint64_t macs = 0;
    std::uint64_t calls = 0;
};

/// Result of the column-reduced GEMM. Logically an n x columns matrix; stored
/// position-major so each column's n outputs are contiguous, which is the
/// layout the channel-last output tensor and the in-place scatter expect.
struct CompactOutput {
    std::size_t out_channels = 0;
    std::size_t columns = 0;
    std::vector<float> data;

    float at(std::size_t i, std::size_t j) const { return data[j * out_channels + i]; }
};

/// C[i][j] = sum_t W[i][t] * A[t][j] + bias[i], written position-major into
/// the first columns*out_channels floats of `out`. Each element accumulates
/// from zero in ascending t, then adds bias, regardless of blocking or
/// thread count. `threads` > 1 splits output-channel panels across threads.
void low_rank_gemm(const PackedWeights& weights, const PackedActivations& activations,
                   std::span<float> out, GemmStats* stats = nullptr, std::size_t threads = 1);
CompactOutput low_rank_gemm(const ConvWeights& weights, const PackedActivations& activations,
                            GemmStats* stats = nullptr);

/// Zero insertion in place. `storage` holds out_h*out_w*channels floats whose
/// first `retained` channel vectors are the compact GEMM columns. Walks output
/// positions from last to first: masked positions are zero-filled, kept ones
/// take the next unconsumed compact column from the back. Aborts if
/// `retained` differs from the mask's kept count.
void scatter_zeros_inplace(std::span<float> storage, std::size_t channels,
                           const SpatialMask& mask, std::size_t retained);

Tensor scatter_zeros(const CompactOutput& compact, const SpatialMask& mask);

/// Prepared sparse (or dense, with no mask) convolution for a fixed input
/// shape and mask: indirection and packed weights are built once; `run`
/// reuses the plan's scratch, so a plan must not be run concurrently.
class SparseConvPlan {
public:
    SparseConvPlan(const Shape& input_shape, const ConvParams& params, const ConvWeights& weights,
                   const SpatialMask* mask);

    void run(const Tensor& input, Tensor& output, GemmStats* stats = nullptr,
             std::size_t threads = 1);
    Tensor run(const Tensor& input, GemmStats* stats = nullptr, std::size_t threads = 1);

    const IndirectionBuffer& indirection() const { return indirection_; }
    const PackedWeights& weights() const { return weights_; }
    bool has_mask() const { return has_mask_; }

private:
    IndirectionBuffer indirection_;
    PackedWeights weights_;
    SpatialMask mask_;
    bool has_mask_ = false;
    PackedActivations scratch_;
};

/// Column-skipping convolution: indirection im2col, low-rank GEMM, then zero
/// insertion. Masked output positions are exactly +0.0 (no bias).
Tensor sparse_conv2d(const Tensor& input, const ConvWeights& weights, const ConvParams& params,
                     const SpatialMask* mask, GemmStats* stats = nullptr);

}  // namespace sparseconv
