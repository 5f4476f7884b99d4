#include "sparseconv/sparse_conv.hpp"

#include <algorithm>
#include <cstring>
#include <string>
#include <thread>

#include "sparseconv/error.hpp"

namespace sparseconv {

IndirectionBuffer build_indirection(const Shape& input_shape, const ConvParams& params,
                                    const SpatialMask* mask) {
    IndirectionBuffer buf;
    buf.input_shape = input_shape;
    buf.params = params;
    buf.output_shape = params.output_shape(input_shape);
    if (input_shape.size() >= kPadTap) throw ConfigError("input tensor too large for indirection");

    const Shape& out = buf.output_shape;
    if (mask != nullptr && (mask->height != out.height || mask->width != out.width ||
                            mask->bits.size() != out.positions())) {
        throw ConfigError("mask " + std::to_string(mask->height) + "x" + std::to_string(mask->width) +
                          " does not match conv output grid " + std::to_string(out.height) + "x" +
                          std::to_string(out.width));
    }

    const std::size_t kept = mask != nullptr ? mask->kept_count() : out.positions();
    buf.retained_positions.reserve(kept);
    buf.taps.reserve(kept * buf.taps_per_position());

    const auto in_h = static_cast<std::ptrdiff_t>(input_shape.height);
    const auto in_w = static_cast<std::ptrdiff_t>(input_shape.width);
    for (std::size_t oy = 0; oy < out.height; ++oy) {
        for (std::size_t ox = 0; ox < out.width; ++ox) {
            if (mask != nullptr && !mask->kept(oy, ox)) continue;
            buf.retained_positions.push_back(
                {static_cast<std::uint32_t>(oy), static_cast<std::uint32_t>(ox)});
            // base: top-left input coordinate of the window; offset: per-tap step
            const auto base_y = static_cast<std::ptrdiff_t>(oy * params.stride_h) -
                                static_cast<std::ptrdiff_t>(params.pad_h);
            const auto base_x = static_cast<std::ptrdiff_t>(ox * params.stride_w) -
                                static_cast<std::ptrdiff_t>(params.pad_w);
            for (std::size_t ky = 0; ky < params.kernel_h; ++ky) {
                const auto iy = base_y + static_cast<std::ptrdiff_t>(ky * params.dilation_h);
                for (std::size_t kx = 0; kx < params.kernel_w; ++kx) {
                    const auto ix = base_x + static_cast<std::ptrdiff_t>(kx * params.dilation_w);
                    if (iy < 0 || iy >= in_h || ix < 0 || ix >= in_w) {
                        buf.taps.push_back(kPadTap);
                    } else {
                        buf.taps.push_back(static_cast<std::uint32_t>(
                            (iy * in_w + ix) * static_cast<std::ptrdiff_t>(input_shape.channels)));
                    }
                }
            }
        }
    }
    return buf;
}

void pack_columns(const Tensor& input, const IndirectionBuffer& buf, PackedActivations& out) {
    if (input.shape() != buf.input_shape) {
        throw ConfigError("input " + to_string(input.shape()) + " does not match indirection shape " +
                          to_string(buf.input_shape));
    }
    const std::size_t c = buf.input_shape.channels;
    out.patch_len = buf.patch_len();
    out.columns = buf.retained_count();
    out.data.resize(out.patch_len * out.columns);

    // PAD taps resolve to a shared zero row instead of a per-element branch.
    const std::vector<float> zero_row(c, 0.0f);
    const float* base = input.data();
    float* dst = out.data.data();
    for (const std::uint32_t tap : buf.taps) {
        const float* src = tap == kPadTap ? zero_row.data() : base + tap;
        std::memcpy(dst, src, c * sizeof(float));
        dst += c;
    }
    SPARSECONV_INVARIANT(dst == out.data.data() + out.data.size());
}

PackedActivations pack_columns(const Tensor& input, const IndirectionBuffer& buf) {
    PackedActivations out;
    pack_columns(input, buf, out);
    return out;
}

PackedWeights pack_weights(const ConvWeights& weights) {
    constexpr std::size_t nr = PackedWeights::kPanelWidth;
    PackedWeights packed;
    packed.out_channels = weights.out_channels;
    packed.patch_len = weights.patch_len();
    packed.bias = weights.bias;
    packed.panels.assign(packed.panel_count() * nr * packed.patch_len, 0.0f);
    for (std::size_t n = 0; n < weights.out_channels; ++n) {
        float* panel = packed.panels.data() + (n / nr) * nr * packed.patch_len;
        const auto row = weights.row(n);
        for (std::size_t t = 0; t < packed.patch_len; ++t) panel[t * nr + n % nr] = row[t];
    }
    return packed;
}

namespace {

constexpr std::size_t kNr = PackedWeights::kPanelWidth;
constexpr std::size_t kMr = 6;
constexpr std::size_t kKc = 256;   // depth block
constexpr std::size_t kNc = 96;    // columns per outer block (multiple of kMr)

// One weight-panel row held in a single vector register (AVX-512) or a pair
// (AVX2); GCC/Clang vector extension.
using PanelVec = float __attribute__((vector_size(kNr * sizeof(float))));

// Accumulates taps [k0, k1) for `Rows` columns against one weight panel.
// When `first` the accumulators start from zero, otherwise from the partial
// sums already stored in `out`. When `last` the bias is added on store.
template <std::size_t Rows>
void micro_kernel(const float* const* cols, const float* panel, std::size_t k0, std::size_t k1,
                  const float* bias, std::size_t valid, float* out, std::size_t ldo, bool first,
                  bool last) {
    PanelVec acc[Rows];
    for (std::size_t r = 0; r < Rows; ++r) {
        acc[r] = PanelVec{};
        if (!first) std::memcpy(&acc[r], out + r * ldo, valid * sizeof(float));
    }
    for (std::size_t t = k0; t < k1; ++t) {
        PanelVec w;
        std::memcpy(&w, panel + t * kNr, sizeof(w));
#pragma GCC unroll 8
        for (std::size_t r = 0; r < Rows; ++r) acc[r] += cols[r][t] * w;
    }
    for (std::size_t r = 0; r < Rows; ++r) {
        if (last) {
            PanelVec b{};
            std::memcpy(&b, bias, valid * sizeof(float));
            acc[r] += b;
        }
        std::memcpy(out + r * ldo, &acc[r], valid * sizeof(float));
    }
}

using KernelFn = void (*)(const float* const*, const float*, std::size_t, std::size_t, const float*,
                          std::size_t, float*, std::size_t, bool, bool);

constexpr KernelFn kKernels[kMr + 1] = {nullptr,          &micro_kernel<1>, &micro_kernel<2>,
                                        &micro_kernel<3>, &micro_kernel<4>, &micro_kernel<5>,
                                        &micro_kernel<6>};

// Returns the number of multiply-accumulates performed on real (non-padding)
// output channels.
std::uint64_t gemm_panels(const PackedWeights& w, const PackedActivations& a, float* out,
                          std::size_t panel_begin, std::size_t panel_end) {
    std::uint64_t macs = 0;
    const std::size_t n = w.out_channels;
    const std::size_t k = w.patch_len;
    const float* cols[kMr];
    for (std::size_t jc = 0; jc < a.columns; jc += kNc) {
        const std::size_t jc_end = std::min(a.columns, jc + kNc);
        for (std::size_t k0 = 0; k0 < k; k0 += kKc) {
            const std::size_t k1 = std::min(k, k0 + kKc);
            const bool first = k0 == 0;
            const bool last = k1 == k;
            for (std::size_t p = panel_begin; p < panel_end; ++p) {
                const float* panel = w.panels.data() + p * kNr * k;
                const std::size_t ch0 = p * kNr;
                const std::size_t valid = std::min(kNr, n - ch0);
                for (std::size_t j = jc; j < jc_end; j += kMr) {
                    const std::size_t rows = std::min(kMr, jc_end - j);
                    for (std::size_t r = 0; r < rows; ++r) cols[r] = a.data.data() + (j + r) * k;
                    kKernels[rows](cols, panel, k0, k1, w.bias.data() + ch0, valid,
                                   out + j * n + ch0, n, first, last);
                    macs += static_cast<std::uint64_t>(rows) * valid * (k1 - k0);
                }
            }
        }
    }
    return macs;
}

}  // namespace

void low_rank_gemm(const PackedWeights& weights, const PackedActivations& activations,
                   std::span<float> out, GemmStats* stats, std::size_t threads) {
    if (weights.patch_len != activations.patch_len) {
        throw ConfigError("GEMM inner dimension mismatch: weights " +
                          std::to_string(weights.patch_len) + ", activations " +
                          std::to_string(activations.patch_len));
    }
    if (out.size() < activations.columns * weights.out_channels) {
        throw ConfigError("GEMM output buffer too small");
    }
    if (stats != nullptr) ++stats->calls;
    if (activations.columns == 0) return;

    const std::size_t panels = weights.panel_count();
    threads = std::clamp<std::size_t>(threads, 1, panels);
    std::uint64_t macs = 0;
    if (threads == 1) {
        macs = gemm_panels(weights, activations, out.data(), 0, panels);
    } else {
        std::vector<std::uint64_t> counts(threads, 0);
        {
            std::vector<std::jthread> pool;
            pool.reserve(threads);
            for (std::size_t i = 0; i < threads; ++i) {
                const std::size_t b = panels * i / threads;
                const std::size_t e = panels * (i + 1) / threads;
                pool.emplace_back([&, i, b, e] {
                    counts[i] = gemm_panels(weights, activations, out.data(), b, e);
                });
            }
        }
        for (std::uint64_t c : counts) macs += c;
    }
    if (stats != nullptr) stats->macs += macs;
}

CompactOutput low_rank_gemm(const ConvWeights& weights, const PackedActivations& activations,
                            GemmStats* stats) {
    const PackedWeights packed = pack_weights(weights);
    CompactOutput out{weights.out_channels, activations.columns,
                      std::vector<float>(weights.out_channels * activations.columns)};
    low_rank_gemm(packed, activations, out.data, stats);
    return out;
}

void scatter_zeros_inplace(std::span<float> storage, std::size_t channels,
                           const SpatialMask& mask, std::size_t retained) {
    SPARSECONV_INVARIANT(storage.size() == mask.positions() * channels);
    SPARSECONV_INVARIANT(retained == mask.kept_count());
    const std::size_t bytes = channels * sizeof(float);
    std::size_t next = retained;  // one past the next unconsumed compact column
    for (std::size_t pos = mask.positions(); pos-- > 0;) {
        float* dst = storage.data() + pos * channels;
        if (mask.bits[pos] == 0) {
            std::memset(dst, 0, bytes);
        } else {
            --next;
            // next <= pos always holds, so a column only ever moves backward.
            if (next != pos) std::memcpy(dst, storage.data() + next * channels, bytes);
        }
    }
    SPARSECONV_INVARIANT(next == 0);
}

Tensor scatter_zeros(const CompactOutput& compact, const SpatialMask& mask) {
    Tensor out(Shape{mask.height, mask.width, compact.out_channels});
    SPARSECONV_INVARIANT(compact.data.size() == compact.columns * compact.out_channels);
    SPARSECONV_INVARIANT(compact.columns <= mask.positions());
    std::copy(compact.data.begin(), compact.data.end(), out.data());
    scatter_zeros_inplace(out.values(), compact.out_channels, mask, compact.columns);
    return out;
}

SparseConvPlan::SparseConvPlan(const Shape& input_shape, const ConvParams& params,
                               const ConvWeights& weights, const SpatialMask* mask)
    : indirection_(build_indirection(input_shape, params, mask)),
      weights_((weights.check_against(params), pack_weights(weights))),
      has_mask_(mask != nullptr) {
    if (mask != nullptr) mask_ = *mask;
}

void SparseConvPlan::run(const Tensor& input, Tensor& output, GemmStats* stats,
                         std::size_t threads) {
    pack_columns(input, indirection_, scratch_);
    if (output.shape() != indirection_.output_shape) output = Tensor(indirection_.output_shape);
    low_rank_gemm(weights_, scratch_, output.values(), stats, threads);
    if (has_mask_) {
        scatter_zeros_inplace(output.values(), weights_.out_channels, mask_,
                              indirection_.retained_count());
    }
}

Tensor SparseConvPlan::run(const Tensor& input, GemmStats* stats, std::size_t threads) {
    Tensor out(indirection_.output_shape);
    run(input, out, stats, threads);
    return out;
}

Tensor sparse_conv2d(const Tensor& input, const ConvWeights& weights, const ConvParams& params,
                     const SpatialMask* mask, GemmStats* stats) {
    SparseConvPlan plan(input.shape(), params, weights, mask);
    return plan.run(input, stats);
}

}  // namespace sparseconv
