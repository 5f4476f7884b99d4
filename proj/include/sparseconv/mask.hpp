#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace sparseconv {

/// Real-valued random score grid in [0, 1).
struct ScoreMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // row-major

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    bool operator==(const ScoreMap&) const = default;
};

/// Binary keep/drop grid over a conv layer's output positions (1 = keep).
/// The same bit applies to every channel at that position.
struct SpatialMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;  // row-major, each 0 or 1
    double sparsity = 0.0;

    static SpatialMask ones(std::size_t height, std::size_t width);

    std::size_t positions() const { return height * width; }
    bool kept(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
    std::size_t kept_count() const;
    std::size_t zero_count() const { return positions() - kept_count(); }

    bool operator==(const SpatialMask&) const = default;
};

using MaskSet = std::vector<SpatialMask>;

/// floor(s * positions): the number of masked cells for sparsity s.
std::size_t masked_count(double sparsity, std::size_t positions);

/// Counter-based uniform score map. `stream` separates independent
/// sequences under the same (seed, step); 0 is the propagated stream.
ScoreMap random_score2d(std::size_t height, std::size_t width, std::uint64_t seed,
                        std::uint64_t step, std::uint64_t stream = 0);

/// Average pooling with kernel = stride = ratio. Throws ConfigError when
/// either dimension is not divisible by ratio.
ScoreMap downsample_score(const ScoreMap& score, std::size_t ratio);

/// Zeros the floor(s*H*W) lowest-scored cells; ties go to the lower
/// row-major index first.
SpatialMask rank_and_mask(const ScoreMap& score, double sparsity);

struct Resolution {
    std::size_t height = 0;
    std::size_t width = 0;
    bool operator==(const Resolution&) const = default;
};

/// Integer downsampling ratio from `input` to `layer`; throws ConfigError if
/// the ratio is non-integer or differs between the axes.
std::size_t resolution_ratio(Resolution input, Resolution layer);

/// One score map at input resolution, average-pooled to every layer's output
/// resolution and ranked. Layers at equal resolution get identical masks.
MaskSet propagate_masks(std::span<const Resolution> layers, Resolution input, std::uint64_t seed,
                        std::uint64_t step, double sparsity);

/// Ablation baseline: an independent score map per layer, drawn directly at
/// the layer's resolution.
MaskSet independent_masks(std::span<const Resolution> layers, std::uint64_t seed,
                          std::uint64_t step, double sparsity);

enum class Stage { dense, ramp, frozen };

/// Three-stage sparsity schedule: dense warmup, cubic ramp, frozen.
struct SparsitySchedule {
    std::size_t total_steps = 0;
    double dense_frac = 0.10;
    double freeze_frac = 0.90;
    double target_sparsity = 0.0;

    /// Throws ConfigError unless 0 <= dense_frac < freeze_frac <= 1 and
    /// 0 <= target < 1.
    void validate() const;

    double dense_end() const { return dense_frac * static_cast<double>(total_steps); }
    double freeze_start() const { return freeze_frac * static_cast<double>(total_steps); }
    Stage stage(std::size_t t) const;
    /// First integer step at which the frozen stage is active.
    std::size_t first_freeze_step() const;
};

/// 0 before the dense stage ends, target from the freeze start onward, and
/// target * (1 - (1 - tau)^3) in between. Throws UsageError for t >= total.
double sparsity_at_step(std::size_t t, const SparsitySchedule& schedule);

/// SMSK container: "SMSK", version byte, u32 layer count, then per layer
/// u32 h, u32 w, u32 sparsity numerator, u32 denominator, ceil(h*w/8) bytes
/// of LSB-first row-major bits. Integers are little-endian.
inline constexpr std::uint8_t kMaskFormatVersion = 1;
inline constexpr std::uint32_t kSparsityDenominator = 1'000'000;

std::vector<std::uint8_t> serialize_masks(std::span<const SpatialMask> masks);
/// Throws FormatError on any malformed or inconsistent input.
MaskSet parse_masks(std::span<const std::uint8_t> bytes);

/// FNV-1a over the serialized mask set.
std::uint64_t mask_set_hash(std::span<const SpatialMask> masks);

}  // namespace sparseconv
