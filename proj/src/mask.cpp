#include "sparseconv/mask.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "sparseconv/bytes.hpp"
#include "sparseconv/error.hpp"

namespace sparseconv {
namespace {

// splitmix64 finalizer
std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void check_sparsity(double s) {
    if (!(s >= 0.0 && s < 1.0)) {
        throw ConfigError("sparsity must lie in [0, 1), got " + std::to_string(s));
    }
}

}  // namespace

SpatialMask SpatialMask::ones(std::size_t height, std::size_t width) {
    return SpatialMask{height, width, std::vector<std::uint8_t>(height * width, 1), 0.0};
}

std::size_t SpatialMask::kept_count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::size_t masked_count(double sparsity, std::size_t positions) {
    return static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(positions)));
}

ScoreMap random_score2d(std::size_t height, std::size_t width, std::uint64_t seed,
                        std::uint64_t step, std::uint64_t stream) {
    if (height == 0 || width == 0) throw ConfigError("score map dimensions must be >= 1");
    const std::uint64_t key = mix64(mix64(mix64(seed) ^ step) ^ (stream * 0xd1b54a32d192ed03ULL));
    ScoreMap score{height, width, std::vector<double>(height * width)};
    for (std::size_t i = 0; i < score.values.size(); ++i) {
        const std::uint64_t bits = mix64(key + i * 0x9e3779b97f4a7c15ULL);
        score.values[i] = static_cast<double>(bits >> 11) * 0x1.0p-53;  // [0, 1)
    }
    return score;
}

ScoreMap downsample_score(const ScoreMap& score, std::size_t ratio) {
    if (ratio == 0) throw ConfigError("downsample ratio must be >= 1");
    if (score.height % ratio != 0 || score.width % ratio != 0) {
        throw ConfigError("score map " + std::to_string(score.height) + "x" +
                          std::to_string(score.width) + " not divisible by ratio " +
                          std::to_string(ratio));
    }
    if (ratio == 1) return score;
    const std::size_t oh = score.height / ratio;
    const std::size_t ow = score.width / ratio;
    const double inv_area = 1.0 / static_cast<double>(ratio * ratio);
    ScoreMap out{oh, ow, std::vector<double>(oh * ow)};
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t dy = 0; dy < ratio; ++dy) {
                for (std::size_t dx = 0; dx < ratio; ++dx) acc += score.at(y * ratio + dy, x * ratio + dx);
            }
            out.values[y * ow + x] = acc * inv_area;
        }
    }
    return out;
}

SpatialMask rank_and_mask(const ScoreMap& score, double sparsity) {
    check_sparsity(sparsity);
    const std::size_t z = score.height * score.width;
    const std::size_t m = masked_count(sparsity, z);

    std::vector<std::size_t> order(z);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return score.values[a] < score.values[b];
    });

    SpatialMask mask = SpatialMask::ones(score.height, score.width);
    mask.sparsity = sparsity;
    for (std::size_t i = 0; i < m; ++i) mask.bits[order[i]] = 0;
    return mask;
}

std::size_t resolution_ratio(Resolution input, Resolution layer) {
    if (layer.height == 0 || layer.width == 0 || input.height % layer.height != 0 ||
        input.width % layer.width != 0) {
        throw ConfigError("layer resolution " + std::to_string(layer.height) + "x" +
                          std::to_string(layer.width) + " does not divide input resolution " +
                          std::to_string(input.height) + "x" + std::to_string(input.width));
    }
    const std::size_t rh = input.height / layer.height;
    const std::size_t rw = input.width / layer.width;
    if (rh != rw) {
        throw ConfigError("unequal downsampling ratios " + std::to_string(rh) + " and " +
                          std::to_string(rw) + " for layer resolution " +
                          std::to_string(layer.height) + "x" + std::to_string(layer.width));
    }
    return rh;
}

MaskSet propagate_masks(std::span<const Resolution> layers, Resolution input, std::uint64_t seed,
                        std::uint64_t step, double sparsity) {
    check_sparsity(sparsity);
    std::vector<std::size_t> ratios;
    ratios.reserve(layers.size());
    for (const Resolution& r : layers) ratios.push_back(resolution_ratio(input, r));

    const ScoreMap score = random_score2d(input.height, input.width, seed, step);
    std::map<std::size_t, SpatialMask> by_ratio;
    MaskSet masks;
    masks.reserve(layers.size());
    for (std::size_t ratio : ratios) {
        auto it = by_ratio.find(ratio);
        if (it == by_ratio.end()) {
            it = by_ratio.emplace(ratio, rank_and_mask(downsample_score(score, ratio), sparsity)).first;
        }
        masks.push_back(it->second);
    }
    return masks;
}

MaskSet independent_masks(std::span<const Resolution> layers, std::uint64_t seed,
                          std::uint64_t step, double sparsity) {
    check_sparsity(sparsity);
    MaskSet masks;
    masks.reserve(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        masks.push_back(rank_and_mask(
            random_score2d(layers[i].height, layers[i].width, seed, step, i + 1), sparsity));
    }
    return masks;
}

void SparsitySchedule::validate() const {
    if (!(dense_frac >= 0.0 && dense_frac < freeze_frac && freeze_frac <= 1.0)) {
        throw ConfigError("schedule requires 0 <= dense_frac < freeze_frac <= 1");
    }
    check_sparsity(target_sparsity);
}

Stage SparsitySchedule::stage(std::size_t t) const {
    const auto tt = static_cast<double>(t);
    if (tt < dense_end()) return Stage::dense;
    if (tt >= freeze_start()) return Stage::frozen;
    return Stage::ramp;
}

std::size_t SparsitySchedule::first_freeze_step() const {
    return static_cast<std::size_t>(std::ceil(freeze_start()));
}

double sparsity_at_step(std::size_t t, const SparsitySchedule& schedule) {
    schedule.validate();
    if (t >= schedule.total_steps) {
        throw UsageError("step " + std::to_string(t) + " outside schedule of " +
                         std::to_string(schedule.total_steps) + " steps");
    }
    switch (schedule.stage(t)) {
        case Stage::dense:
            return 0.0;
        case Stage::frozen:
            return schedule.target_sparsity;
        case Stage::ramp:
            break;
    }
    const double t0 = schedule.dense_end();
    const double t1 = schedule.freeze_start();
    const double tau = (static_cast<double>(t) - t0) / (t1 - t0);
    const double rest = 1.0 - tau;
    return schedule.target_sparsity * (1.0 - rest * rest * rest);
}

std::vector<std::uint8_t> serialize_masks(std::span<const SpatialMask> masks) {
    std::vector<std::uint8_t> out{'S', 'M', 'S', 'K', kMaskFormatVersion};
    bytes::put_u32(out, static_cast<std::uint32_t>(masks.size()));
    for (const SpatialMask& m : masks) {
        SPARSECONV_INVARIANT(m.bits.size() == m.positions());
        bytes::put_u32(out, static_cast<std::uint32_t>(m.height));
        bytes::put_u32(out, static_cast<std::uint32_t>(m.width));
        bytes::put_u32(out, static_cast<std::uint32_t>(
                                std::llround(m.sparsity * static_cast<double>(kSparsityDenominator))));
        bytes::put_u32(out, kSparsityDenominator);
        const std::size_t first = out.size();
        out.resize(first + (m.positions() + 7) / 8, 0);
        for (std::size_t i = 0; i < m.positions(); ++i) {
            if (m.bits[i]) out[first + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
        }
    }
    return out;
}

MaskSet parse_masks(std::span<const std::uint8_t> data) {
    bytes::Reader in(data);
    const auto magic = in.take(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), "SMSK")) throw FormatError("bad SMSK magic");
    const std::uint8_t version = in.u8("version");
    if (version != kMaskFormatVersion) {
        throw FormatError("unsupported SMSK version " + std::to_string(version));
    }
    const std::uint32_t count = in.u32("layer count");
    MaskSet masks;
    for (std::uint32_t l = 0; l < count; ++l) {
        const std::string where = "SMSK layer " + std::to_string(l);
        SpatialMask m;
        m.height = in.u32("mask height");
        m.width = in.u32("mask width");
        const std::uint32_t num = in.u32("sparsity numerator");
        const std::uint32_t den = in.u32("sparsity denominator");
        if (m.height == 0 || m.width == 0) throw FormatError(where + ": empty mask");
        if (den == 0 || num >= den) throw FormatError(where + ": sparsity outside [0, 1)");
        m.sparsity = static_cast<double>(num) / static_cast<double>(den);
        const auto packed = in.take((m.positions() + 7) / 8, "mask bits");
        m.bits.resize(m.positions());
        for (std::size_t i = 0; i < m.positions(); ++i) m.bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
        if (const std::size_t tail = m.positions() % 8; tail != 0 && (packed.back() >> tail) != 0) {
            throw FormatError(where + ": nonzero padding bits");
        }
        if (m.zero_count() != masked_count(m.sparsity, m.positions())) {
            throw FormatError(where + ": zero count " + std::to_string(m.zero_count()) +
                              " inconsistent with sparsity");
        }
        masks.push_back(std::move(m));
    }
    if (in.remaining() != 0) throw FormatError("trailing bytes after SMSK payload");
    return masks;
}

std::uint64_t mask_set_hash(std::span<const SpatialMask> masks) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t b : serialize_masks(masks)) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace sparseconv
