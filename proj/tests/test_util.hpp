#pragma once

#include <cstdint>
#include <random>

#include "sparseconv/mask.hpp"
#include "sparseconv/tensor.hpp"

namespace testutil {

inline sparseconv::Tensor random_tensor(const sparseconv::Shape& shape, std::uint64_t seed, float lo = -1.0f,
                                        float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    sparseconv::Tensor t(shape);
    for (float& v : t.values()) v = dist(rng);
    return t;
}

inline sparseconv::ConvWeights random_weights(const sparseconv::ConvParams& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-0.5f, 0.5f);
    sparseconv::ConvWeights w(p);
    for (float& v : w.filters) v = dist(rng);
    for (float& v : w.bias) v = dist(rng);
    return w;
}

inline sparseconv::SpatialMask random_mask(std::size_t h, std::size_t w, double keep, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(keep);
    sparseconv::SpatialMask m = sparseconv::SpatialMask::ones(h, w);
    for (auto& b : m.bits) b = coin(rng) ? 1 : 0;
    m.sparsity = static_cast<double>(m.zero_count()) / static_cast<double>(m.positions());
    return m;
}

// Straightforward 7-deep loop, channel loop outermost. Used as an oracle with a
// different loop order from the library's direct convolution.
inline sparseconv::Tensor oracle_conv(const sparseconv::Tensor& in, const sparseconv::ConvWeights& w,
                                      const sparseconv::ConvParams& p) {
    const sparseconv::Shape os = p.output_shape(in.shape());
    sparseconv::Tensor out(os);
    for (std::size_t n = 0; n < p.out_channels; ++n) {
        for (std::size_t c = 0; c < p.in_channels; ++c) {
            for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
                for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
                    for (std::size_t oy = 0; oy < os.height; ++oy) {
                        for (std::size_t ox = 0; ox < os.width; ++ox) {
                            const long iy = static_cast<long>(oy * p.stride_h + ky * p.dilation_h) -
                                            static_cast<long>(p.pad_h);
                            const long ix = static_cast<long>(ox * p.stride_w + kx * p.dilation_w) -
                                            static_cast<long>(p.pad_w);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.shape().height) ||
                                ix >= static_cast<long>(in.shape().width)) {
                                continue;
                            }
                            out.at(oy, ox, n) += in.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), c) *
                                                 w.tap(n, ky, kx, c);
                        }
                    }
                }
            }
        }
        for (std::size_t oy = 0; oy < os.height; ++oy) {
            for (std::size_t ox = 0; ox < os.width; ++ox) out.at(oy, ox, n) += w.bias[n];
        }
    }
    return out;
}

inline double max_diff(const sparseconv::Tensor& a, const sparseconv::Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
    }
    return worst;
}

}  // namespace testutil
