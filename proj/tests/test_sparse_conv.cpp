#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "sparseconv/error.hpp"
#include "sparseconv/sparse_conv.hpp"
#include "test_util.hpp"

using namespace sparseconv;

namespace {

Tensor masked_direct(const Tensor& in, const ConvWeights& w, const ConvParams& p, const SpatialMask& m) {
    Tensor out = direct_conv2d(in, w, p);
    for (std::size_t y = 0; y < m.height; ++y) {
        for (std::size_t x = 0; x < m.width; ++x) {
            if (!m.kept(y, x)) {
                for (float& v : out.pixel(y, x)) v = 0.0f;
            }
        }
    }
    return out;
}

// Naive im2col: copies every window of every kept position.
std::vector<float> naive_im2col(const Tensor& in, const ConvParams& p, const SpatialMask* m) {
    const Shape os = p.output_shape(in.shape());
    std::vector<float> cols;
    for (std::size_t oy = 0; oy < os.height; ++oy) {
        for (std::size_t ox = 0; ox < os.width; ++ox) {
            if (m != nullptr && !m->kept(oy, ox)) continue;
            for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
                for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
                    const long iy = long(oy * p.stride_h + ky * p.dilation_h) - long(p.pad_h);
                    const long ix = long(ox * p.stride_w + kx * p.dilation_w) - long(p.pad_w);
                    for (std::size_t c = 0; c < p.in_channels; ++c) {
                        const bool inside = iy >= 0 && ix >= 0 && iy < long(in.shape().height) &&
                                            ix < long(in.shape().width);
                        cols.push_back(inside ? in.at(std::size_t(iy), std::size_t(ix), c) : 0.0f);
                    }
                }
            }
        }
    }
    return cols;
}

Tensor scatter_oracle(const std::vector<float>& compact, std::size_t n, const SpatialMask& m) {
    Tensor out({m.height, m.width, n});
    std::size_t j = 0;
    for (std::size_t p = 0; p < m.positions(); ++p) {
        if (m.bits[p] == 0) continue;
        std::copy_n(compact.begin() + long(j * n), n, out.data() + p * n);
        ++j;
    }
    return out;
}

}  // namespace

TEST_CASE("indirection with all-ones mask keeps every position") {
    const ConvParams p = ConvParams::square(3, 1, 1, 2, 2);
    const IndirectionBuffer buf = build_indirection({6, 5, 2}, p, nullptr);
    CHECK(buf.retained_count() == 30);
    const SpatialMask ones = SpatialMask::ones(6, 5);
    CHECK(build_indirection({6, 5, 2}, p, &ones).taps == buf.taps);
}

TEST_CASE("masked window keeps neighbouring references") {
    // 3x3 input, 2x2 kernel: output (0,0) masked, input pixel (0,1) is still
    // used by the window for output (0,1).
    const ConvParams p = ConvParams::square(2, 1, 0, 1, 1);
    SpatialMask m = SpatialMask::ones(2, 2);
    m.bits[0] = 0;
    const IndirectionBuffer buf = build_indirection({3, 3, 1}, p, &m);
    REQUIRE(buf.retained_count() == 3);
    CHECK(buf.retained_positions[0] == OutputPosition{0, 1});
    const auto taps = buf.taps_for(0);
    const std::uint32_t pixel_b = 1;  // element offset of input (0,1)
    CHECK(std::find(taps.begin(), taps.end(), pixel_b) != taps.end());
    CHECK(taps[0] == pixel_b);
}

TEST_CASE("retained count follows the column-count law") {
    const ConvParams p = ConvParams::square(1, 1, 0, 1, 1);
    const SpatialMask m = rank_and_mask(random_score2d(10, 10, 1, 0), 0.3);
    CHECK(build_indirection({10, 10, 1}, p, &m).retained_count() == 70);

    const ConvParams r = ConvParams::square(3, 1, 1, 64, 64);
    const SpatialMask half = rank_and_mask(random_score2d(56, 56, 2, 0), 0.5);
    CHECK(build_indirection({56, 56, 64}, r, &half).retained_count() == 1568);

    for (std::size_t z : {1, 7, 49, 100, 196, 3136}) {
        for (double s : {0.0, 0.1, 0.2, 0.3, 0.5}) {
            const std::size_t side = z == 7 ? 7 : std::size_t(std::lround(std::sqrt(double(z))));
            const std::size_t h = z == 7 ? 1 : side;
            const SpatialMask mk = rank_and_mask(random_score2d(h, z / h, z, 0), s);
            const IndirectionBuffer b = build_indirection({h, z / h, 1}, p, &mk);
            CHECK(b.retained_count() == z - std::size_t(std::floor(s * double(z))));
        }
    }
    SpatialMask wrong = SpatialMask::ones(3, 3);
    CHECK_THROWS_AS(build_indirection({4, 4, 1}, p, &wrong), ConfigError);
}

TEST_CASE("pad taps are marked and pack to zeros") {
    const ConvParams p = ConvParams::square(3, 1, 1, 2, 1);
    const Tensor in = testutil::random_tensor({4, 4, 2}, 5, 1.0f, 2.0f);
    const IndirectionBuffer buf = build_indirection(in.shape(), p, nullptr);
    const PackedActivations a = pack_columns(in, buf);
    // Corner output (0,0): taps in kernel row 0 and kernel col 0 fall in padding.
    const auto taps = buf.taps_for(0);
    for (std::size_t k = 0; k < 9; ++k) {
        const bool pad = k < 3 || k % 3 == 0;
        CHECK((taps[k] == kPadTap) == pad);
        for (std::size_t c = 0; c < 2; ++c) CHECK((a.at(k * 2 + c, 0) == 0.0f) == pad);
    }
}

TEST_CASE("pack_columns identity case and naive oracle") {
    const Tensor in = testutil::random_tensor({5, 6, 3}, 21);
    const IndirectionBuffer id = build_indirection(in.shape(), ConvParams::square(1, 1, 0, 3, 1), nullptr);
    CHECK(pack_columns(in, id).data == in.storage());

    for (const std::size_t k : {1, 3, 5}) {
        for (const std::size_t s : {1, 2}) {
            ConvParams p = ConvParams::square(k, s, k / 2, 3, 2);
            const Shape os = p.output_shape(in.shape());
            const SpatialMask m = testutil::random_mask(os.height, os.width, 0.6, k * 10 + s);
            const IndirectionBuffer buf = build_indirection(in.shape(), p, &m);
            CHECK(pack_columns(in, buf).data == naive_im2col(in, p, &m));
        }
    }
}

TEST_CASE("low_rank_gemm against naive triple loop") {
    std::mt19937_64 rng(17);
    for (const auto& [n, patch, cols] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 1},
                                         {8, 27, 13}, {16, 576, 97}, {33, 300, 7}, {64, 9, 200}}) {
        ConvWeights w;
        w.out_channels = n;
        w.kernel_h = w.kernel_w = 1;
        w.in_channels = patch;
        std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
        w.filters.resize(n * patch);
        w.bias.resize(n);
        for (float& v : w.filters) v = dist(rng);
        for (float& v : w.bias) v = dist(rng);
        PackedActivations a{patch, cols, std::vector<float>(patch * cols)};
        for (float& v : a.data) v = dist(rng);

        GemmStats stats;
        const CompactOutput c = low_rank_gemm(w, a, &stats);
        CHECK(stats.macs == n * patch * cols);
        double worst = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < patch; ++t) acc += double(w.filters[i * patch + t]) * a.at(t, j);
                worst = std::max(worst, std::abs(acc + w.bias[i] - c.at(i, j)));
            }
        }
        CHECK(worst <= 1e-5 * std::max<double>(1.0, std::sqrt(double(patch))));
    }
}

TEST_CASE("low_rank_gemm identity and empty cases") {
    ConvWeights w;
    w.out_channels = 5;
    w.kernel_h = w.kernel_w = 1;
    w.in_channels = 5;
    w.filters.assign(25, 0.0f);
    w.bias.assign(5, 0.0f);
    for (std::size_t i = 0; i < 5; ++i) w.filters[i * 5 + i] = 1.0f;
    PackedActivations a{5, 3, {}};
    for (int i = 0; i < 15; ++i) a.data.push_back(float(i) * 0.25f);
    const CompactOutput c = low_rank_gemm(w, a);
    CHECK(c.data == a.data);  // position-major output equals column-contiguous input

    GemmStats stats;
    const CompactOutput empty = low_rank_gemm(w, PackedActivations{5, 0, {}}, &stats);
    CHECK(empty.data.empty());
    CHECK(stats.macs == 0);
}

TEST_CASE("threaded gemm is bit-identical") {
    const ConvParams p = ConvParams::square(3, 1, 1, 16, 40);
    const Tensor in = testutil::random_tensor({12, 12, 16}, 3);
    const ConvWeights w = testutil::random_weights(p, 4);
    SparseConvPlan plan(in.shape(), p, w, nullptr);
    Tensor one, four;
    plan.run(in, one, nullptr, 1);
    plan.run(in, four, nullptr, 4);
    CHECK(one == four);
}

TEST_CASE("scatter") {
    const std::size_t n = 3;
    std::vector<float> compact(12 * n);
    for (std::size_t i = 0; i < compact.size(); ++i) compact[i] = float(i + 1);

    const SpatialMask ones = SpatialMask::ones(3, 4);
    CompactOutput c{n, 12, compact};
    CHECK(scatter_zeros(c, ones).storage() == compact);

    SpatialMask none = SpatialMask::ones(3, 4);
    std::fill(none.bits.begin(), none.bits.end(), 0);
    const Tensor z = scatter_zeros(CompactOutput{n, 0, {}}, none);
    for (float v : z.values()) CHECK(v == 0.0f);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const SpatialMask m = testutil::random_mask(5, 7, 0.5, seed);
        const std::size_t kept = m.kept_count();
        std::vector<float> storage(m.positions() * n, -7.0f);
        for (std::size_t i = 0; i < kept * n; ++i) storage[i] = float(i) + 0.5f;
        const std::vector<float> head(storage.begin(), storage.begin() + long(kept * n));
        scatter_zeros_inplace(storage, n, m, kept);
        const Tensor oracle = scatter_oracle(head, n, m);
        CHECK(std::memcmp(storage.data(), oracle.data(), storage.size() * sizeof(float)) == 0);
    }
}

TEST_CASE("sparse_conv2d equals masked direct conv") {
    const ConvParams p = ConvParams::square(3, 1, 1, 3, 4);
    const Tensor in = testutil::random_tensor({8, 8, 3}, 1);
    const ConvWeights w = testutil::random_weights(p, 2);
    const Tensor dense = direct_conv2d(in, w, p);
    CHECK(testutil::max_diff(sparse_conv2d(in, w, p, nullptr), dense) <= 1e-5);
    const SpatialMask ones = SpatialMask::ones(8, 8);
    CHECK(testutil::max_diff(sparse_conv2d(in, w, p, &ones), dense) <= 1e-5);

    SpatialMask one_off = SpatialMask::ones(8, 8);
    one_off.bits[3 * 8 + 5] = 0;
    const Tensor out = sparse_conv2d(in, w, p, &one_off);
    for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
            for (std::size_t c = 0; c < 4; ++c) {
                if (y == 3 && x == 5) {
                    CHECK(out.at(y, x, c) == 0.0f);
                    CHECK(!std::signbit(out.at(y, x, c)));
                } else {
                    CHECK(std::abs(out.at(y, x, c) - dense.at(y, x, c)) <= 1e-5f);
                }
            }
        }
    }
}

TEST_CASE("mac count scales with retained columns") {
    const ConvParams p = ConvParams::square(3, 1, 1, 8, 24);
    const Tensor in = testutil::random_tensor({14, 14, 8}, 6);
    const ConvWeights w = testutil::random_weights(p, 7);
    for (double s : {0.0, 0.1, 0.3, 0.5, 0.9}) {
        const SpatialMask m = rank_and_mask(random_score2d(14, 14, 8, 0), s);
        GemmStats stats;
        sparse_conv2d(in, w, p, &m, &stats);
        CHECK(stats.macs == std::uint64_t(m.kept_count()) * p.patch_len() * p.out_channels);
    }
}

TEST_CASE("path equivalence grid") {
    std::uint64_t seed = 100;
    for (std::size_t k : {1, 3, 5}) {
        for (std::size_t stride : {1, 2}) {
            for (std::size_t pad : {0, 1}) {
                for (std::size_t c : {1, 3, 16}) {
                    for (std::size_t n : {1, 8}) {
                        const double s = std::array{0.0, 0.1, 0.3, 0.5, 0.9}[seed % 5];
                        const ConvParams p = ConvParams::square(k, stride, pad, c, n);
                        const Tensor in = testutil::random_tensor({9, 10, c}, ++seed);
                        const ConvWeights w = testutil::random_weights(p, ++seed);
                        const Shape os = p.output_shape(in.shape());
                        const SpatialMask m = rank_and_mask(random_score2d(os.height, os.width, seed, 0), s);
                        const Tensor fast = sparse_conv2d(in, w, p, &m);
                        CHECK(testutil::max_diff(fast, masked_direct(in, w, p, m)) <= 1e-5);
                    }
                }
            }
        }
    }
}
