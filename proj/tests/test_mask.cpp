#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "sparseconv/error.hpp"
#include "sparseconv/mask.hpp"

using namespace sparseconv;

namespace {

ScoreMap block_means(const ScoreMap& s, std::size_t r) {
    ScoreMap out{s.height / r, s.width / r, {}};
    for (std::size_t by = 0; by < out.height; ++by) {
        for (std::size_t bx = 0; bx < out.width; ++bx) {
            double sum = 0.0;
            for (std::size_t y = 0; y < r; ++y) {
                for (std::size_t x = 0; x < r; ++x) sum += s.at(by * r + y, bx * r + x);
            }
            out.values.push_back(sum / double(r * r));
        }
    }
    return out;
}

}  // namespace

TEST_CASE("score maps are deterministic and in range") {
    const ScoreMap a = random_score2d(4, 4, 7, 0);
    CHECK(a == random_score2d(4, 4, 7, 0));
    CHECK(a != random_score2d(4, 4, 7, 1));
    CHECK(a != random_score2d(4, 4, 8, 0));
    CHECK(a != random_score2d(4, 4, 7, 0, 1));

    const ScoreMap big = random_score2d(64, 64, 3, 5);
    double sum = 0.0;
    for (double v : big.values) {
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
        sum += v;
    }
    const double mean = sum / double(big.values.size());
    CHECK(mean > 0.45);
    CHECK(mean < 0.55);
}

TEST_CASE("downsample_score") {
    const ScoreMap s = random_score2d(8, 8, 1, 0);
    CHECK(downsample_score(s, 1) == s);

    ScoreMap c{4, 4, std::vector<double>(16, 0.3)};
    for (double v : downsample_score(c, 2).values) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));

    const ScoreMap d = downsample_score(s, 4);
    const ScoreMap oracle = block_means(s, 4);
    REQUIRE(d.height == 2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(d.values[i] == doctest::Approx(oracle.values[i]).epsilon(1e-12));

    CHECK_THROWS_AS(downsample_score(random_score2d(6, 8, 1, 0), 4), ConfigError);
}

TEST_CASE("average-pool composition for nested ratios") {
    const ScoreMap s = random_score2d(32, 32, 9, 2);
    for (const auto& [r1, r2] : {std::pair<std::size_t, std::size_t>{1, 4}, {2, 4}, {2, 8}, {4, 16}, {2, 16}}) {
        const ScoreMap direct = downsample_score(s, r2);
        const ScoreMap nested = downsample_score(downsample_score(s, r1), r2 / r1);
        for (std::size_t i = 0; i < direct.values.size(); ++i) {
            CHECK(std::abs(direct.values[i] - nested.values[i]) <= 1e-6);
        }
    }
}

TEST_CASE("rank_and_mask") {
    const ScoreMap s = random_score2d(5, 7, 2, 0);
    const SpatialMask ones = rank_and_mask(s, 0.0);
    CHECK(ones.kept_count() == 35);

    const ScoreMap hand{2, 2, {0.1, 0.9, 0.8, 0.2}};
    const SpatialMask m = rank_and_mask(hand, 0.5);
    CHECK(m.bits == std::vector<std::uint8_t>{0, 1, 1, 0});

    CHECK(rank_and_mask(random_score2d(4, 4, 3, 0), 0.3).zero_count() == 4);

    const ScoreMap ties{1, 4, {0.5, 0.5, 0.5, 0.5}};
    CHECK(rank_and_mask(ties, 0.5).bits == std::vector<std::uint8_t>{0, 0, 1, 1});

    CHECK_THROWS_AS(rank_and_mask(s, 1.0), ConfigError);
    CHECK_THROWS_AS(rank_and_mask(s, -0.1), ConfigError);
}

TEST_CASE("zero count is floor(s*H*W) over a grid") {
    std::uint64_t seed = 0;
    for (std::size_t h : {1, 3, 7, 14, 28}) {
        for (std::size_t w : {1, 4, 7, 14}) {
            for (double s : {0.0, 0.05, 0.1, 0.25, 0.3, 0.5, 0.7, 0.9, 0.99}) {
                const SpatialMask m = rank_and_mask(random_score2d(h, w, ++seed, 0), s);
                CHECK(m.zero_count() == std::size_t(std::floor(s * double(h * w))));
                CHECK(m.zero_count() == masked_count(s, h * w));
            }
        }
    }
    // Values where s*z is integral in exact arithmetic.
    CHECK(masked_count(0.3, 100) == 30);
    CHECK(masked_count(0.1, 3136) == 313);
    CHECK(masked_count(0.5, 3136) == 1568);
}

TEST_CASE("propagated masks") {
    const std::vector<Resolution> layers{{8, 8}, {4, 4}, {4, 4}, {2, 2}};
    const MaskSet a = propagate_masks(layers, {8, 8}, 3, 1, 0.25);
    CHECK(a == propagate_masks(layers, {8, 8}, 3, 1, 0.25));
    CHECK(a[1] == a[2]);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        CHECK(a[i].zero_count() == masked_count(0.25, layers[i].height * layers[i].width));
    }
    for (const SpatialMask& m : propagate_masks(layers, {8, 8}, 3, 1, 0.0)) CHECK(m.zero_count() == 0);

    // Hand-pooled 8x8 fixture: the four lowest 2x2-block means are masked.
    const ScoreMap full = random_score2d(8, 8, 3, 1);
    const ScoreMap pooled = block_means(full, 2);
    std::vector<std::size_t> order(16);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return pooled.values[x] < pooled.values[y]; });
    std::vector<std::uint8_t> expect(16, 1);
    for (std::size_t i = 0; i < 4; ++i) expect[order[i]] = 0;
    CHECK(a[1].bits == expect);

    CHECK_THROWS_AS(propagate_masks(std::vector<Resolution>{{3, 3}}, {8, 8}, 1, 0, 0.1), ConfigError);
    CHECK_THROWS_AS(propagate_masks(std::vector<Resolution>{{4, 2}}, {8, 8}, 1, 0, 0.1), ConfigError);
}

TEST_CASE("resolution_ratio") {
    CHECK(resolution_ratio({224, 224}, {56, 56}) == 4);
    CHECK(resolution_ratio({8, 16}, {4, 8}) == 2);
    CHECK_THROWS_AS(resolution_ratio({224, 224}, {55, 55}), ConfigError);
    CHECK_THROWS_AS(resolution_ratio({8, 8}, {4, 2}), ConfigError);
}

TEST_CASE("independent masks use separate streams") {
    const std::vector<Resolution> layers{{4, 4}, {4, 4}};
    const MaskSet m = independent_masks(layers, 3, 0, 0.5);
    CHECK(m[0].zero_count() == 8);
    CHECK(m[1].zero_count() == 8);
    CHECK(m[0] != m[1]);
}

TEST_CASE("sparsity schedule values") {
    SparsitySchedule s{1000, 0.1, 0.9, 0.3};
    CHECK(sparsity_at_step(0, s) == 0.0);
    CHECK(sparsity_at_step(99, s) == 0.0);
    CHECK(sparsity_at_step(100, s) == 0.0);
    CHECK(sparsity_at_step(900, s) == doctest::Approx(0.3));
    CHECK(sparsity_at_step(999, s) == 0.3);
    CHECK(sparsity_at_step(500, s) == doctest::Approx(0.2625).epsilon(1e-12));
    CHECK(s.stage(99) == Stage::dense);
    CHECK(s.stage(100) == Stage::ramp);
    CHECK(s.stage(899) == Stage::ramp);
    CHECK(s.stage(900) == Stage::frozen);
    CHECK(s.first_freeze_step() == 900);
    CHECK_THROWS_AS(sparsity_at_step(1000, s), UsageError);

    SparsitySchedule bad{100, 0.5, 0.4, 0.1};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {100, 0.1, 0.9, 1.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sparsity schedule is monotone and continuous") {
    for (double target : {0.1, 0.3, 0.5, 0.9}) {
        SparsitySchedule s{1000, 0.1, 0.9, target};
        double prev = 0.0;
        for (std::size_t t = 0; t < 1000; ++t) {
            const double v = sparsity_at_step(t, s);
            CHECK(v >= prev);
            CHECK(v - prev <= 3.0 * target / 800.0 + 1e-12);  // max cubic slope times one step
            prev = v;
        }
    }
}

TEST_CASE("SMSK round trip") {
    MaskSet set = propagate_masks(std::vector<Resolution>{{7, 7}, {3, 3}, {1, 1}}, {21, 21}, 4, 0, 0.3);
    const std::vector<std::uint8_t> bytes = serialize_masks(set);
    CHECK(bytes.size() == 4 + 1 + 4 + (16 + 7) + (16 + 2) + (16 + 1));
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SMSK");
    const MaskSet back = parse_masks(bytes);
    CHECK(back == set);
    CHECK(serialize_masks(back) == bytes);
    CHECK(mask_set_hash(back) == mask_set_hash(set));
}

TEST_CASE("SMSK rejects malformed input") {
    const MaskSet set = propagate_masks(std::vector<Resolution>{{4, 4}}, {4, 4}, 1, 0, 0.25);
    const std::vector<std::uint8_t> good = serialize_masks(set);

    auto bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(parse_masks(bad), FormatError);
    bad = good;
    bad[4] = 2;
    CHECK_THROWS_AS(parse_masks(bad), FormatError);
    bad = good;
    bad.pop_back();
    CHECK_THROWS_AS(parse_masks(bad), FormatError);
    bad = good;
    bad.push_back(0);
    CHECK_THROWS_AS(parse_masks(bad), FormatError);
    // Flip a kept bit so the zero count disagrees with the stored sparsity.
    bad = good;
    bad.back() ^= 0x80;
    CHECK_THROWS_AS(parse_masks(bad), FormatError);
}
