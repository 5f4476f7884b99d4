#include "sparseconv/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sparseconv/error.hpp"

namespace sparseconv {
namespace {

Tensor draw_shape(int label, std::mt19937_64& rng) {
    constexpr int n = static_cast<int>(kShapeImageSize);
    std::uniform_int_distribution<int> half_dist(4, 9);
    const int half = half_dist(rng);
    std::uniform_int_distribution<int> center_dist(half + 1, n - half - 2);
    const int cy = center_dist(rng);
    const int cx = center_dist(rng);
    const float intensity = std::uniform_real_distribution<float>(0.6f, 1.0f)(rng);
    const int thickness = std::uniform_int_distribution<int>(1, 2)(rng);
    std::uniform_real_distribution<float> noise(-0.15f, 0.15f);

    Tensor img(Shape{kShapeImageSize, kShapeImageSize, 1});
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const int dy = y - cy;
            const int dx = x - cx;
            bool on = false;
            switch (label) {
                case 0:
                    on = std::abs(dy) <= half && std::abs(dx) <= half;
                    break;
                case 1:
                    on = dy * dy + dx * dx <= half * half;
                    break;
                default:
                    on = (std::abs(dy) <= thickness && std::abs(dx) <= half) ||
                         (std::abs(dx) <= thickness && std::abs(dy) <= half);
                    break;
            }
            img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0) =
                (on ? intensity : 0.0f) + noise(rng);
        }
    }
    return img;
}

}  // namespace

Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Dataset data;
    data.images.reserve(count);
    data.labels.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % kShapeClasses);
        data.images.push_back(draw_shape(label, rng));
        data.labels.push_back(label);
    }
    return data;
}

BatchSampler::BatchSampler(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed), order_(data.size()) {
    if (batch_size == 0 || data.size() == 0) throw ConfigError("batch sampler needs data and batch >= 1");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
}

void BatchSampler::reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (epoch_ + 1)));
    std::shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
}

Batch BatchSampler::next() {
    Batch b;
    b.inputs.reserve(batch_size_);
    b.labels.reserve(batch_size_);
    for (std::size_t i = 0; i < batch_size_; ++i) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        const std::size_t idx = order_[cursor_++];
        b.inputs.push_back(&data_->images[idx]);
        b.labels.push_back(data_->labels[idx]);
    }
    return b;
}

}  // namespace sparseconv
