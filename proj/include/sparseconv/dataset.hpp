#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sparseconv/tensor.hpp"

namespace sparseconv {

/// Procedural 3-class shape images (32x32x1): 0 = filled square,
/// 1 = filled circle, 2 = cross. Random size, position, intensity, and
/// additive background noise; fully determined by the seed.
struct Dataset {
    std::vector<Tensor> images;
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }
};

inline constexpr std::size_t kShapeClasses = 3;
inline constexpr std::size_t kShapeImageSize = 32;

Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed);

/// A minibatch view: references into a dataset.
struct Batch {
    std::vector<const Tensor*> inputs;
    std::vector<int> labels;
};

/// Deterministic minibatch stream: reshuffles every epoch from its seed.
class BatchSampler {
public:
    BatchSampler(const Dataset& data, std::size_t batch_size, std::uint64_t seed);
    Batch next();

private:
    void reshuffle();

    const Dataset* data_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

}  // namespace sparseconv
