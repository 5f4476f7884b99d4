#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sparseconv/dataset.hpp"
#include "sparseconv/mask.hpp"
#include "sparseconv/model.hpp"
#include "sparseconv/tensor.hpp"

namespace sparseconv {

/// Trainable copy of a graph's weights with reverse-mode gradients.
///
/// Conv filters are held tap-major (patch_len x out_channels) so both passes
/// vectorize over output channels; each conv output still accumulates in
/// ascending tap order from zero and then adds bias, matching the GEMM path.
/// Instantiated for float (training) and double (gradient checking).
template <typename T>
class Network {
public:
    struct Activation {
        Shape shape;
        std::vector<T> values;
    };

    enum class Role { conv_filters, conv_bias, fc_weights, fc_bias };

    struct ParamBlock {
        std::size_t layer = 0;
        Role role = Role::conv_filters;
        std::vector<T> values;
    };

    /// Forward intermediates needed by backward.
    struct Cache {
        Activation input;
        std::vector<Activation> outputs;
        std::vector<std::vector<std::uint32_t>> argmax;  // maxpool winners
        std::vector<const SpatialMask*> masks;           // per layer, or null
    };

    explicit Network(const ModelGraph& graph);

    /// Forward pass. Each enabled conv's output is multiplied by its mask
    /// (zero at masked positions, after bias). `masks` may be null.
    std::vector<T> forward(const Tensor& input, const MaskSet* masks, Cache& cache) const;

    /// Accumulates d(loss)/d(param) into `grads` (same layout as params()).
    void backward(const Cache& cache, std::span<const T> dlogits, std::vector<std::vector<T>>& grads) const;

    std::vector<ParamBlock>& params() { return params_; }
    const std::vector<ParamBlock>& params() const { return params_; }
    std::vector<std::vector<T>> zero_grads() const;
    std::size_t parameter_count() const;

    /// Writes the current weights back into `graph` (which must have the
    /// structure this network was built from).
    void export_to(ModelGraph& graph) const;

    const ModelGraph& graph() const { return *graph_; }

private:
    const ModelGraph* graph_;
    std::vector<Shape> shapes_;
    std::vector<int> mask_slot_;
    // Per layer: index of the first ParamBlock (filters/weights), or -1.
    std::vector<int> param_index_;
    std::vector<ParamBlock> params_;
};

/// Single-sample softmax cross-entropy. Writes d(loss)/d(logits)
/// scaled by `scale` into `dlogits` and returns the unscaled loss.
template <typename T>
T softmax_cross_entropy(std::span<const T> logits, int label, T scale, std::span<T> dlogits);

/// Adam with bias correction.
struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<std::vector<float>> first_moment;
    std::vector<std::vector<float>> second_moment;
    std::uint64_t steps = 0;
};

/// One Adam update of `params` in place using `grads` at `learning_rate`.
void optimizer_step(std::vector<Network<float>::ParamBlock>& params, AdamState& state,
                    const std::vector<std::vector<float>>& grads, const AdamConfig& config,
                    double learning_rate);

enum class MaskMode { propagated, independent };

struct TrainOptions {
    std::size_t steps = 1000;
    std::size_t batch_size = 16;
    SparsitySchedule schedule;  // total_steps is overwritten with `steps`
    std::uint64_t seed = 0;
    AdamConfig adam{.learning_rate = 2e-3};
    MaskMode mask_mode = MaskMode::propagated;
};

struct StepRecord {
    std::size_t step = 0;
    Stage stage = Stage::dense;
    double sparsity = 0.0;       // scheduled s_t
    double loss = 0.0;           // mean batch loss
    double accuracy = 0.0;       // batch accuracy
    std::uint64_t mask_hash = 0;
    std::vector<std::size_t> zero_counts;  // per enabled conv
};

/// Training state for the three-stage sparse schedule: dense steps, masked
/// steps with a mask resampled every step at the ramped sparsity, then a
/// frozen mask set sampled at the first freeze-stage step.
class Trainer {
public:
    Trainer(const ModelGraph& graph, const Dataset& data, TrainOptions options);
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    /// Runs step `step_index()` and advances.
    StepRecord step();
    std::size_t step_index() const { return t_; }

    /// Masks used by the last step (all ones during the dense stage).
    const MaskSet& current_masks() const { return masks_; }
    bool frozen() const { return frozen_; }

    /// Trained graph with weights exported.
    ModelGraph trained_graph() const;

    Network<float>& network() { return net_; }
    const TrainOptions& options() const { return options_; }

private:
    MaskSet masks_for_step(std::size_t t, double sparsity) const;

    ModelGraph graph_;
    TrainOptions options_;
    Network<float> net_;
    AdamState adam_;
    BatchSampler sampler_;
    std::vector<Resolution> mask_res_;
    MaskSet masks_;
    bool frozen_ = false;
    std::size_t t_ = 0;
};

struct TrainResult {
    ModelGraph graph;
    MaskSet masks;  // frozen set (or the last used set if training stopped earlier)
    std::vector<StepRecord> history;
};

TrainResult train(const ModelGraph& graph, const Dataset& data, const TrainOptions& options,
                  const std::function<void(const StepRecord&)>& on_step = {});

/// Fraction of correctly classified samples, running the GEMM inference path
/// with `masks` (null = dense).
double evaluate_accuracy(const ModelGraph& graph, const Dataset& data, const MaskSet* masks);

const char* to_string(Stage stage);

}  // namespace sparseconv
