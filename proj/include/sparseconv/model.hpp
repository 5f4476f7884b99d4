#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sparseconv/mask.hpp"
#include "sparseconv/tensor.hpp"

namespace sparseconv {

enum class LayerKind { conv, relu, maxpool, avgpool, global_avgpool, add, flatten, fc };

std::string to_string(LayerKind kind);
/// Throws FormatError for unknown names.
LayerKind layer_kind_from_string(const std::string& name);

/// Source index meaning "the graph input".
inline constexpr int kGraphInput = -1;

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::relu;
    /// Producer of this layer's (first) input: an earlier layer index or
    /// kGraphInput. Defaults to the previous layer.
    int source = kGraphInput;
    /// add only: the earlier layer summed with `source`.
    int add_from = kGraphInput;
    ConvParams conv;                  // conv
    std::size_t pool_kernel = 0;      // maxpool / avgpool
    std::size_t pool_stride = 0;
    std::size_t fc_outputs = 0;       // fc
    bool sparsity_enabled = false;    // conv only

    bool operator==(const LayerSpec&) const = default;
};

/// Ordered layer list: linear chains plus single-skip residual adds. The last
/// layer is the output.
struct ModelGraph {
    std::string name;
    Shape input;
    std::vector<LayerSpec> layers;
    std::map<std::size_t, ConvWeights> conv_weights;  // keyed by layer index
    std::map<std::size_t, FcWeights> fc_weights;

    /// Output shape of every layer. Throws ConfigError naming the offending
    /// layer on any inconsistency.
    std::vector<Shape> layer_shapes() const;

    /// Full structural check: shapes, references, weight sizes, and the mask
    /// resolution rule for enabled convs.
    void validate() const;

    /// Indices of sparsity-enabled conv layers, in layer order.
    std::vector<std::size_t> enabled_convs() const;
    /// Output resolutions of the enabled convs, in the same order.
    std::vector<Resolution> mask_resolutions() const;

    std::size_t index_of(const std::string& layer_name) const;

    bool operator==(const ModelGraph&) const = default;
};

/// Convs are enabled unless they are pointwise (1x1) and feed a residual add
/// (the downsample shortcut).
bool default_sparsity_enabled(const ModelGraph& graph, std::size_t layer);

/// Training / masking configuration for a graph.
struct SparsityConfig {
    double target_sparsity = 0.0;
    SparsitySchedule schedule;
    std::uint64_t seed = 0;
    std::map<std::string, bool> overrides;  // layer name -> sparsity_enabled

    /// Throws ConfigError for out-of-range sparsity, bad schedule, unknown
    /// layer names, or overrides on non-conv layers.
    void apply(ModelGraph& graph) const;
};

/// Propagated masks for the graph's enabled convs.
MaskSet generate_masks(const ModelGraph& graph, std::uint64_t seed, std::uint64_t step,
                       double sparsity);

/// Throws ConfigError unless `masks` covers exactly the enabled convs at
/// their output resolutions.
void check_masks(const ModelGraph& graph, std::span<const SpatialMask> masks);

/// Builder helpers.
class GraphBuilder {
public:
    GraphBuilder(std::string name, Shape input);

    /// Each returns the new layer's index. `source` defaults to the previous
    /// layer (or the graph input for the first layer).
    std::size_t conv(const std::string& name, const ConvParams& params, int source = kPrevious);
    std::size_t relu(const std::string& name, int source = kPrevious);
    std::size_t maxpool(const std::string& name, std::size_t kernel, std::size_t stride,
                        int source = kPrevious);
    std::size_t avgpool(const std::string& name, std::size_t kernel, std::size_t stride,
                        int source = kPrevious);
    std::size_t global_avgpool(const std::string& name, int source = kPrevious);
    std::size_t add(const std::string& name, int from, int source = kPrevious);
    std::size_t flatten(const std::string& name, int source = kPrevious);
    std::size_t fc(const std::string& name, std::size_t outputs, int source = kPrevious);

    /// Allocates zeroed weights, applies default sparsity flags, validates.
    ModelGraph build();

    static constexpr int kPrevious = -2;

private:
    std::size_t push(LayerSpec spec, int source);
    ModelGraph graph_;
};

/// He-style uniform initialization of every conv/fc weight; biases zero.
void init_weights(ModelGraph& graph, std::uint64_t seed, float gain = 1.0f);

/// ResNet18 layout at 224x224x3: 7x7/2 stem, 2x2 max pool, four stages of
/// two basic blocks (64, 128, 256, 512 channels) with 1x1 downsample
/// shortcuts, global average pool, fc-1000. No normalization layers.
ModelGraph make_resnet18_shape(std::uint64_t seed);

/// Small classifier for 32x32x1 inputs: three 3x3 conv+relu stages with
/// 2x2 max pools between them, global average pool, fc to `classes`.
ModelGraph make_toy_cnn(std::uint64_t seed, std::size_t classes = 3);

/// Builtin graph by name ("resnet18-shape", "toy-cnn"); throws ConfigError.
ModelGraph make_builtin(const std::string& name, std::uint64_t seed);
bool is_builtin(const std::string& name);

/// .smod container: u64 little-endian manifest length L, L bytes of JSON
/// manifest, then the little-endian float32 blob referenced by offset/count.
std::vector<std::uint8_t> save_model(const ModelGraph& graph);
/// Throws FormatError (malformed container) or ConfigError (inconsistent
/// graph); messages name the offending layer.
ModelGraph load_model(std::span<const std::uint8_t> bytes);

}  // namespace sparseconv
