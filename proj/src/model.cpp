#include "sparseconv/model.hpp"

#include <cmath>
#include <random>
#include <set>

#include "sparseconv/error.hpp"

namespace sparseconv {
namespace {

constexpr struct {
    LayerKind kind;
    const char* name;
} kKindNames[] = {
    {LayerKind::conv, "conv"},           {LayerKind::relu, "relu"},
    {LayerKind::maxpool, "maxpool"},     {LayerKind::avgpool, "avgpool"},
    {LayerKind::global_avgpool, "global_avgpool"}, {LayerKind::add, "add"},
    {LayerKind::flatten, "flatten"},     {LayerKind::fc, "fc"},
};

std::string layer_label(const ModelGraph& g, std::size_t i) {
    return "layer " + std::to_string(i) + " '" + g.layers[i].name + "'";
}

}  // namespace

std::string to_string(LayerKind kind) {
    for (const auto& k : kKindNames) {
        if (k.kind == kind) return k.name;
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (const auto& k : kKindNames) {
        if (name == k.name) return k.kind;
    }
    throw FormatError("unknown layer kind '" + name + "'");
}

std::vector<Shape> ModelGraph::layer_shapes() const {
    std::vector<Shape> shapes;
    shapes.reserve(layers.size());
    if (input.size() == 0) throw ConfigError("graph input shape is empty");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        const std::string where = layer_label(*this, i);
        const auto ref_ok = [&](int idx) { return idx >= kGraphInput && idx < static_cast<int>(i); };
        if (!ref_ok(l.source)) throw ConfigError(where + ": input must reference an earlier layer");
        const Shape in = l.source == kGraphInput ? input : shapes[static_cast<std::size_t>(l.source)];
        try {
            switch (l.kind) {
                case LayerKind::conv:
                    shapes.push_back(l.conv.output_shape(in));
                    break;
                case LayerKind::relu:
                    shapes.push_back(in);
                    break;
                case LayerKind::maxpool:
                case LayerKind::avgpool:
                    if (l.pool_kernel == 0 || l.pool_stride == 0) {
                        throw ConfigError("pool kernel and stride must be >= 1");
                    }
                    if (l.pool_kernel > in.height || l.pool_kernel > in.width) {
                        throw ConfigError("pool kernel larger than input " + to_string(in));
                    }
                    shapes.push_back({conv_output_extent(in.height, l.pool_kernel, l.pool_stride, 0, 1),
                                      conv_output_extent(in.width, l.pool_kernel, l.pool_stride, 0, 1),
                                      in.channels});
                    break;
                case LayerKind::global_avgpool:
                    shapes.push_back({1, 1, in.channels});
                    break;
                case LayerKind::add: {
                    if (!ref_ok(l.add_from)) {
                        throw ConfigError("add must reference an earlier layer");
                    }
                    const Shape other =
                        l.add_from == kGraphInput ? input : shapes[static_cast<std::size_t>(l.add_from)];
                    if (other != in) {
                        throw ConfigError("add operands differ: " + to_string(in) + " vs " +
                                          to_string(other));
                    }
                    shapes.push_back(in);
                    break;
                }
                case LayerKind::flatten:
                    shapes.push_back({1, 1, in.size()});
                    break;
                case LayerKind::fc:
                    if (in.height != 1 || in.width != 1) {
                        throw ConfigError("fc expects a 1x1xK input, got " + to_string(in));
                    }
                    if (l.fc_outputs == 0) throw ConfigError("fc needs >= 1 output");
                    shapes.push_back({1, 1, l.fc_outputs});
                    break;
            }
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    return shapes;
}

void ModelGraph::validate() const {
    if (layers.empty()) throw ConfigError("graph has no layers");
    std::set<std::string> names;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string& n = layers[i].name;
        if (n.empty() || n.front() == '@' || !names.insert(n).second) {
            throw ConfigError(layer_label(*this, i) + ": layer names must be unique, non-empty, and not start with '@'");
        }
    }
    const std::vector<Shape> shapes = layer_shapes();

    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        const std::string where = layer_label(*this, i);
        if (l.kind != LayerKind::conv && l.sparsity_enabled) {
            throw ConfigError(where + ": sparsity can only be enabled on conv layers");
        }
        if (l.kind == LayerKind::conv) {
            auto it = conv_weights.find(i);
            if (it == conv_weights.end()) throw ConfigError(where + ": missing conv weights");
            try {
                it->second.check_against(l.conv);
            } catch (const ConfigError& e) {
                throw ConfigError(where + ": " + e.what());
            }
            if (l.sparsity_enabled) {
                try {
                    resolution_ratio({input.height, input.width}, {shapes[i].height, shapes[i].width});
                } catch (const ConfigError& e) {
                    throw ConfigError(where + ": " + e.what());
                }
            }
        } else if (conv_weights.count(i) != 0) {
            throw ConfigError(where + ": conv weights attached to a non-conv layer");
        }
        if (l.kind == LayerKind::fc) {
            auto it = fc_weights.find(i);
            const Shape in = l.source == kGraphInput ? input : shapes[static_cast<std::size_t>(l.source)];
            if (it == fc_weights.end()) throw ConfigError(where + ": missing fc weights");
            const FcWeights& fc = it->second;
            if (fc.outputs != l.fc_outputs || fc.inputs != in.channels ||
                fc.weights.size() != fc.outputs * fc.inputs || fc.bias.size() != fc.outputs) {
                throw ConfigError(where + ": fc weights do not match layer dimensions");
            }
        } else if (fc_weights.count(i) != 0) {
            throw ConfigError(where + ": fc weights attached to a non-fc layer");
        }
    }
}

std::vector<std::size_t> ModelGraph::enabled_convs() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind == LayerKind::conv && layers[i].sparsity_enabled) out.push_back(i);
    }
    return out;
}

std::vector<Resolution> ModelGraph::mask_resolutions() const {
    const std::vector<Shape> shapes = layer_shapes();
    std::vector<Resolution> out;
    for (std::size_t i : enabled_convs()) out.push_back({shapes[i].height, shapes[i].width});
    return out;
}

std::size_t ModelGraph::index_of(const std::string& layer_name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].name == layer_name) return i;
    }
    throw ConfigError("no layer named '" + layer_name + "'");
}

bool default_sparsity_enabled(const ModelGraph& graph, std::size_t layer) {
    const LayerSpec& l = graph.layers.at(layer);
    if (l.kind != LayerKind::conv) return false;
    if (l.conv.kernel_h != 1 || l.conv.kernel_w != 1) return true;
    const int idx = static_cast<int>(layer);
    for (const LayerSpec& other : graph.layers) {
        if (other.kind == LayerKind::add && (other.source == idx || other.add_from == idx)) return false;
    }
    return true;
}

void SparsityConfig::apply(ModelGraph& graph) const {
    if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
        throw ConfigError("target sparsity must lie in [0, 1)");
    }
    schedule.validate();
    for (const auto& [name, enabled] : overrides) {
        LayerSpec& l = graph.layers[graph.index_of(name)];
        if (l.kind != LayerKind::conv) {
            throw ConfigError("sparsity override on non-conv layer '" + name + "'");
        }
        l.sparsity_enabled = enabled;
    }
    graph.validate();
}

MaskSet generate_masks(const ModelGraph& graph, std::uint64_t seed, std::uint64_t step,
                       double sparsity) {
    const std::vector<Resolution> res = graph.mask_resolutions();
    return propagate_masks(res, {graph.input.height, graph.input.width}, seed, step, sparsity);
}

void check_masks(const ModelGraph& graph, std::span<const SpatialMask> masks) {
    const std::vector<std::size_t> enabled = graph.enabled_convs();
    const std::vector<Resolution> res = graph.mask_resolutions();
    if (masks.size() != enabled.size()) {
        throw ConfigError("mask set has " + std::to_string(masks.size()) + " masks but the graph has " +
                          std::to_string(enabled.size()) + " sparsity-enabled convs");
    }
    for (std::size_t m = 0; m < masks.size(); ++m) {
        if (masks[m].height != res[m].height || masks[m].width != res[m].width ||
            masks[m].bits.size() != masks[m].positions()) {
            throw ConfigError("mask " + std::to_string(m) + " (" + std::to_string(masks[m].height) +
                              "x" + std::to_string(masks[m].width) + ") does not match layer '" +
                              graph.layers[enabled[m]].name + "' output " +
                              std::to_string(res[m].height) + "x" + std::to_string(res[m].width));
        }
    }
}

namespace {
LayerSpec named_layer(const std::string& name, LayerKind kind) {
    LayerSpec l;
    l.name = name;
    l.kind = kind;
    return l;
}
}  // namespace

GraphBuilder::GraphBuilder(std::string name, Shape input) {
    graph_.name = std::move(name);
    graph_.input = input;
}

std::size_t GraphBuilder::push(LayerSpec spec, int source) {
    spec.source = source == kPrevious ? static_cast<int>(graph_.layers.size()) - 1 : source;
    graph_.layers.push_back(std::move(spec));
    return graph_.layers.size() - 1;
}

std::size_t GraphBuilder::conv(const std::string& name, const ConvParams& params, int source) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::conv;
    l.conv = params;
    return push(l, source);
}

std::size_t GraphBuilder::relu(const std::string& name, int source) {
    return push(named_layer(name, LayerKind::relu), source);
}

std::size_t GraphBuilder::maxpool(const std::string& name, std::size_t kernel, std::size_t stride,
                                  int source) {
    LayerSpec l = named_layer(name, LayerKind::maxpool);
    l.pool_kernel = kernel;
    l.pool_stride = stride;
    return push(l, source);
}

std::size_t GraphBuilder::avgpool(const std::string& name, std::size_t kernel, std::size_t stride,
                                  int source) {
    LayerSpec l = named_layer(name, LayerKind::avgpool);
    l.pool_kernel = kernel;
    l.pool_stride = stride;
    return push(l, source);
}

std::size_t GraphBuilder::global_avgpool(const std::string& name, int source) {
    return push(named_layer(name, LayerKind::global_avgpool), source);
}

std::size_t GraphBuilder::add(const std::string& name, int from, int source) {
    LayerSpec l = named_layer(name, LayerKind::add);
    l.add_from = from;
    return push(l, source);
}

std::size_t GraphBuilder::flatten(const std::string& name, int source) {
    return push(named_layer(name, LayerKind::flatten), source);
}

std::size_t GraphBuilder::fc(const std::string& name, std::size_t outputs, int source) {
    LayerSpec l = named_layer(name, LayerKind::fc);
    l.fc_outputs = outputs;
    return push(l, source);
}

ModelGraph GraphBuilder::build() {
    ModelGraph g = graph_;
    const std::vector<Shape> shapes = g.layer_shapes();
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        if (l.kind == LayerKind::conv) {
            g.conv_weights.emplace(i, ConvWeights(l.conv));
        } else if (l.kind == LayerKind::fc) {
            const Shape in = l.source == kGraphInput ? g.input : shapes[static_cast<std::size_t>(l.source)];
            FcWeights fc{l.fc_outputs, in.channels, std::vector<float>(l.fc_outputs * in.channels, 0.0f),
                         std::vector<float>(l.fc_outputs, 0.0f)};
            g.fc_weights.emplace(i, std::move(fc));
        }
    }
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        g.layers[i].sparsity_enabled = default_sparsity_enabled(g, i);
    }
    g.validate();
    return g;
}

void init_weights(ModelGraph& graph, std::uint64_t seed, float gain) {
    std::mt19937_64 rng(seed);
    for (auto& [idx, w] : graph.conv_weights) {
        const float bound = gain * std::sqrt(6.0f / static_cast<float>(w.patch_len()));
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (float& v : w.filters) v = dist(rng);
        std::fill(w.bias.begin(), w.bias.end(), 0.0f);
    }
    for (auto& [idx, fc] : graph.fc_weights) {
        const float bound = gain * std::sqrt(6.0f / static_cast<float>(fc.inputs));
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (float& v : fc.weights) v = dist(rng);
        std::fill(fc.bias.begin(), fc.bias.end(), 0.0f);
    }
}

ModelGraph make_resnet18_shape(std::uint64_t seed) {
    GraphBuilder b("resnet18-shape", Shape{224, 224, 3});
    b.conv("conv1", ConvParams::square(7, 2, 3, 3, 64));
    b.relu("relu1");
    int block_in = static_cast<int>(b.maxpool("pool1", 2, 2));

    const std::size_t widths[] = {64, 128, 256, 512};
    std::size_t in_ch = 64;
    for (std::size_t stage = 0; stage < 4; ++stage) {
        for (std::size_t block = 0; block < 2; ++block) {
            const std::size_t out_ch = widths[stage];
            const std::size_t stride = (stage > 0 && block == 0) ? 2 : 1;
            const std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(block) + ".";
            b.conv(p + "conv1", ConvParams::square(3, stride, 1, in_ch, out_ch), block_in);
            b.relu(p + "relu1");
            const int main = static_cast<int>(b.conv(p + "conv2", ConvParams::square(3, 1, 1, out_ch, out_ch)));
            if (stride != 1 || in_ch != out_ch) {
                b.conv(p + "downsample", ConvParams::square(1, stride, 0, in_ch, out_ch), block_in);
                b.add(p + "add", main);
            } else {
                b.add(p + "add", block_in);
            }
            block_in = static_cast<int>(b.relu(p + "relu2"));
            in_ch = out_ch;
        }
    }
    b.global_avgpool("avgpool");
    b.fc("fc", 1000);
    ModelGraph g = b.build();
    // Gain below 1 keeps activations O(1) through eight un-normalized residual sums.
    init_weights(g, seed, 0.5f);
    return g;
}

ModelGraph make_toy_cnn(std::uint64_t seed, std::size_t classes) {
    GraphBuilder b("toy-cnn", Shape{32, 32, 1});
    b.conv("conv1", ConvParams::square(3, 1, 1, 1, 8));
    b.relu("relu1");
    b.maxpool("pool1", 2, 2);
    b.conv("conv2", ConvParams::square(3, 1, 1, 8, 16));
    b.relu("relu2");
    b.maxpool("pool2", 2, 2);
    b.conv("conv3", ConvParams::square(3, 1, 1, 16, 32));
    b.relu("relu3");
    b.global_avgpool("gap");
    b.fc("fc", classes);
    ModelGraph g = b.build();
    init_weights(g, seed);
    return g;
}

bool is_builtin(const std::string& name) { return name == "resnet18-shape" || name == "toy-cnn"; }

ModelGraph make_builtin(const std::string& name, std::uint64_t seed) {
    if (name == "resnet18-shape") return make_resnet18_shape(seed);
    if (name == "toy-cnn") return make_toy_cnn(seed);
    throw ConfigError("unknown builtin model '" + name + "'");
}

}  // namespace sparseconv
