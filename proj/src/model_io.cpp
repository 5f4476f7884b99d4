#include <cstring>
#include <string>

#include "json.hpp"
#include "sparseconv/bytes.hpp"
#include "sparseconv/error.hpp"
#include "sparseconv/model.hpp"

namespace sparseconv {
namespace {

using nlohmann::json;

constexpr int kModelFormatVersion = 1;
constexpr const char* kInputRef = "@input";

class BlobWriter {
public:
    json append(const std::vector<float>& values) {
        const std::size_t offset = blob_.size();
        blob_.resize(offset + values.size() * sizeof(float));
        if (!values.empty()) std::memcpy(blob_.data() + offset, values.data(), values.size() * sizeof(float));
        return json{{"offset", offset}, {"count", values.size()}};
    }
    std::vector<std::uint8_t>& bytes() { return blob_; }

private:
    std::vector<std::uint8_t> blob_;
};

std::vector<float> read_blob(std::span<const std::uint8_t> blob, const json& ref, std::size_t expected) {
    const auto offset = ref.at("offset").get<std::uint64_t>();
    const auto count = ref.at("count").get<std::uint64_t>();
    if (count != expected) {
        throw FormatError("blob reference holds " + std::to_string(count) + " floats, expected " +
                          std::to_string(expected));
    }
    if (offset % sizeof(float) != 0 || offset > blob.size() || count > (blob.size() - offset) / sizeof(float)) {
        throw FormatError("blob reference out of bounds");
    }
    std::vector<float> out(count);
    if (count != 0) std::memcpy(out.data(), blob.data() + offset, count * sizeof(float));
    return out;
}

json pair_json(std::size_t a, std::size_t b) { return json::array({a, b}); }

std::string ref_name(const ModelGraph& g, int idx) {
    return idx == kGraphInput ? std::string(kInputRef) : g.layers[static_cast<std::size_t>(idx)].name;
}

int resolve_ref(const std::vector<LayerSpec>& earlier, const std::string& name) {
    if (name == kInputRef) return kGraphInput;
    for (std::size_t i = 0; i < earlier.size(); ++i) {
        if (earlier[i].name == name) return static_cast<int>(i);
    }
    throw FormatError("reference to unknown or later layer '" + name + "'");
}

void read_pair(const json& j, std::size_t& a, std::size_t& b) {
    if (!j.is_array() || j.size() != 2) throw FormatError("expected a 2-element array");
    a = j[0].get<std::size_t>();
    b = j[1].get<std::size_t>();
}

}  // namespace

std::vector<std::uint8_t> save_model(const ModelGraph& graph) {
    graph.validate();
    BlobWriter blob;
    json layers = json::array();
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        json jl{{"name", l.name}, {"kind", to_string(l.kind)}, {"input", ref_name(graph, l.source)}};
        switch (l.kind) {
            case LayerKind::conv: {
                const ConvWeights& w = graph.conv_weights.at(i);
                jl["kernel"] = pair_json(l.conv.kernel_h, l.conv.kernel_w);
                jl["stride"] = pair_json(l.conv.stride_h, l.conv.stride_w);
                jl["padding"] = pair_json(l.conv.pad_h, l.conv.pad_w);
                jl["dilation"] = pair_json(l.conv.dilation_h, l.conv.dilation_w);
                jl["in_channels"] = l.conv.in_channels;
                jl["out_channels"] = l.conv.out_channels;
                jl["sparsity_enabled"] = l.sparsity_enabled;
                jl["weights"] = blob.append(w.filters);
                jl["bias"] = blob.append(w.bias);
                break;
            }
            case LayerKind::maxpool:
            case LayerKind::avgpool:
                jl["kernel"] = l.pool_kernel;
                jl["stride"] = l.pool_stride;
                break;
            case LayerKind::add:
                jl["from"] = ref_name(graph, l.add_from);
                break;
            case LayerKind::fc: {
                const FcWeights& fc = graph.fc_weights.at(i);
                jl["outputs"] = fc.outputs;
                jl["inputs"] = fc.inputs;
                jl["weights"] = blob.append(fc.weights);
                jl["bias"] = blob.append(fc.bias);
                break;
            }
            case LayerKind::relu:
            case LayerKind::global_avgpool:
            case LayerKind::flatten:
                break;
        }
        layers.push_back(std::move(jl));
    }

    const json manifest{
        {"format", "smod"},
        {"version", kModelFormatVersion},
        {"name", graph.name},
        {"input", {{"height", graph.input.height}, {"width", graph.input.width}, {"channels", graph.input.channels}}},
        {"layers", std::move(layers)},
        {"blob_bytes", blob.bytes().size()},
    };
    const std::string text = manifest.dump();

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + blob.bytes().size());
    bytes::put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob.bytes().begin(), blob.bytes().end());
    return out;
}

ModelGraph load_model(std::span<const std::uint8_t> data) {
    bytes::Reader in(data);
    const std::uint64_t manifest_len = in.u64("manifest length");
    if (manifest_len > in.remaining()) throw FormatError("truncated input while reading manifest");
    const auto text = in.take(static_cast<std::size_t>(manifest_len), "manifest");
    const auto blob = in.take(in.remaining(), "blob");

    json manifest;
    try {
        manifest = json::parse(text.begin(), text.end());
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }

    ModelGraph g;
    std::vector<std::pair<std::size_t, bool>> explicit_flags;
    try {
        if (manifest.at("format") != "smod") throw FormatError("manifest format is not 'smod'");
        if (manifest.at("version").get<int>() != kModelFormatVersion) {
            throw FormatError("unsupported .smod version");
        }
        if (manifest.at("blob_bytes").get<std::uint64_t>() != blob.size()) {
            throw FormatError("blob size does not match manifest");
        }
        g.name = manifest.at("name").get<std::string>();
        const json& jin = manifest.at("input");
        g.input = {jin.at("height").get<std::size_t>(), jin.at("width").get<std::size_t>(),
                   jin.at("channels").get<std::size_t>()};
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed manifest header: ") + e.what());
    }

    const json& jlayers = manifest.contains("layers") ? manifest["layers"] : json();
    if (!jlayers.is_array()) throw FormatError("manifest has no layer array");
    for (std::size_t i = 0; i < jlayers.size(); ++i) {
        const json& jl = jlayers[i];
        std::string label = "layer " + std::to_string(i);
        try {
            LayerSpec l;
            l.name = jl.at("name").get<std::string>();
            label += " '" + l.name + "'";
            l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
            l.source = resolve_ref(g.layers, jl.at("input").get<std::string>());
            switch (l.kind) {
                case LayerKind::conv: {
                    ConvParams& p = l.conv;
                    read_pair(jl.at("kernel"), p.kernel_h, p.kernel_w);
                    read_pair(jl.at("stride"), p.stride_h, p.stride_w);
                    const json& pad = jl.at("padding");
                    if (pad.is_array() && pad.size() == 4) {
                        // [top, bottom, left, right]
                        const auto v = pad.get<std::vector<std::size_t>>();
                        if (v[0] != v[1] || v[2] != v[3]) {
                            throw ConfigError("asymmetric padding is not supported");
                        }
                        p.pad_h = v[0];
                        p.pad_w = v[2];
                    } else {
                        read_pair(pad, p.pad_h, p.pad_w);
                    }
                    read_pair(jl.at("dilation"), p.dilation_h, p.dilation_w);
                    p.in_channels = jl.at("in_channels").get<std::size_t>();
                    p.out_channels = jl.at("out_channels").get<std::size_t>();
                    p.validate();
                    if (jl.contains("sparsity_enabled")) {
                        explicit_flags.emplace_back(i, jl["sparsity_enabled"].get<bool>());
                    }
                    ConvWeights w(p);
                    w.filters = read_blob(blob, jl.at("weights"), p.out_channels * p.patch_len());
                    w.bias = read_blob(blob, jl.at("bias"), p.out_channels);
                    g.conv_weights.emplace(i, std::move(w));
                    break;
                }
                case LayerKind::maxpool:
                case LayerKind::avgpool:
                    l.pool_kernel = jl.at("kernel").get<std::size_t>();
                    l.pool_stride = jl.at("stride").get<std::size_t>();
                    break;
                case LayerKind::add:
                    l.add_from = resolve_ref(g.layers, jl.at("from").get<std::string>());
                    break;
                case LayerKind::fc: {
                    FcWeights fc;
                    fc.outputs = jl.at("outputs").get<std::size_t>();
                    fc.inputs = jl.at("inputs").get<std::size_t>();
                    fc.weights = read_blob(blob, jl.at("weights"), fc.outputs * fc.inputs);
                    fc.bias = read_blob(blob, jl.at("bias"), fc.outputs);
                    l.fc_outputs = fc.outputs;
                    g.fc_weights.emplace(i, std::move(fc));
                    break;
                }
                case LayerKind::relu:
                case LayerKind::global_avgpool:
                case LayerKind::flatten:
                    break;
            }
            g.layers.push_back(std::move(l));
        } catch (const json::exception& e) {
            throw FormatError(label + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError(label + ": " + e.what());
        } catch (const ConfigError& e) {
            throw ConfigError(label + ": " + e.what());
        }
    }

    for (std::size_t i = 0; i < g.layers.size(); ++i) g.layers[i].sparsity_enabled = default_sparsity_enabled(g, i);
    for (const auto& [i, enabled] : explicit_flags) g.layers[i].sparsity_enabled = enabled;
    g.validate();
    return g;
}

}  // namespace sparseconv
