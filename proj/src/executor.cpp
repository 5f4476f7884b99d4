#include "sparseconv/executor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "sparseconv/error.hpp"

namespace sparseconv {
namespace {

const Tensor& source_of(const std::vector<Tensor>& outputs, const Tensor& input, int idx) {
    return idx == kGraphInput ? input : outputs[static_cast<std::size_t>(idx)];
}

// Mask index for each layer, or -1.
std::vector<int> mask_slots(const ModelGraph& graph) {
    std::vector<int> slots(graph.layers.size(), -1);
    const std::vector<std::size_t> enabled = graph.enabled_convs();
    for (std::size_t m = 0; m < enabled.size(); ++m) slots[enabled[m]] = static_cast<int>(m);
    return slots;
}

void check_input(const ModelGraph& graph, const Tensor& input) {
    if (input.shape() != graph.input) {
        throw ConfigError("input " + to_string(input.shape()) + " does not match graph input " +
                          to_string(graph.input));
    }
}

}  // namespace

Executor::Executor(const ModelGraph& graph, const MaskSet* masks)
    : graph_(&graph), shapes_(graph.layer_shapes()), plans_(graph.layers.size()),
      outputs_(graph.layers.size()) {
    if (masks != nullptr) check_masks(graph, *masks);
    const std::vector<int> slots = mask_slots(graph);
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        if (l.kind != LayerKind::conv) continue;
        const Shape in = l.source == kGraphInput ? graph.input : shapes_[static_cast<std::size_t>(l.source)];
        const SpatialMask* mask =
            (masks != nullptr && slots[i] >= 0) ? &(*masks)[static_cast<std::size_t>(slots[i])] : nullptr;
        plans_[i].emplace(in, l.conv, graph.conv_weights.at(i), mask);
    }
}

const std::vector<Tensor>& Executor::run_all(const Tensor& input, const ExecOptions& options,
                                             const ConvOutputHook& hook) {
    check_input(*graph_, input);
    const ModelGraph& g = *graph_;
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        const Tensor& in = source_of(outputs_, input, l.source);
        if (l.kind == LayerKind::conv) {
            plans_[i]->run(in, outputs_[i], options.stats, options.threads);
            if (hook) hook(i, outputs_[i]);
            continue;
        }
        Tensor& out = outputs_[i];
        // Reuse per-layer buffers across runs for the elementwise and pooling layers.
        switch (l.kind) {
            case LayerKind::relu:
                out.reshape_for_overwrite(in.shape());
                for (std::size_t k = 0; k < in.size(); ++k) out.data()[k] = in.data()[k] > 0.0f ? in.data()[k] : 0.0f;
                break;
            case LayerKind::add: {
                const Tensor& other = source_of(outputs_, input, l.add_from);
                if (other.shape() != in.shape()) {
                    throw ConfigError("add '" + l.name + "' shape mismatch");
                }
                out.reshape_for_overwrite(in.shape());
                for (std::size_t k = 0; k < in.size(); ++k) out.data()[k] = in.data()[k] + other.data()[k];
                break;
            }
            case LayerKind::maxpool:
            case LayerKind::avgpool:
                pool2d_into(in, l.kind == LayerKind::maxpool ? PoolKind::max : PoolKind::avg, l.pool_kernel,
                            l.pool_stride, out);
                break;
            default:
                out = apply_layer(g, i, in, nullptr);
        }
    }
    return outputs_;
}

const Tensor& Executor::run(const Tensor& input, const ExecOptions& options) {
    return run_all(input, options).back();
}

Tensor apply_layer(const ModelGraph& graph, std::size_t layer, const Tensor& in, const Tensor* other) {
    const LayerSpec& l = graph.layers[layer];
    switch (l.kind) {
        case LayerKind::relu:
            return relu(in);
        case LayerKind::maxpool:
            return pool2d(in, PoolKind::max, l.pool_kernel, l.pool_stride);
        case LayerKind::avgpool:
            return pool2d(in, PoolKind::avg, l.pool_kernel, l.pool_stride);
        case LayerKind::global_avgpool:
            return global_avg_pool(in);
        case LayerKind::add:
            SPARSECONV_INVARIANT(other != nullptr);
            return elementwise_add(in, *other);
        case LayerKind::flatten:
            return Tensor(Shape{1, 1, in.size()}, std::vector<float>(in.values().begin(), in.values().end()));
        case LayerKind::fc:
            return Tensor(Shape{1, 1, l.fc_outputs}, fully_connected(in.values(), graph.fc_weights.at(layer)));
        case LayerKind::conv:
            break;
    }
    throw ConfigError("apply_layer called on a conv layer");
}

std::vector<float> infer(const ModelGraph& graph, const Tensor& input, const MaskSet* masks,
                         const ExecOptions& options) {
    Executor exec(graph, masks);
    const Tensor& out = exec.run(input, options);
    return {out.values().begin(), out.values().end()};
}

void apply_mask(Tensor& t, const SpatialMask& mask) {
    if (t.shape().height != mask.height || t.shape().width != mask.width) {
        throw ConfigError("mask does not match tensor " + to_string(t.shape()));
    }
    for (std::size_t p = 0; p < mask.positions(); ++p) {
        if (mask.bits[p] == 0) std::fill_n(t.data() + p * t.shape().channels, t.shape().channels, 0.0f);
    }
}

std::vector<Tensor> reference_forward(const ModelGraph& graph, const Tensor& input,
                                      const MaskSet* masks) {
    check_input(graph, input);
    if (masks != nullptr) check_masks(graph, *masks);
    const std::vector<int> slots = mask_slots(graph);
    std::vector<Tensor> outputs(graph.layers.size());
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        const Tensor& in = source_of(outputs, input, l.source);
        if (l.kind == LayerKind::conv) {
            outputs[i] = direct_conv2d(in, graph.conv_weights.at(i), l.conv);
            if (masks != nullptr && slots[i] >= 0) apply_mask(outputs[i], (*masks)[static_cast<std::size_t>(slots[i])]);
        } else {
            const Tensor* other = l.kind == LayerKind::add ? &source_of(outputs, input, l.add_from) : nullptr;
            outputs[i] = apply_layer(graph, i, in, other);
        }
    }
    return outputs;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::fabs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]));
        if (!(d <= worst)) worst = d;  // NaN propagates as the worst case
    }
    return worst;
}

bool VerifyReport::passed() const {
    return !end_to_end_flagged &&
           std::none_of(layers.begin(), layers.end(), [](const LayerDiff& d) { return d.flagged; });
}

std::vector<std::size_t> VerifyReport::flagged_layers() const {
    std::vector<std::size_t> out;
    for (const LayerDiff& d : layers) {
        if (d.flagged) out.push_back(d.layer);
    }
    return out;
}

std::string VerifyReport::to_text() const {
    std::ostringstream os;
    char buf[256];
    for (const LayerDiff& d : layers) {
        std::snprintf(buf, sizeof(buf), "%-24s %-6s max_abs_diff=%.3e %s\n", d.name.c_str(),
                      d.sparse ? "sparse" : "dense", d.max_abs_diff, d.flagged ? "FAIL" : "ok");
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-24s %-6s max_abs_diff=%.3e %s\n", "end2end", "", end_to_end_diff,
                  end_to_end_flagged ? "FAIL" : "ok");
    os << buf;
    std::snprintf(buf, sizeof(buf), "tolerance %.1e: %s\n", tolerance, passed() ? "PASS" : "FAIL");
    os << buf;
    return os.str();
}

VerifyReport verify_equivalence(const ModelGraph& graph, const Tensor& input, const MaskSet* masks,
                                double tolerance, const ConvOutputHook& hook) {
    const std::vector<Tensor> ref = reference_forward(graph, input, masks);
    Executor exec(graph, masks);
    const std::vector<int> slots = mask_slots(graph);

    VerifyReport report;
    report.tolerance = tolerance;
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        if (l.kind != LayerKind::conv) continue;
        Tensor fast = exec.plan(i).run(source_of(ref, input, l.source));
        if (hook) hook(i, fast);
        LayerDiff d;
        d.layer = i;
        d.name = l.name;
        d.sparse = masks != nullptr && slots[i] >= 0;
        d.max_abs_diff = max_abs_diff(fast, ref[i]);
        d.flagged = !(d.max_abs_diff <= tolerance);
        report.layers.push_back(std::move(d));
    }
    const Tensor& out = exec.run_all(input, {}, hook).back();
    report.end_to_end_diff = max_abs_diff(out, ref.back());
    report.end_to_end_flagged = !(report.end_to_end_diff <= tolerance);
    return report;
}

}  // namespace sparseconv
