#include "sparseconv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sparseconv/error.hpp"
#include "sparseconv/executor.hpp"

namespace sparseconv {

template <typename T>
Network<T>::Network(const ModelGraph& graph)
    : graph_(&graph), shapes_(graph.layer_shapes()), mask_slot_(graph.layers.size(), -1),
      param_index_(graph.layers.size(), -1) {
    const std::vector<std::size_t> enabled = graph.enabled_convs();
    for (std::size_t m = 0; m < enabled.size(); ++m) mask_slot_[enabled[m]] = static_cast<int>(m);

    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        if (l.kind == LayerKind::conv) {
            const ConvWeights& w = graph.conv_weights.at(i);
            const std::size_t n = w.out_channels;
            const std::size_t k = w.patch_len();
            ParamBlock filters{i, Role::conv_filters, std::vector<T>(k * n)};
            for (std::size_t o = 0; o < n; ++o) {
                for (std::size_t t = 0; t < k; ++t) filters.values[t * n + o] = static_cast<T>(w.filters[o * k + t]);
            }
            param_index_[i] = static_cast<int>(params_.size());
            params_.push_back(std::move(filters));
            params_.push_back({i, Role::conv_bias, std::vector<T>(w.bias.begin(), w.bias.end())});
        } else if (l.kind == LayerKind::fc) {
            const FcWeights& fc = graph.fc_weights.at(i);
            param_index_[i] = static_cast<int>(params_.size());
            params_.push_back({i, Role::fc_weights, std::vector<T>(fc.weights.begin(), fc.weights.end())});
            params_.push_back({i, Role::fc_bias, std::vector<T>(fc.bias.begin(), fc.bias.end())});
        }
    }
}

template <typename T>
std::vector<T> Network<T>::forward(const Tensor& input, const MaskSet* masks, Cache& cache) const {
    const ModelGraph& g = *graph_;
    if (input.shape() != g.input) throw ConfigError("input does not match graph input shape");
    if (masks != nullptr) check_masks(g, *masks);

    cache.input.shape = input.shape();
    cache.input.values.assign(input.values().begin(), input.values().end());
    cache.outputs.resize(g.layers.size());
    cache.argmax.resize(g.layers.size());
    cache.masks.assign(g.layers.size(), nullptr);

    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        const Activation& in = l.source == kGraphInput ? cache.input : cache.outputs[static_cast<std::size_t>(l.source)];
        Activation& out = cache.outputs[i];
        out.shape = shapes_[i];
        out.values.assign(out.shape.size(), T(0));
        const Shape& is = in.shape;
        const Shape& os = out.shape;

        switch (l.kind) {
            case LayerKind::conv: {
                const ConvParams& p = l.conv;
                const auto& wt = params_[static_cast<std::size_t>(param_index_[i])].values;
                const auto& bias = params_[static_cast<std::size_t>(param_index_[i]) + 1].values;
                const std::size_t n = os.channels;
                const SpatialMask* mask =
                    (masks != nullptr && mask_slot_[i] >= 0) ? &(*masks)[static_cast<std::size_t>(mask_slot_[i])] : nullptr;
                cache.masks[i] = mask;
                std::vector<T> acc(n);
                for (std::size_t oy = 0; oy < os.height; ++oy) {
                    for (std::size_t ox = 0; ox < os.width; ++ox) {
                        T* dst = out.values.data() + (oy * os.width + ox) * n;
                        if (mask != nullptr && !mask->kept(oy, ox)) continue;  // stays zero
                        std::fill(acc.begin(), acc.end(), T(0));
                        for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride_h + ky * p.dilation_h) -
                                            static_cast<std::ptrdiff_t>(p.pad_h);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
                            for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride_w + kx * p.dilation_w) -
                                                static_cast<std::ptrdiff_t>(p.pad_w);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.width)) continue;
                                const T* px = in.values.data() +
                                              (static_cast<std::size_t>(iy) * is.width + static_cast<std::size_t>(ix)) * is.channels;
                                const T* wrow = wt.data() + (ky * p.kernel_w + kx) * is.channels * n;
                                for (std::size_t c = 0; c < is.channels; ++c) {
                                    const T a = px[c];
                                    const T* w = wrow + c * n;
                                    for (std::size_t o = 0; o < n; ++o) acc[o] += a * w[o];
                                }
                            }
                        }
                        for (std::size_t o = 0; o < n; ++o) dst[o] = acc[o] + bias[o];
                    }
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t j = 0; j < in.values.size(); ++j) out.values[j] = in.values[j] > T(0) ? in.values[j] : T(0);
                break;
            case LayerKind::maxpool: {
                auto& arg = cache.argmax[i];
                arg.assign(os.size(), 0);
                for (std::size_t oy = 0; oy < os.height; ++oy) {
                    for (std::size_t ox = 0; ox < os.width; ++ox) {
                        for (std::size_t c = 0; c < os.channels; ++c) {
                            T best = -std::numeric_limits<T>::infinity();
                            std::uint32_t best_idx = 0;
                            for (std::size_t ky = 0; ky < l.pool_kernel; ++ky) {
                                for (std::size_t kx = 0; kx < l.pool_kernel; ++kx) {
                                    const std::size_t idx =
                                        ((oy * l.pool_stride + ky) * is.width + ox * l.pool_stride + kx) * is.channels + c;
                                    if (in.values[idx] > best) {
                                        best = in.values[idx];
                                        best_idx = static_cast<std::uint32_t>(idx);
                                    }
                                }
                            }
                            const std::size_t o = (oy * os.width + ox) * os.channels + c;
                            out.values[o] = best;
                            arg[o] = best_idx;
                        }
                    }
                }
                break;
            }
            case LayerKind::avgpool: {
                const T inv = T(1) / static_cast<T>(l.pool_kernel * l.pool_kernel);
                for (std::size_t oy = 0; oy < os.height; ++oy) {
                    for (std::size_t ox = 0; ox < os.width; ++ox) {
                        for (std::size_t c = 0; c < os.channels; ++c) {
                            T acc = 0;
                            for (std::size_t ky = 0; ky < l.pool_kernel; ++ky) {
                                for (std::size_t kx = 0; kx < l.pool_kernel; ++kx) {
                                    acc += in.values[((oy * l.pool_stride + ky) * is.width + ox * l.pool_stride + kx) * is.channels + c];
                                }
                            }
                            out.values[(oy * os.width + ox) * os.channels + c] = acc * inv;
                        }
                    }
                }
                break;
            }
            case LayerKind::global_avgpool: {
                for (std::size_t pp = 0; pp < is.positions(); ++pp) {
                    for (std::size_t c = 0; c < is.channels; ++c) out.values[c] += in.values[pp * is.channels + c];
                }
                const T inv = T(1) / static_cast<T>(is.positions());
                for (T& v : out.values) v *= inv;
                break;
            }
            case LayerKind::add: {
                const Activation& other =
                    l.add_from == kGraphInput ? cache.input : cache.outputs[static_cast<std::size_t>(l.add_from)];
                for (std::size_t j = 0; j < out.values.size(); ++j) out.values[j] = in.values[j] + other.values[j];
                break;
            }
            case LayerKind::flatten:
                out.values = in.values;
                break;
            case LayerKind::fc: {
                const std::size_t base = static_cast<std::size_t>(param_index_[i]);
                const auto& w = params_[base].values;
                const auto& b = params_[base + 1].values;
                const std::size_t k = is.channels;
                for (std::size_t o = 0; o < os.channels; ++o) {
                    T acc = 0;
                    for (std::size_t j = 0; j < k; ++j) acc += w[o * k + j] * in.values[j];
                    out.values[o] = acc + b[o];
                }
                break;
            }
        }
    }
    return cache.outputs.back().values;
}

template <typename T>
void Network<T>::backward(const Cache& cache, std::span<const T> dlogits,
                          std::vector<std::vector<T>>& grads) const {
    const ModelGraph& g = *graph_;
    std::vector<std::vector<T>> dout(g.layers.size());
    for (std::size_t i = 0; i < g.layers.size(); ++i) dout[i].assign(shapes_[i].size(), T(0));
    SPARSECONV_INVARIANT(dlogits.size() == dout.back().size());
    std::copy(dlogits.begin(), dlogits.end(), dout.back().begin());
    std::vector<T> dinput_scratch;

    for (std::size_t i = g.layers.size(); i-- > 0;) {
        const LayerSpec& l = g.layers[i];
        const std::vector<T>& dy = dout[i];
        const Activation& in = l.source == kGraphInput ? cache.input : cache.outputs[static_cast<std::size_t>(l.source)];
        // Gradient w.r.t. the graph input is not needed; route it to scratch.
        std::vector<T>* dx_ptr = &dinput_scratch;
        if (l.source != kGraphInput) {
            dx_ptr = &dout[static_cast<std::size_t>(l.source)];
        } else {
            dinput_scratch.assign(in.values.size(), T(0));
        }
        std::vector<T>& dx = *dx_ptr;
        const Shape& is = in.shape;
        const Shape& os = shapes_[i];

        switch (l.kind) {
            case LayerKind::conv: {
                const ConvParams& p = l.conv;
                const std::size_t base = static_cast<std::size_t>(param_index_[i]);
                const auto& wt = params_[base].values;
                auto& dw = grads[base];
                auto& db = grads[base + 1];
                const std::size_t n = os.channels;
                const SpatialMask* mask = cache.masks[i];
                const bool need_dx = l.source != kGraphInput;
                for (std::size_t oy = 0; oy < os.height; ++oy) {
                    for (std::size_t ox = 0; ox < os.width; ++ox) {
                        // Masked outputs are constant zero: no gradient flows.
                        if (mask != nullptr && !mask->kept(oy, ox)) continue;
                        const T* g_out = dy.data() + (oy * os.width + ox) * n;
                        for (std::size_t o = 0; o < n; ++o) db[o] += g_out[o];
                        for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride_h + ky * p.dilation_h) -
                                            static_cast<std::ptrdiff_t>(p.pad_h);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
                            for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride_w + kx * p.dilation_w) -
                                                static_cast<std::ptrdiff_t>(p.pad_w);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.width)) continue;
                                const std::size_t pix =
                                    (static_cast<std::size_t>(iy) * is.width + static_cast<std::size_t>(ix)) * is.channels;
                                const std::size_t tap0 = (ky * p.kernel_w + kx) * is.channels;
                                for (std::size_t c = 0; c < is.channels; ++c) {
                                    const T a = in.values[pix + c];
                                    T* dwr = dw.data() + (tap0 + c) * n;
                                    const T* wr = wt.data() + (tap0 + c) * n;
                                    T acc = 0;
                                    for (std::size_t o = 0; o < n; ++o) {
                                        dwr[o] += a * g_out[o];
                                        acc += wr[o] * g_out[o];
                                    }
                                    if (need_dx) dx[pix + c] += acc;
                                }
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t j = 0; j < dy.size(); ++j) {
                    if (in.values[j] > T(0)) dx[j] += dy[j];
                }
                break;
            case LayerKind::maxpool: {
                const auto& arg = cache.argmax[i];
                for (std::size_t j = 0; j < dy.size(); ++j) dx[arg[j]] += dy[j];
                break;
            }
            case LayerKind::avgpool: {
                const T inv = T(1) / static_cast<T>(l.pool_kernel * l.pool_kernel);
                for (std::size_t oy = 0; oy < os.height; ++oy) {
                    for (std::size_t ox = 0; ox < os.width; ++ox) {
                        for (std::size_t c = 0; c < os.channels; ++c) {
                            const T gv = dy[(oy * os.width + ox) * os.channels + c] * inv;
                            for (std::size_t ky = 0; ky < l.pool_kernel; ++ky) {
                                for (std::size_t kx = 0; kx < l.pool_kernel; ++kx) {
                                    dx[((oy * l.pool_stride + ky) * is.width + ox * l.pool_stride + kx) * is.channels + c] += gv;
                                }
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::global_avgpool: {
                const T inv = T(1) / static_cast<T>(is.positions());
                for (std::size_t pp = 0; pp < is.positions(); ++pp) {
                    for (std::size_t c = 0; c < is.channels; ++c) dx[pp * is.channels + c] += dy[c] * inv;
                }
                break;
            }
            case LayerKind::add: {
                for (std::size_t j = 0; j < dy.size(); ++j) dx[j] += dy[j];
                if (l.add_from != kGraphInput) {
                    auto& dother = dout[static_cast<std::size_t>(l.add_from)];
                    for (std::size_t j = 0; j < dy.size(); ++j) dother[j] += dy[j];
                }
                break;
            }
            case LayerKind::flatten:
                for (std::size_t j = 0; j < dy.size(); ++j) dx[j] += dy[j];
                break;
            case LayerKind::fc: {
                const std::size_t base = static_cast<std::size_t>(param_index_[i]);
                const auto& w = params_[base].values;
                auto& dw = grads[base];
                auto& db = grads[base + 1];
                const std::size_t k = is.channels;
                for (std::size_t o = 0; o < os.channels; ++o) {
                    db[o] += dy[o];
                    for (std::size_t j = 0; j < k; ++j) {
                        dw[o * k + j] += dy[o] * in.values[j];
                        dx[j] += w[o * k + j] * dy[o];
                    }
                }
                break;
            }
        }
    }
}

template <typename T>
std::vector<std::vector<T>> Network<T>::zero_grads() const {
    std::vector<std::vector<T>> grads;
    grads.reserve(params_.size());
    for (const ParamBlock& b : params_) grads.emplace_back(b.values.size(), T(0));
    return grads;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
    std::size_t total = 0;
    for (const ParamBlock& b : params_) total += b.values.size();
    return total;
}

template <typename T>
void Network<T>::export_to(ModelGraph& graph) const {
    for (const ParamBlock& b : params_) {
        switch (b.role) {
            case Role::conv_filters: {
                ConvWeights& w = graph.conv_weights.at(b.layer);
                const std::size_t n = w.out_channels;
                const std::size_t k = w.patch_len();
                for (std::size_t o = 0; o < n; ++o) {
                    for (std::size_t t = 0; t < k; ++t) w.filters[o * k + t] = static_cast<float>(b.values[t * n + o]);
                }
                break;
            }
            case Role::conv_bias: {
                auto& dst = graph.conv_weights.at(b.layer).bias;
                std::transform(b.values.begin(), b.values.end(), dst.begin(), [](T v) { return static_cast<float>(v); });
                break;
            }
            case Role::fc_weights: {
                auto& dst = graph.fc_weights.at(b.layer).weights;
                std::transform(b.values.begin(), b.values.end(), dst.begin(), [](T v) { return static_cast<float>(v); });
                break;
            }
            case Role::fc_bias: {
                auto& dst = graph.fc_weights.at(b.layer).bias;
                std::transform(b.values.begin(), b.values.end(), dst.begin(), [](T v) { return static_cast<float>(v); });
                break;
            }
        }
    }
}

template <typename T>
T softmax_cross_entropy(std::span<const T> logits, int label, T scale, std::span<T> dlogits) {
    SPARSECONV_INVARIANT(label >= 0 && static_cast<std::size_t>(label) < logits.size());
    SPARSECONV_INVARIANT(dlogits.size() == logits.size());
    const T peak = *std::max_element(logits.begin(), logits.end());
    T total = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        dlogits[i] = std::exp(logits[i] - peak);
        total += dlogits[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
        dlogits[i] = dlogits[i] / total - (static_cast<int>(i) == label ? T(1) : T(0));
        dlogits[i] *= scale;
    }
    return std::log(total) - (logits[static_cast<std::size_t>(label)] - peak);
}

template class Network<float>;
template class Network<double>;
template float softmax_cross_entropy<float>(std::span<const float>, int, float, std::span<float>);
template double softmax_cross_entropy<double>(std::span<const double>, int, double, std::span<double>);

void optimizer_step(std::vector<Network<float>::ParamBlock>& params, AdamState& state,
                    const std::vector<std::vector<float>>& grads, const AdamConfig& config,
                    double learning_rate) {
    SPARSECONV_INVARIANT(grads.size() == params.size());
    if (state.first_moment.empty()) {
        for (const auto& b : params) {
            state.first_moment.emplace_back(b.values.size(), 0.0f);
            state.second_moment.emplace_back(b.values.size(), 0.0f);
        }
    }
    ++state.steps;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.steps));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.steps));
    const auto b1 = static_cast<float>(config.beta1);
    const auto b2 = static_cast<float>(config.beta2);
    const auto step_size = static_cast<float>(learning_rate / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(config.epsilon);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& w = params[k].values;
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        const auto& gk = grads[k];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1.0f - b1) * gk[j];
            v[j] = b2 * v[j] + (1.0f - b2) * gk[j] * gk[j];
            w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
        }
    }
}

const char* to_string(Stage stage) {
    switch (stage) {
        case Stage::dense:
            return "dense";
        case Stage::ramp:
            return "ramp";
        case Stage::frozen:
            return "frozen";
    }
    return "unknown";
}

Trainer::Trainer(const ModelGraph& graph, const Dataset& data, TrainOptions options)
    : graph_(graph), options_(std::move(options)), net_(graph_),
      sampler_(data, options_.batch_size, options_.seed), mask_res_(graph_.mask_resolutions()) {
    options_.schedule.total_steps = options_.steps;
    options_.schedule.validate();
    if (options_.steps == 0) throw ConfigError("training needs at least one step");
    for (const Resolution& r : mask_res_) masks_.push_back(SpatialMask::ones(r.height, r.width));
}

MaskSet Trainer::masks_for_step(std::size_t t, double sparsity) const {
    if (options_.mask_mode == MaskMode::independent) {
        return independent_masks(mask_res_, options_.seed, t, sparsity);
    }
    return propagate_masks(mask_res_, {graph_.input.height, graph_.input.width}, options_.seed, t, sparsity);
}

StepRecord Trainer::step() {
    if (t_ >= options_.steps) throw UsageError("training already finished");
    const SparsitySchedule& sched = options_.schedule;
    StepRecord rec;
    rec.step = t_;
    rec.stage = sched.stage(t_);
    rec.sparsity = sparsity_at_step(t_, sched);

    // Masked forward outside the dense stage. Masks are resampled every
    // step until the first frozen step, which fixes the set for good.
    const bool masked = rec.stage != Stage::dense;
    if (masked && !frozen_) {
        masks_ = masks_for_step(t_, rec.sparsity);
        if (rec.stage == Stage::frozen) frozen_ = true;
    }

    const Batch batch = sampler_.next();
    auto grads = net_.zero_grads();
    Network<float>::Cache cache;
    std::vector<float> dlogits;
    const float scale = 1.0f / static_cast<float>(batch.inputs.size());
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
        const std::vector<float> logits = net_.forward(*batch.inputs[b], masked ? &masks_ : nullptr, cache);
        dlogits.resize(logits.size());
        loss += softmax_cross_entropy<float>(logits, batch.labels[b], scale, dlogits);
        const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
        if (best == batch.labels[b]) ++correct;
        net_.backward(cache, dlogits, grads);
    }
    optimizer_step(net_.params(), adam_, grads, options_.adam, options_.adam.learning_rate);

    rec.loss = loss / static_cast<double>(batch.inputs.size());
    rec.accuracy = static_cast<double>(correct) / static_cast<double>(batch.inputs.size());
    rec.mask_hash = mask_set_hash(masks_);
    for (const SpatialMask& m : masks_) rec.zero_counts.push_back(m.zero_count());
    ++t_;
    return rec;
}

ModelGraph Trainer::trained_graph() const {
    ModelGraph out = graph_;
    net_.export_to(out);
    return out;
}

TrainResult train(const ModelGraph& graph, const Dataset& data, const TrainOptions& options,
                  const std::function<void(const StepRecord&)>& on_step) {
    Trainer trainer(graph, data, options);
    TrainResult result;
    result.history.reserve(options.steps);
    for (std::size_t t = 0; t < options.steps; ++t) {
        result.history.push_back(trainer.step());
        if (on_step) on_step(result.history.back());
    }
    result.graph = trainer.trained_graph();
    result.masks = trainer.current_masks();
    return result;
}

double evaluate_accuracy(const ModelGraph& graph, const Dataset& data, const MaskSet* masks) {
    if (data.size() == 0) return 0.0;
    Executor exec(graph, masks);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor& out = exec.run(data.images[i]);
        const auto best = std::max_element(out.values().begin(), out.values().end()) - out.values().begin();
        if (best == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace sparseconv
