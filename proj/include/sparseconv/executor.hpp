#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sparseconv/mask.hpp"
#include "sparseconv/model.hpp"
#include "sparseconv/sparse_conv.hpp"
#include "sparseconv/tensor.hpp"

namespace sparseconv {

struct ExecOptions {
    std::size_t threads = 1;
    GemmStats* stats = nullptr;
};

/// Called with (layer index, conv output) right after a conv runs on the
/// fast path. Test fixtures use it to inject faults.
using ConvOutputHook = std::function<void(std::size_t, Tensor&)>;

/// Runs a graph through the GEMM path. Every conv gets a prepared plan at
/// construction: enabled convs use their mask, everything else (and every
/// conv when `masks` is null) runs the dense indirection path. The graph must
/// outlive the executor. Not safe for concurrent `run` calls on one instance.
class Executor {
public:
    Executor(const ModelGraph& graph, const MaskSet* masks);

    /// Final layer output.
    const Tensor& run(const Tensor& input, const ExecOptions& options = {});
    /// Every layer's output, in layer order.
    const std::vector<Tensor>& run_all(const Tensor& input, const ExecOptions& options = {},
                                       const ConvOutputHook& hook = {});

    SparseConvPlan& plan(std::size_t layer) { return *plans_.at(layer); }
    const std::vector<Shape>& shapes() const { return shapes_; }
    const ModelGraph& graph() const { return *graph_; }

private:
    const ModelGraph* graph_;
    std::vector<Shape> shapes_;
    std::vector<std::optional<SparseConvPlan>> plans_;
    std::vector<Tensor> outputs_;
};

/// Applies one non-conv layer. `in` is the layer's source output and `other`
/// the add operand (ignored for other kinds).
Tensor apply_layer(const ModelGraph& graph, std::size_t layer, const Tensor& in, const Tensor* other);

/// Fast-path inference returning the flattened final output.
std::vector<float> infer(const ModelGraph& graph, const Tensor& input, const MaskSet* masks,
                         const ExecOptions& options = {});

/// Zero every channel at masked positions.
void apply_mask(Tensor& t, const SpatialMask& mask);

/// Independent reference: direct convolution for every conv, then zeroing at
/// masked positions of enabled convs. Returns every layer's output.
std::vector<Tensor> reference_forward(const ModelGraph& graph, const Tensor& input,
                                      const MaskSet* masks);

double max_abs_diff(const Tensor& a, const Tensor& b);

struct LayerDiff {
    std::size_t layer = 0;
    std::string name;
    bool sparse = false;  // ran with a mask
    double max_abs_diff = 0.0;
    bool flagged = false;
};

struct VerifyReport {
    double tolerance = 0.0;
    std::vector<LayerDiff> layers;  // one entry per conv layer
    double end_to_end_diff = 0.0;
    bool end_to_end_flagged = false;

    bool passed() const;
    std::vector<std::size_t> flagged_layers() const;
    std::string to_text() const;
};

/// Compares each conv's fast-path output against the reference when both
/// are fed the reference input of that layer, plus a full end-to-end run.
/// `hook` is applied to fast-path conv outputs only.
VerifyReport verify_equivalence(const ModelGraph& graph, const Tensor& input, const MaskSet* masks,
                                double tolerance, const ConvOutputHook& hook = {});

}  // namespace sparseconv
