#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sparseconv/model.hpp"

namespace sparseconv {

/// One latency measurement: a single sparsity-enabled conv or the whole
/// network ("end2end"). Latencies are medians over the repeats.
struct BenchRecord {
    std::string model;
    std::string layer;
    double sparsity = 0.0;
    std::size_t retained_cols = 0;
    double dense_ms = 0.0;
    double sparse_ms = 0.0;
    double speedup = 0.0;  // dense_ms / sparse_ms

    bool operator==(const BenchRecord&) const = default;
};

/// Instrumented GEMM work for one layer at one sparsity level.
struct LayerWork {
    std::string layer;
    double sparsity = 0.0;
    std::size_t positions = 0;      // z = out_h * out_w
    std::size_t retained_cols = 0;
    std::size_t out_channels = 0;
    std::size_t patch_len = 0;
    std::uint64_t macs = 0;         // counted inside the GEMM
};

struct BenchOptions {
    std::vector<double> sparsities{0.0, 0.1, 0.2, 0.3, 0.5};
    std::size_t repeats = 10;
    std::size_t warmup = 3;
    std::size_t threads = 1;
    std::uint64_t seed = 1;
    bool per_layer = true;
    bool end_to_end = true;
};

struct BenchResult {
    std::vector<BenchRecord> records;
    std::vector<LayerWork> work;
    std::vector<std::string> warnings;  // soft checks (e.g. non-monotone speedup)
};

/// Times the dense GEMM path against the masked path for every sparsity
/// level, using propagated masks from one seed for all levels. Dense and
/// sparse runs are interleaved per repeat. Throws ConfigError if repeats < 5.
BenchResult bench_model(const ModelGraph& graph, const BenchOptions& options);

double median(std::vector<double> values);

inline constexpr std::string_view kBenchCsvHeader =
    "model,layer,sparsity,retained_cols,dense_ms,sparse_ms,speedup";

/// UTF-8, LF line endings, header first; doubles in shortest round-trip form.
std::string write_bench_csv(const std::vector<BenchRecord>& records);
/// Throws FormatError on a wrong header or malformed row.
std::vector<BenchRecord> parse_bench_csv(std::string_view text);

}  // namespace sparseconv
