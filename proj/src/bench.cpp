#include "sparseconv/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <random>
#include <sstream>

#include "sparseconv/error.hpp"
#include "sparseconv/executor.hpp"
#include "sparseconv/sparse_conv.hpp"

namespace sparseconv {
namespace {

using Clock = std::chrono::steady_clock;

template <typename Fn>
double time_ms(Fn&& fn) {
    const auto start = Clock::now();
    fn();
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Tensor random_input(const Shape& shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    Tensor t(shape);
    for (float& v : t.values()) v = dist(rng);
    return t;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(std::string_view s, std::size_t line) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw FormatError("CSV line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
    }
    return v;
}

}  // namespace

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    return values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

BenchResult bench_model(const ModelGraph& graph, const BenchOptions& options) {
    if (options.repeats < 5) throw ConfigError("benchmark needs at least 5 repeats");
    graph.validate();
    BenchResult result;
    const Tensor input = random_input(graph.input, options.seed);
    const std::vector<std::size_t> enabled = graph.enabled_convs();
    const std::vector<Shape> shapes = graph.layer_shapes();

    // Per-layer inputs come from one dense reference pass.
    Executor dense_exec(graph, nullptr);
    const std::vector<Tensor> dense_outputs = dense_exec.run_all(input);
    const auto layer_input = [&](std::size_t i) -> const Tensor& {
        const int src = graph.layers[i].source;
        return src == kGraphInput ? input : dense_outputs[static_cast<std::size_t>(src)];
    };

    for (const double s : options.sparsities) {
        const MaskSet masks = generate_masks(graph, options.seed, 0, s);

        std::size_t total_retained = 0;
        for (std::size_t m = 0; m < enabled.size(); ++m) {
            const std::size_t i = enabled[m];
            const LayerSpec& l = graph.layers[i];
            const Tensor& in = layer_input(i);
            SparseConvPlan dense_plan(in.shape(), l.conv, graph.conv_weights.at(i), nullptr);
            SparseConvPlan sparse_plan(in.shape(), l.conv, graph.conv_weights.at(i), &masks[m]);
            Tensor out(shapes[i]);

            GemmStats stats;
            sparse_plan.run(in, out, &stats, options.threads);
            const std::size_t retained = sparse_plan.indirection().retained_count();
            total_retained += retained;
            result.work.push_back({l.name, s, shapes[i].positions(), retained, l.conv.out_channels,
                                   l.conv.patch_len(), stats.macs});

            if (!options.per_layer) continue;
            for (std::size_t w = 0; w < options.warmup; ++w) {
                dense_plan.run(in, out, nullptr, options.threads);
                sparse_plan.run(in, out, nullptr, options.threads);
            }
            std::vector<double> dense_ms, sparse_ms;
            for (std::size_t r = 0; r < options.repeats; ++r) {
                dense_ms.push_back(time_ms([&] { dense_plan.run(in, out, nullptr, options.threads); }));
                sparse_ms.push_back(time_ms([&] { sparse_plan.run(in, out, nullptr, options.threads); }));
            }
            BenchRecord rec{graph.name, l.name, s, retained, median(dense_ms), median(sparse_ms), 0.0};
            rec.speedup = rec.dense_ms / rec.sparse_ms;
            result.records.push_back(std::move(rec));
        }

        if (!options.end_to_end) continue;
        Executor sparse_exec(graph, &masks);
        const ExecOptions exec_options{.threads = options.threads};
        for (std::size_t w = 0; w < options.warmup; ++w) {
            dense_exec.run(input, exec_options);
            sparse_exec.run(input, exec_options);
        }
        std::vector<double> dense_ms, sparse_ms;
        for (std::size_t r = 0; r < options.repeats; ++r) {
            dense_ms.push_back(time_ms([&] { dense_exec.run(input, exec_options); }));
            sparse_ms.push_back(time_ms([&] { sparse_exec.run(input, exec_options); }));
        }
        BenchRecord rec{graph.name, "end2end", s, total_retained, median(dense_ms), median(sparse_ms), 0.0};
        rec.speedup = rec.dense_ms / rec.sparse_ms;
        result.records.push_back(std::move(rec));
    }

    // Soft check: end-to-end speedup should not drop as sparsity grows.
    const BenchRecord* prev = nullptr;
    for (const BenchRecord& rec : result.records) {
        if (rec.layer != "end2end") continue;
        if (prev != nullptr && rec.sparsity > prev->sparsity && rec.speedup < prev->speedup) {
            result.warnings.push_back("end2end speedup not monotone: " + format_double(prev->speedup) + "x at s=" +
                                      format_double(prev->sparsity) + " vs " + format_double(rec.speedup) +
                                      "x at s=" + format_double(rec.sparsity));
        }
        prev = &rec;
    }
    return result;
}

std::string write_bench_csv(const std::vector<BenchRecord>& records) {
    std::string out(kBenchCsvHeader);
    out += '\n';
    for (const BenchRecord& r : records) {
        out += r.model + ',' + r.layer + ',' + format_double(r.sparsity) + ',' + std::to_string(r.retained_cols) +
               ',' + format_double(r.dense_ms) + ',' + format_double(r.sparse_ms) + ',' +
               format_double(r.speedup) + '\n';
    }
    return out;
}

std::vector<BenchRecord> parse_bench_csv(std::string_view text) {
    std::vector<BenchRecord> records;
    std::size_t line_no = 0;
    bool saw_header = false;
    while (!text.empty()) {
        const std::size_t nl = text.find('\n');
        const std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (!saw_header) {
            if (line != kBenchCsvHeader) throw FormatError("CSV header mismatch");
            saw_header = true;
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string_view> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        if (fields.size() != 7) {
            throw FormatError("CSV line " + std::to_string(line_no) + ": expected 7 fields");
        }
        BenchRecord r;
        r.model = std::string(fields[0]);
        r.layer = std::string(fields[1]);
        r.sparsity = parse_double(fields[2], line_no);
        const auto res = std::from_chars(fields[3].data(), fields[3].data() + fields[3].size(), r.retained_cols);
        if (res.ec != std::errc() || res.ptr != fields[3].data() + fields[3].size()) {
            throw FormatError("CSV line " + std::to_string(line_no) + ": bad retained_cols");
        }
        r.dense_ms = parse_double(fields[4], line_no);
        r.sparse_ms = parse_double(fields[5], line_no);
        r.speedup = parse_double(fields[6], line_no);
        records.push_back(std::move(r));
    }
    if (!saw_header) throw FormatError("CSV is empty");
    return records;
}

}  // namespace sparseconv
