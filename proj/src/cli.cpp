#include "sparseconv/cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <ostream>
#include <random>

#include "CLI11.hpp"
#include "sparseconv/bench.hpp"
#include "sparseconv/error.hpp"
#include "sparseconv/executor.hpp"
#include "sparseconv/mask.hpp"
#include "sparseconv/model.hpp"
#include "sparseconv/trainer.hpp"

namespace sparseconv {
namespace {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("failed writing '" + path + "'");
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    write_file(path, bytes.data(), bytes.size());
}

void write_file(const std::string& path, const std::string& text) { write_file(path, text.data(), text.size()); }

ModelGraph resolve_model(const std::string& name_or_path, std::uint64_t seed) {
    if (is_builtin(name_or_path)) return make_builtin(name_or_path, seed);
    const std::vector<std::uint8_t> bytes = read_file(name_or_path);
    try {
        return load_model(bytes);
    } catch (const std::exception& e) {
        throw IoError("'" + name_or_path + "': " + e.what());
    }
}

Tensor random_input(const Shape& shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    Tensor t(shape);
    for (float& v : t.values()) v = dist(rng);
    return t;
}

struct CommonArgs {
    std::string model;
    std::vector<double> sparsity;
    std::uint64_t seed = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args, const std::string& default_model) {
    args.model = default_model;
    cmd->add_option("--model", args.model, "model path (.smod) or builtin (resnet18-shape, toy-cnn)");
    cmd->add_option("--sparsity", args.sparsity, "sparsity level(s), comma separated")->delimiter(',');
    cmd->add_option("--seed", args.seed, "mask / weight / data seed");
}

int run_mkmodel(const CommonArgs& c, const std::string& out_path, std::ostream& out) {
    if (!is_builtin(c.model)) throw ConfigError("mkmodel needs a builtin model name, got '" + c.model + "'");
    const ModelGraph g = make_builtin(c.model, c.seed);
    write_file(out_path, save_model(g));
    out << "wrote " << c.model << " (" << g.layers.size() << " layers, " << g.enabled_convs().size()
        << " sparse convs) to " << out_path << "\n";
    return 0;
}

int run_maskgen(const CommonArgs& c, std::uint64_t step, const std::string& out_path, std::ostream& out) {
    if (c.sparsity.size() > 1) throw ConfigError("maskgen takes a single --sparsity value");
    const double s = c.sparsity.empty() ? 0.0 : c.sparsity.front();
    const ModelGraph g = resolve_model(c.model, c.seed);
    const MaskSet masks = generate_masks(g, c.seed, step, s);
    write_file(out_path, serialize_masks(masks));
    out << "wrote " << masks.size() << " masks at sparsity " << s << " to " << out_path << "\n";
    return 0;
}

int run_verify(const CommonArgs& c, double tol, const std::string& masks_path, std::ostream& out) {
    const ModelGraph g = resolve_model(c.model, c.seed);
    const Tensor input = random_input(g.input, c.seed);
    bool ok = true;
    if (!masks_path.empty()) {
        MaskSet masks;
        try {
            masks = parse_masks(read_file(masks_path));
        } catch (const FormatError& e) {
            throw IoError("'" + masks_path + "': " + e.what());
        }
        const VerifyReport report = verify_equivalence(g, input, &masks, tol);
        out << "masks from " << masks_path << "\n" << report.to_text();
        return report.passed() ? 0 : 1;
    }
    const std::vector<double> levels = c.sparsity.empty() ? std::vector<double>{0.0} : c.sparsity;
    for (const double s : levels) {
        const MaskSet masks = generate_masks(g, c.seed, 0, s);
        const VerifyReport report = verify_equivalence(g, input, &masks, tol);
        out << "sparsity " << s << "\n" << report.to_text();
        ok = ok && report.passed();
    }
    return ok ? 0 : 1;
}

struct TrainArgs {
    std::size_t steps = 1000;
    std::size_t batch = 16;
    double lr = 2e-3;
    double dense_frac = 0.10;
    double freeze_frac = 0.90;
    std::size_t train_size = 5000;
    std::size_t test_size = 1000;
    std::string mask_mode = "propagated";
    std::string out_model;
    std::string out_masks;
    std::string log_csv;
};

int run_train(const CommonArgs& c, const TrainArgs& t, std::ostream& out) {
    if (c.sparsity.size() > 1) throw ConfigError("train takes a single --sparsity value");
    const ModelGraph g = resolve_model(c.model, c.seed);
    if (g.input != Shape{kShapeImageSize, kShapeImageSize, 1} ||
        g.layer_shapes().back().size() != kShapeClasses) {
        throw ConfigError("train expects a 32x32x1 input and " + std::to_string(kShapeClasses) + " outputs");
    }
    const Dataset train_set = make_shapes_dataset(t.train_size, c.seed);
    const Dataset test_set = make_shapes_dataset(t.test_size, c.seed + 0x7e57);

    TrainOptions opts;
    opts.steps = t.steps;
    opts.batch_size = t.batch;
    opts.seed = c.seed;
    opts.adam.learning_rate = t.lr;
    opts.schedule.dense_frac = t.dense_frac;
    opts.schedule.freeze_frac = t.freeze_frac;
    opts.schedule.target_sparsity = c.sparsity.empty() ? 0.0 : c.sparsity.front();
    if (t.mask_mode == "independent") {
        opts.mask_mode = MaskMode::independent;
    } else if (t.mask_mode != "propagated") {
        throw ConfigError("--mask-mode must be propagated or independent");
    }

    std::string log = "step,stage,sparsity,loss,accuracy\n";
    const TrainResult res = train(g, train_set, opts, [&](const StepRecord& r) {
        std::ostringstream row;
        row << r.step << ',' << to_string(r.stage) << ',' << std::setprecision(9) << r.sparsity << ',' << r.loss
            << ',' << r.accuracy << '\n';
        log += row.str();
        if (r.step % 100 == 0) {
            spdlog::info("step {} [{}] s={:.4f} loss={:.4f} acc={:.3f}", r.step, to_string(r.stage), r.sparsity,
                         r.loss, r.accuracy);
        }
    });
    const double acc = evaluate_accuracy(res.graph, test_set, &res.masks);
    out << "test accuracy " << std::fixed << std::setprecision(4) << acc << " at sparsity "
        << opts.schedule.target_sparsity << "\n";
    if (!t.out_model.empty()) write_file(t.out_model, save_model(res.graph));
    if (!t.out_masks.empty()) write_file(t.out_masks, serialize_masks(res.masks));
    if (!t.log_csv.empty()) write_file(t.log_csv, log);
    return 0;
}

struct BenchArgs {
    std::size_t repeats = 10;
    std::size_t warmup = 3;
    std::size_t threads = 1;
    std::string csv_out;
    bool no_per_layer = false;
};

int run_bench(const CommonArgs& c, const BenchArgs& b, std::ostream& out) {
    const ModelGraph g = resolve_model(c.model, c.seed);
    BenchOptions opts;
    if (!c.sparsity.empty()) opts.sparsities = c.sparsity;
    opts.repeats = b.repeats;
    opts.warmup = b.warmup;
    opts.threads = b.threads;
    opts.seed = c.seed;
    opts.per_layer = !b.no_per_layer;
    const BenchResult res = bench_model(g, opts);
    for (const std::string& w : res.warnings) spdlog::warn("{}", w);
    for (const BenchRecord& r : res.records) {
        out << std::left << std::setw(24) << r.layer << " s=" << std::setw(5) << r.sparsity << " cols=" << std::setw(7)
            << r.retained_cols << " dense=" << std::fixed << std::setprecision(3) << r.dense_ms
            << "ms sparse=" << r.sparse_ms << "ms speedup=" << std::setprecision(3) << r.speedup << "x\n"
            << std::defaultfloat;
    }
    if (!b.csv_out.empty()) write_file(b.csv_out, write_bench_csv(res.records));
    return 0;
}

}  // namespace

void init_logging_from_env() {
    static bool initialized = false;
    if (!initialized) {
        spdlog::set_default_logger(spdlog::stderr_color_mt("sparseconv"));
        initialized = true;
    }
    const char* env = std::getenv("SPARSECONV_LOG");
    const std::string level = env != nullptr ? env : "info";
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        spdlog::set_level(spdlog::level::info);
    }
}

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Semi-structured activation sparsity: mask generation, verification, training, benchmarks",
                 "sparseconv"};
    app.require_subcommand(1);

    CommonArgs mk, mg, vf, tr, bn;
    std::string mk_out, mg_out, vf_masks;
    std::uint64_t mg_step = 0;
    double vf_tol = 1e-5;
    TrainArgs targs;
    BenchArgs bargs;

    auto* mkmodel = app.add_subcommand("mkmodel", "write a builtin graph with random weights to .smod");
    add_common(mkmodel, mk, "toy-cnn");
    mkmodel->add_option("--out,-o", mk_out, "output .smod path")->required();

    auto* maskgen = app.add_subcommand("maskgen", "write propagated masks (SMSK) for a model");
    add_common(maskgen, mg, "toy-cnn");
    maskgen->add_option("--step", mg_step, "score-map step index");
    maskgen->add_option("--out,-o", mg_out, "output SMSK path")->required();

    auto* verify = app.add_subcommand("verify", "check sparse path against masked direct convolution");
    add_common(verify, vf, "toy-cnn");
    verify->add_option("--tol", vf_tol, "max abs diff tolerance");
    verify->add_option("--masks", vf_masks, "SMSK file to use instead of generated masks");

    auto* trn = app.add_subcommand("train", "train on the synthetic shapes task with the sparsity schedule");
    add_common(trn, tr, "toy-cnn");
    trn->add_option("--steps", targs.steps);
    trn->add_option("--batch", targs.batch);
    trn->add_option("--lr", targs.lr);
    trn->add_option("--dense-frac", targs.dense_frac);
    trn->add_option("--freeze-frac", targs.freeze_frac);
    trn->add_option("--train-size", targs.train_size);
    trn->add_option("--test-size", targs.test_size);
    trn->add_option("--mask-mode", targs.mask_mode, "propagated | independent");
    trn->add_option("--out-model", targs.out_model);
    trn->add_option("--out-masks", targs.out_masks);
    trn->add_option("--log-csv", targs.log_csv);

    auto* bench = app.add_subcommand("bench", "time dense vs sparse inference");
    add_common(bench, bn, "resnet18-shape");
    bench->add_option("--repeats", bargs.repeats);
    bench->add_option("--warmup", bargs.warmup);
    bench->add_option("--threads", bargs.threads);
    bench->add_option("--csv-out,--csv", bargs.csv_out, "CSV output path");
    bench->add_flag("--no-per-layer", bargs.no_per_layer, "only time end-to-end inference");

    std::vector<const char*> argv{"sparseconv"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (*mkmodel) return run_mkmodel(mk, mk_out, out);
        if (*maskgen) return run_maskgen(mg, mg_step, mg_out, out);
        if (*verify) return run_verify(vf, vf_tol, vf_masks, out);
        if (*trn) return run_train(tr, targs, out);
        if (*bench) return run_bench(bn, bargs, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace sparseconv
