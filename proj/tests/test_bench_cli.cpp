#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "sparseconv/bench.hpp"
#include "sparseconv/cli.hpp"
#include "sparseconv/error.hpp"

using namespace sparseconv;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli_dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir() {
    const fs::path dir = fs::temp_directory_path() / "sparseconv_cli_test";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("median") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
}

TEST_CASE("bench CSV round trip") {
    const std::vector<BenchRecord> recs{
        {"m", "conv1", 0.1, 2822, 1.0 / 3.0, 0.123456789012345, (1.0 / 3.0) / 0.123456789012345},
        {"m", "end2end", 0.5, 14604, 66.767, 37.405, 66.767 / 37.405},
    };
    const std::string text = write_bench_csv(recs);
    CHECK(text.rfind(std::string(kBenchCsvHeader) + "\n", 0) == 0);
    CHECK(parse_bench_csv(text) == recs);
    CHECK_THROWS_AS(parse_bench_csv("model,layer\n"), FormatError);
    CHECK_THROWS_AS(parse_bench_csv(std::string(kBenchCsvHeader) + "\nm,l,0.1,5,1,2\n"), FormatError);
    CHECK_THROWS_AS(parse_bench_csv(std::string(kBenchCsvHeader) + "\nm,l,x,5,1,2,3\n"), FormatError);
}

TEST_CASE("bench_model work accounting") {
    const ModelGraph g = make_toy_cnn(1);
    BenchOptions opts;
    opts.repeats = 5;
    opts.warmup = 1;
    const BenchResult r = bench_model(g, opts);
    for (const LayerWork& w : r.work) {
        CHECK(w.retained_cols == w.positions - masked_count(w.sparsity, w.positions));
        CHECK(w.macs == std::uint64_t(w.retained_cols) * w.patch_len * w.out_channels);
    }
    for (const BenchRecord& rec : r.records) CHECK(rec.speedup == rec.dense_ms / rec.sparse_ms);
    opts.repeats = 4;
    CHECK_THROWS_AS(bench_model(g, opts), ConfigError);
}

TEST_CASE("cli usage errors exit 2") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    const Run r = cli({"verify", "--bogus"});
    CHECK(r.code == 2);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(cli({"verify", "--sparsity", "abc"}).code == 2);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("cli file errors exit 1 with the path") {
    const Run r = cli({"verify", "--model", "/nonexistent/model.smod"});
    CHECK(r.code == 1);
    CHECK(r.err.find("/nonexistent/model.smod") != std::string::npos);
    const Run w = cli({"maskgen", "--out", "/nonexistent/dir/m.smsk"});
    CHECK(w.code == 1);
    CHECK(w.err.find("/nonexistent/dir/m.smsk") != std::string::npos);
}

TEST_CASE("maskgen is deterministic") {
    const fs::path dir = scratch_dir();
    const fs::path a = dir / "a.smsk", b = dir / "b.smsk";
    for (const fs::path& p : {a, b}) {
        CHECK(cli({"maskgen", "--model", "resnet18-shape", "--sparsity", "0.3", "--seed", "11", "--out", p.string()})
                  .code == 0);
    }
    CHECK(!slurp(a).empty());
    CHECK(slurp(a) == slurp(b));
}

TEST_CASE("mkmodel then verify") {
    const fs::path dir = scratch_dir();
    const fs::path model = dir / "toy.smod";
    const fs::path masks = dir / "toy.smsk";
    CHECK(cli({"mkmodel", "--model", "toy-cnn", "--out", model.string()}).code == 0);
    const Run v = cli({"verify", "--model", model.string(), "--sparsity", "0", "--seed", "1"});
    CHECK(v.code == 0);
    CHECK(v.out.find("PASS") != std::string::npos);
    CHECK(cli({"verify", "--model", model.string(), "--sparsity", "0.1,0.3,0.5", "--seed", "2"}).code == 0);
    CHECK(cli({"maskgen", "--model", model.string(), "--sparsity", "0.5", "--out", masks.string()}).code == 0);
    CHECK(cli({"verify", "--model", model.string(), "--masks", masks.string()}).code == 0);
}

TEST_CASE("train writes model, masks and log") {
    const fs::path dir = scratch_dir();
    const Run r = cli({"train", "--steps", "20", "--batch", "4", "--train-size", "40", "--test-size", "30",
                       "--sparsity", "0.3", "--out-model", (dir / "t.smod").string(), "--out-masks",
                       (dir / "t.smsk").string(), "--log-csv", (dir / "t.csv").string()});
    REQUIRE(r.code == 0);
    const std::string log = slurp(dir / "t.csv");
    CHECK(log.rfind("step,stage,sparsity,loss,accuracy\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 21);
    CHECK(cli({"verify", "--model", (dir / "t.smod").string(), "--masks", (dir / "t.smsk").string()}).code == 0);
    CHECK(cli({"train", "--mask-mode", "sideways", "--steps", "2"}).code == 1);
}

TEST_CASE("bench CSV rows satisfy the column-count law") {
    const fs::path csv = scratch_dir() / "bench.csv";
    const Run r = cli({"bench", "--model", "resnet18-shape", "--sparsity", "0.5", "--repeats", "10", "--csv",
                       csv.string()});
    REQUIRE(r.code == 0);
    const std::vector<BenchRecord> rows = parse_bench_csv(slurp(csv));
    const ModelGraph g = make_resnet18_shape(1);
    const std::vector<Shape> shapes = g.layer_shapes();
    std::size_t total = 0;
    for (const BenchRecord& rec : rows) {
        CHECK(rec.sparsity == 0.5);
        if (rec.layer == "end2end") {
            CHECK(rec.retained_cols == total);
            continue;
        }
        const std::size_t z = shapes[g.index_of(rec.layer)].positions();
        CHECK(rec.retained_cols == z - z / 2);
        total += rec.retained_cols;
    }
    CHECK(rows.size() == 18);
}
