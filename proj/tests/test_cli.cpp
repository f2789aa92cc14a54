#include "doctest.h"

#include "cli.hpp"

#include "ibnorm/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result call(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = ibn::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string &name) {
    const auto dir = fs::temp_directory_path() / ("ibnorm_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json load(const fs::path &p) { return json::parse(slurp(p)); }

void write(const fs::path &p, const std::string &text) { std::ofstream(p) << text; }

std::vector<std::vector<double>> csv_rows(const std::string &text) {
    std::vector<std::vector<double>> rows;
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');)
            row.push_back(std::stod(cell));
        rows.push_back(row);
    }
    return rows;
}

const char *kTrainConfig = R"({"data": {"task": "synthetic_classification", "train_size": 256, "eval_size": 64},
  "model": {"layer_widths": [16, 16], "norm": "layernorm"},
  "train": {"steps": 20, "batch_size": 8, "eval_interval": 10, "eval_rows": 32, "seed": 2}})";

} // namespace

TEST_CASE("demo-compress") {
    const auto dir = scratch("demo");
    auto r = call({"demo-compress", "--kind", "S", "--lambda", "4", "--values", "0,4,-4", "--output-dir",
                   dir.string(), "--csv", (dir / "t.csv").string()});
    REQUIRE(r.code == 0);
    const auto rows = csv_rows(r.out);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0][3] == 0.0);
    CHECK(rows[1][3] == 1.0);
    CHECK(rows[2][3] == -1.0);
    CHECK(slurp(dir / "t.csv") == r.out);

    const auto m = load(dir / "manifest.json");
    CHECK(m["subcommand"] == "demo-compress");
    CHECK(m["exit_status"] == 0);
    CHECK(m["resolved_config"]["lambda"] == 4.0);
    for (const auto &a : m["artifacts"])
        CHECK(fs::exists(a.get<std::string>()));

    r = call({"demo-compress", "--kind", "T", "--lambda", "4", "--values", "2.5,2.5,2.5", "--output-dir",
              dir.string()});
    REQUIRE(r.code == 0);
    for (const auto &row : csv_rows(r.out))
        CHECK(row[3] == 2.5);
}

TEST_CASE("usage errors exit with 2") {
    CHECK(call({"demo-compress", "--kind", "S"}).code == 2);
    CHECK(call({}).code == 2);
    CHECK(call({"no-such-command"}).code == 2);
    const auto dir = scratch("usage");
    CHECK(call({"demo-compress", "--kind", "Q", "--lambda", "4", "--output-dir", dir.string()}).code == 2);
    CHECK(call({"demo-compress", "--kind", "S", "--lambda", "0", "--output-dir", dir.string()}).code == 2);
    CHECK(call({"demo-compress", "--kind", "S", "--lambda", "4", "--values", "1,x", "--output-dir", dir.string()})
              .code == 2);
    CHECK(call({"demo-compress", "--help"}).code == 0);
}

TEST_CASE("kde-sweep writes one curve per pair and is reproducible") {
    const auto dir = scratch("sweep");
    write(dir / "sweep.json", R"({"n_samples": 5000, "seed": 7, "grid_points": 128,
        "distributions": ["gaussian"], "specs": ["standardize", "ibnorm-l", "ibnorm-t", "ibnorm-s"], "lambda": 4})");
    auto a = call({"kde-sweep", "--config", (dir / "sweep.json").string(), "--output-dir", (dir / "a").string()});
    auto b = call({"kde-sweep", "--config", (dir / "sweep.json").string(), "--output-dir", (dir / "b").string()});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    std::size_t curves = 0;
    for (const auto &e : fs::directory_iterator(dir / "a"))
        if (e.path().extension() == ".csv") {
            ++curves;
            CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
        }
    CHECK(curves == 4);
    CHECK(slurp(dir / "a" / "moments.json") == slurp(dir / "b" / "moments.json"));
    const auto m = load(dir / "a" / "manifest.json");
    CHECK(m["artifacts"].size() == 5);
    CHECK(m["resolved_config"]["n_samples"] == 5000);

    write(dir / "bad.json", "{\n  \"seed\": 1,\n  \"lambda\": ]\n}");
    auto bad = call({"kde-sweep", "--config", (dir / "bad.json").string(), "--output-dir", (dir / "c").string()});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("bad.json:3:13") != std::string::npos);

    write(dir / "unknown.json", R"({"distributions": ["cauchy"]})");
    CHECK(call({"kde-sweep", "--config", (dir / "unknown.json").string(), "--output-dir", (dir / "d").string()})
              .code == 2);
}

TEST_CASE("train: norm swap, ablation and lambda grid") {
    const auto dir = scratch("train");
    write(dir / "cfg.json", kTrainConfig);
    const auto cfg = (dir / "cfg.json").string();

    REQUIRE(call({"train", "--config", cfg, "--norm", "ibnorm-l", "--lambda", "4", "--output-dir",
                  (dir / "ib").string()})
                .code == 0);
    REQUIRE(call({"train", "--config", cfg, "--norm", "layernorm", "--output-dir", (dir / "ln").string()}).code ==
            0);
    auto ib = load(dir / "ib" / "manifest.json")["resolved_config"];
    auto ln = load(dir / "ln" / "manifest.json")["resolved_config"];
    CHECK(ib["model"]["norm"]["kind"] != ln["model"]["norm"]["kind"]);
    ib["model"].erase("norm");
    ln["model"].erase("norm");
    ib["train"].erase("output_dir");
    ln["train"].erase("output_dir");
    CHECK(ib == ln);
    CHECK(load(dir / "ib" / "run.json")["batch_stream_hash"] == load(dir / "ln" / "run.json")["batch_stream_hash"]);

    REQUIRE(call({"train", "--config", cfg, "--norm", "ibnorm-t", "--ablate", "no-affine", "--output-dir",
                  (dir / "na").string()})
                .code == 0);
    const auto ckpt = ibn::Checkpoint::load(dir / "na" / "checkpoint.ibn");
    for (const auto &arr : ckpt.arrays) {
        CHECK(arr.name.find("gamma") == std::string::npos);
        CHECK(arr.name.find("beta") == std::string::npos);
    }

    REQUIRE(call({"train", "--config", cfg, "--norm", "ibnorm-l", "--lambda-grid", "0.5,4,8", "--output-dir",
                  (dir / "grid").string()})
                .code == 0);
    for (const char *sub : {"lambda_0.5", "lambda_4", "lambda_8"})
        CHECK(fs::exists(dir / "grid" / sub / "metrics.csv"));
    CHECK(load(dir / "grid" / "manifest.json")["artifacts"].size() == 12);

    CHECK(call({"train", "--config", cfg, "--ablate", "order", "--output-dir", (dir / "x").string()}).code == 2);
    CHECK(call({"train", "--config", cfg, "--ablate", "sideways", "--norm", "ibnorm-l", "--output-dir",
                (dir / "x").string()})
              .code == 2);
}

TEST_CASE("train from a manifest reproduces artifacts byte-for-byte") {
    const auto dir = scratch("rerun");
    write(dir / "cfg.json", kTrainConfig);
    REQUIRE(call({"train", "--config", (dir / "cfg.json").string(), "--norm", "ibnorm-l", "--output-dir",
                  (dir / "a").string()})
                .code == 0);
    REQUIRE(call({"train", "--config", (dir / "a" / "manifest.json").string(), "--output-dir", (dir / "b").string()})
                .code == 0);
    for (const char *f : {"metrics.csv", "checkpoint.ibn"})
        CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
}

TEST_CASE("probe-ib defaults and beta = 0") {
    const auto dir = scratch("probe");
    write(dir / "cfg.json", kTrainConfig);
    REQUIRE(call({"train", "--config", (dir / "cfg.json").string(), "--output-dir", (dir / "run").string()}).code ==
            0);
    const auto ckpt = (dir / "run" / "checkpoint.ibn").string();
    REQUIRE(call({"probe-ib", "--checkpoint", ckpt, "--output-dir", (dir / "p1").string()}).code == 0);
    const auto m = load(dir / "p1" / "manifest.json");
    CHECK(m["resolved_config"]["sigma"] == 1.0);
    CHECK(m["resolved_config"]["beta"] == 1.0);

    REQUIRE(call({"probe-ib", "--checkpoint", ckpt, "--beta", "0", "--output-dir", (dir / "p0").string()}).code == 0);
    const auto trace = load(dir / "p0" / "ib_trace.json");
    double sum_iy = 0.0;
    for (const auto &c : trace["grid"])
        sum_iy += c["i_y"].get<double>();
    CHECK(trace["ib_value"].get<double>() == doctest::Approx(sum_iy / trace["timesteps"].get<double>()));

    CHECK(call({"probe-ib", "--checkpoint", (dir / "missing.ibn").string(), "--output-dir", (dir / "p2").string()})
              .code == 2);
}

TEST_CASE("verify: exit codes, filter and mutation witness") {
    const auto dir = scratch("verify");
    auto r = call({"verify", "--output-dir", dir.string()});
    CHECK(r.code == 0);
    const auto report = load(dir / "verify_report.json");
    CHECK(report["passed"] == true);

    r = call({"verify", "--filter", "compression", "--output-dir", dir.string()});
    CHECK(r.code == 0);
    for (const auto &p : load(dir / "verify_report.json")["properties"])
        CHECK(p["group"] == "compression");

    r = call({"verify", "--mutate", "sign", "--output-dir", dir.string()});
    CHECK(r.code == 1);
    CHECK(r.out.find("FAIL compression.jacobian_bound") != std::string::npos);
    CHECK(r.out.find("f'(") != std::string::npos);
    CHECK(load(dir / "manifest.json")["exit_status"] == 1);

    CHECK(call({"verify", "--filter", "nothing_matches", "--output-dir", dir.string()}).code == 2);
}

TEST_CASE("IBNORM_OUTPUT_ROOT sets the default output location") {
    const auto dir = scratch("root");
    ::setenv("IBNORM_OUTPUT_ROOT", dir.string().c_str(), 1);
    const auto r = call({"demo-compress", "--kind", "L", "--lambda", "2"});
    ::unsetenv("IBNORM_OUTPUT_ROOT");
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "demo-compress" / "manifest.json"));
}
