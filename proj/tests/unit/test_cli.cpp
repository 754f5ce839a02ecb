#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "unlearnkit/cli.hpp"

using namespace unlearnkit;
using namespace testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out, err;
};

// Runs the CLI in-process with stdout and stderr captured.
Outcome cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    const int code = run_cli(args);
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    return {code, out.str(), err.str()};
}

// Blob dataset, MLP-2 checkpoint and a 6-id manifest shared by the cases below.
const fs::path& workspace() {
    static const fs::path dir = [] {
        const auto d = temp_dir("cli");
        REQUIRE(cli({"synth", "--kind", "blobs", "--out", (d / "train").string(), "--num-classes", "4",
                     "--per-class", "30", "--dim", "6", "--spread", "0.3", "--seed", "0"}).code == 0);
        REQUIRE(cli({"synth", "--kind", "blobs", "--out", (d / "test").string(), "--num-classes", "4",
                     "--per-class", "10", "--dim", "6", "--spread", "0.3", "--seed", "1"}).code == 0);
        REQUIRE(cli({"pretrain", "--data", (d / "train").string(), "--out", (d / "pre.ckpt").string(), "--arch",
                     "mlp2", "--epochs", "20", "--lr", "0.05", "--batch-size", "16"}).code == 0);
        REQUIRE(cli({"select", "--data", (d / "train").string(), "--out", (d / "m.json").string(), "--k", "6",
                     "--seed", "2"}).code == 0);
        return d;
    }();
    return dir;
}

std::string w(const char* name) { return (workspace() / name).string(); }

std::vector<std::string> unlearn_args(const std::string& out) {
    return {"unlearn", "--checkpoint", w("pre.ckpt"), "--data", w("train"), "--test", w("test"), "--manifest",
            w("m.json"), "--out", out, "--lr", "0.01", "--max-epochs", "40", "--n-adv", "3", "--attack-steps", "10"};
}

nlohmann::json json_file(const fs::path& p) { return nlohmann::json::parse(read_bytes(p)); }

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("cli: the full pipeline writes every artifact") {
    REQUIRE(cli({"attack", "--checkpoint", w("pre.ckpt"), "--data", w("train"), "--manifest", w("m.json"), "--out",
                 w("adv.bin"), "--n-adv", "3", "--attack-steps", "10"}).code == 0);
    REQUIRE(cli({"importance", "--checkpoint", w("pre.ckpt"), "--data", w("train"), "--manifest", w("m.json"),
                 "--out", w("imp.bin")}).code == 0);
    auto args = unlearn_args(w("run_pipeline"));
    args.insert(args.end(), {"--method", "adv_imp", "--adversarial", w("adv.bin"), "--importance", w("imp.bin"),
                             "--monitor", "true"});
    const auto r = cli(args);
    REQUIRE(r.code == 0);
    for (const char* f : {"run_spec.json", "manifest.json", "trace.jsonl", "model.ckpt", "result.json"})
        CHECK(fs::exists(workspace() / "run_pipeline" / f));
    const auto result = json_file(workspace() / "run_pipeline" / "result.json");
    CHECK(result["method"] == "adv_imp");
    CHECK(result["k"] == 6);
    CHECK(nlohmann::json::parse(r.out).contains("run"));
    const auto trace = read_bytes(workspace() / "run_pipeline" / "trace.jsonl");
    CHECK(nlohmann::json::parse(trace.substr(0, trace.find('\n'))).contains("remain_accuracy"));

    REQUIRE(cli({"eval", "--before", w("pre.ckpt"), "--after", w("run_pipeline/model.ckpt"), "--data", w("train"),
                 "--manifest", w("m.json"), "--test", w("test"), "--out", w("eval_pipeline"), "--run-id", "p",
                 "--method", "adv_imp"}).code == 0);
    for (const char* f : {"report.json", "accuracies.csv", "confusion.csv", "cka_forget.csv", "cka_remain.csv"})
        CHECK(fs::exists(workspace() / "eval_pipeline" / f));
    const auto report = json_file(workspace() / "eval_pipeline" / "report.json");
    std::int64_t total = 0;
    for (const auto& row : report["confusion"])
        for (const auto& v : row) total += v.get<std::int64_t>();
    CHECK(total == 6);
}

TEST_CASE("cli: repeated runs are byte-identical") {
    const auto a = w("rep_a"), b = w("rep_b");
    for (const auto& out : {a, b}) {
        auto args = unlearn_args(out);
        args.insert(args.end(), {"--method", "adv"});
        REQUIRE(cli(args).code == 0);
    }
    CHECK(read_bytes(fs::path(a) / "model.ckpt") == read_bytes(fs::path(b) / "model.ckpt"));
    CHECK(read_bytes(fs::path(a) / "trace.jsonl") == read_bytes(fs::path(b) / "trace.jsonl"));

    // Replaying the recorded options into a fresh directory reproduces the run.
    REQUIRE(cli({"unlearn", "--config", a + "/run_spec.json", "--out", w("rep_c")}).code == 0);
    CHECK(read_bytes(fs::path(a) / "model.ckpt") == read_bytes(workspace() / "rep_c" / "model.ckpt"));

    const std::vector<std::string> pre{"pretrain", "--data", w("train"), "--arch", "mlp2", "--epochs", "2", "--out"};
    auto p1 = pre, p2 = pre;
    p1.push_back(w("p1.ckpt"));
    p2.push_back(w("p2.ckpt"));
    REQUIRE(cli(p1).code == 0);
    REQUIRE(cli(p2).code == 0);
    CHECK(read_bytes(w("p1.ckpt")) == read_bytes(w("p2.ckpt")));
}

TEST_CASE("cli: continual writes one trace line per fragment epoch") {
    REQUIRE(cli({"continual", "--checkpoint", w("pre.ckpt"), "--data", w("train"), "--k", "8", "--k-cl", "4",
                 "--out", w("cont"), "--method", "neggrad", "--lr", "0.01", "--max-epochs", "40"}).code == 0);
    const auto trace = read_bytes(workspace() / "cont" / "trace.jsonl");
    std::istringstream lines(trace);
    std::string line;
    std::set<int> fragments;
    while (std::getline(lines, line)) fragments.insert(nlohmann::json::parse(line)["fragment"].get<int>());
    CHECK(fragments == std::set<int>{0, 1});
    CHECK(fs::exists(workspace() / "cont" / "model.ckpt"));
}

TEST_CASE("cli: eval of a model against itself reports no change") {
    REQUIRE(cli({"eval", "--before", w("pre.ckpt"), "--after", w("pre.ckpt"), "--data", w("train"), "--manifest",
                 w("m.json"), "--out", w("eval_same")}).code == 0);
    const auto report = json_file(workspace() / "eval_same" / "report.json");
    for (const auto& [split, a] : report["accuracies"].items()) CHECK(a["before"] == a["after"]);
    const auto& m = report["confusion"];
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m.size(); ++j)
            if (i != j) CHECK(m[i][j] == 0);
}

TEST_CASE("cli: sweep lays out one run per gamma") {
    const auto r = cli({"sweep", "--checkpoint", w("pre.ckpt"), "--data", w("train"), "--out", w("sweep"),
                        "--ks", "6", "--gammas", "0.001,0.005,0.01,0.1", "--max-epochs", "5", "--jobs", "2",
                        "--cka", "false"});
    REQUIRE(r.code == 0);
    for (const char* g : {"0.001", "0.005", "0.01", "0.1"}) {
        const auto dir = workspace() / "sweep" / (std::string("rawp_k6_s0_g") + g);
        CHECK(fs::exists(dir / "model.ckpt"));
        CHECK(fs::exists(dir / "report.json"));
    }
    const auto csv = read_bytes(workspace() / "sweep" / "accuracies.csv");
    CHECK(csv.rfind("run_id,method,k,split,state,accuracy\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * 2 * 2);  // forget and remain, before and after
    CHECK(fs::exists(workspace() / "sweep" / "sweep.json"));
}

TEST_CASE("cli: config files, flags and the seed environment variable") {
    const auto cfg = workspace() / "select.cfg";
    {
        std::ofstream f(cfg);
        f << "data=" << w("train") << "\nk=5\nseed=3\n";
    }
    REQUIRE(cli({"select", "--config", cfg.string(), "--out", w("cfg_a.json")}).code == 0);
    REQUIRE(cli({"select", "--data", w("train"), "--k", "5", "--seed", "3", "--out", w("cfg_b.json")}).code == 0);
    CHECK(read_bytes(w("cfg_a.json")) == read_bytes(w("cfg_b.json")));
    // Flags win over the file.
    REQUIRE(cli({"select", "--config", cfg.string(), "--k", "7", "--out", w("cfg_c.json")}).code == 0);
    CHECK(json_file(w("cfg_c.json"))["ids"].size() == 7);

    ::setenv("UNLEARNKIT_SEED", "3", 1);
    REQUIRE(cli({"select", "--data", w("train"), "--k", "5", "--out", w("cfg_d.json")}).code == 0);
    ::unsetenv("UNLEARNKIT_SEED");
    CHECK(read_bytes(w("cfg_d.json")) == read_bytes(w("cfg_b.json")));

    const auto json_cfg = workspace() / "select.json";
    {
        std::ofstream f(json_cfg);
        f << nlohmann::json{{"data", w("train")}, {"k", 5}, {"seed", 3}}.dump();
    }
    REQUIRE(cli({"select", "--config", json_cfg.string(), "--out", w("cfg_e.json")}).code == 0);
    CHECK(read_bytes(w("cfg_e.json")) == read_bytes(w("cfg_b.json")));
}

TEST_CASE("cli: errors map to exit codes with a JSON message") {
    auto missing = cli({"unlearn", "--checkpoint", w("nope.ckpt"), "--data", w("train"), "--out", w("x")});
    CHECK(missing.code == exit_code::usage);
    CHECK(cli({"select", "--data", w("train"), "--out", w("y.json"), "--bogus"}).code == exit_code::usage);
    CHECK(cli({}).code == exit_code::usage);
    const auto big_k = cli({"select", "--data", w("train"), "--out", w("y.json"), "--k", "1000"});
    CHECK(big_k.code == exit_code::usage);
    const auto err = nlohmann::json::parse(big_k.err.substr(big_k.err.find('{')));
    CHECK(err["error"]["kind"] == "argument");
    CHECK(err["error"]["exit_code"] == exit_code::usage);

    const auto numeric = cli({"unlearn", "--checkpoint", w("pre.ckpt"), "--data", w("train"), "--manifest", w("m.json"),
                              "--out", w("diverge"), "--method", "neggrad", "--lr", "1e30"});
    CHECK(numeric.code == exit_code::numeric);
    CHECK(nlohmann::json::parse(numeric.err.substr(numeric.err.find('{')))["error"]["kind"] == "numeric");
}

}  // TEST_SUITE
