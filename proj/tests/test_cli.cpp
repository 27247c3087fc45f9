#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cpolab/commands.hpp"
#include "cpolab/error.hpp"
#include "oracles.hpp"

using namespace cpolab;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

// Settings that keep every stage to a fraction of a second.
std::vector<std::string> small(std::vector<std::string> args) {
    for (const char* kv : {"schedule.T=10", "model.hidden=8", "sft.epochs=2", "sft.batch=8", "align.steps=3",
                           "align.batch=4", "sample.steps=10", "eval.resamples=100"}) {
        args.push_back("--set");
        args.push_back(kv);
    }
    return args;
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n;
}

struct Workspace {
    fs::path dir = oracle::scratch_dir("cli");
    ~Workspace() { fs::remove_all(dir); }
    std::string operator()(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("exit codes") {
    Workspace ws;
    CHECK(cli({"--help"}).code == kExitOk);
    CHECK(cli({}).code == kExitValidation);
    CHECK(cli({"frobnicate"}).code == kExitValidation);
    CHECK(cli({"gen-data", "--out", ws("d.jsonl"), "--set", "no.such.key=1"}).code == kExitValidation);
    CHECK(cli({"gen-data", "--out", ws("d.jsonl"), "--n", "5"}).code == kExitValidation);
    CHECK(cli({"train-sft", "--data", ws("missing.jsonl"), "--out", ws("m.ck")}).code == kExitRuntime);

    std::ofstream(ws("bad.json")) << R"({"max_depth": 3, "roots": [{"id": "A", "children": []}]})";
    const Run bad = cli({"taxonomy", "validate", ws("bad.json")});
    CHECK(bad.code == kExitValidation);
    CHECK(cli({"taxonomy", "default", "--out", ws("tree.json")}).code == kExitOk);
    CHECK(cli({"taxonomy", "validate", ws("tree.json")}).code == kExitOk);
}

TEST_CASE("gen-data is repeatable and snapshots its config") {
    Workspace ws;
    REQUIRE(cli({"gen-data", "--n", "40", "--seed", "7", "--out", ws("a.jsonl")}).code == kExitOk);
    REQUIRE(cli({"gen-data", "--n", "40", "--seed", "7", "--out", ws("b.jsonl")}).code == kExitOk);
    CHECK(oracle::slurp(ws("a.jsonl")) == oracle::slurp(ws("b.jsonl")));
    REQUIRE(fs::exists(snapshot_path(ws("a.jsonl"))));

    RunConfig snap;
    snap.load_file(snapshot_path(ws("a.jsonl")));
    CHECK(snap.get("data.n") == "40");
    CHECK(snap.get("io.out") == ws("a.jsonl"));

    REQUIRE(cli({"gen-data", "--n", "40", "--seed", "8", "--out", ws("c.jsonl")}).code == kExitOk);
    CHECK(oracle::slurp(ws("a.jsonl")) != oracle::slurp(ws("c.jsonl")));
}

TEST_CASE("configuration precedence") {
    Workspace ws;
    std::ofstream(ws("run.cfg")) << "# test\ndata.n = 30\nseed = 3\n";

    REQUIRE(cli({"gen-data", "--config", ws("run.cfg"), "--out", ws("f.jsonl")}).code == kExitOk);
    CHECK(line_count(ws("f.jsonl")) == 31);  // header + records

    ::setenv("CPOLAB_DATA_N", "20", 1);
    REQUIRE(cli({"gen-data", "--config", ws("run.cfg"), "--out", ws("e.jsonl")}).code == kExitOk);
    CHECK(line_count(ws("e.jsonl")) == 21);

    REQUIRE(cli({"gen-data", "--config", ws("run.cfg"), "--set", "data.n=12", "--out", ws("s.jsonl")}).code == kExitOk);
    CHECK(line_count(ws("s.jsonl")) == 13);

    REQUIRE(cli({"gen-data", "--config", ws("run.cfg"), "--set", "data.n=12", "--n", "15", "--out", ws("n.jsonl")})
                .code == kExitOk);
    CHECK(line_count(ws("n.jsonl")) == 16);
    ::unsetenv("CPOLAB_DATA_N");

    RunConfig snap;
    snap.load_file(snapshot_path(ws("n.jsonl")));
    CHECK(snap.get("seed") == "3");
    CHECK(snap.get("data.n") == "15");
}

TEST_CASE("pipeline stages rerun from their snapshots") {
    Workspace ws;
    REQUIRE(cli(small({"gen-data", "--n", "40", "--out", ws("d.jsonl")})).code == kExitOk);
    REQUIRE(cli(small({"train-sft", "--data", ws("d.jsonl"), "--out", ws("sft.ck")})).code == kExitOk);
    CHECK(fs::exists(ws("sft.ck.log.csv")));

    SUBCASE("zero alignment steps copy the input model") {
        REQUIRE(cli(small({"train-align", "--sft", ws("sft.ck"), "--data", ws("d.jsonl"), "--steps", "0", "--out",
                           ws("zero.ck")}))
                    .code == kExitOk);
        CHECK(oracle::slurp(ws("zero.ck")) == oracle::slurp(ws("sft.ck")));
    }
    SUBCASE("snapshot reruns are byte identical") {
        REQUIRE(cli(small({"train-align", "--sft", ws("sft.ck"), "--data", ws("d.jsonl"), "--variant", "cpo",
                           "--out", ws("cpo.ck"), "--log", ws("cpo.csv")}))
                    .code == kExitOk);
        REQUIRE(cli(small({"eval", "--model", ws("cpo.ck"), "--n", "4", "--out", ws("cpo.json")})).code == kExitOk);

        const std::vector<std::pair<std::string, std::string>> outputs{
            {"d.jsonl", "gen-data"}, {"sft.ck", "train-sft"}, {"cpo.ck", "train-align"}, {"cpo.json", "eval"}};
        for (const auto& [file, command] : outputs) {
            CAPTURE(command);
            const std::string before = oracle::slurp(ws(file));
            REQUIRE(cli({command, "--config", snapshot_path(ws(file))}).code == kExitOk);
            CHECK(oracle::slurp(ws(file)) == before);
        }
        CHECK(line_count(ws("cpo.csv")) == 4);
    }
    SUBCASE("eval splits the total over prompts") {
        REQUIRE(cli(small({"eval", "--model", ws("sft.ck"), "--n", "6", "--out", ws("r.json")})).code == kExitOk);
        CHECK(read_report(ws("r.json")).n_samples == 6);
        CHECK(read_report(ws("r.json")).model_id == "sft");
        CHECK(cli(small({"eval", "--model", ws("sft.ck"), "--n", "5", "--out", ws("r.json")})).code ==
              kExitValidation);
    }
}

TEST_CASE("selfcheck --fast") {
    const Run r = cli({"selfcheck", "--fast"});
    CHECK(r.code == kExitOk);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("passed").get<bool>());
    CHECK(j.at("checks").size() >= 8);
}
