// Acceptance run: `acceptance prepare <dir>` runs the default pipeline into
// dir, `acceptance check <dir>` prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

#include "cpolab/commands.hpp"
#include "oracles.hpp"

using namespace cpolab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Stage {
    std::string command;
    std::string output;
    std::vector<std::string> args;
};

// The default benchmark: 1000 training samples, 500 eval samples per model.
std::vector<Stage> pipeline(const fs::path& dir) {
    auto p = [&](const std::string& f) { return (dir / f).string(); };
    std::vector<Stage> s;
    s.push_back({"gen-data", "data.jsonl", {"--n", "1000", "--out", p("data.jsonl")}});
    s.push_back({"train-sft", "sft.ck", {"--data", p("data.jsonl"), "--out", p("sft.ck"), "--log", p("sft.csv")}});
    for (const std::string v : {"cpo-s", "cpo", "dpo-binary", "dpo-scalar"}) {
        s.push_back({"train-align",
                     v + ".ck",
                     {"--sft", p("sft.ck"), "--data", p("data.jsonl"), "--variant", v, "--out", p(v + ".ck"), "--log",
                      p(v + ".csv")}});
    }
    for (const std::string w : {"1", "3"}) {
        s.push_back({"train-align",
                     "w" + w + ".ck",
                     {"--sft", p("sft.ck"), "--data", p("data.jsonl"), "--variant", "cpo-s", "--omega-w", w,
                      "--omega-l", w, "--out", p("w" + w + ".ck"), "--log", p("w" + w + ".csv")}});
    }
    for (const std::string m : {"sft", "cpo-s", "cpo", "dpo-binary", "dpo-scalar", "w1", "w3"}) {
        s.push_back({"eval", m + ".json", {"--model", p(m + ".ck"), "--n", "500", "--out", p(m + ".json")}});
    }
    for (const std::string m : {"cpo-s", "cpo"}) {
        s.push_back({"curves", m + ".curves.csv", {"--log", p(m + ".csv"), "--out", p(m + ".curves.csv")}});
    }
    return s;
}

int run_stage(const std::string& command, const std::vector<std::string>& args) {
    std::vector<std::string> argv{command};
    argv.insert(argv.end(), args.begin(), args.end());
    std::ostringstream sink;
    const int code = run_cli(argv, sink, std::cerr);
    if (code != kExitOk) std::cerr << command << " exited with " << code << '\n';
    return code;
}

int prepare(const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto t0 = Clock::now();
    for (const Stage& s : pipeline(dir)) {
        const auto ts = Clock::now();
        if (run_stage(s.command, s.args) != kExitOk) return 1;
        std::cout << s.command << ' ' << s.output << ' ' << std::fixed << std::setprecision(1) << seconds_since(ts)
                  << " s\n";
    }
    std::ofstream(dir / "pipeline_seconds.txt") << seconds_since(t0) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// Analytic criteria.

const double kLn2 = std::numbers::ln2;

NoiseSchedule pipeline_schedule() { return make_schedule(100, 1e-3, 0.2); }

Architecture pipeline_arch() {
    return {64, 16, ConditionVocabulary(default_tree()).width(), 128, 100, noise_skip(pipeline_schedule())};
}

Vec normal_vec(Rng& rng, std::size_t n, double scale = 1.0) {
    Vec v(n);
    fill_normal(rng, v);
    for (auto& x : v) x *= scale;
    return v;
}

DenoiserParams random_weights(const Architecture& arch, Rng& rng) {
    DenoiserParams p = init_params(rng(), arch);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& w : p.weight(kLayerCount - 1)) w = 0.1 * u(rng);
    for (std::size_t l = 0; l < kLayerCount; ++l) {
        for (auto& b : p.bias(l)) b = 0.05 * u(rng);
    }
    return p;
}

DenoiserParams jiggle(DenoiserParams p, Rng& rng, double scale) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : p.values) v += scale * u(rng);
    return p;
}

ConditionVector content_condition(Rng& rng) {
    const ConditionVocabulary vocab(default_tree());
    return encode_condition(vocab, uniform01(rng) < 0.5 ? Family::Ring : Family::Grid, {}, {});
}

double norm(const Vec& v) {
    long double s = 0;
    for (double x : v) s += static_cast<long double>(x) * x;
    return static_cast<double>(std::sqrt(s));
}

Vec minus(const Vec& a, const Vec& b) {
    Vec d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(4) << v;
    return s.str();
}

Verdict c1_ln2() {
    const auto t0 = Clock::now();
    Rng rng{101};
    const Architecture arch = pipeline_arch();
    const NoiseSchedule sched = pipeline_schedule();
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const DenoiserParams th = random_weights(arch, rng);
        const Vec c = content_condition(rng);
        const int t = 1 + static_cast<int>(rng() % 100);
        const NoiseTargets tg{normal_vec(rng, 64), normal_vec(rng, 64), t, normal_vec(rng, 64)};
        const double kappa = 10.0 * uniform01(rng) + 0.01;
        worst = std::max(worst, std::abs(cpo_loss(th, th, tg, c, kappa).parts.total - kLn2));
        worst = std::max(worst, std::abs(cpo_s_loss(th, th, tg, c, kappa).parts.total - kLn2));
        worst = std::max(worst, std::abs(dpo_loss(th, th, normal_vec(rng, 64), normal_vec(rng, 64), c, t,
                                                  normal_vec(rng, 64), normal_vec(rng, 64), sched, kappa)
                                             .parts.total -
                                         kLn2));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && secs < 10, "max |L - ln 2| = " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Verdict c2_balance() {
    const auto t0 = Clock::now();
    Rng rng{202};
    double worst_norm = 0, worst_cos = 0;
    int used = 0;
    while (used < 1000) {
        const Vec e = normal_vec(rng, 64), r = normal_vec(rng, 64), zw = normal_vec(rng, 64), zl = normal_vec(rng, 64);
        if (norm(minus(e, zl)) < 1e-6) continue;
        ++used;
        const double kappa = 0.5;
        const EpsObjective o = cpo_s_objective(e, r, zw, zl, kappa);
        // dL/de = s * (2 (e - z_w) + g_stab) with s = kappa * sigmoid(kappa d).
        const double d = o.parts.win_part + o.parts.stab_part;
        const double s = kappa * static_cast<double>(oracle::sigmoid(static_cast<long double>(kappa) * d));
        Vec g(64);
        for (std::size_t k = 0; k < 64; ++k) g[k] = o.grad_e[k] / s - 2.0 * (e[k] - zw[k]);
        const double want = 2.0 * norm(minus(e, zw));
        worst_norm = std::max(worst_norm, std::abs(norm(g) - want) / want);
        // Repulsive: descending -g moves e along (e - z_l).
        const Vec away = minus(e, zl);
        long double dot = 0;
        for (std::size_t k = 0; k < 64; ++k) dot += -static_cast<long double>(g[k]) * away[k];
        worst_cos = std::max(worst_cos, std::abs(static_cast<double>(dot) / (norm(g) * norm(away)) - 1.0));
    }
    const double secs = seconds_since(t0);
    return {worst_norm <= 1e-9 && worst_cos <= 1e-9 && secs < 5,
            "norm rel err " + fmt(worst_norm) + ", |cos - 1| " + fmt(worst_cos) + ", " + fmt(secs) + " s"};
}

Verdict c3_norm() {
    const auto t0 = Clock::now();
    Rng rng{303};
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
        const Vec e = normal_vec(rng, 64), zw = normal_vec(rng, 64), zl = normal_vec(rng, 64);
        const Vec tgt = stabilized_target(e, zw, zl);
        worst = std::max(worst, std::abs(norm(minus(e, tgt)) - norm(minus(e, zw))));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-12 && secs < 5, "max deviation " + fmt(worst) + ", " + fmt(secs) + " s"};
}

/// Relative errors at >= 100 coordinates whose gradient is not negligible.
std::pair<double, int> fd_compare(const std::function<double(const DenoiserParams&)>& f, const DenoiserParams& p,
                                  const GradientBundle& g, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, p.values.size() - 1);
    double worst = 0;
    int checked = 0;
    for (int attempt = 0; attempt < 20000 && checked < 100; ++attempt) {
        const std::size_t k = pick(rng);
        const double fd = oracle::central_difference(f, p, k, 1e-5);
        if (std::max(std::abs(fd), std::abs(g.values[k])) < 1e-6) continue;
        worst = std::max(worst, oracle::relative_error(fd, g.values[k]));
        ++checked;
    }
    return {worst, checked};
}

Verdict c4_fd() {
    const auto t0 = Clock::now();
    Rng rng{404};
    const Architecture arch = pipeline_arch();
    const NoiseSchedule sched = pipeline_schedule();
    const DenoiserParams th = random_weights(arch, rng);
    const DenoiserParams ref = jiggle(th, rng, 0.02);
    const Vec c = content_condition(rng);
    const double kappa = 0.5;
    std::string detail;
    bool ok = true;
    auto record = [&](const std::string& name, std::pair<double, int> r) {
        ok = ok && r.first <= 1e-4 && r.second >= 100;
        detail += name + " " + fmt(r.first) + " (" + std::to_string(r.second) + "), ";
    };

    {  // Denoising loss on a fixed batch with a fixed noise stream.
        const Dataset ds = build_dataset(10, KnobMix{}, default_tree(), OracleThresholds{}, 5);
        const ConditionVocabulary vocab(default_tree());
        std::vector<ConditionVector> conds;
        for (const auto& r : ds.records) conds.push_back(full_condition(vocab, r.annotated));
        std::vector<SftItem> batch;
        for (std::size_t i = 0; i < 4; ++i) batch.push_back({ds.records[i].annotated.sample.points, conds[i]});
        const auto f = [&](const DenoiserParams& q) {
            Rng noise{55};
            return sft_loss(q, batch, sched, noise).loss;
        };
        Rng noise{55};
        record("sft", fd_compare(f, th, sft_loss(th, batch, sched, noise).grads, rng));
    }

    const Vec x_t = normal_vec(rng, 64);
    const int t = 37;
    const Vec e0 = forward(th, x_t, t, c);
    Vec zw = e0, zl = e0;
    const Vec dw = normal_vec(rng, 64, 0.1), dl = normal_vec(rng, 64, 0.1);
    for (std::size_t k = 0; k < 64; ++k) {
        zw[k] += dw[k];
        zl[k] += dl[k];
    }
    const NoiseTargets tg{zw, zl, t, x_t};
    const Vec r0 = forward(ref, x_t, t, c);

    {  // CPO from its definition.
        const auto f = [&](const DenoiserParams& q) {
            return static_cast<double>(oracle::cpo_total(forward(q, x_t, t, c), r0, zw, zl, kappa));
        };
        record("cpo", fd_compare(f, th, cpo_loss(th, ref, tg, c, kappa).grads, rng));
    }
    {  // CPO-S with the surrogate target frozen at the base point.
        const Vec frozen = stabilized_target(e0, zw, zl);
        const auto f = [&](const DenoiserParams& q) {
            const Vec e = forward(q, x_t, t, c);
            const long double win = oracle::sq_dist(zw, e) - oracle::sq_dist(zw, r0);
            const long double stab = oracle::sq_dist(frozen, e) - oracle::sq_dist(frozen, r0);
            return static_cast<double>(oracle::neg_log_sigmoid(-kappa * (win + stab)));
        };
        record("cpo-s", fd_compare(f, th, cpo_s_loss(th, ref, tg, c, kappa).grads, rng));
    }
    {  // Diffusion-DPO from its definition.
        const Vec x0w = normal_vec(rng, 64), x0l = normal_vec(rng, 64);
        const Vec ew = normal_vec(rng, 64), el = normal_vec(rng, 64);
        const double ab = sched.alpha_bar(t);
        Vec xw(64), xl(64);
        for (std::size_t k = 0; k < 64; ++k) {
            xw[k] = std::sqrt(ab) * x0w[k] + std::sqrt(1 - ab) * ew[k];
            xl[k] = std::sqrt(ab) * x0l[k] + std::sqrt(1 - ab) * el[k];
        }
        const Vec rw = forward(ref, xw, t, c), rl = forward(ref, xl, t, c);
        const auto f = [&](const DenoiserParams& q) {
            const long double win = oracle::sq_dist(ew, forward(q, xw, t, c)) - oracle::sq_dist(ew, rw);
            const long double lose = oracle::sq_dist(el, forward(q, xl, t, c)) - oracle::sq_dist(el, rl);
            return static_cast<double>(oracle::neg_log_sigmoid(-kappa * (win - lose)));
        };
        record("dpo", fd_compare(f, th, dpo_loss(th, ref, x0w, x0l, c, t, ew, el, sched, kappa).grads, rng));
    }
    const double secs = seconds_since(t0);
    return {ok && secs < 120, "max rel err (coords): " + detail + fmt(secs) + " s"};
}

Verdict c5_reduction() {
    const auto t0 = Clock::now();
    Rng rng{505};
    const Architecture arch = pipeline_arch();
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const DenoiserParams th = random_weights(arch, rng);
        const DenoiserParams ref = jiggle(th, rng, 0.02);
        const Vec c = content_condition(rng);
        const int t = 1 + static_cast<int>(rng() % 100);
        const Vec x_t = normal_vec(rng, 64), ew = normal_vec(rng, 64), el = normal_vec(rng, 64);
        const double a = cpo_loss(th, ref, NoiseTargets{ew, el, t, x_t}, c, 10.0).parts.total;
        const double b = dpo_loss(th, ref, NoisyState{x_t, t, ew}, NoisyState{x_t, t, el}, c, 10.0).parts.total;
        worst = std::max(worst, std::abs(a - b));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-12 && secs < 10, "max |cpo - dpo| = " + fmt(worst) + ", " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------------------
// Pipeline criteria.

EvalReport report(const fs::path& dir, const std::string& id) { return read_report((dir / (id + ".json")).string()); }

std::string describe(const EvalReport& r) {
    return r.model_id + " " + fmt(r.mean_a_neg) + " [" + fmt(r.ci_low) + ", " + fmt(r.ci_high) + "]";
}

Verdict c6_headline(const fs::path& dir) {
    const EvalReport sft = report(dir, "sft"), cpos = report(dir, "cpo-s"), dpo = report(dir, "dpo-binary");
    double secs = 0;
    std::ifstream(dir / "pipeline_seconds.txt") >> secs;
    const bool separated = cpos.mean_a_neg < sft.mean_a_neg && cpos.ci_high < sft.ci_low;
    const bool vs_dpo = cpos.mean_a_neg <= dpo.mean_a_neg;
    const bool n_ok = sft.n_samples == 500 && cpos.n_samples == 500 && dpo.n_samples == 500;
    return {separated && vs_dpo && n_ok && secs > 0 && secs < 1800,
            describe(cpos) + " vs " + describe(sft) + (separated ? " (separated)" : " (not separated)") + "; vs " +
                describe(dpo) + (vs_dpo ? " (<=)" : " (>)") + "; pipeline " + fmt(secs) + " s"};
}

struct Curve {
    std::vector<double> win, total;
};

Curve read_log(const fs::path& p) {
    Curve c;
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream s(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(s, cell, ',')) v.push_back(std::stod(cell));
        c.win.push_back(v.at(1));
        c.total.push_back(v.at(3));
    }
    return c;
}

std::vector<double> trailing_mean(const std::vector<double>& x, std::size_t w) {
    std::vector<double> out;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t b = i + 1 >= w ? i + 1 - w : 0;
        long double s = 0;
        for (std::size_t j = b; j <= i; ++j) s += x[j];
        out.push_back(static_cast<double>(s / (i + 1 - b)));
    }
    return out;
}

Verdict c7_stability(const fs::path& dir) {
    const Curve s = read_log(dir / "cpo-s.csv"), c = read_log(dir / "cpo.csv");
    if (s.win.empty() || s.win.size() != c.win.size()) return {false, "logs missing or of unequal length"};
    const std::size_t window = 25;
    const auto sw = trailing_mean(s.win, window), cw = trailing_mean(c.win, window);
    const auto st = trailing_mean(s.total, window), ct = trailing_mean(c.total, window);
    const bool a = sw.back() < cw.back();
    const double osc_s = oracle::diff_std(st), osc_c = oracle::diff_std(ct);
    const double raw_s = oracle::diff_std(s.total), raw_c = oracle::diff_std(c.total);
    const bool b = osc_s < osc_c && raw_s < raw_c;
    std::size_t reach = 0;
    while (reach < sw.size() && sw[reach] > cw.back()) ++reach;
    const std::size_t steps = sw.size();
    const bool half = reach < steps && 2 * (reach + 1) <= steps;
    return {a && b && half, "terminal win " + fmt(sw.back()) + " vs " + fmt(cw.back()) + "; oscillation " +
                                fmt(osc_s) + " vs " + fmt(osc_c) + " (raw " + fmt(raw_s) + " vs " + fmt(raw_c) +
                                "); reaches CPO terminal win at step " + std::to_string(reach + 1) + " of " +
                                std::to_string(steps)};
}

Verdict c8_granularity(const fs::path& dir) {
    const EvalReport sc = report(dir, "dpo-scalar"), bi = report(dir, "dpo-binary"), cs = report(dir, "cpo-s");
    const bool ok = sc.mean_a_neg >= bi.mean_a_neg && bi.mean_a_neg >= cs.mean_a_neg;
    return {ok, describe(sc) + " >= " + describe(bi) + " >= " + describe(cs)};
}

Verdict c9_omega(const fs::path& dir) {
    const EvalReport w1 = report(dir, "w1"), w3 = report(dir, "w3");
    return {w3.mean_a_neg <= w1.mean_a_neg, "omega 3: " + describe(w3) + " vs omega 1: " + describe(w1)};
}

Verdict c10_determinism(const fs::path& dir) {
    std::vector<std::string> mismatched;
    int reruns = 0;
    for (const Stage& s : pipeline(dir)) {
        const fs::path out = dir / s.output;
        std::vector<fs::path> files{out};
        if (s.command == "train-sft" || s.command == "train-align") {
            RunConfig cfg;
            cfg.load_file(snapshot_path(out.string()));
            files.push_back(cfg.get("io.log"));
        }
        std::vector<std::string> before;
        for (const auto& f : files) before.push_back(oracle::slurp(f));
        if (run_stage(s.command, {"--config", snapshot_path(out.string())}) != kExitOk) {
            mismatched.push_back(s.output + " (rerun failed)");
            continue;
        }
        ++reruns;
        for (std::size_t i = 0; i < files.size(); ++i) {
            if (before[i].empty() || oracle::slurp(files[i]) != before[i]) mismatched.push_back(files[i].filename());
        }
    }
    std::string detail = std::to_string(reruns) + " stages rerun from snapshots";
    for (const auto& m : mismatched) detail += "; differs: " + m;
    return {mismatched.empty(), detail};
}

int check(const fs::path& dir) {
    const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
        {1, c1_ln2},
        {2, c2_balance},
        {3, c3_norm},
        {4, c4_fd},
        {5, c5_reduction},
        {6, [&] { return c6_headline(dir); }},
        {7, [&] { return c7_stability(dir); }},
        {8, [&] { return c8_granularity(dir); }},
        {9, [&] { return c9_omega(dir); }},
        {10, [&] { return c10_determinism(dir); }},
    };
    int failed = 0;
    for (const auto& [id, fn] : criteria) {
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failed += !v.pass;
        std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
    }
    return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 3 || (std::string(argv[1]) != "prepare" && std::string(argv[1]) != "check")) {
        std::cerr << "usage: acceptance prepare|check <dir>\n";
        return 2;
    }
    const fs::path dir = fs::absolute(argv[2]);
    try {
        return std::string(argv[1]) == "prepare" ? prepare(dir) : check(dir);
    } catch (const std::exception& e) {
        std::cerr << "acceptance: " << e.what() << '\n';
        return 1;
    }
}
