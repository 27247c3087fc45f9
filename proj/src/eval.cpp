#include "cpolab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "cpolab/error.hpp"
#include "cpolab/rng.hpp"

namespace cpolab {

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + (v[hi] - v[lo]) * frac;
}

}  // namespace

Interval bootstrap_mean_ci(std::span<const double> values, int resamples, double level, std::uint64_t seed) {
    if (values.empty()) throw ValidationError("bootstrap of an empty sample");
    if (resamples < 1) throw ValidationError("resamples must be positive");
    Rng rng{derive_seed(seed, "bootstrap")};
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    std::vector<double> means(static_cast<std::size_t>(resamples));
    for (double& m : means) {
        double s = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
        m = s / static_cast<double>(values.size());
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - level) / 2.0;
    return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

EvalReport summarize_annotations(const std::string& model_id, const std::vector<std::optional<AnnotatedSample>>& samples,
                                 const AttributeTree& tree, int resamples, std::uint64_t seed) {
    EvalReport r;
    r.model_id = model_id;
    r.n_samples = samples.size();
    std::vector<double> counts;
    std::map<std::string, std::pair<std::size_t, std::size_t>> per_pair;  // (neg, applicable)
    for (const auto* p : tree.canonical_pairs()) per_pair[p->pair_id] = {0, 0};
    for (const auto& s : samples) {
        if (!s) {
            ++r.n_degenerate;
            continue;
        }
        counts.push_back(static_cast<double>(s->a_neg.size()));
        for (const std::string& id : applicable_pairs(tree, s->y)) {
            auto& [neg, applicable] = per_pair[id];
            ++applicable;
            if (s->a_neg.contains_pair(id)) ++neg;
        }
    }
    if (counts.empty()) throw Error("no non-degenerate samples to evaluate");
    r.mean_a_neg = std::accumulate(counts.begin(), counts.end(), 0.0) / static_cast<double>(counts.size());
    const Interval ci = bootstrap_mean_ci(counts, resamples, 0.95, seed);
    r.ci_low = std::min(ci.low, r.mean_a_neg);
    r.ci_high = std::max(ci.high, r.mean_a_neg);
    for (const auto& [id, c] : per_pair) {
        r.per_pair_neg_rate[id] = c.second == 0 ? 0.0 : static_cast<double>(c.first) / static_cast<double>(c.second);
    }
    return r;
}

std::vector<GeneratedSample> generate_samples(const DenoiserParams& params, const ConditionVocabulary& vocab,
                                              const std::vector<Family>& prompts, const SamplingOptions& opts,
                                              const NoiseSchedule& sched) {
    if (opts.n_per_prompt == 0) throw ValidationError("n_per_prompt must be >= 1");
    std::vector<GeneratedSample> out;
    out.reserve(prompts.size() * opts.n_per_prompt);
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        ConditionVector cond = encode_condition(vocab, prompts[p], {}, {});
        const NoisePredictor model = as_predictor(params, cond);
        for (std::size_t k = 0; k < opts.n_per_prompt; ++k) {
            GeneratedSample g;
            g.family = prompts[p];
            g.seed = derive_seed(opts.seed, "sample", p * opts.n_per_prompt + k);
            g.cond = cond;
            g.points = ddim_sample(model, sched, opts.sampler_steps, params.arch.data_dim, g.seed, opts.x0_clip);
            out.push_back(std::move(g));
        }
    }
    return out;
}

std::optional<AnnotatedSample> annotate_generated(const GeneratedSample& g, const AttributeTree& tree,
                                                  const OracleThresholds& thresholds) {
    AnnotatedSample s;
    s.sample = Sample{g.family, g.points};
    s.y = g.family;
    try {
        Annotation a = annotate(s.sample, tree, thresholds);
        s.a_pos = std::move(a.a_pos);
        s.a_neg = std::move(a.a_neg);
    } catch (const ValidationError&) {
        return std::nullopt;
    }
    return s;
}

EvalReport evaluate_model(const std::string& model_id, const DenoiserParams& params, const std::vector<Family>& prompts,
                          const AttributeTree& tree, const OracleThresholds& thresholds, const SamplingOptions& opts,
                          const NoiseSchedule& sched, int resamples) {
    if (prompts.empty()) throw ValidationError("no prompts");
    const ConditionVocabulary vocab(tree);
    const auto generated = generate_samples(params, vocab, prompts, opts, sched);
    std::vector<std::optional<AnnotatedSample>> annotated;
    annotated.reserve(generated.size());
    for (const auto& g : generated) annotated.push_back(annotate_generated(g, tree, thresholds));
    return summarize_annotations(model_id, annotated, tree, resamples, opts.seed);
}

double iou(const AttributeSet& a, const AttributeSet& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& e : a) {
        if (b.contains(e)) ++inter;
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double iou(const AttributeTree& tree, const AttributeSet& a, const AttributeSet& b) {
    for (const AttributeSet* s : {&a, &b}) {
        for (const auto& e : *s) {
            if (tree.find_pair(e.pair_id) == nullptr) throw ValidationError("attribute not in tree: " + e.pair_id);
        }
    }
    return iou(a, b);
}

IouReport evaluate_iou(const DenoiserParams& params, const std::vector<const DatasetRecord*>& records,
                       const AttributeTree& tree, const OracleThresholds& thresholds, const SamplingOptions& opts,
                       const NoiseSchedule& sched) {
    const ConditionVocabulary vocab(tree);
    IouReport r;
    double pos_sum = 0.0, neg_sum = 0.0;
    std::size_t pos_n = 0, neg_n = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const AnnotatedSample& req = records[i]->annotated;
        GeneratedSample g;
        g.family = req.y;
        g.seed = derive_seed(opts.seed, "iou", i);
        g.cond = encode_condition(vocab, req.y, req.a_pos, {});
        g.points = ddim_sample(as_predictor(params, g.cond), sched, opts.sampler_steps, params.arch.data_dim, g.seed,
                               opts.x0_clip);
        ++r.n_requests;
        const auto got = annotate_generated(g, tree, thresholds);
        if (!got) {
            ++r.n_degenerate;
            continue;
        }
        pos_sum += iou(tree, req.a_pos, got->a_pos);
        ++pos_n;
        if (!req.a_neg.empty()) {
            neg_sum += iou(tree, req.a_neg, got->a_neg);
            ++neg_n;
        }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.iou_pos = pos_n ? pos_sum / static_cast<double>(pos_n) : nan;
    r.iou_neg = neg_n ? neg_sum / static_cast<double>(neg_n) : nan;
    return r;
}

std::vector<double> moving_average(std::span<const double> series, std::size_t window) {
    if (window == 0) throw ValidationError("smoothing window must be >= 1");
    std::vector<double> out(series.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        sum += series[i];
        if (i >= window) sum -= series[i - window];
        out[i] = sum / static_cast<double>(std::min(i + 1, window));
    }
    if (window == 1) return {series.begin(), series.end()};
    return out;
}

double diff_std(std::span<const double> series) {
    if (series.size() < 2) return 0.0;
    std::vector<double> d(series.size() - 1);
    for (std::size_t i = 1; i < series.size(); ++i) d[i - 1] = series[i] - series[i - 1];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    double ss = 0.0;
    for (double x : d) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(d.size()));
}

CurveSummary loss_curves(const std::vector<LossParts>& log, std::size_t window) {
    if (log.empty()) throw ValidationError("empty loss log");
    if (window == 0) throw ValidationError("smoothing window must be >= 1");
    std::vector<double> win, lose, stab, total;
    CurveSummary c;
    for (const auto& p : log) {
        c.steps.push_back(p.step);
        win.push_back(p.win_part);
        lose.push_back(p.lose_part);
        stab.push_back(p.stab_part);
        total.push_back(p.total);
    }
    c.win = moving_average(win, window);
    c.lose = moving_average(lose, window);
    c.stab = moving_average(stab, window);
    c.total = moving_average(total, window);
    c.terminal_win = c.win.back();
    c.terminal_total = c.total.back();
    c.oscillation = diff_std(c.total);
    c.raw_oscillation = diff_std(total);
    return c;
}

std::optional<long> first_step_reaching(const CurveSummary& curve, double level) {
    for (std::size_t i = 0; i < curve.win.size(); ++i) {
        if (curve.win[i] <= level) return curve.steps[i];
    }
    return std::nullopt;
}

void write_curves(const std::string& path, const CurveSummary& c) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write curves: " + path);
    out.precision(17);
    out << "step,win_part,lose_part,total,stab_part\n";
    for (std::size_t i = 0; i < c.steps.size(); ++i) {
        out << c.steps[i] << ',' << c.win[i] << ',' << c.lose[i] << ',' << c.total[i] << ',' << c.stab[i] << '\n';
    }
}

bool Comparison::overlapping(std::size_t i, std::size_t j) const {
    if (i > j) std::swap(i, j);
    return std::find(overlaps.begin(), overlaps.end(), std::pair{i, j}) != overlaps.end();
}

Comparison compare_models(const std::vector<EvalReport>& reports) {
    if (reports.size() < 2) throw ValidationError("compare needs at least two reports");
    Comparison c;
    for (const auto& r : reports) c.ranking.push_back({r.model_id, r.mean_a_neg, r.ci_low, r.ci_high});
    std::stable_sort(c.ranking.begin(), c.ranking.end(),
                     [](const RankedModel& a, const RankedModel& b) { return a.mean_a_neg < b.mean_a_neg; });
    for (std::size_t i = 0; i < c.ranking.size(); ++i) {
        for (std::size_t j = i + 1; j < c.ranking.size(); ++j) {
            const auto& a = c.ranking[i];
            const auto& b = c.ranking[j];
            if (std::max(a.ci_low, b.ci_low) <= std::min(a.ci_high, b.ci_high)) c.overlaps.emplace_back(i, j);
        }
    }
    return c;
}

nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["model_id"] = r.model_id;
    j["n_samples"] = r.n_samples;
    j["n_degenerate"] = r.n_degenerate;
    j["mean_a_neg"] = r.mean_a_neg;
    j["ci_low"] = r.ci_low;
    j["ci_high"] = r.ci_high;
    j["iou_pos"] = r.iou_pos ? nlohmann::json(*r.iou_pos) : nlohmann::json(nullptr);
    j["iou_neg"] = r.iou_neg ? nlohmann::json(*r.iou_neg) : nlohmann::json(nullptr);
    j["per_pair_neg_rate"] = r.per_pair_neg_rate;
    return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
    try {
        EvalReport r;
        r.model_id = j.at("model_id").get<std::string>();
        r.n_samples = j.at("n_samples").get<std::size_t>();
        r.n_degenerate = j.value("n_degenerate", std::size_t{0});
        r.mean_a_neg = j.at("mean_a_neg").get<double>();
        r.ci_low = j.at("ci_low").get<double>();
        r.ci_high = j.at("ci_high").get<double>();
        if (j.contains("iou_pos") && !j["iou_pos"].is_null()) r.iou_pos = j["iou_pos"].get<double>();
        if (j.contains("iou_neg") && !j["iou_neg"].is_null()) r.iou_neg = j["iou_neg"].get<double>();
        if (j.contains("per_pair_neg_rate")) {
            r.per_pair_neg_rate = j["per_pair_neg_rate"].get<std::map<std::string, double>>();
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed report: ") + e.what());
    }
}

void write_report(const std::string& path, const EvalReport& r) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write report: " + path);
    out << report_to_json(r).dump(2) << '\n';
}

EvalReport read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open report: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path + ": " + e.what());
    }
    return report_from_json(j);
}

nlohmann::json comparison_to_json(const Comparison& c) {
    nlohmann::json j;
    j["ranking"] = nlohmann::json::array();
    for (const auto& m : c.ranking) {
        j["ranking"].push_back({{"model_id", m.model_id}, {"mean_a_neg", m.mean_a_neg}, {"ci_low", m.ci_low},
                                {"ci_high", m.ci_high}});
    }
    j["overlaps"] = nlohmann::json::array();
    for (const auto& [a, b] : c.overlaps) j["overlaps"].push_back({c.ranking[a].model_id, c.ranking[b].model_id});
    return j;
}

void write_samples(const std::string& path, const std::vector<GeneratedSample>& samples) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write samples: " + path);
    for (const auto& s : samples) {
        nlohmann::json j;
        j["family"] = std::string(to_string(s.family));
        j["seed"] = s.seed;
        j["cond"] = s.cond;
        j["points"] = s.points;
        out << j.dump() << '\n';
    }
}

}  // namespace cpolab
