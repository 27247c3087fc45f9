#pragma once

// Oracle-based evaluation of generated samples: mean negative-attribute count
// with a bootstrap interval, attribute IoU, loss-curve summaries and model
// ranking.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpolab/dataset.hpp"
#include "cpolab/denoiser.hpp"
#include "cpolab/diffusion.hpp"
#include "cpolab/preference.hpp"
#include "cpolab/taxonomy.hpp"

namespace cpolab {

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

/// Percentile bootstrap interval of the mean.
Interval bootstrap_mean_ci(std::span<const double> values, int resamples, double level, std::uint64_t seed);

struct EvalReport {
    std::string model_id;
    std::size_t n_samples = 0;
    std::size_t n_degenerate = 0;
    double mean_a_neg = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::optional<double> iou_pos;
    std::optional<double> iou_neg;
    /// Fraction of samples where the pair was applicable and annotated NEG.
    std::map<std::string, double> per_pair_neg_rate;
};

/// Summarizes oracle annotations; degenerate entries (nullopt) are counted
/// and excluded from the mean.
EvalReport summarize_annotations(const std::string& model_id, const std::vector<std::optional<AnnotatedSample>>& samples,
                                 const AttributeTree& tree, int resamples, std::uint64_t seed);

struct GeneratedSample {
    Family family = Family::Ring;
    std::uint64_t seed = 0;
    ConditionVector cond;
    Vec points;
};

struct SamplingOptions {
    int sampler_steps = 100;
    std::size_t n_per_prompt = 250;
    std::uint64_t seed = 0;
    /// Bound applied to x0_hat inside the sampler; 0 disables.
    double x0_clip = 1.5;
};

/// Content-only conditioning (y) per prompt; the k-th draw of prompt p uses
/// the noise seed derive_seed(seed, "sample", p * n_per_prompt + k).
std::vector<GeneratedSample> generate_samples(const DenoiserParams& params, const ConditionVocabulary& vocab,
                                              const std::vector<Family>& prompts, const SamplingOptions& opts,
                                              const NoiseSchedule& sched);

std::optional<AnnotatedSample> annotate_generated(const GeneratedSample& g, const AttributeTree& tree,
                                                  const OracleThresholds& thresholds);

EvalReport evaluate_model(const std::string& model_id, const DenoiserParams& params, const std::vector<Family>& prompts,
                          const AttributeTree& tree, const OracleThresholds& thresholds, const SamplingOptions& opts,
                          const NoiseSchedule& sched, int resamples = 2000);

/// |a & b| / |a | b| over (pair_id, polarity) entries; 1 when both are empty.
double iou(const AttributeSet& a, const AttributeSet& b);
/// Same, after checking every entry belongs to the tree.
double iou(const AttributeTree& tree, const AttributeSet& a, const AttributeSet& b);

struct IouReport {
    double iou_pos = 0.0;
    /// Averaged over requests with a non-empty A_neg; NaN when there are none.
    double iou_neg = 0.0;
    std::size_t n_requests = 0;
    std::size_t n_degenerate = 0;
};

/// Samples each record with condition (y, A_pos) and compares the oracle's
/// annotation against the record's A_pos and A_neg.
IouReport evaluate_iou(const DenoiserParams& params, const std::vector<const DatasetRecord*>& records,
                       const AttributeTree& tree, const OracleThresholds& thresholds, const SamplingOptions& opts,
                       const NoiseSchedule& sched);

/// Trailing moving average; the first window-1 entries average what exists.
std::vector<double> moving_average(std::span<const double> series, std::size_t window);
/// Population standard deviation of consecutive differences.
double diff_std(std::span<const double> series);

struct CurveSummary {
    std::vector<long> steps;
    std::vector<double> win, lose, stab, total;
    double terminal_win = 0.0;
    double terminal_total = 0.0;
    /// diff_std of the smoothed total.
    double oscillation = 0.0;
    /// diff_std of the raw total.
    double raw_oscillation = 0.0;
};

/// Throws ValidationError on an empty log or zero window.
CurveSummary loss_curves(const std::vector<LossParts>& log, std::size_t window);

/// First logged step whose smoothed win_part is <= level; nullopt if never.
std::optional<long> first_step_reaching(const CurveSummary& curve, double level);

void write_curves(const std::string& path, const CurveSummary& curve);

struct RankedModel {
    std::string model_id;
    double mean_a_neg = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

struct Comparison {
    std::vector<RankedModel> ranking;
    /// (i, j) indices into ranking whose intervals intersect.
    std::vector<std::pair<std::size_t, std::size_t>> overlaps;

    bool overlapping(std::size_t i, std::size_t j) const;
};

/// Throws ValidationError for fewer than two reports.
Comparison compare_models(const std::vector<EvalReport>& reports);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
void write_report(const std::string& path, const EvalReport& r);
EvalReport read_report(const std::string& path);
nlohmann::json comparison_to_json(const Comparison& c);

void write_samples(const std::string& path, const std::vector<GeneratedSample>& samples);

}  // namespace cpolab
