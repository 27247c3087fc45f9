#pragma once

// Synthetic 2-D point-cloud samples, the rule-based attribute oracle, and the
// annotated dataset D = {(x0, y, A_pos, A_neg)} with its JSONL container.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpolab/rng.hpp"
#include "cpolab/taxonomy.hpp"

namespace cpolab {

inline constexpr std::size_t kDefaultPointCount = 32;

struct Sample {
    Family family = Family::Ring;
    /// Interleaved (x, y) coordinates; length 2K.
    std::vector<double> points;

    std::size_t point_count() const { return points.size() / 2; }
    bool operator==(const Sample&) const = default;
};

struct GeneratorKnobs {
    double gap_fraction = 0.0;
    double jitter_sigma = 0.0;
    double centroid_offset = 0.0;
    double dispersion_ratio = 1.0;
    double noise_sigma = 0.0;

    bool operator==(const GeneratorKnobs&) const = default;
};

/// Throws ValidationError when a knob is out of range.
void validate_knobs(const GeneratorKnobs& knobs);

struct OracleThresholds {
    double gap_max = 0.10;
    double jitter_max = 0.05;
    double centroid_max = 0.15;
    double dispersion_low = 0.8;
    double dispersion_high = 1.25;

    bool operator==(const OracleThresholds&) const = default;
};

void validate_thresholds(const OracleThresholds& t);

/// RING: K points on an arc covering (1 - gap) of the unit circle, recentred on
/// the origin. GRID: ceil(sqrt K)^2 lattice truncated to K points, normalized to
/// unit RMS radius and jittered. Both are then scaled by dispersion_ratio,
/// shifted by centroid_offset along a seeded direction and perturbed by
/// observation noise.
Sample generate_sample(Family family, const GeneratorKnobs& knobs, std::uint64_t seed,
                       std::size_t point_count = kDefaultPointCount);

// Oracle statistics. Each is permutation-invariant in the points.

/// Norm of the point mean.
double centroid_norm(std::span<const double> points);
/// RMS distance to the point mean (target spread is 1).
double dispersion_ratio(std::span<const double> points);
/// Fraction of the circle around the algebraically fitted centre occupied by
/// the points: 1 - (largest angular gap - median gap) / 2pi. Zero when no
/// circle can be fitted.
double arc_coverage(std::span<const double> points);
/// Per-coordinate RMS distance to the best-fitting axis-aligned square
/// lattice, expressed at the nominal (unit-dispersion) lattice scale.
double grid_residual(std::span<const double> points);

struct Annotation {
    AttributeSet a_pos;
    AttributeSet a_neg;
};

/// Assigns exactly one polarity per applicable pair. Throws
/// ValidationError("degenerate sample") when all points coincide or a
/// coordinate is non-finite.
Annotation annotate(const Sample& sample, const AttributeTree& tree, const OracleThresholds& thresholds);

struct AnnotatedSample {
    Sample sample;
    Family y = Family::Ring;
    AttributeSet a_pos;
    AttributeSet a_neg;

    bool operator==(const AnnotatedSample&) const = default;
};

enum class Split { Train, Val, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view name);

struct DatasetRecord {
    AnnotatedSample annotated;
    GeneratorKnobs knobs;
    Split split = Split::Train;

    bool operator==(const DatasetRecord&) const = default;
};

struct DatasetHeader {
    int schema = 1;
    std::string tree_hash;
    OracleThresholds thresholds;
    std::size_t point_count = kDefaultPointCount;
    std::uint64_t seed = 0;

    bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
    std::optional<DatasetHeader> header;
    std::vector<DatasetRecord> records;

    std::vector<const DatasetRecord*> split(Split s) const;
    bool operator==(const Dataset&) const = default;
};

/// Distribution the training knobs are drawn from.
struct KnobMix {
    double ring_probability = 0.5;
    /// Per applicable attribute: "good" knob with this probability, else "bad".
    double good_probability = 0.6;
    /// Bad knobs sit at this multiple of the oracle threshold.
    double bad_multiplier = 2.0;
    double noise_sigma = 0.01;
};

/// Draws one knob setting for the family; each applicable attribute is good or
/// bad independently.
GeneratorKnobs draw_knobs(Family family, const KnobMix& mix, const OracleThresholds& thresholds, Rng& rng);

struct SplitSizes {
    std::size_t train = 0, val = 0, test = 0;
};
/// 80/10/10 with validation and test rounded to nearest.
SplitSizes split_sizes(std::size_t n);

Dataset build_dataset(std::size_t n, const KnobMix& mix, const AttributeTree& tree,
                      const OracleThresholds& thresholds, std::uint64_t seed,
                      std::size_t point_count = kDefaultPointCount);

double mean_a_neg(std::span<const AnnotatedSample> samples);
double mean_a_neg(std::span<const std::size_t> neg_counts);

void write_dataset(const std::string& path, const Dataset& dataset);
/// Throws ValidationError naming the offending line on malformed input.
Dataset read_dataset(const std::string& path);

}  // namespace cpolab
