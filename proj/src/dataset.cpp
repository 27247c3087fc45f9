#include "cpolab/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cpolab/error.hpp"

namespace cpolab {

using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::array<double, 2> mean_point(std::span<const double> p) {
    const std::size_t k = p.size() / 2;
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        mx += p[2 * i];
        my += p[2 * i + 1];
    }
    return {mx / static_cast<double>(k), my / static_cast<double>(k)};
}

void recentre(std::vector<double>& p) {
    const auto [mx, my] = mean_point(p);
    for (std::size_t i = 0; i < p.size() / 2; ++i) {
        p[2 * i] -= mx;
        p[2 * i + 1] -= my;
    }
}

double rms_radius(std::span<const double> p) {
    const auto [mx, my] = mean_point(p);
    const std::size_t k = p.size() / 2;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double dx = p[2 * i] - mx, dy = p[2 * i + 1] - my;
        acc += dx * dx + dy * dy;
    }
    return std::sqrt(acc / static_cast<double>(k));
}

std::size_t lattice_side(std::size_t k) {
    auto n = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(k))));
    while (n * n < k) ++n;
    return n;
}

/// Row-major lattice with unit spacing, truncated to k points, recentred.
std::vector<double> unit_lattice(std::size_t k) {
    const std::size_t n = lattice_side(k);
    std::vector<double> p(2 * k);
    for (std::size_t i = 0; i < k; ++i) {
        p[2 * i] = static_cast<double>(i % n);
        p[2 * i + 1] = static_cast<double>(i / n);
    }
    recentre(p);
    return p;
}

/// Spacing of the unit-RMS-radius lattice with k points.
double nominal_spacing(std::size_t k) {
    return 1.0 / rms_radius(unit_lattice(k));
}

double wrap_half(double u) {
    return u - std::round(u);
}

/// Per-coordinate RMS residual (in units of the spacing) of points against an
/// axis-aligned lattice with the given spacing and best offset.
double lattice_fit_relative(std::span<const double> p, double spacing) {
    const std::size_t k = p.size() / 2;
    double acc = 0.0;
    for (int axis = 0; axis < 2; ++axis) {
        double s = 0.0, c = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double phase = kTwoPi * p[2 * i + axis] / spacing;
            s += std::sin(phase);
            c += std::cos(phase);
        }
        double offset = std::atan2(s, c) / kTwoPi;
        // One least-squares correction on top of the circular mean.
        double shift = 0.0;
        for (std::size_t i = 0; i < k; ++i) shift += wrap_half(p[2 * i + axis] / spacing - offset);
        offset += shift / static_cast<double>(k);
        for (std::size_t i = 0; i < k; ++i) {
            const double u = wrap_half(p[2 * i + axis] / spacing - offset);
            acc += u * u;
        }
    }
    return std::sqrt(acc / static_cast<double>(2 * k));
}

bool all_finite(std::span<const double> p) {
    return std::all_of(p.begin(), p.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

void validate_knobs(const GeneratorKnobs& k) {
    if (!(k.gap_fraction >= 0.0 && k.gap_fraction <= 1.0)) throw ValidationError("gap_fraction outside [0,1]");
    if (!(k.jitter_sigma >= 0.0)) throw ValidationError("jitter_sigma must be >= 0");
    if (!(k.centroid_offset >= 0.0)) throw ValidationError("centroid_offset must be >= 0");
    if (!(k.dispersion_ratio > 0.0)) throw ValidationError("dispersion_ratio must be > 0");
    if (!(k.noise_sigma >= 0.0)) throw ValidationError("noise_sigma must be >= 0");
}

void validate_thresholds(const OracleThresholds& t) {
    if (!(t.gap_max > 0 && t.jitter_max > 0 && t.centroid_max > 0 && t.dispersion_low > 0)) {
        throw ValidationError("oracle thresholds must be positive");
    }
    if (!(t.dispersion_low < 1.0 && 1.0 < t.dispersion_high)) {
        throw ValidationError("dispersion band must straddle 1");
    }
}

Sample generate_sample(Family family, const GeneratorKnobs& knobs, std::uint64_t seed, std::size_t point_count) {
    validate_knobs(knobs);
    if (point_count < 3) throw ValidationError("point_count must be >= 3");
    Rng rng{derive_seed(seed, "generate")};

    Sample s;
    s.family = family;
    std::vector<double>& p = s.points;
    p.resize(2 * point_count);

    if (family == Family::Ring) {
        const double arc = (1.0 - knobs.gap_fraction) * kTwoPi;
        for (std::size_t i = 0; i < point_count; ++i) {
            const double angle = arc * (static_cast<double>(i) + 0.5) / static_cast<double>(point_count);
            p[2 * i] = std::cos(angle);
            p[2 * i + 1] = std::sin(angle);
        }
        if (knobs.gap_fraction > 0.0) recentre(p);
    } else {
        p = unit_lattice(point_count);
        const double scale = nominal_spacing(point_count);
        for (double& v : p) v *= scale;
        std::normal_distribution<double> jitter(0.0, 1.0);
        for (double& v : p) {
            const double z = jitter(rng);
            v += knobs.jitter_sigma * z;
        }
    }

    const double direction = kTwoPi * uniform01(rng);
    const double ox = knobs.centroid_offset * std::cos(direction);
    const double oy = knobs.centroid_offset * std::sin(direction);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < point_count; ++i) {
        p[2 * i] = knobs.dispersion_ratio * p[2 * i] + ox;
        p[2 * i + 1] = knobs.dispersion_ratio * p[2 * i + 1] + oy;
    }
    for (double& v : p) {
        const double z = noise(rng);
        v += knobs.noise_sigma * z;
    }
    return s;
}

double centroid_norm(std::span<const double> points) {
    const auto [mx, my] = mean_point(points);
    return std::hypot(mx, my);
}

double dispersion_ratio(std::span<const double> points) {
    return rms_radius(points);
}

double arc_coverage(std::span<const double> points) {
    const std::size_t k = points.size() / 2;
    const auto [mx, my] = mean_point(points);

    // Kasa fit on centred coordinates: x^2 + y^2 + D x + E y + F = 0.
    double sxx = 0, sxy = 0, syy = 0, sx = 0, sy = 0, sxz = 0, syz = 0, sz = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const double x = points[2 * i] - mx, y = points[2 * i + 1] - my;
        const double z = x * x + y * y;
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sx += x;
        sy += y;
        sxz += x * z;
        syz += y * z;
        sz += z;
    }
    const double n = static_cast<double>(k);
    // Normal equations A [D E F]^T = -b.
    const double a[3][3] = {{sxx, sxy, sx}, {sxy, syy, sy}, {sx, sy, n}};
    const double b[3] = {-sxz, -syz, -sz};
    auto det3 = [](const double m[3][3]) {
        return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    };
    const double det = det3(a);
    const double scale = sxx + syy;
    if (!(scale > 0.0) || std::abs(det) < 1e-12 * scale * scale * n) return 0.0;

    double sol[3];
    for (int col = 0; col < 3; ++col) {
        double m[3][3];
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) m[r][c] = (c == col) ? b[r] : a[r][c];
        }
        sol[col] = det3(m) / det;
    }
    const double cx = -sol[0] / 2.0, cy = -sol[1] / 2.0;

    std::vector<double> angles(k);
    for (std::size_t i = 0; i < k; ++i) {
        angles[i] = std::atan2(points[2 * i + 1] - my - cy, points[2 * i] - mx - cx);
    }
    std::sort(angles.begin(), angles.end());
    std::vector<double> gaps(k);
    for (std::size_t i = 0; i + 1 < k; ++i) gaps[i] = angles[i + 1] - angles[i];
    gaps[k - 1] = angles[0] + kTwoPi - angles[k - 1];

    const double largest = *std::max_element(gaps.begin(), gaps.end());
    std::vector<double> sorted = gaps;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k / 2), sorted.end());
    const double median = sorted[k / 2];
    return std::clamp(1.0 - (largest - median) / kTwoPi, 0.0, 1.0);
}

double grid_residual(std::span<const double> points) {
    const std::size_t k = points.size() / 2;
    const double nominal = nominal_spacing(k);
    const double radius = rms_radius(points);
    if (!(radius > 0.0)) return 0.0;
    const double estimate = nominal * radius;

    // Coarse scan over +-20-25% of the spread-implied spacing, then golden refinement.
    constexpr int kScan = 91;
    double best_s = estimate, best = lattice_fit_relative(points, estimate);
    const double lo = 0.8 * estimate, hi = 1.25 * estimate;
    const double step = (hi - lo) / (kScan - 1);
    for (int i = 0; i < kScan; ++i) {
        const double s = lo + step * i;
        const double r = lattice_fit_relative(points, s);
        if (r < best) {
            best = r;
            best_s = s;
        }
    }
    double a = std::max(lo, best_s - step), b = std::min(hi, best_s + step);
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - g * (b - a), d = a + g * (b - a);
    double fc = lattice_fit_relative(points, c), fd = lattice_fit_relative(points, d);
    for (int it = 0; it < 40; ++it) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = lattice_fit_relative(points, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = lattice_fit_relative(points, d);
        }
    }
    best = std::min({best, fc, fd});
    return best * nominal;
}

Annotation annotate(const Sample& sample, const AttributeTree& tree, const OracleThresholds& thresholds) {
    const std::span<const double> p = sample.points;
    if (p.empty() || p.size() % 2 != 0) throw ValidationError("degenerate sample: bad point buffer");
    if (!all_finite(p)) throw ValidationError("degenerate sample: non-finite coordinate");
    if (rms_radius(p) < 1e-9) throw ValidationError("degenerate sample: points coincide");

    Annotation out;
    for (const std::string& id : applicable_pairs(tree, sample.family)) {
        bool positive = false;
        if (id == "RING_CLOSURE") {
            positive = (1.0 - arc_coverage(p)) <= thresholds.gap_max;
        } else if (id == "GRID_REGULARITY") {
            positive = grid_residual(p) <= thresholds.jitter_max;
        } else if (id == "CENTER_BALANCE") {
            positive = centroid_norm(p) <= thresholds.centroid_max;
        } else if (id == "SPREAD_SCALE") {
            const double r = dispersion_ratio(p);
            positive = r >= thresholds.dispersion_low && r <= thresholds.dispersion_high;
        } else {
            throw ValidationError("no oracle rule for pair " + id);
        }
        if (positive) {
            out.a_pos.insert({id, Polarity::Pos});
        } else {
            out.a_neg.insert({id, Polarity::Neg});
        }
    }
    return out;
}

std::string_view to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw ValidationError("unknown split: " + std::string(name));
}

std::vector<const DatasetRecord*> Dataset::split(Split s) const {
    std::vector<const DatasetRecord*> out;
    for (const auto& r : records) {
        if (r.split == s) out.push_back(&r);
    }
    return out;
}

GeneratorKnobs draw_knobs(Family family, const KnobMix& mix, const OracleThresholds& t, Rng& rng) {
    GeneratorKnobs k;
    k.noise_sigma = mix.noise_sigma;
    auto good = [&] { return uniform01(rng) < mix.good_probability; };

    // A fixed number of draws per attribute keeps the stream aligned across families.
    const bool shape_good = good();
    const double shape_u = uniform01(rng);
    if (family == Family::Ring) {
        k.gap_fraction = shape_good ? 0.5 * t.gap_max * shape_u : mix.bad_multiplier * t.gap_max;
    } else {
        k.jitter_sigma = shape_good ? 0.5 * t.jitter_max * shape_u : mix.bad_multiplier * t.jitter_max;
    }

    const bool center_good = good();
    const double center_u = uniform01(rng);
    k.centroid_offset = center_good ? 0.5 * t.centroid_max * center_u : mix.bad_multiplier * t.centroid_max;

    const bool spread_good = good();
    const double spread_u = uniform01(rng);
    if (spread_good) {
        const double lo = 1.0 - 0.5 * (1.0 - t.dispersion_low);
        const double hi = 1.0 + 0.5 * (t.dispersion_high - 1.0);
        k.dispersion_ratio = lo + (hi - lo) * spread_u;
    } else if (spread_u < 0.5) {
        k.dispersion_ratio = 1.0 - mix.bad_multiplier * (1.0 - t.dispersion_low);
    } else {
        k.dispersion_ratio = 1.0 + mix.bad_multiplier * (t.dispersion_high - 1.0);
    }
    return k;
}

SplitSizes split_sizes(std::size_t n) {
    SplitSizes s;
    s.val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    s.test = s.val;
    s.train = n - s.val - s.test;
    return s;
}

Dataset build_dataset(std::size_t n, const KnobMix& mix, const AttributeTree& tree,
                      const OracleThresholds& thresholds, std::uint64_t seed, std::size_t point_count) {
    if (n < 10) throw ValidationError("dataset size must be >= 10");
    validate_thresholds(thresholds);

    Dataset ds;
    ds.header = DatasetHeader{1, tree_hash(tree), thresholds, point_count, seed};
    ds.records.reserve(n);

    Rng knob_rng{derive_seed(seed, "data.knobs")};
    for (std::size_t i = 0; i < n; ++i) {
        const Family family = uniform01(knob_rng) < mix.ring_probability ? Family::Ring : Family::Grid;
        DatasetRecord rec;
        rec.knobs = draw_knobs(family, mix, thresholds, knob_rng);
        Sample s = generate_sample(family, rec.knobs, derive_seed(seed, "data.sample", i), point_count);
        Annotation ann = annotate(s, tree, thresholds);
        rec.annotated = AnnotatedSample{std::move(s), family, std::move(ann.a_pos), std::move(ann.a_neg)};
        ds.records.push_back(std::move(rec));
    }

    const SplitSizes sizes = split_sizes(n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng{derive_seed(seed, "data.split")};
    std::shuffle(order.begin(), order.end(), split_rng);
    for (std::size_t i = 0; i < n; ++i) {
        Split sp = Split::Train;
        if (i >= sizes.train + sizes.val) {
            sp = Split::Test;
        } else if (i >= sizes.train) {
            sp = Split::Val;
        }
        ds.records[order[i]].split = sp;
    }
    return ds;
}

double mean_a_neg(std::span<const AnnotatedSample> samples) {
    if (samples.empty()) throw ValidationError("mean_a_neg of an empty sample list");
    double acc = 0.0;
    for (const auto& s : samples) acc += static_cast<double>(s.a_neg.size());
    return acc / static_cast<double>(samples.size());
}

double mean_a_neg(std::span<const std::size_t> counts) {
    if (counts.empty()) throw ValidationError("mean_a_neg of an empty sample list");
    double acc = 0.0;
    for (std::size_t c : counts) acc += static_cast<double>(c);
    return acc / static_cast<double>(counts.size());
}

namespace {

json thresholds_to_json(const OracleThresholds& t) {
    return json{{"gap_max", t.gap_max},
                {"jitter_max", t.jitter_max},
                {"centroid_max", t.centroid_max},
                {"dispersion_band", {t.dispersion_low, t.dispersion_high}}};
}

OracleThresholds thresholds_from_json(const json& j) {
    OracleThresholds t;
    t.gap_max = j.at("gap_max").get<double>();
    t.jitter_max = j.at("jitter_max").get<double>();
    t.centroid_max = j.at("centroid_max").get<double>();
    t.dispersion_low = j.at("dispersion_band").at(0).get<double>();
    t.dispersion_high = j.at("dispersion_band").at(1).get<double>();
    return t;
}

json knobs_to_json(const GeneratorKnobs& k) {
    return json{{"gap_fraction", k.gap_fraction},
                {"jitter_sigma", k.jitter_sigma},
                {"centroid_offset", k.centroid_offset},
                {"dispersion_ratio", k.dispersion_ratio},
                {"noise_sigma", k.noise_sigma}};
}

GeneratorKnobs knobs_from_json(const json& j) {
    GeneratorKnobs k;
    k.gap_fraction = j.at("gap_fraction").get<double>();
    k.jitter_sigma = j.at("jitter_sigma").get<double>();
    k.centroid_offset = j.at("centroid_offset").get<double>();
    k.dispersion_ratio = j.at("dispersion_ratio").get<double>();
    k.noise_sigma = j.at("noise_sigma").get<double>();
    return k;
}

DatasetRecord record_from_json(const json& j) {
    DatasetRecord r;
    Sample& s = r.annotated.sample;
    s.points = j.at("points").get<std::vector<double>>();
    if (s.points.empty() || s.points.size() % 2 != 0) throw ValidationError("points must hold 2K reals");
    s.family = parse_family(j.at("family").get<std::string>());
    r.annotated.y = s.family;
    r.annotated.a_pos = AttributeSet::of(Polarity::Pos, j.at("a_pos").get<std::vector<std::string>>());
    r.annotated.a_neg = AttributeSet::of(Polarity::Neg, j.at("a_neg").get<std::vector<std::string>>());
    r.knobs = knobs_from_json(j.at("knobs"));
    r.split = parse_split(j.at("split").get<std::string>());
    return r;
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write dataset: " + path);
    if (ds.header) {
        const DatasetHeader& h = *ds.header;
        json hj{{"schema", h.schema},
                {"tree_hash", h.tree_hash},
                {"thresholds", thresholds_to_json(h.thresholds)},
                {"K", h.point_count},
                {"seed", h.seed}};
        out << hj.dump() << '\n';
    }
    for (const auto& r : ds.records) {
        const AnnotatedSample& a = r.annotated;
        json rj{{"points", a.sample.points},
                {"family", std::string(to_string(a.y))},
                {"a_pos", a.a_pos.pair_ids()},
                {"a_neg", a.a_neg.pair_ids()},
                {"knobs", knobs_to_json(r.knobs)},
                {"split", std::string(to_string(r.split))}};
        out << rj.dump() << '\n';
    }
    if (!out) throw Error("write failed: " + path);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open dataset: " + path);
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            if (j.contains("schema")) {
                if (line_no != 1) throw ValidationError("header must be the first line");
                DatasetHeader h;
                h.schema = j.at("schema").get<int>();
                h.tree_hash = j.at("tree_hash").get<std::string>();
                h.thresholds = thresholds_from_json(j.at("thresholds"));
                h.point_count = j.at("K").get<std::size_t>();
                h.seed = j.at("seed").get<std::uint64_t>();
                ds.header = h;
            } else {
                ds.records.push_back(record_from_json(j));
            }
        } catch (const std::exception& e) {
            throw ValidationError(path + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
        }
    }
    return ds;
}

}  // namespace cpolab
