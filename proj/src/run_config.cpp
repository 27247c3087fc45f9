#include "cpolab/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <utility>

#include "cpolab/error.hpp"

namespace cpolab {

namespace {

const std::vector<std::pair<std::string, std::string>>& defaults() {
    static const std::vector<std::pair<std::string, std::string>> d = {
        {"seed", "7"},
        {"precision", "double"},
        {"tree", ""},
        {"io.data", ""},
        {"io.model", ""},
        {"io.sft", ""},
        {"io.out", ""},
        {"io.log", ""},
        {"data.n", "1000"},
        {"data.point_count", "32"},
        {"data.ring_probability", "0.5"},
        {"data.good_probability", "0.6"},
        {"data.bad_multiplier", "2"},
        {"data.noise_sigma", "0.01"},
        {"thresholds.gap_max", "0.1"},
        {"thresholds.jitter_max", "0.05"},
        {"thresholds.centroid_max", "0.15"},
        {"thresholds.dispersion_low", "0.8"},
        {"thresholds.dispersion_high", "1.25"},
        {"schedule.T", "100"},
        {"schedule.beta_min", "0.001"},
        {"schedule.beta_max", "0.2"},
        {"model.hidden", "128"},
        {"model.time_dim", "16"},
        {"model.skip", "true"},
        {"sft.epochs", "500"},
        {"sft.batch", "16"},
        {"sft.lr", "0.001"},
        {"sft.cosine_decay", "true"},
        {"sft.p_y", "0.1"},
        {"sft.p_pos", "0.15"},
        {"sft.p_neg", "0.15"},
        {"sft.p_null", "0.1"},
        {"align.variant", "cpo-s"},
        {"align.omega_w", "2"},
        {"align.omega_l", "2"},
        {"align.beta_pref", "0.1"},
        {"align.kappa", "0.15625"},
        {"align.steps", "600"},
        {"align.batch", "16"},
        {"align.lr", "0.0001"},
        {"sample.steps", "100"},
        {"sample.x0_clip", "1.5"},
        {"sample.n_per_prompt", "250"},
        {"sample.prompts", "RING,GRID"},
        {"eval.resamples", "2000"},
        {"eval.iou", "false"},
        {"curves.window", "25"},
    };
    return d;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

RunConfig::RunConfig() {
    for (const auto& [k, v] : defaults()) {
        values_[k] = v;
        sources_[k] = ConfigSource::Default;
    }
}

const std::vector<std::string>& RunConfig::known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& [key, value] : defaults()) k.push_back(key);
        std::sort(k.begin(), k.end());
        return k;
    }();
    return keys;
}

bool RunConfig::is_known(std::string_view key) {
    const auto& k = known_keys();
    return std::binary_search(k.begin(), k.end(), key);
}

void RunConfig::set(const std::string& key, const std::string& value, ConfigSource source) {
    if (!is_known(key)) throw ValidationError("unknown config key: " + key);
    if (key == "precision" && value != "double") {
        throw ValidationError("precision: only 'double' is supported");
    }
    values_[key] = value;
    sources_[key] = source;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        const std::string body = trim(std::string_view(line).substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        try {
            set(key, value, ConfigSource::File);
        } catch (const ValidationError& e) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

std::string RunConfig::env_name(std::string_view key, std::string_view prefix) {
    std::string name(prefix);
    for (char c : key) {
        name.push_back((c == '.' || c == '-') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return name;
}

void RunConfig::apply_env(std::string_view prefix) {
    for (const std::string& key : known_keys()) {
        if (const char* v = std::getenv(env_name(key, prefix).c_str())) set(key, v, ConfigSource::Env);
    }
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError("unknown config key: " + key);
    return it->second;
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& v = get(key);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ValidationError(key + ": not a number: '" + v + "'");
    return out;
}

long long RunConfig::get_int(const std::string& key) const {
    const std::string& v = get(key);
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ValidationError(key + ": not an integer: '" + v + "'");
    return out;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    const std::string& v = get(key);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ValidationError(key + ": not an unsigned integer: '" + v + "'");
    }
    return out;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError(key + ": not a boolean: '" + v + "'");
}

ConfigSource RunConfig::source(const std::string& key) const {
    const auto it = sources_.find(key);
    if (it == sources_.end()) throw ValidationError("unknown config key: " + key);
    return it->second;
}

std::string RunConfig::dump() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
    return out.str();
}

void RunConfig::write_snapshot(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write config snapshot: " + path);
    out << dump();
}

std::string snapshot_path(const std::string& output) {
    return output + ".resolved.cfg";
}

}  // namespace cpolab
