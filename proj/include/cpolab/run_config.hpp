#pragma once

// Flat key=value run configuration with layered precedence
// (command line > environment > file > built-in defaults) and a resolved
// snapshot written next to every output.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cpolab {

enum class ConfigSource { Default, File, Env, Cli };

class RunConfig {
public:
    /// All known keys at their built-in defaults.
    RunConfig();

    static const std::vector<std::string>& known_keys();
    static bool is_known(std::string_view key);

    /// Throws ValidationError for unknown keys.
    void set(const std::string& key, const std::string& value, ConfigSource source = ConfigSource::Cli);

    /// Reads "key = value" lines; '#' starts a comment. Throws ValidationError
    /// naming the line for malformed entries or unknown keys, Error when the
    /// file cannot be opened.
    void load_file(const std::string& path);
    /// Applies PREFIX + upper-cased key with '.' and '-' mapped to '_'.
    void apply_env(std::string_view prefix = "CPOLAB_");
    static std::string env_name(std::string_view key, std::string_view prefix = "CPOLAB_");

    const std::string& get(const std::string& key) const;
    std::string get_string(const std::string& key) const { return get(key); }
    double get_double(const std::string& key) const;
    long long get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    ConfigSource source(const std::string& key) const;

    /// Sorted key = value lines.
    std::string dump() const;
    void write_snapshot(const std::string& path) const;

    bool operator==(const RunConfig& other) const { return values_ == other.values_; }

private:
    std::map<std::string, std::string, std::less<>> values_;
    std::map<std::string, ConfigSource, std::less<>> sources_;
};

/// Snapshot path for an output file: "<output>.resolved.cfg".
std::string snapshot_path(const std::string& output);

}  // namespace cpolab
