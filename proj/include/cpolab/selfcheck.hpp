#pragma once

// Property and gradient self-checks run by `cpolab selfcheck`.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpolab/denoiser.hpp"
#include "cpolab/rng.hpp"

namespace cpolab {

struct CheckResult {
    std::string name;
    bool passed = false;
    /// Worst observed error for the check's metric.
    double measured = 0.0;
    double tolerance = 0.0;
    std::string detail;
    double seconds = 0.0;
};

struct SelfcheckReport {
    bool fast = false;
    std::vector<CheckResult> checks;

    bool passed() const;
    nlohmann::json to_json() const;
};

/// Random weights in every layer (including the output layer) so gradients
/// are generic.
DenoiserParams random_params(const Architecture& arch, Rng& rng, double output_scale = 0.1);

/// Copy of p with every entry shifted by scale * U(-1, 1).
DenoiserParams perturbed(const DenoiserParams& p, Rng& rng, double scale);

CheckResult check_schedule();
CheckResult check_roundtrip(std::uint64_t seed);
CheckResult check_cfg(std::uint64_t seed);
CheckResult check_ln2_identity(int trials, std::uint64_t seed);
CheckResult check_surrogate_norm(int trials, std::uint64_t seed);
CheckResult check_gradient_balance(int trials, std::uint64_t seed);
/// loss is one of "sft", "cpo", "cpo-s", "dpo".
CheckResult check_finite_differences(const std::string& loss, int coordinates, std::uint64_t seed);
CheckResult check_dpo_reduction(int trials, std::uint64_t seed);

/// fast trims the trial and coordinate counts.
SelfcheckReport run_selfcheck(bool fast, std::uint64_t seed);

}  // namespace cpolab
