#pragma once

// Pipeline commands behind the `cpolab` executable. Each takes a resolved
// RunConfig, writes its outputs plus a snapshot of the config, and returns
// what it produced.

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpolab/dataset.hpp"
#include "cpolab/denoiser.hpp"
#include "cpolab/diffusion.hpp"
#include "cpolab/eval.hpp"
#include "cpolab/preference.hpp"
#include "cpolab/run_config.hpp"
#include "cpolab/selfcheck.hpp"
#include "cpolab/sft.hpp"
#include "cpolab/taxonomy.hpp"

namespace cpolab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitSelfcheck = 3;

// Typed views of a RunConfig.
AttributeTree tree_from(const RunConfig& cfg);
NoiseSchedule schedule_from(const RunConfig& cfg);
OracleThresholds thresholds_from(const RunConfig& cfg);
KnobMix knob_mix_from(const RunConfig& cfg);
Architecture architecture_from(const RunConfig& cfg, const ConditionVocabulary& vocab);
SftConfig sft_config_from(const RunConfig& cfg);
CpoConfig cpo_config_from(const RunConfig& cfg);
SamplingOptions sampling_from(const RunConfig& cfg);
std::vector<Family> prompts_from(const RunConfig& cfg);

/// Reads io.data and checks it was annotated under the configured tree.
Dataset load_dataset_for(const RunConfig& cfg, const AttributeTree& tree);

Dataset cmd_gen_data(const RunConfig& cfg, std::ostream& log);
/// Writes io.out (checkpoint) and io.log (CSV). The last val row carries
/// IoU over the validation split.
SftResult cmd_train_sft(const RunConfig& cfg, std::ostream& log);
/// Loads io.sft as the initial, expert and reference model.
CpoResult cmd_train_align(const RunConfig& cfg, std::ostream& log);
std::vector<GeneratedSample> cmd_sample(const RunConfig& cfg, std::ostream& log);
/// Model id defaults to the checkpoint file stem.
EvalReport cmd_eval(const RunConfig& cfg, const std::string& model_id, std::ostream& log);
nlohmann::json cmd_compare(const std::vector<std::string>& report_paths);
CurveSummary cmd_curves(const RunConfig& cfg, std::ostream& log);
SelfcheckReport cmd_selfcheck(const RunConfig& cfg, bool fast);

/// Parses argv-style arguments (without the program name), runs the
/// subcommand and returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cpolab
