#pragma once

// Stage 2 alignment: dynamic winner/loser noise targets built from the frozen
// expert, the CPO objective, its gradient-balanced variant CPO-S, the
// Diffusion-DPO baseline and the static pair builders it trains on.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpolab/dataset.hpp"
#include "cpolab/denoiser.hpp"
#include "cpolab/diffusion.hpp"
#include "cpolab/taxonomy.hpp"

namespace cpolab {

enum class LossVariant { Cpo, CpoS, Dpo, DpoScalar, DpoBinary };

std::string_view to_string(LossVariant v);
/// Accepts cpo, cpo-s, dpo, dpo-scalar, dpo-binary (case-insensitive, '_' or '-').
LossVariant parse_variant(std::string_view name);
bool uses_dynamic_targets(LossVariant v);

/// Below this ||e - z_l|| the surrogate target is undefined.
inline constexpr double kDegenerateFloor = 1e-8;

struct CpoConfig {
    double omega_w = 2.0;
    double omega_l = 2.0;
    double beta_pref = 0.1;
    /// Overrides beta_pref * T when set.
    std::optional<double> kappa;
    int steps = 600;
    std::size_t batch_size = 16;
    AdamConfig adam{1e-4, 0.9, 0.999, 1e-8};
    std::uint64_t seed = 0;
    LossVariant variant = LossVariant::CpoS;

    double effective_kappa(int total_steps) const;
};

/// Throws ValidationError for omega < 1, non-positive beta or kappa, negative
/// steps or a zero batch.
void validate_config(const CpoConfig& config, int total_steps);

struct NoiseTargets {
    Vec z_w;
    Vec z_l;
    int t = 1;
    Vec x_t;
};

struct LossParts {
    long step = 0;
    double win_part = 0.0;
    /// Loser bracket against z_l (logged for every variant).
    double lose_part = 0.0;
    double total = 0.0;
    /// Surrogate bracket of CPO-S; zero for the other variants.
    double stab_part = 0.0;
};

/// Objective value at the noise-prediction level together with dL/de.
struct EpsObjective {
    LossParts parts;
    Vec grad_e;
};

/// -log sigmoid(-kappa * d), evaluated without overflow.
double neg_log_sigmoid_neg(double kappa, double d);

/// win = ||z_w - e||^2 - ||z_w - r||^2, lose likewise with z_l,
/// total = -log sigmoid(-kappa (win - lose)).
EpsObjective cpo_objective(std::span<const double> e, std::span<const double> r, std::span<const double> z_w,
                           std::span<const double> z_l, double kappa);

/// e + (e - z_l) / ||e - z_l|| * ||e - z_w||. Throws
/// Error("degenerate loser direction") when ||e - z_l|| < kDegenerateFloor.
Vec stabilized_target(std::span<const double> e, std::span<const double> z_w, std::span<const double> z_l);

/// total = -log sigmoid(-kappa (win + stab)) with the surrogate target held
/// constant while differentiating.
EpsObjective cpo_s_objective(std::span<const double> e, std::span<const double> r, std::span<const double> z_w,
                             std::span<const double> z_l, double kappa);

/// Static-pair objective: winner residuals at (e_w, r_w) against eps_w,
/// loser residuals at (e_l, r_l) against eps_l. grad_e holds dL/de_w followed
/// by dL/de_l.
EpsObjective dpo_objective(std::span<const double> e_w, std::span<const double> r_w, std::span<const double> eps_w,
                           std::span<const double> e_l, std::span<const double> r_l, std::span<const double> eps_l,
                           double kappa);

/// Conditions passed to the frozen expert for one record.
struct ExpertConditions {
    ConditionVector c_pos;   // (y, A_pos)
    ConditionVector c_neg;   // (A_neg)
    ConditionVector c_all;   // (y, A_pos, A_neg)
    ConditionVector c_null;  // all zeros
    ConditionVector c_y;     // (y) for the trained model and the reference
};

ExpertConditions expert_conditions(const ConditionVocabulary& vocab, Family y, const AttributeSet& a_pos,
                                   const AttributeSet& a_neg);

/// (1 - omega_w) eps1(c_neg) + omega_w eps1(c_pos).
Vec winner_noise(const DenoiserParams& theta1, std::span<const double> x_t, int t, const ExpertConditions& c,
                 double omega_w);
/// (1 - omega_l) eps1(c_null) + omega_l eps1(c_all).
Vec loser_noise(const DenoiserParams& theta1, std::span<const double> x_t, int t, const ExpertConditions& c,
                double omega_l);

struct ParamObjective {
    LossParts parts;
    GradientBundle grads;
};

/// theta and theta_ref are evaluated at (targets.x_t, targets.t, c_y).
ParamObjective cpo_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, const NoiseTargets& targets,
                        std::span<const double> c_y, double kappa);
ParamObjective cpo_s_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, const NoiseTargets& targets,
                          std::span<const double> c_y, double kappa);

/// Diffusion-DPO on already-noised winner and loser states (same t).
ParamObjective dpo_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, const NoisyState& winner,
                        const NoisyState& loser, std::span<const double> c_y, double kappa);
/// Noises x0_w with eps_w and x0_l with eps_l at step t first.
ParamObjective dpo_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, std::span<const double> x0_w,
                        std::span<const double> x0_l, std::span<const double> c_y, int t,
                        std::span<const double> eps_w, std::span<const double> eps_l, const NoiseSchedule& sched,
                        double kappa);

/// Indices into Dataset::records.
struct PreferencePair {
    std::size_t winner = 0;
    std::size_t loser = 0;
    Family family = Family::Ring;

    bool operator==(const PreferencePair&) const = default;
};

/// Every ordered within-family pair (i < j by record index, oriented by
/// preference) whose winner has strictly fewer negative attributes. Only
/// records of the given split are used. Throws Error("no pairs") when empty.
std::vector<PreferencePair> build_pairs_binary(const Dataset& data, const AttributeTree& tree,
                                               Split split = Split::Train);

/// Per-root-dimension fraction of POS among the applicable pairs, averaged
/// over the root dimensions the family touches.
double scalar_score(const AttributeTree& tree, const AnnotatedSample& s);

/// Same enumeration as the binary builder, ordered by scalar_score.
std::vector<PreferencePair> build_pairs_scalar(const Dataset& data, const AttributeTree& tree,
                                               Split split = Split::Train);

struct CpoResult {
    DenoiserParams params;
    std::vector<LossParts> log;
    /// Train records left out of the dynamic variants because A_neg is empty.
    std::size_t skipped_empty_neg = 0;
    /// Batch items dropped by the surrogate-direction floor.
    std::size_t skipped_degenerate = 0;
};

/// Dynamic variants draw records with non-empty A_neg from the train split;
/// DPO variants draw from `pairs` (built with the binary builder when empty).
/// Throws Error on a non-finite loss.
CpoResult train_cpo(const DenoiserParams& theta_init, const DenoiserParams& theta1, const DenoiserParams& theta_ref,
                    const Dataset& data, const AttributeTree& tree, const CpoConfig& config,
                    const NoiseSchedule& sched, std::vector<PreferencePair> pairs = {},
                    const std::function<void(const LossParts&)>& on_step = {});

void write_loss_parts(const std::string& path, const std::vector<LossParts>& log);
/// Throws ValidationError naming the line on malformed rows.
std::vector<LossParts> read_loss_parts(const std::string& path);

}  // namespace cpolab
