#pragma once

// Stage 1: attribute-conditioned supervised fine-tuning with per-block
// condition dropout, producing the expert model.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cpolab/dataset.hpp"
#include "cpolab/denoiser.hpp"
#include "cpolab/diffusion.hpp"
#include "cpolab/rng.hpp"
#include "cpolab/taxonomy.hpp"

namespace cpolab {

/// Probabilities of zeroing the family block, the A_pos block, the A_neg
/// block, and (overriding) the whole condition.
struct DropoutPolicy {
    double p_y = 0.10;
    double p_pos = 0.15;
    double p_neg = 0.15;
    double p_null = 0.10;
};

void validate_policy(const DropoutPolicy& policy);

/// Consumes exactly four uniforms from rng per call.
ConditionVector mask_condition(std::span<const double> cond, const ConditionVocabulary& vocab,
                               const DropoutPolicy& policy, Rng& rng);

struct SftConfig {
    int epochs = 500;
    std::size_t batch_size = 16;
    AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
    /// Anneal the learning rate to zero along a half cosine over all steps.
    bool cosine_decay = true;
    DropoutPolicy dropout;
    std::uint64_t seed = 0;
};

struct SftItem {
    std::span<const double> x0;
    std::span<const double> cond;
};

struct LossAndGrad {
    double loss = 0.0;
    GradientBundle grads;
};

/// Mean over batch and dimensions of ||eps - eps_theta(x_t, t, c)||^2 with
/// t ~ U{1..T} and eps ~ N(0, I) drawn from rng, plus its exact gradient.
LossAndGrad sft_loss(const DenoiserParams& params, std::span<const SftItem> batch, const NoiseSchedule& sched,
                     Rng& rng);

struct SftLogRow {
    int epoch = 0;
    std::string split;
    double loss = 0.0;
    /// NaN when not measured for this row.
    double iou_pos = 0.0;
    double iou_neg = 0.0;
};

struct SftResult {
    DenoiserParams params;
    std::vector<SftLogRow> log;
};

/// Epoch 0 rows record the loss of the initial parameters. Throws Error on a
/// non-finite loss.
SftResult train_sft(const DenoiserParams& initial, const Dataset& data, const ConditionVocabulary& vocab,
                    const SftConfig& config, const NoiseSchedule& sched,
                    const std::function<void(const SftLogRow&)>& on_epoch = {});

/// Full condition (y, A_pos, A_neg) of a record.
ConditionVector full_condition(const ConditionVocabulary& vocab, const AnnotatedSample& s);

void write_sft_log(const std::string& path, const std::vector<SftLogRow>& log);

}  // namespace cpolab
