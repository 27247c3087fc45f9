#include "cpolab/sft.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "cpolab/error.hpp"

namespace cpolab {

void validate_policy(const DropoutPolicy& p) {
    for (double v : {p.p_y, p.p_pos, p.p_neg, p.p_null}) {
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("dropout probabilities must lie in [0, 1]");
    }
    const double min_retention = std::min({1.0 - p.p_y, 1.0 - p.p_pos, 1.0 - p.p_neg});
    if (p.p_null > min_retention) throw ValidationError("p_null exceeds the smallest block retention");
}

ConditionVector mask_condition(std::span<const double> cond, const ConditionVocabulary& vocab,
                               const DropoutPolicy& policy, Rng& rng) {
    if (cond.size() != vocab.width()) throw ValidationError("mask_condition: width mismatch");
    const double u_null = uniform01(rng);
    const double u_y = uniform01(rng);
    const double u_pos = uniform01(rng);
    const double u_neg = uniform01(rng);

    ConditionVector out(cond.begin(), cond.end());
    if (u_null < policy.p_null) {
        std::fill(out.begin(), out.end(), 0.0);
        return out;
    }
    auto zero = [&](std::size_t begin, std::size_t end) { std::fill(out.begin() + begin, out.begin() + end, 0.0); };
    if (u_y < policy.p_y) zero(0, vocab.family_slots());
    if (u_pos < policy.p_pos) zero(vocab.pos_begin(), vocab.neg_begin());
    if (u_neg < policy.p_neg) zero(vocab.neg_begin(), vocab.width());
    return out;
}

LossAndGrad sft_loss(const DenoiserParams& params, std::span<const SftItem> batch, const NoiseSchedule& sched,
                     Rng& rng) {
    if (batch.empty()) throw ValidationError("sft_loss: empty batch");
    const std::size_t dim = params.arch.data_dim;
    const double scale = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(dim));
    std::uniform_int_distribution<int> pick_t(1, sched.steps());

    LossAndGrad out{0.0, GradientBundle(params.arch)};
    Vec eps(dim), adjoint(dim);
    ForwardTape tape;
    for (const SftItem& item : batch) {
        const int t = pick_t(rng);
        fill_normal(rng, eps);
        const NoisyState st = q_sample(item.x0, t, eps, sched);
        const Vec pred = forward(params, st.x_t, t, item.cond, &tape);
        for (std::size_t i = 0; i < dim; ++i) {
            const double r = eps[i] - pred[i];
            out.loss += r * r * scale;
            adjoint[i] = -2.0 * r * scale;
        }
        accumulate_backward(params, tape, adjoint, out.grads);
    }
    return out;
}

ConditionVector full_condition(const ConditionVocabulary& vocab, const AnnotatedSample& s) {
    return encode_condition(vocab, s.y, s.a_pos, s.a_neg);
}

namespace {

struct Prepared {
    std::vector<Vec> x0;
    std::vector<ConditionVector> cond;
};

Prepared prepare(const std::vector<const DatasetRecord*>& records, const ConditionVocabulary& vocab) {
    Prepared p;
    for (const DatasetRecord* r : records) {
        p.x0.push_back(r->annotated.sample.points);
        p.cond.push_back(full_condition(vocab, r->annotated));
    }
    return p;
}

/// Loss on a split with a fixed noise stream; no dropout.
double evaluate_split(const DenoiserParams& params, const Prepared& data, const NoiseSchedule& sched,
                      std::uint64_t seed, std::size_t batch_size) {
    if (data.x0.empty()) return std::numeric_limits<double>::quiet_NaN();
    Rng rng{seed};
    double total = 0.0;
    std::vector<SftItem> batch;
    for (std::size_t start = 0; start < data.x0.size(); start += batch_size) {
        const std::size_t end = std::min(data.x0.size(), start + batch_size);
        batch.clear();
        for (std::size_t i = start; i < end; ++i) batch.push_back({data.x0[i], data.cond[i]});
        total += sft_loss(params, batch, sched, rng).loss * static_cast<double>(end - start);
    }
    return total / static_cast<double>(data.x0.size());
}

}  // namespace

SftResult train_sft(const DenoiserParams& initial, const Dataset& data, const ConditionVocabulary& vocab,
                    const SftConfig& config, const NoiseSchedule& sched,
                    const std::function<void(const SftLogRow&)>& on_epoch) {
    validate_policy(config.dropout);
    if (config.batch_size == 0) throw ValidationError("batch_size must be positive");
    if (config.epochs < 0) throw ValidationError("epochs must be >= 0");
    const Prepared train = prepare(data.split(Split::Train), vocab);
    const Prepared val = prepare(data.split(Split::Val), vocab);
    if (train.x0.empty()) throw ValidationError("dataset has no train split");

    const double nan = std::numeric_limits<double>::quiet_NaN();
    SftResult result{initial, {}};
    DenoiserParams& params = result.params;
    AdamState adam = AdamState::zeros_like(params);

    auto log = [&](int epoch, const char* split, double loss) {
        SftLogRow row{epoch, split, loss, nan, nan};
        result.log.push_back(row);
        if (on_epoch) on_epoch(row);
    };
    const std::uint64_t eval_seed = derive_seed(config.seed, "sft.eval");
    log(0, "train", evaluate_split(params, train, sched, eval_seed, config.batch_size));
    log(0, "val", evaluate_split(params, val, sched, eval_seed, config.batch_size));

    Rng rng{derive_seed(config.seed, "sft.train")};
    std::vector<std::size_t> order(train.x0.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<ConditionVector> masked(config.batch_size);
    std::vector<SftItem> batch;
    const std::size_t per_epoch = (order.size() + config.batch_size - 1) / config.batch_size;
    const double total_steps = static_cast<double>(per_epoch) * static_cast<double>(config.epochs);
    AdamConfig adam_cfg = config.adam;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                masked[i - start] = mask_condition(train.cond[order[i]], vocab, config.dropout, rng);
                batch.push_back({train.x0[order[i]], masked[i - start]});
            }
            LossAndGrad lg = sft_loss(params, batch, sched, rng);
            if (!std::isfinite(lg.loss)) {
                throw Error("SFT diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                            std::to_string(start));
            }
            if (config.cosine_decay) {
                const double progress = static_cast<double>(adam.step) / total_steps;
                adam_cfg.lr = config.adam.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
            }
            adam_step(params, lg.grads, adam, adam_cfg);
            epoch_loss += lg.loss * static_cast<double>(end - start);
        }
        log(epoch, "train", epoch_loss / static_cast<double>(order.size()));
        log(epoch, "val", evaluate_split(params, val, sched, eval_seed, config.batch_size));
    }
    return result;
}

void write_sft_log(const std::string& path, const std::vector<SftLogRow>& log) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write log: " + path);
    out.precision(17);
    out << "epoch,split,loss,iou_pos,iou_neg\n";
    for (const auto& r : log) {
        out << r.epoch << ',' << r.split << ',' << r.loss << ',';
        if (!std::isnan(r.iou_pos)) out << r.iou_pos;
        out << ',';
        if (!std::isnan(r.iou_neg)) out << r.iou_neg;
        out << '\n';
    }
}

}  // namespace cpolab
