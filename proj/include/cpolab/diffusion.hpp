#pragma once

// Noise schedule, closed-form forward noising, x0 reconstruction, guidance
// combination and the deterministic (eta = 0) DDIM sampler.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace cpolab {

using Vec = std::vector<double>;

/// Per-step quantities for t = 1..T (1-based accessors).
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    NoiseSchedule(std::vector<double> betas);

    int steps() const { return static_cast<int>(beta_.size()); }
    double beta(int t) const { return beta_.at(index(t)); }
    double alpha(int t) const { return 1.0 - beta(t); }
    /// alpha_bar(0) is 1 by convention (the clean endpoint of the sampler).
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(index(t)); }
    double sigma(int t) const;
    double snr(int t) const;

private:
    std::size_t index(int t) const;

    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

/// Linear betas from beta_min to beta_max. Throws ValidationError unless
/// T >= 2 and 0 < beta_min <= beta_max < 1.
NoiseSchedule make_schedule(int steps, double beta_min, double beta_max);

struct NoisyState {
    Vec x_t;
    int t = 1;
    Vec eps;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
NoisyState q_sample(std::span<const double> x0, int t, std::span<const double> eps, const NoiseSchedule& sched);

/// x0_hat = (x_t - sqrt(1 - alpha_bar_t) z) / sqrt(alpha_bar_t).
Vec predict_x0(std::span<const double> x_t, std::span<const double> z, int t, const NoiseSchedule& sched);

/// Inverse of predict_x0 for the same z.
Vec reconstruct_xt(std::span<const double> x0_hat, std::span<const double> z, int t, const NoiseSchedule& sched);

/// (1 - omega) eps_base + omega eps_cond.
Vec cfg_combine(std::span<const double> eps_base, std::span<const double> eps_cond, double omega);

/// Noise prediction for (x_t, t) with the conditioning already bound.
using NoisePredictor = std::function<Vec(std::span<const double> x_t, int t)>;

/// Timesteps visited by a sampler using `steps` of the schedule's T
/// (T must be a multiple of steps): T, T - stride, ..., stride.
std::vector<int> sampler_timesteps(const NoiseSchedule& sched, int steps);

/// Deterministic DDIM: x_T ~ N(0, I) from the seed, then
/// x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) z. Returns x_0.
/// With x0_clip > 0, x0_hat is clamped to [-x0_clip, x0_clip] and z is
/// re-derived from the clamped value before the update.
Vec ddim_sample(const NoisePredictor& model, const NoiseSchedule& sched, int steps, std::size_t dim,
                std::uint64_t seed, double x0_clip = 0.0);

}  // namespace cpolab
