#include "cpolab/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpolab/error.hpp"
#include "cpolab/rng.hpp"

namespace cpolab {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    alpha_bar_.reserve(beta_.size());
    double acc = 1.0;
    for (double b : beta_) {
        if (!(b > 0.0 && b < 1.0)) throw ValidationError("beta must lie in (0, 1)");
        acc *= 1.0 - b;
        alpha_bar_.push_back(acc);
    }
}

std::size_t NoiseSchedule::index(int t) const {
    if (t < 1 || t > steps()) throw ValidationError("timestep " + std::to_string(t) + " outside 1..T");
    return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::sigma(int t) const {
    return std::sqrt(1.0 - alpha_bar(t));
}

double NoiseSchedule::snr(int t) const {
    const double ab = alpha_bar(t);
    return ab / (1.0 - ab);
}

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
    if (steps < 2) throw ValidationError("schedule needs T >= 2");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
        throw ValidationError("schedule needs 0 < beta_min <= beta_max < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_min + (beta_max - beta_min) * u;
    }
    return NoiseSchedule(std::move(betas));
}

namespace {

void require_same(std::size_t a, std::size_t b) {
    if (a != b) throw ValidationError("dimension mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
}

}  // namespace

NoisyState q_sample(std::span<const double> x0, int t, std::span<const double> eps, const NoiseSchedule& sched) {
    require_same(x0.size(), eps.size());
    const double a = std::sqrt(sched.alpha_bar(t));
    const double s = sched.sigma(t);
    NoisyState st;
    st.t = t;
    st.eps.assign(eps.begin(), eps.end());
    st.x_t.resize(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) st.x_t[i] = a * x0[i] + s * eps[i];
    return st;
}

Vec predict_x0(std::span<const double> x_t, std::span<const double> z, int t, const NoiseSchedule& sched) {
    require_same(x_t.size(), z.size());
    const double a = std::sqrt(sched.alpha_bar(t));
    const double s = sched.sigma(t);
    Vec out(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = (x_t[i] - s * z[i]) / a;
    return out;
}

Vec reconstruct_xt(std::span<const double> x0_hat, std::span<const double> z, int t, const NoiseSchedule& sched) {
    require_same(x0_hat.size(), z.size());
    const double a = std::sqrt(sched.alpha_bar(t));
    const double s = sched.sigma(t);
    Vec out(x0_hat.size());
    for (std::size_t i = 0; i < x0_hat.size(); ++i) out[i] = a * x0_hat[i] + s * z[i];
    return out;
}

Vec cfg_combine(std::span<const double> eps_base, std::span<const double> eps_cond, double omega) {
    require_same(eps_base.size(), eps_cond.size());
    Vec out(eps_base.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - omega) * eps_base[i] + omega * eps_cond[i];
    return out;
}

std::vector<int> sampler_timesteps(const NoiseSchedule& sched, int steps) {
    const int total = sched.steps();
    if (steps < 1 || steps > total || total % steps != 0) {
        throw ValidationError("sampler steps must divide T=" + std::to_string(total));
    }
    const int stride = total / steps;
    std::vector<int> ts;
    for (int t = total; t >= stride; t -= stride) ts.push_back(t);
    return ts;
}

Vec ddim_sample(const NoisePredictor& model, const NoiseSchedule& sched, int steps, std::size_t dim,
                std::uint64_t seed, double x0_clip) {
    if (x0_clip < 0.0) throw ValidationError("x0_clip must be >= 0");
    const std::vector<int> ts = sampler_timesteps(sched, steps);
    const int stride = sched.steps() / steps;
    Rng rng{derive_seed(seed, "ddim.init")};
    Vec x(dim);
    fill_normal(rng, x);
    for (int t : ts) {
        Vec z = model(x, t);
        Vec x0 = predict_x0(x, z, t, sched);
        if (x0_clip > 0.0) {
            const double a_t = std::sqrt(sched.alpha_bar(t));
            const double s_t = sched.sigma(t);
            for (std::size_t i = 0; i < dim; ++i) {
                x0[i] = std::clamp(x0[i], -x0_clip, x0_clip);
                z[i] = (x[i] - a_t * x0[i]) / s_t;
            }
        }
        const int prev = t - stride;
        const double a = std::sqrt(sched.alpha_bar(prev));
        const double s = std::sqrt(1.0 - sched.alpha_bar(prev));
        for (std::size_t i = 0; i < dim; ++i) x[i] = a * x0[i] + s * z[i];
    }
    return x;
}

}  // namespace cpolab
