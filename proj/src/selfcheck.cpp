#include "cpolab/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>

#include "cpolab/diffusion.hpp"
#include "cpolab/error.hpp"
#include "cpolab/preference.hpp"
#include "cpolab/sft.hpp"

namespace cpolab {

bool SelfcheckReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

nlohmann::json SelfcheckReport::to_json() const {
    nlohmann::json j;
    j["passed"] = passed();
    j["fast"] = fast;
    j["checks"] = nlohmann::json::array();
    for (const auto& c : checks) {
        j["checks"].push_back({{"name", c.name},
                               {"passed", c.passed},
                               {"measured", c.measured},
                               {"tolerance", c.tolerance},
                               {"detail", c.detail},
                               {"seconds", c.seconds}});
    }
    return j;
}

DenoiserParams random_params(const Architecture& arch, Rng& rng, double output_scale) {
    DenoiserParams p = init_params(rng(), arch);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (double& w : p.weight(kLayerCount - 1)) w = output_scale * u(rng);
    for (std::size_t l = 0; l < kLayerCount; ++l) {
        for (double& b : p.bias(l)) b = 0.05 * u(rng);
    }
    return p;
}

DenoiserParams perturbed(const DenoiserParams& p, Rng& rng, double scale) {
    DenoiserParams q = p;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (double& v : q.values) v += scale * u(rng);
    return q;
}

namespace {

const NoiseSchedule& test_schedule() {
    static const NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
    return s;
}

const Architecture& test_arch() {
    static const Architecture a{64, 16, 10, 128, 100, noise_skip(test_schedule())};
    return a;
}

Vec normal_vec(Rng& rng, std::size_t n, double scale = 1.0) {
    Vec v(n);
    fill_normal(rng, v);
    for (double& x : v) x *= scale;
    return v;
}

ConditionVector random_cond(Rng& rng, std::size_t width) {
    ConditionVector c(width);
    for (double& x : c) x = uniform01(rng) < 0.5 ? 0.0 : 1.0;
    return c;
}

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <class F>
CheckResult timed(const std::string& name, F&& body) {
    const auto start = std::chrono::steady_clock::now();
    CheckResult r = body();
    r.name = name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

}  // namespace

CheckResult check_schedule() {
    return timed("schedule_invariants", [] {
        const NoiseSchedule& s = test_schedule();
        CheckResult r;
        r.passed = s.alpha_bar(1) == 1.0 - s.beta(1);
        for (int t = 2; t <= s.steps(); ++t) {
            r.passed = r.passed && s.alpha_bar(t) < s.alpha_bar(t - 1) && s.snr(t) < s.snr(t - 1);
            r.passed = r.passed && s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0;
        }
        r.detail = "alpha_bar(T) = " + fmt(s.alpha_bar(s.steps()));
        return r;
    });
}

CheckResult check_roundtrip(std::uint64_t seed) {
    return timed("qsample_roundtrip", [seed] {
        Rng rng{derive_seed(seed, "check.roundtrip")};
        const NoiseSchedule& s = test_schedule();
        CheckResult r;
        r.tolerance = 1e-10;
        for (int trial = 0; trial < 100; ++trial) {
            const Vec x0 = normal_vec(rng, 64);
            const Vec eps = normal_vec(rng, 64);
            const int t = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(s.steps()));
            const NoisyState st = q_sample(x0, t, eps, s);
            const Vec back = predict_x0(st.x_t, eps, t, s);
            const Vec again = reconstruct_xt(back, eps, t, s);
            for (std::size_t i = 0; i < x0.size(); ++i) {
                r.measured = std::max({r.measured, std::abs(back[i] - x0[i]), std::abs(again[i] - st.x_t[i])});
            }
        }
        r.passed = r.measured < r.tolerance;
        r.detail = "max abs error " + fmt(r.measured);
        return r;
    });
}

CheckResult check_cfg(std::uint64_t seed) {
    return timed("cfg_identities", [seed] {
        Rng rng{derive_seed(seed, "check.cfg")};
        CheckResult r;
        r.tolerance = 1e-12;
        for (int trial = 0; trial < 100; ++trial) {
            const Vec a = normal_vec(rng, 16);
            const Vec b = normal_vec(rng, 16);
            const Vec w0 = cfg_combine(a, b, 0.0);
            const Vec w1 = cfg_combine(a, b, 1.0);
            const Vec w2 = cfg_combine(a, b, 2.0);
            const Vec w3 = cfg_combine(a, b, 3.0);
            for (std::size_t i = 0; i < a.size(); ++i) {
                r.measured = std::max({r.measured, std::abs(w0[i] - a[i]), std::abs(w1[i] - b[i]),
                                       std::abs((w3[i] - w2[i]) - (w2[i] - w1[i]))});
            }
        }
        r.passed = r.measured <= r.tolerance;
        r.detail = "max deviation " + fmt(r.measured);
        return r;
    });
}

CheckResult check_ln2_identity(int trials, std::uint64_t seed) {
    return timed("ln2_initialization", [trials, seed] {
        Rng rng{derive_seed(seed, "check.ln2")};
        const double ln2 = std::numbers::ln2;
        CheckResult r;
        r.tolerance = 1e-9;
        for (int trial = 0; trial < trials; ++trial) {
            const DenoiserParams theta = random_params(test_arch(), rng);
            const ConditionVector c_y = random_cond(rng, test_arch().cond_dim);
            NoiseTargets tg;
            tg.t = 1 + static_cast<int>(rng() % 100);
            tg.x_t = normal_vec(rng, 64);
            tg.z_w = normal_vec(rng, 64);
            tg.z_l = normal_vec(rng, 64);
            const double kappa = 10.0;
            const NoisyState w{normal_vec(rng, 64), tg.t, normal_vec(rng, 64)};
            const NoisyState l{normal_vec(rng, 64), tg.t, normal_vec(rng, 64)};
            for (double total : {cpo_loss(theta, theta, tg, c_y, kappa).parts.total,
                                 cpo_s_loss(theta, theta, tg, c_y, kappa).parts.total,
                                 dpo_loss(theta, theta, w, l, c_y, kappa).parts.total}) {
                r.measured = std::max(r.measured, std::abs(total - ln2));
            }
        }
        r.passed = r.measured <= r.tolerance;
        r.detail = std::to_string(trials) + " trials x {cpo, cpo-s, dpo}, max |L - ln 2| " + fmt(r.measured);
        return r;
    });
}

namespace {

struct Triple {
    Vec e, z_w, z_l;
};

Triple random_triple(Rng& rng, std::size_t dim) {
    while (true) {
        Triple t{normal_vec(rng, dim), normal_vec(rng, dim), normal_vec(rng, dim)};
        Vec diff(dim);
        for (std::size_t i = 0; i < dim; ++i) diff[i] = t.e[i] - t.z_l[i];
        if (norm(diff) >= 1e-6) return t;
    }
}

}  // namespace

CheckResult check_surrogate_norm(int trials, std::uint64_t seed) {
    return timed("surrogate_norm_identity", [trials, seed] {
        Rng rng{derive_seed(seed, "check.surrogate")};
        CheckResult r;
        r.tolerance = 1e-12;
        for (int trial = 0; trial < trials; ++trial) {
            const Triple t = random_triple(rng, 64);
            const Vec tgt = stabilized_target(t.e, t.z_w, t.z_l);
            Vec a(64), b(64);
            for (std::size_t i = 0; i < 64; ++i) {
                a[i] = t.e[i] - tgt[i];
                b[i] = t.e[i] - t.z_w[i];
            }
            r.measured = std::max(r.measured, std::abs(norm(a) - norm(b)));
        }
        r.passed = r.measured <= r.tolerance;
        r.detail = std::to_string(trials) + " triples, max | ||e - tgt|| - ||e - z_w|| | " + fmt(r.measured);
        return r;
    });
}

CheckResult check_gradient_balance(int trials, std::uint64_t seed) {
    return timed("gradient_balance", [trials, seed] {
        Rng rng{derive_seed(seed, "check.balance")};
        CheckResult r;
        r.tolerance = 1e-9;
        double worst_norm = 0.0, worst_cos = 0.0;
        for (int trial = 0; trial < trials; ++trial) {
            const Triple t = random_triple(rng, 64);
            const Vec r_ref = normal_vec(rng, 64);
            const double kappa = 0.5;
            const EpsObjective obj = cpo_s_objective(t.e, r_ref, t.z_w, t.z_l, kappa);
            const double d = obj.parts.win_part + obj.parts.stab_part;
            const double s = kappa / (1.0 + std::exp(-kappa * d));
            // Stab-bracket gradient: total gradient minus the winner term, divided by the link slope.
            Vec g(64), descent(64), away(64);
            for (std::size_t i = 0; i < 64; ++i) {
                g[i] = obj.grad_e[i] / s - 2.0 * (t.e[i] - t.z_w[i]);
                descent[i] = -g[i];
                away[i] = t.e[i] - t.z_l[i];
            }
            Vec win_dir(64);
            for (std::size_t i = 0; i < 64; ++i) win_dir[i] = t.e[i] - t.z_w[i];
            const double expected = 2.0 * norm(win_dir);
            worst_norm = std::max(worst_norm, std::abs(norm(g) - expected) / expected);
            const double cosine = dot(descent, away) / (norm(descent) * norm(away));
            worst_cos = std::max(worst_cos, std::abs(cosine - 1.0));
        }
        r.measured = std::max(worst_norm, worst_cos);
        r.passed = worst_norm <= r.tolerance && worst_cos <= r.tolerance;
        r.detail = std::to_string(trials) + " triples, norm rel err " + fmt(worst_norm) +
                   ", |cos(-grad, e - z_l) - 1| " + fmt(worst_cos);
        return r;
    });
}

namespace {

struct FdProblem {
    std::function<double(const DenoiserParams&)> loss;
    GradientBundle analytic;
};

FdProblem make_problem(const std::string& loss, const DenoiserParams& theta, Rng& rng) {
    const Architecture& a = theta.arch;
    const NoiseSchedule& s = test_schedule();
    const double kappa = 0.5;
    if (loss == "sft") {
        auto x0 = std::make_shared<std::vector<Vec>>();
        auto conds = std::make_shared<std::vector<ConditionVector>>();
        for (int i = 0; i < 3; ++i) {
            x0->push_back(normal_vec(rng, a.data_dim, 0.7));
            conds->push_back(random_cond(rng, a.cond_dim));
        }
        const std::uint64_t noise_seed = rng();
        auto eval = [x0, conds, noise_seed, &s](const DenoiserParams& p) {
            std::vector<SftItem> batch;
            for (std::size_t i = 0; i < x0->size(); ++i) batch.push_back({(*x0)[i], (*conds)[i]});
            Rng local{noise_seed};
            return sft_loss(p, batch, s, local);
        };
        return {[eval](const DenoiserParams& p) { return eval(p).loss; }, eval(theta).grads};
    }
    auto ref = std::make_shared<DenoiserParams>(perturbed(theta, rng, 0.02));
    auto c_y = std::make_shared<ConditionVector>(random_cond(rng, a.cond_dim));
    if (loss == "dpo") {
        const int t = 1 + static_cast<int>(rng() % 100);
        auto w = std::make_shared<NoisyState>(NoisyState{normal_vec(rng, a.data_dim), t, normal_vec(rng, a.data_dim)});
        auto l = std::make_shared<NoisyState>(NoisyState{normal_vec(rng, a.data_dim), t, normal_vec(rng, a.data_dim)});
        return {[=](const DenoiserParams& p) { return dpo_loss(p, *ref, *w, *l, *c_y, kappa).parts.total; },
                dpo_loss(theta, *ref, *w, *l, *c_y, kappa).grads};
    }
    auto tg = std::make_shared<NoiseTargets>();
    tg->t = 1 + static_cast<int>(rng() % 100);
    tg->x_t = normal_vec(rng, a.data_dim);
    const Vec e0 = forward(theta, tg->x_t, tg->t, *c_y);
    // Targets near the current prediction keep the link away from saturation.
    tg->z_w = e0;
    tg->z_l = e0;
    for (std::size_t i = 0; i < a.data_dim; ++i) {
        tg->z_w[i] += 0.1 * normal_vec(rng, 1)[0];
        tg->z_l[i] += 0.1 * normal_vec(rng, 1)[0];
    }
    if (loss == "cpo") {
        return {[=](const DenoiserParams& p) { return cpo_loss(p, *ref, *tg, *c_y, kappa).parts.total; },
                cpo_loss(theta, *ref, *tg, *c_y, kappa).grads};
    }
    if (loss == "cpo-s") {
        // Surrogate frozen at its value for the unperturbed parameters.
        auto tgt = std::make_shared<Vec>(stabilized_target(e0, tg->z_w, tg->z_l));
        auto frozen = [=](const DenoiserParams& p) {
            const Vec e = forward(p, tg->x_t, tg->t, *c_y);
            const Vec r = forward(*ref, tg->x_t, tg->t, *c_y);
            double win = 0.0, stab = 0.0;
            for (std::size_t i = 0; i < e.size(); ++i) {
                win += (tg->z_w[i] - e[i]) * (tg->z_w[i] - e[i]) - (tg->z_w[i] - r[i]) * (tg->z_w[i] - r[i]);
                stab += ((*tgt)[i] - e[i]) * ((*tgt)[i] - e[i]) - ((*tgt)[i] - r[i]) * ((*tgt)[i] - r[i]);
            }
            return neg_log_sigmoid_neg(kappa, win + stab);
        };
        return {frozen, cpo_s_loss(theta, *ref, *tg, *c_y, kappa).grads};
    }
    throw ValidationError("unknown loss for finite differences: " + loss);
}

}  // namespace

CheckResult check_finite_differences(const std::string& loss, int coordinates, std::uint64_t seed) {
    return timed("finite_differences_" + loss, [&loss, coordinates, seed] {
        Rng rng{derive_seed(seed, "check.fd." + loss)};
        const DenoiserParams theta = random_params(test_arch(), rng);
        const FdProblem prob = make_problem(loss, theta, rng);
        const double h = 1e-5;
        CheckResult r;
        r.tolerance = 1e-4;
        std::uniform_int_distribution<std::size_t> pick(0, theta.values.size() - 1);
        int compared = 0, attempts = 0;
        DenoiserParams probe = theta;
        while (compared < coordinates && attempts < 50 * coordinates) {
            ++attempts;
            const std::size_t k = pick(rng);
            probe.values[k] = theta.values[k] + h;
            const double up = prob.loss(probe);
            probe.values[k] = theta.values[k] - h;
            const double down = prob.loss(probe);
            probe.values[k] = theta.values[k];
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = prob.analytic.values[k];
            const double scale = std::max(std::abs(numeric), std::abs(analytic));
            if (scale < 1e-7) continue;
            r.measured = std::max(r.measured, std::abs(numeric - analytic) / scale);
            ++compared;
        }
        r.passed = compared >= coordinates && r.measured <= r.tolerance;
        r.detail = std::to_string(compared) + " coordinates, max rel err " + fmt(r.measured);
        return r;
    });
}

CheckResult check_dpo_reduction(int trials, std::uint64_t seed) {
    return timed("cpo_dpo_reduction", [trials, seed] {
        Rng rng{derive_seed(seed, "check.reduction")};
        CheckResult r;
        r.tolerance = 1e-12;
        for (int trial = 0; trial < trials; ++trial) {
            const DenoiserParams theta = random_params(test_arch(), rng);
            const DenoiserParams ref = perturbed(theta, rng, 0.02);
            const ConditionVector c_y = random_cond(rng, test_arch().cond_dim);
            const int t = 1 + static_cast<int>(rng() % 100);
            const Vec x_t = normal_vec(rng, 64);
            const Vec eps_w = normal_vec(rng, 64);
            const Vec eps_l = normal_vec(rng, 64);
            const double kappa = 10.0 * uniform01(rng);
            const NoiseTargets tg{eps_w, eps_l, t, x_t};
            const ParamObjective c = cpo_loss(theta, ref, tg, c_y, kappa);
            const ParamObjective d = dpo_loss(theta, ref, NoisyState{x_t, t, eps_w}, NoisyState{x_t, t, eps_l}, c_y, kappa);
            r.measured = std::max(r.measured, std::abs(c.parts.total - d.parts.total));
        }
        r.passed = r.measured <= r.tolerance;
        r.detail = std::to_string(trials) + " instances, max |L_cpo - L_dpo| " + fmt(r.measured);
        return r;
    });
}

SelfcheckReport run_selfcheck(bool fast, std::uint64_t seed) {
    SelfcheckReport rep;
    rep.fast = fast;
    const int trials = fast ? 100 : 1000;
    const int coords = fast ? 100 : 200;
    rep.checks.push_back(check_schedule());
    rep.checks.push_back(check_roundtrip(seed));
    rep.checks.push_back(check_cfg(seed));
    rep.checks.push_back(check_ln2_identity(100, seed));
    rep.checks.push_back(check_surrogate_norm(trials, seed));
    rep.checks.push_back(check_gradient_balance(trials, seed));
    for (const char* loss : {"sft", "cpo", "cpo-s", "dpo"}) rep.checks.push_back(check_finite_differences(loss, coords, seed));
    rep.checks.push_back(check_dpo_reduction(100, seed));
    return rep;
}

}  // namespace cpolab
