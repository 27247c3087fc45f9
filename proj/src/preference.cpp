#include "cpolab/preference.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "cpolab/error.hpp"
#include "cpolab/rng.hpp"
#include "cpolab/sft.hpp"

namespace cpolab {

std::string_view to_string(LossVariant v) {
    switch (v) {
        case LossVariant::Cpo: return "cpo";
        case LossVariant::CpoS: return "cpo-s";
        case LossVariant::Dpo: return "dpo";
        case LossVariant::DpoScalar: return "dpo-scalar";
        case LossVariant::DpoBinary: return "dpo-binary";
    }
    return "?";
}

LossVariant parse_variant(std::string_view name) {
    std::string n;
    for (char ch : name) n.push_back(ch == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    for (LossVariant v : {LossVariant::Cpo, LossVariant::CpoS, LossVariant::Dpo, LossVariant::DpoScalar,
                          LossVariant::DpoBinary}) {
        if (n == to_string(v)) return v;
    }
    throw ValidationError("unknown loss variant: " + std::string(name));
}

bool uses_dynamic_targets(LossVariant v) {
    return v == LossVariant::Cpo || v == LossVariant::CpoS;
}

double CpoConfig::effective_kappa(int total_steps) const {
    return kappa ? *kappa : beta_pref * static_cast<double>(total_steps);
}

void validate_config(const CpoConfig& c, int total_steps) {
    if (!(c.omega_w >= 1.0) || !(c.omega_l >= 1.0)) throw ValidationError("omega_w and omega_l must be >= 1");
    if (!(c.beta_pref > 0.0) || !std::isfinite(c.beta_pref)) throw ValidationError("beta_pref must be positive");
    const double k = c.effective_kappa(total_steps);
    if (!(k > 0.0) || !std::isfinite(k)) throw ValidationError("kappa must be finite and positive");
    if (c.steps < 0) throw ValidationError("steps must be >= 0");
    if (c.batch_size == 0) throw ValidationError("batch_size must be positive");
    if (!(c.adam.lr > 0.0)) throw ValidationError("lr must be positive");
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void require_dims(std::initializer_list<std::size_t> sizes) {
    const std::size_t first = *sizes.begin();
    for (std::size_t s : sizes) {
        if (s != first) throw ValidationError("preference objective: dimension mismatch");
    }
}

}  // namespace

double neg_log_sigmoid_neg(double kappa, double d) {
    const double x = kappa * d;
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

EpsObjective cpo_objective(std::span<const double> e, std::span<const double> r, std::span<const double> z_w,
                           std::span<const double> z_l, double kappa) {
    require_dims({e.size(), r.size(), z_w.size(), z_l.size()});
    EpsObjective out;
    out.parts.win_part = sq_dist(z_w, e) - sq_dist(z_w, r);
    out.parts.lose_part = sq_dist(z_l, e) - sq_dist(z_l, r);
    const double d = out.parts.win_part - out.parts.lose_part;
    out.parts.total = neg_log_sigmoid_neg(kappa, d);
    const double s = kappa * logistic(kappa * d);
    out.grad_e.resize(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) out.grad_e[i] = s * (2.0 * (e[i] - z_w[i]) - 2.0 * (e[i] - z_l[i]));
    return out;
}

Vec stabilized_target(std::span<const double> e, std::span<const double> z_w, std::span<const double> z_l) {
    require_dims({e.size(), z_w.size(), z_l.size()});
    const double away = std::sqrt(sq_dist(e, z_l));
    if (!(away >= kDegenerateFloor)) throw Error("degenerate loser direction");
    const double scale = std::sqrt(sq_dist(e, z_w)) / away;
    Vec tgt(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) tgt[i] = e[i] + (e[i] - z_l[i]) * scale;
    return tgt;
}

EpsObjective cpo_s_objective(std::span<const double> e, std::span<const double> r, std::span<const double> z_w,
                             std::span<const double> z_l, double kappa) {
    require_dims({e.size(), r.size(), z_w.size(), z_l.size()});
    const Vec tgt = stabilized_target(e, z_w, z_l);
    EpsObjective out;
    out.parts.win_part = sq_dist(z_w, e) - sq_dist(z_w, r);
    out.parts.lose_part = sq_dist(z_l, e) - sq_dist(z_l, r);
    out.parts.stab_part = sq_dist(tgt, e) - sq_dist(tgt, r);
    const double d = out.parts.win_part + out.parts.stab_part;
    out.parts.total = neg_log_sigmoid_neg(kappa, d);
    const double s = kappa * logistic(kappa * d);
    out.grad_e.resize(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) out.grad_e[i] = s * (2.0 * (e[i] - z_w[i]) + 2.0 * (e[i] - tgt[i]));
    return out;
}

EpsObjective dpo_objective(std::span<const double> e_w, std::span<const double> r_w, std::span<const double> eps_w,
                           std::span<const double> e_l, std::span<const double> r_l, std::span<const double> eps_l,
                           double kappa) {
    require_dims({e_w.size(), r_w.size(), eps_w.size(), e_l.size(), r_l.size(), eps_l.size()});
    EpsObjective out;
    out.parts.win_part = sq_dist(eps_w, e_w) - sq_dist(eps_w, r_w);
    out.parts.lose_part = sq_dist(eps_l, e_l) - sq_dist(eps_l, r_l);
    const double d = out.parts.win_part - out.parts.lose_part;
    out.parts.total = neg_log_sigmoid_neg(kappa, d);
    const double s = kappa * logistic(kappa * d);
    const std::size_t n = e_w.size();
    out.grad_e.resize(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        out.grad_e[i] = s * 2.0 * (e_w[i] - eps_w[i]);
        out.grad_e[n + i] = -s * 2.0 * (e_l[i] - eps_l[i]);
    }
    return out;
}

ExpertConditions expert_conditions(const ConditionVocabulary& vocab, Family y, const AttributeSet& a_pos,
                                   const AttributeSet& a_neg) {
    ExpertConditions c;
    c.c_pos = encode_condition(vocab, y, a_pos, {});
    c.c_neg = encode_condition(vocab, std::nullopt, {}, a_neg);
    c.c_all = encode_condition(vocab, y, a_pos, a_neg);
    c.c_null = encode_condition(vocab, std::nullopt, {}, {});
    c.c_y = encode_condition(vocab, y, {}, {});
    return c;
}

Vec winner_noise(const DenoiserParams& theta1, std::span<const double> x_t, int t, const ExpertConditions& c,
                 double omega_w) {
    return cfg_combine(forward(theta1, x_t, t, c.c_neg), forward(theta1, x_t, t, c.c_pos), omega_w);
}

Vec loser_noise(const DenoiserParams& theta1, std::span<const double> x_t, int t, const ExpertConditions& c,
                double omega_l) {
    return cfg_combine(forward(theta1, x_t, t, c.c_null), forward(theta1, x_t, t, c.c_all), omega_l);
}

namespace {

ParamObjective dynamic_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, const NoiseTargets& tg,
                            std::span<const double> c_y, double kappa, bool stabilized) {
    ForwardTape tape;
    const Vec e = forward(theta, tg.x_t, tg.t, c_y, &tape);
    const Vec r = forward(theta_ref, tg.x_t, tg.t, c_y);
    EpsObjective obj = stabilized ? cpo_s_objective(e, r, tg.z_w, tg.z_l, kappa)
                                  : cpo_objective(e, r, tg.z_w, tg.z_l, kappa);
    return {obj.parts, backward(theta, tape, obj.grad_e)};
}

}  // namespace

ParamObjective cpo_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, const NoiseTargets& targets,
                        std::span<const double> c_y, double kappa) {
    return dynamic_loss(theta, theta_ref, targets, c_y, kappa, false);
}

ParamObjective cpo_s_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, const NoiseTargets& targets,
                          std::span<const double> c_y, double kappa) {
    return dynamic_loss(theta, theta_ref, targets, c_y, kappa, true);
}

ParamObjective dpo_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, const NoisyState& winner,
                        const NoisyState& loser, std::span<const double> c_y, double kappa) {
    if (winner.t != loser.t) throw ValidationError("dpo_loss: winner and loser must share t");
    ForwardTape tape_w, tape_l;
    const Vec e_w = forward(theta, winner.x_t, winner.t, c_y, &tape_w);
    const Vec r_w = forward(theta_ref, winner.x_t, winner.t, c_y);
    const Vec e_l = forward(theta, loser.x_t, loser.t, c_y, &tape_l);
    const Vec r_l = forward(theta_ref, loser.x_t, loser.t, c_y);
    const EpsObjective obj = dpo_objective(e_w, r_w, winner.eps, e_l, r_l, loser.eps, kappa);
    const std::size_t n = e_w.size();
    const std::span<const double> g(obj.grad_e);
    ParamObjective out{obj.parts, GradientBundle(theta.arch)};
    accumulate_backward(theta, tape_w, g.subspan(0, n), out.grads);
    accumulate_backward(theta, tape_l, g.subspan(n, n), out.grads);
    return out;
}

ParamObjective dpo_loss(const DenoiserParams& theta, const DenoiserParams& theta_ref, std::span<const double> x0_w,
                        std::span<const double> x0_l, std::span<const double> c_y, int t,
                        std::span<const double> eps_w, std::span<const double> eps_l, const NoiseSchedule& sched,
                        double kappa) {
    return dpo_loss(theta, theta_ref, q_sample(x0_w, t, eps_w, sched), q_sample(x0_l, t, eps_l, sched), c_y, kappa);
}

double scalar_score(const AttributeTree& tree, const AnnotatedSample& s) {
    std::map<std::string, std::pair<int, int>> per_root;  // root -> (pos, applicable)
    for (const std::string& id : applicable_pairs(tree, s.y)) {
        auto& [pos, total] = per_root[tree.root_of(id)];
        total += 1;
        if (s.a_pos.contains_pair(id)) pos += 1;
    }
    if (per_root.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [root, counts] : per_root) sum += static_cast<double>(counts.first) / counts.second;
    return sum / static_cast<double>(per_root.size());
}

namespace {

template <class Better>
std::vector<PreferencePair> enumerate_pairs(const Dataset& data, Split split, Better better) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        if (data.records[i].split == split) idx.push_back(i);
    }
    std::vector<PreferencePair> out;
    for (std::size_t a = 0; a < idx.size(); ++a) {
        const AnnotatedSample& sa = data.records[idx[a]].annotated;
        for (std::size_t b = a + 1; b < idx.size(); ++b) {
            const AnnotatedSample& sb = data.records[idx[b]].annotated;
            if (sa.y != sb.y) continue;
            if (better(sa, sb)) {
                out.push_back({idx[a], idx[b], sa.y});
            } else if (better(sb, sa)) {
                out.push_back({idx[b], idx[a], sa.y});
            }
        }
    }
    if (out.empty()) throw Error("no pairs");
    return out;
}

}  // namespace

std::vector<PreferencePair> build_pairs_binary(const Dataset& data, const AttributeTree&, Split split) {
    return enumerate_pairs(data, split, [](const AnnotatedSample& w, const AnnotatedSample& l) {
        return w.a_neg.size() < l.a_neg.size();
    });
}

std::vector<PreferencePair> build_pairs_scalar(const Dataset& data, const AttributeTree& tree, Split split) {
    std::map<const AnnotatedSample*, double> score;
    for (const auto& r : data.records) {
        if (r.split == split) score[&r.annotated] = scalar_score(tree, r.annotated);
    }
    return enumerate_pairs(data, split, [&score](const AnnotatedSample& w, const AnnotatedSample& l) {
        return score.at(&w) > score.at(&l);
    });
}

CpoResult train_cpo(const DenoiserParams& theta_init, const DenoiserParams& theta1, const DenoiserParams& theta_ref,
                    const Dataset& data, const AttributeTree& tree, const CpoConfig& config,
                    const NoiseSchedule& sched, std::vector<PreferencePair> pairs,
                    const std::function<void(const LossParts&)>& on_step) {
    validate_config(config, sched.steps());
    const ConditionVocabulary vocab(tree);
    for (const DenoiserParams* p : {&theta_init, &theta1, &theta_ref}) {
        if (p->arch.cond_dim != vocab.width()) throw ValidationError("checkpoint condition width does not match tree");
        if (p->arch.total_steps != sched.steps()) throw ValidationError("checkpoint T does not match schedule");
    }
    const double kappa = config.effective_kappa(sched.steps());
    const bool dynamic = uses_dynamic_targets(config.variant);
    const std::size_t dim = theta_init.arch.data_dim;

    CpoResult result{theta_init, {}, 0, 0};
    if (config.steps == 0) return result;

    // Dynamic variants: pool of train records with a non-empty negative set.
    std::vector<std::size_t> pool;
    std::vector<ExpertConditions> conds;
    if (dynamic) {
        for (std::size_t i = 0; i < data.records.size(); ++i) {
            const DatasetRecord& r = data.records[i];
            if (r.split != Split::Train) continue;
            if (r.annotated.a_neg.empty()) {
                ++result.skipped_empty_neg;
                continue;
            }
            pool.push_back(i);
            conds.push_back(expert_conditions(vocab, r.annotated.y, r.annotated.a_pos, r.annotated.a_neg));
        }
        if (pool.empty()) throw Error("no train records with a non-empty negative set");
    } else if (pairs.empty()) {
        pairs = config.variant == LossVariant::DpoScalar ? build_pairs_scalar(data, tree)
                                                         : build_pairs_binary(data, tree);
    }

    DenoiserParams& theta = result.params;
    AdamState adam = AdamState::zeros_like(theta);
    Rng rng{derive_seed(config.seed, "align.train")};
    const std::size_t choices = dynamic ? pool.size() : pairs.size();
    std::uniform_int_distribution<std::size_t> pick(0, choices - 1);
    std::uniform_int_distribution<int> pick_t(1, sched.steps());
    Vec eps_a(dim), eps_b(dim);

    for (long step = 1; step <= config.steps; ++step) {
        GradientBundle grads(theta.arch);
        LossParts mean{step, 0.0, 0.0, 0.0, 0.0};
        std::size_t used = 0;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const std::size_t k = pick(rng);
            const int t = pick_t(rng);
            fill_normal(rng, eps_a);
            ParamObjective obj;
            if (dynamic) {
                const DatasetRecord& rec = data.records[pool[k]];
                NoiseTargets tg;
                tg.t = t;
                tg.x_t = q_sample(rec.annotated.sample.points, t, eps_a, sched).x_t;
                tg.z_w = winner_noise(theta1, tg.x_t, t, conds[k], config.omega_w);
                tg.z_l = loser_noise(theta1, tg.x_t, t, conds[k], config.omega_l);
                try {
                    obj = config.variant == LossVariant::CpoS ? cpo_s_loss(theta, theta_ref, tg, conds[k].c_y, kappa)
                                                              : cpo_loss(theta, theta_ref, tg, conds[k].c_y, kappa);
                } catch (const Error& e) {
                    if (std::string_view(e.what()) != "degenerate loser direction") throw;
                    ++result.skipped_degenerate;
                    continue;
                }
            } else {
                fill_normal(rng, eps_b);
                const PreferencePair& p = pairs[k];
                const ConditionVector c_y = encode_condition(vocab, p.family, {}, {});
                obj = dpo_loss(theta, theta_ref, data.records[p.winner].annotated.sample.points,
                               data.records[p.loser].annotated.sample.points, c_y, t, eps_a, eps_b, sched, kappa);
            }
            grads += obj.grads;
            mean.win_part += obj.parts.win_part;
            mean.lose_part += obj.parts.lose_part;
            mean.stab_part += obj.parts.stab_part;
            mean.total += obj.parts.total;
            ++used;
        }
        if (used == 0) continue;
        const double inv = 1.0 / static_cast<double>(used);
        grads *= inv;
        mean.win_part *= inv;
        mean.lose_part *= inv;
        mean.stab_part *= inv;
        mean.total *= inv;
        if (!std::isfinite(mean.total)) {
            throw Error("alignment diverged: non-finite loss at step " + std::to_string(step));
        }
        adam_step(theta, grads, adam, config.adam);
        result.log.push_back(mean);
        if (on_step) on_step(mean);
    }
    return result;
}

void write_loss_parts(const std::string& path, const std::vector<LossParts>& log) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write log: " + path);
    out.precision(17);
    out << "step,win_part,lose_part,total,stab_part\n";
    for (const auto& p : log) {
        out << p.step << ',' << p.win_part << ',' << p.lose_part << ',' << p.total << ',' << p.stab_part << '\n';
    }
}

std::vector<LossParts> read_loss_parts(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open log: " + path);
    std::string line;
    std::vector<LossParts> out;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 && line.rfind("step", 0) == 0) continue;
        if (line.empty()) continue;
        std::istringstream row(line);
        LossParts p;
        char c1 = 0, c2 = 0, c3 = 0;
        row >> p.step >> c1 >> p.win_part >> c2 >> p.lose_part >> c3 >> p.total;
        if (!row || c1 != ',' || c2 != ',' || c3 != ',') {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed loss row");
        }
        char c4 = 0;
        if (row >> c4) {
            if (c4 != ',' || !(row >> p.stab_part)) {
                throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed loss row");
            }
        }
        out.push_back(p);
    }
    return out;
}

}  // namespace cpolab
