#include "cpolab/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <utility>

#include <CLI11.hpp>

#include "cpolab/error.hpp"

namespace cpolab {

namespace {

const std::string& require(const RunConfig& cfg, const std::string& key, const char* flag) {
    const std::string& v = cfg.get(key);
    if (v.empty()) throw ValidationError(std::string("missing ") + flag + " (config key " + key + ")");
    return v;
}

std::string log_path_for(const RunConfig& cfg) {
    const std::string& log = cfg.get("io.log");
    return log.empty() ? require(cfg, "io.out", "--out") + ".log.csv" : log;
}

void check_model(const DenoiserParams& p, const ConditionVocabulary& vocab, const NoiseSchedule& sched,
                 const std::string& path) {
    if (p.arch.cond_dim != vocab.width()) {
        throw ValidationError(path + ": condition width " + std::to_string(p.arch.cond_dim) + " does not match tree (" +
                              std::to_string(vocab.width()) + ")");
    }
    if (p.arch.total_steps != sched.steps()) {
        throw ValidationError(path + ": trained with T=" + std::to_string(p.arch.total_steps) +
                              ", schedule has T=" + std::to_string(sched.steps()));
    }
    if (!p.arch.skip.empty() && p.arch.skip != noise_skip(sched)) {
        throw ValidationError(path + ": skip table was built for a different noise schedule");
    }
}

std::size_t to_size(long long v, const char* key) {
    if (v < 0) throw ValidationError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
}

}  // namespace

AttributeTree tree_from(const RunConfig& cfg) {
    const std::string& path = cfg.get("tree");
    if (path.empty()) return default_tree();
    AttributeTree tree = load_tree(path);
    const ValidationReport rep = validate_tree(tree);
    if (!rep.ok()) {
        throw ValidationError(path + ": " + rep.violations.front().path + ": " + rep.violations.front().message);
    }
    return tree;
}

NoiseSchedule schedule_from(const RunConfig& cfg) {
    return make_schedule(static_cast<int>(cfg.get_int("schedule.T")), cfg.get_double("schedule.beta_min"),
                         cfg.get_double("schedule.beta_max"));
}

OracleThresholds thresholds_from(const RunConfig& cfg) {
    OracleThresholds t;
    t.gap_max = cfg.get_double("thresholds.gap_max");
    t.jitter_max = cfg.get_double("thresholds.jitter_max");
    t.centroid_max = cfg.get_double("thresholds.centroid_max");
    t.dispersion_low = cfg.get_double("thresholds.dispersion_low");
    t.dispersion_high = cfg.get_double("thresholds.dispersion_high");
    validate_thresholds(t);
    return t;
}

KnobMix knob_mix_from(const RunConfig& cfg) {
    KnobMix m;
    m.ring_probability = cfg.get_double("data.ring_probability");
    m.good_probability = cfg.get_double("data.good_probability");
    m.bad_multiplier = cfg.get_double("data.bad_multiplier");
    m.noise_sigma = cfg.get_double("data.noise_sigma");
    return m;
}

Architecture architecture_from(const RunConfig& cfg, const ConditionVocabulary& vocab) {
    Architecture a;
    a.data_dim = 2 * to_size(cfg.get_int("data.point_count"), "data.point_count");
    a.time_dim = to_size(cfg.get_int("model.time_dim"), "model.time_dim");
    a.hidden = to_size(cfg.get_int("model.hidden"), "model.hidden");
    a.cond_dim = vocab.width();
    a.total_steps = static_cast<int>(cfg.get_int("schedule.T"));
    if (cfg.get_bool("model.skip")) a.skip = noise_skip(schedule_from(cfg));
    return a;
}

SftConfig sft_config_from(const RunConfig& cfg) {
    SftConfig c;
    c.epochs = static_cast<int>(cfg.get_int("sft.epochs"));
    if (c.epochs < 0) throw ValidationError("sft.epochs must be non-negative");
    c.batch_size = to_size(cfg.get_int("sft.batch"), "sft.batch");
    if (c.batch_size == 0) throw ValidationError("sft.batch must be positive");
    c.adam.lr = cfg.get_double("sft.lr");
    c.cosine_decay = cfg.get_bool("sft.cosine_decay");
    c.dropout = {cfg.get_double("sft.p_y"), cfg.get_double("sft.p_pos"), cfg.get_double("sft.p_neg"),
                 cfg.get_double("sft.p_null")};
    validate_policy(c.dropout);
    c.seed = cfg.get_u64("seed");
    return c;
}

CpoConfig cpo_config_from(const RunConfig& cfg) {
    CpoConfig c;
    c.variant = parse_variant(cfg.get("align.variant"));
    c.omega_w = cfg.get_double("align.omega_w");
    c.omega_l = cfg.get_double("align.omega_l");
    c.beta_pref = cfg.get_double("align.beta_pref");
    const std::string& kappa = cfg.get("align.kappa");
    if (!kappa.empty() && kappa != "auto") c.kappa = cfg.get_double("align.kappa");
    c.steps = static_cast<int>(cfg.get_int("align.steps"));
    c.batch_size = to_size(cfg.get_int("align.batch"), "align.batch");
    c.adam.lr = cfg.get_double("align.lr");
    c.seed = cfg.get_u64("seed");
    validate_config(c, static_cast<int>(cfg.get_int("schedule.T")));
    return c;
}

SamplingOptions sampling_from(const RunConfig& cfg) {
    SamplingOptions o;
    o.sampler_steps = static_cast<int>(cfg.get_int("sample.steps"));
    o.n_per_prompt = to_size(cfg.get_int("sample.n_per_prompt"), "sample.n_per_prompt");
    o.seed = cfg.get_u64("seed");
    o.x0_clip = cfg.get_double("sample.x0_clip");
    return o;
}

std::vector<Family> prompts_from(const RunConfig& cfg) {
    std::vector<Family> out;
    std::stringstream in(cfg.get("sample.prompts"));
    std::string name;
    while (std::getline(in, name, ',')) {
        if (!name.empty()) out.push_back(parse_family(name));
    }
    if (out.empty()) throw ValidationError("sample.prompts is empty");
    return out;
}

Dataset load_dataset_for(const RunConfig& cfg, const AttributeTree& tree) {
    const std::string& path = require(cfg, "io.data", "--data");
    Dataset ds = read_dataset(path);
    if (ds.header && ds.header->tree_hash != tree_hash(tree)) {
        throw ValidationError(path + ": annotated under a different attribute tree");
    }
    return ds;
}

Dataset cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
    const std::string& out = require(cfg, "io.out", "--out");
    const AttributeTree tree = tree_from(cfg);
    const Dataset ds = build_dataset(to_size(cfg.get_int("data.n"), "data.n"), knob_mix_from(cfg), tree,
                                     thresholds_from(cfg), cfg.get_u64("seed"),
                                     to_size(cfg.get_int("data.point_count"), "data.point_count"));
    write_dataset(out, ds);
    cfg.write_snapshot(snapshot_path(out));
    log << "wrote " << ds.records.size() << " records to " << out << '\n';
    return ds;
}

SftResult cmd_train_sft(const RunConfig& cfg, std::ostream& log) {
    const std::string& out = require(cfg, "io.out", "--out");
    const AttributeTree tree = tree_from(cfg);
    const ConditionVocabulary vocab(tree);
    const Dataset data = load_dataset_for(cfg, tree);
    const NoiseSchedule sched = schedule_from(cfg);
    const SftConfig config = sft_config_from(cfg);
    const DenoiserParams init = init_params(derive_seed(config.seed, "init"), architecture_from(cfg, vocab));

    SftResult res = train_sft(init, data, vocab, config, sched, [&](const SftLogRow& row) {
        if (row.split == "val" && (row.epoch % 50 == 0 || row.epoch == config.epochs)) {
            log << "epoch " << row.epoch << " val loss " << row.loss << '\n';
        }
    });

    const auto val = data.split(Split::Val);
    if (!val.empty() && !res.log.empty()) {
        const IouReport r = evaluate_iou(res.params, val, tree, thresholds_from(cfg), sampling_from(cfg), sched);
        res.log.back().iou_pos = r.iou_pos;
        res.log.back().iou_neg = r.iou_neg;
        log << "val iou_pos " << r.iou_pos << " iou_neg " << r.iou_neg << '\n';
    }
    save_checkpoint(out, res.params);
    write_sft_log(log_path_for(cfg), res.log);
    cfg.write_snapshot(snapshot_path(out));
    return res;
}

CpoResult cmd_train_align(const RunConfig& cfg, std::ostream& log) {
    const std::string& out = require(cfg, "io.out", "--out");
    const std::string& sft = require(cfg, "io.sft", "--sft");
    const AttributeTree tree = tree_from(cfg);
    const ConditionVocabulary vocab(tree);
    const Dataset data = load_dataset_for(cfg, tree);
    const NoiseSchedule sched = schedule_from(cfg);
    const CpoConfig config = cpo_config_from(cfg);
    const DenoiserParams theta1 = load_checkpoint(sft);
    check_model(theta1, vocab, sched, sft);

    CpoResult res = train_cpo(theta1, theta1, theta1, data, tree, config, sched, {}, [&](const LossParts& p) {
        if (p.step % 100 == 0) log << "step " << p.step << " total " << p.total << " win " << p.win_part << '\n';
    });
    save_checkpoint(out, res.params);
    write_loss_parts(log_path_for(cfg), res.log);
    cfg.write_snapshot(snapshot_path(out));
    if (res.skipped_degenerate > 0) log << "skipped " << res.skipped_degenerate << " degenerate batch items\n";
    return res;
}

std::vector<GeneratedSample> cmd_sample(const RunConfig& cfg, std::ostream& log) {
    const std::string& out = require(cfg, "io.out", "--out");
    const std::string& model = require(cfg, "io.model", "--model");
    const AttributeTree tree = tree_from(cfg);
    const ConditionVocabulary vocab(tree);
    const NoiseSchedule sched = schedule_from(cfg);
    const DenoiserParams params = load_checkpoint(model);
    check_model(params, vocab, sched, model);
    const auto samples = generate_samples(params, vocab, prompts_from(cfg), sampling_from(cfg), sched);
    write_samples(out, samples);
    cfg.write_snapshot(snapshot_path(out));
    log << "wrote " << samples.size() << " samples to " << out << '\n';
    return samples;
}

EvalReport cmd_eval(const RunConfig& cfg, const std::string& model_id, std::ostream& log) {
    const std::string& model = require(cfg, "io.model", "--model");
    const AttributeTree tree = tree_from(cfg);
    const ConditionVocabulary vocab(tree);
    const NoiseSchedule sched = schedule_from(cfg);
    const OracleThresholds thresholds = thresholds_from(cfg);
    const SamplingOptions opts = sampling_from(cfg);
    const DenoiserParams params = load_checkpoint(model);
    check_model(params, vocab, sched, model);

    const std::string id = model_id.empty() ? std::filesystem::path(model).stem().string() : model_id;
    EvalReport rep = evaluate_model(id, params, prompts_from(cfg), tree, thresholds, opts, sched,
                                    static_cast<int>(cfg.get_int("eval.resamples")));
    if (cfg.get_bool("eval.iou")) {
        const Dataset data = load_dataset_for(cfg, tree);
        const IouReport r = evaluate_iou(params, data.split(Split::Test), tree, thresholds, opts, sched);
        rep.iou_pos = r.iou_pos;
        rep.iou_neg = r.iou_neg;
    }
    const std::string& out = cfg.get("io.out");
    if (!out.empty()) {
        write_report(out, rep);
        cfg.write_snapshot(snapshot_path(out));
    }
    log << id << " mean #A_neg " << rep.mean_a_neg << " [" << rep.ci_low << ", " << rep.ci_high << "] over "
        << rep.n_samples - rep.n_degenerate << " samples\n";
    return rep;
}

nlohmann::json cmd_compare(const std::vector<std::string>& report_paths) {
    std::vector<EvalReport> reports;
    for (const auto& p : report_paths) reports.push_back(read_report(p));
    return comparison_to_json(compare_models(reports));
}

CurveSummary cmd_curves(const RunConfig& cfg, std::ostream& log) {
    const std::string& in = require(cfg, "io.log", "--log");
    const CurveSummary c = loss_curves(read_loss_parts(in), to_size(cfg.get_int("curves.window"), "curves.window"));
    const std::string& out = cfg.get("io.out");
    if (!out.empty()) {
        write_curves(out, c);
        cfg.write_snapshot(snapshot_path(out));
    }
    log << "terminal win " << c.terminal_win << " oscillation " << c.oscillation << " raw " << c.raw_oscillation
        << '\n';
    return c;
}

SelfcheckReport cmd_selfcheck(const RunConfig& cfg, bool fast) {
    SelfcheckReport rep = run_selfcheck(fast, cfg.get_u64("seed"));
    const std::string& out = cfg.get("io.out");
    if (!out.empty()) {
        std::ofstream f(out);
        if (!f) throw Error("cannot write " + out);
        f << rep.to_json().dump(2) << '\n';
        cfg.write_snapshot(snapshot_path(out));
    }
    return rep;
}

namespace {

/// Flag values collected during parsing, applied after the config file and
/// environment so the command line wins.
struct Overrides {
    std::string config_file;
    std::vector<std::pair<std::string, std::string>> values;
    std::vector<std::string> sets;
    std::optional<long long> n_total;

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_file.empty()) cfg.load_file(config_file);
        cfg.apply_env();
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + s + "'");
            cfg.set(s.substr(0, eq), s.substr(eq + 1), ConfigSource::Cli);
        }
        for (const auto& [k, v] : values) cfg.set(k, v, ConfigSource::Cli);
        if (n_total) {
            const auto prompts = static_cast<long long>(prompts_from(cfg).size());
            if (*n_total <= 0 || *n_total % prompts != 0) {
                throw ValidationError("--n must be a positive multiple of the prompt count (" +
                                      std::to_string(prompts) + ")");
            }
            cfg.set("sample.n_per_prompt", std::to_string(*n_total / prompts), ConfigSource::Cli);
        }
        return cfg;
    }
};

void bind(CLI::App* app, Overrides& ov, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(
        flag, [&ov, key](const std::string& v) { ov.values.emplace_back(key, v); }, help);
}

void common(CLI::App* app, Overrides& ov) {
    app->add_option("--config", ov.config_file, "Config file (key = value lines)");
    app->add_option("--set", ov.sets, "Override any config key: key=value");
    bind(app, ov, "--seed", "seed", "Run seed");
    bind(app, ov, "--tree", "tree", "Attribute tree JSON (default: built-in tree)");
    bind(app, ov, "--T", "schedule.T", "Diffusion steps");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"cpolab: attribute-aware preference alignment for a toy diffusion model"};
    app.require_subcommand(1);
    Overrides ov;
    std::function<int()> action;

    auto* tax = app.add_subcommand("taxonomy", "Attribute tree utilities");
    tax->require_subcommand(1);
    std::string tree_file;
    auto* tax_validate = tax->add_subcommand("validate", "Validate a tree document");
    tax_validate->add_option("file", tree_file, "Tree JSON")->required();
    tax_validate->callback([&] {
        action = [&]() -> int {
            const AttributeTree tree = load_tree(tree_file);
            const ValidationReport rep = validate_tree(tree);
            for (const auto& v : rep.violations) err << tree_file << ": " << v.path << ": " << v.message << '\n';
            if (rep.ok()) out << "ok " << tree_hash(tree) << '\n';
            return rep.ok() ? kExitOk : kExitValidation;
        };
    });
    auto* tax_default = tax->add_subcommand("default", "Write the built-in tree");
    std::string tree_out;
    tax_default->add_option("--out", tree_out, "Output JSON")->required();
    tax_default->callback([&] {
        action = [&]() -> int {
            save_tree(tree_out, default_tree());
            return kExitOk;
        };
    });

    auto* gen = app.add_subcommand("gen-data", "Generate and annotate the synthetic dataset");
    common(gen, ov);
    gen->add_option_function<long long>("--n", [&](long long n) { ov.values.emplace_back("data.n", std::to_string(n)); },
                                        "Number of samples");
    bind(gen, ov, "--point-count", "data.point_count", "Points per cloud");
    bind(gen, ov, "--out", "io.out", "Output JSONL");
    gen->callback([&] {
        action = [&]() -> int {
            cmd_gen_data(ov.resolve(), out);
            return kExitOk;
        };
    });

    auto* sft = app.add_subcommand("train-sft", "Stage 1: attribute-conditioned fine-tuning");
    common(sft, ov);
    bind(sft, ov, "--data", "io.data", "Dataset JSONL");
    bind(sft, ov, "--out", "io.out", "Output checkpoint");
    bind(sft, ov, "--log", "io.log", "Loss log CSV (default <out>.log.csv)");
    bind(sft, ov, "--epochs", "sft.epochs", "Epochs");
    bind(sft, ov, "--lr", "sft.lr", "Learning rate");
    bind(sft, ov, "--batch", "sft.batch", "Batch size");
    sft->callback([&] {
        action = [&]() -> int {
            cmd_train_sft(ov.resolve(), out);
            return kExitOk;
        };
    });

    auto* align = app.add_subcommand("train-align", "Stage 2: preference alignment");
    align->alias("train-cpo");
    common(align, ov);
    bind(align, ov, "--sft", "io.sft", "Stage-1 checkpoint (initial, expert and reference model)");
    bind(align, ov, "--data", "io.data", "Dataset JSONL");
    bind(align, ov, "--variant", "align.variant", "cpo | cpo-s | dpo | dpo-scalar | dpo-binary");
    bind(align, ov, "--omega-w", "align.omega_w", "Winner guidance scale");
    bind(align, ov, "--omega-l", "align.omega_l", "Loser guidance scale");
    bind(align, ov, "--beta", "align.beta_pref", "Preference temperature (kappa = beta * T when kappa is auto)");
    bind(align, ov, "--kappa", "align.kappa", "Sigmoid scale, or 'auto'");
    bind(align, ov, "--steps", "align.steps", "Optimizer steps");
    bind(align, ov, "--batch", "align.batch", "Batch size");
    bind(align, ov, "--lr", "align.lr", "Learning rate");
    bind(align, ov, "--out", "io.out", "Output checkpoint");
    bind(align, ov, "--log", "io.log", "Loss parts CSV (default <out>.log.csv)");
    align->callback([&] {
        action = [&]() -> int {
            cmd_train_align(ov.resolve(), out);
            return kExitOk;
        };
    });

    auto sampling_flags = [&](CLI::App* sub) {
        bind(sub, ov, "--model", "io.model", "Checkpoint");
        sub->add_option("--n", ov.n_total, "Total samples, split evenly across prompts");
        bind(sub, ov, "--sampler-steps", "sample.steps", "DDIM steps (must divide T)");
        bind(sub, ov, "--prompts", "sample.prompts", "Comma-separated families");
        bind(sub, ov, "--out", "io.out", "Output file");
    };

    auto* sample = app.add_subcommand("sample", "Generate point clouds");
    common(sample, ov);
    sampling_flags(sample);
    sample->callback([&] {
        action = [&]() -> int {
            cmd_sample(ov.resolve(), out);
            return kExitOk;
        };
    });

    auto* ev = app.add_subcommand("eval", "Mean #A_neg with a bootstrap interval");
    common(ev, ov);
    sampling_flags(ev);
    std::string model_id;
    ev->add_option("--id", model_id, "Model id in the report (default: checkpoint stem)");
    bind(ev, ov, "--data", "io.data", "Dataset for --iou");
    ev->add_flag_callback("--iou", [&] { ov.values.emplace_back("eval.iou", "true"); },
                          "Also measure IoU on the test split");
    bind(ev, ov, "--resamples", "eval.resamples", "Bootstrap resamples");
    ev->callback([&] {
        action = [&]() -> int {
            const EvalReport r = cmd_eval(ov.resolve(), model_id, out);
            out << report_to_json(r).dump(2) << '\n';
            return kExitOk;
        };
    });

    auto* cmp = app.add_subcommand("compare", "Rank evaluation reports");
    std::vector<std::string> reports;
    std::string cmp_out;
    cmp->add_option("--reports", reports, "Report JSON files")->required();
    cmp->add_option("--out", cmp_out, "Output JSON");
    cmp->callback([&] {
        action = [&]() -> int {
            const nlohmann::json j = cmd_compare(reports);
            if (!cmp_out.empty()) {
                std::ofstream f(cmp_out);
                if (!f) throw Error("cannot write " + cmp_out);
                f << j.dump(2) << '\n';
            }
            out << j.dump(2) << '\n';
            return kExitOk;
        };
    });

    auto* curves = app.add_subcommand("curves", "Smoothed loss curves from a loss-parts log");
    common(curves, ov);
    bind(curves, ov, "--log", "io.log", "Loss parts CSV");
    bind(curves, ov, "--out", "io.out", "Output CSV");
    bind(curves, ov, "--window", "curves.window", "Moving-average window");
    curves->callback([&] {
        action = [&]() -> int {
            cmd_curves(ov.resolve(), out);
            return kExitOk;
        };
    });

    auto* check = app.add_subcommand("selfcheck", "Analytic identities and gradient checks");
    common(check, ov);
    bool fast = false;
    check->add_flag("--fast", fast, "Fewer trials and coordinates");
    bind(check, ov, "--out", "io.out", "Also write the JSON report here");
    check->callback([&] {
        action = [&]() -> int {
            const SelfcheckReport rep = cmd_selfcheck(ov.resolve(), fast);
            out << rep.to_json().dump(2) << '\n';
            return rep.passed() ? kExitOk : kExitSelfcheck;
        };
    });

    std::vector<std::string> argv{"cpolab"};
    argv.insert(argv.end(), args.begin(), args.end());
    std::vector<const char*> raw;
    for (const auto& a : argv) raw.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(raw.size()), raw.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    }

    try {
        return action ? action() : kExitValidation;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace cpolab
