// Command-line front end: train / probe / select / decode / eval / report /
// run. Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "skiplab/skiplab.hpp"

using namespace skiplab;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

std::vector<int> parse_tokens(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (ss >> item) {
        for (char& c : item)
            if (c == ',') c = ' ';
        std::stringstream inner(item);
        int v;
        while (inner >> v) out.push_back(v);
    }
    if (out.empty()) throw InputError("no tokens in: " + s);
    return out;
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    return nlohmann::json::parse(is);
}

SkipSet parse_skip(const std::string& s) {
    if (s.empty()) return SkipSet();
    return SkipSet(parse_tokens(s));
}

void print_generation(const GenerationResult& g) {
    nlohmann::json j{{"prompt", g.prompt},
                     {"tokens", g.tokens},
                     {"skip", g.skip.blocks()},
                     {"steps", g.steps}};
    std::cout << j.dump() << "\n";
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Desk-scale transformer layer-skipping laboratory"};
    app.require_subcommand(1);

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Train one model regime");
    std::string train_config_path, task_path, ckpt_out, init_path, log_path;
    std::uint64_t seed_override = 0;
    train_cmd->add_option("--config", train_config_path, "TrainConfig JSON")->required();
    train_cmd->add_option("--task", task_path, "TaskSpec JSON")->required();
    train_cmd->add_option("--out", ckpt_out, "checkpoint output path")->required();
    train_cmd->add_option("--init", init_path, "initialize from this checkpoint");
    train_cmd->add_option("--log", log_path, "training log CSV");
    train_cmd->add_option("--seed", seed_override, "override the config seed");
    train_cmd->callback([&] {
        TrainConfig tc = train_config_from_json(load_json(train_config_path));
        TaskSpec task = task_spec_from_json(load_json(task_path));
        if (!init_path.empty()) tc.init_from = load_checkpoint(init_path);
        if (!log_path.empty()) tc.log_path = log_path;
        if (seed_override) tc.seed = seed_override;
        TrainLog log;
        Checkpoint ckpt = train(tc, task, &log);
        save_checkpoint(ckpt_out, ckpt);
        std::cout << "trained " << to_string(ckpt.regime) << " for " << tc.steps
                  << " steps; final loss "
                  << (log.rows.empty() ? 0.0 : log.rows.back().loss) << "\n"
                  << "checkpoint: " << ckpt_out << "\n";
    });

    // ---- probe ----
    auto* probe_cmd = app.add_subcommand("probe", "Similarity and norm analyses for one prompt");
    std::string probe_ckpt, probe_tokens, probe_out;
    int probe_gen = 8, probe_steps = 4;
    double probe_sink_ratio = 50.0;
    probe_cmd->add_option("--ckpt", probe_ckpt, "checkpoint path")->required();
    probe_cmd->add_option("--tokens", probe_tokens, "prompt token ids")->required();
    probe_cmd->add_option("--out", probe_out, "output directory")->required();
    probe_cmd->add_option("--gen-length", probe_gen, "response length (diffusion)");
    probe_cmd->add_option("--steps", probe_steps, "denoising steps (diffusion)");
    probe_cmd->add_option("--sink-ratio", probe_sink_ratio, "sink threshold vs median norm");
    probe_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(probe_ckpt);
        std::vector<int> prompt = parse_tokens(probe_tokens);
        ensure_dir(probe_out);
        std::vector<HiddenStateTrace> traces;
        if (ckpt.config.attention_mode == AttentionMode::kBidirectional) {
            DecodeConfig dc;
            dc.mode = DecodeMode::kDiffusion;
            dc.max_new_tokens = probe_gen;
            dc.denoising_steps = probe_steps;
            dc.capture_traces = true;
            traces = diffusion_decode(ckpt, prompt, SkipSet(), dc).traces;
        } else {
            traces.push_back(*forward(ckpt, prompt, SkipSet(), true).trace);
        }
        const int L = ckpt.config.num_blocks;
        {
            std::vector<std::string> header{"layer"};
            for (std::size_t t = 1; t <= traces.size(); ++t)
                header.push_back("step" + std::to_string(t));
            CsvWriter csv((fs::path(probe_out) / "layer-sim.csv").string(), header);
            std::vector<SimilarityList> cols;
            for (const auto& tr : traces) cols.push_back(layerwise_similarity(tr, TokenWindow::kAll));
            for (int ell = 1; ell <= L; ++ell) {
                std::vector<std::string> row{std::to_string(ell)};
                for (const auto& c : cols) row.push_back(fmt_double(c.at_block(ell)));
                csv.write_row(row);
            }
        }
        {
            const HiddenStateTrace& last = traces.back();
            std::vector<std::string> header{"layer"};
            for (int i = 0; i + 1 < last.states[0].rows(); ++i)
                header.push_back("pos" + std::to_string(i));
            CsvWriter csv((fs::path(probe_out) / "token-sim.csv").string(), header);
            for (int ell = 0; ell <= L; ++ell) {
                TokenSimilaritySeries s = tokenwise_similarity(last, ell);
                std::vector<std::string> row{std::to_string(ell)};
                for (double v : s.values) row.push_back(fmt_double(v));
                csv.write_row(row);
            }
        }
        {
            AvgTokenProfile prof = avg_tokenwise_profile(traces, PairWindow::kAll);
            CsvWriter csv((fs::path(probe_out) / "avg-profile.csv").string(),
                          {"layer", "mean_tokenwise_similarity", "std_across_steps"});
            for (int ell = 0; ell < L; ++ell)
                csv.write_row({std::to_string(ell + 1), fmt_double(prof.mean[ell]),
                               fmt_double(prof.stddev[ell])});
        }
        {
            NormProfile np = norm_profile(traces.back(), probe_sink_ratio);
            CsvWriter csv((fs::path(probe_out) / "norm-profile.csv").string(),
                          {"layer", "mean_norm", "median_norm", "max_norm", "num_sinks"});
            for (std::size_t ell = 0; ell < np.mean_norm.size(); ++ell) {
                int sinks = 0;
                for (bool b : np.sink[ell]) sinks += b ? 1 : 0;
                csv.write_row({std::to_string(ell), fmt_double(np.mean_norm[ell]),
                               fmt_double(np.median_norm[ell]), fmt_double(np.max_norm[ell]),
                               std::to_string(sinks)});
            }
        }
        std::cout << "probe outputs in " << probe_out << "\n";
    });

    // ---- select ----
    auto* select_cmd = app.add_subcommand("select", "Calibrate a skip set for one prompt");
    std::string sel_ckpt, sel_tokens;
    double sel_tau = 0.95;
    int sel_nmax = 2, sel_gen = 8;
    bool sel_allow = false;
    select_cmd->add_option("--ckpt", sel_ckpt)->required();
    select_cmd->add_option("--tokens", sel_tokens)->required();
    select_cmd->add_option("--tau", sel_tau, "similarity threshold");
    select_cmd->add_option("--n-max", sel_nmax, "maximum layers to skip");
    select_cmd->add_flag("--allow-consecutive", sel_allow, "permit adjacent skips");
    select_cmd->add_option("--gen-length", sel_gen, "masked response length (diffusion)");
    select_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(sel_ckpt);
        SkipPolicyConfig pol;
        pol.tau = sel_tau;
        pol.n_max = sel_nmax;
        pol.allow_consecutive = sel_allow;
        SkipSet skip = calibrate_skip_set(ckpt, parse_tokens(sel_tokens), pol, sel_gen);
        nlohmann::json j{{"skip", skip.blocks()},
                         {"flops_reduction", flops_reduction(skip, ckpt.config.num_blocks)}};
        std::cout << j.dump() << "\n";
    });

    // ---- decode ----
    auto* decode_cmd = app.add_subcommand("decode", "Generate from a prompt");
    std::string dec_ckpt, dec_tokens, dec_skip;
    DecodeConfig dec_cfg;
    std::string dec_sampler = "greedy";
    decode_cmd->add_option("--ckpt", dec_ckpt)->required();
    decode_cmd->add_option("--tokens", dec_tokens)->required();
    decode_cmd->add_option("--skip", dec_skip, "block indices to bypass, e.g. \"1,4\"");
    decode_cmd->add_option("--max-new-tokens", dec_cfg.max_new_tokens);
    decode_cmd->add_option("--denoising-steps", dec_cfg.denoising_steps, "T (diffusion)");
    decode_cmd->add_option("--sampler", dec_sampler, "greedy | nucleus");
    decode_cmd->add_option("--top-p", dec_cfg.top_p);
    decode_cmd->add_option("--temperature", dec_cfg.temperature);
    decode_cmd->add_option("--seed", dec_cfg.seed);
    decode_cmd->add_option("--stop-token", dec_cfg.stop_token);
    decode_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(dec_ckpt);
        dec_cfg.mode = ckpt.config.attention_mode == AttentionMode::kCausal
                           ? DecodeMode::kAr
                           : DecodeMode::kDiffusion;
        dec_cfg.sampler = dec_sampler == "nucleus" ? SamplerKind::kNucleus : SamplerKind::kGreedy;
        print_generation(decode(ckpt, parse_tokens(dec_tokens), parse_skip(dec_skip), dec_cfg));
    });

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "Exact-match score on the eval split");
    std::string eval_ckpt, eval_task, eval_skip;
    std::uint64_t eval_seed = 1;
    int eval_cap = 0, eval_T = 8;
    eval_cmd->add_option("--ckpt", eval_ckpt)->required();
    eval_cmd->add_option("--task", eval_task, "TaskSpec JSON")->required();
    eval_cmd->add_option("--data-seed", eval_seed, "dataset seed");
    eval_cmd->add_option("--skip", eval_skip, "fixed skip set");
    eval_cmd->add_option("--eval-examples", eval_cap, "cap on eval examples (0: all)");
    eval_cmd->add_option("--denoising-steps", eval_T, "T (diffusion)");
    eval_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(eval_ckpt);
        TaskSpec task = task_spec_from_json(load_json(eval_task));
        Dataset ds = generate_dataset(task, eval_seed);
        std::span<const Example> evals(ds.eval);
        if (eval_cap > 0 && eval_cap < static_cast<int>(evals.size()))
            evals = evals.subspan(0, eval_cap);
        DecodeConfig dc;
        dc.mode = ckpt.config.attention_mode == AttentionMode::kCausal ? DecodeMode::kAr
                                                                       : DecodeMode::kDiffusion;
        dc.denoising_steps = eval_T;
        double score = evaluate(ckpt, parse_skip(eval_skip), evals, dc);
        nlohmann::json j{{"exact_match", score},
                         {"examples", evals.size()},
                         {"skip", parse_skip(eval_skip).blocks()}};
        std::cout << j.dump() << "\n";
    });

    // ---- report ----
    auto* report_cmd = app.add_subcommand("report", "Print the aggregate tables of a run");
    std::string report_dir;
    report_cmd->add_option("--run", report_dir, "run directory")->required();
    report_cmd->callback([&] {
        for (const char* name : {"retention-summary.csv", "profile-distances.csv"}) {
            fs::path p = fs::path(report_dir) / "aggregate" / name;
            if (!fs::exists(p)) throw InputError("missing " + p.string());
            std::cout << "== " << name << "\n";
            std::ifstream is(p);
            std::cout << is.rdbuf() << "\n";
        }
    });

    // ---- run ----
    auto* run_cmd = app.add_subcommand("run", "Full experiment pipeline");
    std::string run_config, run_out;
    int run_jobs = 0;
    bool run_dry = false, print_default = false;
    run_cmd->add_option("--config", run_config, "ExperimentConfig JSON");
    run_cmd->add_option("--out", run_out, "override output directory");
    run_cmd->add_option("--jobs", run_jobs, "parallel seed branches");
    run_cmd->add_flag("--dry-run", run_dry, "print the stage plan and stop");
    run_cmd->add_flag("--print-default-config", print_default,
                      "emit the default config JSON and exit");
    run_cmd->callback([&] {
        if (print_default) {
            std::cout << to_json(ExperimentConfig{}).dump(2) << "\n";
            return;
        }
        if (run_config.empty()) throw ConfigError("run needs --config (or --print-default-config)");
        ExperimentConfig cfg = experiment_config_from_json(load_json(run_config));
        if (!run_out.empty()) cfg.out_dir = run_out;
        if (run_jobs > 0) cfg.jobs = run_jobs;
        cfg.dry_run = run_dry;
        ExperimentResult res = run_experiment(cfg);
        if (run_dry) {
            for (const auto& s : res.planned_stages) std::cout << s << "\n";
            return;
        }
        bool any_failed = false;
        for (const auto& s : res.stages) {
            std::cout << (s.ok ? "ok   " : "FAIL ") << s.name;
            if (!s.ok) std::cout << "  (" << s.error << ")";
            std::cout << "\n";
            any_failed = any_failed || !s.ok;
        }
        std::cout << "run directory: " << res.dir.string() << "\n";
        if (any_failed) throw Error("one or more stages failed");
    });

    CLI11_PARSE(app, argc, argv);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
}
