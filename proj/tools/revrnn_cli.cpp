// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <string>

#include "revrnn/selfcheck.hpp"
#include "revrnn/train.hpp"

using namespace revrnn;

// Exit codes: 0 ok, 1 verification/runtime failure, 2 usage or config error.

namespace {

int cmd_verify(const VerifyOptions& opt) {
    auto results = run_verify(opt, std::cout);
    uint64_t failed = 0;
    for (const auto& r : results) failed += r.failed;
    return failed == 0 ? 0 : 1;
}

int cmd_train(RunConfig cfg, const std::string& out_dir) {
    std::string dir = out_dir.empty() ? "runs/" + config_hash_hex(cfg) : out_dir;
    RunSummary sum = train_run(cfg, dir);
    std::cout << "run " << dir << ": " << sum.rows << " log rows, final loss/token "
              << detail::format_double(sum.final_loss) << ", tokens correct "
              << detail::format_double(sum.final_tokens_correct) << ", eval metric "
              << detail::format_double(sum.eval_metric) << "\n";
    return 0;
}

int cmd_memstats(const std::string& run_dir) {
    MemStats ms = memstats_from_run(run_dir);
    nlohmann::json j;
    j["config_hash"] = ms.config_hash;
    j["rows"] = ms.rows;
    j["ratios"]["mean_savings"] =
        std::isfinite(ms.mean_savings) ? nlohmann::json(ms.mean_savings) : nlohmann::json("inf");
    j["ratios"]["final_savings"] =
        std::isfinite(ms.final_savings) ? nlohmann::json(ms.final_savings) : nlohmann::json("inf");
    if (ms.rows > 0 && !ms.any_infinite) {
        j["ratios"]["min_savings"] = ms.min_savings;
        j["ratios"]["max_savings"] = ms.max_savings;
    }
    j["bits"]["final_measured"] = ms.final_measured_bits;
    j["bits"]["final_ideal"] = ms.final_ideal_bits;
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"reversible recurrent networks: exact fixed-point reversal, "
                 "buffered forgetting, and memory-accounted training"};
    app.require_subcommand(1);

    // ---- verify
    auto* verify = app.add_subcommand("verify", "run the built-in verification suites");
    VerifyOptions vopt;
    verify->add_option("--suite", vopt.suite,
                       "one of: all, buffer, reversal, gradient, noise, accounting")
        ->default_val("all");
    verify->add_option("--cases", vopt.cases, "case budget (0 = per-suite default)");
    verify->add_option("--seed", vopt.seed, "RNG seed");
    verify->add_flag("--inject-fault", vopt.inject_fault,
                     "flip one buffer bit and demonstrate fault detection");

    // ---- train
    auto* train = app.add_subcommand("train", "train a model per task config");
    std::string config_path, out_dir;
    train->add_option("--config", config_path, "key = value task config file");
    train->add_option("--out", out_dir, "output run directory (default runs/<config-hash>)");
    std::string o_task, o_cell, o_bits, o_att, o_opt, o_corpus;
    int o_T = 0, o_V = 0, o_hidden = 0, o_steps = 0, o_batch = 0, o_rh = 0, o_rz = 0, o_emb = -1,
        o_log = 0;
    uint64_t o_seed = 0;
    double o_lr = -1, o_clip = -1;
    train->add_option("--task", o_task, "repeat | memorize | char_lm | translate");
    train->add_option("--cell", o_cell, "revgru | revlstm | nf-revgru | df-revgru | gru | lstm");
    train->add_option("--bits-limit", o_bits, "1 | 2 | 3 | 5 | none (forget floor 2^-bits)");
    train->add_option("--attention", o_att, "emb | slice:K | emb+slice:K | full");
    train->add_option("--rh", o_rh, "hidden fractional bits R_H");
    train->add_option("--rz", o_rz, "gate fractional bits R_Z");
    train->add_option("--seed", o_seed, "RNG seed");
    train->add_option("-T,--timesteps", o_T, "sequence length");
    train->add_option("--vocab", o_V, "vocabulary size");
    train->add_option("--hidden", o_hidden, "total hidden units");
    train->add_option("--steps", o_steps, "training steps");
    train->add_option("--batch", o_batch, "batch size");
    train->add_option("--lr", o_lr, "learning rate");
    train->add_option("--clip", o_clip, "global gradient-norm clip (0 = off)");
    train->add_option("--optimizer", o_opt, "adam | sgd");
    train->add_option("--corpus", o_corpus, "byte corpus path (char_lm)");
    train->add_option("--emb", o_emb, "embedding dim (0 = one-hot)");
    train->add_option("--log-every", o_log, "CSV row cadence");

    // ---- memstats
    auto* memstats = app.add_subcommand("memstats", "aggregate memory stats of a run directory");
    std::string run_dir;
    memstats->add_option("run_dir", run_dir, "completed run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (verify->parsed()) return cmd_verify(vopt);
        if (train->parsed()) {
            RunConfig cfg;
            if (!config_path.empty()) cfg = load_run_config(config_path);
            if (train->count("--task")) cfg.task = o_task;
            if (train->count("--cell")) cfg.cell = o_cell;
            if (train->count("--bits-limit")) cfg.bits_limit = o_bits;
            if (train->count("--attention")) cfg.attention = o_att;
            if (train->count("--rh")) cfg.rh = o_rh;
            if (train->count("--rz")) cfg.rz = o_rz;
            if (train->count("--seed")) cfg.seed = o_seed;
            if (train->count("-T")) cfg.T = o_T;
            if (train->count("--vocab")) cfg.V = o_V;
            if (train->count("--hidden")) cfg.hidden = o_hidden;
            if (train->count("--steps")) cfg.steps = o_steps;
            if (train->count("--batch")) cfg.batch = o_batch;
            if (train->count("--lr")) cfg.lr = o_lr;
            if (train->count("--clip")) cfg.clip = o_clip;
            if (train->count("--optimizer")) cfg.optimizer = o_opt;
            if (train->count("--corpus")) cfg.corpus = o_corpus;
            if (train->count("--emb")) cfg.emb = o_emb;
            if (train->count("--log-every")) cfg.log_every = o_log;
            return cmd_train(cfg, out_dir);
        }
        if (memstats->parsed()) return cmd_memstats(run_dir);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
