// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "revrnn/selfcheck.hpp"
#include "revrnn/train.hpp"

using namespace revrnn;
namespace fs = std::filesystem;

namespace {

// ctest exports REVRNN_CLI; direct invocations fall back to likely paths.
std::string cli_path() {
    if (const char* env = std::getenv("REVRNN_CLI")) return env;
    for (const char* guess : {"./build/tools/revrnn", "../tools/revrnn", "build/tools/revrnn"})
        if (fs::exists(guess)) return guess;
    return {};
}

int run_cli(const std::string& args) {
    std::string cli = cli_path();
    REQUIRE(!cli.empty());
    std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> csv_rows_without_wall(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    std::vector<std::string> rows;
    std::string line;
    while (std::getline(f, line)) {
        size_t comma = line.rfind(',');
        rows.push_back(line.substr(0, comma));
    }
    return rows;
}

}  // namespace

TEST_CASE("config files parse with line-numbered errors") {
    std::istringstream good("task = memorize\nT = 7\n# comment\nV= 5\n\nhidden =8\n");
    RunConfig cfg = parse_run_config(good, "good.cfg");
    CHECK(cfg.task == "memorize");
    CHECK(cfg.T == 7);
    CHECK(cfg.V == 5);
    CHECK(cfg.hidden == 8);

    std::istringstream bad_key("task = repeat\nwat = 9\n");
    try {
        parse_run_config(bad_key, "bad.cfg");
        FAIL("expected parse error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("bad.cfg:2") != std::string::npos);
        CHECK(std::string(e.what()).find("wat") != std::string::npos);
    }

    std::istringstream no_eq("task repeat\n");
    try {
        parse_run_config(no_eq, "noeq.cfg");
        FAIL("expected parse error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("noeq.cfg:1") != std::string::npos);
    }

    std::istringstream bad_val("T = twenty\n");
    CHECK_THROWS_AS(parse_run_config(bad_val, "badval.cfg"), std::invalid_argument);
}

TEST_CASE("bits-limit maps to the forget floor 2^-bits") {
    RunConfig cfg;
    cfg.bits_limit = "none";
    CHECK(cfg.forget_floor() == 0.0);
    cfg.bits_limit = "1";
    CHECK(cfg.forget_floor() == 0.5);
    cfg.bits_limit = "2";
    CHECK(cfg.forget_floor() == 0.25);
    cfg.bits_limit = "5";
    CHECK(cfg.forget_floor() == doctest::Approx(0.03125));
    cfg.bits_limit = "0";
    CHECK_THROWS_AS(cfg.forget_floor(), std::invalid_argument);
}

TEST_CASE("config hash is stable and sensitive") {
    RunConfig a, b;
    CHECK(config_hash_hex(a) == config_hash_hex(b));
    b.seed = 2;
    CHECK(config_hash_hex(a) != config_hash_hex(b));
}

TEST_CASE("a run directory holds config snapshot, checkpoint, and log") {
    RunConfig cfg;
    cfg.task = "repeat";
    cfg.cell = "revgru";
    cfg.hidden = 8;
    cfg.T = 10;
    cfg.V = 4;
    cfg.steps = 12;
    cfg.batch = 4;
    cfg.log_every = 4;
    cfg.seed = 11;
    std::string dir = "/tmp/revrnn_cli_run";
    fs::remove_all(dir);
    RunSummary sum = train_run(cfg, dir);
    CHECK(sum.rows == 3);
    CHECK(fs::exists(dir + "/config.txt"));
    CHECK(fs::exists(dir + "/params.bin"));
    CHECK(fs::exists(dir + "/log.csv"));
    CHECK(fs::exists(dir + "/summary.json"));

    // The snapshot parses back to the same configuration.
    RunConfig restored = load_run_config(dir + "/config.txt");
    CHECK(canonical_config_text(restored) == canonical_config_text(cfg));

    // The checkpoint loads and matches shapes.
    std::ifstream pb(dir + "/params.bin", std::ios::binary);
    Model m = load_model(pb);
    CHECK(m.cell.cfg.hidden == 8);
    CHECK(m.head.rows == 4);

    MemStats ms = memstats_from_run(dir);
    CHECK(ms.rows == 3);
    CHECK(ms.config_hash == config_hash_hex(cfg));
    CHECK(ms.final_savings > 0.0);
    fs::remove_all(dir);
}

TEST_CASE("same config and seed give byte-identical logs modulo wall time") {
    RunConfig cfg;
    cfg.task = "repeat";
    cfg.cell = "revgru";
    cfg.bits_limit = "2";
    cfg.hidden = 16;
    cfg.T = 20;
    cfg.V = 8;
    cfg.steps = 30;
    cfg.batch = 8;
    cfg.log_every = 10;
    cfg.seed = 42;
    fs::remove_all("/tmp/revrnn_det_a");
    fs::remove_all("/tmp/revrnn_det_b");
    train_run(cfg, "/tmp/revrnn_det_a");
    train_run(cfg, "/tmp/revrnn_det_b");
    auto a = csv_rows_without_wall("/tmp/revrnn_det_a/log.csv");
    auto b = csv_rows_without_wall("/tmp/revrnn_det_b/log.csv");
    CHECK(a == b);
    CHECK(a.size() == 4);  // header + 3 rows

    // Checkpoints are byte-identical too.
    std::ifstream fa("/tmp/revrnn_det_a/params.bin", std::ios::binary);
    std::ifstream fb("/tmp/revrnn_det_b/params.bin", std::ios::binary);
    std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ca == cb);
    fs::remove_all("/tmp/revrnn_det_a");
    fs::remove_all("/tmp/revrnn_det_b");
}

TEST_CASE("mid-sequence state snapshots round-trip and resume a run") {
    // Build a state mid-way through a sequence, snapshot it, reload it.
    std::mt19937_64 rng(31);
    CellConfig cfg{CellKind::RevGRU, 4, 8};
    CellParams P = CellParams::init(cfg, rng);
    RevState s = RevState::zeros(cfg, 2);
    std::vector<double> x((size_t)2 * 4, 0.25);
    for (int t = 0; t < 17; ++t) cell_forward(P, x.data(), s);
    std::stringstream ss;
    save_rev_state(ss, s);
    RevState restored = load_rev_state(ss);
    CHECK(states_identical(s, restored));
    // The restored buffers still unwind: reverse all 17 steps.
    for (int t = 0; t < 17; ++t) cell_reverse(P, x.data(), restored);
    CHECK(restored.bh1.plane_count() == 0);

    // End-to-end: a char_lm run writes state.bin; a second run resumes it.
    std::string corpus = "/tmp/revrnn_state_corpus.txt";
    write_synthetic_corpus(corpus, 30000, 5);
    RunConfig rc;
    rc.task = "char_lm";
    rc.cell = "revgru";
    rc.hidden = 8;
    rc.T = 16;
    rc.steps = 4;
    rc.batch = 2;
    rc.emb = 8;
    rc.corpus = corpus;
    rc.log_every = 2;
    fs::remove_all("/tmp/revrnn_state_a");
    train_run(rc, "/tmp/revrnn_state_a");
    CHECK(fs::exists("/tmp/revrnn_state_a/state.bin"));

    RunConfig rc2 = rc;
    rc2.state_in = "/tmp/revrnn_state_a/state.bin";
    rc2.steps = 2;
    fs::remove_all("/tmp/revrnn_state_b");
    RunSummary resumed = train_run(rc2, "/tmp/revrnn_state_b");
    CHECK(resumed.rows >= 1);
    fs::remove_all("/tmp/revrnn_state_a");
    fs::remove_all("/tmp/revrnn_state_b");
    fs::remove(corpus);
}

TEST_CASE("no-forgetting runs log zero buffer bits and infinite savings") {
    RunConfig cfg;
    cfg.task = "repeat";
    cfg.cell = "nf-revgru";
    cfg.hidden = 16;
    cfg.T = 20;
    cfg.V = 8;
    cfg.steps = 6;
    cfg.batch = 8;
    cfg.log_every = 2;
    cfg.seed = 9;
    std::string dir = "/tmp/revrnn_nf_run";
    fs::remove_all(dir);
    train_run(cfg, dir);
    std::ifstream f(dir + "/log.csv");
    std::string line;
    std::getline(f, line);  // header
    int rows = 0;
    while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        REQUIRE(fields.size() == 7);
        CHECK(fields[3] == "0");    // measured_bits
        CHECK(fields[5] == "inf");  // savings_ratio
        ++rows;
    }
    CHECK(rows == 3);
    fs::remove_all(dir);
}

TEST_CASE("seq2seq checkpoints round-trip") {
    std::mt19937_64 rng(5);
    Seq2SeqModel m = Seq2SeqModel::make(CellKind::RevGRU, 12, 6, 16,
                                        AttentionMode::EmbPlusSliceK, 5, rng);
    std::stringstream ss;
    save_seq2seq(ss, m);
    Seq2SeqModel n = load_seq2seq(ss);
    CHECK(n.vocab == m.vocab);
    CHECK(n.mode == m.mode);
    CHECK(n.k == m.k);
    CHECK(n.att.Wa.a == m.att.Wa.a);
    CHECK(n.enc.emb.a == m.enc.emb.a);
    CHECK(n.dec.cell.W2.a == m.dec.cell.W2.a);
}

TEST_CASE("verify suites pass on a fresh build") {
    VerifyOptions opt;
    opt.cases = 500;
    std::ostringstream sink;
    auto results = run_verify(opt, sink);
    CHECK(results.size() == 5);
    for (const auto& r : results) {
        CHECK(r.failed == 0);
        CHECK(r.passed > 0);
    }
}

TEST_CASE("--suite routes to a single suite") {
    VerifyOptions opt;
    opt.suite = "buffer";
    opt.cases = 300;
    std::ostringstream sink;
    auto results = run_verify(opt, sink);
    REQUIRE(results.size() == 1);
    CHECK(results[0].name == "buffer");
    CHECK(results[0].passed == 301);  // cases plus the worked example
}

TEST_CASE("injected faults are located and fail the reversal suite") {
    VerifyOptions opt;
    opt.suite = "reversal";
    opt.cases = 1000;  // a couple of cells
    opt.inject_fault = true;
    std::ostringstream sink;
    auto results = run_verify(opt, sink);
    REQUIRE(results.size() == 1);
    CHECK(results[0].failed >= 1);
    CHECK(results[0].detail.find("located at t=") != std::string::npos);
    CHECK(results[0].detail.find("unit=") != std::string::npos);
}

TEST_CASE("CLI exit codes: 0 ok, 1 verification failure, 2 usage/config") {
    if (cli_path().empty()) {
        MESSAGE("CLI binary not found (set REVRNN_CLI); skipping subprocess checks");
        return;
    }
    CHECK(run_cli("verify --suite noise --cases 200") == 0);
    CHECK(run_cli("verify --suite reversal --cases 500 --inject-fault") == 1);
    CHECK(run_cli("train --config /tmp/missing_config_file.cfg") == 2);
    CHECK(run_cli("--bogus-flag") == 2);
    CHECK(run_cli("memstats /tmp/not_a_run_dir_at_all") == 2);

    std::ofstream bad("/tmp/revrnn_bad.cfg");
    bad << "task = repeat\nnonsense_key = 1\n";
    bad.close();
    CHECK(run_cli("train --config /tmp/revrnn_bad.cfg") == 2);
    fs::remove("/tmp/revrnn_bad.cfg");

    CHECK(run_cli("train --task repeat --cell revgru --hidden 8 -T 6 --vocab 4 --steps 5 "
                  "--batch 4 --log-every 5 --out /tmp/revrnn_cli_smoke") == 0);
    CHECK(run_cli("memstats /tmp/revrnn_cli_smoke") == 0);
    fs::remove_all("/tmp/revrnn_cli_smoke");
}
