// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "revrnn/attention.hpp"
#include "revrnn/tasks.hpp"

namespace revrnn {

// ---------------------------------------------------------------------------
// Run configuration: key = value text files plus command-line overrides. A
// config plus seed fully determines a run.
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string task = "repeat";  // repeat | memorize | char_lm | translate
    int T = 20;
    int V = 8;
    int hidden = 16;
    std::string cell = "revgru";
    std::string bits_limit = "none";  // 1|2|3|5|none -> forget floor 2^-bits
    uint64_t seed = 1;
    int steps = 1000;
    int batch = 64;

    std::string corpus;    // char_lm input file
    std::string state_in;  // optional mid-sequence state snapshot to resume from
    std::string attention = "emb+slice:4";
    int rh = kDefaultHiddenBits;
    int rz = kDefaultGateBits;
    int emb = 0;  // embedding dim, 0 = one-hot input
    double lr = 1e-3;
    std::string optimizer = "adam";
    double clip = 0.0;   // global-norm clip, 0 = off
    int log_every = 1;   // CSV row cadence; 1 = every iteration

    double forget_floor() const {
        if (bits_limit == "none" || bits_limit.empty()) return 0.0;
        int bits = std::stoi(bits_limit);
        if (bits < 1 || bits > 20) throw std::invalid_argument("bits_limit outside 1..20");
        return std::exp2(-(double)bits);
    }
};

namespace detail {

inline bool parse_kv_line(const std::string& line, std::string& key, std::string& value) {
    std::string s = line;
    size_t hash = s.find('#');
    if (hash != std::string::npos) s = s.substr(0, hash);
    auto trim = [](std::string t) {
        size_t a = t.find_first_not_of(" \t\r");
        size_t b = t.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : t.substr(a, b - a + 1);
    };
    s = trim(s);
    if (s.empty()) return false;
    size_t eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("missing '='");
    key = trim(s.substr(0, eq));
    value = trim(s.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("empty key");
    return true;
}

}  // namespace detail

// Applies one key = value setting. Unknown keys are errors.
inline void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "task") cfg.task = value;
        else if (key == "T") cfg.T = std::stoi(value);
        else if (key == "V") cfg.V = std::stoi(value);
        else if (key == "hidden") cfg.hidden = std::stoi(value);
        else if (key == "cell") cfg.cell = value;
        else if (key == "bits_limit") cfg.bits_limit = value;
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "steps") cfg.steps = std::stoi(value);
        else if (key == "batch") cfg.batch = std::stoi(value);
        else if (key == "corpus") cfg.corpus = value;
        else if (key == "state_in") cfg.state_in = value;
        else if (key == "attention") cfg.attention = value;
        else if (key == "rh") cfg.rh = std::stoi(value);
        else if (key == "rz") cfg.rz = std::stoi(value);
        else if (key == "emb") cfg.emb = std::stoi(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "optimizer") cfg.optimizer = value;
        else if (key == "clip") cfg.clip = std::stod(value);
        else if (key == "log_every") cfg.log_every = std::stoi(value);
        else throw std::invalid_argument("unknown key '" + key + "'");
    } catch (const std::invalid_argument& e) {
        throw;
    } catch (...) {
        throw std::invalid_argument("bad value '" + value + "' for key '" + key + "'");
    }
}

inline RunConfig parse_run_config(std::istream& in, const std::string& filename) {
    RunConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string key, value;
        try {
            if (!detail::parse_kv_line(line, key, value)) continue;
            apply_config_kv(cfg, key, value);
        } catch (const std::exception& e) {
            throw std::invalid_argument(filename + ":" + std::to_string(line_no) + ": " +
                                        e.what());
        }
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file '" + path + "'");
    return parse_run_config(f, path);
}

inline std::string canonical_config_text(const RunConfig& c) {
    std::ostringstream os;
    os << "task = " << c.task << "\n";
    os << "T = " << c.T << "\n";
    os << "V = " << c.V << "\n";
    os << "hidden = " << c.hidden << "\n";
    os << "cell = " << c.cell << "\n";
    os << "bits_limit = " << c.bits_limit << "\n";
    os << "seed = " << c.seed << "\n";
    os << "steps = " << c.steps << "\n";
    os << "batch = " << c.batch << "\n";
    os << "corpus = " << c.corpus << "\n";
    os << "state_in = " << c.state_in << "\n";
    os << "attention = " << c.attention << "\n";
    os << "rh = " << c.rh << "\n";
    os << "rz = " << c.rz << "\n";
    os << "emb = " << c.emb << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", c.lr);
    os << "lr = " << buf << "\n";
    os << "optimizer = " << c.optimizer << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", c.clip);
    os << "clip = " << buf << "\n";
    os << "log_every = " << c.log_every << "\n";
    return os.str();
}

inline std::string config_hash_hex(const RunConfig& c) {
    // FNV-1a 64
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : canonical_config_text(c)) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
    return buf;
}

// ---------------------------------------------------------------------------
// Model construction from a config.
// ---------------------------------------------------------------------------

inline CellConfig cell_config_from(const RunConfig& cfg, int input_dim) {
    CellConfig c;
    c.kind = cell_from_name(cfg.cell);
    c.input_dim = input_dim;  // set by Model::make when 0
    c.hidden = cfg.hidden;
    c.rh = cfg.rh;
    c.rz = cfg.rz;
    c.forget_floor = cfg.forget_floor();
    return c;
}

inline Model model_from_config(const RunConfig& cfg, std::mt19937_64& rng) {
    int vocab = cfg.task == "char_lm" ? 256 : cfg.V;
    bool marker = cfg.task == "memorize";
    bool learned = cfg.emb > 0;
    return Model::make(cell_config_from(cfg, 0), vocab, vocab, marker, learned, cfg.emb, rng);
}

// ---------------------------------------------------------------------------
// Model checkpoints.
// ---------------------------------------------------------------------------

inline void save_model(std::ostream& os, const Model& m) {
    os.write("RVMD", 4);
    detail::write_u32(os, (uint32_t)m.vocab);
    detail::write_u32(os, m.marker_channel ? 1 : 0);
    save_cell_params(os, m.cell);
    save_mat(os, m.emb);
    save_mat(os, m.head);
}

inline Model load_model(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RVMD")
        throw std::runtime_error("model checkpoint: bad magic");
    Model m;
    m.vocab = (int)detail::read_u32(is);
    m.marker_channel = detail::read_u32(is) != 0;
    m.cell = load_cell_params(is);
    m.emb = load_mat(is);
    m.head = load_mat(is);
    return m;
}

inline void save_seq2seq(std::ostream& os, const Seq2SeqModel& m) {
    os.write("RVS2", 4);
    detail::write_u32(os, (uint32_t)m.vocab);
    detail::write_u32(os, (uint32_t)m.mode);
    detail::write_u32(os, (uint32_t)m.k);
    save_model(os, m.enc);
    save_model(os, m.dec);
    save_mat(os, m.att.Wa);
    save_mat(os, m.att.Wc);
    save_mat(os, m.att.Ws);
}

inline Seq2SeqModel load_seq2seq(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RVS2")
        throw std::runtime_error("seq2seq checkpoint: bad magic");
    Seq2SeqModel m;
    m.vocab = (int)detail::read_u32(is);
    m.mode = (AttentionMode)detail::read_u32(is);
    m.k = (int)detail::read_u32(is);
    m.enc = load_model(is);
    m.dec = load_model(is);
    m.att.Wa = load_mat(is);
    m.att.Wc = load_mat(is);
    m.att.Ws = load_mat(is);
    return m;
}

// ---------------------------------------------------------------------------
// Training driver. One CSV row per logged iteration:
// step,loss,tokens_correct,measured_bits,ideal_bits,savings_ratio,wall_ms
// loss is per scored token; tokens_correct is mean per sequence. wall_ms is
// the only nondeterministic column.
// ---------------------------------------------------------------------------

struct RunSummary {
    double final_loss = 0.0;           // per token
    double final_tokens_correct = 0.0; // per sequence
    double mean_savings = 0.0;
    double final_savings = 0.0;
    uint64_t final_measured_bits = 0;
    double final_ideal_bits = 0.0;
    double eval_metric = 0.0;  // task-specific: eval ppl (char_lm), accuracy (translate)
    int rows = 0;
};

namespace detail {

inline std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

struct CsvLogger {
    std::ofstream out;
    std::chrono::steady_clock::time_point start;
    int rows = 0;

    explicit CsvLogger(const std::string& path) : start(std::chrono::steady_clock::now()) {
        out.open(path);
        if (!out) throw std::runtime_error("cannot open log file '" + path + "'");
        out << "step,loss,tokens_correct,measured_bits,ideal_bits,savings_ratio,wall_ms\n";
    }

    void row(int step, double loss, double correct, uint64_t measured, double ideal,
             double savings) {
        auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - start)
                      .count();
        out << step << ',' << format_double(loss) << ',' << format_double(correct) << ','
            << measured << ',' << format_double(ideal) << ',' << format_double(savings) << ','
            << ms << '\n';
        ++rows;
    }
};

}  // namespace detail

// Trains per config and fills the run directory with config.txt, params.bin
// and log.csv. Returns the summary (also written as summary.json).
inline RunSummary train_run(const RunConfig& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream c(out_dir + "/config.txt");
        c << canonical_config_text(cfg);
    }
    detail::CsvLogger log(out_dir + "/log.csv");
    std::mt19937_64 rng(cfg.seed);
    RunSummary sum;
    double savings_sum = 0.0;
    int savings_rows = 0;

    auto log_row = [&](int step, double loss_tok, double correct, uint64_t measured, double ideal,
                       double savings) {
        log.row(step, loss_tok, correct, measured, ideal, savings);
        if (std::isfinite(savings)) {
            savings_sum += savings;
            ++savings_rows;
        }
        sum.final_loss = loss_tok;
        sum.final_tokens_correct = correct;
        sum.final_measured_bits = measured;
        sum.final_ideal_bits = ideal;
        sum.final_savings = savings;
    };

    if (cfg.task == "translate") {
        int k = 0;
        AttentionMode mode = attention_from_name(cfg.attention, k);
        int emb_dim = cfg.emb > 0 ? cfg.emb : 8;
        Seq2SeqModel M = Seq2SeqModel::make(cell_from_name(cfg.cell), cfg.V, emb_dim, cfg.hidden,
                                            mode, k, rng, cfg.forget_floor(), cfg.rh, cfg.rz);
        if (!is_reversible(M.enc.cell.cfg.kind))
            throw std::invalid_argument("translate task requires a reversible cell");
        Seq2SeqGrads G = Seq2SeqGrads::like(M);
        AdamState adam = AdamState::like_mats(G.mats(M));
        ParallelCorpus corpus = toy_translation(4096, cfg.T, cfg.V, cfg.seed + 1);
        // Bucket by length so batches need no padding.
        std::map<int, std::vector<int>> buckets;
        for (size_t i = 0; i < corpus.src.size(); ++i)
            buckets[(int)corpus.src[i].size()].push_back((int)i);
        std::vector<int> lengths;
        for (auto& [len, v] : buckets) lengths.push_back(len);

        for (int step = 1; step <= cfg.steps; ++step) {
            int L = lengths[rng() % lengths.size()];
            const auto& pool = buckets[L];
            int B = std::min<int>(cfg.batch, (int)pool.size());
            std::vector<int> src((size_t)L * B), tgt((size_t)L * B);
            for (int n = 0; n < B; ++n) {
                int idx = pool[rng() % pool.size()];
                for (int t = 0; t < L; ++t) {
                    src[(size_t)t * B + n] = corpus.src[idx][t];
                    tgt[(size_t)t * B + n] = corpus.tgt[idx][t];
                }
            }
            G.zero();
            Seq2SeqStats st = seq2seq_pass(M, src, tgt, L, B, &G);
            if (cfg.clip > 0) clip_global_norm_mats(G.mats(M), cfg.clip);
            if (cfg.optimizer == "sgd")
                sgd_step_mats(M.mats(), G.mats(M), cfg.lr);
            else
                adam_step_mats(M.mats(), G.mats(M), adam, cfg.lr);

            if (step % cfg.log_every == 0 || step == cfg.steps) {
                uint64_t measured = st.enc_buffer_bits + st.dec_buffer_bits;
                double ideal = st.enc_ideal_bits + st.dec_ideal_bits;
                double naive = 32.0 * L * B *
                               (M.enc.cell.cfg.kind == CellKind::RevLSTM ? 4.0 : 2.0) *
                               M.enc.cell.cfg.group_dim() * 2.0;
                double savings = measured == 0 ? std::numeric_limits<double>::infinity()
                                               : naive / (double)measured;
                log_row(step, st.loss / st.scored, st.correct / B, measured, ideal, savings);
            }
        }
        // Teacher-forced token accuracy on held-out samples.
        double acc_correct = 0, acc_total = 0;
        for (int rep = 0; rep < 20; ++rep) {
            int L = lengths[rng() % lengths.size()];
            const auto& pool = buckets[L];
            int B = std::min<int>(64, (int)pool.size());
            std::vector<int> src((size_t)L * B), tgt((size_t)L * B);
            for (int n = 0; n < B; ++n) {
                int idx = pool[rng() % pool.size()];
                for (int t = 0; t < L; ++t) {
                    src[(size_t)t * B + n] = corpus.src[idx][t];
                    tgt[(size_t)t * B + n] = corpus.tgt[idx][t];
                }
            }
            Seq2SeqStats st = seq2seq_pass(M, src, tgt, L, B, nullptr);
            acc_correct += st.correct;
            acc_total += (double)L * B;
        }
        sum.eval_metric = acc_correct / acc_total;
        std::ofstream pb(out_dir + "/params.bin", std::ios::binary);
        save_seq2seq(pb, M);
    } else {
        Model M = model_from_config(cfg, rng);
        ModelGrads G = ModelGrads::like(M);
        AdamState adam = AdamState::like(M, G);
        const bool reversible = is_reversible(M.cell.cfg.kind);

        ByteCorpus corpus, train_slice;
        std::unique_ptr<CharLmStream> stream;
        size_t train_limit = 0;
        if (cfg.task == "char_lm") {
            if (cfg.corpus.empty())
                throw std::invalid_argument("char_lm task needs a corpus file (corpus = PATH)");
            corpus = char_lm_corpus(cfg.corpus);
            train_limit = corpus.bytes.size() * 9 / 10;
            train_slice.bytes.assign(corpus.bytes.begin(), corpus.bytes.begin() + train_limit);
            stream = std::make_unique<CharLmStream>(train_slice, cfg.batch, cfg.T);
        }

        RevState carried;
        BaseState carried_base;
        bool have_carried = false;
        bool carried_has_buffers = false;
        if (!cfg.state_in.empty() && reversible) {
            std::ifstream sf(cfg.state_in, std::ios::binary);
            if (!sf) throw std::invalid_argument("cannot open state snapshot '" + cfg.state_in + "'");
            carried = load_rev_state(sf);
            if (carried.batch != cfg.batch || carried.group_dim != M.cell.cfg.group_dim())
                throw std::invalid_argument("state snapshot dims do not match the run config");
            have_carried = true;
            carried_has_buffers = true;
        }

        for (int step = 1; step <= cfg.steps; ++step) {
            SequenceBatch b;
            if (cfg.task == "repeat")
                b = gen_repeat(cfg.batch, cfg.T, cfg.V, cfg.seed + step);
            else if (cfg.task == "memorize")
                b = gen_memorize(cfg.batch, cfg.T, cfg.V, cfg.seed + step);
            else if (cfg.task == "char_lm")
                b = stream->next();
            else
                throw std::invalid_argument("unknown task '" + cfg.task + "'");

            G.zero();
            double loss = 0, correct = 0;
            uint64_t measured = 0;
            double ideal = 0, savings = 1.0;

            if (reversible) {
                RevState init = RevState::zeros(M.cell.cfg, b.batch);
                if (cfg.task == "char_lm" && have_carried) {
                    if (carried_has_buffers) {
                        init = carried;  // restored snapshot, buffers included
                        carried_has_buffers = false;
                    } else {
                        init.h1 = carried.h1;
                        init.h2 = carried.h2;
                        init.c1 = carried.c1;
                        init.c2 = carried.c2;
                    }
                }
                Tape tape = run_forward<BufferTensor>(M, b.tokens, b.markers, b.T, b.batch, &init);
                measured = tape.final_state.buffer_bits();
                ideal = tape.final_state.ideal_buffer_bits();
                savings = savings_ratio(b.T, tape.final_state.total_state_units(), b.batch,
                                        measured);
                if (cfg.task == "char_lm") {
                    carried = tape.final_state;  // values only; buffers reset next window
                    have_carried = true;
                }
                auto stats = reversible_backward(M, tape, make_ce_hook(M, b.targets, b.batch, &G), G);
                loss = stats.loss;
                correct = stats.correct;
            } else {
                const BaseState* init =
                    (cfg.task == "char_lm" && have_carried) ? &carried_base : nullptr;
                BaseRun run =
                    base_train_pass(M, b.tokens, b.markers, b.targets, b.T, b.batch, &G, init);
                if (cfg.task == "char_lm") {
                    carried_base = run.traj.back();
                    have_carried = true;
                }
                loss = run.loss;
                correct = run.correct;
                measured = run.stored_bits(M.cell.cfg, b.T, b.batch);
                ideal = 0.0;
                savings = 1.0;
            }

            if (cfg.clip > 0) clip_global_norm(M, G, cfg.clip);
            if (cfg.optimizer == "sgd")
                sgd_step(M, G, cfg.lr);
            else
                adam_step(M, G, adam, cfg.lr);

            if (step % cfg.log_every == 0 || step == cfg.steps) {
                int scored = std::max(1, b.scored_per_seq);
                log_row(step, loss / scored, correct / b.batch, measured, ideal, savings);
            }
        }

        if (cfg.task == "char_lm" && is_reversible(M.cell.cfg.kind) && have_carried) {
            // Mid-sequence snapshot: the carried state with the final
            // window's buffers, reloadable via the state_in config key.
            std::ofstream sf(out_dir + "/state.bin", std::ios::binary);
            save_rev_state(sf, carried);
        }
        if (cfg.task == "char_lm") {
            // Held-out perplexity on the final 10% of the corpus.
            ByteCorpus eval_part;
            eval_part.bytes.assign(corpus.bytes.begin() + train_limit, corpus.bytes.end());
            CharLmStream eval_stream(eval_part, cfg.batch, cfg.T);
            uint64_t eval_batches =
                std::max<uint64_t>(1, batches_per_epoch(eval_part.bytes.size(), cfg.batch, cfg.T));
            double eloss = 0.0;
            uint64_t etokens = 0;
            for (uint64_t i = 0; i < eval_batches; ++i) {
                SequenceBatch eb = eval_stream.next();
                ScoreResult r = score_batch(M, eb);
                eloss += r.loss;
                etokens += (uint64_t)r.scored_steps;
            }
            sum.eval_metric = std::exp(eloss / (double)etokens);
        } else {
            auto gen = [&](int batch, uint64_t seed) {
                return cfg.task == "memorize" ? gen_memorize(batch, cfg.T, cfg.V, seed)
                                              : gen_repeat(batch, cfg.T, cfg.V, seed);
            };
            sum.eval_metric = evaluate_tokens_correct(M, gen, 2000, cfg.seed + 1000003);
        }
        std::ofstream pb(out_dir + "/params.bin", std::ios::binary);
        save_model(pb, M);
    }

    sum.mean_savings = savings_rows ? savings_sum / savings_rows
                                    : std::numeric_limits<double>::infinity();
    sum.rows = log.rows;
    {
        std::ofstream sj(out_dir + "/summary.json");
        sj << "{\n"
           << "  \"config_hash\": \"" << config_hash_hex(cfg) << "\",\n"
           << "  \"final_loss_per_token\": " << detail::format_double(sum.final_loss) << ",\n"
           << "  \"final_tokens_correct\": " << detail::format_double(sum.final_tokens_correct)
           << ",\n"
           << "  \"mean_savings_ratio\": " << (std::isfinite(sum.mean_savings)
                                                   ? detail::format_double(sum.mean_savings)
                                                   : "\"inf\"")
           << ",\n"
           << "  \"eval_metric\": " << detail::format_double(sum.eval_metric) << "\n"
           << "}\n";
    }
    return sum;
}

// ---------------------------------------------------------------------------
// Memory-statistics report over a completed run directory.
// ---------------------------------------------------------------------------

struct MemStats {
    std::string config_hash;
    int rows = 0;
    double mean_savings = 0.0, final_savings = 0.0, min_savings = 0.0, max_savings = 0.0;
    uint64_t final_measured_bits = 0;
    double final_ideal_bits = 0.0;
    bool any_infinite = false;
};

inline MemStats memstats_from_run(const std::string& run_dir) {
    RunConfig cfg = load_run_config(run_dir + "/config.txt");
    std::ifstream f(run_dir + "/log.csv");
    if (!f) throw std::runtime_error("cannot open '" + run_dir + "/log.csv'");
    MemStats ms;
    ms.config_hash = config_hash_hex(cfg);
    std::string line;
    std::getline(f, line);  // header
    double sum = 0.0;
    int finite_rows = 0;
    bool first = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 7) throw std::runtime_error("malformed log row: " + line);
        double savings = fields[5] == "inf" ? std::numeric_limits<double>::infinity()
                                            : std::stod(fields[5]);
        ms.final_measured_bits = (uint64_t)std::stoull(fields[3]);
        ms.final_ideal_bits = std::stod(fields[4]);
        ms.final_savings = savings;
        if (std::isinf(savings)) {
            ms.any_infinite = true;
        } else {
            sum += savings;
            ++finite_rows;
            if (first || savings < ms.min_savings) ms.min_savings = savings;
            if (first || savings > ms.max_savings) ms.max_savings = savings;
            first = false;
        }
        ++ms.rows;
    }
    ms.mean_savings = finite_rows ? sum / finite_rows : std::numeric_limits<double>::infinity();
    return ms;
}

}  // namespace revrnn
