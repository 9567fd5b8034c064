// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "revrnn/basecells.hpp"
#include "revrnn/revgrad.hpp"

namespace revrnn {

// ---------------------------------------------------------------------------
// Synthetic sequence tasks.
// ---------------------------------------------------------------------------

struct SequenceBatch {
    int batch = 0, T = 0, vocab = 0;
    std::vector<int> tokens;       // T x batch; < 0 means no token input
    std::vector<int> targets;      // T x batch; < 0 means unscored
    std::vector<uint8_t> markers;  // T x batch end-of-input flags, may be empty
    int scored_per_seq = 0;
};

// Repeat: the model re-emits each token at the following step, so the target
// at step t is the token consumed at step t.
inline SequenceBatch gen_repeat(int batch, int T, int V, uint64_t seed) {
    SequenceBatch b;
    b.batch = batch;
    b.T = T;
    b.vocab = V;
    b.scored_per_seq = T;
    b.tokens.resize((size_t)T * batch);
    std::mt19937_64 rng(seed);
    for (auto& t : b.tokens) t = (int)(rng() % V);
    b.targets = b.tokens;
    return b;
}

// Memorization: T input tokens (marker 0), then T output steps (marker 1, no
// token input) during which the model must emit the inputs reversed.
inline SequenceBatch gen_memorize(int batch, int T, int V, uint64_t seed) {
    SequenceBatch b;
    b.batch = batch;
    b.T = 2 * T;
    b.vocab = V;
    b.scored_per_seq = T;
    b.tokens.assign((size_t)b.T * batch, -1);
    b.targets.assign((size_t)b.T * batch, -1);
    b.markers.assign((size_t)b.T * batch, 0);
    std::mt19937_64 rng(seed);
    for (int t = 0; t < T; ++t)
        for (int n = 0; n < batch; ++n) b.tokens[(size_t)t * batch + n] = (int)(rng() % V);
    for (int t = T; t < 2 * T; ++t)
        for (int n = 0; n < batch; ++n) {
            b.markers[(size_t)t * batch + n] = 1;
            b.targets[(size_t)t * batch + n] = b.tokens[(size_t)(2 * T - 1 - t) * batch + n];
        }
    return b;
}

// ---------------------------------------------------------------------------
// Scoring.
// ---------------------------------------------------------------------------

struct ScoreResult {
    double loss = 0.0;     // mean over batch, summed over scored steps
    double correct = 0.0;  // total correct predictions across the batch
    int scored_steps = 0;  // scored (t, n) pairs

    double loss_per_token() const { return scored_steps ? loss / ((double)scored_steps) : 0.0; }
    double perplexity() const { return std::exp(loss_per_token()); }
};

// Forward-only scoring of a model on a batch; no gradients, no tape kept.
inline ScoreResult score_batch(const Model& M, const SequenceBatch& b) {
    const CellConfig& cfg = M.cell.cfg;
    const int E = cfg.input_dim;
    ScoreResult r;
    std::vector<double> x((size_t)b.batch * E), logits;

    int scored = 0;
    for (int i = 0; i < b.T * b.batch; ++i)
        if (b.targets[i] >= 0) ++scored;
    r.scored_steps = scored / b.batch;

    if (is_reversible(cfg.kind)) {
        RevState s = RevState::zeros(cfg, b.batch);
        const int Hg = cfg.group_dim();
        std::vector<double> state((size_t)b.batch * 2 * Hg);
        const double scale = std::exp2(-cfg.rh);
        for (int t = 0; t < b.T; ++t) {
            for (int n = 0; n < b.batch; ++n)
                M.build_input(b.tokens[(size_t)t * b.batch + n],
                              !b.markers.empty() && b.markers[(size_t)t * b.batch + n],
                              x.data() + (size_t)n * E);
            cell_forward(M.cell, x.data(), s);
            for (int n = 0; n < b.batch; ++n)
                for (int j = 0; j < Hg; ++j) {
                    state[(size_t)n * 2 * Hg + j] = s.h1[(size_t)n * Hg + j] * scale;
                    state[(size_t)n * 2 * Hg + Hg + j] = s.h2[(size_t)n * Hg + j] * scale;
                }
            head_loss_grad(M.head, state.data(), b.batch, b.targets.data() + (size_t)t * b.batch,
                           1.0 / b.batch, nullptr, nullptr, r.loss, r.correct, logits);
        }
    } else {
        BaseState s = BaseState::zeros(cfg, b.batch);
        for (int t = 0; t < b.T; ++t) {
            for (int n = 0; n < b.batch; ++n)
                M.build_input(b.tokens[(size_t)t * b.batch + n],
                              !b.markers.empty() && b.markers[(size_t)t * b.batch + n],
                              x.data() + (size_t)n * E);
            base_forward_step(M.cell, x.data(), s, b.batch);
            head_loss_grad(M.head, s.h.data(), b.batch, b.targets.data() + (size_t)t * b.batch,
                           1.0 / b.batch, nullptr, nullptr, r.loss, r.correct, logits);
        }
    }
    return r;
}

// Mean correct tokens per sequence over n_eval freshly generated sequences.
template <class Gen>
double evaluate_tokens_correct(const Model& M, Gen&& generate, int n_eval = 10000,
                               uint64_t seed = 1, int eval_batch = 500) {
    double correct = 0.0;
    int done = 0;
    uint64_t s = seed;
    while (done < n_eval) {
        int b = std::min(eval_batch, n_eval - done);
        SequenceBatch batch = generate(b, s++);
        correct += score_batch(M, batch).correct;
        done += b;
    }
    return correct / n_eval;
}

// Bits stored per hidden unit, after subtracting out chance accuracy:
// (correct - T/V) * log2(V) / units.
inline double bits_per_unit(double correct_tokens, int T_scored, int V, int units) {
    return (correct_tokens - (double)T_scored / V) * std::log2((double)V) / units;
}

// ---------------------------------------------------------------------------
// Byte-level language-modeling corpus with contiguous TBPTT batching.
// ---------------------------------------------------------------------------

struct ByteCorpus {
    std::vector<uint8_t> bytes;
};

inline ByteCorpus char_lm_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("char_lm_corpus: cannot open '" + path + "'");
    ByteCorpus c;
    f.seekg(0, std::ios::end);
    std::streamoff len = f.tellg();
    f.seekg(0);
    c.bytes.resize((size_t)len);
    if (len > 0) f.read((char*)c.bytes.data(), len);
    if (!f) throw std::runtime_error("char_lm_corpus: short read from '" + path + "'");
    return c;
}

inline uint64_t batches_per_epoch(size_t corpus_bytes, int batch, int T) {
    return (uint64_t)(corpus_bytes / ((size_t)batch * T));
}

// Contiguous streams: stream n reads from offset n * (len / batch), windows
// advance T bytes, predicting the next byte at every position.
struct CharLmStream {
    const ByteCorpus* corpus;
    int batch, T;
    std::vector<size_t> cursor;

    CharLmStream(const ByteCorpus& c, int batch_, int T_) : corpus(&c), batch(batch_), T(T_) {
        if (c.bytes.size() < (size_t)batch * (T + 1))
            throw std::runtime_error("char corpus too small for requested batch/T");
        size_t stride = c.bytes.size() / batch;
        cursor.resize(batch);
        for (int n = 0; n < batch; ++n) cursor[n] = (size_t)n * stride;
    }

    SequenceBatch next() {
        SequenceBatch b;
        b.batch = batch;
        b.T = T;
        b.vocab = 256;
        b.scored_per_seq = T;
        b.tokens.resize((size_t)T * batch);
        b.targets.resize((size_t)T * batch);
        const auto& bytes = corpus->bytes;
        for (int n = 0; n < batch; ++n) {
            if (cursor[n] + T + 1 >= bytes.size()) cursor[n] = 0;
            for (int t = 0; t < T; ++t) {
                b.tokens[(size_t)t * batch + n] = bytes[cursor[n] + t];
                b.targets[(size_t)t * batch + n] = bytes[cursor[n] + t + 1];
            }
            cursor[n] += T;
        }
        return b;
    }
};

// Deterministic word-salad text, used as a self-contained LM corpus.
inline void write_synthetic_corpus(const std::string& path, size_t n_bytes, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::string> words;
    const char* letters = "etaoinshrdlucmfwypvbg";
    int n_letters = (int)std::strlen(letters);
    for (int i = 0; i < 64; ++i) {
        int len = 2 + (int)(rng() % 7);
        std::string w;
        for (int j = 0; j < len; ++j) w += letters[rng() % n_letters];
        words.push_back(w);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_synthetic_corpus: cannot open '" + path + "'");
    size_t written = 0;
    while (written < n_bytes) {
        int sentence_len = 3 + (int)(rng() % 9);
        std::string sentence;
        for (int i = 0; i < sentence_len; ++i) {
            // Zipf-ish skew: low indices dominate.
            size_t r = rng() % (words.size() * words.size());
            size_t idx = (size_t)(std::sqrt((double)r));
            sentence += words[words.size() - 1 - idx];
            sentence += (i + 1 == sentence_len) ? ". " : " ";
        }
        if (rng() % 4 == 0) sentence += '\n';
        f.write(sentence.data(), (std::streamsize)sentence.size());
        written += sentence.size();
    }
}

// ---------------------------------------------------------------------------
// Toy translation: source strings of random tokens, target = reversed source.
// Content-blind positional attention cannot solve this; the decoder must
// attend into the encoder annotations.
// ---------------------------------------------------------------------------

struct ParallelCorpus {
    int vocab = 0;
    std::vector<std::vector<int>> src, tgt;
};

inline ParallelCorpus toy_translation(int n, int max_len, int vocab, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("toy_translation: n must be >= 1");
    ParallelCorpus c;
    c.vocab = vocab;
    std::mt19937_64 rng(seed);
    for (int i = 0; i < n; ++i) {
        int len = 2 + (int)(rng() % (max_len - 1));
        std::vector<int> s(len);
        for (auto& t : s) t = (int)(rng() % vocab);
        std::vector<int> r(s.rbegin(), s.rend());
        c.src.push_back(std::move(s));
        c.tgt.push_back(std::move(r));
    }
    return c;
}

// One tab-separated pair per line, whitespace-tokenized.
inline void save_parallel_corpus(const std::string& path, const ParallelCorpus& c,
                                 const std::vector<std::string>& vocab_names) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_parallel_corpus: cannot open '" + path + "'");
    for (size_t i = 0; i < c.src.size(); ++i) {
        for (size_t j = 0; j < c.src[i].size(); ++j)
            f << (j ? " " : "") << vocab_names[c.src[i][j]];
        f << '\t';
        for (size_t j = 0; j < c.tgt[i].size(); ++j)
            f << (j ? " " : "") << vocab_names[c.tgt[i][j]];
        f << '\n';
    }
}

inline void save_vocab(const std::string& path, const std::vector<std::string>& names) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_vocab: cannot open '" + path + "'");
    for (const auto& n : names) f << n << '\n';
}

inline std::vector<std::string> load_vocab(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_vocab: cannot open '" + path + "'");
    std::vector<std::string> names;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) names.push_back(line);
    return names;
}

inline ParallelCorpus load_parallel_corpus(const std::string& path,
                                           const std::vector<std::string>& vocab_names) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_parallel_corpus: cannot open '" + path + "'");
    ParallelCorpus c;
    c.vocab = (int)vocab_names.size();
    auto index_of = [&](const std::string& tok, int line_no) {
        for (size_t i = 0; i < vocab_names.size(); ++i)
            if (vocab_names[i] == tok) return (int)i;
        throw std::runtime_error("load_parallel_corpus: unknown token '" + tok + "' at " + path +
                                 ":" + std::to_string(line_no));
    };
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("load_parallel_corpus: missing tab at " + path + ":" +
                                     std::to_string(line_no));
        auto tokenize = [&](const std::string& part) {
            std::vector<int> out;
            std::istringstream ss(part);
            std::string tok;
            while (ss >> tok) out.push_back(index_of(tok, line_no));
            return out;
        };
        c.src.push_back(tokenize(line.substr(0, tab)));
        c.tgt.push_back(tokenize(line.substr(tab + 1)));
    }
    return c;
}

}  // namespace revrnn
