// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "revrnn/attention.hpp"
#include "revrnn/tasks.hpp"

using namespace revrnn;

namespace {

// Direct-summation oracle in long double, independent loop order.
void oracle_attention(const std::vector<double>& dec, const std::vector<std::vector<double>>& ann,
                      const AttentionParams& P, std::vector<double>& hidden,
                      std::vector<double>& weights) {
    const int T = (int)ann.size(), A = P.Wa.cols, D = (int)dec.size();
    std::vector<long double> scores(T, 0.0L);
    for (int j = 0; j < T; ++j)
        for (int d = 0; d < D; ++d)
            for (int a = 0; a < A; ++a)
                scores[j] += (long double)dec[d] * (long double)P.Wa(d, a) * (long double)ann[j][a];
    long double mx = scores[0];
    for (int j = 1; j < T; ++j) mx = std::max(mx, scores[j]);
    long double sum = 0.0L;
    std::vector<long double> alpha(T);
    for (int j = 0; j < T; ++j) {
        alpha[j] = expl(scores[j] - mx);
        sum += alpha[j];
    }
    weights.resize(T);
    for (int j = 0; j < T; ++j) weights[j] = (double)(alpha[j] / sum);

    std::vector<long double> cat((size_t)A + D, 0.0L);
    for (int a = 0; a < A; ++a)
        for (int j = 0; j < T; ++j) cat[a] += (alpha[j] / sum) * (long double)ann[j][a];
    for (int d = 0; d < D; ++d) cat[A + d] = dec[d];
    hidden.resize(P.Wc.rows);
    for (int r = 0; r < P.Wc.rows; ++r) {
        long double s = 0.0L;
        for (int c = 0; c < P.Wc.cols; ++c) s += (long double)P.Wc(r, c) * cat[c];
        hidden[r] = (double)tanhl(s);
    }
}

}  // namespace

TEST_CASE("attention over a single position is a passthrough") {
    std::mt19937_64 rng(1);
    AttentionParams P = AttentionParams::init(4, 3, 4, 5, rng);
    std::vector<double> dec{0.5, -0.2, 0.1, 0.9};
    std::vector<std::vector<double>> ann{{1.0, 2.0, -1.0}};
    std::vector<double> hidden, w;
    attention_step(dec.data(), 4, ann, P, hidden, w);
    REQUIRE(w.size() == 1);
    CHECK(w[0] == 1.0);
    // context = s1 exactly; verify the combiner input
    std::vector<double> cat{1.0, 2.0, -1.0, 0.5, -0.2, 0.1, 0.9};
    for (int r = 0; r < P.Wc.rows; ++r) {
        double s = 0;
        for (int c = 0; c < P.Wc.cols; ++c) s += P.Wc(r, c) * cat[c];
        CHECK(hidden[r] == doctest::Approx(std::tanh(s)).epsilon(1e-15));
    }
}

TEST_CASE("identical annotations give uniform weights") {
    std::mt19937_64 rng(2);
    AttentionParams P = AttentionParams::init(4, 3, 4, 5, rng);
    std::vector<double> dec{1.0, 2.0, -0.5, 0.25};
    std::vector<std::vector<double>> ann(5, {0.3, -0.7, 1.1});
    std::vector<double> hidden, w;
    attention_step(dec.data(), 4, ann, P, hidden, w);
    for (double v : w) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("attention matches the direct-summation oracle to 1e-12") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> dist(-1.5, 1.5);
    for (int rep = 0; rep < 50; ++rep) {
        AttentionParams P = AttentionParams::init(6, 6, 6, 5, rng);
        std::vector<double> dec(6);
        for (auto& v : dec) v = dist(rng);
        std::vector<std::vector<double>> ann(4, std::vector<double>(6));
        for (auto& row : ann)
            for (auto& v : row) v = dist(rng);
        std::vector<double> hidden, w, oh, ow;
        attention_step(dec.data(), 6, ann, P, hidden, w);
        oracle_attention(dec, ann, P, oh, ow);
        double sum = 0.0;
        for (int j = 0; j < 4; ++j) {
            CHECK(std::abs(w[j] - ow[j]) <= 1e-12);
            CHECK(w[j] >= 0.0);
            sum += w[j];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
        for (size_t c = 0; c < hidden.size(); ++c) CHECK(std::abs(hidden[c] - oh[c]) <= 1e-12);
    }
}

TEST_CASE("annotation modes have the documented dimensions") {
    int k = 0;
    CHECK(attention_from_name("emb", k) == AttentionMode::Emb);
    CHECK(attention_from_name("slice:20", k) == AttentionMode::SliceK);
    CHECK(k == 20);
    CHECK(attention_from_name("emb+slice:20", k) == AttentionMode::EmbPlusSliceK);
    CHECK(attention_from_name("full", k) == AttentionMode::Full);
    CHECK_THROWS_AS(attention_from_name("embx", k), std::invalid_argument);
    CHECK_THROWS_AS(attention_from_name("slice:zero", k), std::invalid_argument);

    // Emb+20H at a 300-dim embedding: 320-dim annotations.
    CHECK(attention_slice_dims(AttentionMode::EmbPlusSliceK, 20, 600) + 300 == 320);
    CHECK(attention_slice_dims(AttentionMode::Full, 0, 600) == 600);
    CHECK(attention_slice_dims(AttentionMode::Emb, 0, 600) == 0);
}

TEST_CASE("stored slices equal the reversible encoder's decoded prefix dims") {
    std::mt19937_64 rng(5);
    Seq2SeqModel M = Seq2SeqModel::make(CellKind::RevGRU, 12, 6, 16, AttentionMode::EmbPlusSliceK,
                                        5, rng);
    const int L = 7, B = 3, Hg = M.enc.cell.cfg.group_dim();
    ParallelCorpus c = toy_translation(64, L, 12, 9);
    std::vector<int> src((size_t)L * B), tgt((size_t)L * B);
    int used = 0;
    for (size_t i = 0; i < c.src.size() && used < B; ++i) {
        if ((int)c.src[i].size() != L) continue;
        for (int t = 0; t < L; ++t) {
            src[(size_t)t * B + used] = c.src[i][t];
            tgt[(size_t)t * B + used] = c.tgt[i][t];
        }
        ++used;
    }
    REQUIRE(used == B);

    Seq2SeqGrads G = Seq2SeqGrads::like(M);
    seq2seq_pass(M, src, tgt, L, B, &G);  // internal t=0 assertions must hold

    // Independent stored-activation encoder run for the slice cross-check.
    Tape tape;
    tape.T = L;
    tape.batch = B;
    tape.tokens = src;
    tape.initial = RevState::zeros(M.enc.cell.cfg, B);
    ActivationRecord rec;
    forward_recording(M.enc, tape, rec);

    // Rebuild annotations through a fresh pass and compare slices.
    Annotations ann;
    ann.mode = M.mode;
    ann.T = L;
    ann.batch = B;
    ann.emb_dim = M.enc.emb.cols;
    ann.slice_dims = 5;
    ann.dim = ann.emb_dim + 5;
    ann.src_tokens = src;
    ann.emb = &M.enc.emb;
    ann.slices.assign((size_t)L * B * 5, 0.0);
    {
        RevState s = RevState::zeros(M.enc.cell.cfg, B);
        std::vector<double> x((size_t)B * M.enc.cell.cfg.input_dim);
        const double scale = std::exp2(-M.enc.cell.cfg.rh);
        for (int t = 0; t < L; ++t) {
            for (int n = 0; n < B; ++n)
                M.enc.build_input(src[(size_t)t * B + n], false,
                                  x.data() + (size_t)n * M.enc.cell.cfg.input_dim);
            cell_forward(M.enc.cell, x.data(), s);
            for (int n = 0; n < B; ++n)
                for (int cdim = 0; cdim < 5; ++cdim) {
                    int32_t raw = cdim < Hg ? s.h1[(size_t)n * Hg + cdim]
                                            : s.h2[(size_t)n * Hg + (cdim - Hg)];
                    ann.slices[((size_t)t * B + n) * 5 + cdim] = raw * scale;
                }
        }
    }
    const double scale = std::exp2(-M.enc.cell.cfg.rh);
    for (int t = 0; t < L; ++t)
        for (int n = 0; n < B; ++n)
            for (int cdim = 0; cdim < 5; ++cdim) {
                int32_t raw = cdim < Hg ? rec.h1[t + 1][(size_t)n * Hg + cdim]
                                        : rec.h2[t + 1][(size_t)n * Hg + (cdim - Hg)];
                CHECK(ann.slices[((size_t)t * B + n) * 5 + cdim] == raw * scale);
            }
}

TEST_CASE("encoder memory ratios are ordered and full attention is exactly 1") {
    std::mt19937_64 rng(7);
    Seq2SeqModel M = Seq2SeqModel::make(CellKind::RevGRU, 12, 6, 16, AttentionMode::Emb, 0, rng);
    const int L = 24, B = 2;
    ParallelCorpus c = toy_translation(200, 6, 12, 13);
    // run an encoder over some batch to populate buffers
    std::vector<int> src((size_t)L * B);
    for (auto& t : src) t = (int)(rng() % 12);
    Tape tape = run_forward<BufferTensor>(M.enc, src, {}, L, B);
    const RevState& enc = tape.final_state;

    auto emb = encoder_memory_report_measured(AttentionMode::Emb, 0, enc, L);
    auto emb20 = encoder_memory_report_measured(AttentionMode::EmbPlusSliceK, 4, enc, L);
    auto slice = encoder_memory_report_measured(AttentionMode::SliceK, 8, enc, L);
    auto full = encoder_memory_report_measured(AttentionMode::Full, 0, enc, L);
    CHECK(emb.ratio >= emb20.ratio);
    CHECK(emb20.ratio >= slice.ratio);
    CHECK(slice.ratio >= full.ratio);
    CHECK(full.ratio == 1.0);
    CHECK(full.buffer_bits == 0.0);

    // storing half the dims caps the ratio below 2
    auto half = encoder_memory_report_measured(AttentionMode::SliceK, 16, enc, L);
    CHECK(half.ratio < 2.0);

    // idealized variant from a gate history shows the same pattern
    std::vector<std::vector<ForgetGate>> hist(L, std::vector<ForgetGate>(32, encode_gate(0.5)));
    auto i_emb = encoder_memory_report(AttentionMode::Emb, 0, 32, L, hist);
    auto i_20 = encoder_memory_report(AttentionMode::EmbPlusSliceK, 4, 32, L, hist);
    auto i_full = encoder_memory_report(AttentionMode::Full, 0, 32, L, hist);
    CHECK(i_emb.ratio >= i_20.ratio);
    CHECK(i_20.ratio >= i_full.ratio);
    CHECK(i_full.ratio == 1.0);
    CHECK(i_emb.ratio == doctest::Approx(32.0));  // 32 bits naive vs 1 ideal bit
}

TEST_CASE("attention loss context gradients agree with finite differences") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> dist(-0.8, 0.8);
    Seq2SeqModel M = Seq2SeqModel::make(CellKind::RevGRU, 6, 4, 8, AttentionMode::EmbPlusSliceK,
                                        3, rng);
    const int L = 4, B = 2, Hg = M.dec.cell.cfg.group_dim();

    Annotations ann;
    ann.mode = M.mode;
    ann.T = L;
    ann.batch = B;
    ann.emb_dim = 4;
    ann.slice_dims = 3;
    ann.dim = 7;
    ann.src_tokens.resize((size_t)L * B);
    for (auto& t : ann.src_tokens) t = (int)(rng() % 6);
    ann.emb = &M.enc.emb;
    ann.slices.resize((size_t)L * B * 3);
    for (auto& v : ann.slices) v = dist(rng);

    std::vector<int> targets((size_t)L * B);
    for (auto& t : targets) t = (int)(rng() % 6);

    StepValues post;
    post.resize(B, Hg, false);
    for (auto& v : post.h1t) v = dist(rng);
    for (auto& v : post.h2t) v = dist(rng);

    Seq2SeqGrads G = Seq2SeqGrads::like(M);
    std::vector<double> d_ann((size_t)L * B * 7, 0.0);
    detail::AttentionLossCtx ctx{&M, &ann, &targets, B, &G, &d_ann, 1.0 / B};
    DState d = DState::zeros(B, Hg, false);
    double loss = 0, correct = 0;
    const int t_step = 2;
    ctx(t_step, post, d, loss, correct);

    auto loss_only = [&]() {
        detail::AttentionLossCtx c2{&M, &ann, &targets, B, nullptr, nullptr, 1.0 / B};
        DState dd = DState::zeros(B, Hg, false);
        double l = 0, cc = 0;
        c2(t_step, post, dd, l, cc);
        return l;
    };

    const double eps = 1e-6;
    auto fd_check = [&](double* slot, double analytic) {
        double saved = *slot;
        *slot = saved + eps;
        double up = loss_only();
        *slot = saved - eps;
        double dn = loss_only();
        *slot = saved;
        double fd = (up - dn) / (2 * eps);
        CHECK(std::abs(fd - analytic) <= 2e-5 * std::max({1.0, std::abs(fd), std::abs(analytic)}));
    };

    for (int i = 0; i < 12; ++i) {
        size_t wa = rng() % M.att.Wa.a.size();
        fd_check(&M.att.Wa.a[wa], G.Wa.a[wa]);
        size_t wc = rng() % M.att.Wc.a.size();
        fd_check(&M.att.Wc.a[wc], G.Wc.a[wc]);
        size_t ws = rng() % M.att.Ws.a.size();
        fd_check(&M.att.Ws.a[ws], G.Ws.a[ws]);
        size_t sl = rng() % ann.slices.size();
        // slice index maps to the annotation-grad store after the emb dims
        size_t pos = sl / 3, cdim = sl % 3;
        fd_check(&ann.slices[sl], d_ann[pos * 7 + 4 + cdim]);
        size_t hi = rng() % post.h1t.size();
        fd_check(&post.h1t[hi], d.h1[hi]);
        size_t h2i = rng() % post.h2t.size();
        fd_check(&post.h2t[h2i], d.h2[h2i]);
    }
}

TEST_CASE("decoder reversibility holds under every attention mode") {
    std::mt19937_64 rng(17);
    for (auto [mode, k] : {std::pair{AttentionMode::Emb, 0}, {AttentionMode::SliceK, 4},
                           {AttentionMode::EmbPlusSliceK, 4}, {AttentionMode::Full, 0}}) {
        Seq2SeqModel M = Seq2SeqModel::make(CellKind::RevGRU, 8, 5, 12, mode, k, rng);
        const int L = 6, B = 2;
        std::vector<int> src((size_t)L * B), tgt((size_t)L * B);
        for (auto& t : src) t = (int)(rng() % 8);
        for (auto& t : tgt) t = (int)(rng() % 8);
        Seq2SeqGrads G = Seq2SeqGrads::like(M);
        // throws on any reversal mismatch; completing the pass is the check
        Seq2SeqStats st = seq2seq_pass(M, src, tgt, L, B, &G);
        CHECK(st.loss > 0.0);
        CHECK(st.dec_savings > 0.0);
    }
}

TEST_CASE("a few seq2seq steps reduce the teacher-forced loss") {
    std::mt19937_64 rng(23);
    Seq2SeqModel M = Seq2SeqModel::make(CellKind::RevGRU, 6, 6, 12, AttentionMode::EmbPlusSliceK,
                                        3, rng);
    Seq2SeqGrads G = Seq2SeqGrads::like(M);
    AdamState adam = AdamState::like_mats(G.mats(M));
    const int L = 4, B = 16;
    double first = 0, last = 0;
    for (int step = 0; step < 60; ++step) {
        std::vector<int> src((size_t)L * B), tgt((size_t)L * B);
        for (int n = 0; n < B; ++n)
            for (int t = 0; t < L; ++t) {
                int tok = (int)(rng() % 6);
                src[(size_t)t * B + n] = tok;
            }
        for (int n = 0; n < B; ++n)
            for (int t = 0; t < L; ++t)
                tgt[(size_t)t * B + n] = src[(size_t)(L - 1 - t) * B + n];
        G.zero();
        Seq2SeqStats st = seq2seq_pass(M, src, tgt, L, B, &G);
        adam_step_mats(M.mats(), G.mats(M), adam, 3e-3);
        if (step == 0) first = st.loss;
        if (step == 59) last = st.loss;
    }
    CHECK(last < first);
}
