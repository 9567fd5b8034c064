// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "revrnn/revgrad.hpp"

namespace revrnn {

// ---------------------------------------------------------------------------
// Memory-aware attention. Annotations are built from source embeddings and/or
// the first k dimensions of the encoder state; only the sliced dimensions are
// retained at full precision, the remaining D-k stay reversible-buffered.
// ---------------------------------------------------------------------------

enum class AttentionMode { Emb, SliceK, EmbPlusSliceK, Full };

inline std::string attention_name(AttentionMode m, int k) {
    switch (m) {
        case AttentionMode::Emb: return "emb";
        case AttentionMode::SliceK: return "slice:" + std::to_string(k);
        case AttentionMode::EmbPlusSliceK: return "emb+slice:" + std::to_string(k);
        case AttentionMode::Full: return "full";
    }
    return "?";
}

// Parses "emb", "slice:K", "emb+slice:K", "full".
inline AttentionMode attention_from_name(const std::string& s, int& k_out) {
    k_out = 0;
    if (s == "emb") return AttentionMode::Emb;
    if (s == "full") return AttentionMode::Full;
    auto parse_k = [&](const std::string& rest) {
        try {
            size_t pos = 0;
            int k = std::stoi(rest, &pos);
            if (pos != rest.size() || k <= 0) throw std::invalid_argument("");
            return k;
        } catch (...) {
            throw std::invalid_argument("bad attention slice width in '" + s + "'");
        }
    };
    if (s.rfind("slice:", 0) == 0) {
        k_out = parse_k(s.substr(6));
        return AttentionMode::SliceK;
    }
    if (s.rfind("emb+slice:", 0) == 0) {
        k_out = parse_k(s.substr(10));
        return AttentionMode::EmbPlusSliceK;
    }
    throw std::invalid_argument("unknown attention mode: " + s);
}

inline bool attention_uses_emb(AttentionMode m) {
    return m == AttentionMode::Emb || m == AttentionMode::EmbPlusSliceK;
}

// Retained state dims per source position (0 for pure embedding attention).
inline int attention_slice_dims(AttentionMode m, int k, int state_dim) {
    switch (m) {
        case AttentionMode::Emb: return 0;
        case AttentionMode::SliceK:
        case AttentionMode::EmbPlusSliceK: return k;
        case AttentionMode::Full: return state_dim;
    }
    return 0;
}

// Source-side annotations for one sequence batch: T positions, dim A each,
// stored (t, n)-major. Slices hold the first k dims of the decoded encoder
// state; embeddings are rebuilt from tokens on demand and never stored.
struct Annotations {
    AttentionMode mode = AttentionMode::Emb;
    int T = 0, batch = 0, dim = 0, emb_dim = 0, slice_dims = 0;
    std::vector<int> src_tokens;       // T x batch
    std::vector<double> slices;        // T x batch x slice_dims
    const Mat* emb = nullptr;          // source embedding table

    // Writes annotation s^(t) for batch element n.
    void build(int t, int n, double* out) const {
        int off = 0;
        if (emb_dim > 0) {
            int tok = src_tokens[(size_t)t * batch + n];
            for (int c = 0; c < emb_dim; ++c) out[c] = tok >= 0 ? (*emb)(tok, c) : 0.0;
            off = emb_dim;
        }
        const double* sl = slices.data() + ((size_t)t * batch + n) * slice_dims;
        for (int c = 0; c < slice_dims; ++c) out[off + c] = sl[c];
    }
};

// Luong "general" global attention parameters: score = dec^T Wa s, combiner
// tanh(Wc [c; dec]), output projection Ws.
struct AttentionParams {
    Mat Wa;  // dec_dim x ann_dim
    Mat Wc;  // attn_dim x (ann_dim + dec_dim)
    Mat Ws;  // vocab x attn_dim

    static AttentionParams init(int dec_dim, int ann_dim, int attn_dim, int vocab,
                                std::mt19937_64& rng) {
        AttentionParams p;
        p.Wa = Mat(dec_dim, ann_dim);
        p.Wc = Mat(attn_dim, ann_dim + dec_dim);
        p.Ws = Mat(vocab, attn_dim);
        init_uniform(p.Wa, rng, 1.0 / std::sqrt((double)ann_dim));
        init_uniform(p.Wc, rng, 1.0 / std::sqrt((double)(ann_dim + dec_dim)));
        init_uniform(p.Ws, rng, 1.0 / std::sqrt((double)attn_dim));
        return p;
    }
};

// One attention application: softmax-weighted context over annotations and
// the attentional hidden state tanh(Wc [c; dec]). Returns the weights.
inline void attention_step(const double* dec_state, int dec_dim,
                           const std::vector<std::vector<double>>& annotations,
                           const AttentionParams& P, std::vector<double>& attn_hidden,
                           std::vector<double>& weights) {
    const int T = (int)annotations.size();
    const int A = P.Wa.cols;
    std::vector<double> key(A, 0.0);
    matvec_t_add(P.Wa, dec_state, key.data());  // key = Wa^T dec
    weights.assign(T, 0.0);
    double mx = -1e300;
    for (int j = 0; j < T; ++j) {
        double s = 0.0;
        for (int c = 0; c < A; ++c) s += key[c] * annotations[j][c];
        weights[j] = s;
        mx = std::max(mx, s);
    }
    double sum = 0.0;
    for (int j = 0; j < T; ++j) {
        weights[j] = std::exp(weights[j] - mx);
        sum += weights[j];
    }
    for (int j = 0; j < T; ++j) weights[j] /= sum;

    std::vector<double> cat((size_t)A + dec_dim, 0.0);
    for (int j = 0; j < T; ++j)
        for (int c = 0; c < A; ++c) cat[c] += weights[j] * annotations[j][c];
    for (int c = 0; c < dec_dim; ++c) cat[A + c] = dec_state[c];
    attn_hidden.assign(P.Wc.rows, 0.0);
    matvec(P.Wc, cat.data(), attn_hidden.data());
    for (auto& v : attn_hidden) v = std::tanh(v);
}

// ---------------------------------------------------------------------------
// Encoder memory accounting. stored_slice_bits = 32 k T; the remaining D-k
// dims pay their buffer bits; ratio is against storing all D dims naively.
// ---------------------------------------------------------------------------

struct EncoderMemoryReport {
    uint64_t stored_slice_bits = 0;
    double buffer_bits = 0.0;
    double ratio = 1.0;
};

// Idealized variant from a gate history (per step, one gate per state unit).
inline EncoderMemoryReport encoder_memory_report(AttentionMode mode, int k, int D, int T,
                                                 const std::vector<std::vector<ForgetGate>>& gate_history) {
    int keff = attention_slice_dims(mode, k, D);
    if (keff > D) throw std::invalid_argument("encoder_memory_report: k exceeds state dim");
    EncoderMemoryReport r;
    r.stored_slice_bits = 32ull * keff * T;
    for (const auto& step : gate_history)
        for (size_t u = keff; u < step.size(); ++u) r.buffer_bits += ideal_bits_per_step(step[u]);
    double denom = (double)r.stored_slice_bits + r.buffer_bits;
    double naive = 32.0 * D * T;
    r.ratio = denom == 0.0 ? std::numeric_limits<double>::infinity() : naive / denom;
    return r;
}

// Measured variant from a real encoder run: per-unit limb bits for the
// remaining dims (units ordered [h1; h2]).
inline EncoderMemoryReport encoder_memory_report_measured(AttentionMode mode, int k,
                                                          const RevState& enc, int T) {
    const int Hg = enc.group_dim, D = 2 * Hg;
    int keff = attention_slice_dims(mode, k, D);
    if (keff > D) throw std::invalid_argument("encoder_memory_report_measured: k exceeds state dim");
    EncoderMemoryReport r;
    r.stored_slice_bits = 32ull * keff * T * enc.batch;
    for (int u = keff; u < D; ++u) {
        const BufferTensor& buf = u < Hg ? enc.bh1 : enc.bh2;
        r.buffer_bits += (double)buf.measured_bits_per_unit() * enc.batch;
    }
    double denom = (double)r.stored_slice_bits + r.buffer_bits;
    double naive = 32.0 * D * T * enc.batch;
    r.ratio = denom == 0.0 ? std::numeric_limits<double>::infinity() : naive / denom;
    return r;
}

// ---------------------------------------------------------------------------
// Encoder-decoder model with reversible cells on both sides.
// ---------------------------------------------------------------------------

struct Seq2SeqModel {
    Model enc, dec;  // heads unused (empty); the attention head projects
    AttentionParams att;
    AttentionMode mode = AttentionMode::EmbPlusSliceK;
    int k = 0;
    int vocab = 0;

    int state_dim() const { return 2 * enc.cell.cfg.group_dim(); }
    int ann_dim() const {
        return (attention_uses_emb(mode) ? enc.emb.cols : 0) +
               attention_slice_dims(mode, k, state_dim());
    }

    static Seq2SeqModel make(CellKind kind, int vocab, int emb_dim, int hidden,
                             AttentionMode mode, int k, std::mt19937_64& rng,
                             double forget_floor = 0.0, int rh = kDefaultHiddenBits,
                             int rz = kDefaultGateBits) {
        Seq2SeqModel m;
        m.mode = mode;
        m.k = k;
        m.vocab = vocab;
        CellConfig cfg{kind, emb_dim, hidden, rh, rz, forget_floor};
        m.enc.cell = CellParams::init(cfg, rng);
        m.enc.vocab = vocab;
        m.enc.emb = Mat(vocab, emb_dim);
        init_uniform(m.enc.emb, rng, 1.0 / std::sqrt((double)emb_dim));
        m.dec.cell = CellParams::init(cfg, rng);
        m.dec.vocab = vocab;
        m.dec.emb = Mat(vocab, emb_dim);
        init_uniform(m.dec.emb, rng, 1.0 / std::sqrt((double)emb_dim));
        int D = 2 * cfg.group_dim();
        int A = (attention_uses_emb(mode) ? emb_dim : 0) + attention_slice_dims(mode, k, D);
        m.att = AttentionParams::init(D, A, D, vocab, rng);
        return m;
    }

    std::vector<Mat*> mats() {
        std::vector<Mat*> v = model_mats(enc);
        v.pop_back();  // unused empty head
        auto vd = model_mats(dec);
        vd.pop_back();
        v.insert(v.end(), vd.begin(), vd.end());
        v.push_back(&att.Wa);
        v.push_back(&att.Wc);
        v.push_back(&att.Ws);
        return v;
    }
};

struct Seq2SeqGrads {
    ModelGrads enc, dec;
    Mat Wa, Wc, Ws;

    static Seq2SeqGrads like(const Seq2SeqModel& m) {
        Seq2SeqGrads g;
        g.enc = ModelGrads::like(m.enc);
        g.dec = ModelGrads::like(m.dec);
        g.Wa = Mat(m.att.Wa.rows, m.att.Wa.cols);
        g.Wc = Mat(m.att.Wc.rows, m.att.Wc.cols);
        g.Ws = Mat(m.att.Ws.rows, m.att.Ws.cols);
        return g;
    }
    void zero() {
        enc.zero();
        dec.zero();
        Wa.zero();
        Wc.zero();
        Ws.zero();
    }
    std::vector<Mat*> mats(Seq2SeqModel& m) {
        std::vector<Mat*> v = grad_mats(m.enc, enc);
        v.pop_back();
        auto vd = grad_mats(m.dec, dec);
        vd.pop_back();
        v.insert(v.end(), vd.begin(), vd.end());
        v.push_back(&Wa);
        v.push_back(&Wc);
        v.push_back(&Ws);
        return v;
    }
};

// Result of one batched teacher-forced pass.
struct Seq2SeqStats {
    double loss = 0.0;
    double correct = 0.0;
    int scored = 0;  // tokens scored per batch element
    uint64_t enc_buffer_bits = 0, dec_buffer_bits = 0;
    double enc_ideal_bits = 0.0, dec_ideal_bits = 0.0;
    EncoderMemoryReport enc_report;
    double dec_savings = 1.0;
};

namespace detail {

// Decoder-side attention + cross entropy for one step; accumulates gradients
// into the attention matrices and the annotation-gradient store when grads
// are requested.
struct AttentionLossCtx {
    const Seq2SeqModel* model;
    const Annotations* ann;
    const std::vector<int>* targets;  // L x batch
    int batch;
    Seq2SeqGrads* grads;              // null for eval
    std::vector<double>* d_annotations;  // L x batch x A
    double scale;

    void operator()(int t, const StepValues& post, DState& d, double& loss,
                    double& correct) const {
        const Seq2SeqModel& M = *model;
        const int Hg = M.dec.cell.cfg.group_dim();
        const int D = 2 * Hg, A = M.att.Wa.cols, L = ann->T, V = M.att.Ws.rows;
        const int attn_dim = M.att.Wc.rows;

        std::vector<double> dec_state(D), key(A), scores(L), alpha(L), sj(A),
            cat((size_t)A + D), pre(attn_dim), ah(attn_dim), logits(V);
        std::vector<double> dah(attn_dim), dpre(attn_dim), dcat((size_t)A + D), dalpha(L),
            dscore(L), dkey(A);

        for (int n = 0; n < batch; ++n) {
            int y = (*targets)[(size_t)t * batch + n];
            if (y < 0) continue;
            for (int j = 0; j < Hg; ++j) {
                dec_state[j] = post.h1t[(size_t)n * Hg + j];
                dec_state[Hg + j] = post.h2t[(size_t)n * Hg + j];
            }
            // score_j = dec^T Wa s_j via key = Wa^T dec
            std::fill(key.begin(), key.end(), 0.0);
            matvec_t_add(M.att.Wa, dec_state.data(), key.data());
            double mx = -1e300;
            for (int j = 0; j < L; ++j) {
                ann->build(j, n, sj.data());
                double s = 0.0;
                for (int c = 0; c < A; ++c) s += key[c] * sj[c];
                scores[j] = s;
                mx = std::max(mx, s);
            }
            double sum = 0.0;
            for (int j = 0; j < L; ++j) {
                alpha[j] = std::exp(scores[j] - mx);
                sum += alpha[j];
            }
            for (int j = 0; j < L; ++j) alpha[j] /= sum;

            std::fill(cat.begin(), cat.end(), 0.0);
            for (int j = 0; j < L; ++j) {
                ann->build(j, n, sj.data());
                for (int c = 0; c < A; ++c) cat[c] += alpha[j] * sj[c];
            }
            for (int c = 0; c < D; ++c) cat[A + c] = dec_state[c];
            matvec(M.att.Wc, cat.data(), pre.data());
            for (int c = 0; c < attn_dim; ++c) ah[c] = std::tanh(pre[c]);

            matvec(M.att.Ws, ah.data(), logits.data());
            double lmx = logits[0];
            int arg = 0;
            for (int v = 1; v < V; ++v)
                if (logits[v] > lmx) {
                    lmx = logits[v];
                    arg = v;
                }
            double lsum = 0.0;
            for (int v = 0; v < V; ++v) lsum += std::exp(logits[v] - lmx);
            double logz = lmx + std::log(lsum);
            loss += scale * (logz - logits[y]);
            if (arg == y) correct += 1.0;
            if (!grads) continue;

            // d logits -> Ws, attentional hidden
            std::fill(dah.begin(), dah.end(), 0.0);
            for (int v = 0; v < V; ++v) {
                double p = std::exp(logits[v] - logz);
                double dl = scale * (p - (v == y ? 1.0 : 0.0));
                for (int c = 0; c < attn_dim; ++c) grads->Ws(v, c) += dl * ah[c];
                const double* row = M.att.Ws.row(v);
                for (int c = 0; c < attn_dim; ++c) dah[c] += dl * row[c];
            }
            for (int c = 0; c < attn_dim; ++c) dpre[c] = dah[c] * (1.0 - ah[c] * ah[c]);
            outer_add(grads->Wc, dpre.data(), cat.data());
            std::fill(dcat.begin(), dcat.end(), 0.0);
            matvec_t_add(M.att.Wc, dpre.data(), dcat.data());

            // context part: dc -> alpha and annotations
            double dot_sum = 0.0;
            for (int j = 0; j < L; ++j) {
                ann->build(j, n, sj.data());
                double da = 0.0;
                for (int c = 0; c < A; ++c) da += dcat[c] * sj[c];
                dalpha[j] = da;
                double* ds = d_annotations->data() + ((size_t)j * batch + n) * A;
                for (int c = 0; c < A; ++c) ds[c] += alpha[j] * dcat[c];
                dot_sum += dalpha[j] * alpha[j];
            }
            // softmax jacobian
            for (int j = 0; j < L; ++j) dscore[j] = alpha[j] * (dalpha[j] - dot_sum);

            // score_j = key . s_j with key = Wa^T dec
            std::fill(dkey.begin(), dkey.end(), 0.0);
            for (int j = 0; j < L; ++j) {
                if (dscore[j] == 0.0) continue;
                ann->build(j, n, sj.data());
                for (int c = 0; c < A; ++c) dkey[c] += dscore[j] * sj[c];
                double* ds = d_annotations->data() + ((size_t)j * batch + n) * A;
                for (int c = 0; c < A; ++c) ds[c] += dscore[j] * key[c];
            }
            // key = Wa^T dec: dWa += dec outer dkey; ddec += Wa dkey
            outer_add(grads->Wa, dec_state.data(), dkey.data());
            std::vector<double> ddec(D, 0.0);
            matvec(M.att.Wa, dkey.data(), ddec.data());
            for (int c = 0; c < D; ++c) ddec[c] += dcat[A + c];
            for (int j = 0; j < Hg; ++j) {
                d.h1[(size_t)n * Hg + j] += ddec[j];
                d.h2[(size_t)n * Hg + j] += ddec[Hg + j];
            }
        }
    }
};

}  // namespace detail

// Teacher-forced pass over one same-length batch. Computes loss/accuracy;
// when grads is non-null also runs both reversible backward walks.
inline Seq2SeqStats seq2seq_pass(Seq2SeqModel& M, const std::vector<int>& src,
                                 const std::vector<int>& tgt, int L, int batch,
                                 Seq2SeqGrads* grads) {
    const CellConfig& cfg = M.enc.cell.cfg;
    const int Hg = cfg.group_dim(), D = 2 * Hg, E = M.enc.emb.cols;
    const double scale = std::exp2(-cfg.rh);
    Seq2SeqStats stats;
    stats.scored = L;

    // ---- encoder forward, storing annotation slices as we go
    Annotations ann;
    ann.mode = M.mode;
    ann.T = L;
    ann.batch = batch;
    ann.emb_dim = attention_uses_emb(M.mode) ? E : 0;
    ann.slice_dims = attention_slice_dims(M.mode, M.k, D);
    ann.dim = ann.emb_dim + ann.slice_dims;
    ann.src_tokens = src;
    ann.emb = &M.enc.emb;
    ann.slices.assign((size_t)L * batch * ann.slice_dims, 0.0);

    Tape enc_tape;
    enc_tape.T = L;
    enc_tape.batch = batch;
    enc_tape.tokens = src;
    enc_tape.initial = RevState::zeros(cfg, batch);
    enc_tape.final_state = enc_tape.initial;
    {
        std::vector<double> x((size_t)batch * cfg.input_dim);
        for (int t = 0; t < L; ++t) {
            for (int n = 0; n < batch; ++n)
                M.enc.build_input(src[(size_t)t * batch + n], false, x.data() + (size_t)n * cfg.input_dim);
            cell_forward(M.enc.cell, x.data(), enc_tape.final_state);
            for (int n = 0; n < batch; ++n) {
                double* sl = ann.slices.data() + ((size_t)t * batch + n) * ann.slice_dims;
                for (int c = 0; c < ann.slice_dims; ++c) {
                    int32_t raw = c < Hg ? enc_tape.final_state.h1[(size_t)n * Hg + c]
                                         : enc_tape.final_state.h2[(size_t)n * Hg + (c - Hg)];
                    sl[c] = raw * scale;
                }
            }
        }
    }
    stats.enc_buffer_bits = enc_tape.final_state.buffer_bits();
    stats.enc_ideal_bits = enc_tape.final_state.ideal_buffer_bits();
    stats.enc_report = encoder_memory_report_measured(M.mode, M.k, enc_tape.final_state, L);

    // ---- decoder forward from the encoder's final state, teacher forcing
    std::vector<int> dec_inputs((size_t)L * batch);
    for (int t = 0; t < L; ++t)
        for (int n = 0; n < batch; ++n)
            dec_inputs[(size_t)t * batch + n] = t == 0 ? -1 : tgt[(size_t)(t - 1) * batch + n];

    RevState dec_init = RevState::zeros(cfg, batch);
    dec_init.h1 = enc_tape.final_state.h1;
    dec_init.h2 = enc_tape.final_state.h2;
    if (cfg.kind == CellKind::RevLSTM) {
        dec_init.c1 = enc_tape.final_state.c1;
        dec_init.c2 = enc_tape.final_state.c2;
    }
    Tape dec_tape = run_forward<BufferTensor>(M.dec, dec_inputs, {}, L, batch, &dec_init);
    stats.dec_buffer_bits = dec_tape.final_state.buffer_bits();
    stats.dec_ideal_bits = dec_tape.final_state.ideal_buffer_bits();
    stats.dec_savings = savings_ratio(L, dec_tape.final_state.total_state_units(), batch,
                                      stats.dec_buffer_bits);

    std::vector<double> d_annotations((size_t)L * batch * ann.dim, 0.0);
    detail::AttentionLossCtx ctx{&M, &ann, &tgt, batch, grads,
                                 grads ? &d_annotations : nullptr, 1.0 / batch};

    if (!grads) {
        // evaluation: walk the decoder states forward again for the loss
        RevState s = dec_init;
        StepValues vals;
        vals.resize(batch, Hg, cfg.kind == CellKind::RevLSTM);
        DState dummy = DState::zeros(batch, Hg, cfg.kind == CellKind::RevLSTM);
        std::vector<double> x((size_t)batch * cfg.input_dim);
        for (int t = 0; t < L; ++t) {
            for (int n = 0; n < batch; ++n)
                M.dec.build_input(dec_inputs[(size_t)t * batch + n], false,
                                  x.data() + (size_t)n * cfg.input_dim);
            cell_forward(M.dec.cell, x.data(), s);
            detail::decode_state_values(s, true, vals);
            ctx(t, vals, dummy, stats.loss, stats.correct);
        }
        return stats;
    }

    // ---- decoder backward (attention + CE at each step)
    DState d_dec_init;
    LossHook dec_hook = [&](int t, const StepValues& post, DState& d, double& loss,
                            double& correct) { ctx(t, post, d, loss, correct); };
    auto dec_stats = reversible_backward(M.dec, dec_tape, dec_hook, grads->dec, nullptr,
                                         &d_dec_init);
    stats.loss = dec_stats.loss;
    stats.correct = dec_stats.correct;

    // ---- annotation gradients: embedding part direct, slice part into the
    // encoder walk; decoder-initial gradient continues into the encoder.
    LossHook enc_hook = [&](int t, const StepValues&, DState& d, double&, double&) {
        for (int n = 0; n < batch; ++n) {
            const double* ds = d_annotations.data() + ((size_t)t * batch + n) * ann.dim;
            if (ann.emb_dim > 0) {
                int tok = src[(size_t)t * batch + n];
                if (tok >= 0)
                    for (int c = 0; c < ann.emb_dim; ++c) grads->enc.emb(tok, c) += ds[c];
            }
            for (int c = 0; c < ann.slice_dims; ++c) {
                double g = ds[ann.emb_dim + c];
                if (c < Hg)
                    d.h1[(size_t)n * Hg + c] += g;
                else
                    d.h2[(size_t)n * Hg + (c - Hg)] += g;
            }
        }
    };
    reversible_backward(M.enc, enc_tape, enc_hook, grads->enc, &d_dec_init, nullptr);
    return stats;
}

}  // namespace revrnn
