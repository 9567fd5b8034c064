// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "revrnn/matrix.hpp"
#include "revrnn/revcells.hpp"

namespace revrnn {

// ---------------------------------------------------------------------------
// Model: cell + optional embedding table + linear readout over [h1; h2].
// With an empty embedding the input is a one-hot of the token (plus an
// optional end-of-input marker channel).
// ---------------------------------------------------------------------------

struct Model {
    CellParams cell;
    Mat emb;   // V x E_emb; empty -> one-hot input
    Mat head;  // V_out x readout dim
    int vocab = 0;
    bool marker_channel = false;

    int readout_dim() const {
        return is_reversible(cell.cfg.kind) ? 2 * cell.cfg.group_dim() : cell.cfg.hidden;
    }

    static Model make(const CellConfig& cfg, int vocab, int vocab_out, bool marker,
                      bool learned_emb, int emb_dim, std::mt19937_64& rng) {
        Model m;
        m.vocab = vocab;
        m.marker_channel = marker;
        CellConfig c = cfg;
        c.input_dim = (learned_emb ? emb_dim : vocab) + (marker ? 1 : 0);
        m.cell = CellParams::init(c, rng);
        if (learned_emb) {
            m.emb = Mat(vocab, emb_dim);
            init_uniform(m.emb, rng, 1.0 / std::sqrt((double)emb_dim));
        }
        int rd = is_reversible(c.kind) ? 2 * c.group_dim() : c.hidden;
        m.head = Mat(vocab_out, rd);
        init_uniform(m.head, rng, 1.0 / std::sqrt((double)rd));
        return m;
    }

    // Writes the input vector for one (token, marker) pair.
    void build_input(int token, bool marker, double* x) const {
        int E = cell.cfg.input_dim;
        std::fill(x, x + E, 0.0);
        if (emb.empty()) {
            if (token >= 0) x[token] = 1.0;
        } else {
            if (token >= 0)
                for (int c = 0; c < emb.cols; ++c) x[c] = emb(token, c);
        }
        if (marker_channel && marker) x[E - 1] = 1.0;
    }
};

struct ModelGrads {
    CellGrads cell;
    Mat emb, head;

    static ModelGrads like(const Model& m) {
        ModelGrads g;
        g.cell = CellGrads::like(m.cell);
        g.emb = Mat(m.emb.rows, m.emb.cols);
        g.head = Mat(m.head.rows, m.head.cols);
        return g;
    }
    void zero() {
        cell.zero();
        emb.zero();
        head.zero();
    }
};

inline std::vector<Mat*> model_mats(Model& m) {
    auto v = m.cell.matrices();
    if (!m.emb.empty()) v.push_back(&m.emb);
    v.push_back(&m.head);
    return v;
}

inline std::vector<Mat*> grad_mats(Model& m, ModelGrads& g) {
    auto v = g.cell.matrices();
    if (!m.emb.empty()) v.push_back(&g.emb);
    v.push_back(&g.head);
    return v;
}

// ---------------------------------------------------------------------------
// Step gradient. One transition's chain rule in plain floats, shared by the
// reversible walker, the stored-activation walker, and the float surrogate:
// all three feed it its values, so their arithmetic is literally the same.
// Quantizers are treated as the identity (straight-through), and the bits
// shifted back from the buffer are constants.
// ---------------------------------------------------------------------------

// Per-step state values, batch x Hg each (decoded fixed point, or the float
// surrogate's states).
struct StepValues {
    std::vector<double> h1p, h2p, h1t, h2t, c1p, c2p, c1t, c2t;

    void resize(int batch, int hg, bool lstm) {
        size_t n = (size_t)batch * hg;
        h1p.resize(n);
        h2p.resize(n);
        h1t.resize(n);
        h2t.resize(n);
        if (lstm) {
            c1p.resize(n);
            c2p.resize(n);
            c1t.resize(n);
            c2t.resize(n);
        }
    }
};

// Gradient wrt a state.
struct DState {
    std::vector<double> h1, h2, c1, c2;

    static DState zeros(int batch, int hg, bool lstm) {
        DState d;
        d.h1.assign((size_t)batch * hg, 0.0);
        d.h2.assign((size_t)batch * hg, 0.0);
        if (lstm) {
            d.c1.assign((size_t)batch * hg, 0.0);
            d.c2.assign((size_t)batch * hg, 0.0);
        }
        return d;
    }
    size_t bytes() const {
        return 8 * (h1.size() + h2.size() + c1.size() + c2.size());
    }
};

namespace detail {

struct BackScratch {
    GruGates gg;
    LstmGates lg;
    DfGates dg;
    std::vector<double> gates_scratch;
    std::vector<double> v, u, du, dv, pre, acc;

    size_t bytes() const {
        return 8 * (gg.z.size() * 4 + lg.f.size() * 7 + dg.r.size() * 2 + gates_scratch.size() +
                    v.size() + u.size() + du.size() + dv.size() + pre.size() + acc.size());
    }
};

// One GRU-style group backward (shared by RevGRU / NF-RevGRU). h_other is the
// coupling input of this group's gates; d_other accumulates its gradient.
inline void gru_group_backward(const Mat& W, const Mat& U, const CellConfig& cfg,
                               const double* x, const double* h_other, const double* hp,
                               const GruGates& g, const double* dh, bool nf, double* d_hp,
                               double* d_other, Mat& dW, Mat& dU, double* dx, BackScratch& s) {
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    const double floor_scale = 1.0 - cfg.forget_floor;
    s.v.resize(E + Hg);
    s.u.resize(E + Hg);
    s.du.assign(E + Hg, 0.0);
    s.dv.assign(E + Hg, 0.0);
    s.pre.resize(2 * Hg);
    s.acc.resize(Hg);
    double* dpre_g = s.acc.data();

    for (int i = 0; i < E; ++i) s.v[i] = x[i];
    for (int j = 0; j < Hg; ++j) s.v[E + j] = h_other[j];
    for (int i = 0; i < E; ++i) s.u[i] = x[i];
    for (int j = 0; j < Hg; ++j) s.u[E + j] = g.r[j] * h_other[j];

    for (int j = 0; j < Hg; ++j) {
        double dz = nf ? dh[j] * (-g.g[j]) : dh[j] * (hp[j] - g.g[j]);
        double dg = dh[j] * (1.0 - g.z[j]);
        d_hp[j] = nf ? dh[j] : dh[j] * g.z[j];
        dpre_g[j] = dg * (1.0 - g.g[j] * g.g[j]);
        double dzsig = dz * floor_scale;
        s.pre[j] = dzsig * g.zsig[j] * (1.0 - g.zsig[j]);
    }

    outer_add(dU, dpre_g, s.u.data());
    matvec_t_add(U, dpre_g, s.du.data());
    if (dx)
        for (int i = 0; i < E; ++i) dx[i] += s.du[i];
    for (int j = 0; j < Hg; ++j) {
        double dr = s.du[E + j] * h_other[j];
        d_other[j] += s.du[E + j] * g.r[j];
        s.pre[Hg + j] = dr * g.r[j] * (1.0 - g.r[j]);
    }

    outer_add(dW, s.pre.data(), s.v.data());
    matvec_t_add(W, s.pre.data(), s.dv.data());
    if (dx)
        for (int i = 0; i < E; ++i) dx[i] += s.dv[i];
    for (int j = 0; j < Hg; ++j) d_other[j] += s.dv[E + j];
}

// One RevLSTM group backward.
inline void lstm_group_backward(const Mat& W, const Mat& U, const CellConfig& cfg,
                                const double* x, const double* h_other, const double* hp,
                                const double* cp, const double* ct, const LstmGates& g,
                                const double* dh, const double* dc_in, double* d_hp,
                                double* d_cp, double* d_other, Mat& dW, Mat& dU, double* dx,
                                BackScratch& s) {
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    const double floor_scale = 1.0 - cfg.forget_floor;
    s.v.resize(E + Hg);
    s.du.assign(E + Hg, 0.0);
    s.dv.assign(E + Hg, 0.0);
    s.pre.resize(4 * Hg);
    s.acc.resize(Hg);
    double* dpre_g = s.acc.data();

    for (int i = 0; i < E; ++i) s.v[i] = x[i];
    for (int j = 0; j < Hg; ++j) s.v[E + j] = h_other[j];

    for (int j = 0; j < Hg; ++j) {
        double tc = std::tanh(ct[j]);
        double do_ = dh[j] * tc;
        double dc = dc_in[j] + dh[j] * g.o[j] * (1.0 - tc * tc);
        double dp = dh[j] * hp[j];
        d_hp[j] = dh[j] * g.p[j];
        double df = dc * cp[j];
        double di = dc * g.g[j];
        double dg = dc * g.i[j];
        d_cp[j] = dc * g.f[j];
        dpre_g[j] = dg * (1.0 - g.g[j] * g.g[j]);
        s.pre[j] = df * floor_scale * g.fsig[j] * (1.0 - g.fsig[j]);
        s.pre[Hg + j] = di * g.i[j] * (1.0 - g.i[j]);
        s.pre[2 * Hg + j] = do_ * g.o[j] * (1.0 - g.o[j]);
        s.pre[3 * Hg + j] = dp * floor_scale * g.psig[j] * (1.0 - g.psig[j]);
    }

    outer_add(dU, dpre_g, s.v.data());
    matvec_t_add(U, dpre_g, s.du.data());
    outer_add(dW, s.pre.data(), s.v.data());
    matvec_t_add(W, s.pre.data(), s.dv.data());
    if (dx)
        for (int i = 0; i < E; ++i) dx[i] += s.du[i] + s.dv[i];
    for (int j = 0; j < Hg; ++j) d_other[j] += s.du[E + j] + s.dv[E + j];
}

// Discrete-forgetting group backward: the forget exponent is a constant.
inline void df_group_backward(const Mat& Wr, const Mat& U, const CellConfig& cfg, const double* x,
                              const double* h_other, const DfGates& g, const double* dh,
                              double* d_hp, double* d_other, Mat& dWr, Mat& dU, double* dx,
                              BackScratch& s) {
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    s.v.resize(E + Hg);
    s.u.resize(E + Hg);
    s.du.assign(E + Hg, 0.0);
    s.dv.assign(E + Hg, 0.0);
    s.pre.resize(Hg);
    s.acc.resize(Hg);
    double* dpre_g = s.acc.data();

    for (int i = 0; i < E; ++i) s.v[i] = x[i];
    for (int j = 0; j < Hg; ++j) s.v[E + j] = h_other[j];
    for (int i = 0; i < E; ++i) s.u[i] = x[i];
    for (int j = 0; j < Hg; ++j) s.u[E + j] = g.r[j] * h_other[j];

    for (int j = 0; j < Hg; ++j) {
        double z = std::exp2(-(double)g.k[j]);
        double dg = dh[j] * (1.0 - z);
        d_hp[j] = dh[j] * z;
        dpre_g[j] = dg * (1.0 - g.g[j] * g.g[j]);
    }
    outer_add(dU, dpre_g, s.u.data());
    matvec_t_add(U, dpre_g, s.du.data());
    if (dx)
        for (int i = 0; i < E; ++i) dx[i] += s.du[i];
    for (int j = 0; j < Hg; ++j) {
        double dr = s.du[E + j] * h_other[j];
        d_other[j] += s.du[E + j] * g.r[j];
        s.pre[j] = dr * g.r[j] * (1.0 - g.r[j]);
    }
    outer_add(dWr, s.pre.data(), s.v.data());
    matvec_t_add(Wr, s.pre.data(), s.dv.data());
    if (dx)
        for (int i = 0; i < E; ++i) dx[i] += s.dv[i];
    for (int j = 0; j < Hg; ++j) d_other[j] += s.dv[E + j];
}

}  // namespace detail

// Backward through one transition. d_in is the loss gradient wrt the post
// state; d_prev receives the gradient wrt the pre state; dx (batch x E,
// optional) receives input gradients.
inline void step_backward(const CellParams& P, const double* x, const StepValues& vals,
                          const DState& d_in, DState& d_prev, CellGrads& G, double* dx,
                          detail::BackScratch& s) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    const int batch = (int)(vals.h1p.size() / Hg);
    const bool lstm = cfg.kind == CellKind::RevLSTM;
    const bool nf = cfg.kind == CellKind::NfRevGRU;

    d_prev.h1.assign(vals.h1p.size(), 0.0);
    d_prev.h2.assign(vals.h2p.size(), 0.0);
    if (lstm) {
        d_prev.c1.assign(vals.c1p.size(), 0.0);
        d_prev.c2.assign(vals.c2p.size(), 0.0);
    }

    std::vector<double> dh1_total(Hg), dh2_self(Hg);
    for (int n = 0; n < batch; ++n) {
        const double* xn = x + (size_t)n * E;
        double* dxn = dx ? dx + (size_t)n * E : nullptr;
        size_t off = (size_t)n * Hg;
        const double* h1p = vals.h1p.data() + off;
        const double* h2p = vals.h2p.data() + off;
        const double* h1t = vals.h1t.data() + off;

        for (int j = 0; j < Hg; ++j) dh1_total[j] = d_in.h1[off + j];

        switch (cfg.kind) {
            case CellKind::RevGRU:
            case CellKind::NfRevGRU: {
                // Group 2 first: its gates saw h1^(t), so it feeds dh1.
                gru_group_gates(P.W2, P.U2, cfg, xn, h1t, s.gg, s.gates_scratch);
                detail::gru_group_backward(P.W2, P.U2, cfg, xn, h1t, h2p, s.gg,
                                           d_in.h2.data() + off, nf, d_prev.h2.data() + off,
                                           dh1_total.data(), G.W2, G.U2, dxn, s);
                gru_group_gates(P.W1, P.U1, cfg, xn, h2p, s.gg, s.gates_scratch);
                for (int j = 0; j < Hg; ++j) dh2_self[j] = 0.0;
                detail::gru_group_backward(P.W1, P.U1, cfg, xn, h2p, h1p, s.gg, dh1_total.data(),
                                           nf, d_prev.h1.data() + off, dh2_self.data(), G.W1,
                                           G.U1, dxn, s);
                for (int j = 0; j < Hg; ++j) d_prev.h2[off + j] += dh2_self[j];
                break;
            }
            case CellKind::RevLSTM: {
                const double* c1p = vals.c1p.data() + off;
                const double* c2p = vals.c2p.data() + off;
                const double* c1t = vals.c1t.data() + off;
                const double* c2t = vals.c2t.data() + off;
                lstm_group_gates(P.W2, P.U2, cfg, xn, h1t, s.lg, s.gates_scratch);
                detail::lstm_group_backward(P.W2, P.U2, cfg, xn, h1t, h2p, c2p, c2t, s.lg,
                                            d_in.h2.data() + off, d_in.c2.data() + off,
                                            d_prev.h2.data() + off, d_prev.c2.data() + off,
                                            dh1_total.data(), G.W2, G.U2, dxn, s);
                lstm_group_gates(P.W1, P.U1, cfg, xn, h2p, s.lg, s.gates_scratch);
                for (int j = 0; j < Hg; ++j) dh2_self[j] = 0.0;
                detail::lstm_group_backward(P.W1, P.U1, cfg, xn, h2p, h1p, c1p, c1t, s.lg,
                                            dh1_total.data(), d_in.c1.data() + off,
                                            d_prev.h1.data() + off, d_prev.c1.data() + off,
                                            dh2_self.data(), G.W1, G.U1, dxn, s);
                for (int j = 0; j < Hg; ++j) d_prev.h2[off + j] += dh2_self[j];
                break;
            }
            case CellKind::DfRevGRU: {
                df_group_gates(P.W2, P.U2, P.Q2, cfg, xn, h1t, s.dg, s.gates_scratch);
                detail::df_group_backward(P.W2, P.U2, cfg, xn, h1t, s.dg, d_in.h2.data() + off,
                                          d_prev.h2.data() + off, dh1_total.data(), G.W2, G.U2,
                                          dxn, s);
                df_group_gates(P.W1, P.U1, P.Q1, cfg, xn, h2p, s.dg, s.gates_scratch);
                for (int j = 0; j < Hg; ++j) dh2_self[j] = 0.0;
                detail::df_group_backward(P.W1, P.U1, cfg, xn, h2p, s.dg, dh1_total.data(),
                                          d_prev.h1.data() + off, dh2_self.data(), G.W1, G.U1,
                                          dxn, s);
                for (int j = 0; j < Hg; ++j) d_prev.h2[off + j] += dh2_self[j];
                break;
            }
            default:
                throw std::invalid_argument("step_backward: not a reversible cell");
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy readout.
// ---------------------------------------------------------------------------

// Adds loss, gradient and accuracy for one step. targets[n] < 0 masks the
// element. Gradients are scaled by `scale` (typically 1/batch).
inline void head_loss_grad(const Mat& head, const double* state, int batch, const int* targets,
                           double scale, double* d_state, Mat* d_head, double& loss,
                           double& correct, std::vector<double>& scratch) {
    const int V = head.rows, D = head.cols;
    scratch.resize(V);
    for (int n = 0; n < batch; ++n) {
        int y = targets[n];
        if (y < 0) continue;
        const double* st = state + (size_t)n * D;
        matvec(head, st, scratch.data());
        double mx = scratch[0];
        int arg = 0;
        for (int v = 1; v < V; ++v)
            if (scratch[v] > mx) {
                mx = scratch[v];
                arg = v;
            }
        double sum = 0.0;
        for (int v = 0; v < V; ++v) sum += std::exp(scratch[v] - mx);
        double logz = mx + std::log(sum);
        loss += scale * (logz - scratch[y]);
        if (arg == y) correct += 1.0;
        if (!d_state) continue;
        for (int v = 0; v < V; ++v) {
            double p = std::exp(scratch[v] - logz);
            double dlogit = scale * (p - (v == y ? 1.0 : 0.0));
            if (d_head)
                for (int c = 0; c < D; ++c) (*d_head)(v, c) += dlogit * st[c];
            const double* wrow = head.row(v);
            double* ds = d_state + (size_t)n * D;
            for (int c = 0; c < D; ++c) ds[c] += dlogit * wrow[c];
        }
    }
}

// ---------------------------------------------------------------------------
// Tape: everything the reversible walker needs — inputs, the t=0 snapshot,
// and the final state whose buffers the walker consumes. No per-timestep
// activations.
// ---------------------------------------------------------------------------

template <class BufT>
struct BasicTape {
    int T = 0, batch = 0;
    std::vector<int> tokens;        // T x batch
    std::vector<uint8_t> markers;   // T x batch, empty when unused
    BasicRevState<BufT> initial;    // snapshot before step 0
    BasicRevState<BufT> final_state;

    int token(int t, int n) const { return tokens[(size_t)t * batch + n]; }
    bool marker(int t, int n) const {
        return !markers.empty() && markers[(size_t)t * batch + n] != 0;
    }
};

using Tape = BasicTape<BufferTensor>;

template <class BufT>
BasicTape<BufT> run_forward(const Model& M, const std::vector<int>& tokens,
                            const std::vector<uint8_t>& markers, int T, int batch,
                            const BasicRevState<BufT>* initial = nullptr) {
    BasicTape<BufT> tape;
    tape.T = T;
    tape.batch = batch;
    tape.tokens = tokens;
    tape.markers = markers;
    tape.initial = initial ? *initial : BasicRevState<BufT>::zeros(M.cell.cfg, batch);
    tape.final_state = tape.initial;
    const int E = M.cell.cfg.input_dim;
    std::vector<double> x((size_t)batch * E);
    for (int t = 0; t < T; ++t) {
        for (int n = 0; n < batch; ++n)
            M.build_input(tape.token(t, n), tape.marker(t, n), x.data() + (size_t)n * E);
        cell_forward(M.cell, x.data(), tape.final_state);
    }
    return tape;
}

// Per-timestep quantized states recorded by the stored-activation baseline.
struct ActivationRecord {
    std::vector<std::vector<int32_t>> h1, h2, c1, c2;  // T+1 entries each

    uint64_t stored_bits() const {
        uint64_t units = 0;
        if (h1.size() > 1) {
            units = (uint64_t)(h1.size() - 1) * h1[0].size() * 2;
            if (!c1.empty() && !c1[0].empty()) units *= 2;
        }
        return 32 * units;
    }
};

struct BackwardStats {
    double loss = 0.0;
    double correct = 0.0;
    size_t peak_step_bytes = 0;  // live activation scratch, excludes buffers
};

// Per-step loss hook: sees the decoded post state, adds into d.
using LossHook = std::function<void(int t, const StepValues& post, DState& d, double& loss,
                                    double& correct)>;
// Per-step input-gradient sink.
using InputGradHook = std::function<void(int t, const double* dx)>;

namespace detail {

template <class BufT>
void decode_state_values(const BasicRevState<BufT>& s, bool post, StepValues& vals) {
    const int Hg = s.group_dim;
    const double scale = std::exp2(-s.rh);
    auto fill = [&](const std::vector<int32_t>& src, std::vector<double>& dst) {
        dst.resize(src.size());
        for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * scale;
    };
    (void)Hg;
    if (post) {
        fill(s.h1, vals.h1t);
        fill(s.h2, vals.h2t);
        fill(s.c1, vals.c1t);
        fill(s.c2, vals.c2t);
    } else {
        fill(s.h1, vals.h1p);
        fill(s.h2, vals.h2p);
        fill(s.c1, vals.c1p);
        fill(s.c2, vals.c2p);
    }
}

}  // namespace detail

// Makes the standard cross-entropy loss hook over the readout of [h1; h2].
// targets: T x batch, entries < 0 are masked. Gradients are mean-over-batch,
// sum-over-time; d_head accumulates into grads.head.
inline LossHook make_ce_hook(const Model& M, const std::vector<int>& targets, int batch,
                             ModelGrads* grads) {
    const Mat* head = &M.head;
    Mat* dhead = grads ? &grads->head : nullptr;
    int Hg = M.cell.cfg.group_dim();
    auto state_buf = std::make_shared<std::vector<double>>();
    auto logits_buf = std::make_shared<std::vector<double>>();
    auto dstate_buf = std::make_shared<std::vector<double>>();
    return [=](int t, const StepValues& post, DState& d, double& loss, double& correct) {
        const int D = 2 * Hg;
        state_buf->resize((size_t)batch * D);
        dstate_buf->assign((size_t)batch * D, 0.0);
        for (int n = 0; n < batch; ++n) {
            for (int j = 0; j < Hg; ++j) {
                (*state_buf)[(size_t)n * D + j] = post.h1t[(size_t)n * Hg + j];
                (*state_buf)[(size_t)n * D + Hg + j] = post.h2t[(size_t)n * Hg + j];
            }
        }
        head_loss_grad(*head, state_buf->data(), batch, targets.data() + (size_t)t * batch,
                       1.0 / batch, grads ? dstate_buf->data() : nullptr, dhead, loss, correct,
                       *logits_buf);
        if (grads)
            for (int n = 0; n < batch; ++n)
                for (int j = 0; j < Hg; ++j) {
                    d.h1[(size_t)n * Hg + j] += (*dstate_buf)[(size_t)n * D + j];
                    d.h2[(size_t)n * Hg + j] += (*dstate_buf)[(size_t)n * D + Hg + j];
                }
    };
}

// ---------------------------------------------------------------------------
// Reversible truncated BPTT. Walks t = T..1 reconstructing the previous state
// from the current one, recomputes the step's float intermediates, and
// accumulates gradients. At t = 0 the reconstructed state must equal the
// tape's snapshot bit for bit.
// ---------------------------------------------------------------------------

template <class BufT>
BackwardStats reversible_backward(const Model& M, BasicTape<BufT>& tape, const LossHook& loss_hook,
                                  ModelGrads& grads, const DState* d_final = nullptr,
                                  DState* d_initial = nullptr,
                                  const InputGradHook& input_hook = nullptr) {
    const CellConfig& cfg = M.cell.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim(), batch = tape.batch;
    const bool lstm = cfg.kind == CellKind::RevLSTM;
    const bool want_dx = !M.emb.empty() || input_hook;

    BasicRevState<BufT>& state = tape.final_state;
    DState d = d_final ? *d_final : DState::zeros(batch, Hg, lstm);
    DState d_prev = DState::zeros(batch, Hg, lstm);
    StepValues vals;
    vals.resize(batch, Hg, lstm);
    std::vector<double> x((size_t)batch * E), dx;
    if (want_dx) dx.assign((size_t)batch * E, 0.0);
    detail::BackScratch scratch;
    BackwardStats stats;

    for (int t = tape.T - 1; t >= 0; --t) {
        detail::decode_state_values(state, /*post=*/true, vals);
        if (loss_hook) loss_hook(t, vals, d, stats.loss, stats.correct);

        for (int n = 0; n < batch; ++n)
            M.build_input(tape.token(t, n), tape.marker(t, n), x.data() + (size_t)n * E);
        cell_reverse(M.cell, x.data(), state);
        detail::decode_state_values(state, /*post=*/false, vals);

        if (want_dx) std::fill(dx.begin(), dx.end(), 0.0);
        step_backward(M.cell, x.data(), vals, d, d_prev, grads.cell,
                      want_dx ? dx.data() : nullptr, scratch);
        if (!M.emb.empty()) {
            for (int n = 0; n < batch; ++n) {
                int tok = tape.token(t, n);
                if (tok < 0) continue;
                const double* dxn = dx.data() + (size_t)n * E;
                for (int c = 0; c < grads.emb.cols; ++c) grads.emb(tok, c) += dxn[c];
            }
        }
        if (input_hook) input_hook(t, dx.data());
        std::swap(d, d_prev);

        size_t live = d.bytes() + d_prev.bytes() + 8 * (vals.h1p.size() * 4 + vals.c1p.size() * 4) +
                      8 * (x.size() + dx.size()) + scratch.bytes() +
                      4 * (state.h1.size() + state.h2.size() + state.c1.size() + state.c2.size());
        stats.peak_step_bytes = std::max(stats.peak_step_bytes, live);
    }

    auto [mn, mj] = first_state_mismatch(state, tape.initial);
    if (mn != -1) {
        std::string where = mj == -2 ? "buffer storage"
                                     : "batch " + std::to_string(mn) + ", unit " +
                                           std::to_string(mj);
        throw std::runtime_error("reversible_backward: reconstructed initial state mismatch at " +
                                 where + " (nondeterminism or buffer corruption)");
    }
    if (d_initial) *d_initial = d;
    return stats;
}

// Stored-activation baseline: records every state during the forward pass,
// then runs the identical per-step backward from storage.
template <class BufT>
BasicRevState<BufT> forward_recording(const Model& M, const BasicTape<BufT>& tape,
                                      ActivationRecord& rec) {
    const int E = M.cell.cfg.input_dim;
    BasicRevState<BufT> s = tape.initial;
    rec.h1 = {s.h1};
    rec.h2 = {s.h2};
    rec.c1 = {s.c1};
    rec.c2 = {s.c2};
    std::vector<double> x((size_t)tape.batch * E);
    for (int t = 0; t < tape.T; ++t) {
        for (int n = 0; n < tape.batch; ++n)
            M.build_input(tape.token(t, n), tape.marker(t, n), x.data() + (size_t)n * E);
        cell_forward(M.cell, x.data(), s);
        rec.h1.push_back(s.h1);
        rec.h2.push_back(s.h2);
        rec.c1.push_back(s.c1);
        rec.c2.push_back(s.c2);
    }
    return s;
}

template <class BufT>
BackwardStats stored_activation_backward(const Model& M, const BasicTape<BufT>& tape,
                                         const ActivationRecord& rec, const LossHook& loss_hook,
                                         ModelGrads& grads, const DState* d_final = nullptr,
                                         DState* d_initial = nullptr) {
    const CellConfig& cfg = M.cell.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim(), batch = tape.batch;
    const bool lstm = cfg.kind == CellKind::RevLSTM;
    const double scale = std::exp2(-cfg.rh);
    const bool want_dx = !M.emb.empty();

    DState d = d_final ? *d_final : DState::zeros(batch, Hg, lstm);
    DState d_prev = DState::zeros(batch, Hg, lstm);
    StepValues vals;
    vals.resize(batch, Hg, lstm);
    std::vector<double> x((size_t)batch * E), dx;
    if (want_dx) dx.assign((size_t)batch * E, 0.0);
    detail::BackScratch scratch;
    BackwardStats stats;

    auto fill = [&](const std::vector<int32_t>& src, std::vector<double>& dst) {
        dst.resize(src.size());
        for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * scale;
    };

    for (int t = tape.T - 1; t >= 0; --t) {
        fill(rec.h1[t + 1], vals.h1t);
        fill(rec.h2[t + 1], vals.h2t);
        if (lstm) {
            fill(rec.c1[t + 1], vals.c1t);
            fill(rec.c2[t + 1], vals.c2t);
        }
        if (loss_hook) loss_hook(t, vals, d, stats.loss, stats.correct);

        for (int n = 0; n < batch; ++n)
            M.build_input(tape.token(t, n), tape.marker(t, n), x.data() + (size_t)n * E);
        fill(rec.h1[t], vals.h1p);
        fill(rec.h2[t], vals.h2p);
        if (lstm) {
            fill(rec.c1[t], vals.c1p);
            fill(rec.c2[t], vals.c2p);
        }
        if (want_dx) std::fill(dx.begin(), dx.end(), 0.0);
        step_backward(M.cell, x.data(), vals, d, d_prev, grads.cell,
                      want_dx ? dx.data() : nullptr, scratch);
        if (!M.emb.empty()) {
            for (int n = 0; n < batch; ++n) {
                int tok = tape.token(t, n);
                if (tok < 0) continue;
                const double* dxn = dx.data() + (size_t)n * E;
                for (int c = 0; c < grads.emb.cols; ++c) grads.emb(tok, c) += dxn[c];
            }
        }
        std::swap(d, d_prev);
    }
    if (d_initial) *d_initial = d;
    return stats;
}

// ---------------------------------------------------------------------------
// Float surrogate: the same cell equations in plain doubles with quantization
// disabled, so the loss is differentiable and central differences apply.
// ---------------------------------------------------------------------------

struct FloatState {
    std::vector<double> h1, h2, c1, c2;

    static FloatState zeros(const CellConfig& cfg, int batch) {
        FloatState s;
        size_t n = (size_t)batch * cfg.group_dim();
        s.h1.assign(n, 0.0);
        s.h2.assign(n, 0.0);
        if (cfg.kind == CellKind::RevLSTM) {
            s.c1.assign(n, 0.0);
            s.c2.assign(n, 0.0);
        }
        return s;
    }
};

inline void surrogate_forward_step(const CellParams& P, const double* x, FloatState& s,
                                   int batch) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    GruGates gg;
    LstmGates lg;
    std::vector<double> scratch;

    switch (cfg.kind) {
        case CellKind::RevGRU:
        case CellKind::NfRevGRU: {
            const bool nf = cfg.kind == CellKind::NfRevGRU;
            for (int n = 0; n < batch; ++n) {
                size_t off = (size_t)n * Hg;
                gru_group_gates(P.W1, P.U1, cfg, x + (size_t)n * E, s.h2.data() + off, gg, scratch);
                for (int j = 0; j < Hg; ++j)
                    s.h1[off + j] = nf ? s.h1[off + j] + (1.0 - gg.z[j]) * gg.g[j]
                                       : gg.z[j] * s.h1[off + j] + (1.0 - gg.z[j]) * gg.g[j];
                gru_group_gates(P.W2, P.U2, cfg, x + (size_t)n * E, s.h1.data() + off, gg, scratch);
                for (int j = 0; j < Hg; ++j)
                    s.h2[off + j] = nf ? s.h2[off + j] + (1.0 - gg.z[j]) * gg.g[j]
                                       : gg.z[j] * s.h2[off + j] + (1.0 - gg.z[j]) * gg.g[j];
            }
            break;
        }
        case CellKind::RevLSTM: {
            for (int n = 0; n < batch; ++n) {
                size_t off = (size_t)n * Hg;
                lstm_group_gates(P.W1, P.U1, cfg, x + (size_t)n * E, s.h2.data() + off, lg, scratch);
                for (int j = 0; j < Hg; ++j) {
                    s.c1[off + j] = lg.f[j] * s.c1[off + j] + lg.i[j] * lg.g[j];
                    s.h1[off + j] = lg.p[j] * s.h1[off + j] + lg.o[j] * std::tanh(s.c1[off + j]);
                }
                lstm_group_gates(P.W2, P.U2, cfg, x + (size_t)n * E, s.h1.data() + off, lg, scratch);
                for (int j = 0; j < Hg; ++j) {
                    s.c2[off + j] = lg.f[j] * s.c2[off + j] + lg.i[j] * lg.g[j];
                    s.h2[off + j] = lg.p[j] * s.h2[off + j] + lg.o[j] * std::tanh(s.c2[off + j]);
                }
            }
            break;
        }
        default:
            throw std::invalid_argument("surrogate_forward_step: unsupported cell kind");
    }
}

// Total loss of the surrogate model on one sequence batch (mean over batch,
// summed over steps).
inline double surrogate_loss(const Model& M, const std::vector<int>& tokens,
                             const std::vector<uint8_t>& markers, const std::vector<int>& targets,
                             int T, int batch) {
    const CellConfig& cfg = M.cell.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    FloatState s = FloatState::zeros(cfg, batch);
    std::vector<double> x((size_t)batch * E), state((size_t)batch * 2 * Hg), logits;
    double loss = 0.0, correct = 0.0;
    for (int t = 0; t < T; ++t) {
        for (int n = 0; n < batch; ++n)
            M.build_input(tokens[(size_t)t * batch + n],
                          !markers.empty() && markers[(size_t)t * batch + n], x.data() + (size_t)n * E);
        surrogate_forward_step(M.cell, x.data(), s, batch);
        for (int n = 0; n < batch; ++n)
            for (int j = 0; j < Hg; ++j) {
                state[(size_t)n * 2 * Hg + j] = s.h1[(size_t)n * Hg + j];
                state[(size_t)n * 2 * Hg + Hg + j] = s.h2[(size_t)n * Hg + j];
            }
        head_loss_grad(M.head, state.data(), batch, targets.data() + (size_t)t * batch,
                       1.0 / batch, nullptr, nullptr, loss, correct, logits);
    }
    return loss;
}

// Analytic gradients of the surrogate loss, via the shared step_backward.
inline void surrogate_grads(const Model& M, const std::vector<int>& tokens,
                            const std::vector<uint8_t>& markers, const std::vector<int>& targets,
                            int T, int batch, ModelGrads& grads) {
    const CellConfig& cfg = M.cell.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    const bool lstm = cfg.kind == CellKind::RevLSTM;

    std::vector<FloatState> traj;
    traj.reserve(T + 1);
    FloatState s = FloatState::zeros(cfg, batch);
    traj.push_back(s);
    std::vector<double> x((size_t)batch * E);
    for (int t = 0; t < T; ++t) {
        for (int n = 0; n < batch; ++n)
            M.build_input(tokens[(size_t)t * batch + n],
                          !markers.empty() && markers[(size_t)t * batch + n], x.data() + (size_t)n * E);
        surrogate_forward_step(M.cell, x.data(), s, batch);
        traj.push_back(s);
    }

    DState d = DState::zeros(batch, Hg, lstm);
    DState d_prev = DState::zeros(batch, Hg, lstm);
    StepValues vals;
    vals.resize(batch, Hg, lstm);
    detail::BackScratch scratch;
    std::vector<double> dx;
    const bool want_dx = !M.emb.empty();
    if (want_dx) dx.assign((size_t)batch * E, 0.0);
    double loss = 0.0, correct = 0.0;
    LossHook hook = make_ce_hook(M, targets, batch, &grads);

    for (int t = T - 1; t >= 0; --t) {
        vals.h1t = traj[t + 1].h1;
        vals.h2t = traj[t + 1].h2;
        vals.c1t = traj[t + 1].c1;
        vals.c2t = traj[t + 1].c2;
        hook(t, vals, d, loss, correct);
        vals.h1p = traj[t].h1;
        vals.h2p = traj[t].h2;
        vals.c1p = traj[t].c1;
        vals.c2p = traj[t].c2;
        for (int n = 0; n < batch; ++n)
            M.build_input(tokens[(size_t)t * batch + n],
                          !markers.empty() && markers[(size_t)t * batch + n], x.data() + (size_t)n * E);
        if (want_dx) std::fill(dx.begin(), dx.end(), 0.0);
        step_backward(M.cell, x.data(), vals, d, d_prev, grads.cell,
                      want_dx ? dx.data() : nullptr, scratch);
        if (want_dx) {
            for (int n = 0; n < batch; ++n) {
                int tok = tokens[(size_t)t * batch + n];
                if (tok < 0) continue;
                for (int c = 0; c < grads.emb.cols; ++c)
                    grads.emb(tok, c) += dx[(size_t)n * E + c];
            }
        }
        std::swap(d, d_prev);
    }
}

// Central-difference verification of the surrogate gradients. Returns the
// max relative error over a random subset of parameters.
inline double finite_diff_check(Model& M, const std::vector<int>& tokens,
                                const std::vector<uint8_t>& markers,
                                const std::vector<int>& targets, int T, int batch, double eps,
                                int samples_per_mat, std::mt19937_64& rng) {
    ModelGrads grads = ModelGrads::like(M);
    surrogate_grads(M, tokens, markers, targets, T, batch, grads);

    double max_rel = 0.0;
    auto mats = model_mats(M);
    auto gmats = grad_mats(M, grads);
    for (size_t mi = 0; mi < mats.size(); ++mi) {
        Mat& m = *mats[mi];
        Mat& g = *gmats[mi];
        for (int s = 0; s < samples_per_mat; ++s) {
            size_t idx = rng() % m.a.size();
            double saved = m.a[idx];
            m.a[idx] = saved + eps;
            double up = surrogate_loss(M, tokens, markers, targets, T, batch);
            m.a[idx] = saved - eps;
            double dn = surrogate_loss(M, tokens, markers, targets, T, batch);
            m.a[idx] = saved;
            double fd = (up - dn) / (2 * eps);
            double an = g.a[idx];
            double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// Optimizers.
// ---------------------------------------------------------------------------

// Returns the pre-clip global norm; rescales grads in place when above max.
inline double clip_global_norm_mats(const std::vector<Mat*>& gmats, double max_norm) {
    double sq = 0.0;
    for (Mat* gm : gmats)
        for (double v : gm->a) sq += v * v;
    double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        double s = max_norm / norm;
        for (Mat* gm : gmats)
            for (double& v : gm->a) v *= s;
    }
    return norm;
}

inline double clip_global_norm(Model& m, ModelGrads& g, double max_norm) {
    return clip_global_norm_mats(grad_mats(m, g), max_norm);
}

inline void sgd_step_mats(const std::vector<Mat*>& mats, const std::vector<Mat*>& gmats,
                          double lr) {
    for (size_t i = 0; i < mats.size(); ++i) axpy(*mats[i], -lr, *gmats[i]);
}

inline void sgd_step(Model& m, ModelGrads& g, double lr) {
    sgd_step_mats(model_mats(m), grad_mats(m, g), lr);
}

struct AdamState {
    std::vector<Mat> m, v;
    int64_t t = 0;

    static AdamState like_mats(const std::vector<Mat*>& gmats) {
        AdamState a;
        for (Mat* gm : gmats) {
            a.m.emplace_back(gm->rows, gm->cols);
            a.v.emplace_back(gm->rows, gm->cols);
        }
        return a;
    }
    static AdamState like(Model& model, ModelGrads& g) { return like_mats(grad_mats(model, g)); }
};

inline void adam_step_mats(const std::vector<Mat*>& mats, const std::vector<Mat*>& gmats,
                           AdamState& st, double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8) {
    ++st.t;
    double bc1 = 1.0 - std::pow(beta1, (double)st.t);
    double bc2 = 1.0 - std::pow(beta2, (double)st.t);
    for (size_t i = 0; i < mats.size(); ++i) {
        Mat& p = *mats[i];
        Mat& grad = *gmats[i];
        Mat& m1 = st.m[i];
        Mat& m2 = st.v[i];
        for (size_t k = 0; k < p.a.size(); ++k) {
            m1.a[k] = beta1 * m1.a[k] + (1 - beta1) * grad.a[k];
            m2.a[k] = beta2 * m2.a[k] + (1 - beta2) * grad.a[k] * grad.a[k];
            double mhat = m1.a[k] / bc1;
            double vhat = m2.a[k] / bc2;
            p.a[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

inline void adam_step(Model& model, ModelGrads& g, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
    adam_step_mats(model_mats(model), grad_mats(model, g), st, lr, beta1, beta2, eps);
}

}  // namespace revrnn
