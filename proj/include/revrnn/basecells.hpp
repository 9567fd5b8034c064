// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "revrnn/revgrad.hpp"

namespace revrnn {

// Non-reversible float baselines. They train through stored activations and
// exist purely as reference points for the reversible models.

struct BaseState {
    std::vector<double> h, c;

    static BaseState zeros(const CellConfig& cfg, int batch) {
        BaseState s;
        s.h.assign((size_t)batch * cfg.hidden, 0.0);
        if (cfg.kind == CellKind::LSTM) s.c.assign((size_t)batch * cfg.hidden, 0.0);
        return s;
    }
};

struct BaseLstmGates {
    std::vector<double> f, i, o, g;
    void resize(int h) {
        f.resize(h);
        i.resize(h);
        o.resize(h);
        g.resize(h);
    }
};

inline void base_lstm_gates(const Mat& W, const Mat& U, const CellConfig& cfg, const double* x,
                            const double* h, BaseLstmGates& out, std::vector<double>& scratch) {
    const int E = cfg.input_dim, H = cfg.hidden;
    out.resize(H);
    scratch.resize((size_t)(E + H) + 3 * H);
    double* v = scratch.data();
    double* a = v + (E + H);
    for (int i = 0; i < E; ++i) v[i] = x[i];
    for (int j = 0; j < H; ++j) v[E + j] = h[j];
    matvec(W, v, a);
    for (int j = 0; j < H; ++j) {
        out.f[j] = detail::sigmoid(a[j]);
        out.i[j] = detail::sigmoid(a[H + j]);
        out.o[j] = detail::sigmoid(a[2 * H + j]);
    }
    matvec(U, v, a);
    for (int j = 0; j < H; ++j) out.g[j] = std::tanh(a[j]);
}

inline void base_forward_step(const CellParams& P, const double* x, BaseState& s, int batch) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, H = cfg.hidden;
    std::vector<double> scratch;
    if (cfg.kind == CellKind::GRU) {
        GruGates gg;
        for (int n = 0; n < batch; ++n) {
            size_t off = (size_t)n * H;
            gru_group_gates(P.W1, P.U1, cfg, x + (size_t)n * E, s.h.data() + off, gg, scratch);
            for (int j = 0; j < H; ++j)
                s.h[off + j] = gg.z[j] * s.h[off + j] + (1.0 - gg.z[j]) * gg.g[j];
        }
    } else if (cfg.kind == CellKind::LSTM) {
        BaseLstmGates lg;
        for (int n = 0; n < batch; ++n) {
            size_t off = (size_t)n * H;
            base_lstm_gates(P.W1, P.U1, cfg, x + (size_t)n * E, s.h.data() + off, lg, scratch);
            for (int j = 0; j < H; ++j) {
                s.c[off + j] = lg.f[j] * s.c[off + j] + lg.i[j] * lg.g[j];
                s.h[off + j] = lg.o[j] * std::tanh(s.c[off + j]);
            }
        }
    } else {
        throw std::invalid_argument("base_forward_step: not a baseline cell");
    }
}

namespace detail {

inline void base_lstm_backward(const Mat& W, const Mat& U, const CellConfig& cfg, const double* x,
                               const double* hp, const double* cp, const double* ct,
                               const BaseLstmGates& g, const double* dh, const double* dc_in,
                               double* d_hp, double* d_cp, Mat& dW, Mat& dU, double* dx,
                               BackScratch& s) {
    const int E = cfg.input_dim, H = cfg.hidden;
    s.v.resize(E + H);
    s.du.assign(E + H, 0.0);
    s.dv.assign(E + H, 0.0);
    s.pre.resize(3 * H);
    s.acc.resize(H);
    double* dpre_g = s.acc.data();
    for (int i = 0; i < E; ++i) s.v[i] = x[i];
    for (int j = 0; j < H; ++j) s.v[E + j] = hp[j];

    for (int j = 0; j < H; ++j) {
        double tc = std::tanh(ct[j]);
        double do_ = dh[j] * tc;
        double dc = dc_in[j] + dh[j] * g.o[j] * (1.0 - tc * tc);
        double df = dc * cp[j];
        double di = dc * g.g[j];
        double dg = dc * g.i[j];
        d_cp[j] = dc * g.f[j];
        d_hp[j] = 0.0;
        dpre_g[j] = dg * (1.0 - g.g[j] * g.g[j]);
        s.pre[j] = df * g.f[j] * (1.0 - g.f[j]);
        s.pre[H + j] = di * g.i[j] * (1.0 - g.i[j]);
        s.pre[2 * H + j] = do_ * g.o[j] * (1.0 - g.o[j]);
    }
    outer_add(dU, dpre_g, s.v.data());
    matvec_t_add(U, dpre_g, s.du.data());
    outer_add(dW, s.pre.data(), s.v.data());
    matvec_t_add(W, s.pre.data(), s.dv.data());
    if (dx)
        for (int i = 0; i < E; ++i) dx[i] += s.du[i] + s.dv[i];
    for (int j = 0; j < H; ++j) d_hp[j] += s.du[E + j] + s.dv[E + j];
}

}  // namespace detail

// Stored-activation training pass for the baselines: forward recording float
// states, cross-entropy at every step, standard BPTT.
struct BaseRun {
    std::vector<BaseState> traj;  // T+1 states
    double loss = 0.0, correct = 0.0;

    uint64_t stored_bits(const CellConfig& cfg, int T, int batch) const {
        uint64_t units = (uint64_t)cfg.hidden * (cfg.kind == CellKind::LSTM ? 2 : 1);
        return 32ull * T * units * batch;
    }
};

inline BaseRun base_train_pass(const Model& M, const std::vector<int>& tokens,
                               const std::vector<uint8_t>& markers,
                               const std::vector<int>& targets, int T, int batch,
                               ModelGrads* grads, const BaseState* initial = nullptr) {
    const CellConfig& cfg = M.cell.cfg;
    const int E = cfg.input_dim, H = cfg.hidden;
    BaseRun run;
    run.traj.reserve(T + 1);
    BaseState s = initial ? *initial : BaseState::zeros(cfg, batch);
    run.traj.push_back(s);
    std::vector<double> x((size_t)batch * E), logits;
    for (int t = 0; t < T; ++t) {
        for (int n = 0; n < batch; ++n)
            M.build_input(tokens[(size_t)t * batch + n],
                          !markers.empty() && markers[(size_t)t * batch + n],
                          x.data() + (size_t)n * E);
        base_forward_step(M.cell, x.data(), s, batch);
        run.traj.push_back(s);
        head_loss_grad(M.head, s.h.data(), batch, targets.data() + (size_t)t * batch, 1.0 / batch,
                       nullptr, nullptr, run.loss, run.correct, logits);
    }
    if (!grads) return run;

    std::vector<double> dh((size_t)batch * H, 0.0), dc, dhp((size_t)batch * H),
        dcp, dstate((size_t)batch * H), dx((size_t)batch * E);
    if (cfg.kind == CellKind::LSTM) {
        dc.assign((size_t)batch * H, 0.0);
        dcp.resize((size_t)batch * H);
    }
    detail::BackScratch scratch;
    GruGates gg;
    BaseLstmGates lg;
    std::vector<double> gate_scratch;
    const bool want_dx = !M.emb.empty();

    for (int t = T - 1; t >= 0; --t) {
        const BaseState& post = run.traj[t + 1];
        const BaseState& prev = run.traj[t];
        std::fill(dstate.begin(), dstate.end(), 0.0);
        double dummy_loss = 0.0, dummy_correct = 0.0;
        head_loss_grad(M.head, post.h.data(), batch, targets.data() + (size_t)t * batch,
                       1.0 / batch, dstate.data(), &grads->head, dummy_loss, dummy_correct,
                       logits);
        for (size_t i = 0; i < dh.size(); ++i) dh[i] += dstate[i];

        for (int n = 0; n < batch; ++n)
            M.build_input(tokens[(size_t)t * batch + n],
                          !markers.empty() && markers[(size_t)t * batch + n],
                          x.data() + (size_t)n * E);
        if (want_dx) std::fill(dx.begin(), dx.end(), 0.0);

        for (int n = 0; n < batch; ++n) {
            size_t off = (size_t)n * H;
            const double* xn = x.data() + (size_t)n * E;
            double* dxn = want_dx ? dx.data() + (size_t)n * E : nullptr;
            if (cfg.kind == CellKind::GRU) {
                gru_group_gates(M.cell.W1, M.cell.U1, cfg, xn, prev.h.data() + off, gg,
                                gate_scratch);
                // Single group coupled to itself: pass the same output array
                // for the direct and gate-side previous-state gradients.
                detail::gru_group_backward(M.cell.W1, M.cell.U1, cfg, xn, prev.h.data() + off,
                                           prev.h.data() + off, gg, dh.data() + off, false,
                                           dhp.data() + off, dhp.data() + off, grads->cell.W1,
                                           grads->cell.U1, dxn, scratch);
            } else {
                base_lstm_gates(M.cell.W1, M.cell.U1, cfg, xn, prev.h.data() + off, lg,
                                gate_scratch);
                detail::base_lstm_backward(M.cell.W1, M.cell.U1, cfg, xn, prev.h.data() + off,
                                           prev.c.data() + off, post.c.data() + off, lg,
                                           dh.data() + off, dc.data() + off, dhp.data() + off,
                                           dcp.data() + off, grads->cell.W1, grads->cell.U1, dxn,
                                           scratch);
            }
        }
        if (want_dx) {
            for (int n = 0; n < batch; ++n) {
                int tok = tokens[(size_t)t * batch + n];
                if (tok < 0) continue;
                for (int c = 0; c < grads->emb.cols; ++c)
                    grads->emb(tok, c) += dx[(size_t)n * E + c];
            }
        }
        std::swap(dh, dhp);
        if (cfg.kind == CellKind::LSTM) std::swap(dc, dcp);
    }
    return run;
}

// Loss of the baseline on given data, no gradients.
inline double base_loss(const Model& M, const std::vector<int>& tokens,
                        const std::vector<uint8_t>& markers, const std::vector<int>& targets,
                        int T, int batch) {
    return base_train_pass(M, tokens, markers, targets, T, batch, nullptr).loss;
}

}  // namespace revrnn
