// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "revrnn/fixedpoint.hpp"
#include "revrnn/matrix.hpp"
#include "revrnn/revbuffer.hpp"

namespace revrnn {

enum class CellKind { RevGRU, RevLSTM, NfRevGRU, DfRevGRU, GRU, LSTM };

inline const char* cell_name(CellKind k) {
    switch (k) {
        case CellKind::RevGRU: return "revgru";
        case CellKind::RevLSTM: return "revlstm";
        case CellKind::NfRevGRU: return "nf-revgru";
        case CellKind::DfRevGRU: return "df-revgru";
        case CellKind::GRU: return "gru";
        case CellKind::LSTM: return "lstm";
    }
    return "?";
}

inline CellKind cell_from_name(const std::string& s) {
    for (CellKind k : {CellKind::RevGRU, CellKind::RevLSTM, CellKind::NfRevGRU,
                       CellKind::DfRevGRU, CellKind::GRU, CellKind::LSTM})
        if (s == cell_name(k)) return k;
    throw std::invalid_argument("unknown cell type: " + s);
}

inline bool is_reversible(CellKind k) {
    return k == CellKind::RevGRU || k == CellKind::RevLSTM || k == CellKind::NfRevGRU ||
           k == CellKind::DfRevGRU;
}

struct CellConfig {
    CellKind kind = CellKind::RevGRU;
    int input_dim = 0;   // E
    int hidden = 0;      // H, total units across both groups
    int rh = kDefaultHiddenBits;
    int rz = kDefaultGateBits;
    double forget_floor = 0.0;  // a; gates restricted to (a, 1)
    int df_max_bits = 3;        // F, DfRevGRU only

    int group_dim() const { return is_reversible(kind) ? hidden / 2 : hidden; }

    void validate() const {
        if (input_dim <= 0 || hidden <= 0)
            throw std::invalid_argument("cell config: dims must be positive");
        if (is_reversible(kind) && hidden % 2 != 0)
            throw std::invalid_argument("cell config: reversible cells need an even hidden size");
        if (rz >= rh)
            throw std::invalid_argument("cell config: R_Z must be smaller than R_H");
        if (rh < 1 || rh > 30 || rz < 1)
            throw std::invalid_argument("cell config: radix points out of range");
        if (!(forget_floor >= 0.0 && forget_floor < 1.0))
            throw std::invalid_argument("cell config: forget floor outside [0,1)");
        if (kind == CellKind::DfRevGRU && (df_max_bits < 1 || df_max_bits > 20))
            throw std::invalid_argument("cell config: df_max_bits outside [1,20]");
    }
};

// Weight matrices. Reversible cells use one set per group; the baseline GRU /
// LSTM use W1/U1 only. DfRevGRU uses W* for the reset gate and Q* for the
// forget-exponent selector. Biases are omitted throughout.
struct CellParams {
    CellConfig cfg;
    Mat W1, U1, W2, U2, Q1, Q2;

    static CellParams init(const CellConfig& cfg, std::mt19937_64& rng) {
        cfg.validate();
        CellParams p;
        p.cfg = cfg;
        int E = cfg.input_dim, Hg = cfg.group_dim();
        double bound = 1.0 / std::sqrt((double)cfg.hidden);
        auto make = [&](int rows, int cols) {
            Mat m(rows, cols);
            init_uniform(m, rng, bound);
            return m;
        };
        switch (cfg.kind) {
            case CellKind::RevGRU:
            case CellKind::NfRevGRU:
                p.W1 = make(2 * Hg, E + Hg);
                p.U1 = make(Hg, E + Hg);
                p.W2 = make(2 * Hg, E + Hg);
                p.U2 = make(Hg, E + Hg);
                break;
            case CellKind::RevLSTM:
                p.W1 = make(4 * Hg, E + Hg);
                p.U1 = make(Hg, E + Hg);
                p.W2 = make(4 * Hg, E + Hg);
                p.U2 = make(Hg, E + Hg);
                break;
            case CellKind::DfRevGRU:
                p.W1 = make(Hg, E + Hg);  // reset gate
                p.U1 = make(Hg, E + Hg);
                p.W2 = make(Hg, E + Hg);
                p.U2 = make(Hg, E + Hg);
                p.Q1 = make((cfg.df_max_bits + 1) * Hg, E + Hg);
                p.Q2 = make((cfg.df_max_bits + 1) * Hg, E + Hg);
                break;
            case CellKind::GRU:
                p.W1 = make(2 * Hg, E + Hg);
                p.U1 = make(Hg, E + Hg);
                break;
            case CellKind::LSTM:
                p.W1 = make(3 * Hg, E + Hg);
                p.U1 = make(Hg, E + Hg);
                break;
        }
        return p;
    }

    std::vector<const Mat*> matrices() const {
        std::vector<const Mat*> v;
        for (const Mat* m : {&W1, &U1, &W2, &U2, &Q1, &Q2})
            if (!m->empty()) v.push_back(m);
        return v;
    }
    std::vector<Mat*> matrices() {
        std::vector<Mat*> v;
        for (Mat* m : {&W1, &U1, &W2, &U2, &Q1, &Q2})
            if (!m->empty()) v.push_back(m);
        return v;
    }
};

// Gradient tensors matching CellParams shapes, zero-initialized.
struct CellGrads {
    Mat W1, U1, W2, U2, Q1, Q2;

    static CellGrads like(const CellParams& p) {
        CellGrads g;
        g.W1 = Mat(p.W1.rows, p.W1.cols);
        g.U1 = Mat(p.U1.rows, p.U1.cols);
        g.W2 = Mat(p.W2.rows, p.W2.cols);
        g.U2 = Mat(p.U2.rows, p.U2.cols);
        g.Q1 = Mat(p.Q1.rows, p.Q1.cols);
        g.Q2 = Mat(p.Q2.rows, p.Q2.cols);
        return g;
    }
    void zero() {
        for (Mat* m : {&W1, &U1, &W2, &U2, &Q1, &Q2}) m->zero();
    }
    std::vector<Mat*> matrices() {
        std::vector<Mat*> v;
        for (Mat* m : {&W1, &U1, &W2, &U2, &Q1, &Q2})
            if (!m->empty()) v.push_back(m);
        return v;
    }
};

// ---------------------------------------------------------------------------
// Batched reversible state: two fixed-point groups (plus cell groups for the
// RevLSTM), each with its own information buffer, and bit stacks for the
// discrete-forgetting variant.
// ---------------------------------------------------------------------------

template <class BufT>
struct BasicRevState {
    CellKind kind = CellKind::RevGRU;
    int batch = 0;
    int group_dim = 0;  // Hg
    int rh = kDefaultHiddenBits, rz = kDefaultGateBits;
    std::vector<int32_t> h1, h2, c1, c2;  // batch x Hg, row-major
    BufT bh1, bh2, bc1, bc2;
    BitStack df1, df2;

    static BasicRevState zeros(const CellConfig& cfg, int batch) {
        cfg.validate();
        BasicRevState s;
        s.kind = cfg.kind;
        s.batch = batch;
        s.group_dim = cfg.group_dim();
        s.rh = cfg.rh;
        s.rz = cfg.rz;
        s.h1.assign((size_t)batch * s.group_dim, 0);
        s.h2.assign((size_t)batch * s.group_dim, 0);
        if (cfg.kind == CellKind::RevLSTM) {
            s.c1.assign((size_t)batch * s.group_dim, 0);
            s.c2.assign((size_t)batch * s.group_dim, 0);
            s.bc1 = BufT(batch, s.group_dim, cfg.rz, cfg.rh);
            s.bc2 = BufT(batch, s.group_dim, cfg.rz, cfg.rh);
        }
        if (cfg.kind == CellKind::RevGRU || cfg.kind == CellKind::RevLSTM) {
            s.bh1 = BufT(batch, s.group_dim, cfg.rz, cfg.rh);
            s.bh2 = BufT(batch, s.group_dim, cfg.rz, cfg.rh);
        }
        return s;
    }

    uint64_t buffer_bits() const {
        uint64_t total = bh1.measured_bits() + bh2.measured_bits();
        if (kind == CellKind::RevLSTM) total += bc1.measured_bits() + bc2.measured_bits();
        if (kind == CellKind::DfRevGRU) total += df1.measured_bits() + df2.measured_bits();
        return total;
    }

    double ideal_buffer_bits() const {
        double total = bh1.ideal_bits() + bh2.ideal_bits();
        if (kind == CellKind::RevLSTM) total += bc1.ideal_bits() + bc2.ideal_bits();
        return total;
    }

    // Total state units per batch element (h groups, plus c for the RevLSTM).
    int total_state_units() const {
        return kind == CellKind::RevLSTM ? 4 * group_dim : 2 * group_dim;
    }
};

using RevState = BasicRevState<BufferTensor>;
using BigRevState = BasicRevState<BigBufferTensor>;

// Raw-integer identity including buffers; ideal-bit accumulators excluded.
template <class BufT>
bool states_identical(const BasicRevState<BufT>& a, const BasicRevState<BufT>& b) {
    return a.kind == b.kind && a.h1 == b.h1 && a.h2 == b.h2 && a.c1 == b.c1 && a.c2 == b.c2 &&
           same_storage(a.bh1, b.bh1) && same_storage(a.bh2, b.bh2) &&
           same_storage(a.bc1, b.bc1) && same_storage(a.bc2, b.bc2) && a.df1 == b.df1 &&
           a.df2 == b.df2;
}

// First differing unit between two states, for diagnostics: {-1,-1} if equal.
template <class BufT>
std::pair<int, int> first_state_mismatch(const BasicRevState<BufT>& a,
                                         const BasicRevState<BufT>& b) {
    auto scan = [&](const std::vector<int32_t>& x, const std::vector<int32_t>& y) {
        for (size_t i = 0; i < x.size(); ++i)
            if (x[i] != y[i]) return (int)i;
        return -1;
    };
    for (auto [xa, xb] : {std::pair{&a.h1, &b.h1}, std::pair{&a.h2, &b.h2},
                          std::pair{&a.c1, &b.c1}, std::pair{&a.c2, &b.c2}}) {
        int i = scan(*xa, *xb);
        if (i >= 0) return {i / a.group_dim, i % a.group_dim};
    }
    if (!states_identical(a, b)) return {0, -2};  // buffer-only mismatch
    return {-1, -1};
}

// ---------------------------------------------------------------------------
// Shared float primitives. The reverse pass and both backward paths recompute
// these expressions; they must be the exact functions the forward pass used.
// ---------------------------------------------------------------------------

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void decode_vec(const int32_t* raw, int count, int rh, double* out) {
    const double scale = std::exp2(-rh);
    for (int i = 0; i < count; ++i) out[i] = raw[i] * scale;
}

}  // namespace detail

// Gate activations for one RevGRU/NF-RevGRU group, one batch element.
struct GruGates {
    std::vector<double> z, zsig, r, g;  // Hg each; z is post-floor
    void resize(int hg) {
        z.resize(hg);
        zsig.resize(hg);
        r.resize(hg);
        g.resize(hg);
    }
};

inline void gru_group_gates(const Mat& W, const Mat& U, const CellConfig& cfg, const double* x,
                            const double* h_other, GruGates& out, std::vector<double>& scratch) {
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    out.resize(Hg);
    scratch.resize((size_t)std::max(E + Hg, 2 * Hg) + 2 * Hg);
    double* v = scratch.data();
    double* a = v + (E + Hg);
    for (int i = 0; i < E; ++i) v[i] = x[i];
    for (int j = 0; j < Hg; ++j) v[E + j] = h_other[j];
    matvec(W, v, a);
    for (int j = 0; j < Hg; ++j) {
        out.zsig[j] = detail::sigmoid(a[j]);
        out.z[j] = (1.0 - cfg.forget_floor) * out.zsig[j] + cfg.forget_floor;
        out.r[j] = detail::sigmoid(a[Hg + j]);
    }
    for (int j = 0; j < Hg; ++j) v[E + j] = out.r[j] * h_other[j];
    matvec(U, v, a);
    for (int j = 0; j < Hg; ++j) out.g[j] = std::tanh(a[j]);
}

// Gate activations for one RevLSTM group, one batch element.
struct LstmGates {
    std::vector<double> f, fsig, i, o, p, psig, g;  // f and p are post-floor
    void resize(int hg) {
        f.resize(hg);
        fsig.resize(hg);
        i.resize(hg);
        o.resize(hg);
        p.resize(hg);
        psig.resize(hg);
        g.resize(hg);
    }
};

inline void lstm_group_gates(const Mat& W, const Mat& U, const CellConfig& cfg, const double* x,
                             const double* h_other, LstmGates& out, std::vector<double>& scratch) {
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    out.resize(Hg);
    scratch.resize((size_t)(E + Hg) + 4 * Hg);
    double* v = scratch.data();
    double* a = v + (E + Hg);
    for (int i = 0; i < E; ++i) v[i] = x[i];
    for (int j = 0; j < Hg; ++j) v[E + j] = h_other[j];
    matvec(W, v, a);
    const double floor = cfg.forget_floor;
    for (int j = 0; j < Hg; ++j) {
        out.fsig[j] = detail::sigmoid(a[j]);
        out.f[j] = (1.0 - floor) * out.fsig[j] + floor;
        out.i[j] = detail::sigmoid(a[Hg + j]);
        out.o[j] = detail::sigmoid(a[2 * Hg + j]);
        out.psig[j] = detail::sigmoid(a[3 * Hg + j]);
        out.p[j] = (1.0 - floor) * out.psig[j] + floor;
    }
    matvec(U, v, a);
    for (int j = 0; j < Hg; ++j) out.g[j] = std::tanh(a[j]);
}

// Gate activations for one DfRevGRU group: reset + candidate as in the GRU,
// and a deterministic argmax over ReLU scores picking the forget exponent
// k in {0..F}, i.e. z = 2^-k.
struct DfGates {
    std::vector<double> r, g;
    std::vector<int> k;
    void resize(int hg) {
        r.resize(hg);
        g.resize(hg);
        k.resize(hg);
    }
};

inline void df_group_gates(const Mat& Wr, const Mat& U, const Mat& Q, const CellConfig& cfg,
                           const double* x, const double* h_other, DfGates& out,
                           std::vector<double>& scratch) {
    const int E = cfg.input_dim, Hg = cfg.group_dim(), F = cfg.df_max_bits;
    out.resize(Hg);
    scratch.resize((size_t)(E + Hg) + (size_t)(F + 1) * Hg);
    double* v = scratch.data();
    double* s = v + (E + Hg);
    for (int i = 0; i < E; ++i) v[i] = x[i];
    for (int j = 0; j < Hg; ++j) v[E + j] = h_other[j];
    matvec(Q, v, s);
    for (int j = 0; j < Hg; ++j) {
        int best = 0;
        double best_score = std::max(0.0, s[(size_t)j * (F + 1)]);
        for (int kk = 1; kk <= F; ++kk) {
            double sc = std::max(0.0, s[(size_t)j * (F + 1) + kk]);
            if (sc > best_score) {
                best_score = sc;
                best = kk;
            }
        }
        out.k[j] = best;
    }
    matvec(Wr, v, s);
    for (int j = 0; j < Hg; ++j) out.r[j] = detail::sigmoid(s[j]);
    for (int j = 0; j < Hg; ++j) v[E + j] = out.r[j] * h_other[j];
    matvec(U, v, s);
    for (int j = 0; j < Hg; ++j) out.g[j] = std::tanh(s[j]);
}

// ---------------------------------------------------------------------------
// Forward / reverse single-step transitions.
// x is batch x E row-major. States advance in place.
// ---------------------------------------------------------------------------

namespace detail {

inline int32_t narrow_state(int64_t raw, const char* what) {
    return checked_narrow(raw, what);
}

}  // namespace detail

template <class BufT>
void revgru_forward(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    GruGates gates;
    std::vector<double> scratch, hdec(Hg);
    const bool nf = cfg.kind == CellKind::NfRevGRU;

    if (!nf) s.bh1.begin_step();
    for (int n = 0; n < s.batch; ++n) {
        detail::decode_vec(&s.h2[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
        gru_group_gates(P.W1, P.U1, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
        for (int j = 0; j < Hg; ++j) {
            size_t idx = (size_t)n * Hg + j;
            if (nf) {
                FixedPoint add = encode_hidden((1.0 - gates.z[j]) * gates.g[j], cfg.rh);
                s.h1[idx] = detail::narrow_state((int64_t)s.h1[idx] + add.raw(), "nf_revgru_forward");
            } else {
                ForgetGate zq = encode_gate(gates.z[j], cfg.rz);
                FixedPoint add = encode_hidden((1.0 - decode(zq)) * gates.g[j], cfg.rh);
                int64_t raw = s.bh1.forward_mul(n, j, s.h1[idx], zq.raw());
                s.h1[idx] = detail::narrow_state(raw + add.raw(), "revgru_forward");
            }
        }
    }

    if (!nf) s.bh2.begin_step();
    for (int n = 0; n < s.batch; ++n) {
        detail::decode_vec(&s.h1[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
        gru_group_gates(P.W2, P.U2, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
        for (int j = 0; j < Hg; ++j) {
            size_t idx = (size_t)n * Hg + j;
            if (nf) {
                FixedPoint add = encode_hidden((1.0 - gates.z[j]) * gates.g[j], cfg.rh);
                s.h2[idx] = detail::narrow_state((int64_t)s.h2[idx] + add.raw(), "nf_revgru_forward");
            } else {
                ForgetGate zq = encode_gate(gates.z[j], cfg.rz);
                FixedPoint add = encode_hidden((1.0 - decode(zq)) * gates.g[j], cfg.rh);
                int64_t raw = s.bh2.forward_mul(n, j, s.h2[idx], zq.raw());
                s.h2[idx] = detail::narrow_state(raw + add.raw(), "revgru_forward");
            }
        }
    }
}

template <class BufT>
void revgru_reverse(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    GruGates gates;
    std::vector<double> scratch, hdec(Hg);
    const bool nf = cfg.kind == CellKind::NfRevGRU;

    for (int n = 0; n < s.batch; ++n) {
        detail::decode_vec(&s.h1[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
        gru_group_gates(P.W2, P.U2, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
        for (int j = 0; j < Hg; ++j) {
            size_t idx = (size_t)n * Hg + j;
            if (nf) {
                FixedPoint add = encode_hidden((1.0 - gates.z[j]) * gates.g[j], cfg.rh);
                s.h2[idx] = detail::narrow_state((int64_t)s.h2[idx] - add.raw(), "nf_revgru_reverse");
            } else {
                ForgetGate zq = encode_gate(gates.z[j], cfg.rz);
                FixedPoint add = encode_hidden((1.0 - decode(zq)) * gates.g[j], cfg.rh);
                int64_t raw = (int64_t)s.h2[idx] - add.raw();
                raw = s.bh2.reverse_mul(n, j, raw, zq.raw());
                s.h2[idx] = detail::narrow_state(raw, "revgru_reverse");
            }
        }
    }
    if (!nf) s.bh2.end_reverse_step();

    for (int n = 0; n < s.batch; ++n) {
        detail::decode_vec(&s.h2[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
        gru_group_gates(P.W1, P.U1, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
        for (int j = 0; j < Hg; ++j) {
            size_t idx = (size_t)n * Hg + j;
            if (nf) {
                FixedPoint add = encode_hidden((1.0 - gates.z[j]) * gates.g[j], cfg.rh);
                s.h1[idx] = detail::narrow_state((int64_t)s.h1[idx] - add.raw(), "nf_revgru_reverse");
            } else {
                ForgetGate zq = encode_gate(gates.z[j], cfg.rz);
                FixedPoint add = encode_hidden((1.0 - decode(zq)) * gates.g[j], cfg.rh);
                int64_t raw = (int64_t)s.h1[idx] - add.raw();
                raw = s.bh1.reverse_mul(n, j, raw, zq.raw());
                s.h1[idx] = detail::narrow_state(raw, "revgru_reverse");
            }
        }
    }
    if (!nf) s.bh1.end_reverse_step();
}

template <class BufT>
void revlstm_forward(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    LstmGates gates;
    std::vector<double> scratch, hdec(Hg);
    const double hscale = std::exp2(-cfg.rh);

    s.bc1.begin_step();
    s.bh1.begin_step();
    s.bc2.begin_step();
    s.bh2.begin_step();

    auto group = [&](const Mat& W, const Mat& U, std::vector<int32_t>& h, std::vector<int32_t>& c,
                     BufT& bh, BufT& bc, const std::vector<int32_t>& h_other) {
        for (int n = 0; n < s.batch; ++n) {
            detail::decode_vec(&h_other[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
            lstm_group_gates(W, U, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
            for (int j = 0; j < Hg; ++j) {
                size_t idx = (size_t)n * Hg + j;
                ForgetGate fq = encode_gate(gates.f[j], cfg.rz);
                FixedPoint add_ig = encode_hidden(gates.i[j] * gates.g[j], cfg.rh);
                int64_t craw = bc.forward_mul(n, j, c[idx], fq.raw());
                c[idx] = detail::narrow_state(craw + add_ig.raw(), "revlstm_forward(c)");

                ForgetGate pq = encode_gate(gates.p[j], cfg.rz);
                double tanh_c = std::tanh(c[idx] * hscale);
                FixedPoint add_ot = encode_hidden(gates.o[j] * tanh_c, cfg.rh);
                int64_t hraw = bh.forward_mul(n, j, h[idx], pq.raw());
                h[idx] = detail::narrow_state(hraw + add_ot.raw(), "revlstm_forward(h)");
            }
        }
    };

    group(P.W1, P.U1, s.h1, s.c1, s.bh1, s.bc1, s.h2);
    group(P.W2, P.U2, s.h2, s.c2, s.bh2, s.bc2, s.h1);
}

template <class BufT>
void revlstm_reverse(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim();
    LstmGates gates;
    std::vector<double> scratch, hdec(Hg);
    const double hscale = std::exp2(-cfg.rh);

    // Reverse of the forward schedule: group 2 (gates from h1^(t)), h before
    // c within the group since the h additive needs the current-step c.
    auto group = [&](const Mat& W, const Mat& U, std::vector<int32_t>& h, std::vector<int32_t>& c,
                     BufT& bh, BufT& bc, const std::vector<int32_t>& h_other) {
        for (int n = 0; n < s.batch; ++n) {
            detail::decode_vec(&h_other[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
            lstm_group_gates(W, U, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
            for (int j = 0; j < Hg; ++j) {
                size_t idx = (size_t)n * Hg + j;
                ForgetGate pq = encode_gate(gates.p[j], cfg.rz);
                double tanh_c = std::tanh(c[idx] * hscale);
                FixedPoint add_ot = encode_hidden(gates.o[j] * tanh_c, cfg.rh);
                int64_t hraw = (int64_t)h[idx] - add_ot.raw();
                hraw = bh.reverse_mul(n, j, hraw, pq.raw());
                h[idx] = detail::narrow_state(hraw, "revlstm_reverse(h)");

                ForgetGate fq = encode_gate(gates.f[j], cfg.rz);
                FixedPoint add_ig = encode_hidden(gates.i[j] * gates.g[j], cfg.rh);
                int64_t craw = (int64_t)c[idx] - add_ig.raw();
                craw = bc.reverse_mul(n, j, craw, fq.raw());
                c[idx] = detail::narrow_state(craw, "revlstm_reverse(c)");
            }
        }
        bh.end_reverse_step();
        bc.end_reverse_step();
    };

    group(P.W2, P.U2, s.h2, s.c2, s.bh2, s.bc2, s.h1);
    group(P.W1, P.U1, s.h1, s.c1, s.bh1, s.bc1, s.h2);
}

template <class BufT>
void df_revgru_forward(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim(), F = cfg.df_max_bits;
    DfGates gates;
    std::vector<double> scratch, hdec(Hg);

    auto group = [&](const Mat& Wr, const Mat& U, const Mat& Q, std::vector<int32_t>& h,
                     BitStack& stack, const std::vector<int32_t>& h_other) {
        for (int n = 0; n < s.batch; ++n) {
            detail::decode_vec(&h_other[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
            df_group_gates(Wr, U, Q, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
            for (int j = 0; j < Hg; ++j) {
                size_t idx = (size_t)n * Hg + j;
                int k = gates.k[j];
                // Forgetting by 2^-k is a literal right shift; the shifted-off
                // bits go to the stack in a uniform F-bit field.
                int32_t raw = h[idx];
                uint64_t field = (uint64_t)(raw & (int32_t)((1u << k) - 1));
                stack.push(field, F);
                int64_t shifted = (int64_t)(raw >> k);
                double z = std::exp2(-(double)k);
                FixedPoint add = encode_hidden((1.0 - z) * gates.g[j], cfg.rh);
                h[idx] = detail::narrow_state(shifted + add.raw(), "df_revgru_forward");
            }
        }
    };

    group(P.W1, P.U1, P.Q1, s.h1, s.df1, s.h2);
    group(P.W2, P.U2, P.Q2, s.h2, s.df2, s.h1);
}

template <class BufT>
void df_revgru_reverse(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    const CellConfig& cfg = P.cfg;
    const int E = cfg.input_dim, Hg = cfg.group_dim(), F = cfg.df_max_bits;
    DfGates gates;
    std::vector<double> scratch, hdec(Hg);

    // Pops must mirror push order exactly, so batch and unit loops run in
    // reverse. Gates are batch-independent per element, recomputed per n.
    auto group = [&](const Mat& Wr, const Mat& U, const Mat& Q, std::vector<int32_t>& h,
                     BitStack& stack, const std::vector<int32_t>& h_other) {
        for (int n = s.batch - 1; n >= 0; --n) {
            detail::decode_vec(&h_other[(size_t)n * Hg], Hg, cfg.rh, hdec.data());
            df_group_gates(Wr, U, Q, cfg, x + (size_t)n * E, hdec.data(), gates, scratch);
            for (int j = Hg - 1; j >= 0; --j) {
                size_t idx = (size_t)n * Hg + j;
                int k = gates.k[j];
                double z = std::exp2(-(double)k);
                FixedPoint add = encode_hidden((1.0 - z) * gates.g[j], cfg.rh);
                int64_t raw = (int64_t)h[idx] - add.raw();
                uint64_t field = stack.pop(F);
                if (field >> k)
                    throw std::runtime_error("df_revgru_reverse: stale bits in popped field");
                raw = raw * (int64_t(1) << k) + (int64_t)field;
                h[idx] = detail::narrow_state(raw, "df_revgru_reverse");
            }
        }
    };

    group(P.W2, P.U2, P.Q2, s.h2, s.df2, s.h1);
    group(P.W1, P.U1, P.Q1, s.h1, s.df1, s.h2);
}

// Dispatch helpers.
template <class BufT>
void cell_forward(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    switch (P.cfg.kind) {
        case CellKind::RevGRU:
        case CellKind::NfRevGRU: revgru_forward(P, x, s); break;
        case CellKind::RevLSTM: revlstm_forward(P, x, s); break;
        case CellKind::DfRevGRU: df_revgru_forward(P, x, s); break;
        default: throw std::invalid_argument("cell_forward: not a reversible cell");
    }
}

template <class BufT>
void cell_reverse(const CellParams& P, const double* x, BasicRevState<BufT>& s) {
    switch (P.cfg.kind) {
        case CellKind::RevGRU:
        case CellKind::NfRevGRU: revgru_reverse(P, x, s); break;
        case CellKind::RevLSTM: revlstm_reverse(P, x, s); break;
        case CellKind::DfRevGRU: df_revgru_reverse(P, x, s); break;
        default: throw std::invalid_argument("cell_reverse: not a reversible cell");
    }
}

// ---------------------------------------------------------------------------
// Parameter checkpoints: header {cell type, E, H, R_H, R_Z, a} followed by
// row-major 64-bit float matrices.
// ---------------------------------------------------------------------------

inline void save_mat(std::ostream& os, const Mat& m) {
    detail::write_u32(os, (uint32_t)m.rows);
    detail::write_u32(os, (uint32_t)m.cols);
    for (double v : m.a) detail::write_f64(os, v);
}

inline Mat load_mat(std::istream& is) {
    uint32_t r = detail::read_u32(is);
    uint32_t c = detail::read_u32(is);
    Mat m((int)r, (int)c);
    for (auto& v : m.a) v = detail::read_f64(is);
    return m;
}

// Mid-sequence state snapshot: fixed-point groups plus every buffer, so a
// paused sequence can be resumed (or unwound) elsewhere.
template <class BufT>
void save_rev_state(std::ostream& os, const BasicRevState<BufT>& s) {
    static_assert(std::is_same_v<BufT, BufferTensor>,
                  "snapshots use the limb-tensor wire format");
    os.write("RVST", 4);
    detail::write_u32(os, (uint32_t)s.kind);
    detail::write_u32(os, (uint32_t)s.batch);
    detail::write_u32(os, (uint32_t)s.group_dim);
    detail::write_u32(os, (uint32_t)s.rh);
    detail::write_u32(os, (uint32_t)s.rz);
    auto put = [&](const std::vector<int32_t>& v) {
        detail::write_u32(os, (uint32_t)v.size());
        for (int32_t raw : v) detail::write_u32(os, (uint32_t)raw);
    };
    put(s.h1);
    put(s.h2);
    put(s.c1);
    put(s.c2);
    s.bh1.serialize(os);
    s.bh2.serialize(os);
    s.bc1.serialize(os);
    s.bc2.serialize(os);
    s.df1.serialize(os);
    s.df2.serialize(os);
}

inline RevState load_rev_state(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RVST")
        throw std::runtime_error("state snapshot: bad magic");
    RevState s;
    s.kind = (CellKind)detail::read_u32(is);
    s.batch = (int)detail::read_u32(is);
    s.group_dim = (int)detail::read_u32(is);
    s.rh = (int)detail::read_u32(is);
    s.rz = (int)detail::read_u32(is);
    auto get = [&](std::vector<int32_t>& v) {
        v.resize(detail::read_u32(is));
        for (auto& raw : v) raw = (int32_t)detail::read_u32(is);
    };
    get(s.h1);
    get(s.h2);
    get(s.c1);
    get(s.c2);
    s.bh1 = BufferTensor::deserialize(is);
    s.bh2 = BufferTensor::deserialize(is);
    s.bc1 = BufferTensor::deserialize(is);
    s.bc2 = BufferTensor::deserialize(is);
    s.df1 = BitStack::deserialize(is);
    s.df2 = BitStack::deserialize(is);
    return s;
}

inline void save_cell_params(std::ostream& os, const CellParams& p) {
    os.write("RVCP", 4);
    detail::write_u32(os, (uint32_t)p.cfg.kind);
    detail::write_u32(os, (uint32_t)p.cfg.input_dim);
    detail::write_u32(os, (uint32_t)p.cfg.hidden);
    detail::write_u32(os, (uint32_t)p.cfg.rh);
    detail::write_u32(os, (uint32_t)p.cfg.rz);
    detail::write_f64(os, p.cfg.forget_floor);
    detail::write_u32(os, (uint32_t)p.cfg.df_max_bits);
    for (const Mat* m : {&p.W1, &p.U1, &p.W2, &p.U2, &p.Q1, &p.Q2}) save_mat(os, *m);
}

inline CellParams load_cell_params(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RVCP")
        throw std::runtime_error("cell checkpoint: bad magic");
    CellParams p;
    p.cfg.kind = (CellKind)detail::read_u32(is);
    p.cfg.input_dim = (int)detail::read_u32(is);
    p.cfg.hidden = (int)detail::read_u32(is);
    p.cfg.rh = (int)detail::read_u32(is);
    p.cfg.rz = (int)detail::read_u32(is);
    p.cfg.forget_floor = detail::read_f64(is);
    p.cfg.df_max_bits = (int)detail::read_u32(is);
    p.cfg.validate();
    for (Mat* m : {&p.W1, &p.U1, &p.W2, &p.U2, &p.Q1, &p.Q2}) *m = load_mat(is);
    return p;
}

}  // namespace revrnn
