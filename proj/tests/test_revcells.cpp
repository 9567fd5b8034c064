// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "revrnn/revcells.hpp"

using namespace revrnn;

namespace {

void randomize_state(RevState& s, std::mt19937_64& rng, double span = 1.0) {
    std::uniform_real_distribution<double> dist(-span, span);
    for (auto* grp : {&s.h1, &s.h2, &s.c1, &s.c2})
        for (auto& raw : *grp) raw = encode_hidden(dist(rng), s.rh).raw();
}

std::vector<double> random_inputs(int batch, int E, int T, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> xs((size_t)batch * E * T);
    for (auto& v : xs) v = dist(rng);
    return xs;
}

// Forward T steps then reverse T steps; the initial state (including all
// buffer storage) must come back bit for bit.
void check_roundtrip(const CellParams& P, int batch, int T, std::mt19937_64& rng) {
    RevState s = RevState::zeros(P.cfg, batch);
    randomize_state(s, rng);
    RevState initial = s;
    auto xs = random_inputs(batch, P.cfg.input_dim, T, rng);
    for (int t = 0; t < T; ++t) cell_forward(P, xs.data() + (size_t)t * batch * P.cfg.input_dim, s);
    for (int t = T - 1; t >= 0; --t)
        cell_reverse(P, xs.data() + (size_t)t * batch * P.cfg.input_dim, s);
    CHECK(states_identical(s, initial));
}

}  // namespace

TEST_CASE("zero-weight RevGRU halves the state and stores one bit per step") {
    CellConfig cfg{CellKind::RevGRU, 4, 8};
    std::mt19937_64 rng(1);
    CellParams P = CellParams::init(cfg, rng);
    for (Mat* m : P.matrices()) m->zero();

    RevState s = RevState::zeros(cfg, 2);
    randomize_state(s, rng, 4.0);
    RevState initial = s;

    std::vector<double> x((size_t)2 * 4, 0.3);
    const double noise = std::exp2(cfg.rz - cfg.rh);
    const int T = 12;
    for (int t = 0; t < T; ++t) {
        std::vector<double> before1(s.h1.size()), before2(s.h2.size());
        for (size_t i = 0; i < s.h1.size(); ++i) before1[i] = s.h1[i] * std::exp2(-cfg.rh);
        for (size_t i = 0; i < s.h2.size(); ++i) before2[i] = s.h2[i] * std::exp2(-cfg.rh);
        cell_forward(P, x.data(), s);
        for (size_t i = 0; i < s.h1.size(); ++i)
            CHECK(std::abs(s.h1[i] * std::exp2(-cfg.rh) - 0.5 * before1[i]) <= noise);
        for (size_t i = 0; i < s.h2.size(); ++i)
            CHECK(std::abs(s.h2[i] * std::exp2(-cfg.rh) - 0.5 * before2[i]) <= noise);
    }
    // sigma(0) quantizes to z* = 512 exactly: one ideal bit per unit per step.
    CHECK(s.bh1.ideal_bits() == doctest::Approx(T * 2 * 4).epsilon(1e-12));
    CHECK(s.bh2.ideal_bits() == doctest::Approx(T * 2 * 4).epsilon(1e-12));

    for (int t = 0; t < T; ++t) cell_reverse(P, x.data(), s);
    CHECK(states_identical(s, initial));
}

TEST_CASE("RevGRU forward/reverse is the identity on random cells") {
    std::mt19937_64 rng(42);
    CellConfig cfg{CellKind::RevGRU, 8, 8};
    for (int i = 0; i < 200; ++i) {
        CellParams P = CellParams::init(cfg, rng);
        check_roundtrip(P, 2, 10, rng);
    }
    // One deeper run matching the documented example sizes.
    CellParams P = CellParams::init(cfg, rng);
    check_roundtrip(P, 1, 50, rng);
}

TEST_CASE("RevGRU survives a long horizon without drift") {
    std::mt19937_64 rng(77);
    CellConfig cfg{CellKind::RevGRU, 8, 64};
    CellParams P = CellParams::init(cfg, rng);
    check_roundtrip(P, 1, 1000, rng);
}

TEST_CASE("forget floor keeps every quantized gate at or above the floor") {
    std::mt19937_64 rng(5);
    CellConfig cfg{CellKind::RevGRU, 4, 8};
    cfg.forget_floor = 0.5;
    CellParams P = CellParams::init(cfg, rng);
    RevState s = RevState::zeros(cfg, 3);
    randomize_state(s, rng);
    auto xs = random_inputs(3, 4, 20, rng);
    for (int t = 0; t < 20; ++t) cell_forward(P, xs.data() + (size_t)t * 12, s);
    // With a = 0.5 at R_Z = 10, every multiplication stored at most one ideal
    // bit, so the per-unit ideal totals are bounded by the step count.
    for (int n = 0; n < 3; ++n)
        for (int j = 0; j < 4; ++j) {
            CHECK(s.bh1.ideal_bits_at(n, j) <= 20.0 + 1e-9);
            CHECK(s.bh2.ideal_bits_at(n, j) <= 20.0 + 1e-9);
        }
}

TEST_CASE("zero-weight RevLSTM matches its closed form within noise") {
    CellConfig cfg{CellKind::RevLSTM, 4, 8};
    std::mt19937_64 rng(9);
    CellParams P = CellParams::init(cfg, rng);
    for (Mat* m : P.matrices()) m->zero();

    RevState s = RevState::zeros(cfg, 1);
    randomize_state(s, rng, 2.0);
    RevState initial = s;
    std::vector<double> x(4, -0.2);

    const double noise = std::exp2(cfg.rz - cfg.rh);
    const double q = std::exp2(-cfg.rh - 1);
    for (int t = 0; t < 8; ++t) {
        std::vector<double> cprev(s.c1.size()), hprev(s.h1.size());
        for (size_t i = 0; i < s.c1.size(); ++i) cprev[i] = s.c1[i] * std::exp2(-cfg.rh);
        for (size_t i = 0; i < s.h1.size(); ++i) hprev[i] = s.h1[i] * std::exp2(-cfg.rh);
        cell_forward(P, x.data(), s);
        for (size_t i = 0; i < s.c1.size(); ++i) {
            double c_now = s.c1[i] * std::exp2(-cfg.rh);
            CHECK(std::abs(c_now - 0.5 * cprev[i]) <= noise + q);
            double h_now = s.h1[i] * std::exp2(-cfg.rh);
            CHECK(std::abs(h_now - (0.5 * hprev[i] + 0.5 * std::tanh(c_now))) <= noise + q);
        }
    }
    // All four buffers grow by the forget/output-forget ideal rates (1 bit
    // each at z* = 512).
    CHECK(s.bc1.ideal_bits() == doctest::Approx(8 * 4));
    CHECK(s.bh1.ideal_bits() == doctest::Approx(8 * 4));
    CHECK(s.bc2.ideal_bits() == doctest::Approx(8 * 4));
    CHECK(s.bh2.ideal_bits() == doctest::Approx(8 * 4));

    for (int t = 0; t < 8; ++t) cell_reverse(P, x.data(), s);
    CHECK(states_identical(s, initial));
}

TEST_CASE("RevLSTM recovers both cell and output groups bit-exactly") {
    std::mt19937_64 rng(13);
    CellConfig cfg{CellKind::RevLSTM, 6, 8};
    for (int i = 0; i < 100; ++i) {
        CellParams P = CellParams::init(cfg, rng);
        check_roundtrip(P, 2, 12, rng);
    }
    CellParams P = CellParams::init(cfg, rng);
    check_roundtrip(P, 1, 50, rng);
}

TEST_CASE("NF-RevGRU: additive only, zero buffer bits, exact reversal") {
    std::mt19937_64 rng(21);
    CellConfig cfg{CellKind::NfRevGRU, 6, 8};

    // Zero weights: candidate is zero, state never moves.
    CellParams Z = CellParams::init(cfg, rng);
    for (Mat* m : Z.matrices()) m->zero();
    RevState s = RevState::zeros(cfg, 2);
    randomize_state(s, rng);
    RevState initial = s;
    std::vector<double> x((size_t)2 * 6, 0.9);
    for (int t = 0; t < 25; ++t) cell_forward(Z, x.data(), s);
    CHECK(s.h1 == initial.h1);
    CHECK(s.h2 == initial.h2);
    CHECK(s.buffer_bits() == 0);

    // Random cells: bit-exact reversal with untouched buffers.
    for (int i = 0; i < 100; ++i) {
        CellParams P = CellParams::init(cfg, rng);
        RevState st = RevState::zeros(cfg, 2);
        randomize_state(st, rng);
        RevState init2 = st;
        auto xs = random_inputs(2, 6, 50, rng);
        for (int t = 0; t < 50; ++t) cell_forward(P, xs.data() + (size_t)t * 12, st);
        CHECK(st.buffer_bits() == 0);
        for (int t = 49; t >= 0; --t) cell_reverse(P, xs.data() + (size_t)t * 12, st);
        CHECK(states_identical(st, init2));
    }
}

TEST_CASE("NF-RevGRU growth surfaces as an overflow error") {
    std::mt19937_64 rng(31);
    CellConfig cfg{CellKind::NfRevGRU, 2, 4};
    CellParams P = CellParams::init(cfg, rng);
    for (Mat* m : P.matrices()) m->zero();
    // Saturate the candidate: g = tanh(large) = 1, z = 0.5, so each group
    // climbs by ~0.5 per step until the representable range runs out.
    for (auto& v : P.U1.a) v = 50.0;
    for (auto& v : P.U2.a) v = 50.0;
    RevState s = RevState::zeros(cfg, 1);
    std::vector<double> x(2, 1.0);
    CHECK_THROWS_AS(
        [&] {
            for (int t = 0; t < 600; ++t) cell_forward(P, x.data(), s);
        }(),
        std::overflow_error);
}

TEST_CASE("discrete forgetting: k=0 stores F zero bits and leaves state put") {
    std::mt19937_64 rng(41);
    CellConfig cfg{CellKind::DfRevGRU, 4, 8};
    cfg.df_max_bits = 3;
    CellParams P = CellParams::init(cfg, rng);
    for (Mat* m : P.matrices()) m->zero();  // scores tie -> k = 0, g = 0

    RevState s = RevState::zeros(cfg, 2);
    randomize_state(s, rng);
    RevState initial = s;
    std::vector<double> x((size_t)2 * 4, 0.5);
    for (int t = 0; t < 10; ++t) cell_forward(P, x.data(), s);
    CHECK(s.h1 == initial.h1);
    CHECK(s.h2 == initial.h2);
    // F bits per unit per step, uniformly, regardless of the forget value.
    CHECK(s.df1.bit_count() == (size_t)10 * 2 * 4 * 3);
    CHECK(s.df2.bit_count() == (size_t)10 * 2 * 4 * 3);
    for (int t = 0; t < 10; ++t) cell_reverse(P, x.data(), s);
    CHECK(states_identical(s, initial));
}

TEST_CASE("discrete forgetting: a single shifted-off bit comes back") {
    CellConfig cfg{CellKind::DfRevGRU, 2, 4};
    cfg.df_max_bits = 2;
    std::mt19937_64 rng(51);
    CellParams P = CellParams::init(cfg, rng);
    for (Mat* m : P.matrices()) m->zero();
    // Bias the selector toward k=1 for every unit.
    for (int j = 0; j < P.Q1.rows; ++j)
        if (j % (cfg.df_max_bits + 1) == 1)
            for (int c = 0; c < P.Q1.cols; ++c) P.Q1(j, c) = 5.0;
    P.Q2 = P.Q1;

    RevState s = RevState::zeros(cfg, 1);
    s.h1 = {encode_hidden(0.75).raw() | 1, encode_hidden(-0.3).raw() | 1};
    s.h2 = {encode_hidden(0.25).raw() | 1, encode_hidden(1.1).raw() | 1};
    RevState initial = s;
    std::vector<double> x(2, 1.0);  // positive input keeps the Q scores > 0
    cell_forward(P, x.data(), s);
    CHECK(s.df1.bit_count() == 2 * 2);
    cell_reverse(P, x.data(), s);
    CHECK(states_identical(s, initial));
}

TEST_CASE("discrete forgetting round-trips random programs") {
    std::mt19937_64 rng(61);
    CellConfig cfg{CellKind::DfRevGRU, 4, 8};
    cfg.df_max_bits = 4;
    for (int i = 0; i < 50; ++i) {
        CellParams P = CellParams::init(cfg, rng);
        check_roundtrip(P, 2, 100, rng);
    }
}

TEST_CASE("discrete forgetting reverse past the start underflows") {
    std::mt19937_64 rng(71);
    CellConfig cfg{CellKind::DfRevGRU, 2, 4};
    CellParams P = CellParams::init(cfg, rng);
    RevState s = RevState::zeros(cfg, 1);
    std::vector<double> x(2, 0.1);
    cell_forward(P, x.data(), s);
    cell_reverse(P, x.data(), s);
    CHECK_THROWS_AS(cell_reverse(P, x.data(), s), std::runtime_error);
}

TEST_CASE("reverse on a drained buffered cell underflows") {
    std::mt19937_64 rng(73);
    CellConfig cfg{CellKind::RevGRU, 2, 4};
    CellParams P = CellParams::init(cfg, rng);
    RevState s = RevState::zeros(cfg, 1);
    std::vector<double> x(2, 0.1);
    cell_forward(P, x.data(), s);
    cell_reverse(P, x.data(), s);
    CHECK_THROWS_AS(cell_reverse(P, x.data(), s), std::runtime_error);
}

TEST_CASE("two identical forward runs produce identical raw integers") {
    std::mt19937_64 rng(81);
    CellConfig cfg{CellKind::RevGRU, 8, 16};
    CellParams P = CellParams::init(cfg, rng);
    RevState a = RevState::zeros(cfg, 4);
    randomize_state(a, rng);
    RevState b = a;
    auto xs = random_inputs(4, 8, 30, rng);
    for (int t = 0; t < 30; ++t) {
        cell_forward(P, xs.data() + (size_t)t * 32, a);
        cell_forward(P, xs.data() + (size_t)t * 32, b);
    }
    CHECK(states_identical(a, b));
}

TEST_CASE("big-integer buffer mode reverses cells exactly too") {
    std::mt19937_64 rng(91);
    CellConfig cfg{CellKind::RevGRU, 4, 8};
    CellParams P = CellParams::init(cfg, rng);
    BigRevState s = BigRevState::zeros(cfg, 2);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (auto* grp : {&s.h1, &s.h2})
        for (auto& raw : *grp) raw = encode_hidden(dist(rng)).raw();
    BigRevState initial = s;
    auto xs = random_inputs(2, 4, 40, rng);
    for (int t = 0; t < 40; ++t) cell_forward(P, xs.data() + (size_t)t * 8, s);
    for (int t = 39; t >= 0; --t) cell_reverse(P, xs.data() + (size_t)t * 8, s);
    CHECK(states_identical(s, initial));
}

TEST_CASE("parameter checkpoints round-trip") {
    std::mt19937_64 rng(101);
    CellConfig cfg{CellKind::RevLSTM, 5, 12};
    cfg.forget_floor = 0.25;
    CellParams P = CellParams::init(cfg, rng);
    std::stringstream ss;
    save_cell_params(ss, P);
    CellParams Q = load_cell_params(ss);
    CHECK(Q.cfg.kind == P.cfg.kind);
    CHECK(Q.cfg.input_dim == P.cfg.input_dim);
    CHECK(Q.cfg.hidden == P.cfg.hidden);
    CHECK(Q.cfg.forget_floor == P.cfg.forget_floor);
    CHECK(Q.W1.a == P.W1.a);
    CHECK(Q.U2.a == P.U2.a);
}

TEST_CASE("cell config validation") {
    CellConfig odd{CellKind::RevGRU, 4, 7};
    CHECK_THROWS_AS(odd.validate(), std::invalid_argument);
    CellConfig bad_rz{CellKind::RevGRU, 4, 8, 10, 10};
    CHECK_THROWS_AS(bad_rz.validate(), std::invalid_argument);
    CellConfig bad_floor{CellKind::RevGRU, 4, 8};
    bad_floor.forget_floor = 1.0;
    CHECK_THROWS_AS(bad_floor.validate(), std::invalid_argument);
}
