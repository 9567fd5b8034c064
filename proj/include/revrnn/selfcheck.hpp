// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "revrnn/revgrad.hpp"
#include "revrnn/tasks.hpp"

namespace revrnn {

// Built-in verification suites behind `verify`: reversal identity, buffer
// oracle equivalence, gradient-path equivalence, the noise bound, and the
// bit-accounting relations.

struct VerifyOptions {
    std::string suite = "all";  // all | buffer | reversal | gradient | noise | accounting
    uint64_t cases = 0;         // 0 = per-suite default
    uint64_t seed = 1;
    bool inject_fault = false;  // deliberately corrupt one buffer bit
};

struct SuiteResult {
    std::string name;
    uint64_t passed = 0, failed = 0;
    std::string detail;  // first failing case, minimized where possible
};

namespace detail {

inline bool buffer_case_fails(int64_t h, uint32_t z, uint64_t b) {
    uint64_t limb = b;
    int64_t h2 = rev_mul_raw_forward(h, z, 10, limb);
    int64_t back = rev_mul_raw_reverse(h2, z, 10, limb);
    if (back != h || limb != b) return true;
    double drift = std::abs(h2 * std::exp2(-23) - (h * std::exp2(-23)) * (z * std::exp2(-10)));
    return drift > std::exp2(10 - 23);
}

inline std::string minimize_buffer_case(int64_t h, uint32_t z, uint64_t b) {
    // Greedy shrink toward (0, 512, 0) while the failure persists.
    bool shrunk = true;
    while (shrunk) {
        shrunk = false;
        if (h != 0 && buffer_case_fails(h / 2, z, b)) {
            h /= 2;
            shrunk = true;
        }
        if (b != 0 && buffer_case_fails(h, z, b / 2)) {
            b /= 2;
            shrunk = true;
        }
        uint32_t zm = z > 512 ? z - (z - 512) / 2 : z + (512 - z) / 2;
        if (zm != z && buffer_case_fails(h, zm, b)) {
            z = zm;
            shrunk = true;
        }
    }
    return "h*=" + std::to_string(h) + " z*=" + std::to_string(z) + " B=" + std::to_string(b);
}

}  // namespace detail

inline SuiteResult verify_buffer(uint64_t cases, uint64_t seed) {
    SuiteResult r{"buffer"};
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int64_t> hdist(std::numeric_limits<int32_t>::min(),
                                                 std::numeric_limits<int32_t>::max());
    std::uniform_int_distribution<uint64_t> zdist(1, 1023);
    std::uniform_int_distribution<uint64_t> bdist(0, (uint64_t(1) << 54) - 1);

    // Published worked example: h* 16, z* 17, B 1 at four fractional bits.
    {
        uint64_t limb = 1;
        bool ok = rev_mul_raw_forward(16, 17, 4, limb) == 33 && limb == 0 &&
                  rev_mul_raw_reverse(33, 17, 4, limb) == 16 && limb == 1;
        ok ? ++r.passed : ++r.failed;
        if (!ok && r.detail.empty()) r.detail = "worked example (16, 17, 1) mismatch";
    }
    for (uint64_t i = 0; i < cases; ++i) {
        int64_t h = hdist(rng);
        uint32_t z = (uint32_t)zdist(rng);
        uint64_t b = bdist(rng);
        if (detail::buffer_case_fails(h, z, b)) {
            ++r.failed;
            if (r.detail.empty()) r.detail = detail::minimize_buffer_case(h, z, b);
        } else {
            ++r.passed;
        }
    }
    return r;
}

inline SuiteResult verify_reversal(uint64_t cells, uint64_t seed, bool inject_fault) {
    SuiteResult r{"reversal"};
    std::mt19937_64 rng(seed);
    const CellKind kinds[] = {CellKind::RevGRU, CellKind::RevLSTM, CellKind::NfRevGRU,
                              CellKind::DfRevGRU};
    for (uint64_t i = 0; i < cells; ++i) {
        CellConfig cfg{kinds[i % 4], 4 + (int)(rng() % 5), 2 * (2 + (int)(rng() % 7))};
        CellParams P = CellParams::init(cfg, rng);
        const int T = 30, B = 1, E = cfg.input_dim, Hg = cfg.group_dim();
        RevState s = RevState::zeros(cfg, B);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        for (auto* grp : {&s.h1, &s.h2, &s.c1, &s.c2})
            for (auto& raw : *grp) raw = encode_hidden(dist(rng), cfg.rh).raw();

        std::vector<double> xs((size_t)T * E);
        for (auto& v : xs) v = dist(rng);
        std::vector<RevState> traj{s};
        for (int t = 0; t < T; ++t) {
            cell_forward(P, xs.data() + (size_t)t * E, s);
            traj.push_back(s);
        }

        bool faulted = inject_fault && i == 0;
        if (faulted) {
            if (s.bh1.plane_count() > 0)
                s.bh1.debug_flip_bit(s.bh1.plane_count() - 1, rng() % ((size_t)B * Hg),
                                     (int)(rng() % 40));
            else
                s.h1[rng() % s.h1.size()] ^= 1 << 11;
        }

        int located_t = -1, located_unit = -1;
        try {
            for (int t = T - 1; t >= 0; --t) {
                cell_reverse(P, xs.data() + (size_t)t * E, s);
                auto [mn, mj] = first_state_mismatch(s, traj[t]);
                if (mn != -1) {
                    located_t = t;
                    located_unit = mj;
                    break;
                }
            }
        } catch (const std::exception&) {
            located_t = 0;
            located_unit = -2;  // buffer-layer detection
        }

        if (faulted) {
            // the corruption must be detected somewhere
            if (located_t >= 0) {
                ++r.failed;
                if (r.detail.empty())
                    r.detail = "injected fault located at t=" + std::to_string(located_t) +
                               ", unit=" + std::to_string(located_unit);
            } else {
                ++r.failed;
                if (r.detail.empty()) r.detail = "injected fault was NOT detected";
            }
        } else if (located_t >= 0) {
            ++r.failed;
            if (r.detail.empty())
                r.detail = std::string(cell_name(cfg.kind)) + " mismatch at t=" +
                           std::to_string(located_t) + ", unit=" + std::to_string(located_unit);
        } else {
            ++r.passed;
        }
    }
    return r;
}

inline SuiteResult verify_gradient(uint64_t models, uint64_t seed) {
    SuiteResult r{"gradient"};
    std::mt19937_64 rng(seed);
    const CellKind kinds[] = {CellKind::RevGRU, CellKind::RevLSTM, CellKind::NfRevGRU,
                              CellKind::DfRevGRU};
    for (uint64_t i = 0; i < models; ++i) {
        CellConfig cfg{kinds[i % 4], 0, 2 * (2 + (int)(rng() % 7))};
        int V = 5, T = 2 + (int)(rng() % 15), B = 1 + (int)(rng() % 2);
        Model m = Model::make(cfg, V, V, false, false, 0, rng);
        std::vector<int> tokens((size_t)T * B);
        for (auto& t : tokens) t = (int)(rng() % V);
        std::vector<int> targets = tokens;

        Tape tape = run_forward<BufferTensor>(m, tokens, {}, T, B);
        ActivationRecord rec;
        forward_recording(m, tape, rec);
        ModelGrads ga = ModelGrads::like(m), gb = ModelGrads::like(m);
        bool ok = true;
        try {
            reversible_backward(m, tape, make_ce_hook(m, targets, B, &ga), ga);
            stored_activation_backward(m, tape, rec, make_ce_hook(m, targets, B, &gb), gb);
        } catch (const std::exception& e) {
            ok = false;
            if (r.detail.empty()) r.detail = e.what();
        }
        if (ok)
            ok = ga.cell.W1.a == gb.cell.W1.a && ga.cell.U1.a == gb.cell.U1.a &&
                 ga.cell.W2.a == gb.cell.W2.a && ga.cell.U2.a == gb.cell.U2.a &&
                 ga.head.a == gb.head.a;
        if (ok) {
            ++r.passed;
        } else {
            ++r.failed;
            if (r.detail.empty())
                r.detail = "gradient mismatch on " + std::string(cell_name(cfg.kind)) +
                           " H=" + std::to_string(cfg.hidden) + " T=" + std::to_string(T);
        }
    }
    // One surrogate finite-difference check per cell family.
    for (CellKind kind : {CellKind::RevGRU, CellKind::RevLSTM}) {
        CellConfig cfg{kind, 0, 8};
        Model m = Model::make(cfg, 5, 5, false, false, 0, rng);
        std::vector<int> tokens(10);
        for (auto& t : tokens) t = (int)(rng() % 5);
        double err = finite_diff_check(m, tokens, {}, tokens, 5, 2, 1e-5, 10, rng);
        if (err < 1e-4) {
            ++r.passed;
        } else {
            ++r.failed;
            if (r.detail.empty())
                r.detail = "finite-difference error " + std::to_string(err) + " on " +
                           cell_name(kind);
        }
    }
    return r;
}

inline SuiteResult verify_noise(uint64_t cases, uint64_t seed) {
    SuiteResult r{"noise"};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> hdist(-16.0, 16.0);
    std::uniform_real_distribution<double> pdist(1e-9, 1.0 - 1e-9);
    std::uniform_int_distribution<uint64_t> bdist(0, (uint64_t(1) << 54) - 1);
    const double bound = std::exp2(10 - 23);
    for (uint64_t i = 0; i < cases; ++i) {
        FixedPoint h = encode_hidden(hdist(rng));
        ForgetGate z = encode_gate(pdist(rng));
        uint64_t limb = bdist(rng);
        int64_t out = rev_mul_raw_forward(h.raw(), z.raw(), 10, limb);
        double drift = std::abs(out * std::exp2(-23) - decode(h) * decode(z));
        if (drift <= bound) {
            ++r.passed;
        } else {
            ++r.failed;
            if (r.detail.empty())
                r.detail = "noise " + std::to_string(drift) + " at h*=" + std::to_string(h.raw()) +
                           " z*=" + std::to_string(z.raw());
        }
    }
    return r;
}

inline SuiteResult verify_accounting(uint64_t seed) {
    SuiteResult r{"accounting"};
    std::mt19937_64 rng(seed);

    // Zero-weight RevGRU: one ideal bit per unit per step, measured within
    // 2.5x of ideal on a long run.
    {
        CellConfig cfg{CellKind::RevGRU, 4, 64};
        CellParams P = CellParams::init(cfg, rng);
        for (Mat* m : P.matrices()) m->zero();
        RevState s = RevState::zeros(cfg, 1);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        for (auto* grp : {&s.h1, &s.h2})
            for (auto& raw : *grp) raw = encode_hidden(dist(rng), cfg.rh).raw();
        std::vector<double> x(4, 0.0);
        const int T = 1000;
        for (int t = 0; t < T; ++t) cell_forward(P, x.data(), s);
        double ideal = s.ideal_buffer_bits();
        bool exact = std::abs(ideal - (double)T * 64) < 1e-6;
        exact ? ++r.passed : ++r.failed;
        if (!exact && r.detail.empty())
            r.detail = "ideal bits " + std::to_string(ideal) + " != " + std::to_string(T * 64);
        double ratio = (double)s.buffer_bits() / ideal;
        bool tight = ratio <= 2.5;
        tight ? ++r.passed : ++r.failed;
        if (!tight && r.detail.empty())
            r.detail = "measured/ideal " + std::to_string(ratio) + " > 2.5";
    }

    // Unbounded-buffer bit length stays within one rounding bit per step of
    // the ideal, and the limb waste bound holds.
    std::uniform_real_distribution<double> pdist(0.02, 0.98);
    std::uniform_real_distribution<double> hdist(-8.0, 8.0);
    for (int rep = 0; rep < 25; ++rep) {
        BigBuffer big(10);
        LimbBuffer limb(10);
        FixedPoint h = encode_hidden(hdist(rng));
        FixedPoint hl = h;
        double ideal = 0.0;
        const int T = 200;
        for (int t = 0; t < T; ++t) {
            ForgetGate z = encode_gate(pdist(rng));
            ideal += ideal_bits_per_step(z);
            h = rev_mul_forward(h, z, big);
            hl = rev_mul_forward(hl, z, limb);
            FixedPoint d = encode_hidden(hdist(rng) / 4);
            h = fixed_add(h, d);
            hl = fixed_add(hl, d);
        }
        bool slack_ok = std::abs((double)big.bit_length() - ideal) <= (double)T;
        slack_ok ? ++r.passed : ++r.failed;
        if (!slack_ok && r.detail.empty())
            r.detail = "bit-length slack " +
                       std::to_string((double)big.bit_length() - ideal) + " outside [-T, T]";
        uint64_t waste = limb.measured_bits() >= (uint64_t)big.bit_length()
                             ? limb.measured_bits() - (uint64_t)big.bit_length()
                             : 0;
        bool waste_ok = limb.measured_bits() >= (uint64_t)big.bit_length() &&
                        waste <= limb.append_steps().size() * (10 - 1 + 63);
        waste_ok ? ++r.passed : ++r.failed;
        if (!waste_ok && r.detail.empty()) r.detail = "limb waste bound violated";
    }

    // Savings-ratio identities.
    bool inf_ok = std::isinf(savings_ratio(10, 64, 2, 0));
    inf_ok ? ++r.passed : ++r.failed;
    bool ratio_ok = savings_ratio(100, 64, 1, 6400) == 32.0;
    ratio_ok ? ++r.passed : ++r.failed;
    return r;
}

inline std::vector<SuiteResult> run_verify(const VerifyOptions& opt, std::ostream& out) {
    std::vector<SuiteResult> results;
    auto want = [&](const char* name) { return opt.suite == "all" || opt.suite == name; };

    if (want("buffer")) results.push_back(verify_buffer(opt.cases ? opt.cases : 20000, opt.seed));
    if (want("reversal"))
        results.push_back(
            verify_reversal(opt.cases ? std::max<uint64_t>(1, opt.cases / 500) : 40, opt.seed,
                            opt.inject_fault));
    if (want("gradient"))
        results.push_back(
            verify_gradient(opt.cases ? std::max<uint64_t>(1, opt.cases / 1000) : 30, opt.seed));
    if (want("noise")) results.push_back(verify_noise(opt.cases ? opt.cases : 200000, opt.seed));
    if (want("accounting")) results.push_back(verify_accounting(opt.seed));

    for (const auto& r : results) {
        out << "suite " << r.name << ": " << r.passed << " passed, " << r.failed << " failed";
        if (!r.detail.empty()) out << "  [" << r.detail << "]";
        out << "\n";
    }
    return results;
}

}  // namespace revrnn
