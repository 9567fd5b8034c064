// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace revrnn {

inline constexpr int kDefaultHiddenBits = 23;  // R_H
inline constexpr int kDefaultGateBits = 10;    // R_Z

namespace detail {

// Round-to-nearest, ties to even. Implemented by hand so the result does not
// depend on the ambient FP rounding mode.
inline long long round_half_even(double x) {
    double f = std::floor(x);
    double frac = x - f;  // exact: f <= x < f+1 and |x| < 2^53
    long long lo = static_cast<long long>(f);
    if (frac > 0.5) return lo + 1;
    if (frac < 0.5) return lo;
    return (lo % 2 == 0) ? lo : lo + 1;
}

// Floored division and the matching non-negative remainder.
inline long long floor_div(long long a, long long b) {
    long long q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

inline long long euclid_mod(long long a, long long b) {
    long long r = a % b;
    if (r < 0) r += (b < 0 ? -b : b);
    return r;
}

inline int32_t checked_narrow(long long raw, const char* what) {
    if (raw > std::numeric_limits<int32_t>::max() ||
        raw < std::numeric_limits<int32_t>::min()) {
        throw std::overflow_error(std::string(what) + ": raw value " +
                                  std::to_string(raw) + " exceeds 32-bit range");
    }
    return static_cast<int32_t>(raw);
}

}  // namespace detail

// A hidden-state scalar h = 2^(-R_H) * raw, raw a signed 32-bit integer.
class FixedPoint {
public:
    FixedPoint() = default;
    FixedPoint(int32_t raw, int fraction_bits) : raw_(raw), bits_(fraction_bits) {
        if (fraction_bits < 1 || fraction_bits > 30)
            throw std::invalid_argument("FixedPoint: fraction_bits out of [1,30]");
    }

    int32_t raw() const { return raw_; }
    int fraction_bits() const { return bits_; }
    double value() const { return static_cast<double>(raw_) / std::exp2(bits_); }

    bool operator==(const FixedPoint&) const = default;

private:
    int32_t raw_ = 0;
    int bits_ = kDefaultHiddenBits;
};

// A forget scalar z = 2^(-R_Z) * raw with 1 <= raw <= 2^R_Z - 1, so 0 < z < 1.
class ForgetGate {
public:
    ForgetGate() = default;
    ForgetGate(uint32_t raw, int fraction_bits) : raw_(raw), bits_(fraction_bits) {
        if (fraction_bits < 1 || fraction_bits > 30)
            throw std::invalid_argument("ForgetGate: fraction_bits out of [1,30]");
        if (raw < 1 || raw > (uint32_t(1) << fraction_bits) - 1)
            throw std::invalid_argument("ForgetGate: raw out of [1, 2^R_Z - 1]");
    }

    uint32_t raw() const { return raw_; }
    int fraction_bits() const { return bits_; }
    double value() const { return static_cast<double>(raw_) / std::exp2(bits_); }

    bool operator==(const ForgetGate&) const = default;

private:
    uint32_t raw_ = 1u << (kDefaultGateBits - 1);
    int bits_ = kDefaultGateBits;
};

// Quantize a real hidden value onto the 2^-R_H grid (round half to even).
inline FixedPoint encode_hidden(double x, int fraction_bits = kDefaultHiddenBits) {
    const double limit = std::exp2(31 - fraction_bits);
    if (!(std::abs(x) < limit))
        throw std::overflow_error("encode_hidden: |x| >= 2^(31 - R_H)");
    long long raw = detail::round_half_even(x * std::exp2(fraction_bits));
    return FixedPoint(detail::checked_narrow(raw, "encode_hidden"), fraction_bits);
}

inline double decode(const FixedPoint& h) { return h.value(); }

// Quantize a gate activation; saturated sigmoids clamp into [1, 2^R_Z - 1].
inline ForgetGate encode_gate(double p, int fraction_bits = kDefaultGateBits) {
    long long raw = detail::round_half_even(p * std::exp2(fraction_bits));
    long long hi = (1ll << fraction_bits) - 1;
    if (raw < 1) raw = 1;
    if (raw > hi) raw = hi;
    return ForgetGate(static_cast<uint32_t>(raw), fraction_bits);
}

inline double decode(const ForgetGate& z) { return z.value(); }

// x -> (1-a)x + a, mapping (0,1) into (a,1); a=0.5 caps forgetting at 1 bit.
inline double restrict_forgetting(double p, double a) {
    if (!(a >= 0.0 && a < 1.0))
        throw std::invalid_argument("restrict_forgetting: a must lie in [0,1)");
    return (1.0 - a) * p + a;
}

inline FixedPoint fixed_add(const FixedPoint& a, const FixedPoint& b) {
    if (a.fraction_bits() != b.fraction_bits())
        throw std::invalid_argument("fixed_add: mismatched fraction bits");
    long long s = static_cast<long long>(a.raw()) + b.raw();
    return FixedPoint(detail::checked_narrow(s, "fixed_add"), a.fraction_bits());
}

inline FixedPoint fixed_sub(const FixedPoint& a, const FixedPoint& b) {
    if (a.fraction_bits() != b.fraction_bits())
        throw std::invalid_argument("fixed_sub: mismatched fraction bits");
    long long s = static_cast<long long>(a.raw()) - b.raw();
    return FixedPoint(detail::checked_narrow(s, "fixed_sub"), a.fraction_bits());
}

}  // namespace revrnn
