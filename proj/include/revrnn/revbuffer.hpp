// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "revrnn/bigint.hpp"
#include "revrnn/fixedpoint.hpp"

namespace revrnn {

// ---------------------------------------------------------------------------
// Raw cores. One reversible multiplication h <- h*z with the lost low bits
// pushed into the buffer and buffer bits shifted back onto h. Division is
// floored and remainders are non-negative, so signed hidden values round-trip.
// ---------------------------------------------------------------------------

// Active-limb variant: the buffer is one 64-bit word. Callers must have
// applied the overflow guard (limb < 2^(64-rz)) before each forward call.
inline int64_t rev_mul_raw_forward(int64_t h_raw, uint64_t z_raw, int rz, uint64_t& limb) {
    const int64_t denom = int64_t(1) << rz;
    limb = (limb << rz) + (uint64_t)detail::euclid_mod(h_raw, denom);
    int64_t h = detail::floor_div(h_raw, denom);
    h = h * (int64_t)z_raw;
    h += (int64_t)(limb % z_raw);
    limb /= z_raw;
    return h;
}

inline int64_t rev_mul_raw_reverse(int64_t h_raw, uint64_t z_raw, int rz, uint64_t& limb) {
    unsigned __int128 wide = (unsigned __int128)limb * z_raw +
                             (uint64_t)detail::euclid_mod(h_raw, (int64_t)z_raw);
    if (wide >> 64)
        throw std::runtime_error("rev_mul_raw_reverse: buffer limb out of range (corrupt buffer?)");
    uint64_t b = (uint64_t)wide;
    int64_t h = detail::floor_div(h_raw, (int64_t)z_raw);
    h = h * (int64_t(1) << rz);
    h += (int64_t)(b & ((uint64_t(1) << rz) - 1));
    limb = b >> rz;
    return h;
}

// Unbounded-integer variant (the reference buffer).
inline int64_t rev_mul_big_forward(int64_t h_raw, uint64_t z_raw, int rz, BigUint& buf) {
    const int64_t denom = int64_t(1) << rz;
    buf.shift_left(rz);
    buf.add_small((uint64_t)detail::euclid_mod(h_raw, denom));
    int64_t h = detail::floor_div(h_raw, denom) * (int64_t)z_raw;
    h += (int64_t)buf.divmod_small(z_raw);
    return h;
}

inline int64_t rev_mul_big_reverse(int64_t h_raw, uint64_t z_raw, int rz, BigUint& buf) {
    buf.mul_small(z_raw);
    buf.add_small((uint64_t)detail::euclid_mod(h_raw, (int64_t)z_raw));
    int64_t h = detail::floor_div(h_raw, (int64_t)z_raw);
    h = h * (int64_t(1) << rz);
    h += (int64_t)buf.low_bits(rz);
    buf.shift_right(rz);
    return h;
}

// ---------------------------------------------------------------------------
// Ideal accounting: each multiplication by z ideally stores log2(1/z) bits.
// ---------------------------------------------------------------------------

inline double ideal_bits_per_step(const ForgetGate& z) {
    return z.fraction_bits() - std::log2((double)z.raw());
}

inline double ideal_total_bits(const std::vector<std::vector<ForgetGate>>& gate_history) {
    double total = 0.0;
    for (const auto& step : gate_history)
        for (const auto& z : step) total += ideal_bits_per_step(z);
    return total;
}

// ---------------------------------------------------------------------------
// BigBuffer: scalar unbounded buffer with step bookkeeping for error checks.
// ---------------------------------------------------------------------------

class BigBuffer {
public:
    explicit BigBuffer(int rz = kDefaultGateBits) : rz_(rz) {}

    int gate_bits() const { return rz_; }
    const BigUint& value() const { return value_; }
    uint64_t steps() const { return steps_; }
    int64_t bit_length() const { return value_.bit_length(); }

    int64_t forward_mul(int64_t h_raw, uint64_t z_raw) {
        ++steps_;
        return rev_mul_big_forward(h_raw, z_raw, rz_, value_);
    }

    int64_t reverse_mul(int64_t h_raw, uint64_t z_raw) {
        if (steps_ == 0)
            throw std::runtime_error("BigBuffer: reverse called more times than forward");
        --steps_;
        return rev_mul_big_reverse(h_raw, z_raw, rz_, value_);
    }

    bool operator==(const BigBuffer&) const = default;

private:
    int rz_;
    BigUint value_;
    uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// LimbBuffer: scalar finite realization. The buffer is a stack of 64-bit
// limbs; only the top (active) limb is touched by the algorithm. Before each
// forward step, an active limb >= 2^(64-R_Z) forces a fresh zero limb, so the
// step itself cannot overflow. Append steps are recorded so the reverse pass
// knows when to drop a (then zero again) limb.
// ---------------------------------------------------------------------------

class LimbBuffer {
public:
    explicit LimbBuffer(int rz = kDefaultGateBits) : rz_(rz) {}

    int gate_bits() const { return rz_; }
    size_t limb_count() const { return limbs_.size(); }
    uint64_t steps() const { return steps_; }
    const std::vector<uint64_t>& limbs() const { return limbs_; }
    const std::vector<uint64_t>& append_steps() const { return append_steps_; }
    uint64_t measured_bits() const { return 64 * (uint64_t)limbs_.size(); }

    bool needs_append() const {
        return limbs_.empty() || limbs_.back() >= (uint64_t(1) << (64 - rz_));
    }

    // Appends a fresh zero limb iff the active limb could overflow. The limb
    // is recorded against the next forward step so reverse pops it there.
    bool guard() {
        if (!needs_append()) return false;
        limbs_.push_back(0);
        append_steps_.push_back(steps_ + 1);
        return true;
    }

    void begin_step() {
        guard();
        ++steps_;
    }

    int64_t forward_mul(int64_t h_raw, uint64_t z_raw) {
        return rev_mul_raw_forward(h_raw, z_raw, rz_, limbs_.back());
    }

    int64_t reverse_mul(int64_t h_raw, uint64_t z_raw) {
        if (limbs_.empty() || steps_ == 0)
            throw std::runtime_error("LimbBuffer: reverse on empty buffer");
        return rev_mul_raw_reverse(h_raw, z_raw, rz_, limbs_.back());
    }

    void end_reverse_step() {
        if (steps_ == 0)
            throw std::runtime_error("LimbBuffer: reverse past the start");
        if (!append_steps_.empty() && append_steps_.back() == steps_) {
            if (limbs_.back() != 0)
                throw std::runtime_error("LimbBuffer: appended limb not restored to zero (corrupt buffer?)");
            limbs_.pop_back();
            append_steps_.pop_back();
        }
        --steps_;
    }

    bool operator==(const LimbBuffer&) const = default;

private:
    int rz_;
    std::vector<uint64_t> limbs_;         // back() is the active limb
    std::vector<uint64_t> append_steps_;  // step indices that pushed a limb
    uint64_t steps_ = 0;
};

// Applies the overflow guard without advancing the step counter. Idempotent.
inline bool limb_guard(LimbBuffer& buf) { return buf.guard(); }

// Scalar convenience API: one reversible multiplication = one buffer step.
inline FixedPoint rev_mul_forward(const FixedPoint& h, const ForgetGate& z, BigBuffer& buf) {
    if (z.fraction_bits() != buf.gate_bits())
        throw std::invalid_argument("rev_mul_forward: gate bits mismatch buffer");
    int64_t raw = buf.forward_mul(h.raw(), z.raw());
    return FixedPoint(detail::checked_narrow(raw, "rev_mul_forward"), h.fraction_bits());
}

inline FixedPoint rev_mul_reverse(const FixedPoint& h, const ForgetGate& z, BigBuffer& buf) {
    if (z.fraction_bits() != buf.gate_bits())
        throw std::invalid_argument("rev_mul_reverse: gate bits mismatch buffer");
    int64_t raw = buf.reverse_mul(h.raw(), z.raw());
    return FixedPoint(detail::checked_narrow(raw, "rev_mul_reverse"), h.fraction_bits());
}

inline FixedPoint rev_mul_forward(const FixedPoint& h, const ForgetGate& z, LimbBuffer& buf) {
    if (z.fraction_bits() != buf.gate_bits())
        throw std::invalid_argument("rev_mul_forward: gate bits mismatch buffer");
    buf.begin_step();
    int64_t raw = buf.forward_mul(h.raw(), z.raw());
    return FixedPoint(detail::checked_narrow(raw, "rev_mul_forward"), h.fraction_bits());
}

inline FixedPoint rev_mul_reverse(const FixedPoint& h, const ForgetGate& z, LimbBuffer& buf) {
    if (z.fraction_bits() != buf.gate_bits())
        throw std::invalid_argument("rev_mul_reverse: gate bits mismatch buffer");
    int64_t raw = buf.reverse_mul(h.raw(), z.raw());
    buf.end_reverse_step();
    return FixedPoint(detail::checked_narrow(raw, "rev_mul_reverse"), h.fraction_bits());
}

// ---------------------------------------------------------------------------
// BufferTensor: batched limb buffers, (N, H, D) layout with a common plane
// count D. When any position's active limb would overflow, a zero plane is
// appended for every position at once (uniform memory access).
// ---------------------------------------------------------------------------

class BufferTensor {
public:
    BufferTensor() = default;
    BufferTensor(int batch, int units, int rz = kDefaultGateBits, int rh = kDefaultHiddenBits)
        : n_(batch), h_(units), rz_(rz), rh_(rh), ideal_((size_t)batch * units, 0.0) {}

    int batch() const { return n_; }
    int units() const { return h_; }
    int gate_bits() const { return rz_; }
    int hidden_bits() const { return rh_; }
    size_t plane_count() const { return planes_.size(); }
    uint64_t steps() const { return steps_; }
    const std::vector<uint64_t>& append_steps() const { return append_steps_; }

    uint64_t measured_bits() const { return 64 * (uint64_t)planes_.size() * n_ * h_; }
    // Every position shares the plane count, so per-unit cost is uniform.
    uint64_t measured_bits_per_unit() const { return 64 * (uint64_t)planes_.size(); }

    double ideal_bits() const {
        double t = 0.0;
        for (double v : ideal_) t += v;
        return t;
    }
    double ideal_bits_at(int batch_idx, int unit) const {
        return ideal_[(size_t)batch_idx * h_ + unit];
    }

    bool needs_append() const {
        if (planes_.empty()) return true;
        const uint64_t threshold = uint64_t(1) << (64 - rz_);
        for (uint64_t v : planes_.back())
            if (v >= threshold) return true;
        return false;
    }

    // If any position could overflow, every position gets a fresh limb.
    bool guard() {
        if (!needs_append()) return false;
        planes_.emplace_back((size_t)n_ * h_, 0);
        append_steps_.push_back(steps_ + 1);
        return true;
    }

    void begin_step() {
        guard();
        ++steps_;
    }

    int64_t forward_mul(int batch_idx, int unit, int64_t h_raw, uint64_t z_raw) {
        size_t idx = (size_t)batch_idx * h_ + unit;
        ideal_[idx] += rz_ - std::log2((double)z_raw);
        return rev_mul_raw_forward(h_raw, z_raw, rz_, planes_.back()[idx]);
    }

    int64_t reverse_mul(int batch_idx, int unit, int64_t h_raw, uint64_t z_raw) {
        if (planes_.empty() || steps_ == 0)
            throw std::runtime_error("BufferTensor: reverse on empty buffer");
        size_t idx = (size_t)batch_idx * h_ + unit;
        ideal_[idx] -= rz_ - std::log2((double)z_raw);
        return rev_mul_raw_reverse(h_raw, z_raw, rz_, planes_.back()[idx]);
    }

    void end_reverse_step() {
        if (steps_ == 0)
            throw std::runtime_error("BufferTensor: reverse past the start");
        if (!append_steps_.empty() && append_steps_.back() == steps_) {
            for (uint64_t v : planes_.back())
                if (v != 0)
                    throw std::runtime_error("BufferTensor: appended plane not restored to zero (corrupt buffer?)");
            planes_.pop_back();
            append_steps_.pop_back();
        }
        --steps_;
    }

    // Fault-injection hook for the verification suites.
    void debug_flip_bit(size_t plane, size_t position, int bit) {
        planes_.at(plane).at(position) ^= uint64_t(1) << bit;
    }

    // Storage identity, ignoring the (floating) ideal-bit accumulators.
    friend bool same_storage(const BufferTensor& a, const BufferTensor& b) {
        return a.n_ == b.n_ && a.h_ == b.h_ && a.rz_ == b.rz_ && a.steps_ == b.steps_ &&
               a.planes_ == b.planes_ && a.append_steps_ == b.append_steps_;
    }

    void serialize(std::ostream& os) const;
    static BufferTensor deserialize(std::istream& is);

private:
    int n_ = 0, h_ = 0;
    int rz_ = kDefaultGateBits, rh_ = kDefaultHiddenBits;
    std::vector<std::vector<uint64_t>> planes_;  // back() holds the active limbs
    std::vector<uint64_t> append_steps_;
    std::vector<double> ideal_;
    uint64_t steps_ = 0;
};

inline bool limb_guard(BufferTensor& buf) { return buf.guard(); }

// ---------------------------------------------------------------------------
// BigBufferTensor: reference-mode counterpart (one unbounded integer per
// position). Used to cross-check the limb realization on identical programs.
// ---------------------------------------------------------------------------

class BigBufferTensor {
public:
    BigBufferTensor() = default;
    BigBufferTensor(int batch, int units, int rz = kDefaultGateBits, int rh = kDefaultHiddenBits)
        : n_(batch), h_(units), rz_(rz), rh_(rh), values_((size_t)batch * units),
          ideal_((size_t)batch * units, 0.0) {}

    int batch() const { return n_; }
    int units() const { return h_; }
    int gate_bits() const { return rz_; }
    int hidden_bits() const { return rh_; }
    uint64_t steps() const { return steps_; }

    const BigUint& value_at(int batch_idx, int unit) const {
        return values_[(size_t)batch_idx * h_ + unit];
    }

    uint64_t measured_bits() const {
        uint64_t total = 0;
        for (const auto& v : values_) total += (uint64_t)v.bit_length();
        return total;
    }

    double ideal_bits() const {
        double t = 0.0;
        for (double v : ideal_) t += v;
        return t;
    }

    void begin_step() { ++steps_; }

    int64_t forward_mul(int batch_idx, int unit, int64_t h_raw, uint64_t z_raw) {
        size_t idx = (size_t)batch_idx * h_ + unit;
        ideal_[idx] += rz_ - std::log2((double)z_raw);
        return rev_mul_big_forward(h_raw, z_raw, rz_, values_[idx]);
    }

    int64_t reverse_mul(int batch_idx, int unit, int64_t h_raw, uint64_t z_raw) {
        if (steps_ == 0)
            throw std::runtime_error("BigBufferTensor: reverse on empty buffer");
        size_t idx = (size_t)batch_idx * h_ + unit;
        ideal_[idx] -= rz_ - std::log2((double)z_raw);
        return rev_mul_big_reverse(h_raw, z_raw, rz_, values_[idx]);
    }

    void end_reverse_step() {
        if (steps_ == 0)
            throw std::runtime_error("BigBufferTensor: reverse past the start");
        --steps_;
    }

    friend bool same_storage(const BigBufferTensor& a, const BigBufferTensor& b) {
        return a.n_ == b.n_ && a.h_ == b.h_ && a.steps_ == b.steps_ && a.values_ == b.values_;
    }

private:
    int n_ = 0, h_ = 0;
    int rz_ = kDefaultGateBits, rh_ = kDefaultHiddenBits;
    std::vector<BigUint> values_;
    std::vector<double> ideal_;
    uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Memory accounting.
// ---------------------------------------------------------------------------

// Naive TBPTT baseline stores 32 bits per state unit per timestep.
inline double savings_ratio(uint64_t timesteps, uint64_t total_state_units, uint64_t batch,
                            uint64_t measured_bits) {
    double naive = 32.0 * (double)timesteps * (double)total_state_units * (double)batch;
    if (measured_bits == 0) return std::numeric_limits<double>::infinity();
    return naive / (double)measured_bits;
}

// ---------------------------------------------------------------------------
// BitStack: packed bit storage for discrete forgetting. Fields of a fixed
// width are pushed on the forward pass and popped (last-in first-out) on the
// reverse pass.
// ---------------------------------------------------------------------------

class BitStack {
public:
    size_t bit_count() const { return bits_; }
    uint64_t measured_bits() const { return bits_; }

    void push(uint64_t value, int nbits) {
        for (int i = 0; i < nbits; ++i) {
            size_t pos = bits_++;
            if (pos / 64 >= words_.size()) words_.push_back(0);
            if ((value >> i) & 1) words_[pos / 64] |= uint64_t(1) << (pos % 64);
        }
    }

    uint64_t pop(int nbits) {
        if ((size_t)nbits > bits_) throw std::runtime_error("BitStack: underflow");
        uint64_t value = 0;
        for (int i = nbits - 1; i >= 0; --i) {
            size_t pos = --bits_;
            if ((words_[pos / 64] >> (pos % 64)) & 1) value |= uint64_t(1) << i;
            words_[pos / 64] &= ~(uint64_t(1) << (pos % 64));
        }
        while (words_.size() > (bits_ + 63) / 64) words_.pop_back();
        return value;
    }

    bool operator==(const BitStack&) const = default;

    void serialize(std::ostream& os) const;
    static BitStack deserialize(std::istream& is);

private:
    std::vector<uint64_t> words_;
    size_t bits_ = 0;
};

// ---------------------------------------------------------------------------
// Buffer snapshot serialization: little-endian, header {N, H, D, R_H, R_Z},
// then D planes of N*H limbs, then the reverse bookkeeping (step counter,
// append schedule, ideal-bit accumulators) needed to resume mid-sequence.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                          (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
    os.write((const char*)b, 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write((const char*)b, 8);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read((char*)b, 4);
    if (!is) throw std::runtime_error("buffer snapshot: truncated input");
    return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
}

inline uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read((char*)b, 8);
    if (!is) throw std::runtime_error("buffer snapshot: truncated input");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)b[i] << (8 * i);
    return v;
}

inline void write_f64(std::ostream& os, double v) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    __builtin_memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
    uint64_t bits = read_u64(is);
    double v;
    __builtin_memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void BufferTensor::serialize(std::ostream& os) const {
    os.write("RVBT", 4);
    detail::write_u32(os, (uint32_t)n_);
    detail::write_u32(os, (uint32_t)h_);
    detail::write_u32(os, (uint32_t)planes_.size());
    detail::write_u32(os, (uint32_t)rh_);
    detail::write_u32(os, (uint32_t)rz_);
    for (const auto& plane : planes_)
        for (uint64_t v : plane) detail::write_u64(os, v);
    detail::write_u64(os, steps_);
    detail::write_u32(os, (uint32_t)append_steps_.size());
    for (uint64_t s : append_steps_) detail::write_u64(os, s);
    for (double v : ideal_) detail::write_f64(os, v);
}

inline void BitStack::serialize(std::ostream& os) const {
    detail::write_u64(os, (uint64_t)bits_);
    for (uint64_t w : words_) detail::write_u64(os, w);
}

inline BitStack BitStack::deserialize(std::istream& is) {
    BitStack st;
    st.bits_ = (size_t)detail::read_u64(is);
    st.words_.resize((st.bits_ + 63) / 64);
    for (auto& w : st.words_) w = detail::read_u64(is);
    return st;
}

inline BufferTensor BufferTensor::deserialize(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RVBT")
        throw std::runtime_error("buffer snapshot: bad magic");
    uint32_t n = detail::read_u32(is);
    uint32_t h = detail::read_u32(is);
    uint32_t d = detail::read_u32(is);
    uint32_t rh = detail::read_u32(is);
    uint32_t rz = detail::read_u32(is);
    BufferTensor out((int)n, (int)h, (int)rz, (int)rh);
    out.planes_.resize(d);
    for (auto& plane : out.planes_) {
        plane.resize((size_t)n * h);
        for (auto& v : plane) v = detail::read_u64(is);
    }
    out.steps_ = detail::read_u64(is);
    uint32_t na = detail::read_u32(is);
    out.append_steps_.resize(na);
    for (auto& s : out.append_steps_) s = detail::read_u64(is);
    for (auto& v : out.ideal_) v = detail::read_f64(is);
    return out;
}

}  // namespace revrnn
