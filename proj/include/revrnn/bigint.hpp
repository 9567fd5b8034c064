// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace revrnn {

// Minimal unbounded non-negative integer, little-endian 64-bit limbs.
// Only the operations the information buffer needs: shifts by < 64 bits,
// small addition, multiply / divmod by a 32-bit value, bit length.
class BigUint {
public:
    BigUint() = default;
    explicit BigUint(uint64_t v) {
        if (v) limbs_.push_back(v);
    }

    bool is_zero() const { return limbs_.empty(); }

    bool operator==(const BigUint&) const = default;

    // *this <<= k, 0 <= k < 64
    void shift_left(int k) {
        if (k == 0 || limbs_.empty()) return;
        uint64_t carry = 0;
        for (auto& limb : limbs_) {
            uint64_t next = limb >> (64 - k);
            limb = (limb << k) | carry;
            carry = next;
        }
        if (carry) limbs_.push_back(carry);
    }

    // *this >>= k, 0 <= k < 64
    void shift_right(int k) {
        if (k == 0 || limbs_.empty()) return;
        for (size_t i = 0; i < limbs_.size(); ++i) {
            uint64_t hi = (i + 1 < limbs_.size()) ? limbs_[i + 1] : 0;
            limbs_[i] = (limbs_[i] >> k) | (hi << (64 - k));
        }
        trim();
    }

    // Low k bits as a machine word, 0 <= k < 64.
    uint64_t low_bits(int k) const {
        if (k == 0 || limbs_.empty()) return 0;
        return limbs_[0] & ((uint64_t(1) << k) - 1);
    }

    void add_small(uint64_t v) {
        for (size_t i = 0; v && i < limbs_.size(); ++i) {
            uint64_t before = limbs_[i];
            limbs_[i] += v;
            v = (limbs_[i] < before) ? 1 : 0;
        }
        if (v) limbs_.push_back(v);
    }

    void mul_small(uint64_t v) {
        if (v == 0) {
            limbs_.clear();
            return;
        }
        unsigned __int128 carry = 0;
        for (auto& limb : limbs_) {
            unsigned __int128 p = (unsigned __int128)limb * v + carry;
            limb = (uint64_t)p;
            carry = p >> 64;
        }
        if (carry) limbs_.push_back((uint64_t)carry);
    }

    // *this /= d, returns the remainder. d must be nonzero.
    uint64_t divmod_small(uint64_t d) {
        unsigned __int128 rem = 0;
        for (size_t i = limbs_.size(); i-- > 0;) {
            unsigned __int128 cur = (rem << 64) | limbs_[i];
            limbs_[i] = (uint64_t)(cur / d);
            rem = cur % d;
        }
        trim();
        return (uint64_t)rem;
    }

    uint64_t mod_small(uint64_t d) const {
        unsigned __int128 rem = 0;
        for (size_t i = limbs_.size(); i-- > 0;)
            rem = ((rem << 64) | limbs_[i]) % d;
        return (uint64_t)rem;
    }

    // Position of the highest set bit plus one; 0 for zero.
    int64_t bit_length() const {
        if (limbs_.empty()) return 0;
        uint64_t top = limbs_.back();
        int b = 0;
        while (top) {
            ++b;
            top >>= 1;
        }
        return (int64_t)(limbs_.size() - 1) * 64 + b;
    }

    const std::vector<uint64_t>& limbs() const { return limbs_; }

private:
    void trim() {
        while (!limbs_.empty() && limbs_.back() == 0) limbs_.pop_back();
    }

    std::vector<uint64_t> limbs_;
};

}  // namespace revrnn
