// Copyright 2026 The revrnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <random>
#include <stdexcept>
#include <vector>

namespace revrnn {

// Row-major dense matrix. Every product in this library runs the plain
// sequential loops below; the reverse pass recomputes gate activations and
// must see bit-identical floating point, so summation order is part of the
// contract.
struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a((size_t)r * c, 0.0) {}

    double& operator()(int r, int c) { return a[(size_t)r * cols + c]; }
    double operator()(int r, int c) const { return a[(size_t)r * cols + c]; }
    const double* row(int r) const { return a.data() + (size_t)r * cols; }
    double* row(int r) { return a.data() + (size_t)r * cols; }

    bool empty() const { return a.empty(); }
    size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), 0.0); }
};

// out = W x
inline void matvec(const Mat& W, const double* x, double* out) {
    for (int r = 0; r < W.rows; ++r) {
        double s = 0.0;
        const double* w = W.row(r);
        for (int c = 0; c < W.cols; ++c) s += w[c] * x[c];
        out[r] = s;
    }
}

// out += W^T d
inline void matvec_t_add(const Mat& W, const double* d, double* out) {
    for (int r = 0; r < W.rows; ++r) {
        const double* w = W.row(r);
        double dr = d[r];
        for (int c = 0; c < W.cols; ++c) out[c] += w[c] * dr;
    }
}

// G += d x^T
inline void outer_add(Mat& G, const double* d, const double* x) {
    for (int r = 0; r < G.rows; ++r) {
        double* g = G.row(r);
        double dr = d[r];
        for (int c = 0; c < G.cols; ++c) g[c] += dr * x[c];
    }
}

inline void init_uniform(Mat& m, std::mt19937_64& rng, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : m.a) v = dist(rng);
}

inline void axpy(Mat& y, double alpha, const Mat& x) {
    if (y.size() != x.size()) throw std::invalid_argument("axpy: shape mismatch");
    for (size_t i = 0; i < y.a.size(); ++i) y.a[i] += alpha * x.a[i];
}

}  // namespace revrnn
