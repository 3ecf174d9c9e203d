#pragma once

#include <cstddef>
#include <vector>

#include "kanizsa/common.hpp"

namespace kanizsa::nn {

/// Dense batch tensor with logical shape (batch, channels, height, width).
/// Memory is channels-last, row-major in (n, h, w, c): every GEMM in the
/// layer stack then runs with a unit-stride inner loop and no transposes.
/// For 2D data (after Flatten) h = w = 1 and samples are plain rows.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_) {}

    size_t sample_size() const { return static_cast<size_t>(c) * h * w; }
    size_t size() const { return static_cast<size_t>(n) * sample_size(); }

    void reshape(int n_, int c_, int h_, int w_) {
        n = n_; c = c_; h = h_; w = w_;
        v.resize(size());
    }

    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    T* sample(int i) { return v.data() + static_cast<size_t>(i) * sample_size(); }
    const T* sample(int i) const { return v.data() + static_cast<size_t>(i) * sample_size(); }
};

// Two GEMM forms cover every layer. Both keep the inner loop over N with
// unit stride and accumulate each output element in a fixed k-order, so the
// compiler can vectorize without reassociation and results are reproducible.
// Zero multipliers are skipped; with sparse activations (background pixels,
// post-ReLU zeros) that removes a large share of the work exactly.

/// C[m,:] = bias + sum_k A[m,k] * B[k,:]   (bias may be null for zero-init)
template <typename T>
inline void gemm_bias(const T* A, const T* B, const T* bias, T* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const T* arow = A + static_cast<size_t>(m) * K;
        T* crow = C + static_cast<size_t>(m) * N;
        if (bias) {
            for (int j = 0; j < N; ++j) crow[j] = bias[j];
        } else {
            for (int j = 0; j < N; ++j) crow[j] = T(0);
        }
        for (int k = 0; k < K; ++k) {
            T a = arow[k];
            if (a == T(0)) continue;
            const T* brow = B + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
    }
}

/// C[k,:] += sum_m A[m,k] * B[m,:]   (A^T B, accumulating into C)
template <typename T>
inline void gemm_at_b_accum(const T* A, const T* B, T* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const T* arow = A + static_cast<size_t>(m) * K;
        const T* brow = B + static_cast<size_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            T a = arow[k];
            if (a == T(0)) continue;
            T* crow = C + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
    }
}

}  // namespace kanizsa::nn
