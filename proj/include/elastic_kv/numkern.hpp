// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense numeric kernels shared by the model and the metrics:
// matrix multiply, causal row softmax, layer normalization, argmax/top-k
// and a stable log-sum-exp. Everything is 64-bit float and single-threaded
// with a fixed accumulation order, so results are bit-reproducible.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "elastic_kv/common.hpp"

namespace ekv {

/// Row-major dense matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    static Matrix identity(std::size_t n);
};

// C = A * B, accumulated over the inner dimension in ascending order.
// Throws on dimension mismatch or non-finite result entries.
Matrix matmul(const Matrix& a, const Matrix& b);

// Causal softmax over a square score matrix: row m is normalized over
// columns 0..m (max-subtracted for stability), entries above the diagonal
// are exactly zero.
Matrix row_softmax_causal(const Matrix& scores);

// In-place softmax of a single score row with max subtraction.
void softmax_inplace(std::span<double> v);

// In-place layer normalization with learned gain/bias; population variance.
void layernorm_row(std::span<double> x, std::span<const double> gain, std::span<const double> bias,
                   double eps = 1e-5);

// log(sum(exp(v))), max-subtracted.
double log_sum_exp(std::span<const double> v);

// Index of the maximum entry; ties resolve to the smallest index.
std::size_t argmax(std::span<const double> v);

// Indices of the k largest entries in ascending index order; ties prefer
// the smaller index.
std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k);

}  // namespace ekv
