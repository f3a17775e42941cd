// SPDX-License-Identifier: Apache-2.0

#include "elastic_kv/numkern.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ekv {

namespace {

void ensure_finite(const Matrix& m, const char* what) {
    for (double v : m.data) {
        EKV_REQUIRE(std::isfinite(v), std::string("non-finite entry produced by ") + what);
    }
}

}  // namespace

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    EKV_REQUIRE(a.cols == b.rows, "matmul dimension mismatch");
    Matrix c(a.rows, b.cols, 0.0);
    // ikj order: same ascending-k accumulation per output element as the
    // textbook triple loop, but cache friendly.
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* crow = c.data.data() + i * c.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
    ensure_finite(c, "matmul");
    return c;
}

Matrix row_softmax_causal(const Matrix& scores) {
    EKV_REQUIRE(scores.rows == scores.cols, "causal softmax requires a square matrix");
    const std::size_t t = scores.rows;
    Matrix out(t, t, 0.0);
    for (std::size_t m = 0; m < t; ++m) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n <= m; ++n) mx = std::max(mx, scores(m, n));
        double denom = 0.0;
        for (std::size_t n = 0; n <= m; ++n) {
            const double e = std::exp(scores(m, n) - mx);
            out(m, n) = e;
            denom += e;
        }
        for (std::size_t n = 0; n <= m; ++n) out(m, n) /= denom;
    }
    ensure_finite(out, "row_softmax_causal");
    return out;
}

void softmax_inplace(std::span<double> v) {
    if (v.empty()) return;
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    double denom = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        denom += x;
    }
    for (double& x : v) x /= denom;
}

void layernorm_row(std::span<double> x, std::span<const double> gain, std::span<const double> bias,
                   double eps) {
    EKV_REQUIRE(x.size() == gain.size() && x.size() == bias.size(), "layernorm size mismatch");
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

double log_sum_exp(std::span<const double> v) {
    EKV_REQUIRE(!v.empty(), "log_sum_exp of empty span");
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

std::size_t argmax(std::span<const double> v) {
    EKV_REQUIRE(!v.empty(), "argmax of empty span");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
    k = std::min(k, v.size());
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace ekv
