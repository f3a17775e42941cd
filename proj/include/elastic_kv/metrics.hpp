// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: perplexity as the exponential of the mean
// cross-entropy, ROUGE-L precision/recall/F1 via longest common
// subsequence, and attention FLOP / KV-memory accounting over cache
// length traces.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "elastic_kv/common.hpp"

namespace ekv {

struct PplResult {
    double mean_ce = 0.0;  // nats
    double ppl = 1.0;
    std::size_t n_positions = 0;
};

// Teacher-forced perplexity: one logits row per target token; row i is the
// model's prediction for targets[i] given the ground-truth prefix.
PplResult perplexity(const std::vector<std::vector<double>>& logit_rows,
                     std::span<const TokenId> targets);

struct RougeResult {
    std::size_t lcs_len = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Standard O(n*m) dynamic-programming LCS (subsequence, not substring).
std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);

RougeResult rouge_l_f1(std::span<const TokenId> candidate, std::span<const TokenId> reference);

struct CostReport {
    std::uint64_t attn_flops = 0;
    std::uint64_t kv_bytes_peak = 0;
    double wall_ms = 0.0;
    double tokens_per_s = 0.0;
};

// Attention cost over a per-decode-step cache length trace:
// 4 * L * K * d_head * len per step (QK^T plus AV), and the peak KV
// footprint at 8-byte floats. Timing fields are left for the caller.
CostReport attention_flops(std::span<const std::size_t> cache_len_trace, std::size_t d_head,
                           std::size_t n_heads, std::size_t n_layers);

}  // namespace ekv
