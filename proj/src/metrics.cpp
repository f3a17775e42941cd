// SPDX-License-Identifier: Apache-2.0

#include "elastic_kv/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "elastic_kv/numkern.hpp"

namespace ekv {

PplResult perplexity(const std::vector<std::vector<double>>& logit_rows,
                     std::span<const TokenId> targets) {
    EKV_REQUIRE(!targets.empty(), "perplexity of empty target sequence");
    EKV_REQUIRE(logit_rows.size() == targets.size(),
                "perplexity needs one logits row per target");
    double total_ce = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& row = logit_rows[i];
        EKV_REQUIRE(targets[i] < row.size(), "target id outside logits row");
        // cross-entropy in nats: logsumexp(row) - row[target]
        total_ce += log_sum_exp(row) - row[targets[i]];
    }
    PplResult r;
    r.n_positions = targets.size();
    r.mean_ce = total_ce / static_cast<double>(targets.size());
    r.ppl = std::exp(r.mean_ce);
    return r;
}

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
    if (a.empty() || b.empty()) return 0;
    // two-row DP
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

RougeResult rouge_l_f1(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
    RougeResult r;
    r.lcs_len = lcs_length(candidate, reference);
    if (candidate.empty() || reference.empty()) return r;
    r.precision = static_cast<double>(r.lcs_len) / static_cast<double>(candidate.size());
    r.recall = static_cast<double>(r.lcs_len) / static_cast<double>(reference.size());
    if (r.precision + r.recall > 0.0) {
        r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    }
    return r;
}

CostReport attention_flops(std::span<const std::size_t> cache_len_trace, std::size_t d_head,
                           std::size_t n_heads, std::size_t n_layers) {
    CostReport report;
    std::size_t peak_len = 0;
    for (std::size_t len : cache_len_trace) {
        // QK^T and AV, multiply+add each
        report.attn_flops += static_cast<std::uint64_t>(4 * n_layers * n_heads * d_head) * len;
        peak_len = std::max(peak_len, len);
    }
    report.kv_bytes_peak =
        static_cast<std::uint64_t>(peak_len) * n_layers * n_heads * d_head * 2 * sizeof(double);
    return report;
}

}  // namespace ekv
