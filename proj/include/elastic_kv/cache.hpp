// SPDX-License-Identifier: Apache-2.0
//
// KV-cache storage and the cache management policies: Full (keep
// everything), Local (sink + recency window), H2O (accumulated-score
// frequency eviction) and Elastic (importance-driven cache merging at the
// instruction-encoding stage plus fixed-point elimination during output
// generation), together with the ablation axes: discard position, merging
// strategy, attention aggregation scope and importance statistic.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "elastic_kv/numkern.hpp"

namespace ekv {

// Original-token identity of a cache slot. Unmerged slots have
// anchor == first == last; merged slots cover [first, last] and are stored
// at the anchor's position.
struct SlotOrigin {
    std::uint32_t anchor = 0;
    std::uint32_t first = 0;
    std::uint32_t last = 0;

    bool operator==(const SlotOrigin&) const = default;

    static SlotOrigin single(std::uint32_t idx) { return {idx, idx, idx}; }
};

struct CacheSlot {
    std::vector<double> key;    // d_head
    std::vector<double> value;  // d_head
    SlotOrigin origin;
    std::uint32_t weight = 1;  // number of merged members
};

// Per-layer cache: one slot list per head plus shared per-slot metadata.
// All head lists stay the same length; under layer-shared scopes the
// origin descriptors are identical across heads as well.
struct LayerKvCache {
    std::vector<std::vector<CacheSlot>> heads;
    std::vector<double> scores;  // accumulated importance (the S array)
    std::size_t instruction_boundary = 0;

    std::size_t size() const { return heads.empty() ? 0 : heads[0].size(); }
    void remove_slot(std::size_t idx);
    void check_consistent() const;
};

enum class PolicyKind { full, local, h2o, elastic };
enum class Statistic { sum, mean, moving_average };
enum class Scope { shared, head_wise, layer_wise };
enum class MergeMode { evict, merge, cluster };
enum class DiscardPosition { fixed_point, frequency, most_recent };

std::string to_string(PolicyKind k);
std::string to_string(Statistic s);
std::string to_string(Scope s);
std::string to_string(MergeMode m);
std::string to_string(DiscardPosition d);
PolicyKind parse_policy_kind(const std::string& s);
Statistic parse_statistic(const std::string& s);
Scope parse_scope(const std::string& s);
MergeMode parse_merge_mode(const std::string& s);
DiscardPosition parse_discard(const std::string& s);

struct PolicyConfig {
    PolicyKind kind = PolicyKind::full;
    double budget = 1.0;              // retention ratio in (0, 1]
    std::uint32_t recent_window = 25; // W
    std::int32_t trunc_offset = 0;    // P
    Statistic statistic = Statistic::sum;
    Scope scope = Scope::layer_wise;
    MergeMode merge_mode = MergeMode::merge;
    DiscardPosition discard = DiscardPosition::fixed_point;
    double ma_decay = 0.9;      // moving-average statistic decay
    std::uint32_t cluster_k = 10;
    bool protect_first = true;
    bool protect_last = true;

    void validate() const;
    std::string name() const;        // short label; elastic defaults collapse to "elastic"
    std::string descriptor() const;  // full four-axis elastic descriptor

    static PolicyConfig full_cache();
    static PolicyConfig local(double budget);
    static PolicyConfig h2o(double budget);
    static PolicyConfig elastic(double budget);
};

// Prefill attention: attention[layer][head] is the T x T causal matrix.
using LayerAttention = std::vector<Matrix>;
using PrefillAttention = std::vector<LayerAttention>;

// Whole slots above budget for a cache of `len` slots covering `total`
// processed positions: trunc(len - budget*total), floored at 0.
long over_budget_excess(std::size_t len, std::size_t total, double budget);

// Number of slots retained for `total` positions at the given budget:
// total - trunc(total - budget*total), never below 1.
std::size_t retained_count(std::size_t total, double budget);

// Importance scores derived from prefill attention.
// groups[layer][group][token]: one group per head under head_wise scope,
// otherwise a single aggregated group per layer (identical across layers
// for shared scope).
struct ImportanceScores {
    std::vector<std::vector<std::vector<double>>> groups;
    bool head_wise = false;
};
ImportanceScores importance_scores(const PrefillAttention& attention, Statistic statistic,
                                   Scope scope, double ma_decay = 0.9);

// Top retained_count(T, budget) indices by score, ascending. Protection
// flags force-include indices 0 and T-1 (counted inside the budget);
// score ties prefer the smaller index.
std::vector<std::uint32_t> select_anchors(std::span<const double> scores, double budget,
                                          bool protect_first, bool protect_last);

// Contiguous index ranges around ascending anchors; buckets partition
// 0..total-1 exactly and each bucket contains its anchor.
struct BucketPartition {
    std::vector<std::uint32_t> anchors;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> ranges;  // inclusive [lo, hi]
};
BucketPartition partition_buckets(const std::vector<std::uint32_t>& anchors, std::size_t total);

// Collapses an uncompressed layer cache onto the partition. merge averages
// each bucket's keys/values into the anchor slot; evict keeps anchors only;
// cluster keeps anchors and appends k-means centroids of the non-anchor
// slots. Scores follow: merged/centroid slot score = sum of member scores.
void merge_buckets(LayerKvCache& cache, const BucketPartition& partition, MergeMode mode,
                   std::uint32_t cluster_k = 10);

// Decode-phase maintenance. The new slot must already be appended and the
// step's attention accumulated into scores; total_len counts all positions
// fed through the model so far. Each call removes at most one slot.
void elastic_decode_update(LayerKvCache& cache, std::size_t total_len, const PolicyConfig& config);
void h2o_decode_update(LayerKvCache& cache, std::size_t total_len, const PolicyConfig& config);
void local_decode_update(LayerKvCache& cache, std::size_t total_len, const PolicyConfig& config);

// One generation's cache: L layer caches behind a policy. Single writer.
class KvCacheSet {
public:
    KvCacheSet(std::size_t n_layers, std::size_t n_heads, std::size_t d_head,
               PolicyConfig policy);

    std::size_t n_layers() const { return layers_.size(); }
    std::size_t n_heads() const { return n_heads_; }
    std::size_t d_head() const { return d_head_; }
    const PolicyConfig& policy() const { return policy_; }

    LayerKvCache& layer(std::size_t l) { return layers_[l]; }
    const LayerKvCache& layer(std::size_t l) const { return layers_[l]; }

    // Positions fed through the model so far (prefill + decode).
    std::size_t total_tokens() const { return total_tokens_; }
    // Reserves `count` consecutive position ids, returns the first.
    std::size_t allocate_positions(std::size_t count);

    // Splits a d_model key/value row into per-head slots and appends.
    void append_row(std::size_t layer, std::span<const double> key_row,
                    std::span<const double> value_row, std::uint32_t origin);

    // Applies the policy's instruction-encoding compression using the
    // attention returned by prefill, and seeds the score accumulator.
    void compress_after_prefill(const PrefillAttention& attention);

    // Accumulates one decode step's attention (head_rows[h][slot], width =
    // current layer size) into the scores and applies the policy's discard
    // rule for this layer.
    void update_layer_after_decode(std::size_t layer,
                                   const std::vector<std::vector<double>>& head_rows);

    // Debug/test snapshot: one JSON line per layer with
    // {layer, origins, weights, scores}.
    void dump_snapshot(std::ostream& os) const;

private:
    std::vector<LayerKvCache> layers_;
    std::size_t n_heads_;
    std::size_t d_head_;
    PolicyConfig policy_;
    std::size_t total_tokens_ = 0;
};

}  // namespace ekv
