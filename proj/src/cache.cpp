// SPDX-License-Identifier: Apache-2.0

#include "elastic_kv/cache.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <json.hpp>

namespace ekv {

// ---------------------------------------------------------------------------
// LayerKvCache

void LayerKvCache::remove_slot(std::size_t idx) {
    EKV_REQUIRE(idx < size(), "remove_slot index out of range");
    for (auto& head : heads) head.erase(head.begin() + static_cast<std::ptrdiff_t>(idx));
    scores.erase(scores.begin() + static_cast<std::ptrdiff_t>(idx));
    if (idx < instruction_boundary) --instruction_boundary;
}

void LayerKvCache::check_consistent() const {
    for (const auto& head : heads) {
        EKV_REQUIRE(head.size() == size(), "head lists diverged in length");
    }
    EKV_REQUIRE(scores.size() == size(), "score array diverged from slot count");
}

// ---------------------------------------------------------------------------
// enums

std::string to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::full: return "full";
        case PolicyKind::local: return "local";
        case PolicyKind::h2o: return "h2o";
        case PolicyKind::elastic: return "elastic";
    }
    return "?";
}

std::string to_string(Statistic s) {
    switch (s) {
        case Statistic::sum: return "sum";
        case Statistic::mean: return "mean";
        case Statistic::moving_average: return "moving_average";
    }
    return "?";
}

std::string to_string(Scope s) {
    switch (s) {
        case Scope::shared: return "shared";
        case Scope::head_wise: return "head_wise";
        case Scope::layer_wise: return "layer_wise";
    }
    return "?";
}

std::string to_string(MergeMode m) {
    switch (m) {
        case MergeMode::evict: return "evict";
        case MergeMode::merge: return "merge";
        case MergeMode::cluster: return "cluster";
    }
    return "?";
}

std::string to_string(DiscardPosition d) {
    switch (d) {
        case DiscardPosition::fixed_point: return "fixed_point";
        case DiscardPosition::frequency: return "frequency";
        case DiscardPosition::most_recent: return "most_recent";
    }
    return "?";
}

PolicyKind parse_policy_kind(const std::string& s) {
    if (s == "full") return PolicyKind::full;
    if (s == "local") return PolicyKind::local;
    if (s == "h2o") return PolicyKind::h2o;
    if (s == "elastic") return PolicyKind::elastic;
    throw std::runtime_error("unknown policy kind: " + s);
}

Statistic parse_statistic(const std::string& s) {
    if (s == "sum") return Statistic::sum;
    if (s == "mean") return Statistic::mean;
    if (s == "moving_average") return Statistic::moving_average;
    throw std::runtime_error("unknown statistic: " + s);
}

Scope parse_scope(const std::string& s) {
    if (s == "shared") return Scope::shared;
    if (s == "head_wise") return Scope::head_wise;
    if (s == "layer_wise") return Scope::layer_wise;
    throw std::runtime_error("unknown scope: " + s);
}

MergeMode parse_merge_mode(const std::string& s) {
    if (s == "evict") return MergeMode::evict;
    if (s == "merge") return MergeMode::merge;
    if (s == "cluster") return MergeMode::cluster;
    throw std::runtime_error("unknown merge mode: " + s);
}

DiscardPosition parse_discard(const std::string& s) {
    if (s == "fixed_point") return DiscardPosition::fixed_point;
    if (s == "frequency") return DiscardPosition::frequency;
    if (s == "most_recent") return DiscardPosition::most_recent;
    throw std::runtime_error("unknown discard position: " + s);
}

// ---------------------------------------------------------------------------
// PolicyConfig

void PolicyConfig::validate() const {
    EKV_REQUIRE(budget > 0.0 && budget <= 1.0, "budget must be in (0, 1]");
    EKV_REQUIRE(recent_window >= 1, "recent_window must be >= 1");
    EKV_REQUIRE(cluster_k >= 1, "cluster_k must be >= 1");
    EKV_REQUIRE(ma_decay > 0.0 && ma_decay < 1.0, "ma_decay must be in (0, 1)");
}

std::string PolicyConfig::name() const {
    if (kind != PolicyKind::elastic) return to_string(kind);
    const PolicyConfig defaults = elastic(budget);
    if (discard == defaults.discard && merge_mode == defaults.merge_mode &&
        scope == defaults.scope && statistic == defaults.statistic) {
        return "elastic";
    }
    return descriptor();
}

std::string PolicyConfig::descriptor() const {
    if (kind != PolicyKind::elastic) return to_string(kind);
    // '|' keeps the label a single CSV field
    return "elastic/discard=" + to_string(discard) + "|merge=" + to_string(merge_mode) +
           "|scope=" + to_string(scope) + "|stat=" + to_string(statistic);
}

PolicyConfig PolicyConfig::full_cache() { return {}; }

PolicyConfig PolicyConfig::local(double budget) {
    PolicyConfig c;
    c.kind = PolicyKind::local;
    c.budget = budget;
    return c;
}

PolicyConfig PolicyConfig::h2o(double budget) {
    PolicyConfig c;
    c.kind = PolicyKind::h2o;
    c.budget = budget;
    return c;
}

PolicyConfig PolicyConfig::elastic(double budget) {
    PolicyConfig c;
    c.kind = PolicyKind::elastic;
    c.budget = budget;
    return c;
}

// ---------------------------------------------------------------------------
// budget arithmetic
//
// Both expressions are shared by every policy and by the pseudocode
// transcription used in the tests; the trunc() form keeps them in exact
// agreement (del_num = int(seq_len - n * retention)).

long over_budget_excess(std::size_t len, std::size_t total, double budget) {
    const double excess =
        std::trunc(static_cast<double>(len) - budget * static_cast<double>(total));
    return excess <= 0.0 ? 0L : static_cast<long>(excess);
}

std::size_t retained_count(std::size_t total, double budget) {
    EKV_REQUIRE(total >= 1, "retained_count of empty sequence");
    const long del = over_budget_excess(total, total, budget);
    const long keep = static_cast<long>(total) - del;
    return keep < 1 ? 1u : static_cast<std::size_t>(keep);
}

// ---------------------------------------------------------------------------
// importance scores

namespace {

// Per-head score vector for one causal attention matrix.
std::vector<double> head_statistic(const Matrix& attn, Statistic statistic, double ma_decay) {
    const std::size_t t = attn.rows;
    std::vector<double> s(t, 0.0);
    switch (statistic) {
        case Statistic::sum:
            for (std::size_t m = 0; m < t; ++m)
                for (std::size_t n = 0; n <= m; ++n) s[n] += attn(m, n);
            break;
        case Statistic::mean:
            // column sum over the column's causal entries (rows n..T-1)
            for (std::size_t m = 0; m < t; ++m)
                for (std::size_t n = 0; n <= m; ++n) s[n] += attn(m, n);
            for (std::size_t n = 0; n < t; ++n) s[n] /= static_cast<double>(t - n);
            break;
        case Statistic::moving_average:
            // exponentially decayed running sum over rows
            for (std::size_t m = 0; m < t; ++m) {
                for (std::size_t n = 0; n < t; ++n) s[n] *= ma_decay;
                for (std::size_t n = 0; n <= m; ++n) s[n] += attn(m, n);
            }
            break;
    }
    return s;
}

std::vector<double> head_average(const std::vector<std::vector<double>>& per_head) {
    const std::size_t t = per_head.front().size();
    std::vector<double> out(t, 0.0);
    for (const auto& h : per_head)
        for (std::size_t n = 0; n < t; ++n) out[n] += h[n];
    for (double& v : out) v /= static_cast<double>(per_head.size());
    return out;
}

}  // namespace

ImportanceScores importance_scores(const PrefillAttention& attention, Statistic statistic,
                                   Scope scope, double ma_decay) {
    EKV_REQUIRE(!attention.empty() && !attention.front().empty(), "empty attention set");
    ImportanceScores out;
    out.head_wise = (scope == Scope::head_wise);
    out.groups.resize(attention.size());

    std::vector<std::vector<double>> layer_avg(attention.size());
    for (std::size_t l = 0; l < attention.size(); ++l) {
        std::vector<std::vector<double>> per_head;
        per_head.reserve(attention[l].size());
        for (const Matrix& a : attention[l]) per_head.push_back(head_statistic(a, statistic, ma_decay));
        if (scope == Scope::head_wise) {
            out.groups[l] = std::move(per_head);
        } else {
            layer_avg[l] = head_average(per_head);
        }
    }
    if (scope == Scope::layer_wise) {
        for (std::size_t l = 0; l < attention.size(); ++l) out.groups[l] = {std::move(layer_avg[l])};
    } else if (scope == Scope::shared) {
        const std::size_t t = layer_avg.front().size();
        std::vector<double> shared(t, 0.0);
        for (const auto& lv : layer_avg)
            for (std::size_t n = 0; n < t; ++n) shared[n] += lv[n];
        for (double& v : shared) v /= static_cast<double>(layer_avg.size());
        for (std::size_t l = 0; l < attention.size(); ++l) out.groups[l] = {shared};
    }
    return out;
}

// ---------------------------------------------------------------------------
// anchor selection and bucket partition

std::vector<std::uint32_t> select_anchors(std::span<const double> scores, double budget,
                                          bool protect_first, bool protect_last) {
    const std::size_t t = scores.size();
    EKV_REQUIRE(t >= 1, "select_anchors on empty scores");
    const std::size_t n_keep = retained_count(t, budget);

    std::vector<bool> chosen(t, false);
    std::size_t n_chosen = 0;
    const auto force = [&](std::size_t idx) {
        if (n_chosen < n_keep && !chosen[idx]) {
            chosen[idx] = true;
            ++n_chosen;
        }
    };
    if (protect_first) force(0);
    if (protect_last) force(t - 1);

    std::vector<std::uint32_t> order(t);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    for (std::uint32_t idx : order) {
        if (n_chosen >= n_keep) break;
        if (!chosen[idx]) {
            chosen[idx] = true;
            ++n_chosen;
        }
    }

    std::vector<std::uint32_t> anchors;
    anchors.reserve(n_keep);
    for (std::uint32_t i = 0; i < t; ++i)
        if (chosen[i]) anchors.push_back(i);
    return anchors;
}

BucketPartition partition_buckets(const std::vector<std::uint32_t>& anchors, std::size_t total) {
    EKV_REQUIRE(!anchors.empty(), "partition_buckets with no anchors");
    for (std::size_t k = 0; k + 1 < anchors.size(); ++k) {
        EKV_REQUIRE(anchors[k] < anchors[k + 1], "anchors must be strictly ascending");
    }
    EKV_REQUIRE(anchors.back() < total, "anchor out of range");

    BucketPartition p;
    p.anchors = anchors;
    const std::size_t n = anchors.size();
    p.ranges.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::uint32_t lo = (k == 0) ? 0u : (anchors[k - 1] + anchors[k]) / 2 + 1;
        const std::uint32_t hi =
            (k + 1 == n) ? static_cast<std::uint32_t>(total - 1) : (anchors[k] + anchors[k + 1]) / 2;
        p.ranges.emplace_back(lo, hi);
    }

    // partition postconditions
    EKV_REQUIRE(p.ranges.front().first == 0 && p.ranges.back().second == total - 1,
                "buckets must cover 0..T-1");
    for (std::size_t k = 0; k < n; ++k) {
        const auto [lo, hi] = p.ranges[k];
        EKV_REQUIRE(lo <= anchors[k] && anchors[k] <= hi, "bucket must contain its anchor");
        if (k + 1 < n) EKV_REQUIRE(p.ranges[k + 1].first == hi + 1, "buckets must be contiguous");
    }
    return p;
}

// ---------------------------------------------------------------------------
// merging

namespace {

std::vector<double> mean_vec(const std::vector<CacheSlot>& slots, std::size_t lo, std::size_t hi,
                             bool keys) {
    const std::size_t d = slots[lo].key.size();
    std::vector<double> out(d, 0.0);
    for (std::size_t t = lo; t <= hi; ++t) {
        const auto& v = keys ? slots[t].key : slots[t].value;
        for (std::size_t i = 0; i < d; ++i) out[i] += v[i];
    }
    const double inv = 1.0 / static_cast<double>(hi - lo + 1);
    for (double& x : out) x *= inv;
    return out;
}

// Mean-merge or evict for a single head. Returns the new score vector.
std::vector<double> apply_partition_head(std::vector<CacheSlot>& slots,
                                         const std::vector<double>& scores,
                                         const BucketPartition& partition, MergeMode mode) {
    std::vector<CacheSlot> merged;
    std::vector<double> new_scores;
    merged.reserve(partition.ranges.size());
    new_scores.reserve(partition.ranges.size());
    for (std::size_t k = 0; k < partition.ranges.size(); ++k) {
        const auto [lo, hi] = partition.ranges[k];
        const std::uint32_t anchor = partition.anchors[k];
        if (mode == MergeMode::evict || lo == hi) {
            merged.push_back(slots[anchor]);
            new_scores.push_back(scores[anchor]);
            continue;
        }
        CacheSlot s;
        s.key = mean_vec(slots, lo, hi, true);
        s.value = mean_vec(slots, lo, hi, false);
        s.origin = {anchor, lo, hi};
        s.weight = hi - lo + 1;
        merged.push_back(std::move(s));
        double sum = 0.0;
        for (std::size_t t = lo; t <= hi; ++t) sum += scores[t];
        new_scores.push_back(sum);
    }
    slots = std::move(merged);
    return new_scores;
}

struct ClusterResult {
    std::vector<std::vector<std::uint32_t>> members;  // per cluster, ascending token indices
};

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

// Deterministic Lloyd's k-means: centroids seeded at evenly spaced points,
// 10 iterations, empty clusters re-seeded from the farthest point.
ClusterResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k) {
    const std::size_t n = points.size();
    k = std::min(k, n);
    const std::size_t dim = points.front().size();

    std::vector<std::vector<double>> centroids(k);
    for (std::size_t c = 0; c < k; ++c) centroids[c] = points[c * n / k];

    std::vector<std::size_t> assign(n, 0);
    for (int iter = 0; iter < 10; ++iter) {
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = sq_dist(points[i], centroids[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double d = sq_dist(points[i], centroids[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        std::vector<std::size_t> count(k, 0);
        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        for (std::size_t i = 0; i < n; ++i) {
            ++count[assign[i]];
            for (std::size_t j = 0; j < dim; ++j) sums[assign[i]][j] += points[i][j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) {
                // farthest point from its assigned centroid takes over
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = sq_dist(points[i], centroids[assign[i]]);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[c] = points[far];
                assign[far] = c;
                continue;
            }
            for (std::size_t j = 0; j < dim; ++j) sums[c][j] /= static_cast<double>(count[c]);
            centroids[c] = std::move(sums[c]);
        }
    }
    // final assignment against the last centroids
    ClusterResult result;
    result.members.assign(k, {});
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_d = sq_dist(points[i], centroids[0]);
        for (std::size_t c = 1; c < k; ++c) {
            const double d = sq_dist(points[i], centroids[c]);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        result.members[best].push_back(static_cast<std::uint32_t>(i));
    }
    std::erase_if(result.members, [](const auto& m) { return m.empty(); });
    return result;
}

// Keep anchors, cluster the remaining slots on their (head-concatenated)
// keys and append one averaged slot per cluster. Cluster membership is
// shared across heads so origins stay consistent within the layer.
void cluster_merge_layer(LayerKvCache& cache, const BucketPartition& partition,
                         std::uint32_t cluster_k) {
    const std::size_t t = cache.size();
    std::vector<bool> is_anchor(t, false);
    for (std::uint32_t a : partition.anchors) is_anchor[a] = true;

    std::vector<std::uint32_t> rest;
    for (std::uint32_t i = 0; i < t; ++i)
        if (!is_anchor[i]) rest.push_back(i);

    std::vector<ClusterResult> clusters;
    if (!rest.empty()) {
        std::vector<std::vector<double>> points(rest.size());
        for (std::size_t i = 0; i < rest.size(); ++i) {
            for (const auto& head : cache.heads) {
                const auto& key = head[rest[i]].key;
                points[i].insert(points[i].end(), key.begin(), key.end());
            }
        }
        clusters.push_back(kmeans(points, cluster_k));
    }

    std::vector<double> old_scores = cache.scores;
    std::vector<double> new_scores;
    std::vector<std::vector<CacheSlot>> new_heads(cache.heads.size());

    for (std::uint32_t a : partition.anchors) {
        for (std::size_t h = 0; h < cache.heads.size(); ++h) new_heads[h].push_back(cache.heads[h][a]);
        new_scores.push_back(old_scores[a]);
    }
    if (!clusters.empty()) {
        // centroids appended in origin order (earliest member first)
        auto members = clusters.front().members;
        std::sort(members.begin(), members.end(),
                  [&](const auto& a, const auto& b) { return rest[a.front()] < rest[b.front()]; });
        for (const auto& cluster : members) {
            double score_sum = 0.0;
            std::uint32_t first = rest[cluster.front()];
            std::uint32_t last = rest[cluster.back()];
            for (std::uint32_t m : cluster) score_sum += old_scores[rest[m]];
            for (std::size_t h = 0; h < cache.heads.size(); ++h) {
                const std::size_t d = cache.heads[h][0].key.size();
                CacheSlot s;
                s.key.assign(d, 0.0);
                s.value.assign(d, 0.0);
                for (std::uint32_t m : cluster) {
                    const CacheSlot& src = cache.heads[h][rest[m]];
                    for (std::size_t i = 0; i < d; ++i) {
                        s.key[i] += src.key[i];
                        s.value[i] += src.value[i];
                    }
                }
                const double inv = 1.0 / static_cast<double>(cluster.size());
                for (std::size_t i = 0; i < d; ++i) {
                    s.key[i] *= inv;
                    s.value[i] *= inv;
                }
                s.origin = {rest[cluster.front()], first, last};
                s.weight = static_cast<std::uint32_t>(cluster.size());
                new_heads[h].push_back(std::move(s));
            }
            new_scores.push_back(score_sum);
        }
    }
    cache.heads = std::move(new_heads);
    cache.scores = std::move(new_scores);
}

}  // namespace

void merge_buckets(LayerKvCache& cache, const BucketPartition& partition, MergeMode mode,
                   std::uint32_t cluster_k) {
    cache.check_consistent();
    EKV_REQUIRE(!partition.ranges.empty() &&
                    partition.ranges.back().second + 1 == cache.size(),
                "partition does not cover the cache");
    if (mode == MergeMode::cluster) {
        cluster_merge_layer(cache, partition, cluster_k);
        return;
    }
    std::vector<double> new_scores;
    for (auto& head : cache.heads) {
        new_scores = apply_partition_head(head, cache.scores, partition, mode);
    }
    cache.scores = std::move(new_scores);
}

// ---------------------------------------------------------------------------
// decode-phase updates

namespace {

std::optional<std::size_t> fixed_point_victim(const LayerKvCache& cache,
                                              const PolicyConfig& config) {
    const long len = static_cast<long>(cache.size());
    const long lo = config.protect_first ? 1 : 0;
    const long hi = len - 2;  // the most recent slot is never removed
    if (lo > hi) return std::nullopt;
    // truncation index sits W slots before the tail, shifted by P, so the
    // W most recently appended slots survive
    long idx = len - 1 - static_cast<long>(config.recent_window) + config.trunc_offset;
    idx = std::clamp(idx, lo, hi);
    return static_cast<std::size_t>(idx);
}

std::optional<std::size_t> frequency_victim(const LayerKvCache& cache,
                                            const PolicyConfig& config) {
    const long len = static_cast<long>(cache.size());
    const long lo = config.protect_first ? 1 : 0;
    const long hi = len - static_cast<long>(config.recent_window) - 1;  // recent W exempt
    if (lo > hi) return std::nullopt;
    std::size_t best = static_cast<std::size_t>(lo);
    for (long i = lo + 1; i <= hi; ++i) {
        if (cache.scores[static_cast<std::size_t>(i)] < cache.scores[best])
            best = static_cast<std::size_t>(i);
    }
    return best;
}

std::optional<std::size_t> oldest_victim(const LayerKvCache& cache, const PolicyConfig& config) {
    const long len = static_cast<long>(cache.size());
    const long lo = config.protect_first ? 1 : 0;
    if (lo > len - 2) return std::nullopt;  // nothing evictable besides the newest
    return static_cast<std::size_t>(lo);
}

}  // namespace

void elastic_decode_update(LayerKvCache& cache, std::size_t total_len,
                           const PolicyConfig& config) {
    if (over_budget_excess(cache.size(), total_len, config.budget) < 1) return;
    std::optional<std::size_t> victim;
    switch (config.discard) {
        case DiscardPosition::fixed_point: victim = fixed_point_victim(cache, config); break;
        case DiscardPosition::frequency: victim = frequency_victim(cache, config); break;
        case DiscardPosition::most_recent: victim = oldest_victim(cache, config); break;
    }
    if (victim) cache.remove_slot(*victim);
}

void h2o_decode_update(LayerKvCache& cache, std::size_t total_len, const PolicyConfig& config) {
    if (over_budget_excess(cache.size(), total_len, config.budget) < 1) return;
    if (auto victim = frequency_victim(cache, config)) cache.remove_slot(*victim);
}

void local_decode_update(LayerKvCache& cache, std::size_t total_len, const PolicyConfig& config) {
    if (over_budget_excess(cache.size(), total_len, config.budget) < 1) return;
    if (auto victim = oldest_victim(cache, config)) cache.remove_slot(*victim);
}

// ---------------------------------------------------------------------------
// KvCacheSet

KvCacheSet::KvCacheSet(std::size_t n_layers, std::size_t n_heads, std::size_t d_head,
                       PolicyConfig policy)
    : n_heads_(n_heads), d_head_(d_head), policy_(policy) {
    policy_.validate();
    layers_.resize(n_layers);
    for (auto& l : layers_) l.heads.resize(n_heads);
}

std::size_t KvCacheSet::allocate_positions(std::size_t count) {
    const std::size_t base = total_tokens_;
    total_tokens_ += count;
    return base;
}

void KvCacheSet::append_row(std::size_t layer, std::span<const double> key_row,
                            std::span<const double> value_row, std::uint32_t origin) {
    EKV_REQUIRE(key_row.size() == n_heads_ * d_head_ && value_row.size() == key_row.size(),
                "append_row dimension mismatch");
    LayerKvCache& lc = layers_[layer];
    for (std::size_t h = 0; h < n_heads_; ++h) {
        CacheSlot s;
        s.key.assign(key_row.begin() + static_cast<std::ptrdiff_t>(h * d_head_),
                     key_row.begin() + static_cast<std::ptrdiff_t>((h + 1) * d_head_));
        s.value.assign(value_row.begin() + static_cast<std::ptrdiff_t>(h * d_head_),
                       value_row.begin() + static_cast<std::ptrdiff_t>((h + 1) * d_head_));
        s.origin = SlotOrigin::single(origin);
        lc.heads[h].push_back(std::move(s));
    }
    lc.scores.push_back(0.0);
}

void KvCacheSet::compress_after_prefill(const PrefillAttention& attention) {
    const std::size_t t = layers_.front().size();
    EKV_REQUIRE(t >= 1, "compress_after_prefill on empty cache");
    for (auto& lc : layers_) {
        lc.check_consistent();
        lc.instruction_boundary = lc.size();
    }
    if (policy_.kind == PolicyKind::full) return;

    EKV_REQUIRE(attention.size() == layers_.size(), "attention/layer count mismatch");

    // Baselines always rank by the layer-wise head-averaged attention sum;
    // Elastic follows its configured statistic and scope.
    const bool elastic = policy_.kind == PolicyKind::elastic;
    const ImportanceScores scores =
        importance_scores(attention, elastic ? policy_.statistic : Statistic::sum,
                          elastic ? policy_.scope : Scope::layer_wise, policy_.ma_decay);

    const std::size_t n_keep = retained_count(t, policy_.budget);

    for (std::size_t l = 0; l < layers_.size(); ++l) {
        LayerKvCache& lc = layers_[l];
        switch (policy_.kind) {
            case PolicyKind::elastic: {
                if (scores.head_wise) {
                    // independent anchors per head; shared scores become the
                    // head average of the merged sums
                    std::vector<std::vector<double>> merged_scores(n_heads_);
                    for (std::size_t h = 0; h < n_heads_; ++h) {
                        const auto anchors =
                            select_anchors(scores.groups[l][h], policy_.budget,
                                           policy_.protect_first, policy_.protect_last);
                        const auto partition = partition_buckets(anchors, t);
                        if (policy_.merge_mode == MergeMode::cluster) {
                            LayerKvCache single;
                            single.heads = {std::move(lc.heads[h])};
                            single.scores = scores.groups[l][h];
                            cluster_merge_layer(single, partition, policy_.cluster_k);
                            lc.heads[h] = std::move(single.heads[0]);
                            merged_scores[h] = std::move(single.scores);
                        } else {
                            merged_scores[h] = apply_partition_head(
                                lc.heads[h], scores.groups[l][h], partition, policy_.merge_mode);
                        }
                    }
                    // head-wise cluster counts can differ; pad by truncating
                    // to the shortest head so lengths stay equal
                    std::size_t min_len = lc.heads[0].size();
                    for (const auto& head : lc.heads) min_len = std::min(min_len, head.size());
                    for (auto& head : lc.heads) head.resize(min_len);
                    lc.scores = head_average(merged_scores);
                    lc.scores.resize(min_len);
                } else {
                    lc.scores = scores.groups[l][0];
                    const auto anchors = select_anchors(lc.scores, policy_.budget,
                                                        policy_.protect_first, policy_.protect_last);
                    const auto partition = partition_buckets(anchors, t);
                    merge_buckets(lc, partition, policy_.merge_mode, policy_.cluster_k);
                }
                break;
            }
            case PolicyKind::h2o: {
                lc.scores = scores.groups[l][0];
                // evict lowest-scored slots outside the protected set until
                // the retained count is reached
                const long lo = policy_.protect_first ? 1 : 0;
                const long recent_lo =
                    static_cast<long>(t) - static_cast<long>(policy_.recent_window);
                std::vector<std::uint32_t> candidates;
                for (long i = lo; i < static_cast<long>(t); ++i) {
                    if (i >= recent_lo) continue;
                    if (policy_.protect_last && i == static_cast<long>(t) - 1) continue;
                    candidates.push_back(static_cast<std::uint32_t>(i));
                }
                std::sort(candidates.begin(), candidates.end(),
                          [&](std::uint32_t a, std::uint32_t b) {
                              if (lc.scores[a] != lc.scores[b]) return lc.scores[a] < lc.scores[b];
                              return a < b;
                          });
                const std::size_t excess = t > n_keep ? t - n_keep : 0;
                std::vector<std::uint32_t> victims(
                    candidates.begin(),
                    candidates.begin() +
                        static_cast<std::ptrdiff_t>(std::min(excess, candidates.size())));
                std::sort(victims.begin(), victims.end(), std::greater<>());
                for (std::uint32_t v : victims) lc.remove_slot(v);
                break;
            }
            case PolicyKind::local: {
                lc.scores = scores.groups[l][0];
                // sink + most recent slots
                std::vector<bool> keep(t, false);
                std::size_t kept = 0;
                if (policy_.protect_first) {
                    keep[0] = true;
                    ++kept;
                }
                for (std::size_t i = t; i-- > 0 && kept < n_keep;) {
                    if (!keep[i]) {
                        keep[i] = true;
                        ++kept;
                    }
                }
                for (std::size_t i = t; i-- > 0;) {
                    if (!keep[i]) lc.remove_slot(i);
                }
                break;
            }
            case PolicyKind::full: break;
        }
        lc.instruction_boundary = lc.size();
        lc.check_consistent();
    }
}

void KvCacheSet::update_layer_after_decode(std::size_t layer,
                                           const std::vector<std::vector<double>>& head_rows) {
    if (policy_.kind == PolicyKind::full) return;
    LayerKvCache& lc = layers_[layer];
    const std::size_t width = lc.size();
    EKV_REQUIRE(head_rows.size() == n_heads_, "attention head count mismatch");
    const double inv_heads = 1.0 / static_cast<double>(n_heads_);
    for (const auto& row : head_rows) {
        EKV_REQUIRE(row.size() == width, "attention row width mismatch");
        for (std::size_t i = 0; i < width; ++i) lc.scores[i] += row[i] * inv_heads;
    }
    switch (policy_.kind) {
        case PolicyKind::elastic: elastic_decode_update(lc, total_tokens_, policy_); break;
        case PolicyKind::h2o: h2o_decode_update(lc, total_tokens_, policy_); break;
        case PolicyKind::local: local_decode_update(lc, total_tokens_, policy_); break;
        case PolicyKind::full: break;
    }
}

void KvCacheSet::dump_snapshot(std::ostream& os) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const LayerKvCache& lc = layers_[l];
        nlohmann::json j;
        j["layer"] = l;
        auto origins = nlohmann::json::array();
        if (!lc.heads.empty()) {
            for (const CacheSlot& s : lc.heads[0]) {
                origins.push_back({s.origin.anchor, s.origin.first, s.origin.last});
            }
        }
        j["origins"] = std::move(origins);
        auto weights = nlohmann::json::array();
        if (!lc.heads.empty()) {
            for (const CacheSlot& s : lc.heads[0]) weights.push_back(s.weight);
        }
        j["weights"] = std::move(weights);
        j["scores"] = lc.scores;
        os << j.dump() << '\n';
    }
}

}  // namespace ekv
