// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "elastic_kv/cache.hpp"

using namespace ekv;

namespace {

Matrix causal_from_rows(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows.size(), 0.0);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
    return m;
}

Matrix uniform_causal(std::size_t t) {
    Matrix m(t, t, 0.0);
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c <= r; ++c) m(r, c) = 1.0 / static_cast<double>(r + 1);
    return m;
}

Matrix random_causal(std::size_t t, std::mt19937_64& rng) {
    Matrix m(t, t, 0.0);
    for (std::size_t r = 0; r < t; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c <= r; ++c) {
            m(r, c) = 0.05 + static_cast<double>(rng() >> 11) * 0x1.0p-53;
            sum += m(r, c);
        }
        for (std::size_t c = 0; c <= r; ++c) m(r, c) /= sum;
    }
    return m;
}

// layer cache with deterministic slot contents, origins 0..t-1
LayerKvCache make_layer(std::size_t n_heads, std::size_t d_head, std::size_t t,
                        std::uint64_t seed = 17) {
    std::mt19937_64 rng(seed);
    LayerKvCache lc;
    lc.heads.resize(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t i = 0; i < t; ++i) {
            CacheSlot s;
            s.key.resize(d_head);
            s.value.resize(d_head);
            for (std::size_t j = 0; j < d_head; ++j) {
                s.key[j] = static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
                s.value[j] = static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
            }
            s.origin = SlotOrigin::single(static_cast<std::uint32_t>(i));
            lc.heads[h].push_back(std::move(s));
        }
    }
    lc.scores.assign(t, 0.0);
    lc.instruction_boundary = t;
    return lc;
}

void append_slot(LayerKvCache& lc, std::uint32_t origin, double fill = 0.0) {
    for (auto& head : lc.heads) {
        CacheSlot s;
        s.key.assign(head[0].key.size(), fill);
        s.value.assign(head[0].value.size(), fill);
        s.origin = SlotOrigin::single(origin);
        head.push_back(std::move(s));
    }
    lc.scores.push_back(0.0);
}

std::vector<std::uint32_t> origins_of(const LayerKvCache& lc) {
    std::vector<std::uint32_t> out;
    for (const CacheSlot& s : lc.heads[0]) out.push_back(s.origin.anchor);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// importance scores

TEST_CASE("identity attention gives unit sums") {
    PrefillAttention attn{{Matrix::identity(3)}};
    const auto scores = importance_scores(attn, Statistic::sum, Scope::layer_wise);
    REQUIRE(scores.groups.size() == 1);
    for (double v : scores.groups[0][0]) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("column sums by hand") {
    PrefillAttention attn{
        {causal_from_rows({{1, 0, 0}, {0.6, 0.4, 0}, {0.2, 0.3, 0.5}})}};
    const auto scores = importance_scores(attn, Statistic::sum, Scope::layer_wise);
    const auto& s = scores.groups[0][0];
    CHECK(s[0] == doctest::Approx(1.8));
    CHECK(s[1] == doctest::Approx(0.7));
    CHECK(s[2] == doctest::Approx(0.5));
}

TEST_CASE("uniform causal attention sums") {
    PrefillAttention attn{{uniform_causal(3)}};
    const auto scores = importance_scores(attn, Statistic::sum, Scope::layer_wise);
    const auto& s = scores.groups[0][0];
    CHECK(s[0] == doctest::Approx(11.0 / 6.0));
    CHECK(s[1] == doctest::Approx(5.0 / 6.0));
    CHECK(s[2] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("mean statistic divides by causal column height") {
    PrefillAttention attn{
        {causal_from_rows({{1, 0, 0}, {0.6, 0.4, 0}, {0.2, 0.3, 0.5}})}};
    const auto scores = importance_scores(attn, Statistic::mean, Scope::layer_wise);
    const auto& s = scores.groups[0][0];
    CHECK(s[0] == doctest::Approx(1.8 / 3.0));
    CHECK(s[1] == doctest::Approx(0.7 / 2.0));
    CHECK(s[2] == doctest::Approx(0.5));
}

TEST_CASE("moving average decays over rows") {
    PrefillAttention attn{
        {causal_from_rows({{1, 0, 0}, {0.6, 0.4, 0}, {0.2, 0.3, 0.5}})}};
    const auto scores = importance_scores(attn, Statistic::moving_average, Scope::layer_wise, 0.9);
    const auto& s = scores.groups[0][0];
    // rows applied in order: s = 0.9*s + row
    CHECK(s[0] == doctest::Approx(0.9 * (0.9 * 1.0 + 0.6) + 0.2));
    CHECK(s[1] == doctest::Approx(0.9 * 0.4 + 0.3));
    CHECK(s[2] == doctest::Approx(0.5));
}

TEST_CASE("scopes aggregate heads and layers") {
    const Matrix a = causal_from_rows({{1, 0}, {0.25, 0.75}});
    const Matrix b = causal_from_rows({{1, 0}, {0.75, 0.25}});
    PrefillAttention attn{{a, b}, {a, a}};

    const auto layer = importance_scores(attn, Statistic::sum, Scope::layer_wise);
    CHECK(layer.groups[0][0][0] == doctest::Approx(1.5));  // head mean of 1.25 and 1.75
    CHECK(layer.groups[1][0][0] == doctest::Approx(1.25));

    const auto shared = importance_scores(attn, Statistic::sum, Scope::shared);
    CHECK(shared.groups[0][0][0] == doctest::Approx((1.5 + 1.25) / 2.0));
    CHECK(shared.groups[0][0][0] == shared.groups[1][0][0]);

    const auto head = importance_scores(attn, Statistic::sum, Scope::head_wise);
    CHECK(head.head_wise);
    CHECK(head.groups[0].size() == 2);
    CHECK(head.groups[0][0][0] == doctest::Approx(1.25));
    CHECK(head.groups[0][1][0] == doctest::Approx(1.75));
}

TEST_CASE("empty attention set is rejected") {
    PrefillAttention attn;
    CHECK_THROWS(importance_scores(attn, Statistic::sum, Scope::layer_wise));
}

// ---------------------------------------------------------------------------
// anchor selection

TEST_CASE("budget 1 selects every index") {
    const std::vector<double> scores{0.3, 0.1, 0.9, 0.2};
    const auto anchors = select_anchors(scores, 1.0, true, true);
    CHECK(anchors == std::vector<std::uint32_t>{0, 1, 2, 3});
}

TEST_CASE("top anchors by score without protection") {
    const std::vector<double> scores{1.8, 0.7, 0.5};
    const auto anchors = select_anchors(scores, 2.0 / 3.0, false, false);
    CHECK(anchors == std::vector<std::uint32_t>{0, 1});
}

TEST_CASE("protected last index is forced in") {
    const std::vector<double> scores{1.8, 0.7, 0.5};
    const auto anchors = select_anchors(scores, 2.0 / 3.0, false, true);
    CHECK(anchors == std::vector<std::uint32_t>{0, 2});
}

TEST_CASE("score ties prefer the smaller index") {
    const std::vector<double> scores{1.0, 1.0, 1.0, 1.0};
    const auto anchors = select_anchors(scores, 0.5, false, false);
    CHECK(anchors == std::vector<std::uint32_t>{0, 1});
}

TEST_CASE("protection outranks scores when the budget is one slot") {
    const std::vector<double> scores{0.0, 5.0};
    const auto anchors = select_anchors(scores, 0.4, true, true);
    CHECK(anchors == std::vector<std::uint32_t>{0});
}

// ---------------------------------------------------------------------------
// bucket partition

TEST_CASE("midpoint partition by hand") {
    const auto p = partition_buckets({2, 5, 9}, 11);
    REQUIRE(p.ranges.size() == 3);
    CHECK(p.ranges[0] == std::pair<std::uint32_t, std::uint32_t>{0, 3});
    CHECK(p.ranges[1] == std::pair<std::uint32_t, std::uint32_t>{4, 7});
    CHECK(p.ranges[2] == std::pair<std::uint32_t, std::uint32_t>{8, 10});
}

TEST_CASE("single anchor owns the whole range") {
    const auto p = partition_buckets({2}, 5);
    REQUIRE(p.ranges.size() == 1);
    CHECK(p.ranges[0] == std::pair<std::uint32_t, std::uint32_t>{0, 4});
}

TEST_CASE("all-anchor partition is singletons") {
    const auto p = partition_buckets({0, 1, 2, 3}, 4);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(p.ranges[k].first == k);
        CHECK(p.ranges[k].second == k);
    }
}

TEST_CASE("invalid anchors are rejected") {
    CHECK_THROWS(partition_buckets({}, 5));
    CHECK_THROWS(partition_buckets({3, 1}, 5));
    CHECK_THROWS(partition_buckets({1, 7}, 5));
}

TEST_CASE("random anchor sets always partition") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t t = 2 + rng() % 510;
        std::set<std::uint32_t> set;
        const std::size_t n = 1 + rng() % std::min<std::size_t>(t, 24);
        while (set.size() < n) set.insert(static_cast<std::uint32_t>(rng() % t));
        const std::vector<std::uint32_t> anchors(set.begin(), set.end());
        const auto p = partition_buckets(anchors, t);
        std::size_t covered = 0;
        for (std::size_t k = 0; k < p.ranges.size(); ++k) {
            const auto [lo, hi] = p.ranges[k];
            REQUIRE(lo <= hi);
            covered += hi - lo + 1;
            CHECK(lo <= anchors[k]);
            CHECK(anchors[k] <= hi);
        }
        CHECK(covered == t);
    }
}

// ---------------------------------------------------------------------------
// merging

TEST_CASE("singleton buckets leave the cache unchanged") {
    LayerKvCache lc = make_layer(2, 4, 5);
    const LayerKvCache before = lc;
    merge_buckets(lc, partition_buckets({0, 1, 2, 3, 4}, 5), MergeMode::merge);
    REQUIRE(lc.size() == 5);
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(lc.heads[h][i].key == before.heads[h][i].key);
            CHECK(lc.heads[h][i].weight == 1);
        }
    }
}

TEST_CASE("bucket mean by hand") {
    LayerKvCache lc;
    lc.heads.resize(1);
    for (int i = 0; i < 2; ++i) {
        CacheSlot s;
        s.key = (i == 0) ? std::vector<double>{1, 0} : std::vector<double>{3, 2};
        s.value = (i == 0) ? std::vector<double>{2, 2} : std::vector<double>{4, 0};
        s.origin = SlotOrigin::single(static_cast<std::uint32_t>(i));
        lc.heads[0].push_back(std::move(s));
    }
    lc.scores = {0.6, 0.4};
    merge_buckets(lc, partition_buckets({0}, 2), MergeMode::merge);
    REQUIRE(lc.size() == 1);
    CHECK(lc.heads[0][0].key == std::vector<double>{2, 1});
    CHECK(lc.heads[0][0].value == std::vector<double>{3, 1});
    CHECK(lc.heads[0][0].weight == 2);
    CHECK(lc.heads[0][0].origin.first == 0);
    CHECK(lc.heads[0][0].origin.last == 1);
    CHECK(lc.scores[0] == doctest::Approx(1.0));  // merged score = member sum
}

TEST_CASE("evict keeps anchors in order") {
    LayerKvCache lc = make_layer(2, 4, 3);
    merge_buckets(lc, partition_buckets({0, 2}, 3), MergeMode::evict);
    CHECK(origins_of(lc) == std::vector<std::uint32_t>{0, 2});
    for (const auto& head : lc.heads)
        for (const auto& s : head) CHECK(s.weight == 1);
}

TEST_CASE("merge conserves weights and weighted key sums") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t t = 2 + rng() % 40;
        LayerKvCache lc = make_layer(2, 4, t, rng());
        std::vector<double> key_sum(4 * 2, 0.0);
        for (std::size_t h = 0; h < 2; ++h)
            for (const auto& s : lc.heads[h])
                for (std::size_t j = 0; j < 4; ++j) key_sum[h * 4 + j] += s.key[j];

        std::set<std::uint32_t> set{0, static_cast<std::uint32_t>(t - 1)};
        while (set.size() < std::min<std::size_t>(t, 2 + rng() % 6))
            set.insert(static_cast<std::uint32_t>(rng() % t));
        merge_buckets(lc, partition_buckets({set.begin(), set.end()}, t),
                      (trial % 2 == 0) ? MergeMode::merge : MergeMode::cluster);

        std::uint64_t total_weight = 0;
        std::vector<double> merged_sum(4 * 2, 0.0);
        for (std::size_t h = 0; h < 2; ++h) {
            for (const auto& s : lc.heads[h]) {
                if (h == 0) total_weight += s.weight;
                for (std::size_t j = 0; j < 4; ++j)
                    merged_sum[h * 4 + j] += s.weight * s.key[j];
            }
        }
        CHECK(total_weight == t);
        for (std::size_t i = 0; i < merged_sum.size(); ++i) {
            CHECK(std::abs(merged_sum[i] - key_sum[i]) < 1e-9);
        }
    }
}

TEST_CASE("cluster mode appends at most k centroids after the anchors") {
    LayerKvCache lc = make_layer(2, 4, 30);
    merge_buckets(lc, partition_buckets({0, 7, 15, 22, 29}, 30), MergeMode::cluster, 10);
    REQUIRE(lc.size() == 5 + 10);
    // anchors first, unweighted
    for (std::size_t i = 0; i < 5; ++i) CHECK(lc.heads[0][i].weight == 1);
    CHECK(origins_of(lc)[0] == 0);
    CHECK(origins_of(lc)[4] == 29);
    // centroids in ascending first-member order
    for (std::size_t i = 6; i < lc.size(); ++i) {
        CHECK(lc.heads[0][i - 1].origin.first < lc.heads[0][i].origin.first);
    }
}

// ---------------------------------------------------------------------------
// decode updates

TEST_CASE("fixed-point removal drops the slot at distance W from the tail") {
    LayerKvCache lc = make_layer(2, 4, 6);
    PolicyConfig cfg = PolicyConfig::elastic(0.5);
    cfg.recent_window = 3;  // removal index = 6-1-3 = 2
    elastic_decode_update(lc, 10, cfg);  // excess = trunc(6-5) = 1
    CHECK(origins_of(lc) == std::vector<std::uint32_t>{0, 1, 3, 4, 5});
}

TEST_CASE("budget 1 never removes") {
    LayerKvCache lc = make_layer(1, 4, 8);
    PolicyConfig cfg = PolicyConfig::elastic(1.0);
    elastic_decode_update(lc, 8, cfg);
    CHECK(lc.size() == 8);
}

TEST_CASE("fixed-point removal respects the protected endpoints") {
    PolicyConfig cfg = PolicyConfig::elastic(0.1);
    cfg.recent_window = 25;
    // clamp low: removal index would be negative, protect_first pins it at 1
    LayerKvCache lc = make_layer(1, 4, 6);
    elastic_decode_update(lc, 50, cfg);  // excess = trunc(6 - 5) = 1
    CHECK(origins_of(lc) == std::vector<std::uint32_t>{0, 2, 3, 4, 5});
    // two-slot cache has no legal victim
    LayerKvCache tiny = make_layer(1, 4, 2);
    elastic_decode_update(tiny, 10, cfg);  // excess = 1 but slots are protected
    CHECK(tiny.size() == 2);
}

TEST_CASE("200-step elastic counter simulation") {
    // prefill keeps 50 of 100, then 100 decode appends at budget 0.5
    LayerKvCache lc = make_layer(1, 4, 100);
    std::vector<double> scores(100, 0.0);
    for (std::size_t i = 0; i < 100; ++i) scores[i] = 1.0 / (1.0 + i);
    lc.scores = scores;
    PolicyConfig cfg = PolicyConfig::elastic(0.5);
    const auto anchors = select_anchors(lc.scores, 0.5, true, true);
    merge_buckets(lc, partition_buckets(anchors, 100), MergeMode::merge);
    REQUIRE(lc.size() == 50);

    for (std::size_t s = 1; s <= 100; ++s) {
        append_slot(lc, static_cast<std::uint32_t>(99 + s));
        elastic_decode_update(lc, 100 + s, cfg);
        // the W most recently appended slots are always present
        const auto orig = origins_of(lc);
        const std::size_t recent = std::min<std::size_t>(cfg.recent_window, s);
        for (std::size_t r = 0; r < recent; ++r) {
            const std::uint32_t want = static_cast<std::uint32_t>(99 + s - r);
            CHECK(std::find(orig.begin(), orig.end(), want) != orig.end());
        }
        CHECK(lc.size() <=
              static_cast<std::size_t>(std::ceil(0.5 * (100.0 + s))) + 1);
    }
    CHECK(lc.size() == 100);  // ceil(0.5 * 200)
}

TEST_CASE("h2o evicts the lowest accumulated score with ties to the left") {
    PolicyConfig cfg = PolicyConfig::h2o(0.5);
    cfg.recent_window = 2;

    LayerKvCache equal = make_layer(1, 4, 6);
    equal.scores.assign(6, 1.0);
    h2o_decode_update(equal, 10, cfg);
    CHECK(origins_of(equal) == std::vector<std::uint32_t>{0, 2, 3, 4, 5});

    LayerKvCache zero = make_layer(1, 4, 6);
    zero.scores = {5.0, 3.0, 0.0, 2.0, 9.0, 1.0};
    h2o_decode_update(zero, 10, cfg);
    CHECK(origins_of(zero) == std::vector<std::uint32_t>{0, 1, 3, 4, 5});
}

TEST_CASE("h2o three-step hand trace") {
    PolicyConfig cfg = PolicyConfig::h2o(0.5);
    cfg.recent_window = 2;
    LayerKvCache lc = make_layer(1, 4, 4);
    lc.scores = {0.9, 0.1, 0.5, 0.8};

    // step 1: append origin 4, row adds [.05,.05,.1,.3,.5]
    append_slot(lc, 4);
    const std::vector<double> row1{0.05, 0.05, 0.1, 0.3, 0.5};
    for (std::size_t i = 0; i < 5; ++i) lc.scores[i] += row1[i];
    h2o_decode_update(lc, 8, cfg);  // excess = trunc(5-4) = 1
    // scores were [.95,.15,.6,1.1,.5]; candidates {1,2}; evict 1
    CHECK(origins_of(lc) == std::vector<std::uint32_t>{0, 2, 3, 4});

    // step 2: append origin 5, row adds [.1,.2,.3,.2,.2]
    append_slot(lc, 5);
    const std::vector<double> row2{0.1, 0.2, 0.3, 0.2, 0.2};
    for (std::size_t i = 0; i < 5; ++i) lc.scores[i] += row2[i];
    h2o_decode_update(lc, 10, cfg);  // excess = trunc(5-5) = 0: retained
    CHECK(origins_of(lc) == std::vector<std::uint32_t>{0, 2, 3, 4, 5});

    // step 3: append origin 6, row adds [.1,.1,.2,.2,.2,.2]
    append_slot(lc, 6);
    const std::vector<double> row3{0.1, 0.1, 0.2, 0.2, 0.2, 0.2};
    for (std::size_t i = 0; i < 6; ++i) lc.scores[i] += row3[i];
    h2o_decode_update(lc, 12, cfg);  // excess = trunc(6-6)=0? appended twice now
    // scores [1.15,0.9,1.5,0.9,0.4,0.2]; candidates {1,2,3}; but no eviction at 0 excess
    CHECK(origins_of(lc) == std::vector<std::uint32_t>{0, 2, 3, 4, 5, 6});
}

TEST_CASE("local keeps the sink plus a contiguous recent suffix") {
    PolicyConfig cfg = PolicyConfig::local(0.5);
    LayerKvCache lc = make_layer(1, 4, 6);
    CHECK(retained_count(6, 0.5) == 3);  // prefill would keep {0, 4, 5}

    for (std::size_t step = 1; step <= 10; ++step) {
        append_slot(lc, static_cast<std::uint32_t>(5 + step));
        local_decode_update(lc, 6 + step, cfg);
        const auto orig = origins_of(lc);
        CHECK(orig.front() == 0);
        for (std::size_t i = 2; i < orig.size(); ++i) CHECK(orig[i] == orig[i - 1] + 1);
        CHECK(orig.back() == 5 + step);
    }
}

TEST_CASE("budget excess arithmetic") {
    CHECK(over_budget_excess(5, 10, 0.5) == 0);
    CHECK(over_budget_excess(6, 10, 0.5) == 1);
    CHECK(over_budget_excess(3, 10, 1.0) == 0);
    CHECK(retained_count(8, 0.5) == 4);
    CHECK(retained_count(3, 2.0 / 3.0) == 2);
    CHECK(retained_count(7, 0.2) == 2);   // 7 - trunc(5.6)
    CHECK(retained_count(1, 0.01) == 1);  // floor of one slot
}

// ---------------------------------------------------------------------------
// KvCacheSet composition

namespace {

KvCacheSet filled_set(std::size_t layers, std::size_t heads, std::size_t dh, std::size_t t,
                      const PolicyConfig& cfg, std::uint64_t seed = 3) {
    KvCacheSet set(layers, heads, dh, cfg);
    std::mt19937_64 rng(seed);
    set.allocate_positions(t);
    std::vector<double> key(heads * dh), value(heads * dh);
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t i = 0; i < t; ++i) {
            for (double& v : key) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            for (double& v : value) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            set.append_row(l, key, value, static_cast<std::uint32_t>(i));
        }
    }
    return set;
}

PrefillAttention random_attention(std::size_t layers, std::size_t heads, std::size_t t,
                                  std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    PrefillAttention attn(layers);
    for (auto& layer : attn)
        for (std::size_t h = 0; h < heads; ++h) layer.push_back(random_causal(t, rng));
    return attn;
}

}  // namespace

TEST_CASE("budget 1.0 prefill compression is a no-op") {
    KvCacheSet set = filled_set(2, 2, 4, 8, PolicyConfig::elastic(1.0));
    set.compress_after_prefill(random_attention(2, 2, 8, 5));
    for (std::size_t l = 0; l < 2; ++l) {
        CHECK(set.layer(l).size() == 8);
        CHECK(set.layer(l).instruction_boundary == 8);
        for (const auto& s : set.layer(l).heads[0]) CHECK(s.weight == 1);
    }
}

TEST_CASE("elastic prefill halves an 8-token cache at budget 0.5") {
    KvCacheSet set = filled_set(2, 2, 4, 8, PolicyConfig::elastic(0.5));
    set.compress_after_prefill(random_attention(2, 2, 8, 6));
    for (std::size_t l = 0; l < 2; ++l) CHECK(set.layer(l).size() == 4);
}

TEST_CASE("per-layer anchors differ when layer attentions differ") {
    PolicyConfig cfg = PolicyConfig::elastic(0.5);
    cfg.protect_first = false;
    cfg.protect_last = false;
    KvCacheSet set = filled_set(2, 1, 4, 4, cfg);
    // layer 0 favours index 1, layer 1 favours index 2
    PrefillAttention attn(2);
    attn[0] = {causal_from_rows(
        {{1, 0, 0, 0}, {0.9, 0.1, 0, 0}, {0.8, 0.1, 0.1, 0}, {0.7, 0.1, 0.1, 0.1}})};
    attn[1] = {causal_from_rows(
        {{1, 0, 0, 0}, {0.1, 0.9, 0, 0}, {0.1, 0.1, 0.8, 0}, {0.1, 0.1, 0.7, 0.1}})};
    set.compress_after_prefill(attn);
    // layer 0 column sums: [3.4, 0.3, 0.2, 0.1] -> anchors {0,1}
    CHECK(origins_of(set.layer(0)) == std::vector<std::uint32_t>{0, 1});
    // layer 1 column sums: [1.3, 1.1, 1.5, 0.1] -> anchors {0,2}
    CHECK(origins_of(set.layer(1)) == std::vector<std::uint32_t>{0, 2});
}

TEST_CASE("h2o prefill keeps the top-scored slots") {
    PolicyConfig cfg = PolicyConfig::h2o(0.5);
    cfg.recent_window = 1;
    KvCacheSet set = filled_set(1, 1, 4, 6, cfg);
    PrefillAttention attn(1);
    attn[0] = {causal_from_rows({{1, 0, 0, 0, 0, 0},
                                 {0.5, 0.5, 0, 0, 0, 0},
                                 {0.1, 0.8, 0.1, 0, 0, 0},
                                 {0.1, 0.7, 0.1, 0.1, 0, 0},
                                 {0.1, 0.6, 0.1, 0.1, 0.1, 0},
                                 {0.1, 0.5, 0.1, 0.1, 0.1, 0.1}})};
    set.compress_after_prefill(attn);
    // column sums: [1.9, 3.1, 0.4, 0.3, 0.2, 0.1]; keep 3 = sink 0, top 1, recent 5
    CHECK(origins_of(set.layer(0)) == std::vector<std::uint32_t>{0, 1, 5});
    CHECK(set.layer(0).scores[0] == doctest::Approx(1.9));
    CHECK(set.layer(0).scores[1] == doctest::Approx(3.1));
}

TEST_CASE("local prefill keeps the sink plus the most recent slots") {
    KvCacheSet set = filled_set(1, 1, 4, 6, PolicyConfig::local(0.5));
    set.compress_after_prefill(random_attention(1, 1, 6, 9));
    CHECK(origins_of(set.layer(0)) == std::vector<std::uint32_t>{0, 4, 5});
}

TEST_CASE("head consistency under layer-shared scopes") {
    for (Scope scope : {Scope::layer_wise, Scope::shared}) {
        for (MergeMode mode : {MergeMode::merge, MergeMode::evict, MergeMode::cluster}) {
            PolicyConfig cfg = PolicyConfig::elastic(0.4);
            cfg.scope = scope;
            cfg.merge_mode = mode;
            KvCacheSet set = filled_set(2, 3, 4, 20, cfg, 11 + static_cast<int>(mode));
            set.compress_after_prefill(random_attention(2, 3, 20, 13));
            for (std::size_t l = 0; l < 2; ++l) {
                const LayerKvCache& lc = set.layer(l);
                lc.check_consistent();
                for (const auto& head : lc.heads) {
                    REQUIRE(head.size() == lc.size());
                    for (std::size_t i = 0; i < head.size(); ++i) {
                        CHECK(head[i].origin == lc.heads[0][i].origin);
                    }
                }
            }
        }
    }
}

TEST_CASE("head-wise scope keeps equal lengths across heads") {
    PolicyConfig cfg = PolicyConfig::elastic(0.4);
    cfg.scope = Scope::head_wise;
    KvCacheSet set = filled_set(2, 3, 4, 20, cfg);
    set.compress_after_prefill(random_attention(2, 3, 20, 29));
    for (std::size_t l = 0; l < 2; ++l) {
        const LayerKvCache& lc = set.layer(l);
        for (const auto& head : lc.heads) CHECK(head.size() == lc.size());
        CHECK(lc.scores.size() == lc.size());
    }
}

TEST_CASE("budget ceiling holds for every compressing policy") {
    for (PolicyKind kind : {PolicyKind::elastic, PolicyKind::h2o, PolicyKind::local}) {
        for (double budget : {0.3, 0.6}) {
            PolicyConfig cfg;
            cfg.kind = kind;
            cfg.budget = budget;
            cfg.recent_window = 5;
            KvCacheSet set = filled_set(2, 2, 4, 20, cfg, 7);
            set.compress_after_prefill(random_attention(2, 2, 20, 15));
            std::mt19937_64 rng(4);
            for (std::size_t step = 1; step <= 60; ++step) {
                const std::size_t pos = set.allocate_positions(1);
                std::vector<double> key(8), value(8);
                for (double& v : key) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
                for (double& v : value) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
                for (std::size_t l = 0; l < 2; ++l) {
                    set.append_row(l, key, value, static_cast<std::uint32_t>(pos));
                    const std::size_t width = set.layer(l).size();
                    std::vector<std::vector<double>> rows(
                        2, std::vector<double>(width, 1.0 / static_cast<double>(width)));
                    set.update_layer_after_decode(l, rows);
                    const double ceiling =
                        std::ceil(budget * static_cast<double>(set.total_tokens())) + 2.0;
                    CHECK(static_cast<double>(set.layer(l).size()) <= ceiling);
                }
            }
        }
    }
}

TEST_CASE("snapshot dump is one JSON object per layer") {
    KvCacheSet set = filled_set(2, 2, 4, 6, PolicyConfig::elastic(0.5));
    set.compress_after_prefill(random_attention(2, 2, 6, 33));
    std::ostringstream os;
    set.dump_snapshot(os);
    std::istringstream is(os.str());
    std::string line;
    std::size_t layers = 0;
    while (std::getline(is, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j["layer"] == layers);
        CHECK(j["origins"].is_array());
        CHECK(j["weights"].size() == j["origins"].size());
        CHECK(j["scores"].size() == j["origins"].size());
        std::uint64_t weight_sum = 0;
        for (const auto& w : j["weights"]) weight_sum += w.get<std::uint64_t>();
        CHECK(weight_sum == 6);  // merge conserves membership
        ++layers;
    }
    CHECK(layers == 2);
}

TEST_CASE("policy config validation") {
    PolicyConfig bad = PolicyConfig::elastic(0.0);
    CHECK_THROWS(bad.validate());
    bad = PolicyConfig::elastic(0.5);
    bad.recent_window = 0;
    CHECK_THROWS(bad.validate());
    bad = PolicyConfig::elastic(0.5);
    bad.cluster_k = 0;
    CHECK_THROWS(bad.validate());
    CHECK(PolicyConfig::elastic(0.5).name() == "elastic");
    PolicyConfig ablated = PolicyConfig::elastic(0.5);
    ablated.scope = Scope::shared;
    CHECK(ablated.name() == "elastic/discard=fixed_point|merge=merge|scope=shared|stat=sum");
}
