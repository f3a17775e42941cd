// SPDX-License-Identifier: Apache-2.0

#include "elastic_kv/model.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace ekv {

namespace {

constexpr char kMagic[4] = {'E', 'K', 'V', '1'};

// Documented weight PRNG: mt19937_64 raw draws mapped to [0,1) via the top
// 53 bits, one Box-Muller cosine sample per weight (two draws each), then
// quantized to float32 so the on-disk format round-trips exactly.
class NormalSampler {
public:
    explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

    double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

    double gaussian(double stddev) {
        const double u1 = 1.0 - unit();  // (0, 1], keeps log finite
        const double u2 = unit();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        return static_cast<double>(static_cast<float>(z * stddev));
    }

    void fill(Matrix& m, double stddev) {
        for (double& v : m.data) v = gaussian(stddev);
    }

private:
    std::mt19937_64 rng_;
};

void write_f32(std::ofstream& out, const std::vector<double>& v) {
    for (double x : v) {
        const float f = static_cast<float>(x);
        out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
}

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in, const char* what) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    EKV_REQUIRE(in.good(), std::string("weight file truncated reading ") + what);
    return v;
}

void read_f32(std::ifstream& in, std::vector<double>& v, std::size_t count, const char* what) {
    v.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        float f = 0.f;
        in.read(reinterpret_cast<char*>(&f), sizeof(f));
        EKV_REQUIRE(in.good(), std::string("weight file truncated reading ") + what);
        EKV_REQUIRE(std::isfinite(f), std::string("non-finite weight in ") + what);
        v[i] = static_cast<double>(f);
    }
}

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

void ModelConfig::validate() const {
    EKV_REQUIRE(n_layers >= 1 && n_heads >= 1 && d_head >= 1, "empty model dimensions");
    EKV_REQUIRE(d_model == n_heads * d_head, "d_model must equal n_heads * d_head");
    EKV_REQUIRE(vocab_size >= tok::kMinVocab, "vocab_size must cover bytes + BOS/EOS/PAD");
    EKV_REQUIRE(max_seq >= 1, "max_seq must be >= 1");
}

TinyTransformer TinyTransformer::from_seed(const ModelConfig& config) {
    config.validate();
    TinyTransformer m;
    m.config_ = config;

    NormalSampler rng(config.seed);
    const std::size_t d = config.d_model;
    const double emb_std = 0.1;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double up_std = 1.0 / std::sqrt(static_cast<double>(4 * d));

    m.tok_emb_ = Matrix(config.vocab_size, d);
    rng.fill(m.tok_emb_, emb_std);
    m.pos_emb_ = Matrix(config.max_seq, d);
    rng.fill(m.pos_emb_, emb_std);

    m.layers_.resize(config.n_layers);
    for (LayerWeights& lw : m.layers_) {
        lw.ln1_gain.assign(d, 1.0);
        lw.ln1_bias.assign(d, 0.0);
        lw.wq = Matrix(d, d);
        lw.wk = Matrix(d, d);
        lw.wv = Matrix(d, d);
        lw.wo = Matrix(d, d);
        rng.fill(lw.wq, w_std);
        rng.fill(lw.wk, w_std);
        rng.fill(lw.wv, w_std);
        rng.fill(lw.wo, w_std);
        lw.ln2_gain.assign(d, 1.0);
        lw.ln2_bias.assign(d, 0.0);
        lw.w_up = Matrix(d, 4 * d);
        lw.w_down = Matrix(4 * d, d);
        rng.fill(lw.w_up, w_std);
        rng.fill(lw.w_down, up_std);
    }
    m.lnf_gain_.assign(d, 1.0);
    m.lnf_bias_.assign(d, 0.0);
    m.lm_head_ = Matrix(d, config.vocab_size);
    rng.fill(m.lm_head_, w_std);
    return m;
}

void TinyTransformer::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    EKV_REQUIRE(out.is_open(), "cannot open weight file for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, config_.n_layers);
    write_u32(out, config_.n_heads);
    write_u32(out, config_.d_model);
    write_u32(out, config_.d_head);
    write_u32(out, config_.vocab_size);
    write_f32(out, tok_emb_.data);
    write_f32(out, pos_emb_.data);
    for (const LayerWeights& lw : layers_) {
        write_f32(out, lw.ln1_gain);
        write_f32(out, lw.ln1_bias);
        write_f32(out, lw.wq.data);
        write_f32(out, lw.wk.data);
        write_f32(out, lw.wv.data);
        write_f32(out, lw.wo.data);
        write_f32(out, lw.ln2_gain);
        write_f32(out, lw.ln2_bias);
        write_f32(out, lw.w_up.data);
        write_f32(out, lw.w_down.data);
    }
    write_f32(out, lnf_gain_);
    write_f32(out, lnf_bias_);
    write_f32(out, lm_head_.data);
    EKV_REQUIRE(out.good(), "failed writing weight file: " + path);
}

TinyTransformer TinyTransformer::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    EKV_REQUIRE(in.is_open(), "cannot open weight file: " + path);
    const std::streamoff file_size = in.tellg();
    in.seekg(0);

    char magic[4] = {};
    in.read(magic, sizeof(magic));
    EKV_REQUIRE(in.good() && std::memcmp(magic, kMagic, 4) == 0,
                "not an EKV1 weight file: " + path);

    ModelConfig cfg;
    cfg.n_layers = read_u32(in, "n_layers");
    cfg.n_heads = read_u32(in, "n_heads");
    cfg.d_model = read_u32(in, "d_model");
    cfg.d_head = read_u32(in, "d_head");
    cfg.vocab_size = read_u32(in, "vocab_size");
    cfg.seed = 0;

    const std::size_t d = cfg.d_model;
    EKV_REQUIRE(d > 0 && cfg.n_heads > 0 && d == cfg.n_heads * cfg.d_head,
                "weight file header has inconsistent dimensions");

    // max_seq is not in the header; the position table's row count is
    // recovered from the file size.
    const std::size_t per_layer = 2 * d + 4 * d * d + 2 * d + 2 * (d * 4 * d);
    const std::size_t fixed = static_cast<std::size_t>(cfg.vocab_size) * d +
                              cfg.n_layers * per_layer + 2 * d +
                              d * static_cast<std::size_t>(cfg.vocab_size);
    const std::size_t header_bytes = 4 + 5 * sizeof(std::uint32_t);
    EKV_REQUIRE(file_size > 0 && static_cast<std::size_t>(file_size) >= header_bytes,
                "weight file too small");
    const std::size_t payload = static_cast<std::size_t>(file_size) - header_bytes;
    EKV_REQUIRE(payload % sizeof(float) == 0, "weight file payload not float32-aligned");
    const std::size_t total_floats = payload / sizeof(float);
    EKV_REQUIRE(total_floats > fixed && (total_floats - fixed) % d == 0,
                "weight file size does not match header dimensions");
    cfg.max_seq = static_cast<std::uint32_t>((total_floats - fixed) / d);
    cfg.validate();

    TinyTransformer m;
    m.config_ = cfg;
    m.tok_emb_ = Matrix(cfg.vocab_size, d);
    read_f32(in, m.tok_emb_.data, m.tok_emb_.data.size(), "token embedding");
    m.pos_emb_ = Matrix(cfg.max_seq, d);
    read_f32(in, m.pos_emb_.data, m.pos_emb_.data.size(), "position embedding");
    m.layers_.resize(cfg.n_layers);
    for (LayerWeights& lw : m.layers_) {
        read_f32(in, lw.ln1_gain, d, "ln1 gain");
        read_f32(in, lw.ln1_bias, d, "ln1 bias");
        lw.wq = Matrix(d, d);
        read_f32(in, lw.wq.data, d * d, "wq");
        lw.wk = Matrix(d, d);
        read_f32(in, lw.wk.data, d * d, "wk");
        lw.wv = Matrix(d, d);
        read_f32(in, lw.wv.data, d * d, "wv");
        lw.wo = Matrix(d, d);
        read_f32(in, lw.wo.data, d * d, "wo");
        read_f32(in, lw.ln2_gain, d, "ln2 gain");
        read_f32(in, lw.ln2_bias, d, "ln2 bias");
        lw.w_up = Matrix(d, 4 * d);
        read_f32(in, lw.w_up.data, d * 4 * d, "w_up");
        lw.w_down = Matrix(4 * d, d);
        read_f32(in, lw.w_down.data, 4 * d * d, "w_down");
    }
    read_f32(in, m.lnf_gain_, d, "final gain");
    read_f32(in, m.lnf_bias_, d, "final bias");
    m.lm_head_ = Matrix(d, cfg.vocab_size);
    read_f32(in, m.lm_head_.data, d * cfg.vocab_size, "lm head");
    return m;
}

KvCacheSet TinyTransformer::make_cache(const PolicyConfig& policy) const {
    return KvCacheSet(config_.n_layers, config_.n_heads, config_.d_head, policy);
}

PrefillOutput TinyTransformer::prefill(const TokenSequence& instruction, KvCacheSet& cache,
                                       const Matrix* prefix_embeddings) const {
    const std::size_t d = config_.d_model;
    const std::size_t prefix_rows = prefix_embeddings ? prefix_embeddings->rows : 0;
    if (prefix_embeddings) {
        EKV_REQUIRE(prefix_embeddings->cols == d, "prefix embedding width must equal d_model");
    }
    const std::size_t t = prefix_rows + instruction.tokens.size();
    EKV_REQUIRE(t >= 1, "prefill requires a nonempty instruction");
    EKV_REQUIRE(t <= config_.max_seq, "sequence exceeds max_seq");
    EKV_REQUIRE(cache.total_tokens() == 0, "prefill requires an empty cache");

    const std::size_t base = cache.allocate_positions(t);

    Matrix x(t, d);
    for (std::size_t p = 0; p < t; ++p) {
        if (p < prefix_rows) {
            for (std::size_t i = 0; i < d; ++i) x(p, i) = (*prefix_embeddings)(p, i);
        } else {
            const TokenId tokid = instruction.tokens[p - prefix_rows];
            EKV_REQUIRE(tokid < config_.vocab_size, "token id out of vocabulary");
            for (std::size_t i = 0; i < d; ++i) x(p, i) = tok_emb_(tokid, i);
        }
        for (std::size_t i = 0; i < d; ++i) x(p, i) += pos_emb_(p, i);
    }

    PrefillOutput out;
    out.attention.resize(config_.n_layers);

    const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d_head));
    const std::size_t dh = config_.d_head;

    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const LayerWeights& lw = layers_[l];

        Matrix normed = x;
        for (std::size_t p = 0; p < t; ++p) layernorm_row(normed.row(p), lw.ln1_gain, lw.ln1_bias);

        const Matrix q = matmul(normed, lw.wq);
        const Matrix k = matmul(normed, lw.wk);
        const Matrix v = matmul(normed, lw.wv);

        for (std::size_t p = 0; p < t; ++p) {
            cache.append_row(l, k.row(p), v.row(p), static_cast<std::uint32_t>(base + p));
        }

        Matrix attn_out(t, d, 0.0);
        out.attention[l].reserve(config_.n_heads);
        for (std::size_t h = 0; h < config_.n_heads; ++h) {
            const std::size_t hs = h * dh;
            Matrix raw(t, t, 0.0);
            for (std::size_t m = 0; m < t; ++m) {
                for (std::size_t n = 0; n <= m; ++n) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) dot += q(m, hs + j) * k(n, hs + j);
                    raw(m, n) = dot * scale;
                }
            }
            Matrix attn = row_softmax_causal(raw);
            for (std::size_t m = 0; m < t; ++m) {
                for (std::size_t j = 0; j < dh; ++j) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n <= m; ++n) acc += attn(m, n) * v(n, hs + j);
                    attn_out(m, hs + j) = acc;
                }
            }
            out.attention[l].push_back(std::move(attn));
        }

        const Matrix projected = matmul(attn_out, lw.wo);
        for (std::size_t p = 0; p < t; ++p)
            for (std::size_t i = 0; i < d; ++i) x(p, i) += projected(p, i);

        Matrix normed2 = x;
        for (std::size_t p = 0; p < t; ++p) layernorm_row(normed2.row(p), lw.ln2_gain, lw.ln2_bias);
        Matrix hidden = matmul(normed2, lw.w_up);
        for (double& hv : hidden.data) hv = hv > 0.0 ? hv : 0.0;
        const Matrix down = matmul(hidden, lw.w_down);
        for (std::size_t p = 0; p < t; ++p)
            for (std::size_t i = 0; i < d; ++i) x(p, i) += down(p, i);
    }

    for (std::size_t p = 0; p < t; ++p) layernorm_row(x.row(p), lnf_gain_, lnf_bias_);
    out.logits = matmul(x, lm_head_);
    return out;
}

std::vector<double> TinyTransformer::decode_step(TokenId last_token, KvCacheSet& cache) const {
    const std::size_t d = config_.d_model;
    const std::size_t dh = config_.d_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    EKV_REQUIRE(cache.total_tokens() >= 1, "decode_step requires a prefilled cache");
    EKV_REQUIRE(last_token < config_.vocab_size, "token id out of vocabulary");
    const std::size_t expected = cache.layer(0).size();
    for (std::size_t l = 0; l < cache.n_layers(); ++l) {
        EKV_REQUIRE(cache.layer(l).size() == expected, "layer caches diverged in length");
        cache.layer(l).check_consistent();
    }

    const std::size_t pos = cache.allocate_positions(1);
    EKV_REQUIRE(pos < config_.max_seq, "sequence exceeds max_seq");

    Matrix x(1, d);
    for (std::size_t i = 0; i < d; ++i) x(0, i) = tok_emb_(last_token, i) + pos_emb_(pos, i);

    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const LayerWeights& lw = layers_[l];

        Matrix normed = x;
        layernorm_row(normed.row(0), lw.ln1_gain, lw.ln1_bias);
        const Matrix q = matmul(normed, lw.wq);
        const Matrix k = matmul(normed, lw.wk);
        const Matrix v = matmul(normed, lw.wv);

        cache.append_row(l, k.row(0), v.row(0), static_cast<std::uint32_t>(pos));

        const LayerKvCache& lc = cache.layer(l);
        const std::size_t width = lc.size();

        std::vector<std::vector<double>> head_rows(config_.n_heads);
        Matrix attn_out(1, d, 0.0);
        for (std::size_t h = 0; h < config_.n_heads; ++h) {
            const std::size_t hs = h * dh;
            std::vector<double>& row = head_rows[h];
            row.resize(width);
            for (std::size_t n = 0; n < width; ++n) {
                double dot = 0.0;
                const CacheSlot& slot = lc.heads[h][n];
                for (std::size_t j = 0; j < dh; ++j) dot += q(0, hs + j) * slot.key[j];
                row[n] = dot * scale;
            }
            softmax_inplace(row);
            for (std::size_t j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (std::size_t n = 0; n < width; ++n) acc += row[n] * lc.heads[h][n].value[j];
                attn_out(0, hs + j) = acc;
            }
        }

        cache.update_layer_after_decode(l, head_rows);

        const Matrix projected = matmul(attn_out, lw.wo);
        for (std::size_t i = 0; i < d; ++i) x(0, i) += projected(0, i);

        Matrix normed2 = x;
        layernorm_row(normed2.row(0), lw.ln2_gain, lw.ln2_bias);
        Matrix hidden = matmul(normed2, lw.w_up);
        for (double& hv : hidden.data) hv = hv > 0.0 ? hv : 0.0;
        const Matrix down = matmul(hidden, lw.w_down);
        for (std::size_t i = 0; i < d; ++i) x(0, i) += down(0, i);
    }

    layernorm_row(x.row(0), lnf_gain_, lnf_bias_);
    const Matrix logits = matmul(x, lm_head_);
    return logits.data;
}

namespace {

TokenId pick_token(std::span<const double> logits, const SampleMode& mode, std::mt19937_64& rng) {
    if (mode.temperature <= 0.0) return static_cast<TokenId>(argmax(logits));
    std::vector<double> probs(logits.begin(), logits.end());
    for (double& v : probs) v /= mode.temperature;
    softmax_inplace(probs);
    const double r = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    double cdf = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        cdf += probs[i];
        if (r < cdf) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(probs.size() - 1);
}

}  // namespace

GenerateResult generate(const TinyTransformer& model, const TokenSequence& instruction,
                        const PolicyConfig& policy, std::size_t max_new, const SampleMode& mode,
                        const Matrix* prefix_embeddings, bool stop_at_eos) {
    EKV_REQUIRE(max_new >= 1, "generate requires max_new >= 1");

    GenerateResult result;
    result.sequence.tokens = instruction.tokens;
    result.sequence.instruction_len = instruction.tokens.size();

    KvCacheSet cache = model.make_cache(policy);
    std::mt19937_64 rng(mode.seed);

    const double t0 = now_ms();
    const PrefillOutput out = model.prefill(instruction, cache, prefix_embeddings);
    cache.compress_after_prefill(out.attention);
    const double t1 = now_ms();

    result.trace.prefill_tokens = cache.total_tokens();
    result.trace.prefill_cache_len = cache.layer(0).size();
    result.trace.prefill_ms = t1 - t0;

    std::vector<double> row(out.logits.row(out.logits.rows - 1).begin(),
                            out.logits.row(out.logits.rows - 1).end());

    const double t2 = now_ms();
    for (std::size_t step = 0; step < max_new; ++step) {
        const TokenId next = pick_token(row, mode, rng);
        result.sequence.tokens.push_back(next);
        if (stop_at_eos && next == tok::kEos) break;
        if (step + 1 == max_new) break;
        result.trace.attn_width.push_back(cache.layer(0).size() + 1);
        row = model.decode_step(next, cache);
        result.trace.cache_len.push_back(cache.layer(0).size());
    }
    result.trace.decode_ms = now_ms() - t2;
    return result;
}

}  // namespace ekv
