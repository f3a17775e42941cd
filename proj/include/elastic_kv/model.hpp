// SPDX-License-Identifier: Apache-2.0
//
// Deterministic toy decoder-only transformer (pre-norm, learned position
// embeddings, byte-level vocabulary) with a prefill/decode split and a
// pluggable KV cache. Weights are either loaded from the EKV1 binary
// format or generated from a seed with a documented PRNG so runs are
// reproducible bit for bit.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elastic_kv/cache.hpp"
#include "elastic_kv/numkern.hpp"
#include "elastic_kv/tokenizer.hpp"

namespace ekv {

struct ModelConfig {
    std::uint32_t n_layers = 4;
    std::uint32_t n_heads = 4;
    std::uint32_t d_model = 64;
    std::uint32_t d_head = 16;
    std::uint32_t vocab_size = 259;
    std::uint32_t max_seq = 512;
    std::uint64_t seed = 1;

    void validate() const;
};

struct TokenSequence {
    std::vector<TokenId> tokens;
    std::size_t instruction_len = 0;  // boundary between instruction and generated portion
};

struct PrefillOutput {
    Matrix logits;               // T x vocab
    PrefillAttention attention;  // [layer][head] causal T x T
};

struct LayerWeights {
    std::vector<double> ln1_gain, ln1_bias;
    Matrix wq, wk, wv, wo;  // d_model x d_model, stored input-major (y = x * W)
    std::vector<double> ln2_gain, ln2_bias;
    Matrix w_up;    // d_model x 4*d_model
    Matrix w_down;  // 4*d_model x d_model
};

class TinyTransformer {
public:
    static TinyTransformer from_seed(const ModelConfig& config);
    static TinyTransformer from_file(const std::string& path);
    void save(const std::string& path) const;

    const ModelConfig& config() const { return config_; }

    KvCacheSet make_cache(const PolicyConfig& policy) const;

    // One-shot pass over the instruction. Populates the (empty) cache with
    // one key/value per token per layer per head and returns per-position
    // logits plus the full attention tensors. Optional prefix embeddings
    // are consumed as opaque leading positions (image-token stand-ins).
    PrefillOutput prefill(const TokenSequence& instruction, KvCacheSet& cache,
                          const Matrix* prefix_embeddings = nullptr) const;

    // Appends the token's key/value to each layer cache, lets the policy
    // compress, and returns the next-token logits row.
    std::vector<double> decode_step(TokenId last_token, KvCacheSet& cache) const;

    // Read-only weight access (serialization, tools, test oracles).
    const Matrix& token_embedding() const { return tok_emb_; }
    const Matrix& position_embedding() const { return pos_emb_; }
    const LayerWeights& layer(std::size_t i) const { return layers_[i]; }
    const std::vector<double>& final_gain() const { return lnf_gain_; }
    const std::vector<double>& final_bias() const { return lnf_bias_; }
    const Matrix& lm_head() const { return lm_head_; }

private:
    TinyTransformer() = default;

    ModelConfig config_;
    Matrix tok_emb_;  // vocab x d_model
    Matrix pos_emb_;  // max_seq x d_model
    std::vector<LayerWeights> layers_;
    std::vector<double> lnf_gain_, lnf_bias_;
    Matrix lm_head_;  // d_model x vocab
};

// temperature <= 0 selects greedy decoding (argmax, ties to the smaller id).
struct SampleMode {
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

struct RunTrace {
    std::size_t prefill_tokens = 0;     // positions consumed at prefill
    std::size_t prefill_cache_len = 0;  // per-layer cache length after compression
    std::vector<std::size_t> attn_width;  // per decode step: slots attended over
    std::vector<std::size_t> cache_len;   // per decode step: length after policy update
    double prefill_ms = 0.0;
    double decode_ms = 0.0;
};

struct GenerateResult {
    TokenSequence sequence;  // instruction + generated tokens
    RunTrace trace;
};

GenerateResult generate(const TinyTransformer& model, const TokenSequence& instruction,
                        const PolicyConfig& policy, std::size_t max_new,
                        const SampleMode& mode = {}, const Matrix* prefix_embeddings = nullptr,
                        bool stop_at_eos = true);

}  // namespace ekv
