// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenizer: ids 0..255 are raw bytes, followed by BOS/EOS/PAD.
// Lossless by construction, no external vocabulary.

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "elastic_kv/common.hpp"

namespace ekv::tok {

inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr std::size_t kMinVocab = 259;

inline std::vector<TokenId> encode_bytes(std::string_view s) {
    std::vector<TokenId> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(static_cast<TokenId>(c));
    return out;
}

// Instruction framing: BOS followed by the raw bytes.
inline std::vector<TokenId> encode_instruction(std::string_view s) {
    std::vector<TokenId> out;
    out.reserve(s.size() + 1);
    out.push_back(kBos);
    for (unsigned char c : s) out.push_back(static_cast<TokenId>(c));
    return out;
}

// Reference / continuation framing: raw bytes terminated by EOS.
inline std::vector<TokenId> encode_reference(std::string_view s) {
    std::vector<TokenId> out;
    out.reserve(s.size() + 1);
    for (unsigned char c : s) out.push_back(static_cast<TokenId>(c));
    out.push_back(kEos);
    return out;
}

// Drops non-byte ids (BOS/EOS/PAD and any reserved prefix ids).
inline std::string decode(const std::vector<TokenId>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

}  // namespace ekv::tok
