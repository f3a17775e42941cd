// SPDX-License-Identifier: Apache-2.0
//
// JSONL dataset ingestion. One object per line:
//   {"instruction": "...", "reference": "...", "image_prefix": "opt/path"}
// Instructions are framed as BOS + bytes, references as bytes + EOS.
// image_prefix points to an embedding-prefix file (little-endian: two
// uint32 for count and d_model, then count*d_model float32 rows) whose
// rows are injected ahead of the instruction tokens.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "elastic_kv/model.hpp"

namespace ekv {

struct ExampleRecord {
    std::string id;
    std::string instruction_text;
    std::string reference_text;
    TokenSequence instruction;       // BOS + bytes
    std::vector<TokenId> reference;  // bytes + EOS
    std::optional<Matrix> prefix;    // optional image-prefix embeddings
};

Matrix load_prefix_embeddings(const std::string& path);

// Throws on malformed lines (message names the 1-based line number) and on
// empty datasets. d_model validates any referenced prefix files.
std::vector<ExampleRecord> load_dataset(const std::string& path, std::uint32_t d_model);

}  // namespace ekv
