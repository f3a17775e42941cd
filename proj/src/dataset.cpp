// SPDX-License-Identifier: Apache-2.0

#include "elastic_kv/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace ekv {

Matrix load_prefix_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    EKV_REQUIRE(in.is_open(), "cannot open prefix embedding file: " + path);
    std::uint32_t count = 0, d_model = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    in.read(reinterpret_cast<char*>(&d_model), sizeof(d_model));
    EKV_REQUIRE(in.good() && count >= 1 && d_model >= 1,
                "malformed prefix embedding header: " + path);
    Matrix m(count, d_model);
    for (double& v : m.data) {
        float f = 0.f;
        in.read(reinterpret_cast<char*>(&f), sizeof(f));
        EKV_REQUIRE(in.good(), "prefix embedding file truncated: " + path);
        EKV_REQUIRE(std::isfinite(f), "non-finite prefix embedding: " + path);
        v = static_cast<double>(f);
    }
    return m;
}

std::vector<ExampleRecord> load_dataset(const std::string& path, std::uint32_t d_model) {
    std::ifstream in(path);
    EKV_REQUIRE(in.is_open(), "cannot open dataset: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();

    std::vector<ExampleRecord> examples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ": line " + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(where + ": invalid JSON: " + e.what());
        }
        EKV_REQUIRE(j.is_object(), where + ": expected a JSON object");
        EKV_REQUIRE(j.contains("instruction") && j["instruction"].is_string(),
                    where + ": missing string field \"instruction\"");
        EKV_REQUIRE(j.contains("reference") && j["reference"].is_string(),
                    where + ": missing string field \"reference\"");

        ExampleRecord ex;
        ex.id = j.value("id", "ex" + std::to_string(examples.size()));
        ex.instruction_text = j["instruction"].get<std::string>();
        ex.reference_text = j["reference"].get<std::string>();
        ex.instruction.tokens = tok::encode_instruction(ex.instruction_text);
        ex.instruction.instruction_len = ex.instruction.tokens.size();
        ex.reference = tok::encode_reference(ex.reference_text);

        if (j.contains("image_prefix")) {
            EKV_REQUIRE(j["image_prefix"].is_string(), where + ": image_prefix must be a path");
            const std::filesystem::path p = base / j["image_prefix"].get<std::string>();
            ex.prefix = load_prefix_embeddings(p.string());
            EKV_REQUIRE(ex.prefix->cols == d_model,
                        where + ": prefix embedding width does not match the model");
        }
        examples.push_back(std::move(ex));
    }
    EKV_REQUIRE(!examples.empty(), "dataset is empty: " + path);
    return examples;
}

}  // namespace ekv
