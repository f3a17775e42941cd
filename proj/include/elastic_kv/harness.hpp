// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner: policy/budget sweeps over a JSONL corpus with PPL,
// ROUGE-L, FLOP and memory reporting, latency benchmarking, and the
// four-axis ablation grid. Writes report.csv / report.json / plotdata.csv
// (and bench.csv in bench mode) under the configured output directory.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "elastic_kv/dataset.hpp"
#include "elastic_kv/metrics.hpp"
#include "elastic_kv/model.hpp"

namespace ekv {

enum class RunMode { ppl, rouge, quality, bench, ablate };

std::string to_string(RunMode m);
RunMode parse_run_mode(const std::string& s);

struct ExperimentConfig {
    ModelConfig model;
    std::string weights_path;  // overrides model config when set
    std::string dataset_path;
    std::vector<PolicyKind> policies = {PolicyKind::full, PolicyKind::local, PolicyKind::h2o,
                                        PolicyKind::elastic};
    std::vector<double> budgets = {1.0, 0.8, 0.6, 0.5, 0.4, 0.2};
    PolicyConfig policy_base;  // shared knobs (W, P, statistic, scope, ...)
    std::size_t max_new = 64;
    RunMode mode = RunMode::quality;
    std::string output_dir = "out";
    std::uint64_t seed = 1;
    std::size_t bench_prompt_len = 256;
    std::size_t bench_gen_len = 256;
    bool verbose_json = false;

    void validate() const;
    PolicyConfig make_policy(PolicyKind kind, double budget) const;
};

// Parses the declarative key = value config format (see README for the
// schema). Unknown keys are an error.
ExperimentConfig load_experiment_config(const std::string& path);

struct ExampleRow {
    std::string example_id;
    std::string policy;
    double budget = 1.0;
    std::optional<double> ppl;
    std::optional<double> rouge_f1;
    std::uint64_t peak_kv_bytes = 0;
    std::uint64_t attn_flops = 0;
    double wall_ms = 0.0;  // report.json only; kept out of report.csv
    std::optional<std::string> error;
    // per-step traces, populated under verbose and mirrored into report.json
    std::vector<std::size_t> trace_attn_width;
    std::vector<std::size_t> trace_cache_len;
};

struct AggregateRow {
    std::string policy;
    double budget = 1.0;
    std::optional<double> mean_ppl;
    std::optional<double> mean_rouge;
    double tokens_per_s = 0.0;
    std::size_t n_examples = 0;
};

struct RunReport {
    std::vector<ExampleRow> rows;
    std::vector<AggregateRow> aggregates;
};

RunReport run_sweep(const ExperimentConfig& config, const TinyTransformer& model,
                    const std::vector<ExampleRecord>& examples);

void write_reports(const RunReport& report, const ExperimentConfig& config);

struct BenchRow {
    std::string policy;
    double budget = 1.0;
    double prefill_ms = 0.0;
    double decode_ms = 0.0;
    double tokens_per_s = 0.0;
    std::uint64_t attn_flops = 0;
    std::uint64_t peak_kv_bytes = 0;
};

// Times prefill and decode separately on a synthetic fixed-length prompt;
// always includes the full-cache row for ratio computation.
std::vector<BenchRow> bench_latency(const ExperimentConfig& config, const TinyTransformer& model);

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& output_dir);

// Loads weights when configured, otherwise builds the seeded model.
TinyTransformer load_or_init_model(const ExperimentConfig& config);

}  // namespace ekv
