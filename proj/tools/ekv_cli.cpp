// SPDX-License-Identifier: Apache-2.0
//
// Experiment-runner CLI. `ekv run --config <path>` executes a sweep (or
// benchmark) described by a key = value config file; every knob can be
// overridden on the command line.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elastic_kv/harness.hpp"

namespace {

void print_aggregates(const ekv::RunReport& report) {
    std::printf("%-56s %8s %12s %12s\n", "policy", "budget", "mean_ppl", "mean_rouge");
    for (const ekv::AggregateRow& a : report.aggregates) {
        std::printf("%-56s %8.3g %12s %12s\n", a.policy.c_str(), a.budget,
                    a.mean_ppl ? std::to_string(*a.mean_ppl).c_str() : "-",
                    a.mean_rouge ? std::to_string(*a.mean_rouge).c_str() : "-");
    }
}

void print_bench(const std::vector<ekv::BenchRow>& rows) {
    std::printf("%-32s %8s %12s %12s %12s %16s\n", "policy", "budget", "prefill_ms", "decode_ms",
                "tok/s", "attn_flops");
    for (const ekv::BenchRow& r : rows) {
        std::printf("%-32s %8.3g %12.2f %12.2f %12.1f %16llu\n", r.policy.c_str(), r.budget,
                    r.prefill_ms, r.decode_ms, r.tokens_per_s,
                    static_cast<unsigned long long>(r.attn_flops));
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache policy sweeps on a deterministic toy transformer"};
    app.require_subcommand(1);

    CLI::App* gen = app.add_subcommand("gen-weights", "write a seeded EKV1 weight file");
    std::string gen_out = "model.ekv";
    long long gen_seed = 1, gen_layers = 4, gen_heads = 4, gen_dhead = 16, gen_vocab = 259,
              gen_maxseq = 512;
    gen->add_option("--out", gen_out, "output path");
    gen->add_option("--seed", gen_seed, "weight seed");
    gen->add_option("--layers", gen_layers, "layer count");
    gen->add_option("--heads", gen_heads, "head count");
    gen->add_option("--d-head", gen_dhead, "per-head width");
    gen->add_option("--vocab", gen_vocab, "vocabulary size (>= 259)");
    gen->add_option("--max-seq", gen_maxseq, "position table size");

    CLI::App* run = app.add_subcommand("run", "execute a sweep or benchmark");

    std::string config_path, dataset, weights, out_dir, mode_str;
    std::vector<std::string> policy_strs;
    std::vector<double> budgets;
    std::string statistic, scope, merge_mode, discard;
    long long seed = -1;
    long long max_new = -1, recent_window = -1, prompt_len = -1, gen_len = -1;
    long long trunc_offset = 0;
    bool has_trunc_offset = false, verbose = false;

    run->add_option("--config", config_path, "config file (key = value schema)");
    run->add_option("--dataset", dataset, "JSONL corpus path");
    run->add_option("--weights", weights, "EKV1 weight file (otherwise seeded init)");
    run->add_option("--out", out_dir, "output directory");
    run->add_option("--mode", mode_str, "ppl | rouge | quality | bench | ablate");
    run->add_option("--policy", policy_strs, "policies: full local h2o elastic");
    run->add_option("--budget", budgets, "cache budgets in (0, 1]");
    run->add_option("--seed", seed, "experiment seed");
    run->add_option("--max-new", max_new, "generation length cap");
    run->add_option("--recent-window", recent_window, "recent window W");
    run->add_option("--trunc-offset", trunc_offset, "truncation offset P")
        ->each([&](const std::string&) { has_trunc_offset = true; });
    run->add_option("--statistic", statistic, "sum | mean | moving_average");
    run->add_option("--scope", scope, "shared | head_wise | layer_wise");
    run->add_option("--merge-mode", merge_mode, "merge | evict | cluster");
    run->add_option("--discard", discard, "fixed_point | frequency | most_recent");
    run->add_option("--prompt-len", prompt_len, "bench prompt length");
    run->add_option("--gen-len", gen_len, "bench generation length");
    run->add_flag("--verbose", verbose, "verbose report.json");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        try {
            ekv::ModelConfig mc;
            mc.seed = static_cast<std::uint64_t>(gen_seed);
            mc.n_layers = static_cast<std::uint32_t>(gen_layers);
            mc.n_heads = static_cast<std::uint32_t>(gen_heads);
            mc.d_head = static_cast<std::uint32_t>(gen_dhead);
            mc.d_model = mc.n_heads * mc.d_head;
            mc.vocab_size = static_cast<std::uint32_t>(gen_vocab);
            mc.max_seq = static_cast<std::uint32_t>(gen_maxseq);
            ekv::TinyTransformer::from_seed(mc).save(gen_out);
            std::cout << "wrote " << gen_out << "\n";
            return 0;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 1;
        }
    }

    try {
        ekv::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = ekv::load_experiment_config(config_path);
        if (!dataset.empty()) cfg.dataset_path = dataset;
        if (!weights.empty()) cfg.weights_path = weights;
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        if (!mode_str.empty()) cfg.mode = ekv::parse_run_mode(mode_str);
        if (!policy_strs.empty()) {
            cfg.policies.clear();
            for (const auto& p : policy_strs) cfg.policies.push_back(ekv::parse_policy_kind(p));
        }
        if (!budgets.empty()) cfg.budgets = budgets;
        if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
        if (max_new >= 0) cfg.max_new = static_cast<std::size_t>(max_new);
        if (recent_window >= 0)
            cfg.policy_base.recent_window = static_cast<std::uint32_t>(recent_window);
        if (has_trunc_offset) cfg.policy_base.trunc_offset = static_cast<std::int32_t>(trunc_offset);
        if (!statistic.empty()) cfg.policy_base.statistic = ekv::parse_statistic(statistic);
        if (!scope.empty()) cfg.policy_base.scope = ekv::parse_scope(scope);
        if (!merge_mode.empty()) cfg.policy_base.merge_mode = ekv::parse_merge_mode(merge_mode);
        if (!discard.empty()) cfg.policy_base.discard = ekv::parse_discard(discard);
        if (prompt_len >= 1) cfg.bench_prompt_len = static_cast<std::size_t>(prompt_len);
        if (gen_len >= 1) cfg.bench_gen_len = static_cast<std::size_t>(gen_len);
        if (verbose) cfg.verbose_json = true;

        const ekv::TinyTransformer model = ekv::load_or_init_model(cfg);

        if (cfg.mode == ekv::RunMode::bench) {
            const auto rows = ekv::bench_latency(cfg, model);
            ekv::write_bench_csv(rows, cfg.output_dir);
            print_bench(rows);
            std::cout << "wrote " << cfg.output_dir << "/bench.csv\n";
            return 0;
        }

        EKV_REQUIRE(!cfg.dataset_path.empty(), "a dataset is required (config or --dataset)");
        const auto examples = ekv::load_dataset(cfg.dataset_path, model.config().d_model);
        const ekv::RunReport report = ekv::run_sweep(cfg, model, examples);
        ekv::write_reports(report, cfg);
        print_aggregates(report);
        std::size_t errors = 0;
        for (const auto& r : report.rows)
            if (r.error) ++errors;
        if (errors > 0) std::cerr << errors << " example(s) failed; see report.json\n";
        std::cout << "wrote " << cfg.output_dir << "/report.csv, report.json, plotdata.csv\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
