// SPDX-License-Identifier: Apache-2.0

#include "elastic_kv/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

namespace ekv {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// Shortest decimal string that round-trips to the same double.
std::string format_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw std::runtime_error("expected a boolean, got: " + v);
}

struct EvalOutcome {
    std::optional<double> ppl;
    std::optional<double> rouge;
    std::vector<std::size_t> widths;
    std::vector<std::size_t> cache_len;
    std::size_t decode_steps = 0;
    double decode_ms = 0.0;
};

// Teacher-forces the reference through the (compressed) cache and scores
// every reference position, including the terminating EOS.
void eval_ppl(const TinyTransformer& model, const ExampleRecord& ex, const PolicyConfig& policy,
              EvalOutcome& out) {
    KvCacheSet cache = model.make_cache(policy);
    const Matrix* prefix = ex.prefix ? &*ex.prefix : nullptr;
    const PrefillOutput pre = model.prefill(ex.instruction, cache, prefix);
    cache.compress_after_prefill(pre.attention);

    std::vector<std::vector<double>> rows;
    rows.reserve(ex.reference.size());
    rows.emplace_back(pre.logits.row(pre.logits.rows - 1).begin(),
                      pre.logits.row(pre.logits.rows - 1).end());
    const double t0 = now_ms();
    for (std::size_t i = 0; i + 1 < ex.reference.size(); ++i) {
        out.widths.push_back(cache.layer(0).size() + 1);
        rows.push_back(model.decode_step(ex.reference[i], cache));
        out.cache_len.push_back(cache.layer(0).size());
    }
    out.decode_ms += now_ms() - t0;
    out.decode_steps += ex.reference.size() - 1;
    out.ppl = perplexity(rows, ex.reference).ppl;
}

// Greedy generation scored against the full-cache greedy reference.
void eval_rouge(const TinyTransformer& model, const ExampleRecord& ex, const PolicyConfig& policy,
                const std::vector<TokenId>& full_cache_reference, std::size_t max_new,
                EvalOutcome& out) {
    const Matrix* prefix = ex.prefix ? &*ex.prefix : nullptr;
    const GenerateResult gen = generate(model, ex.instruction, policy, max_new, {}, prefix);
    const std::vector<TokenId> candidate(gen.sequence.tokens.begin() +
                                             static_cast<std::ptrdiff_t>(gen.sequence.instruction_len),
                                         gen.sequence.tokens.end());
    out.rouge = rouge_l_f1(candidate, full_cache_reference).f1;
    out.widths.insert(out.widths.end(), gen.trace.attn_width.begin(), gen.trace.attn_width.end());
    out.cache_len.insert(out.cache_len.end(), gen.trace.cache_len.begin(),
                         gen.trace.cache_len.end());
    out.decode_steps += gen.trace.attn_width.size();
    out.decode_ms += gen.trace.decode_ms;
}

}  // namespace

std::string to_string(RunMode m) {
    switch (m) {
        case RunMode::ppl: return "ppl";
        case RunMode::rouge: return "rouge";
        case RunMode::quality: return "quality";
        case RunMode::bench: return "bench";
        case RunMode::ablate: return "ablate";
    }
    return "?";
}

RunMode parse_run_mode(const std::string& s) {
    if (s == "ppl") return RunMode::ppl;
    if (s == "rouge") return RunMode::rouge;
    if (s == "quality") return RunMode::quality;
    if (s == "bench") return RunMode::bench;
    if (s == "ablate") return RunMode::ablate;
    throw std::runtime_error("unknown mode: " + s);
}

void ExperimentConfig::validate() const {
    model.validate();
    EKV_REQUIRE(!budgets.empty(), "at least one budget is required");
    for (double b : budgets) EKV_REQUIRE(b > 0.0 && b <= 1.0, "budgets must be in (0, 1]");
    EKV_REQUIRE(!policies.empty(), "at least one policy is required");
    EKV_REQUIRE(max_new >= 1, "max_new must be >= 1");
    policy_base.validate();
}

PolicyConfig ExperimentConfig::make_policy(PolicyKind kind, double budget) const {
    PolicyConfig p = policy_base;
    p.kind = kind;
    p.budget = kind == PolicyKind::full ? 1.0 : budget;
    return p;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    EKV_REQUIRE(in.is_open(), "cannot open config: " + path);
    ExperimentConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        EKV_REQUIRE(eq != std::string::npos,
                    path + ": line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        if (key == "dataset") cfg.dataset_path = value;
        else if (key == "weights") cfg.weights_path = value;
        else if (key == "output") cfg.output_dir = value;
        else if (key == "mode") cfg.mode = parse_run_mode(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "max_new") cfg.max_new = std::stoul(value);
        else if (key == "verbose") cfg.verbose_json = parse_bool(value);
        else if (key == "budgets") {
            cfg.budgets.clear();
            for (const auto& b : split_csv(value)) cfg.budgets.push_back(std::stod(b));
        } else if (key == "policies") {
            cfg.policies.clear();
            for (const auto& p : split_csv(value)) cfg.policies.push_back(parse_policy_kind(p));
        } else if (key == "model.n_layers") cfg.model.n_layers = std::stoul(value);
        else if (key == "model.n_heads") cfg.model.n_heads = std::stoul(value);
        else if (key == "model.d_model") cfg.model.d_model = std::stoul(value);
        else if (key == "model.d_head") cfg.model.d_head = std::stoul(value);
        else if (key == "model.vocab_size") cfg.model.vocab_size = std::stoul(value);
        else if (key == "model.max_seq") cfg.model.max_seq = std::stoul(value);
        else if (key == "model.seed") cfg.model.seed = std::stoull(value);
        else if (key == "policy.recent_window") cfg.policy_base.recent_window = std::stoul(value);
        else if (key == "policy.trunc_offset") cfg.policy_base.trunc_offset = std::stol(value);
        else if (key == "policy.statistic") cfg.policy_base.statistic = parse_statistic(value);
        else if (key == "policy.scope") cfg.policy_base.scope = parse_scope(value);
        else if (key == "policy.merge_mode") cfg.policy_base.merge_mode = parse_merge_mode(value);
        else if (key == "policy.discard") cfg.policy_base.discard = parse_discard(value);
        else if (key == "policy.cluster_k") cfg.policy_base.cluster_k = std::stoul(value);
        else if (key == "policy.ma_decay") cfg.policy_base.ma_decay = std::stod(value);
        else if (key == "policy.protect_first") cfg.policy_base.protect_first = parse_bool(value);
        else if (key == "policy.protect_last") cfg.policy_base.protect_last = parse_bool(value);
        else if (key == "bench.prompt_len") cfg.bench_prompt_len = std::stoul(value);
        else if (key == "bench.gen_len") cfg.bench_gen_len = std::stoul(value);
        else throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                      ": unknown key: " + key);
    }
    return cfg;
}

TinyTransformer load_or_init_model(const ExperimentConfig& config) {
    if (!config.weights_path.empty()) return TinyTransformer::from_file(config.weights_path);
    return TinyTransformer::from_seed(config.model);
}

RunReport run_sweep(const ExperimentConfig& config, const TinyTransformer& model,
                    const std::vector<ExampleRecord>& examples) {
    config.validate();
    EKV_REQUIRE(config.mode != RunMode::bench, "bench mode is handled by bench_latency");
    EKV_REQUIRE(!examples.empty(), "run_sweep needs at least one example");

    const bool want_ppl = config.mode == RunMode::ppl || config.mode == RunMode::quality ||
                          config.mode == RunMode::ablate;
    const bool want_rouge = config.mode == RunMode::rouge || config.mode == RunMode::quality;

    // (policy config, budget) cells in a fixed order; the full policy is
    // budget-independent and evaluated once.
    std::vector<std::pair<PolicyConfig, double>> cells;
    if (config.mode == RunMode::ablate) {
        const double budget = config.budgets.front();
        for (DiscardPosition d : {DiscardPosition::fixed_point, DiscardPosition::frequency,
                                  DiscardPosition::most_recent}) {
            for (MergeMode m : {MergeMode::merge, MergeMode::evict, MergeMode::cluster}) {
                for (Scope s : {Scope::shared, Scope::head_wise, Scope::layer_wise}) {
                    for (Statistic st :
                         {Statistic::sum, Statistic::mean, Statistic::moving_average}) {
                        PolicyConfig p = config.make_policy(PolicyKind::elastic, budget);
                        p.discard = d;
                        p.merge_mode = m;
                        p.scope = s;
                        p.statistic = st;
                        cells.emplace_back(p, budget);
                    }
                }
            }
        }
    } else {
        for (PolicyKind kind : config.policies) {
            if (kind == PolicyKind::full) {
                cells.emplace_back(config.make_policy(kind, 1.0), 1.0);
                continue;
            }
            for (double budget : config.budgets) {
                cells.emplace_back(config.make_policy(kind, budget), budget);
            }
        }
    }

    // Full-cache greedy references for ROUGE, one per example.
    std::vector<std::vector<TokenId>> references(examples.size());
    if (want_rouge) {
        for (std::size_t e = 0; e < examples.size(); ++e) {
            const Matrix* prefix = examples[e].prefix ? &*examples[e].prefix : nullptr;
            const GenerateResult ref = generate(model, examples[e].instruction,
                                                PolicyConfig::full_cache(), config.max_new, {},
                                                prefix);
            references[e].assign(
                ref.sequence.tokens.begin() +
                    static_cast<std::ptrdiff_t>(ref.sequence.instruction_len),
                ref.sequence.tokens.end());
        }
    }

    RunReport report;
    struct Tally {
        double ppl_sum = 0.0, rouge_sum = 0.0, decode_ms = 0.0;
        std::size_t n_ppl = 0, n_rouge = 0, steps = 0, n = 0;
    };
    std::map<std::pair<std::string, double>, Tally> tallies;

    const bool ablate = config.mode == RunMode::ablate;
    for (const auto& [policy, budget] : cells) {
        const std::string label = ablate ? policy.descriptor() : policy.name();
        for (std::size_t e = 0; e < examples.size(); ++e) {
            ExampleRow row;
            row.example_id = examples[e].id;
            row.policy = label;
            row.budget = budget;
            const double t0 = now_ms();
            EvalOutcome outcome;
            try {
                if (want_ppl) eval_ppl(model, examples[e], policy, outcome);
                if (want_rouge)
                    eval_rouge(model, examples[e], policy, references[e], config.max_new, outcome);
            } catch (const std::exception& err) {
                row.error = err.what();
                report.rows.push_back(std::move(row));
                continue;
            }
            row.wall_ms = now_ms() - t0;
            row.ppl = outcome.ppl;
            row.rouge_f1 = outcome.rouge;
            const CostReport cost =
                attention_flops(outcome.widths, model.config().d_head, model.config().n_heads,
                                model.config().n_layers);
            row.attn_flops = cost.attn_flops;
            row.peak_kv_bytes = cost.kv_bytes_peak;
            if (config.verbose_json) {
                row.trace_attn_width = std::move(outcome.widths);
                row.trace_cache_len = std::move(outcome.cache_len);
            }

            Tally& t = tallies[{label, budget}];
            if (row.ppl) {
                t.ppl_sum += *row.ppl;
                ++t.n_ppl;
            }
            if (row.rouge_f1) {
                t.rouge_sum += *row.rouge_f1;
                ++t.n_rouge;
            }
            t.decode_ms += outcome.decode_ms;
            t.steps += outcome.decode_steps;
            ++t.n;
            report.rows.push_back(std::move(row));
        }
    }

    for (const auto& [policy, budget] : cells) {
        const std::string label = ablate ? policy.descriptor() : policy.name();
        const auto it = tallies.find({label, budget});
        if (it == tallies.end()) continue;
        const Tally& t = it->second;
        AggregateRow agg;
        agg.policy = label;
        agg.budget = budget;
        if (t.n_ppl > 0) agg.mean_ppl = t.ppl_sum / static_cast<double>(t.n_ppl);
        if (t.n_rouge > 0) agg.mean_rouge = t.rouge_sum / static_cast<double>(t.n_rouge);
        if (t.decode_ms > 0.0)
            agg.tokens_per_s = static_cast<double>(t.steps) / (t.decode_ms / 1000.0);
        agg.n_examples = t.n;
        report.aggregates.push_back(std::move(agg));
    }
    return report;
}

void write_reports(const RunReport& report, const ExperimentConfig& config) {
    namespace fs = std::filesystem;
    fs::create_directories(config.output_dir);
    const fs::path dir(config.output_dir);

    {
        std::ofstream csv(dir / "report.csv");
        EKV_REQUIRE(csv.is_open(), "cannot write report.csv");
        csv << "example_id,policy,budget,ppl,rouge_f1,peak_kv_bytes,attn_flops\n";
        for (const ExampleRow& r : report.rows) {
            csv << r.example_id << ',' << r.policy << ',' << format_double(r.budget) << ','
                << (r.ppl ? format_double(*r.ppl) : "") << ','
                << (r.rouge_f1 ? format_double(*r.rouge_f1) : "") << ',' << r.peak_kv_bytes << ','
                << r.attn_flops << '\n';
        }
    }
    {
        std::ofstream csv(dir / "plotdata.csv");
        EKV_REQUIRE(csv.is_open(), "cannot write plotdata.csv");
        csv << "policy,budget,mean_ppl,mean_rouge\n";
        for (const AggregateRow& a : report.aggregates) {
            csv << a.policy << ',' << format_double(a.budget) << ','
                << (a.mean_ppl ? format_double(*a.mean_ppl) : "") << ','
                << (a.mean_rouge ? format_double(*a.mean_rouge) : "") << '\n';
        }
    }
    {
        nlohmann::json j;
        j["mode"] = to_string(config.mode);
        j["seed"] = config.seed;
        j["max_new"] = config.max_new;
        auto rows = nlohmann::json::array();
        for (const ExampleRow& r : report.rows) {
            nlohmann::json jr;
            jr["example_id"] = r.example_id;
            jr["policy"] = r.policy;
            jr["budget"] = r.budget;
            if (r.ppl) jr["ppl"] = *r.ppl;
            if (r.rouge_f1) jr["rouge_f1"] = *r.rouge_f1;
            jr["peak_kv_bytes"] = r.peak_kv_bytes;
            jr["attn_flops"] = r.attn_flops;
            jr["wall_ms"] = r.wall_ms;
            if (r.error) jr["error"] = *r.error;
            if (!r.trace_attn_width.empty()) {
                jr["trace"]["attn_width"] = r.trace_attn_width;
                jr["trace"]["cache_len"] = r.trace_cache_len;
            }
            rows.push_back(std::move(jr));
        }
        j["rows"] = std::move(rows);
        auto aggs = nlohmann::json::array();
        for (const AggregateRow& a : report.aggregates) {
            nlohmann::json ja;
            ja["policy"] = a.policy;
            ja["budget"] = a.budget;
            if (a.mean_ppl) ja["mean_ppl"] = *a.mean_ppl;
            if (a.mean_rouge) ja["mean_rouge"] = *a.mean_rouge;
            ja["tokens_per_s"] = a.tokens_per_s;
            ja["n_examples"] = a.n_examples;
            aggs.push_back(std::move(ja));
        }
        j["aggregates"] = std::move(aggs);
        std::ofstream out(dir / "report.json");
        EKV_REQUIRE(out.is_open(), "cannot write report.json");
        out << j.dump(2) << '\n';
    }
}

std::vector<BenchRow> bench_latency(const ExperimentConfig& config, const TinyTransformer& model) {
    config.validate();
    EKV_REQUIRE(config.bench_prompt_len >= 1 && config.bench_gen_len >= 1,
                "bench lengths must be >= 1");
    EKV_REQUIRE(config.bench_prompt_len + config.bench_gen_len <= model.config().max_seq,
                "bench lengths exceed max_seq");

    // deterministic synthetic prompt: BOS + seeded bytes
    TokenSequence prompt;
    prompt.tokens.push_back(tok::kBos);
    std::mt19937_64 rng(config.seed);
    for (std::size_t i = 1; i < config.bench_prompt_len; ++i) {
        prompt.tokens.push_back(static_cast<TokenId>(rng() % 256));
    }
    prompt.instruction_len = prompt.tokens.size();

    std::vector<std::pair<PolicyConfig, double>> cells;
    cells.emplace_back(config.make_policy(PolicyKind::full, 1.0), 1.0);
    for (PolicyKind kind : config.policies) {
        if (kind == PolicyKind::full) continue;
        for (double budget : config.budgets) {
            cells.emplace_back(config.make_policy(kind, budget), budget);
        }
    }

    std::vector<BenchRow> rows;
    for (const auto& [policy, budget] : cells) {
        const GenerateResult gen = generate(model, prompt, policy, config.bench_gen_len, {},
                                            nullptr, /*stop_at_eos=*/false);
        BenchRow row;
        row.policy = policy.name();
        row.budget = budget;
        row.prefill_ms = gen.trace.prefill_ms;
        row.decode_ms = gen.trace.decode_ms;
        const std::size_t steps = gen.trace.attn_width.size();
        if (gen.trace.decode_ms > 0.0)
            row.tokens_per_s = static_cast<double>(steps) / (gen.trace.decode_ms / 1000.0);
        const CostReport cost = attention_flops(gen.trace.attn_width, model.config().d_head,
                                                model.config().n_heads, model.config().n_layers);
        row.attn_flops = cost.attn_flops;
        row.peak_kv_bytes = cost.kv_bytes_peak;
        rows.push_back(row);
    }
    return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& output_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(output_dir);
    std::ofstream csv(fs::path(output_dir) / "bench.csv");
    EKV_REQUIRE(csv.is_open(), "cannot write bench.csv");
    csv << "policy,budget,prefill_ms,decode_ms,tokens_per_s,attn_flops,peak_kv_bytes\n";
    for (const BenchRow& r : rows) {
        csv << r.policy << ',' << format_double(r.budget) << ',' << format_double(r.prefill_ms)
            << ',' << format_double(r.decode_ms) << ',' << format_double(r.tokens_per_s) << ','
            << r.attn_flops << ',' << r.peak_kv_bytes << '\n';
    }
}

}  // namespace ekv
