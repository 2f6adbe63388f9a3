#pragma once

// Experiment configuration: a plain `key = value` file (with `#` comments)
// overlaid by command-line overrides, resolved into typed settings.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/aggregate.hpp"
#include "nlecal/calibrate.hpp"
#include "nlecal/error.hpp"
#include "nlecal/llm.hpp"
#include "nlecal/losses.hpp"
#include "nlecal/metrics.hpp"
#include "nlecal/util.hpp"

namespace nlecal {

enum class Method { nc, pc, fc, pr, pl, nle_literal, nle_conditional };

inline std::string_view to_string(Method m) {
    switch (m) {
        case Method::nc: return "nc";
        case Method::pc: return "pc";
        case Method::fc: return "fc";
        case Method::pr: return "pr";
        case Method::pl: return "pl";
        case Method::nle_literal: return "nle_literal";
        case Method::nle_conditional: return "nle_conditional";
    }
    return "nc";
}

inline std::optional<Method> parse_method(std::string_view s) {
    for (auto m : {Method::nc, Method::pc, Method::fc, Method::pr, Method::pl, Method::nle_literal, Method::nle_conditional})
        if (to_string(m) == s) return m;
    return std::nullopt;
}

enum class ScorerBackend { builtin_linear, external_http };
enum class LlmBackend { mock, http };

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* help;
};

// Every recognized key with its default. Empty defaults mean "unset".
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"method", "nle_literal", "nc | pc | fc | pr | pl | nle_literal | nle_conditional"},
        {"pairs", "", "JSON Lines collection (query_id, query, doc_id, text, label, split)"},
        {"run_file", "", "precomputed TREC run used by nc/pc instead of a scorer"},
        {"scale_max", "", "top grade of the label scale; inferred from the labels when unset"},
        {"output_dir", "nlecal-out", "directory for artifacts and reports"},
        {"seeds", "1,2,3,4,5", "comma-separated run seeds; the report averages over them"},
        {"llm.backend", "mock", "mock | http"},
        {"llm.endpoint", "http://127.0.0.1:8000/v1/chat/completions", "OpenAI-compatible chat completions URL"},
        {"llm.model", "llama-2-13b-chat", "model id sent to the endpoint and recorded per sample"},
        {"llm.temperature", "0.7", "sampling temperature for Monte Carlo samples"},
        {"llm.max_tokens", "256", "max output tokens per generation"},
        {"llm.timeout", "60", "per-request timeout in seconds"},
        {"llm.max_in_flight", "4", "max concurrent LLM requests"},
        {"llm.retry_budget", "3", "retries per request on 429, 5xx and connection errors"},
        {"llm.mock_seed", "0", "seed of the deterministic mock LLM"},
        {"agg.lambda", "0.35", "ROUGE-L novelty threshold"},
        {"agg.k_l", "20", "max samples per meta explanation"},
        {"agg.k_s", "30", "max sentences per meta explanation"},
        {"selection", "aggregate_mc", "most_probable | aggregate_mc | oracle"},
        {"selection.max_tries", "20", "oracle resampling budget"},
        {"selection.threshold", "", "oracle: grade >= threshold counts as relevant; default ceil((C-1)/2)"},
        {"loss", "calibrated_softmax", "mse | softmax | multiobj | calibrated_softmax"},
        {"loss.alpha", "0.5", "multiobj weight on mse"},
        {"loss.anchor", "0", "calibrated softmax anchor logit"},
        {"train.lr", "0.5", "gradient descent learning rate"},
        {"train.epochs", "10", "max full-batch epochs"},
        {"train.list_cap", "", "max documents per training query; unlimited when unset"},
        {"features.dimension", "32768", "hashed feature buckets (power of two)"},
        {"features.seed", "0", "base hash seed; the run seed is added to it"},
        {"features.lowercase", "true", "lowercase tokens before hashing"},
        {"scorer", "builtin_linear", "builtin_linear | external_http"},
        {"scorer.endpoint", "", "external scoring service URL"},
        {"scorer.timeout", "60", "scoring request timeout in seconds"},
        {"scorer.batch_size", "64", "items per scoring request"},
        {"platt", "auto", "auto | on | off; auto enables it for pc and pl only"},
        {"platt.lr", "0.1", "Platt fit initial step size"},
        {"platt.iterations", "20000", "Platt fit max iterations"},
        {"pl.samples", "20", "binary judgments averaged per pair"},
        {"pr.rubric", "", "rubric text for pr; a generic one is derived from the scale when unset"},
        {"metrics.bins", "10", "ECE bucket count"},
        {"metrics.k", "10", "nDCG cutoff"},
        {"metrics.gain", "exponential", "exponential | linear"},
        {"qpp.k", "10", "top-k documents for WIG and NQC"},
    };
    return keys;
}

using ConfigValues = std::map<std::string, std::string>;

inline ConfigValues parse_config_text(std::string_view text, const std::string& source = "config") {
    ConfigValues out;
    util::for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = util::trim(line);
        if (line.empty()) return;
        auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ParseError(source, lineno, "expected key = value");
        std::string key(util::trim(line.substr(0, eq)));
        if (key.empty()) throw ParseError(source, lineno, "empty key");
        out[key] = std::string(util::trim(line.substr(eq + 1)));
    });
    return out;
}

// Parses one "key=value" override.
inline std::pair<std::string, std::string> parse_override(std::string_view kv) {
    auto eq = kv.find('=');
    if (eq == std::string_view::npos) throw UsageError("override must look like key=value: " + std::string(kv));
    return {std::string(util::trim(kv.substr(0, eq))), std::string(util::trim(kv.substr(eq + 1)))};
}

struct ExperimentConfig {
    Method method = Method::nle_literal;
    std::string pairs_path;
    std::string run_file;
    std::optional<int> scale_max;
    std::string output_dir;
    std::vector<std::uint64_t> seeds;
    LlmBackend llm_backend = LlmBackend::mock;
    SamplerConfig sampler;
    std::uint64_t mock_seed = 0;
    AggregationParams aggregation;
    SelectionStrategy selection;
    LossKind loss;
    TrainHyper train;
    FeaturizerSpec features;
    ScorerBackend scorer = ScorerBackend::builtin_linear;
    std::string scorer_endpoint;
    double scorer_timeout = 60.0;
    std::size_t scorer_batch_size = 64;
    bool platt = false;
    PlattHyper platt_hyper;
    int pl_samples = 20;
    std::string pr_rubric;
    EvalParams metrics;
    std::size_t qpp_k = 10;
    ConfigValues values;  // fully resolved key -> value

    bool uses_llm() const noexcept {
        return method == Method::pr || method == Method::pl || method == Method::nle_literal || method == Method::nle_conditional;
    }
};

namespace detail {

class ConfigReader {
public:
    explicit ConfigReader(const ConfigValues& v) : v_(v) {}

    const std::string& str(const std::string& key) const { return v_.at(key); }

    double real(const std::string& key) const {
        auto d = util::parse_double(str(key));
        if (!d || !std::isfinite(*d)) throw ConfigError(key + ": expected a number, got '" + str(key) + "'");
        return *d;
    }

    long long integer(const std::string& key) const {
        auto i = util::parse_int(str(key));
        if (!i) throw ConfigError(key + ": expected an integer, got '" + str(key) + "'");
        return *i;
    }

    long long positive(const std::string& key) const {
        auto i = integer(key);
        if (i < 1) throw ConfigError(key + " must be >= 1");
        return i;
    }

    std::optional<long long> opt_integer(const std::string& key) const {
        if (str(key).empty()) return std::nullopt;
        return integer(key);
    }

    bool boolean(const std::string& key) const {
        const auto& s = str(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError(key + ": expected true/false, got '" + s + "'");
    }

    template <class T, class F>
    T choice(const std::string& key, F parse) const {
        auto r = parse(str(key));
        if (!r) throw ConfigError(key + ": unknown value '" + str(key) + "'");
        return *r;
    }

private:
    const ConfigValues& v_;
};

}  // namespace detail

// Defaults, then the file, then overrides. Unknown keys are rejected.
inline ExperimentConfig resolve_config(const ConfigValues& file, const ConfigValues& overrides = {}) {
    ConfigValues v;
    for (const auto& k : config_keys()) v[k.name] = k.default_value;
    for (const auto* layer : {&file, &overrides})
        for (const auto& [key, value] : *layer) {
            if (!v.count(key)) throw ConfigError("unknown config key '" + key + "'");
            v[key] = value;
        }

    detail::ConfigReader r(v);
    ExperimentConfig c;
    c.values = v;
    c.method = r.choice<Method>("method", parse_method);
    c.pairs_path = r.str("pairs");
    if (c.pairs_path.empty()) throw ConfigError("pairs: a collection file is required");
    c.run_file = r.str("run_file");
    if (auto s = r.opt_integer("scale_max")) {
        if (*s < 1) throw ConfigError("scale_max must be >= 1");
        c.scale_max = static_cast<int>(*s);
    }
    c.output_dir = r.str("output_dir");
    if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
    {
        std::string s = r.str("seeds");
        for (auto& ch : s)
            if (ch == ',') ch = ' ';
        for (auto tok : util::split_ws(s)) {
            auto i = util::parse_int(tok);
            if (!i || *i < 0) throw ConfigError("seeds: expected non-negative integers, got '" + std::string(tok) + "'");
            c.seeds.push_back(static_cast<std::uint64_t>(*i));
        }
        if (c.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    }

    c.llm_backend = r.choice<LlmBackend>("llm.backend", [](std::string_view s) -> std::optional<LlmBackend> {
        if (s == "mock") return LlmBackend::mock;
        if (s == "http") return LlmBackend::http;
        return std::nullopt;
    });
    c.sampler.endpoint_url = r.str("llm.endpoint");
    c.sampler.model_id = r.str("llm.model");
    c.sampler.temperature = r.real("llm.temperature");
    c.sampler.max_output_tokens = static_cast<int>(r.positive("llm.max_tokens"));
    c.sampler.request_timeout = r.real("llm.timeout");
    c.sampler.max_in_flight = static_cast<int>(r.positive("llm.max_in_flight"));
    c.sampler.retry_budget = static_cast<int>(r.integer("llm.retry_budget"));
    c.sampler.validate();
    c.mock_seed = static_cast<std::uint64_t>(r.integer("llm.mock_seed"));

    c.aggregation = {r.real("agg.lambda"), static_cast<int>(r.integer("agg.k_l")), static_cast<int>(r.integer("agg.k_s"))};
    c.aggregation.validate();
    c.selection.kind = r.choice<SelectionKind>("selection", parse_selection_kind);
    c.selection.max_tries = static_cast<int>(r.positive("selection.max_tries"));
    if (auto t = r.opt_integer("selection.threshold")) c.selection.binarization_threshold = static_cast<int>(*t);

    c.loss = {r.choice<LossType>("loss", parse_loss_type), r.real("loss.alpha"), r.real("loss.anchor")};
    c.loss.validate();
    c.train.learning_rate = r.real("train.lr");
    c.train.epochs = static_cast<int>(r.integer("train.epochs"));
    if (auto cap = r.opt_integer("train.list_cap")) c.train.list_cap = static_cast<int>(*cap);
    if (c.train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (!(c.train.learning_rate > 0)) throw ConfigError("train.lr must be positive");

    auto dim = r.positive("features.dimension");
    if (dim > (1LL << 26)) throw ConfigError("features.dimension is too large");
    c.features = {static_cast<std::uint32_t>(dim), static_cast<std::uint64_t>(r.integer("features.seed")), r.boolean("features.lowercase")};
    c.features.validate();

    c.scorer = r.choice<ScorerBackend>("scorer", [](std::string_view s) -> std::optional<ScorerBackend> {
        if (s == "builtin_linear") return ScorerBackend::builtin_linear;
        if (s == "external_http") return ScorerBackend::external_http;
        return std::nullopt;
    });
    c.scorer_endpoint = r.str("scorer.endpoint");
    c.scorer_timeout = r.real("scorer.timeout");
    c.scorer_batch_size = static_cast<std::size_t>(r.positive("scorer.batch_size"));
    if (c.scorer == ScorerBackend::external_http && c.scorer_endpoint.empty())
        throw ConfigError("scorer.endpoint is required for the external_http scorer");

    const auto& platt = r.str("platt");
    if (platt == "auto")
        c.platt = c.method == Method::pc || c.method == Method::pl;
    else if (platt == "on")
        c.platt = true;
    else if (platt == "off")
        c.platt = false;
    else
        throw ConfigError("platt: expected auto, on or off");
    if ((c.method == Method::pc || c.method == Method::pl) && !c.platt) throw ConfigError("methods pc and pl always apply Platt scaling");
    c.platt_hyper.learning_rate = r.real("platt.lr");
    c.platt_hyper.iterations = static_cast<int>(r.positive("platt.iterations"));

    c.pl_samples = static_cast<int>(r.positive("pl.samples"));
    if (c.method == Method::pl && c.pl_samples > 1 && c.sampler.temperature == 0.0)
        throw ConfigError("pl.samples > 1 needs llm.temperature > 0");
    c.pr_rubric = r.str("pr.rubric");

    c.metrics.bins = static_cast<int>(r.positive("metrics.bins"));
    c.metrics.k = static_cast<std::size_t>(r.positive("metrics.k"));
    c.metrics.gain = r.choice<Gain>("metrics.gain", parse_gain);
    c.qpp_k = static_cast<std::size_t>(r.positive("qpp.k"));

    if ((c.method == Method::nc || c.method == Method::pc) && c.run_file.empty() && c.scorer != ScorerBackend::external_http)
        throw ConfigError("methods nc and pc need run_file or the external_http scorer");
    if (c.method == Method::nle_conditional && c.selection.kind == SelectionKind::oracle)
        throw ConfigError("oracle selection requires literal explanations");
    return c;
}

// Fully resolved settings with typed values.
inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& k : config_keys()) {
        const std::string& raw = c.values.at(k.name);
        if (raw.empty()) {
            j[k.name] = nullptr;
        } else if (auto i = util::parse_int(raw); i && std::string(k.name) != "seeds") {
            j[k.name] = *i;
        } else if (auto d = util::parse_double(raw); d && std::string(k.name) != "seeds") {
            j[k.name] = *d;
        } else if (raw == "true" || raw == "false") {
            j[k.name] = raw == "true";
        } else {
            j[k.name] = raw;
        }
    }
    j["seeds"] = c.seeds;
    if (c.selection.kind == SelectionKind::oracle && !c.selection.binarization_threshold) j["selection.threshold"] = "default";
    j["platt"] = c.platt ? "on" : "off";
    return j;
}

}  // namespace nlecal
