#pragma once

// Novelty-based aggregation of Monte Carlo explanation samples into a meta
// explanation, and the per-pair selection strategies built on top of it.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/error.hpp"
#include "nlecal/llm.hpp"
#include "nlecal/textsim.hpp"

namespace nlecal {

struct AggregationParams {
    double lambda = 0.35;  // similarity threshold
    int k_l = 20;          // max samples consumed
    int k_s = 30;          // max sentences kept

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
        if (k_l < 1) throw ConfigError("k_l must be >= 1");
        if (k_s < 1) throw ConfigError("k_s must be >= 1");
    }
};

enum class Polarity { literal, relevant, nonrelevant };

inline std::string_view to_string(Polarity p) {
    switch (p) {
        case Polarity::literal: return "literal";
        case Polarity::relevant: return "relevant";
        case Polarity::nonrelevant: return "nonrelevant";
    }
    return "literal";
}

inline std::optional<Polarity> parse_polarity(std::string_view s) {
    for (auto p : {Polarity::literal, Polarity::relevant, Polarity::nonrelevant})
        if (to_string(p) == s) return p;
    return std::nullopt;
}

inline constexpr std::string_view kEmptyMetaPlaceholder = "no explanation";

struct MetaNle {
    std::string query_id;
    std::string doc_id;
    Polarity polarity = Polarity::literal;
    std::vector<Sentence> sentences;
    int source_sample_count = 0;
    AggregationParams params;
    std::vector<std::string> flags;

    std::string text() const {
        std::string out;
        for (const auto& s : sentences) {
            if (!out.empty()) out += ' ';
            out += s.text;
        }
        return out;
    }

    bool has_flag(std::string_view f) const {
        for (const auto& x : flags)
            if (x == f) return true;
        return false;
    }
};

class EmptyMetaError : public DataError {
public:
    EmptyMetaError() : DataError("aggregation produced no usable sentences") {}
};

using SampleSource = std::function<std::optional<std::string>()>;

inline SampleSource from_vector(const std::vector<std::string>& samples) {
    return [&samples, i = std::size_t{0}]() mutable -> std::optional<std::string> {
        if (i >= samples.size()) return std::nullopt;
        return samples[i++];
    };
}

// Pulls at most k_l samples from `next`. A sentence is rejected when the meta
// explanation is non-empty and its highest ROUGE-L against any kept sentence
// exceeds lambda. Returns as soon as k_s sentences are kept.
inline MetaNle aggregate(const SampleSource& next, const AggregationParams& params) {
    params.validate();
    MetaNle meta;
    meta.params = params;
    for (int i = 0; i < params.k_l; ++i) {
        auto sample = next();
        if (!sample) {
            meta.flags.push_back("shortfall");
            break;
        }
        ++meta.source_sample_count;
        for (auto& s : split_sentences(*sample)) {
            if (!meta.sentences.empty()) {
                double best = 0.0;
                for (const auto& kept : meta.sentences) best = std::max(best, rouge_l(s, kept));
                if (best > params.lambda) continue;
            }
            meta.sentences.push_back(std::move(s));
            if (static_cast<int>(meta.sentences.size()) >= params.k_s) return meta;
        }
    }
    if (meta.sentences.empty()) throw EmptyMetaError();
    return meta;
}

inline MetaNle aggregate(const std::vector<std::string>& samples, const AggregationParams& params) {
    return aggregate(from_vector(samples), params);
}

inline MetaNle placeholder_meta(const AggregationParams& params, int consumed) {
    MetaNle m;
    m.params = params;
    m.source_sample_count = consumed;
    m.sentences.emplace_back(std::string(kEmptyMetaPlaceholder));
    m.flags.push_back("empty_meta");
    return m;
}

// Meta explanation from a single generation, without novelty filtering.
inline MetaNle single_sample_meta(std::string_view text, const AggregationParams& params) {
    MetaNle m;
    m.params = params;
    m.source_sample_count = 1;
    for (auto& s : split_sentences(text)) {
        if (static_cast<int>(m.sentences.size()) >= params.k_s) break;
        m.sentences.push_back(std::move(s));
    }
    if (m.sentences.empty()) return placeholder_meta(params, 1);
    return m;
}

// ---------------------------------------------------------------------------
// Selection strategies

enum class SelectionKind { most_probable, aggregate_mc, oracle };

inline std::string_view to_string(SelectionKind k) {
    switch (k) {
        case SelectionKind::most_probable: return "most_probable";
        case SelectionKind::aggregate_mc: return "aggregate_mc";
        case SelectionKind::oracle: return "oracle";
    }
    return "aggregate_mc";
}

inline std::optional<SelectionKind> parse_selection_kind(std::string_view s) {
    for (auto k : {SelectionKind::most_probable, SelectionKind::aggregate_mc, SelectionKind::oracle})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

struct SelectionStrategy {
    SelectionKind kind = SelectionKind::aggregate_mc;
    int max_tries = 20;
    std::optional<int> binarization_threshold;  // oracle: grade >= threshold counts as relevant
};

// Default binarization: grade >= ceil((C-1)/2).
inline int default_binarization_threshold(int max_grade) {
    return static_cast<int>(std::ceil(static_cast<double>(max_grade) / 2.0));
}

enum class ExplanationMode { literal, conditional };

struct PairContext {
    std::string query_id;
    std::string doc_id;
    std::string query;
    std::string document;
    std::optional<int> gold;
};

namespace detail {

inline SampleRequest request_for(const PairContext& pair, PromptKind kind) {
    return {pair.query_id, pair.doc_id, kind, build_prompt(kind, pair.query, pair.document), pair.query, pair.document};
}

inline std::vector<PromptKind> kinds_for(ExplanationMode mode) {
    if (mode == ExplanationMode::literal) return {PromptKind::literal};
    return {PromptKind::conditional_relevant, PromptKind::conditional_nonrelevant};
}

inline Polarity polarity_for(PromptKind kind) {
    if (kind == PromptKind::conditional_relevant) return Polarity::relevant;
    if (kind == PromptKind::conditional_nonrelevant) return Polarity::nonrelevant;
    return Polarity::literal;
}

inline void stamp(MetaNle& m, const PairContext& pair, PromptKind kind) {
    m.query_id = pair.query_id;
    m.doc_id = pair.doc_id;
    m.polarity = polarity_for(kind);
}

}  // namespace detail

// Selects one meta explanation per pair (literal mode) or a (relevant,
// nonrelevant) pair of them (conditional mode). Sampling for all pairs is
// batched through the sampler so transport concurrency spans pairs.
inline std::vector<std::vector<MetaNle>> select_all(const std::vector<PairContext>& pairs, ExplanationMode mode,
                                                    const SelectionStrategy& strategy, Sampler& sampler,
                                                    const AggregationParams& params) {
    params.validate();
    const auto kinds = detail::kinds_for(mode);
    std::vector<std::vector<MetaNle>> out(pairs.size());

    if (strategy.kind == SelectionKind::oracle) {
        if (mode != ExplanationMode::literal) throw UsageError("oracle selection requires literal explanations");
        if (!strategy.binarization_threshold) throw UsageError("oracle selection requires a binarization threshold");
        if (strategy.max_tries < 1) throw ConfigError("oracle max_tries must be >= 1");
        for (const auto& p : pairs)
            if (!p.gold) throw UsageError("oracle selection requires gold labels (" + p.query_id + ", " + p.doc_id + ")");
    }

    switch (strategy.kind) {
        case SelectionKind::most_probable: {
            std::vector<SampleJob> jobs;
            for (const auto& p : pairs)
                for (auto k : kinds) jobs.push_back({detail::request_for(p, k), 1, 0.0});
            auto res = sampler.sample_many(jobs);
            std::size_t j = 0;
            for (std::size_t i = 0; i < pairs.size(); ++i)
                for (auto k : kinds) {
                    auto m = single_sample_meta(res[j++].front().explanation, params);
                    detail::stamp(m, pairs[i], k);
                    out[i].push_back(std::move(m));
                }
            break;
        }
        case SelectionKind::aggregate_mc: {
            std::vector<SampleJob> jobs;
            for (const auto& p : pairs)
                for (auto k : kinds) jobs.push_back({detail::request_for(p, k), params.k_l, std::nullopt});
            auto res = sampler.sample_many(jobs);
            std::size_t j = 0;
            for (std::size_t i = 0; i < pairs.size(); ++i)
                for (auto k : kinds) {
                    auto texts = explanations(res[j++]);
                    MetaNle m;
                    try {
                        m = aggregate(texts, params);
                    } catch (const EmptyMetaError&) {
                        m = placeholder_meta(params, static_cast<int>(texts.size()));
                    }
                    detail::stamp(m, pairs[i], k);
                    out[i].push_back(std::move(m));
                }
            break;
        }
        case SelectionKind::oracle: {
            const int threshold = *strategy.binarization_threshold;
            std::vector<std::optional<NleSample>> found(pairs.size());
            std::vector<std::size_t> pending(pairs.size());
            for (std::size_t i = 0; i < pairs.size(); ++i) pending[i] = i;
            // Round r draws sample index r for every unresolved pair.
            for (int round = 0; round < strategy.max_tries && !pending.empty(); ++round) {
                std::vector<SampleJob> jobs;
                for (auto i : pending) jobs.push_back({detail::request_for(pairs[i], PromptKind::literal), round + 1, std::nullopt});
                auto res = sampler.sample_many(jobs);
                std::vector<std::size_t> still;
                for (std::size_t j = 0; j < pending.size(); ++j) {
                    auto i = pending[j];
                    const auto& s = res[j].back();
                    auto want = *pairs[i].gold >= threshold ? RelevanceLabel::relevant : RelevanceLabel::nonrelevant;
                    if (s.predicted_label == want)
                        found[i] = s;
                    else
                        still.push_back(i);
                }
                pending.swap(still);
            }
            std::vector<SampleJob> fallback_jobs;
            for (auto i : pending) fallback_jobs.push_back({detail::request_for(pairs[i], PromptKind::literal), 1, 0.0});
            auto fallback = sampler.sample_many(fallback_jobs);
            for (std::size_t j = 0; j < pending.size(); ++j) found[pending[j]] = fallback[j].front();
            std::size_t next_fallback = 0;
            for (std::size_t i = 0; i < pairs.size(); ++i) {
                auto m = single_sample_meta(found[i]->explanation, params);
                detail::stamp(m, pairs[i], PromptKind::literal);
                if (next_fallback < pending.size() && pending[next_fallback] == i) {
                    m.flags.push_back("oracle_fallback");
                    ++next_fallback;
                }
                out[i].push_back(std::move(m));
            }
            break;
        }
    }
    return out;
}

inline std::vector<MetaNle> select(const PairContext& pair, ExplanationMode mode, const SelectionStrategy& strategy,
                                   Sampler& sampler, const AggregationParams& params) {
    return std::move(select_all({pair}, mode, strategy, sampler, params).front());
}

// ---------------------------------------------------------------------------
// Persistence: one JSON object per line.

inline nlohmann::ordered_json to_json(const MetaNle& m) {
    nlohmann::ordered_json j;
    j["query_id"] = m.query_id;
    j["doc_id"] = m.doc_id;
    j["polarity"] = to_string(m.polarity);
    auto sents = nlohmann::ordered_json::array();
    for (const auto& s : m.sentences) sents.push_back(s.text);
    j["sentences"] = sents;
    j["source_sample_count"] = m.source_sample_count;
    j["params"] = {{"lambda", m.params.lambda}, {"k_l", m.params.k_l}, {"k_s", m.params.k_s}};
    j["flags"] = m.flags;
    return j;
}

inline MetaNle meta_from_json(const nlohmann::json& j) {
    MetaNle m;
    m.query_id = j.at("query_id").get<std::string>();
    m.doc_id = j.at("doc_id").get<std::string>();
    auto pol = parse_polarity(j.at("polarity").get<std::string>());
    if (!pol) throw DataError("unknown polarity " + j.at("polarity").dump());
    m.polarity = *pol;
    for (const auto& s : j.at("sentences")) m.sentences.emplace_back(s.get<std::string>());
    m.source_sample_count = j.at("source_sample_count").get<int>();
    const auto& p = j.at("params");
    m.params = {p.at("lambda").get<double>(), p.at("k_l").get<int>(), p.at("k_s").get<int>()};
    if (j.contains("flags")) m.flags = j.at("flags").get<std::vector<std::string>>();
    return m;
}

inline std::string format_metas(const std::vector<MetaNle>& metas) {
    std::string out;
    for (const auto& m : metas) out += to_json(m).dump() + "\n";
    return out;
}

inline std::vector<MetaNle> parse_metas(std::string_view text, const std::string& source = "metas") {
    std::vector<MetaNle> out;
    util::for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (util::trim(line).empty()) return;
        try {
            out.push_back(meta_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(source, lineno, e.what());
        }
    });
    return out;
}

}  // namespace nlecal
