#pragma once

// Prompt construction, response parsing, the append-only sample cache and the
// bounded-concurrency sampler. Transports (HTTP, mock) plug in underneath.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/error.hpp"
#include "nlecal/textsim.hpp"
#include "nlecal/util.hpp"

namespace nlecal {

enum class PromptKind { literal, conditional_relevant, conditional_nonrelevant, rubric, binary };

inline std::string_view to_string(PromptKind k) {
    switch (k) {
        case PromptKind::literal: return "literal";
        case PromptKind::conditional_relevant: return "conditional_relevant";
        case PromptKind::conditional_nonrelevant: return "conditional_nonrelevant";
        case PromptKind::rubric: return "rubric";
        case PromptKind::binary: return "binary";
    }
    return "literal";
}

inline std::optional<PromptKind> parse_prompt_kind(std::string_view s) {
    for (auto k : {PromptKind::literal, PromptKind::conditional_relevant, PromptKind::conditional_nonrelevant,
                   PromptKind::rubric, PromptKind::binary})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

// Bumped whenever any template text below changes.
inline constexpr std::string_view kPromptTemplateVersion = "nlecal-prompts/1";

inline std::string build_prompt(PromptKind kind, std::string_view query, std::string_view document,
                                std::optional<std::string_view> rubric = std::nullopt) {
    if (kind == PromptKind::rubric && !rubric) throw ConfigError("rubric prompt requires rubric text");
    if (kind != PromptKind::rubric && rubric) throw ConfigError("rubric text given for non-rubric prompt kind");
    std::string tail = "Query: " + std::string(query) + " Document: " + std::string(document) + " Output:";
    switch (kind) {
        case PromptKind::literal:
            return "For the following query and document, judge whether they are relevant or non-relevant, and "
                   "provide an explanation. Output 'Relevant' or 'Nonrelevant'. Do not repeat the content of the "
                   "query or the document. " +
                   tail;
        case PromptKind::conditional_relevant:
            return "For the following query and document, explain why they are relevant. " + tail;
        case PromptKind::conditional_nonrelevant:
            return "For the following query and document, explain why they are nonrelevant. " + tail;
        case PromptKind::binary:
            return "For the following query and document, judge whether they are relevant or nonrelevant. Output "
                   "'Relevant' or 'Nonrelevant' only. " +
                   tail;
        case PromptKind::rubric:
            return std::string(*rubric) +
                   "\n\nUsing the grading rubric above, assign a relevance score to the following query and "
                   "document. Output the score as a single integer. " +
                   tail;
    }
    return tail;
}

// ---------------------------------------------------------------------------
// Response parsing

enum class RelevanceLabel { relevant, nonrelevant, unparsed };

inline std::string_view to_string(RelevanceLabel l) {
    switch (l) {
        case RelevanceLabel::relevant: return "relevant";
        case RelevanceLabel::nonrelevant: return "nonrelevant";
        case RelevanceLabel::unparsed: return "unparsed";
    }
    return "unparsed";
}

inline std::optional<RelevanceLabel> parse_relevance_label(std::string_view s) {
    for (auto l : {RelevanceLabel::relevant, RelevanceLabel::nonrelevant, RelevanceLabel::unparsed})
        if (to_string(l) == s) return l;
    return std::nullopt;
}

struct LiteralParse {
    RelevanceLabel label = RelevanceLabel::unparsed;
    std::string explanation;
    std::size_t label_length = 0;      // bytes of the removed label token
    std::size_t separator_length = 0;  // bytes of punctuation/whitespace removed around it
};

namespace detail {

struct TokenSpan {
    std::size_t begin, end;
    std::string lower;
};

inline std::vector<TokenSpan> token_spans(std::string_view text, std::size_t limit) {
    std::vector<TokenSpan> out;
    std::size_t i = 0;
    while (i < text.size() && out.size() < limit) {
        while (i < text.size() && !is_alnum_ascii(text[i])) ++i;
        std::size_t j = i;
        while (j < text.size() && is_alnum_ascii(text[j])) ++j;
        if (j > i) {
            std::string lower(text.substr(i, j - i));
            for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            out.push_back({i, j, std::move(lower)});
        }
        i = j;
    }
    return out;
}

// Length of the separator run starting at pos: whitespace, ASCII punctuation
// and the UTF-8 en/em dash and ellipsis.
inline std::size_t separator_run(std::string_view s, std::size_t pos) {
    std::size_t i = pos;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        if (std::isspace(c) || std::ispunct(c)) {
            ++i;
        } else if (c == 0xE2 && i + 2 < s.size() && static_cast<unsigned char>(s[i + 1]) == 0x80 &&
                   (static_cast<unsigned char>(s[i + 2]) == 0x93 || static_cast<unsigned char>(s[i + 2]) == 0x94 ||
                    static_cast<unsigned char>(s[i + 2]) == 0xA6)) {
            i += 3;
        } else {
            break;
        }
    }
    return i - pos;
}

}  // namespace detail

// Finds the first standalone "relevant" / "nonrelevant" / "non-relevant"
// (case-insensitive) among the first 10 tokens and removes it along with the
// adjoining separators.
inline LiteralParse parse_literal(std::string_view raw) {
    constexpr std::size_t kScanTokens = 10;
    auto toks = detail::token_spans(raw, kScanTokens + 1);
    std::optional<std::pair<std::size_t, std::size_t>> span;
    RelevanceLabel label = RelevanceLabel::unparsed;
    for (std::size_t t = 0; t < toks.size() && t < kScanTokens; ++t) {
        const auto& tok = toks[t];
        if (tok.lower == "nonrelevant") {
            span = {tok.begin, tok.end};
            label = RelevanceLabel::nonrelevant;
        } else if (tok.lower == "non" && t + 1 < toks.size() && toks[t + 1].lower == "relevant" &&
                   toks[t + 1].begin == tok.end + 1 && raw[tok.end] == '-') {
            span = {tok.begin, toks[t + 1].end};
            label = RelevanceLabel::nonrelevant;
        } else if (tok.lower == "relevant") {
            span = {tok.begin, tok.end};
            label = RelevanceLabel::relevant;
        }
        if (span) break;
    }
    LiteralParse out;
    if (!span) {
        out.explanation = std::string(raw);
        return out;
    }
    out.label = label;
    out.label_length = span->second - span->first;
    std::string_view prefix = raw.substr(0, span->first);
    std::string_view suffix = raw.substr(span->second);
    if (detail::separator_run(prefix, 0) == prefix.size()) {
        out.separator_length += prefix.size();
        prefix = {};
    }
    std::size_t lead = detail::separator_run(suffix, 0);
    out.separator_length += lead;
    suffix.remove_prefix(lead);
    out.explanation = std::string(prefix) + std::string(suffix);
    return out;
}

// First integral number in the text that lies in [0, max_grade].
inline std::optional<int> find_rubric_score(std::string_view raw, int max_grade) {
    std::size_t i = 0;
    while (i < raw.size()) {
        if (!std::isdigit(static_cast<unsigned char>(raw[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < raw.size() && std::isdigit(static_cast<unsigned char>(raw[j]))) ++j;
        bool negative = i > 0 && raw[i - 1] == '-' && (i < 2 || !is_alnum_ascii(raw[i - 2]));
        bool fractional = j + 1 < raw.size() && raw[j] == '.' && std::isdigit(static_cast<unsigned char>(raw[j + 1]));
        bool glued = i > 0 && std::isalpha(static_cast<unsigned char>(raw[i - 1]));
        if (fractional) {
            j += 1;
            while (j < raw.size() && std::isdigit(static_cast<unsigned char>(raw[j]))) ++j;
        } else if (!negative && !glued && j - i <= 9) {
            int v = std::stoi(std::string(raw.substr(i, j - i)));
            if (v >= 0 && v <= max_grade) return v;
        }
        i = j;
    }
    return std::nullopt;
}

inline int parse_rubric_score(std::string_view raw, int max_grade) {
    if (auto v = find_rubric_score(raw, max_grade)) return *v;
    throw DataError("unparseable rubric score: no integer in [0," + std::to_string(max_grade) + "] in response");
}

// ---------------------------------------------------------------------------
// Samples and cache

struct NleSample {
    std::string query_id;
    std::string doc_id;
    PromptKind kind = PromptKind::literal;
    int sample_index = 0;
    std::string raw_text;
    RelevanceLabel predicted_label = RelevanceLabel::unparsed;
    std::string explanation;
    double temperature = 0.0;
    std::string model_id;
    bool operator==(const NleSample&) const = default;
};

inline nlohmann::ordered_json to_json(const NleSample& s) {
    nlohmann::ordered_json j;
    j["query_id"] = s.query_id;
    j["doc_id"] = s.doc_id;
    j["kind"] = to_string(s.kind);
    j["sample_index"] = s.sample_index;
    j["raw_text"] = s.raw_text;
    j["predicted_label"] = to_string(s.predicted_label);
    j["explanation"] = s.explanation;
    j["temperature"] = s.temperature;
    j["model_id"] = s.model_id;
    return j;
}

inline NleSample sample_from_json(const nlohmann::json& j) {
    NleSample s;
    s.query_id = j.at("query_id").get<std::string>();
    s.doc_id = j.at("doc_id").get<std::string>();
    auto kind = parse_prompt_kind(j.at("kind").get<std::string>());
    if (!kind) throw DataError("unknown prompt kind " + j.at("kind").dump());
    s.kind = *kind;
    s.sample_index = j.at("sample_index").get<int>();
    s.raw_text = j.at("raw_text").get<std::string>();
    auto label = parse_relevance_label(j.at("predicted_label").get<std::string>());
    if (!label) throw DataError("unknown predicted_label " + j.at("predicted_label").dump());
    s.predicted_label = *label;
    s.explanation = j.at("explanation").get<std::string>();
    s.temperature = j.at("temperature").get<double>();
    s.model_id = j.at("model_id").get<std::string>();
    return s;
}

// Label/explanation split of a raw generation for the given prompt kind.
inline NleSample make_sample(std::string qid, std::string did, PromptKind kind, int index, std::string raw,
                             double temperature, std::string model) {
    NleSample s{std::move(qid), std::move(did), kind, index, std::move(raw), RelevanceLabel::unparsed, {}, temperature,
                std::move(model)};
    if (kind == PromptKind::literal || kind == PromptKind::binary) {
        auto p = parse_literal(s.raw_text);
        s.predicted_label = p.label;
        s.explanation = std::move(p.explanation);
    } else {
        s.explanation = s.raw_text;
    }
    return s;
}

using SampleKey = std::tuple<std::string, std::string, PromptKind, std::string, std::string, int>;

inline SampleKey sample_key(const std::string& qid, const std::string& did, PromptKind kind, const std::string& model,
                            double temperature, int index) {
    return {qid, did, kind, model, util::format_double(temperature), index};
}

inline SampleKey sample_key(const NleSample& s) {
    return sample_key(s.query_id, s.doc_id, s.kind, s.model_id, s.temperature, s.sample_index);
}

// Append-only JSON Lines cache with a single serialized writer. A truncated
// final line (interrupted append) is ignored on load.
class SampleCache {
public:
    SampleCache() = default;  // in-memory only
    explicit SampleCache(std::string path) : path_(std::move(path)) { load(); }

    std::optional<NleSample> find(const SampleKey& key) const {
        std::lock_guard lock(mu_);
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    void append(const NleSample& s) {
        std::lock_guard lock(mu_);
        auto key = sample_key(s);
        if (entries_.count(key)) return;
        if (!path_.empty()) {
            std::ofstream out(path_, std::ios::binary | std::ios::app);
            if (!out) throw DataError("cannot append to sample cache " + path_);
            out << to_json(s).dump() << '\n';
            out.flush();
            if (!out) throw DataError("write failed for sample cache " + path_);
        }
        entries_.emplace(std::move(key), s);
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return entries_.size();
    }

    std::vector<NleSample> all() const {
        std::lock_guard lock(mu_);
        std::vector<NleSample> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(v);
        return out;
    }

    const std::string& path() const noexcept { return path_; }

private:
    void load() {
        std::ifstream in(path_, std::ios::binary);
        if (!in) return;
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        bool complete_tail = text.empty() || text.back() == '\n';
        std::size_t nlines = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) + (complete_tail ? 0 : 1);
        util::for_each_line(text, [&](std::size_t lineno, std::string_view line) {
            if (util::trim(line).empty()) return;
            try {
                auto s = sample_from_json(nlohmann::json::parse(line));
                entries_.emplace(sample_key(s), std::move(s));
            } catch (const std::exception& e) {
                if (lineno == nlines && !complete_tail) return;
                throw ParseError(path_, lineno, std::string("corrupt sample cache entry: ") + e.what());
            }
        });
    }

    std::string path_;
    mutable std::mutex mu_;
    std::map<SampleKey, NleSample> entries_;
};

// ---------------------------------------------------------------------------
// Transport and sampler

struct SamplerConfig {
    std::string endpoint_url = "http://127.0.0.1:8000/v1/chat/completions";
    std::string model_id = "llama-2-13b-chat";
    double temperature = 0.7;
    int max_output_tokens = 256;
    double request_timeout = 60.0;  // seconds
    int max_in_flight = 4;
    int retry_budget = 3;

    void validate() const {
        if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
        if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
        if (retry_budget < 0) throw ConfigError("retry_budget must be >= 0");
        if (max_output_tokens < 1) throw ConfigError("max_output_tokens must be >= 1");
    }
};

// One chat-completion call. query/document travel alongside the prompt so
// mock transports can synthesize content; real transports send only the prompt.
struct ChatRequest {
    std::string model;
    std::string prompt;
    double temperature = 0.0;
    int max_tokens = 256;
    double timeout = 60.0;
    int sample_index = 0;
    PromptKind kind = PromptKind::literal;
    std::string query;
    std::string document;
};

class Transport {
public:
    virtual ~Transport() = default;
    // Returns one generation. Throws TransportError / EndpointError.
    virtual std::string complete(const ChatRequest& req) = 0;
};

struct SampleRequest {
    std::string query_id;
    std::string doc_id;
    PromptKind kind = PromptKind::literal;
    std::string prompt;
    std::string query;
    std::string document;
};

struct SampleJob {
    SampleRequest request;
    int n = 1;
    std::optional<double> temperature;  // overrides SamplerConfig::temperature
};

class Sampler {
public:
    Sampler(SamplerConfig config, std::shared_ptr<Transport> transport, std::shared_ptr<SampleCache> cache = nullptr)
        : config_(std::move(config)), transport_(std::move(transport)),
          cache_(cache ? std::move(cache) : std::make_shared<SampleCache>()) {
        config_.validate();
    }

    const SamplerConfig& config() const noexcept { return config_; }
    SampleCache& cache() noexcept { return *cache_; }
    std::size_t network_calls() const noexcept { return network_calls_.load(); }

    std::vector<NleSample> sample(const SampleRequest& req, int n, std::optional<double> temperature = std::nullopt) {
        return std::move(sample_many({SampleJob{req, n, temperature}}).front());
    }

    // Serves each job from the cache where possible; the misses are issued
    // with at most max_in_flight concurrent transport calls.
    std::vector<std::vector<NleSample>> sample_many(const std::vector<SampleJob>& jobs) {
        std::vector<std::vector<NleSample>> results(jobs.size());
        struct Miss {
            std::size_t job;
            int index;
        };
        std::vector<Miss> misses;
        for (std::size_t j = 0; j < jobs.size(); ++j) {
            const auto& job = jobs[j];
            double temp = job.temperature.value_or(config_.temperature);
            if (job.n < 1) throw UsageError("sample count must be >= 1");
            if (temp < 0.0) throw UsageError("temperature must be >= 0");
            if (temp == 0.0 && job.n != 1) throw UsageError("greedy sampling (temperature 0) yields exactly one sample");
            results[j].resize(static_cast<std::size_t>(job.n));
            for (int i = 0; i < job.n; ++i) {
                auto hit = cache_->find(sample_key(job.request.query_id, job.request.doc_id, job.request.kind,
                                                   config_.model_id, temp, i));
                if (hit)
                    results[j][static_cast<std::size_t>(i)] = std::move(*hit);
                else
                    misses.push_back({j, i});
            }
        }
        if (misses.empty()) return results;

        std::atomic<std::size_t> next{0};
        std::atomic<std::size_t> completed{0};
        std::atomic<bool> failed{false};
        std::mutex err_mu;
        std::exception_ptr first_error;

        auto worker = [&] {
            for (;;) {
                if (failed.load()) return;
                std::size_t m = next.fetch_add(1);
                if (m >= misses.size()) return;
                const auto& miss = misses[m];
                const auto& job = jobs[miss.job];
                double temp = job.temperature.value_or(config_.temperature);
                try {
                    ChatRequest creq{config_.model_id,      job.request.prompt, temp,
                                     config_.max_output_tokens, config_.request_timeout, miss.index,
                                     job.request.kind,       job.request.query,  job.request.document};
                    std::string raw = call_with_retry(creq);
                    auto s = make_sample(job.request.query_id, job.request.doc_id, job.request.kind, miss.index,
                                         std::move(raw), temp, config_.model_id);
                    cache_->append(s);
                    results[miss.job][static_cast<std::size_t>(miss.index)] = std::move(s);
                    completed.fetch_add(1);
                } catch (...) {
                    std::lock_guard lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    failed.store(true);
                    return;
                }
            }
        };

        std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(config_.max_in_flight), misses.size());
        if (nthreads == 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            pool.reserve(nthreads);
            for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
            for (auto& th : pool) th.join();
        }
        if (first_error) {
            std::size_t done = completed.load();
            try {
                std::rethrow_exception(first_error);
            } catch (const EndpointError& e) {
                throw EndpointError(std::string(e.what()) + "; " + std::to_string(done) + " samples completed", e.status(), done);
            } catch (const TransportError& e) {
                throw TransportError(std::string(e.what()) + "; " + std::to_string(done) + " samples completed", done);
            }
        }
        return results;
    }

private:
    static bool retryable(const TransportError& e) {
        if (auto* ee = dynamic_cast<const EndpointError*>(&e)) return ee->status() == 429 || ee->status() >= 500;
        return dynamic_cast<const ProtocolError*>(&e) == nullptr;
    }

    std::string call_with_retry(const ChatRequest& req) {
        for (int attempt = 0;; ++attempt) {
            try {
                network_calls_.fetch_add(1);
                return transport_->complete(req);
            } catch (const TransportError& e) {
                if (attempt >= config_.retry_budget || !retryable(e)) throw;
            }
        }
    }

    SamplerConfig config_;
    std::shared_ptr<Transport> transport_;
    std::shared_ptr<SampleCache> cache_;
    std::atomic<std::size_t> network_calls_{0};
};

inline std::vector<std::string> explanations(const std::vector<NleSample>& samples) {
    std::vector<std::string> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.explanation);
    return out;
}

// ---------------------------------------------------------------------------
// Mock transports

// Returns the scripted strings in order, cycling when exhausted.
class ScriptedTransport : public Transport {
public:
    explicit ScriptedTransport(std::vector<std::string> script) : script_(std::move(script)) {
        if (script_.empty()) throw UsageError("scripted transport needs at least one response");
    }
    std::string complete(const ChatRequest&) override {
        std::size_t i = calls_.fetch_add(1);
        return script_[i % script_.size()];
    }
    std::size_t calls() const noexcept { return calls_.load(); }

private:
    std::vector<std::string> script_;
    std::atomic<std::size_t> calls_{0};
};

// Deterministic synthetic LLM. The response is a pure function of (seed,
// prompt, sample_index, temperature): relevance leans on query-term overlap
// with the document and sampling temperature controls how varied the
// explanation sentences are.
class SyntheticTransport : public Transport {
public:
    explicit SyntheticTransport(std::uint64_t seed = 0) : seed_(seed) {}

    std::string complete(const ChatRequest& req) override {
        std::uint64_t h = util::mix64(util::fnv1a64(req.prompt, seed_) ^ util::mix64(static_cast<std::uint64_t>(req.sample_index) + 1));
        if (req.temperature == 0.0) h = util::mix64(util::fnv1a64(req.prompt, seed_));
        std::mt19937_64 rng(h);
        std::uniform_real_distribution<double> unit(0.0, 1.0);

        auto qtok = tokenize(req.query);
        auto dtok = tokenize(req.document);
        std::size_t hit = 0;
        for (const auto& t : qtok)
            if (std::find(dtok.begin(), dtok.end(), t) != dtok.end()) ++hit;
        double overlap = qtok.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(qtok.size());
        std::string topic = qtok.empty() ? std::string("the topic") : qtok.front();
        std::string cue = dtok.empty() ? std::string("content") : dtok[static_cast<std::size_t>(rng() % dtok.size())];

        double jitter = req.temperature * (unit(rng) - 0.5);
        bool relevant = overlap + jitter >= 0.5;

        static const char* kRel[] = {
            "The document directly addresses the query about {t}.",
            "It discusses {c} which is central to {t}.",
            "The passage provides specific details on {t}.",
            "Several key terms of the query appear in the document.",
            "The text answers the information need behind {t}.",
            "Its discussion of {c} matches what the user is looking for.",
        };
        static const char* kNon[] = {
            "The document does not discuss {t}.",
            "It focuses on {c} instead of the query topic.",
            "The passage is off-topic for {t}.",
            "None of the main query terms are addressed in depth.",
            "The text would not satisfy a user searching for {t}.",
            "Its mention of {c} is incidental to the query.",
        };
        auto fill = [&](std::string s) {
            for (auto [key, val] : {std::pair<std::string_view, const std::string*>{"{t}", &topic}, {"{c}", &cue}}) {
                for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key))
                    s.replace(pos, key.size(), *val);
            }
            return s;
        };
        auto pick = [&](const char* const* pool, int count) {
            std::string out;
            int first = req.temperature == 0.0 ? 0 : static_cast<int>(rng() % 6);
            for (int i = 0; i < count; ++i) {
                int idx = req.temperature == 0.0 ? i : (first + static_cast<int>(rng() % 6)) % 6;
                if (!out.empty()) out += ' ';
                out += fill(pool[idx]);
            }
            return out;
        };
        int nsent = 1 + static_cast<int>(rng() % 2);

        switch (req.kind) {
            case PromptKind::literal:
                if (req.temperature > 0.0 && unit(rng) < 0.05) return "Sure, I can help with that. " + pick(kRel, 1);
                return relevant ? "Relevant. " + pick(kRel, nsent) : "Nonrelevant. " + pick(kNon, nsent);
            case PromptKind::binary:
                if (req.temperature > 0.0 && unit(rng) < 0.05) return "Yes, I can help you with this request.";
                return relevant ? "Relevant" : "Nonrelevant";
            case PromptKind::conditional_relevant: return pick(kRel, nsent);
            case PromptKind::conditional_nonrelevant: return pick(kNon, nsent);
            case PromptKind::rubric: {
                int grade = static_cast<int>(std::lround(std::clamp(overlap + jitter, 0.0, 1.0) * 3.0));
                return "Score: " + std::to_string(grade);
            }
        }
        return {};
    }

private:
    std::uint64_t seed_;
};

}  // namespace nlecal
