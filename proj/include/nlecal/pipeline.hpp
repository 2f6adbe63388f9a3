#pragma once

// Stage orchestration. Every stage writes one artifact next to a `.stamp`
// file holding the content hash of its inputs, so a rerun with unchanged
// inputs reads the artifact back instead of recomputing it.
//
//   ingest -> [generate -> aggregate] -> [train] -> score -> [calibrate]
//          -> evaluate -> qpp -> report

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/aggregate.hpp"
#include "nlecal/calibrate.hpp"
#include "nlecal/config.hpp"
#include "nlecal/corpus.hpp"
#include "nlecal/error.hpp"
#include "nlecal/http.hpp"
#include "nlecal/llm.hpp"
#include "nlecal/losses.hpp"
#include "nlecal/metrics.hpp"
#include "nlecal/qpp.hpp"
#include "nlecal/scoring_client.hpp"
#include "nlecal/textsim.hpp"
#include "nlecal/util.hpp"

namespace nlecal {

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"ingest", "generate", "aggregate", "train", "score",
                                                   "calibrate", "evaluate", "qpp", "report"};
    return names;
}

// Stages a method runs, in order.
inline std::vector<std::string> stages_for(const ExperimentConfig& c) {
    std::vector<std::string> s = {"ingest"};
    switch (c.method) {
        case Method::nc: s.insert(s.end(), {"score"}); break;
        case Method::pc: s.insert(s.end(), {"score", "calibrate"}); break;
        case Method::fc:
            if (c.scorer == ScorerBackend::builtin_linear) s.push_back("train");
            s.push_back("score");
            break;
        case Method::pr: s.insert(s.end(), {"generate", "score"}); break;
        case Method::pl: s.insert(s.end(), {"generate", "score", "calibrate"}); break;
        case Method::nle_literal:
        case Method::nle_conditional:
            s.insert(s.end(), {"generate", "aggregate"});
            if (c.scorer == ScorerBackend::builtin_linear) s.push_back("train");
            s.push_back("score");
            break;
    }
    if (c.platt && s.back() != "calibrate") s.push_back("calibrate");
    s.insert(s.end(), {"evaluate", "qpp", "report"});
    return s;
}

struct StageRecord {
    std::string name;
    std::string label;  // name plus what the stage did for this method
    bool reused = false;
};

struct SeedResult {
    std::uint64_t seed = 0;
    EvalReport eval;
    QppResult qpp;
    std::optional<PlattParams> platt;
    std::optional<int> best_epoch;
};

struct PipelineResult {
    ExperimentConfig config;
    std::vector<StageRecord> stages;
    std::vector<SeedResult> seeds;
    std::map<std::string, std::size_t> flag_counts;
    std::size_t network_calls = 0;
    bool complete = false;

    // Stage labels in execution order with per-seed repeats collapsed.
    std::vector<std::string> stage_sequence() const {
        std::vector<std::string> out;
        for (const auto& s : stages)
            if (std::find(out.begin(), out.end(), s.label) == out.end()) out.push_back(s.label);
        return out;
    }
};

struct PipelineOptions {
    std::function<void(const std::string&)> log;
    std::shared_ptr<Transport> transport;   // replaces the configured LLM backend
    ExternalScorer::Poster scorer_poster;   // replaces HTTP for the external scorer
    std::optional<std::string> stop_after;  // a stage name
};

namespace detail {

inline std::string content_hash(std::initializer_list<std::string_view> parts) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto p : parts) {
        h = util::fnv1a64(p, h);
        h = util::fnv1a64("\x1f", h);
    }
    return util::hex64(h);
}

// "key=value;" for every resolved key equal to one of `keys` or inside a
// "prefix." group named by a key ending in '.'.
inline std::string config_slice(const ExperimentConfig& c, std::initializer_list<std::string_view> keys) {
    std::string out;
    for (const auto& [k, v] : c.values)
        for (auto want : keys) {
            bool match = want.back() == '.' ? k.rfind(want, 0) == 0 : k == want;
            if (match) {
                out += k + "=" + v + ";";
                break;
            }
        }
    return out;
}

inline void write_atomic(const std::filesystem::path& p, std::string_view content) {
    auto tmp = p;
    tmp += ".tmp";
    util::write_file(tmp.string(), content);
    std::error_code ec;
    std::filesystem::rename(tmp, p, ec);
    if (ec) throw DataError("cannot move " + tmp.string() + " into place: " + ec.message());
}

inline bool write_if_changed(const std::filesystem::path& p, std::string_view content) {
    std::error_code ec;
    if (std::filesystem::exists(p, ec)) {
        if (util::read_file(p.string()) == content) return false;
    }
    write_atomic(p, content);
    return true;
}

class ArtifactStore {
public:
    explicit ArtifactStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

    const std::filesystem::path& dir() const noexcept { return dir_; }

    // Returns the artifact for `hash`, producing and committing it when
    // missing or stale. `reused` reports which path was taken.
    template <class Produce>
    std::string get(const std::string& name, const std::string& hash, bool& reused, Produce&& produce) {
        auto path = dir_ / name;
        auto stamp = dir_ / (name + ".stamp");
        std::error_code ec;
        if (std::filesystem::exists(path, ec) && std::filesystem::exists(stamp, ec) && util::read_file(stamp.string()) == hash + "\n") {
            reused = true;
            return util::read_file(path.string());
        }
        reused = false;
        std::string content = produce();
        std::filesystem::create_directories(path.parent_path(), ec);
        write_atomic(path, content);
        write_atomic(stamp, hash + "\n");
        return content;
    }

private:
    std::filesystem::path dir_;
};

inline std::string default_rubric(const Scale& scale) {
    std::string r = "Grading rubric: score each document on an integer scale from 0 to " + std::to_string(scale.max_grade) +
                    ". 0 means the document is unrelated to the query";
    if (scale.max_grade >= 2) r += "; intermediate grades mean partial relevance";
    r += "; " + std::to_string(scale.max_grade) + " means the document fully answers the query.";
    return r;
}

// Two blocks for the fine-tuned baseline: document tokens and the tokens it
// shares with the query.
inline SparseVector query_doc_features(const std::string& query, const std::string& doc, const FeaturizerSpec& spec) {
    auto qt = tokenize(query);
    std::set<std::string> qset(qt.begin(), qt.end());
    std::string shared;
    for (const auto& t : tokenize(doc))
        if (qset.count(t)) shared += t + " ";
    auto out = featurize_text(doc, spec, 0);
    auto block = featurize_text(shared, spec, spec.dimension);
    out.insert(out.end(), block.begin(), block.end());
    return out;
}

inline std::vector<RunRecord> filter_run(const std::vector<RunRecord>& run, const std::set<std::string>& qids) {
    std::vector<RunRecord> out;
    for (const auto& r : run)
        if (qids.count(r.query_id)) out.push_back(r);
    return out;
}

inline std::map<PairKey, int> split_labels(const JudgedCollection& c, Split s) {
    std::map<PairKey, int> out;
    for (const auto& [k, v] : c.labels)
        if (c.query_split.at(k.first) == s) out.emplace(k, v);
    return out;
}

inline std::set<std::string> split_queries(const JudgedCollection& c, Split s) {
    auto ids = c.query_ids(s);
    return {ids.begin(), ids.end()};
}

inline std::map<PairKey, double> scores_from_json(const nlohmann::json& j) {
    std::map<PairKey, double> out;
    for (const auto& e : j) out[{e.at(0).get<std::string>(), e.at(1).get<std::string>()}] = e.at(2).get<double>();
    return out;
}

struct Variant {
    std::vector<std::uint64_t> seeds;  // seeds sharing this computation
    std::filesystem::path dir;
    std::string label;  // "" for the shared variant, "seed N" otherwise
    std::string score_input_hash;
    std::string run_hash;
    std::vector<RunRecord> run;
    std::optional<Scorer> scorer;
    std::optional<int> best_epoch;
    std::optional<PlattParams> platt;
    std::optional<EvalReport> eval;
    std::optional<QppResult> qpp;
};

class Pipeline {
public:
    Pipeline(ExperimentConfig config, PipelineOptions options)
        : c_(std::move(config)), opt_(std::move(options)), store_(c_.output_dir) {
        res_.config = c_;
        stages_ = stages_for(c_);
        if (opt_.stop_after) {
            if (std::find(stage_names().begin(), stage_names().end(), *opt_.stop_after) == stage_names().end())
                throw UsageError("unknown stage '" + *opt_.stop_after + "'");
            if (std::find(stages_.begin(), stages_.end(), *opt_.stop_after) == stages_.end())
                throw UsageError("method " + std::string(to_string(c_.method)) + " has no " + *opt_.stop_after + " stage");
        }
    }

    PipelineResult run() {
        std::error_code ec;
        std::filesystem::create_directories(c_.output_dir, ec);
        if (ec) throw DataError("cannot create output directory " + c_.output_dir + ": " + ec.message());
        setup_variants();
        for (const auto& stage : stages_) {
            if (stage == "report") break;
            guarded(stage, [&] { run_stage(stage); });
            if (opt_.stop_after == stage) return finish(false);
        }
        return finish(true);
    }

private:
    bool seed_dependent() const {
        bool trains = c_.method == Method::fc || c_.method == Method::nle_literal || c_.method == Method::nle_conditional;
        return trains && c_.scorer == ScorerBackend::builtin_linear;
    }

    void setup_variants() {
        if (seed_dependent()) {
            for (auto s : c_.seeds) {
                Variant v;
                v.seeds = {s};
                v.dir = "seed-" + std::to_string(s);
                v.label = "seed " + std::to_string(s);
                variants_.push_back(std::move(v));
            }
        } else {
            Variant v;
            v.seeds = c_.seeds;
            v.dir = ".";
            variants_.push_back(std::move(v));
        }
    }

    template <class F>
    void guarded(const std::string& stage, F&& f) {
        try {
            f();
        } catch (const Error& e) {
            throw Error("stage " + stage + ": " + e.what(), e.exit_code());
        } catch (const std::filesystem::filesystem_error& e) {
            throw Error("stage " + stage + ": " + e.what(), ExitCode::data);
        } catch (const nlohmann::json::exception& e) {
            throw Error("stage " + stage + ": malformed artifact: " + e.what(), ExitCode::data);
        }
    }

    void record(const std::string& name, const std::string& detail, bool reused, const std::string& variant = "") {
        StageRecord r{name, detail.empty() ? name : name + "(" + detail + ")", reused};
        if (opt_.log)
            opt_.log(r.label + (variant.empty() ? "" : " [" + variant + "]") + (reused ? ": up to date" : ": done"));
        res_.stages.push_back(std::move(r));
    }

    std::string path_in(const Variant& v, const std::string& name) const {
        return v.dir == "." ? name : (v.dir / name).string();
    }

    void run_stage(const std::string& stage) {
        if (stage == "ingest") return ingest();
        if (stage == "generate") return generate();
        if (stage == "aggregate") return aggregate_stage();
        if (stage == "train") {
            for (auto& v : variants_) train_stage(v);
            return;
        }
        if (stage == "score") {
            for (auto& v : variants_) score_stage(v);
            return;
        }
        if (stage == "calibrate") {
            for (auto& v : variants_) calibrate_stage(v);
            return;
        }
        if (stage == "evaluate") {
            for (auto& v : variants_) evaluate_stage(v);
            return;
        }
        if (stage == "qpp") {
            for (auto& v : variants_) qpp_stage(v);
            return;
        }
    }

    // ---- ingest ---------------------------------------------------------

    void ingest() {
        std::optional<Scale> scale;
        if (c_.scale_max) scale = Scale{*c_.scale_max};
        const std::string source = util::read_file(c_.pairs_path);
        bool reused = false;
        auto text = store_.get("collection.jsonl", content_hash({source, config_slice(c_, {"scale_max"})}), reused,
                               [&] { return format_pairs(parse_pairs(source, scale, c_.pairs_path)); });
        coll_ = parse_pairs(text, scale, "collection.jsonl");
        if (coll_.query_ids(Split::test).empty()) throw DataError("collection has no test queries");
        ingest_hash_ = content_hash({text});
        std::string detail = "pairs";
        if (!c_.run_file.empty()) {
            run_text_ = util::read_file(c_.run_file);
            parse_run(run_text_, c_.run_file);
            detail += "+run";
        }
        record("ingest", detail, reused);
    }

    // ---- LLM stages -------------------------------------------------------

    Sampler& sampler() {
        if (!sampler_) {
            std::shared_ptr<Transport> t = opt_.transport;
            if (!t) {
                if (c_.llm_backend == LlmBackend::mock)
                    t = std::make_shared<SyntheticTransport>(c_.mock_seed);
                else
                    t = std::make_shared<HttpChatTransport>(c_.sampler.endpoint_url);
            }
            auto cache = std::make_shared<SampleCache>((std::filesystem::path(c_.output_dir) / "samples.jsonl").string());
            sampler_ = std::make_unique<Sampler>(c_.sampler, std::move(t), std::move(cache));
        }
        return *sampler_;
    }

    std::vector<PairKey> pairs_in(std::initializer_list<Split> splits) const {
        std::vector<PairKey> out;
        for (const auto& [k, v] : coll_.labels)
            if (std::find(splits.begin(), splits.end(), coll_.query_split.at(k.first)) != splits.end()) out.push_back(k);
        return out;
    }

    std::string llm_slice() const {
        return config_slice(c_, {"method", "llm.backend", "llm.endpoint", "llm.model", "llm.temperature", "llm.max_tokens",
                                 "llm.mock_seed"});
    }

    std::vector<PairContext> contexts(const std::vector<PairKey>& keys) const {
        std::vector<PairContext> out;
        for (const auto& k : keys) out.push_back({k.first, k.second, coll_.queries.at(k.first), coll_.docs.at(k), coll_.labels.at(k)});
        return out;
    }

    ExplanationMode mode() const {
        return c_.method == Method::nle_conditional ? ExplanationMode::conditional : ExplanationMode::literal;
    }

    void generate() {
        const std::size_t calls_before = sampler_ ? sampler_->network_calls() : 0;
        if (c_.method == Method::pr) {
            auto keys = pairs_in({Split::test});
            const std::string rubric = c_.pr_rubric.empty() ? default_rubric(coll_.scale) : c_.pr_rubric;
            bool reused = false;
            generated_ = store_.get("generations.jsonl", content_hash({ingest_hash_, llm_slice(), rubric}), reused, [&] {
                std::vector<SampleJob> jobs;
                for (const auto& k : keys)
                    jobs.push_back({{k.first, k.second, PromptKind::rubric,
                                     build_prompt(PromptKind::rubric, coll_.queries.at(k.first), coll_.docs.at(k), rubric),
                                     coll_.queries.at(k.first), coll_.docs.at(k)},
                                    1,
                                    0.0});
                std::string out;
                for (const auto& r : sampler().sample_many(jobs)) out += to_json(r.front()).dump() + "\n";
                return out;
            });
            generate_hash_ = content_hash({generated_});
            record("generate", "rubric greedy x1", reused);
        } else if (c_.method == Method::pl) {
            auto keys = pairs_in({Split::train, Split::test});
            bool reused = false;
            generated_ = store_.get("generations.jsonl",
                                    content_hash({ingest_hash_, llm_slice(), config_slice(c_, {"pl.samples"})}), reused, [&] {
                                        std::vector<SampleJob> jobs;
                                        for (const auto& k : keys) {
                                            const auto& q = coll_.queries.at(k.first);
                                            const auto& d = coll_.docs.at(k);
                                            jobs.push_back({{k.first, k.second, PromptKind::binary,
                                                             build_prompt(PromptKind::binary, q, d), q, d},
                                                            c_.pl_samples,
                                                            std::nullopt});
                                        }
                                        std::string out;
                                        for (const auto& r : sampler().sample_many(jobs))
                                            for (const auto& s : r) out += to_json(s).dump() + "\n";
                                        return out;
                                    });
            generate_hash_ = content_hash({generated_});
            record("generate", "binary x" + std::to_string(c_.pl_samples), reused);
        } else {
            // NLE methods: sampling and aggregation are one selection pass;
            // the metas are committed by the aggregate stage.
            meta_hash_ = content_hash({ingest_hash_, llm_slice(), config_slice(c_, {"agg.", "selection", "selection."})});
            gen_detail_ = std::string(mode() == ExplanationMode::literal ? "literal" : "conditional") + " " +
                          std::string(to_string(c_.selection.kind));
            bool fresh = has_fresh("metas.jsonl", meta_hash_);
            if (!fresh) {
                auto keys = pairs_in({Split::train, Split::validation, Split::test});
                auto strategy = c_.selection;
                if (strategy.kind == SelectionKind::oracle && !strategy.binarization_threshold)
                    strategy.binarization_threshold = default_binarization_threshold(coll_.scale.max_grade);
                auto selected = select_all(contexts(keys), mode(), strategy, sampler(), c_.aggregation);
                for (auto& group : selected)
                    for (auto& m : group) fresh_metas_.push_back(std::move(m));
            }
            record("generate", gen_detail_, fresh);
        }
        if (sampler_) res_.network_calls += sampler_->network_calls() - calls_before;
    }

    bool has_fresh(const std::string& name, const std::string& hash) const {
        auto path = store_.dir() / name;
        auto stamp = store_.dir() / (name + ".stamp");
        std::error_code ec;
        return std::filesystem::exists(path, ec) && std::filesystem::exists(stamp, ec) &&
               util::read_file(stamp.string()) == hash + "\n";
    }

    void aggregate_stage() {
        bool reused = false;
        auto text = store_.get("metas.jsonl", meta_hash_, reused, [&] { return format_metas(fresh_metas_); });
        fresh_metas_.clear();
        for (auto& m : parse_metas(text, "metas.jsonl")) {
            for (const auto& f : m.flags) ++res_.flag_counts[f];
            metas_[{m.query_id, m.doc_id}].push_back(std::move(m));
        }
        for (auto& [k, group] : metas_)
            std::sort(group.begin(), group.end(), [](const MetaNle& a, const MetaNle& b) { return a.polarity < b.polarity; });
        meta_hash_ = content_hash({text});
        record("aggregate", "lambda=" + c_.values.at("agg.lambda") + " k_l=" + c_.values.at("agg.k_l") +
                                " k_s=" + c_.values.at("agg.k_s"),
               reused);
    }

    // ---- train / score -----------------------------------------------------

    FeaturizerSpec features_for(std::uint64_t seed) const {
        auto f = c_.features;
        f.seed = c_.features.seed + seed;
        return f;
    }

    void train_stage(Variant& v) {
        const std::uint64_t seed = v.seeds.front();
        auto spec = features_for(seed);
        TrainHyper hyper = c_.train;
        hyper.seed = seed;
        const bool fc = c_.method == Method::fc;
        const std::string upstream = fc ? ingest_hash_ : meta_hash_;
        const std::string hash =
            content_hash({upstream, config_slice(c_, {"loss", "loss.", "train.", "features."}), std::to_string(seed)});
        bool reused = false;
        auto text = store_.get(path_in(v, "scorer.json"), hash, reused, [&] {
            TrainResult tr;
            if (fc) {
                std::map<PairKey, SparseVector> feats;
                for (const auto& [k, doc] : coll_.docs)
                    if (coll_.query_split.at(k.first) != Split::test)
                        feats.emplace(k, query_doc_features(coll_.queries.at(k.first), doc, spec));
                tr = train_features(coll_, feats, ScorerMode::conditional_pair, spec, c_.loss, hyper);
            } else {
                std::map<PairKey, std::vector<MetaNle>> train_metas;
                for (const auto& [k, m] : metas_)
                    if (coll_.query_split.at(k.first) != Split::test) train_metas.emplace(k, m);
                tr = train(coll_, train_metas, scorer_mode(), spec, c_.loss, hyper);
            }
            nlohmann::ordered_json j;
            j["inputs"] = fc ? "query-document text" : "meta explanations";
            j["best_epoch"] = tr.best_epoch;
            j["train_loss"] = tr.train_loss;
            j["validation_loss"] = tr.validation_loss;
            j["scorer"] = to_json(tr.scorer);
            return j.dump() + "\n";
        });
        auto j = nlohmann::json::parse(text);
        v.scorer = scorer_from_json(j.at("scorer"));
        v.best_epoch = j.at("best_epoch").get<int>();
        v.score_input_hash = content_hash({text});
        record("train", std::string(fc ? "builtin query-doc " : "builtin meta-nle ") + std::string(to_string(c_.loss.type)),
               reused, v.label);
    }

    ScorerMode scorer_mode() const {
        return c_.method == Method::nle_conditional ? ScorerMode::conditional_pair : ScorerMode::literal_single;
    }

    ExternalScorer external() const {
        if (opt_.scorer_poster) return ExternalScorer(opt_.scorer_poster, c_.sampler.retry_budget, c_.scorer_batch_size);
        return ExternalScorer(c_.scorer_endpoint, c_.scorer_timeout, c_.sampler.retry_budget, c_.scorer_batch_size);
    }

    std::string score_detail() const {
        const bool ext = c_.scorer == ScorerBackend::external_http;
        switch (c_.method) {
            case Method::nc:
            case Method::pc: return c_.run_file.empty() ? "external query-doc" : "precomputed run";
            case Method::fc: return ext ? "external fine-tuned" : "builtin query-doc";
            case Method::pr: return "rubric parse";
            case Method::pl: return "pl confidence";
            case Method::nle_literal:
            case Method::nle_conditional: return ext ? "external meta-nle" : "builtin meta-nle";
        }
        return "";
    }

    // Scores every pair the later stages need, keyed by pair.
    std::map<PairKey, double> compute_scores(Variant& v) {
        std::map<PairKey, double> scores;
        const bool ext = c_.scorer == ScorerBackend::external_http;
        auto with_external = [&](const std::vector<PairKey>& keys, auto&& item_for) {
            std::vector<ScoreItem> items;
            for (std::size_t i = 0; i < keys.size(); ++i) items.push_back(item_for(std::to_string(i), keys[i]));
            auto ext_scorer = external();
            auto s = ext_scorer.score(items);
            res_.network_calls += ext_scorer.network_calls();
            for (std::size_t i = 0; i < keys.size(); ++i) scores[keys[i]] = s[i];
        };
        switch (c_.method) {
            case Method::nc:
            case Method::pc:
            case Method::fc:
                if (ext) {
                    with_external(pairs_in({Split::train, Split::validation, Split::test}), [&](std::string id, const PairKey& k) {
                        return ScoreItem{std::move(id), coll_.queries.at(k.first), coll_.docs.at(k)};
                    });
                } else {
                    auto spec = v.scorer->featurizer;
                    for (const auto& [k, doc] : coll_.docs)
                        scores[k] = v.scorer->score_features(query_doc_features(coll_.queries.at(k.first), doc, spec));
                }
                break;
            case Method::pr:
                for (const auto& line : split_lines(generated_)) {
                    auto s = sample_from_json(nlohmann::json::parse(line));
                    auto grade = find_rubric_score(s.raw_text, coll_.scale.max_grade);
                    if (!grade) ++pending_flags_["rubric_fallback"];
                    scores[{s.query_id, s.doc_id}] = grade ? static_cast<double>(*grade) : coll_.scale.midpoint();
                }
                break;
            case Method::pl: {
                std::map<PairKey, std::vector<NleSample>> by_pair;
                for (const auto& line : split_lines(generated_)) {
                    auto s = sample_from_json(nlohmann::json::parse(line));
                    by_pair[{s.query_id, s.doc_id}].push_back(std::move(s));
                }
                for (auto& [k, samples] : by_pair) {
                    try {
                        scores[k] = pl_confidence(samples, static_cast<std::size_t>(c_.pl_samples));
                    } catch (const DataError&) {
                        ++pending_flags_["pl_unparsed"];
                        scores[k] = 0.5;
                    }
                }
                break;
            }
            case Method::nle_literal:
            case Method::nle_conditional:
                if (ext) {
                    std::vector<PairKey> keys;
                    for (const auto& [k, m] : metas_) keys.push_back(k);
                    with_external(keys, [&](std::string id, const PairKey& k) {
                        const auto& group = metas_.at(k);
                        ScoreItem it{std::move(id), group.front().text(), std::nullopt};
                        if (group.size() > 1) it.text_b = group[1].text();
                        return it;
                    });
                } else {
                    for (const auto& [k, m] : metas_) scores[k] = v.scorer->score(m);
                }
                break;
        }
        return scores;
    }

    static std::vector<std::string> split_lines(const std::string& text) {
        std::vector<std::string> out;
        util::for_each_line(text, [&](std::size_t, std::string_view line) {
            if (!util::trim(line).empty()) out.emplace_back(line);
        });
        return out;
    }

    void score_stage(Variant& v) {
        bool reused = false;
        std::string text;
        if (!c_.run_file.empty() && (c_.method == Method::nc || c_.method == Method::pc)) {
            text = store_.get(path_in(v, "scores.run"), content_hash({run_text_}), reused,
                              [&] { return format_run(parse_run(run_text_, c_.run_file)); });
        } else {
            std::string upstream;
            switch (c_.method) {
                case Method::pr:
                case Method::pl: upstream = generate_hash_; break;
                case Method::nle_literal:
                case Method::nle_conditional: upstream = v.scorer ? v.score_input_hash : meta_hash_; break;
                default: upstream = v.scorer ? v.score_input_hash : ingest_hash_;
            }
            const std::string hash = content_hash({upstream, config_slice(c_, {"scorer", "scorer.", "pl.samples"})});
            text = store_.get(path_in(v, "scores.run"), hash, reused, [&] {
                auto scores = compute_scores(v);
                return format_run(make_run(scores, std::string(to_string(c_.method))));
            });
            // Fallback counts are a property of the data, so recount on reuse.
            if (reused && (c_.method == Method::pr || c_.method == Method::pl)) compute_scores(v);
            for (const auto& [f, n] : pending_flags_) res_.flag_counts[f] += n;
            pending_flags_.clear();
        }
        v.run = parse_run(text, path_in(v, "scores.run"));
        v.run_hash = content_hash({text});
        record("score", score_detail(), reused, v.label);
    }

    void calibrate_stage(Variant& v) {
        const auto train_labels = split_labels(coll_, Split::train);
        const std::string hash = content_hash({v.run_hash, config_slice(c_, {"platt.lr", "platt.iterations"})});
        bool reused = false;
        auto ptext = store_.get(path_in(v, "platt.json"), hash, reused, [&] {
            std::vector<double> s, y;
            for (const auto& r : v.run) {
                auto it = train_labels.find({r.query_id, r.doc_id});
                if (it == train_labels.end()) continue;
                s.push_back(r.score);
                y.push_back(static_cast<double>(it->second));
            }
            if (s.empty()) throw DataError("no judged train-split pairs in the run to fit Platt scaling");
            return to_json(platt_fit(s, y, c_.platt_hyper)).dump() + "\n";
        });
        v.platt = platt_from_json(nlohmann::json::parse(ptext));
        bool reused_run = false;
        auto rtext = store_.get(path_in(v, "calibrated.run"), content_hash({v.run_hash, ptext}), reused_run, [&] {
            std::vector<double> s;
            for (const auto& r : v.run) s.push_back(r.score);
            auto mapped = platt_apply(*v.platt, s);
            auto run = v.run;
            for (std::size_t i = 0; i < run.size(); ++i) run[i].score = mapped[i];
            return format_run(normalize_run(std::move(run)));
        });
        v.run = parse_run(rtext, path_in(v, "calibrated.run"));
        v.run_hash = content_hash({rtext});
        record("calibrate", "platt fit on train", reused && reused_run, v.label);
    }

    void evaluate_stage(Variant& v) {
        auto test_q = split_queries(coll_, Split::test);
        auto run = filter_run(v.run, test_q);
        auto eval = evaluate(run, split_labels(coll_, Split::test), coll_.scale, c_.metrics);
        bool changed = write_if_changed(store_.dir() / path_in(v, "eval.json"), to_json(eval).dump(2) + "\n");
        v.eval = std::move(eval);
        record("evaluate", "test split", !changed, v.label);
    }

    void qpp_stage(Variant& v) {
        auto test_q = split_queries(coll_, Split::test);
        auto q = evaluate_qpp(filter_run(v.run, test_q), split_labels(coll_, Split::test), coll_.scale, c_.qpp_k, c_.metrics);
        bool changed = write_if_changed(store_.dir() / path_in(v, "qpp.json"), to_json(q).dump(2) + "\n");
        v.qpp = std::move(q);
        record("qpp", "wig nqc", !changed, v.label);
    }

    PipelineResult finish(bool complete) {
        res_.complete = complete;
        if (complete) {
            for (const auto& v : variants_)
                for (auto s : v.seeds) res_.seeds.push_back({s, *v.eval, *v.qpp, v.platt, v.best_epoch});
            std::sort(res_.seeds.begin(), res_.seeds.end(), [](const SeedResult& a, const SeedResult& b) { return a.seed < b.seed; });
        }
        return std::move(res_);
    }

    ExperimentConfig c_;
    PipelineOptions opt_;
    ArtifactStore store_;
    PipelineResult res_;
    std::vector<std::string> stages_;
    std::vector<Variant> variants_;
    JudgedCollection coll_;
    std::string ingest_hash_, run_text_, generated_, generate_hash_, meta_hash_, gen_detail_;
    std::unique_ptr<Sampler> sampler_;
    std::vector<MetaNle> fresh_metas_;
    std::map<PairKey, std::vector<MetaNle>> metas_;
    std::map<std::string, std::size_t> pending_flags_;
};

// Mean of an optional correlation slot; undefined if any seed is undefined.
inline std::optional<double> mean_slot(const std::vector<SeedResult>& seeds, std::optional<double> Correlation::*slot,
                                       Correlation QppResult::*which) {
    double acc = 0.0;
    for (const auto& s : seeds) {
        auto v = (s.qpp.*which).*slot;
        if (!v) return std::nullopt;
        acc += *v;
    }
    return acc / static_cast<double>(seeds.size());
}

}  // namespace detail

struct SummaryRow {
    std::string name;
    double ndcg, ndcg_at_k, cb_ece, ece, mse;
};

inline std::vector<SummaryRow> summary_rows(const PipelineResult& r) {
    const std::string method(to_string(r.config.method));
    std::vector<SummaryRow> rows;
    SummaryRow mean{method + " (mean)", 0, 0, 0, 0, 0};
    for (const auto& s : r.seeds) {
        const auto& e = s.eval;
        rows.push_back({method + " (seed " + std::to_string(s.seed) + ")", e.ndcg, e.ndcg_at_k, e.cb_ece, e.ece, e.mse});
        mean.ndcg += e.ndcg;
        mean.ndcg_at_k += e.ndcg_at_k;
        mean.cb_ece += e.cb_ece;
        mean.ece += e.ece;
        mean.mse += e.mse;
    }
    const double n = static_cast<double>(r.seeds.size());
    mean.ndcg /= n;
    mean.ndcg_at_k /= n;
    mean.cb_ece /= n;
    mean.ece /= n;
    mean.mse /= n;
    rows.push_back(mean);
    return rows;
}

inline constexpr const char* kSummaryHeader = "method,nDCG,nDCG@10,CB-ECE,ECE,MSE\n";

// Writes report.json, summary.csv, reliability.csv, qpp.csv and
// config.resolved.json. Files whose content is unchanged are left alone.
inline void emit_report(const PipelineResult& r, const std::string& dir) {
    if (r.seeds.empty()) throw DataError("no evaluation results to report");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) throw DataError("cannot write reports to " + dir);
    const std::filesystem::path out(dir);
    const std::string method(to_string(r.config.method));
    const auto rows = summary_rows(r);

    std::string summary = kSummaryHeader;
    for (const auto& row : rows)
        summary += row.name + "," + util::format_double(row.ndcg) + "," + util::format_double(row.ndcg_at_k) + "," +
                   util::format_double(row.cb_ece) + "," + util::format_double(row.ece) + "," + util::format_double(row.mse) + "\n";

    std::string reliability = "seed,mean_prediction,mean_label,count\n";
    for (const auto& s : r.seeds)
        for (const auto& b : s.eval.reliability.bins)
            reliability += std::to_string(s.seed) + "," + util::format_double(b.mean_prediction) + "," +
                           util::format_double(b.mean_label) + "," + std::to_string(b.count) + "\n";

    std::string qpp = qpp_csv_header();
    for (const auto& s : r.seeds) qpp += qpp_csv_row(method + " (seed " + std::to_string(s.seed) + ")", s.qpp);
    QppResult mean_q;
    mean_q.wig = {detail::mean_slot(r.seeds, &Correlation::pearson, &QppResult::wig),
                  detail::mean_slot(r.seeds, &Correlation::kendall, &QppResult::wig), ""};
    mean_q.nqc = {detail::mean_slot(r.seeds, &Correlation::pearson, &QppResult::nqc),
                  detail::mean_slot(r.seeds, &Correlation::kendall, &QppResult::nqc), ""};
    qpp += qpp_csv_row(method + " (mean)", mean_q);

    nlohmann::ordered_json rep;
    rep["method"] = method;
    rep["config"] = to_json(r.config);
    rep["prompt_template_version"] = std::string(kPromptTemplateVersion);
    rep["text_normalization"] = std::string(kTextNormalization);
    rep["qpp_definition"] = "WIG and NQC over the top-k run scores against the per-query candidate mean; no query-length normalization";
    auto stages = nlohmann::ordered_json::array();
    for (const auto& s : r.stage_sequence())
        if (s != "report") stages.push_back(s);
    stages.push_back("report");
    rep["stages"] = stages;
    nlohmann::ordered_json flags = nlohmann::ordered_json::object();
    for (const auto& [f, n] : r.flag_counts) flags[f] = n;
    rep["flags"] = flags;
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& s : r.seeds) {
        nlohmann::ordered_json j;
        j["seed"] = s.seed;
        j["eval"] = to_json(s.eval);
        j["qpp"] = to_json(s.qpp);
        j["platt"] = s.platt ? to_json(*s.platt) : nlohmann::ordered_json(nullptr);
        j["best_epoch"] = s.best_epoch ? nlohmann::ordered_json(*s.best_epoch) : nlohmann::ordered_json(nullptr);
        seeds.push_back(std::move(j));
    }
    rep["seeds"] = seeds;
    const auto& m = rows.back();
    rep["mean"] = {{"ndcg", m.ndcg}, {"ndcg_at_10", m.ndcg_at_k}, {"cb_ece", m.cb_ece}, {"ece", m.ece}, {"mse", m.mse}};

    detail::write_if_changed(out / "report.json", rep.dump(2) + "\n");
    detail::write_if_changed(out / "summary.csv", summary);
    detail::write_if_changed(out / "reliability.csv", reliability);
    detail::write_if_changed(out / "qpp.csv", qpp);
    detail::write_if_changed(out / "config.resolved.json", to_json(r.config).dump(2) + "\n");
}

inline PipelineResult run_pipeline(const ExperimentConfig& config, const PipelineOptions& options = {}) {
    detail::Pipeline p(config, options);
    auto res = p.run();
    if (res.complete) {
        try {
            emit_report(res, config.output_dir);
        } catch (const Error& e) {
            throw Error(std::string("stage report: ") + e.what(), e.exit_code());
        }
        res.stages.push_back({"report", "report", false});
        if (options.log) options.log("report: done");
    }
    return res;
}

}  // namespace nlecal
