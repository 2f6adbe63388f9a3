#pragma once

// Judged ranking collections: TREC qrels, TREC run files and JSON Lines
// query-document pairs.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/error.hpp"
#include "nlecal/util.hpp"

namespace nlecal {

using PairKey = std::pair<std::string, std::string>;  // (query_id, doc_id)

enum class Split { train, validation, test };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "test";
}

inline std::optional<Split> parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    return std::nullopt;
}

// Inclusive grade range [0, max_grade]; class count C = max_grade + 1.
struct Scale {
    int max_grade = 0;
    int classes() const noexcept { return max_grade + 1; }
    bool contains(long long g) const noexcept { return g >= 0 && g <= max_grade; }
    double midpoint() const noexcept { return max_grade / 2.0; }
    bool operator==(const Scale&) const = default;
};

struct JudgedCollection {
    std::map<std::string, std::string> queries;
    std::map<PairKey, std::string> docs;
    std::map<PairKey, int> labels;
    std::map<std::string, Split> query_split;
    Scale scale;

    bool operator==(const JudgedCollection&) const = default;

    std::vector<std::string> query_ids(std::optional<Split> split = std::nullopt) const {
        std::vector<std::string> out;
        for (const auto& [qid, s] : query_split)
            if (!split || s == *split) out.push_back(qid);
        return out;
    }

    // Labeled doc ids of one query in doc_id order.
    std::vector<std::string> docs_of(const std::string& qid) const {
        std::vector<std::string> out;
        for (auto it = labels.lower_bound({qid, std::string()}); it != labels.end() && it->first.first == qid; ++it)
            out.push_back(it->first.second);
        return out;
    }

    JudgedCollection subset(Split split) const {
        JudgedCollection out;
        out.scale = scale;
        for (const auto& [qid, s] : query_split) {
            if (s != split) continue;
            out.query_split[qid] = s;
            out.queries[qid] = queries.at(qid);
        }
        for (const auto& [key, grade] : labels) {
            if (!out.query_split.count(key.first)) continue;
            out.labels[key] = grade;
            out.docs[key] = docs.at(key);
        }
        return out;
    }

    void validate() const {
        std::set<std::string> with_docs;
        for (const auto& [key, grade] : labels) {
            if (!queries.count(key.first)) throw ValidationError("pair (" + key.first + ", " + key.second + ") has no query text");
            if (!docs.count(key)) throw ValidationError("pair (" + key.first + ", " + key.second + ") has no document text");
            if (!scale.contains(grade))
                throw ValidationError("label " + std::to_string(grade) + " of (" + key.first + ", " + key.second +
                                      ") outside scale [0," + std::to_string(scale.max_grade) + "]");
            with_docs.insert(key.first);
        }
        for (const auto& [qid, text] : queries)
            if (!with_docs.count(qid)) throw ValidationError("query " + qid + " has no labeled documents");
    }
};

// ---------------------------------------------------------------------------
// qrels: "<qid> <iter> <docid> <rel>"

struct Qrels {
    std::map<PairKey, int> judgments;
    std::vector<std::string> warnings;
};

inline Qrels parse_qrels(std::string_view text, const std::string& source = "qrels") {
    Qrels out;
    util::for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (util::trim(line).empty()) return;
        auto f = util::split_ws(line);
        if (f.size() != 4) throw ParseError(source, lineno, "expected 4 fields, got " + std::to_string(f.size()));
        auto grade = util::parse_int(f[3]);
        if (!grade) throw ParseError(source, lineno, "non-integer relevance '" + std::string(f[3]) + "'");
        if (*grade < 0) throw ValidationError(source + ":" + std::to_string(lineno) + ": negative grade " + std::to_string(*grade));
        PairKey key{std::string(f[0]), std::string(f[2])};
        auto [it, inserted] = out.judgments.insert({key, static_cast<int>(*grade)});
        if (!inserted) {
            out.warnings.push_back(source + ":" + std::to_string(lineno) + ": duplicate judgment for (" + key.first + ", " +
                                   key.second + "), keeping last");
            it->second = static_cast<int>(*grade);
        }
    });
    return out;
}

inline Qrels load_qrels(const std::string& path) { return parse_qrels(util::read_file(path), path); }

inline std::string format_qrels(const std::map<PairKey, int>& judgments) {
    std::string out;
    for (const auto& [key, grade] : judgments) out += key.first + " 0 " + key.second + " " + std::to_string(grade) + "\n";
    return out;
}

inline void write_qrels(const std::string& path, const std::map<PairKey, int>& judgments) {
    util::write_file(path, format_qrels(judgments));
}

// ---------------------------------------------------------------------------
// run: "<qid> Q0 <docid> <rank> <score> <tag>"

struct RunRecord {
    std::string query_id;
    std::string doc_id;
    int rank = 0;
    double score = 0.0;
    std::string tag;
    bool operator==(const RunRecord&) const = default;
};

// Groups by query (query_id ascending), orders by descending score with ties
// broken by doc_id ascending, and renumbers ranks from 1.
inline std::vector<RunRecord> normalize_run(std::vector<RunRecord> records) {
    std::stable_sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
        if (a.query_id != b.query_id) return a.query_id < b.query_id;
        if (a.score != b.score) return a.score > b.score;
        return a.doc_id < b.doc_id;
    });
    int rank = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        rank = (i > 0 && records[i].query_id == records[i - 1].query_id) ? rank + 1 : 1;
        records[i].rank = rank;
    }
    return records;
}

inline std::vector<RunRecord> parse_run(std::string_view text, const std::string& source = "run") {
    std::vector<RunRecord> records;
    util::for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (util::trim(line).empty()) return;
        auto f = util::split_ws(line);
        if (f.size() != 6) throw ParseError(source, lineno, "expected 6 fields, got " + std::to_string(f.size()));
        auto rank = util::parse_int(f[3]);
        if (!rank || *rank < 1) throw ParseError(source, lineno, "invalid rank '" + std::string(f[3]) + "'");
        auto score = util::parse_double(f[4]);
        if (!score) throw ParseError(source, lineno, "non-numeric score '" + std::string(f[4]) + "'");
        records.push_back({std::string(f[0]), std::string(f[2]), static_cast<int>(*rank), *score, std::string(f[5])});
    });
    return normalize_run(std::move(records));
}

inline std::vector<RunRecord> load_run(const std::string& path) { return parse_run(util::read_file(path), path); }

inline std::string format_run(const std::vector<RunRecord>& records) {
    std::string out;
    for (const auto& r : records)
        out += r.query_id + " Q0 " + r.doc_id + " " + std::to_string(r.rank) + " " + util::format_double(r.score) + " " + r.tag + "\n";
    return out;
}

inline void write_run(const std::string& path, const std::vector<RunRecord>& records) {
    util::write_file(path, format_run(records));
}

// Builds a normalized run from per-pair scores.
inline std::vector<RunRecord> make_run(const std::map<PairKey, double>& scores, const std::string& tag) {
    std::vector<RunRecord> records;
    records.reserve(scores.size());
    for (const auto& [key, s] : scores) records.push_back({key.first, key.second, 0, s, tag});
    return normalize_run(std::move(records));
}

inline std::map<std::string, std::vector<RunRecord>> group_by_query(const std::vector<RunRecord>& run) {
    std::map<std::string, std::vector<RunRecord>> out;
    for (const auto& r : run) out[r.query_id].push_back(r);
    return out;
}

// ---------------------------------------------------------------------------
// pairs: JSON Lines {query_id, query, doc_id, text, label, split}

inline JudgedCollection parse_pairs(std::string_view text, std::optional<Scale> scale_override = std::nullopt,
                                    const std::string& source = "pairs") {
    JudgedCollection c;
    int max_grade = 0;
    util::for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (util::trim(line).empty()) return;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(source, lineno, std::string("invalid JSON: ") + e.what());
        }
        auto field = [&](const char* name) -> const nlohmann::json& {
            if (!j.is_object() || !j.contains(name)) throw ParseError(source, lineno, std::string("missing field '") + name + "'");
            return j.at(name);
        };
        auto str = [&](const char* name) {
            const auto& v = field(name);
            if (!v.is_string()) throw ParseError(source, lineno, std::string("field '") + name + "' must be a string");
            return v.get<std::string>();
        };
        std::string qid = str("query_id");
        std::string query = str("query");
        std::string did = str("doc_id");
        std::string doc = str("text");
        const auto& lab = field("label");
        if (!lab.is_number_integer()) throw ParseError(source, lineno, "field 'label' must be an integer");
        auto split = parse_split(str("split"));
        if (!split) throw ParseError(source, lineno, "split must be train, validation or test");
        long long grade = lab.get<long long>();
        if (grade < 0) throw ValidationError(source + ":" + std::to_string(lineno) + ": negative label " + std::to_string(grade));

        if (auto it = c.queries.find(qid); it != c.queries.end() && it->second != query)
            throw ValidationError(source + ":" + std::to_string(lineno) + ": conflicting query text for " + qid);
        if (auto it = c.query_split.find(qid); it != c.query_split.end() && it->second != *split)
            throw ValidationError(source + ":" + std::to_string(lineno) + ": query " + qid + " appears in two splits");
        PairKey key{qid, did};
        if (c.labels.count(key))
            throw ValidationError(source + ":" + std::to_string(lineno) + ": duplicate pair (" + qid + ", " + did + ")");
        c.queries[qid] = query;
        c.query_split[qid] = *split;
        c.docs[key] = doc;
        c.labels[key] = static_cast<int>(grade);
        max_grade = std::max(max_grade, static_cast<int>(grade));
    });
    if (c.labels.empty()) throw DataError(source + ": empty collection");
    if (scale_override) {
        std::string offenders;
        for (const auto& [key, grade] : c.labels)
            if (!scale_override->contains(grade))
                offenders += " (" + key.first + ", " + key.second + ")=" + std::to_string(grade);
        if (!offenders.empty())
            throw ValidationError(source + ": labels outside scale [0," + std::to_string(scale_override->max_grade) + "]:" + offenders);
        c.scale = *scale_override;
    } else {
        c.scale = Scale{max_grade};
    }
    c.validate();
    return c;
}

inline JudgedCollection load_pairs(const std::string& path, std::optional<Scale> scale_override = std::nullopt) {
    return parse_pairs(util::read_file(path), scale_override, path);
}

inline std::string format_pairs(const JudgedCollection& c) {
    std::string out;
    for (const auto& [key, grade] : c.labels) {
        nlohmann::ordered_json j;
        j["query_id"] = key.first;
        j["query"] = c.queries.at(key.first);
        j["doc_id"] = key.second;
        j["text"] = c.docs.at(key);
        j["label"] = grade;
        j["split"] = to_string(c.query_split.at(key.first));
        out += j.dump() + "\n";
    }
    return out;
}

inline void write_pairs(const std::string& path, const JudgedCollection& c) { util::write_file(path, format_pairs(c)); }

}  // namespace nlecal
