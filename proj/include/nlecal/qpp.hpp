#pragma once

// Post-retrieval query performance predictors over a run's scores.
//
// Both predictors use the per-query candidate mean mu_q as the reference
// score and apply no query-length normalization:
//   WIG = mean_{i<=k'} (s_i - mu_q)
//   NQC = stddev(top-k') / max(|mu_q|, 1e-9)      (population stddev)
// with k' = min(k, n).

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/corpus.hpp"
#include "nlecal/metrics.hpp"

namespace nlecal {

inline constexpr double kNqcEpsilon = 1e-9;

inline double wig(std::span<const double> sorted_scores, std::size_t k) {
    if (sorted_scores.empty()) throw UsageError("wig: empty score list");
    if (k < 1) throw UsageError("wig: k must be >= 1");
    const double mu = std::accumulate(sorted_scores.begin(), sorted_scores.end(), 0.0) / static_cast<double>(sorted_scores.size());
    const std::size_t kk = std::min(k, sorted_scores.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < kk; ++i) acc += sorted_scores[i] - mu;
    return acc / static_cast<double>(kk);
}

inline double nqc(std::span<const double> sorted_scores, std::size_t k) {
    if (sorted_scores.empty()) throw UsageError("nqc: empty score list");
    if (k < 1) throw UsageError("nqc: k must be >= 1");
    const double mu = std::accumulate(sorted_scores.begin(), sorted_scores.end(), 0.0) / static_cast<double>(sorted_scores.size());
    const std::size_t kk = std::min(k, sorted_scores.size());
    const double top_mean = std::accumulate(sorted_scores.begin(), sorted_scores.begin() + static_cast<std::ptrdiff_t>(kk), 0.0) /
                            static_cast<double>(kk);
    double var = 0.0;
    for (std::size_t i = 0; i < kk; ++i) var += (sorted_scores[i] - top_mean) * (sorted_scores[i] - top_mean);
    var /= static_cast<double>(kk);
    return std::sqrt(var) / std::max(std::abs(mu), kNqcEpsilon);
}

struct Correlation {
    std::optional<double> pearson;
    std::optional<double> kendall;
    std::string error;  // set when a slot is undefined
};

struct QppQuery {
    double wig = 0.0;
    double nqc = 0.0;
    double actual = 0.0;
    bool nqc_guarded = false;  // |mu_q| fell below epsilon
};

struct QppResult {
    std::map<std::string, QppQuery> per_query;
    Correlation wig;
    Correlation nqc;
    std::size_t k = 10;
};

inline Correlation correlate(std::span<const double> pred, std::span<const double> actual) {
    Correlation c;
    try {
        c.pearson = pearson(pred, actual);
    } catch (const UndefinedCorrelation& e) {
        c.error = e.what();
    }
    try {
        c.kendall = kendall(pred, actual);
    } catch (const UndefinedCorrelation& e) {
        if (c.error.empty()) c.error = e.what();
    }
    return c;
}

// Actual performance is per-query nDCG@10 of the run against the judgments.
inline QppResult evaluate_qpp(const std::vector<RunRecord>& run, const std::map<PairKey, int>& judgments, const Scale& scale,
                              std::size_t k = 10, const EvalParams& eval = {}) {
    EvalParams ep = eval;
    ep.k = 10;
    auto rep = evaluate(run, judgments, scale, ep);
    QppResult out;
    out.k = k;
    std::vector<double> w, q, a;
    for (const auto& [qid, recs] : group_by_query(normalize_run(run))) {
        auto it = rep.per_query_ndcg_at_k.find(qid);
        if (it == rep.per_query_ndcg_at_k.end()) continue;
        std::vector<double> scores;
        for (const auto& r : recs) scores.push_back(r.score);
        QppQuery pq;
        pq.wig = wig(scores, k);
        pq.nqc = nqc(scores, k);
        double mu = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
        pq.nqc_guarded = std::abs(mu) < kNqcEpsilon;
        pq.actual = it->second;
        out.per_query[qid] = pq;
        w.push_back(pq.wig);
        q.push_back(pq.nqc);
        a.push_back(pq.actual);
    }
    if (out.per_query.size() < 2) throw DataError("qpp: run and judgments share fewer than 2 queries");
    out.wig = correlate(w, a);
    out.nqc = correlate(q, a);
    return out;
}

inline nlohmann::ordered_json to_json(const Correlation& c) {
    nlohmann::ordered_json j;
    j["pearson"] = c.pearson ? nlohmann::ordered_json(*c.pearson) : nlohmann::ordered_json(nullptr);
    j["kendall"] = c.kendall ? nlohmann::ordered_json(*c.kendall) : nlohmann::ordered_json(nullptr);
    if (!c.error.empty()) j["error"] = c.error;
    return j;
}

inline nlohmann::ordered_json to_json(const QppResult& r) {
    nlohmann::ordered_json j;
    j["k"] = r.k;
    j["correlations"] = {{"wig", to_json(r.wig)}, {"nqc", to_json(r.nqc)}};
    nlohmann::ordered_json pq = nlohmann::ordered_json::object();
    for (const auto& [qid, v] : r.per_query) {
        pq[qid] = {{"wig", v.wig}, {"nqc", v.nqc}, {"actual", v.actual}};
        if (v.nqc_guarded) pq[qid]["nqc_guarded"] = true;
    }
    j["per_query"] = pq;
    j["predictor_definition"] = "per-query candidate mean reference; no query-length normalization";
    return j;
}

inline std::string qpp_csv_header() { return "method,WIG P-rho,WIG K-tau,NQC P-rho,NQC K-tau\n"; }

inline std::string qpp_csv_row(const std::string& method, const QppResult& r) {
    auto cell = [](const std::optional<double>& v) { return v ? util::format_double(*v) : std::string("undefined"); };
    return method + "," + cell(r.wig.pearson) + "," + cell(r.wig.kendall) + "," + cell(r.nqc.pearson) + "," + cell(r.nqc.kendall) + "\n";
}

}  // namespace nlecal
