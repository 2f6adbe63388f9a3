#pragma once

// Ranking metrics (nDCG), calibration metrics (MSE, ECE, class-balanced ECE,
// reliability bins) and correlation statistics.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/corpus.hpp"
#include "nlecal/error.hpp"
#include "nlecal/util.hpp"

namespace nlecal {

enum class Gain { exponential, linear };

inline std::string_view to_string(Gain g) { return g == Gain::exponential ? "exponential" : "linear"; }

inline std::optional<Gain> parse_gain(std::string_view s) {
    if (s == "exponential") return Gain::exponential;
    if (s == "linear") return Gain::linear;
    return std::nullopt;
}

inline double gain_of(int rel, Gain g) {
    return g == Gain::exponential ? std::exp2(static_cast<double>(rel)) - 1.0 : static_cast<double>(rel);
}

inline double dcg(std::span<const int> ranked, std::optional<std::size_t> k = std::nullopt, Gain g = Gain::exponential) {
    std::size_t depth = k ? std::min(*k, ranked.size()) : ranked.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < depth; ++i) acc += gain_of(ranked[i], g) / std::log2(static_cast<double>(i) + 2.0);
    return acc;
}

// 1.0 by convention when the list holds no positive label (IDCG = 0).
inline double ndcg(std::span<const int> ranked, std::optional<std::size_t> k = std::nullopt, Gain g = Gain::exponential) {
    std::vector<int> ideal(ranked.begin(), ranked.end());
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = dcg(ideal, k, g);
    if (idcg == 0.0) return 1.0;
    return dcg(ranked, k, g) / idcg;
}

inline double mse(std::span<const double> pred, std::span<const double> labels) {
    if (pred.size() != labels.size()) throw UsageError("mse: length mismatch");
    if (pred.empty()) throw UsageError("mse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - labels[i]) * (pred[i] - labels[i]);
    return acc / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// ECE with equal-mass buckets over predictions sorted ascending.

struct ReliabilityBin {
    double mean_prediction = 0.0;
    double mean_label = 0.0;
    std::size_t count = 0;
};

struct ReliabilityBins {
    std::vector<ReliabilityBin> bins;
    int M = 10;
    std::string scheme = "equal-mass-by-sorted-prediction";
};

struct EceResult {
    double ece = 0.0;
    ReliabilityBins reliability;
};

// Pairs are sorted by prediction (ties by label, then input order) and cut
// into M contiguous buckets; the first n mod M buckets get one extra item.
// Buckets that would be empty (n < M) are omitted.
inline EceResult ece(std::span<const double> pred, std::span<const double> labels, int M = 10) {
    if (pred.size() != labels.size()) throw UsageError("ece: length mismatch");
    if (pred.empty()) throw UsageError("ece: empty input");
    if (M < 1) throw UsageError("ece: bin count must be >= 1");
    const std::size_t n = pred.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (pred[a] != pred[b]) return pred[a] < pred[b];
        return labels[a] < labels[b];
    });
    EceResult out;
    out.reliability.M = M;
    const std::size_t m = static_cast<std::size_t>(M);
    const std::size_t base = n / m, extra = n % m;
    std::size_t pos = 0;
    for (std::size_t b = 0; b < m; ++b) {
        std::size_t size = base + (b < extra ? 1 : 0);
        if (size == 0) continue;
        double sp = 0.0, sl = 0.0;
        for (std::size_t i = pos; i < pos + size; ++i) {
            sp += pred[order[i]];
            sl += labels[order[i]];
        }
        pos += size;
        ReliabilityBin bin{sp / static_cast<double>(size), sl / static_cast<double>(size), size};
        out.ece += static_cast<double>(size) / static_cast<double>(n) * std::abs(bin.mean_label - bin.mean_prediction);
        out.reliability.bins.push_back(bin);
    }
    return out;
}

struct CbEceResult {
    double cb_ece = 0.0;
    std::vector<double> per_class;
    std::vector<int> empty_classes;  // classes absent from the slice (penalized)
};

// Per-class ECE averaged over all C classes. A class with no samples
// contributes |c - mean(all predictions)|.
inline CbEceResult cb_ece_detail(std::span<const double> pred, std::span<const int> labels, const Scale& scale, int M = 10) {
    if (pred.size() != labels.size()) throw UsageError("cb_ece: length mismatch");
    if (pred.empty()) throw UsageError("cb_ece: empty input");
    for (int l : labels)
        if (!scale.contains(l)) throw UsageError("cb_ece: label " + std::to_string(l) + " outside scale");
    const double mean_pred = std::accumulate(pred.begin(), pred.end(), 0.0) / static_cast<double>(pred.size());
    CbEceResult out;
    for (int c = 0; c < scale.classes(); ++c) {
        std::vector<double> p, y;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (labels[i] == c) {
                p.push_back(pred[i]);
                y.push_back(static_cast<double>(c));
            }
        double e;
        if (p.empty()) {
            e = std::abs(static_cast<double>(c) - mean_pred);
            out.empty_classes.push_back(c);
        } else {
            e = ece(p, y, std::min<int>(M, static_cast<int>(p.size()))).ece;
        }
        out.per_class.push_back(e);
    }
    out.cb_ece = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) / static_cast<double>(scale.classes());
    return out;
}

inline double cb_ece(std::span<const double> pred, std::span<const int> labels, const Scale& scale, int M = 10) {
    return cb_ece_detail(pred, labels, scale, M).cb_ece;
}

// ---------------------------------------------------------------------------
// Correlation

class UndefinedCorrelation : public NumericError {
public:
    explicit UndefinedCorrelation(const std::string& what) : NumericError(what) {}
};

inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw UsageError("pearson needs two equal-length vectors of size >= 2");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("pearson: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Kendall tau-b.
inline double kendall(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw UsageError("kendall needs two equal-length vectors of size >= 2");
    long long concordant = 0, discordant = 0, tie_x = 0, tie_y = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            double dx = x[i] - x[j], dy = y[i] - y[j];
            if (dx == 0.0 && dy == 0.0) continue;
            if (dx == 0.0) {
                ++tie_x;
            } else if (dy == 0.0) {
                ++tie_y;
            } else if ((dx > 0.0) == (dy > 0.0)) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    double denom = std::sqrt(static_cast<double>(concordant + discordant + tie_x) * static_cast<double>(concordant + discordant + tie_y));
    if (denom == 0.0) throw UndefinedCorrelation("kendall: zero variance");
    return static_cast<double>(concordant - discordant) / denom;
}

// ---------------------------------------------------------------------------
// Run-level evaluation

struct EvalParams {
    int bins = 10;
    std::size_t k = 10;
    Gain gain = Gain::exponential;
};

struct EvalReport {
    double ndcg = 0.0;
    double ndcg_at_k = 0.0;
    double mse = 0.0;
    double ece = 0.0;
    double cb_ece = 0.0;
    std::map<std::string, double> per_query_ndcg_at_k;
    ReliabilityBins reliability;
    std::vector<double> per_class_ece;
    std::vector<int> empty_classes;
    std::vector<std::string> queries_without_relevant;  // nDCG defaulted to 1.0
    std::size_t n_pairs = 0;
    std::size_t n_queries = 0;
    EvalParams params;
};

// Ranking metrics use the run order per query (unjudged documents count as
// grade 0); calibration metrics pool every judged pair present in the run.
inline EvalReport evaluate(const std::vector<RunRecord>& run, const std::map<PairKey, int>& judgments, const Scale& scale,
                           const EvalParams& params = {}) {
    EvalReport rep;
    rep.params = params;
    std::vector<double> preds, labels_d;
    std::vector<int> labels;
    double sum_ndcg = 0.0, sum_ndcg_k = 0.0;
    for (const auto& [qid, recs] : group_by_query(normalize_run(run))) {
        bool judged_query = false;
        std::vector<int> ranked;
        for (const auto& r : recs) {
            auto it = judgments.find({qid, r.doc_id});
            if (it == judgments.end()) {
                ranked.push_back(0);
                continue;
            }
            judged_query = true;
            ranked.push_back(it->second);
            preds.push_back(r.score);
            labels.push_back(it->second);
            labels_d.push_back(static_cast<double>(it->second));
        }
        if (!judged_query) continue;
        // IDCG uses every judged document of the query, retrieved or not.
        std::vector<int> all;
        for (auto it = judgments.lower_bound({qid, std::string()}); it != judgments.end() && it->first.first == qid; ++it)
            all.push_back(it->second);
        std::sort(all.begin(), all.end(), std::greater<>());
        double idcg = dcg(all, std::nullopt, params.gain), idcg_k = dcg(all, params.k, params.gain);
        double nd = idcg == 0.0 ? 1.0 : dcg(ranked, std::nullopt, params.gain) / idcg;
        double ndk = idcg_k == 0.0 ? 1.0 : dcg(ranked, params.k, params.gain) / idcg_k;
        if (idcg == 0.0) rep.queries_without_relevant.push_back(qid);
        sum_ndcg += nd;
        sum_ndcg_k += ndk;
        rep.per_query_ndcg_at_k[qid] = ndk;
        ++rep.n_queries;
    }
    if (preds.empty()) throw DataError("evaluate: run and judgments share no pairs");
    rep.ndcg = sum_ndcg / static_cast<double>(rep.n_queries);
    rep.ndcg_at_k = sum_ndcg_k / static_cast<double>(rep.n_queries);
    rep.mse = mse(preds, labels_d);
    auto e = ece(preds, labels_d, params.bins);
    rep.ece = e.ece;
    rep.reliability = std::move(e.reliability);
    auto cb = cb_ece_detail(preds, labels, scale, params.bins);
    rep.cb_ece = cb.cb_ece;
    rep.per_class_ece = std::move(cb.per_class);
    rep.empty_classes = std::move(cb.empty_classes);
    rep.n_pairs = preds.size();
    return rep;
}

inline nlohmann::ordered_json to_json(const ReliabilityBins& r) {
    auto bins = nlohmann::ordered_json::array();
    for (const auto& b : r.bins) bins.push_back({{"mean_prediction", b.mean_prediction}, {"mean_label", b.mean_label}, {"count", b.count}});
    return {{"M", r.M}, {"scheme", r.scheme}, {"bins", bins}};
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["ndcg"] = r.ndcg;
    j["ndcg_at_10"] = r.ndcg_at_k;
    j["cb_ece"] = r.cb_ece;
    j["ece"] = r.ece;
    j["mse"] = r.mse;
    j["n_queries"] = r.n_queries;
    j["n_pairs"] = r.n_pairs;
    j["per_class_ece"] = r.per_class_ece;
    j["empty_classes"] = r.empty_classes;
    j["queries_without_relevant"] = r.queries_without_relevant;
    j["per_query_ndcg_at_10"] = r.per_query_ndcg_at_k;
    j["reliability"] = to_json(r.reliability);
    j["params"] = {{"bins", r.params.bins}, {"k", r.params.k}, {"gain", to_string(r.params.gain)}};
    return j;
}

inline std::string reliability_csv(const ReliabilityBins& r) {
    std::string out = "mean_prediction,mean_label,count\n";
    for (const auto& b : r.bins)
        out += util::format_double(b.mean_prediction) + "," + util::format_double(b.mean_label) + "," + std::to_string(b.count) + "\n";
    return out;
}

}  // namespace nlecal
