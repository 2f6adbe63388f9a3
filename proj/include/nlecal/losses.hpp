#pragma once

// Query-level training objectives and the hashed bag-of-tokens linear scorer
// trained on meta explanations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/aggregate.hpp"
#include "nlecal/corpus.hpp"
#include "nlecal/error.hpp"
#include "nlecal/util.hpp"

namespace nlecal {

enum class LossType { mse, softmax, multiobj, calibrated_softmax };

inline std::string_view to_string(LossType t) {
    switch (t) {
        case LossType::mse: return "mse";
        case LossType::softmax: return "softmax";
        case LossType::multiobj: return "multiobj";
        case LossType::calibrated_softmax: return "calibrated_softmax";
    }
    return "mse";
}

inline std::optional<LossType> parse_loss_type(std::string_view s) {
    for (auto t : {LossType::mse, LossType::softmax, LossType::multiobj, LossType::calibrated_softmax})
        if (to_string(t) == s) return t;
    return std::nullopt;
}

struct LossKind {
    LossType type = LossType::calibrated_softmax;
    double alpha = 0.5;   // multiobj: weight on mse
    double anchor = 0.0;  // calibrated_softmax: logit of the virtual zero-label item

    bool softmax_family() const noexcept { return type != LossType::mse; }

    void validate() const {
        if (type == LossType::multiobj && !(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("multiobj alpha must lie in [0,1]");
        if (!std::isfinite(anchor)) throw ConfigError("calibrated softmax anchor must be finite");
    }
};

struct QueryBatch {
    std::string query_id;
    std::vector<double> scores;
    std::vector<double> labels;
};

struct LossValue {
    double value = 0.0;
    std::vector<double> grad;  // dL/ds
};

namespace detail {

inline double log_sum_exp(std::span<const double> s, std::optional<double> extra = std::nullopt) {
    double m = extra.value_or(-std::numeric_limits<double>::infinity());
    for (double v : s) m = std::max(m, v);
    double acc = extra ? std::exp(*extra - m) : 0.0;
    for (double v : s) acc += std::exp(v - m);
    return m + std::log(acc);
}

inline LossValue mse_loss(std::span<const double> s, std::span<const double> y) {
    const double n = static_cast<double>(s.size());
    LossValue out{0.0, std::vector<double>(s.size())};
    for (std::size_t i = 0; i < s.size(); ++i) {
        double d = s[i] - y[i];
        out.value += d * d / n;
        out.grad[i] = 2.0 * d / n;
    }
    return out;
}

// Cross-entropy between p = y / sum(y) and the softmax of s, optionally with
// an extra anchor logit that carries zero target mass.
inline LossValue softmax_loss(std::span<const double> s, std::span<const double> y, std::optional<double> anchor) {
    const double total = std::accumulate(y.begin(), y.end(), 0.0);
    const double lse = log_sum_exp(s, anchor);
    LossValue out{0.0, std::vector<double>(s.size())};
    for (std::size_t i = 0; i < s.size(); ++i) {
        double p = y[i] / total;
        double log_sigma = s[i] - lse;
        if (p > 0.0) out.value -= p * log_sigma;
        out.grad[i] = std::exp(log_sigma) - p;
    }
    return out;
}

}  // namespace detail

inline LossValue loss_value_grad(const LossKind& kind, std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw UsageError("scores and labels differ in length");
    if (scores.empty()) throw UsageError("empty query batch");
    for (double v : scores)
        if (!std::isfinite(v)) throw NumericError("non-finite score in loss input");
    for (double v : labels)
        if (!(v >= 0.0) || !std::isfinite(v)) throw UsageError("labels must be finite and non-negative");
    if (kind.softmax_family() && std::accumulate(labels.begin(), labels.end(), 0.0) <= 0.0)
        throw UsageError("softmax-family losses need a batch with positive label mass");

    switch (kind.type) {
        case LossType::mse: return detail::mse_loss(scores, labels);
        case LossType::softmax: return detail::softmax_loss(scores, labels, std::nullopt);
        case LossType::calibrated_softmax: return detail::softmax_loss(scores, labels, kind.anchor);
        case LossType::multiobj: {
            auto a = detail::mse_loss(scores, labels);
            auto b = detail::softmax_loss(scores, labels, std::nullopt);
            LossValue out{kind.alpha * a.value + (1.0 - kind.alpha) * b.value, std::vector<double>(scores.size())};
            for (std::size_t i = 0; i < scores.size(); ++i) out.grad[i] = kind.alpha * a.grad[i] + (1.0 - kind.alpha) * b.grad[i];
            return out;
        }
    }
    return {};
}

inline LossValue loss_value_grad(const LossKind& kind, const QueryBatch& batch) {
    return loss_value_grad(kind, batch.scores, batch.labels);
}

// ---------------------------------------------------------------------------
// Hashed bag-of-tokens features

struct FeaturizerSpec {
    std::uint32_t dimension = 32768;
    std::uint64_t seed = 0;
    bool lowercase = true;

    void validate() const {
        if (dimension == 0 || (dimension & (dimension - 1)) != 0) throw ConfigError("feature dimension must be a power of two");
    }
};

// Sorted by index, no duplicate indices.
using SparseVector = std::vector<std::pair<std::uint32_t, double>>;

inline std::uint32_t feature_bucket(std::string_view token, const FeaturizerSpec& spec) {
    return static_cast<std::uint32_t>(util::mix64(util::fnv1a64(token, spec.seed)) & (spec.dimension - 1));
}

// L2-normalized hashed token counts, shifted by `offset`.
inline SparseVector featurize_text(std::string_view text, const FeaturizerSpec& spec, std::uint32_t offset = 0) {
    spec.validate();
    std::map<std::uint32_t, double> counts;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) return;
        counts[offset + feature_bucket(cur, spec)] += 1.0;
        cur.clear();
    };
    for (char c : text) {
        if (is_alnum_ascii(c))
            cur.push_back(spec.lowercase ? static_cast<char>(std::tolower(static_cast<unsigned char>(c))) : c);
        else
            flush();
    }
    flush();
    double norm = 0.0;
    for (const auto& [i, v] : counts) norm += v * v;
    norm = std::sqrt(norm);
    SparseVector out;
    out.reserve(counts.size());
    for (const auto& [i, v] : counts) out.emplace_back(i, v / norm);
    return out;
}

enum class ScorerMode { literal_single, conditional_pair };

inline std::string_view to_string(ScorerMode m) {
    return m == ScorerMode::literal_single ? "literal_single" : "conditional_pair";
}

inline std::optional<ScorerMode> parse_scorer_mode(std::string_view s) {
    if (s == "literal_single") return ScorerMode::literal_single;
    if (s == "conditional_pair") return ScorerMode::conditional_pair;
    return std::nullopt;
}

inline std::size_t input_dimension(ScorerMode mode, const FeaturizerSpec& spec) {
    return mode == ScorerMode::literal_single ? spec.dimension : 2 * static_cast<std::size_t>(spec.dimension);
}

// Literal mode takes one meta explanation. Conditional mode takes the
// relevant and nonrelevant ones (in any order): block 0 holds the relevant
// polarity, block 1 the nonrelevant one.
inline SparseVector featurize(std::span<const MetaNle> metas, const FeaturizerSpec& spec, ScorerMode mode) {
    if (mode == ScorerMode::literal_single) {
        if (metas.size() != 1) throw UsageError("literal scorer expects exactly one meta explanation");
        return featurize_text(metas[0].text(), spec);
    }
    if (metas.size() != 2) throw UsageError("conditional scorer expects exactly two meta explanations");
    const MetaNle* rel = nullptr;
    const MetaNle* non = nullptr;
    for (const auto& m : metas) {
        if (m.polarity == Polarity::relevant) rel = &m;
        if (m.polarity == Polarity::nonrelevant) non = &m;
    }
    if (!rel || !non) throw UsageError("conditional scorer needs one relevant and one nonrelevant meta explanation");
    auto out = featurize_text(rel->text(), spec, 0);
    auto block1 = featurize_text(non->text(), spec, spec.dimension);
    out.insert(out.end(), block1.begin(), block1.end());
    return out;
}

// ---------------------------------------------------------------------------
// Scorer and training

struct TrainHyper {
    double learning_rate = 0.5;
    int epochs = 10;
    std::uint64_t seed = 0;
    std::optional<int> list_cap;  // max documents per training query; unlimited when unset
};

struct Scorer {
    ScorerMode mode = ScorerMode::literal_single;
    FeaturizerSpec featurizer;
    std::vector<double> weights;
    double bias = 0.0;
    LossKind loss;
    TrainHyper hyper;

    static Scorer zeros(ScorerMode mode, FeaturizerSpec spec) {
        spec.validate();
        Scorer s;
        s.mode = mode;
        s.featurizer = spec;
        s.weights.assign(input_dimension(mode, spec), 0.0);
        return s;
    }

    double score_features(const SparseVector& x) const {
        double acc = bias;
        for (const auto& [i, v] : x) {
            if (i >= weights.size()) throw UsageError("feature index outside scorer dimension");
            acc += weights[i] * v;
        }
        return acc;
    }

    double score(std::span<const MetaNle> metas) const { return score_features(featurize(metas, featurizer, mode)); }

    bool operator==(const Scorer& o) const {
        return mode == o.mode && featurizer.dimension == o.featurizer.dimension && featurizer.seed == o.featurizer.seed &&
               featurizer.lowercase == o.featurizer.lowercase && weights == o.weights && bias == o.bias;
    }
};

inline nlohmann::ordered_json to_json(const LossKind& k) {
    return {{"type", to_string(k.type)}, {"alpha", k.alpha}, {"anchor", k.anchor}};
}

inline LossKind loss_kind_from_json(const nlohmann::json& j) {
    auto t = parse_loss_type(j.at("type").get<std::string>());
    if (!t) throw DataError("unknown loss type " + j.at("type").dump());
    return {*t, j.at("alpha").get<double>(), j.at("anchor").get<double>()};
}

inline nlohmann::ordered_json to_json(const TrainHyper& h) {
    nlohmann::ordered_json j{{"learning_rate", h.learning_rate}, {"epochs", h.epochs}, {"seed", h.seed}};
    j["list_cap"] = h.list_cap ? nlohmann::ordered_json(*h.list_cap) : nlohmann::ordered_json(nullptr);
    return j;
}

inline nlohmann::ordered_json to_json(const Scorer& s) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(s.mode);
    j["dimension"] = s.featurizer.dimension;
    j["seed"] = s.featurizer.seed;
    j["lowercase"] = s.featurizer.lowercase;
    j["bias"] = s.bias;
    j["weights"] = s.weights;
    j["loss_kind"] = to_json(s.loss);
    j["hyper"] = to_json(s.hyper);
    return j;
}

inline Scorer scorer_from_json(const nlohmann::json& j) {
    Scorer s;
    auto mode = parse_scorer_mode(j.at("mode").get<std::string>());
    if (!mode) throw DataError("unknown scorer mode " + j.at("mode").dump());
    s.mode = *mode;
    s.featurizer.dimension = j.at("dimension").get<std::uint32_t>();
    s.featurizer.seed = j.at("seed").get<std::uint64_t>();
    s.featurizer.lowercase = j.value("lowercase", true);
    s.featurizer.validate();
    s.bias = j.at("bias").get<double>();
    s.weights = j.at("weights").get<std::vector<double>>();
    if (s.weights.size() != input_dimension(s.mode, s.featurizer)) throw DataError("scorer weight count does not match its dimension");
    s.loss = loss_kind_from_json(j.at("loss_kind"));
    const auto& h = j.at("hyper");
    s.hyper.learning_rate = h.at("learning_rate").get<double>();
    s.hyper.epochs = h.at("epochs").get<int>();
    s.hyper.seed = h.at("seed").get<std::uint64_t>();
    if (!h.at("list_cap").is_null()) s.hyper.list_cap = h.at("list_cap").get<int>();
    return s;
}

class TrainingError : public NumericError {
public:
    TrainingError(const std::string& what, int last_finite_epoch)
        : NumericError(what + " (last finite epoch " + std::to_string(last_finite_epoch) + ")"), last_finite_epoch_(last_finite_epoch) {}
    int last_finite_epoch() const noexcept { return last_finite_epoch_; }

private:
    int last_finite_epoch_;
};

struct TrainResult {
    Scorer scorer;
    int best_epoch = 0;
    std::vector<double> train_loss;       // index e: loss of the parameters after e updates
    std::vector<double> validation_loss;  // same indexing
};

namespace detail {

struct QueryList {
    std::string query_id;
    std::vector<const SparseVector*> features;
    std::vector<double> labels;
};

inline std::vector<QueryList> build_lists(const JudgedCollection& c, Split split, const std::map<PairKey, SparseVector>& features,
                                          const LossKind& loss, std::optional<int> cap, std::uint64_t seed) {
    std::vector<QueryList> out;
    for (const auto& qid : c.query_ids(split)) {
        QueryList q{qid, {}, {}};
        std::vector<std::string> docs = c.docs_of(qid);
        if (cap && static_cast<int>(docs.size()) > *cap) {
            // Keep every positive, fill the rest with a seeded sample of negatives.
            std::vector<std::string> pos, neg;
            for (const auto& d : docs) (c.labels.at({qid, d}) > 0 ? pos : neg).push_back(d);
            std::mt19937_64 rng(seed ^ util::fnv1a64(qid));
            std::shuffle(neg.begin(), neg.end(), rng);
            if (static_cast<int>(pos.size()) > *cap) {
                std::shuffle(pos.begin(), pos.end(), rng);
                pos.resize(static_cast<std::size_t>(*cap));
                neg.clear();
            } else {
                neg.resize(static_cast<std::size_t>(*cap) - pos.size());
            }
            docs = pos;
            docs.insert(docs.end(), neg.begin(), neg.end());
            std::sort(docs.begin(), docs.end());
        }
        for (const auto& d : docs) {
            auto it = features.find({qid, d});
            if (it == features.end()) throw DataError("no features for pair (" + qid + ", " + d + ")");
            q.features.push_back(&it->second);
            q.labels.push_back(static_cast<double>(c.labels.at({qid, d})));
        }
        double mass = std::accumulate(q.labels.begin(), q.labels.end(), 0.0);
        if (loss.softmax_family() && mass <= 0.0) continue;
        out.push_back(std::move(q));
    }
    return out;
}

// Mean query loss; accumulates the weight/bias gradient when requested.
inline double objective(const Scorer& s, const std::vector<QueryList>& lists, std::vector<double>* gw, double* gb) {
    if (lists.empty()) return 0.0;
    const double inv_q = 1.0 / static_cast<double>(lists.size());
    double total = 0.0;
    for (const auto& q : lists) {
        std::vector<double> scores(q.features.size());
        for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = s.score_features(*q.features[i]);
        for (double v : scores)
            if (!std::isfinite(v)) return std::numeric_limits<double>::quiet_NaN();
        auto lv = loss_value_grad(s.loss, scores, q.labels);
        total += lv.value * inv_q;
        if (gw) {
            for (std::size_t i = 0; i < scores.size(); ++i) {
                double g = lv.grad[i] * inv_q;
                for (const auto& [idx, v] : *q.features[i]) (*gw)[idx] += g * v;
                *gb += g;
            }
        }
    }
    return total;
}

}  // namespace detail

// Full-batch gradient descent on the mean query loss of the train split,
// keeping the parameters with the lowest validation loss (the initial
// all-zero parameters included).
inline TrainResult train_features(const JudgedCollection& c, const std::map<PairKey, SparseVector>& features, ScorerMode mode,
                                  const FeaturizerSpec& spec, const LossKind& loss, const TrainHyper& hyper) {
    loss.validate();
    if (hyper.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(hyper.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (hyper.list_cap && *hyper.list_cap < 1) throw ConfigError("list cap must be >= 1");
    auto train_lists = detail::build_lists(c, Split::train, features, loss, hyper.list_cap, hyper.seed);
    auto val_lists = detail::build_lists(c, Split::validation, features, loss, std::nullopt, hyper.seed);
    if (train_lists.empty()) throw DataError("training split has no usable queries");
    if (val_lists.empty()) throw DataError("validation split has no usable queries");

    TrainResult res;
    Scorer cur = Scorer::zeros(mode, spec);
    cur.loss = loss;
    cur.hyper = hyper;
    Scorer best = cur;
    double best_val = detail::objective(cur, val_lists, nullptr, nullptr);
    res.validation_loss.push_back(best_val);

    std::vector<double> gw(cur.weights.size());
    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        double train_loss = detail::objective(cur, train_lists, &gw, &gb);
        if (!std::isfinite(train_loss)) throw TrainingError("training loss became non-finite", epoch - 1);
        res.train_loss.push_back(train_loss);
        for (std::size_t i = 0; i < gw.size(); ++i) cur.weights[i] -= hyper.learning_rate * gw[i];
        cur.bias -= hyper.learning_rate * gb;
        double val = detail::objective(cur, val_lists, nullptr, nullptr);
        if (!std::isfinite(val)) throw TrainingError("validation loss became non-finite", epoch - 1);
        res.validation_loss.push_back(val);
        if (val < best_val) {
            best_val = val;
            best = cur;
            res.best_epoch = epoch;
        }
    }
    res.train_loss.push_back(detail::objective(cur, train_lists, nullptr, nullptr));
    res.scorer = std::move(best);
    return res;
}

// Trains on meta explanations keyed by pair: one per pair in literal mode,
// two (relevant, nonrelevant) in conditional mode.
inline TrainResult train(const JudgedCollection& c, const std::map<PairKey, std::vector<MetaNle>>& metas, ScorerMode mode,
                         const FeaturizerSpec& spec, const LossKind& loss, const TrainHyper& hyper) {
    std::map<PairKey, SparseVector> features;
    for (const auto& [key, m] : metas) features.emplace(key, featurize(m, spec, mode));
    return train_features(c, features, mode, spec, loss, hyper);
}

}  // namespace nlecal
