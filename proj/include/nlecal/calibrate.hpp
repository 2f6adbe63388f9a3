#pragma once

// Post-hoc calibration: regression Platt scaling s' = exp(w*s + b) / 2 and the
// LLM-confidence score averaged over sampled binary judgments.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/error.hpp"
#include "nlecal/llm.hpp"

namespace nlecal {

struct PlattParams {
    double w = 0.0;
    double b = 0.69314718055994531;  // ln 2: the constant map s' = 1
    double fit_mse = 0.0;
    std::size_t n_points = 0;

    bool preserves_ranking() const noexcept { return w > 0.0; }
};

class SaturationError : public NumericError {
public:
    explicit SaturationError(std::size_t index)
        : NumericError("platt exponent exceeds 700 at index " + std::to_string(index)), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

inline constexpr double kPlattMaxExponent = 700.0;

inline std::vector<double> platt_apply(const PlattParams& p, std::span<const double> scores) {
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        double z = p.w * scores[i] + p.b;
        if (z > kPlattMaxExponent) throw SaturationError(i);
        out[i] = std::exp(z) / 2.0;
    }
    return out;
}

struct PlattHyper {
    double learning_rate = 0.1;
    int iterations = 20000;
    double tolerance = 1e-12;  // stop when the squared gradient norm falls below this
};

inline double platt_mse(double w, double b, std::span<const double> s, std::span<const double> y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        double z = w * s[i] + b;
        if (z > kPlattMaxExponent) return std::numeric_limits<double>::infinity();
        double r = std::exp(z) / 2.0 - y[i];
        acc += r * r;
    }
    return acc / static_cast<double>(s.size());
}

// Gradient descent on the mean squared error against the labels, starting
// from the constant map (w = 0, b = ln 2). A step that does not decrease the
// loss is retried with half the step size.
inline PlattParams platt_fit(std::span<const double> scores, std::span<const double> labels, const PlattHyper& hyper = {}) {
    if (scores.size() != labels.size()) throw UsageError("platt_fit: scores and labels differ in length");
    if (scores.size() < 2) throw UsageError("platt_fit needs at least 2 points");
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (!std::isfinite(scores[i]) || !std::isfinite(labels[i])) throw NumericError("platt_fit: non-finite input");
    const double n = static_cast<double>(scores.size());
    PlattParams p;
    double loss = platt_mse(p.w, p.b, scores, labels);
    double lr = hyper.learning_rate;
    for (int it = 0; it < hyper.iterations; ++it) {
        double gw = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            double pred = std::exp(p.w * scores[i] + p.b) / 2.0;
            double g = 2.0 * (pred - labels[i]) * pred / n;
            gw += g * scores[i];
            gb += g;
        }
        if (gw * gw + gb * gb < hyper.tolerance) break;
        bool moved = false;
        for (int halvings = 0; halvings < 60; ++halvings) {
            double nw = p.w - lr * gw, nb = p.b - lr * gb;
            double nl = platt_mse(nw, nb, scores, labels);
            if (std::isfinite(nl) && nl <= loss) {
                p.w = nw;
                p.b = nb;
                loss = nl;
                moved = true;
                lr = std::min(lr * 1.1, hyper.learning_rate * 16.0);
                break;
            }
            lr *= 0.5;
        }
        if (!moved) break;
    }
    if (!std::isfinite(loss) || !std::isfinite(p.w) || !std::isfinite(p.b)) throw NumericError("platt_fit: non-finite loss");
    p.fit_mse = loss;
    p.n_points = scores.size();
    return p;
}

inline nlohmann::ordered_json to_json(const PlattParams& p) {
    return {{"w", p.w}, {"b", p.b}, {"fit_mse", p.fit_mse}, {"n_points", p.n_points}};
}

inline PlattParams platt_from_json(const nlohmann::json& j) {
    return {j.at("w").get<double>(), j.at("b").get<double>(), j.at("fit_mse").get<double>(), j.at("n_points").get<std::size_t>()};
}

// Fraction of the first n samples judged relevant; unparsed samples are
// excluded from both counts.
inline double pl_confidence(std::span<const NleSample> samples, std::size_t n = 20) {
    samples = samples.first(std::min(n, samples.size()));
    std::size_t parsed = 0, relevant = 0;
    for (const auto& s : samples) {
        if (s.query_id != samples.front().query_id || s.doc_id != samples.front().doc_id)
            throw UsageError("pl_confidence expects samples of a single pair");
        if (s.kind != PromptKind::binary && s.kind != PromptKind::literal)
            throw UsageError("pl_confidence expects binary or literal samples");
        if (s.predicted_label == RelevanceLabel::unparsed) continue;
        ++parsed;
        if (s.predicted_label == RelevanceLabel::relevant) ++relevant;
    }
    if (parsed == 0) throw DataError("no parseable judgments among " + std::to_string(samples.size()) + " samples");
    return static_cast<double>(relevant) / static_cast<double>(parsed);
}

}  // namespace nlecal
