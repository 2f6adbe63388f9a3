#pragma once

// Client for an external scoring service standing in for the builtin scorer.
//
//   request:  {"protocol": "nlecal-score/1", "items": [{"id", "text_a", "text_b"?}]}
//   response: {"scores": [{"id", "score"}]}
//
// Responses are matched by id, so the service may return them in any order.

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlecal/error.hpp"
#include "nlecal/http.hpp"

namespace nlecal {

inline constexpr const char* kScoringProtocol = "nlecal-score/1";

struct ScoreItem {
    std::string id;
    std::string text_a;
    std::optional<std::string> text_b;
};

class ExternalScorer {
public:
    using Poster = std::function<nlohmann::json(const nlohmann::json&)>;

    ExternalScorer(std::string endpoint, double timeout_s, int retry_budget = 3, std::size_t batch_size = 64)
        : retry_budget_(retry_budget), batch_size_(batch_size) {
        parse_url(endpoint);
        poster_ = [endpoint, timeout_s](const nlohmann::json& body) { return post_json(endpoint, body, timeout_s); };
        check();
    }

    explicit ExternalScorer(Poster poster, int retry_budget = 3, std::size_t batch_size = 64)
        : poster_(std::move(poster)), retry_budget_(retry_budget), batch_size_(batch_size) {
        check();
    }

    static nlohmann::json request_body(const std::vector<ScoreItem>& items) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& it : items) {
            nlohmann::json j = {{"id", it.id}, {"text_a", it.text_a}};
            if (it.text_b) j["text_b"] = *it.text_b;
            arr.push_back(std::move(j));
        }
        return {{"protocol", kScoringProtocol}, {"items", std::move(arr)}};
    }

    // One score per item, in item order.
    std::vector<double> score(const std::vector<ScoreItem>& items) {
        std::set<std::string> ids;
        for (const auto& it : items)
            if (!ids.insert(it.id).second) throw UsageError("duplicate scoring item id " + it.id);
        std::vector<double> out;
        out.reserve(items.size());
        for (std::size_t start = 0; start < items.size(); start += batch_size_) {
            std::vector<ScoreItem> batch(items.begin() + static_cast<std::ptrdiff_t>(start),
                                         items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), start + batch_size_)));
            auto scores = score_batch(batch);
            out.insert(out.end(), scores.begin(), scores.end());
        }
        return out;
    }

    std::size_t network_calls() const noexcept { return calls_; }

private:
    void check() const {
        if (batch_size_ < 1) throw ConfigError("scoring batch size must be >= 1");
        if (retry_budget_ < 0) throw ConfigError("scoring retry budget must be >= 0");
    }

    static bool retryable(const TransportError& e) {
        if (auto* ee = dynamic_cast<const EndpointError*>(&e)) return ee->status() == 429 || ee->status() >= 500;
        return dynamic_cast<const ProtocolError*>(&e) == nullptr;
    }

    std::vector<double> score_batch(const std::vector<ScoreItem>& batch) {
        const auto body = request_body(batch);
        nlohmann::json reply;
        for (int attempt = 0;; ++attempt) {
            try {
                ++calls_;
                reply = poster_(body);
                break;
            } catch (const TransportError& e) {
                if (attempt >= retry_budget_ || !retryable(e)) throw;
            }
        }
        std::map<std::string, double> by_id;
        try {
            for (const auto& s : reply.at("scores")) {
                double v = s.at("score").get<double>();
                if (!std::isfinite(v)) throw ProtocolError("scoring service returned a non-finite score");
                by_id[s.at("id").get<std::string>()] = v;
            }
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError(std::string("malformed scoring response: ") + e.what());
        }
        std::vector<double> out;
        std::string missing;
        for (const auto& it : batch) {
            auto f = by_id.find(it.id);
            if (f == by_id.end()) {
                missing += (missing.empty() ? "" : ", ") + it.id;
                continue;
            }
            out.push_back(f->second);
        }
        if (!missing.empty()) throw ProtocolError("scoring response lacks ids: " + missing);
        return out;
    }

    Poster poster_;
    int retry_budget_;
    std::size_t batch_size_;
    std::size_t calls_ = 0;
};

}  // namespace nlecal
