#pragma once

// Rule-based sentence segmentation and ROUGE-L (F1) sentence similarity.

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "nlecal/util.hpp"

namespace nlecal {

inline bool is_alnum_ascii(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

// Lowercased ASCII alphanumeric runs. Every other byte is a separator.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text) {
        if (is_alnum_ascii(c)) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

struct Sentence {
    std::string text;
    std::vector<std::string> tokens;

    Sentence() = default;
    explicit Sentence(std::string t) : text(std::move(t)), tokens(tokenize(text)) {}
    bool operator==(const Sentence& o) const { return text == o.text; }
};

// Splits after '.', '!' or '?' when followed by whitespace or end of input.
// Segments are trimmed; empty segments are dropped.
inline std::vector<Sentence> split_sentences(std::string_view text) {
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    std::vector<Sentence> out;
    std::size_t start = 0;
    auto flush = [&](std::size_t end) {
        auto seg = util::trim(text.substr(start, end - start));
        if (!seg.empty()) out.emplace_back(std::string(seg));
        start = end;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if ((c == '.' || c == '!' || c == '?') && (i + 1 == text.size() || is_space(text[i + 1]))) flush(i + 1);
    }
    flush(text.size());
    return out;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// ROUGE-L F1 with P = lcs/|b|, R = lcs/|a|.
inline double rouge_l(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0.0;
    const auto l = static_cast<double>(lcs_length(a, b));
    if (l == 0.0) return 0.0;
    const double p = l / static_cast<double>(b.size());
    const double r = l / static_cast<double>(a.size());
    return 2.0 * p * r / (p + r);
}

inline double rouge_l(const Sentence& a, const Sentence& b) { return rouge_l(a.tokens, b.tokens); }

// Recorded in reports so similarity settings are auditable.
inline constexpr std::string_view kTextNormalization = "lowercase ascii alphanumeric tokens; rouge-l f1";

}  // namespace nlecal
