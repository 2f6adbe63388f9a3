#pragma once

// Test fixtures shared by the pipeline tests and the acceptance binary.

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "nlecal/corpus.hpp"
#include "nlecal/util.hpp"

namespace fixture {

// Queries are three topic words; a document of grade g mentions g of them
// among filler words drawn from other topics.
inline nlecal::JudgedCollection synthetic_collection(int n_queries = 12, int docs_per_query = 8, unsigned seed = 7) {
    static const std::vector<std::string> vocab = {
        "solar",  "panel",  "roof",   "battery", "river",  "bridge", "flood",   "harbor", "violin", "concert",
        "melody", "stage",  "garden", "tomato",  "soil",   "compost", "rocket", "orbit",  "launch", "fuel",
        "coffee", "roast",  "brew",   "grinder", "glacier", "ice",    "melt",    "climate", "python", "compiler",
        "syntax", "parser", "whale",  "ocean",   "sonar",  "krill",  "castle",  "tower",  "siege",  "moat",
        "bread",  "yeast",  "oven",   "flour",   "chess",  "opening", "endgame", "pawn"};
    std::mt19937 rng(seed);
    nlecal::JudgedCollection c;
    c.scale = nlecal::Scale{3};
    for (int q = 0; q < n_queries; ++q) {
        std::string qid = "q" + std::to_string(100 + q);
        std::vector<std::string> terms;
        for (int t = 0; t < 3; ++t) terms.push_back(vocab[static_cast<std::size_t>((4 * q + t) % vocab.size())]);
        c.queries[qid] = terms[0] + " " + terms[1] + " " + terms[2];
        nlecal::Split split = q < n_queries / 2           ? nlecal::Split::train
                              : q < n_queries / 2 + n_queries / 6 ? nlecal::Split::validation
                                                                  : nlecal::Split::test;
        c.query_split[qid] = split;
        for (int d = 0; d < docs_per_query; ++d) {
            int grade = d % 4;
            std::vector<std::string> words(terms.begin(), terms.begin() + grade);
            while (words.size() < 7) {
                const auto& w = vocab[rng() % vocab.size()];
                if (std::find(terms.begin(), terms.end(), w) == terms.end()) words.push_back(w);
            }
            std::shuffle(words.begin(), words.end(), rng);
            std::string text;
            for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
            nlecal::PairKey key{qid, "d" + std::to_string(d)};
            c.docs[key] = text + ".";
            c.labels[key] = grade;
        }
    }
    c.validate();
    return c;
}

// A run whose scores track the labels with seeded noise.
inline std::vector<nlecal::RunRecord> noisy_run(const nlecal::JudgedCollection& c, double noise, unsigned seed = 3) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> z(0.0, noise);
    std::map<nlecal::PairKey, double> scores;
    for (const auto& [k, g] : c.labels) scores[k] = g + z(rng);
    return nlecal::make_run(scores, "noisy");
}

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("nlecal-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::string str(const std::string& name = "") const { return name.empty() ? path_.string() : (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace fixture
