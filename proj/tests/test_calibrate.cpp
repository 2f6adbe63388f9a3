#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "nlecal/calibrate.hpp"
#include "nlecal/metrics.hpp"
#include "oracles.hpp"

using namespace nlecal;
using Catch::Approx;

namespace {

std::vector<NleSample> binary_samples(int rel, int non, int unparsed) {
    std::vector<NleSample> out;
    int idx = 0;
    auto add = [&](int count, const char* text) {
        for (int i = 0; i < count; ++i) out.push_back(make_sample("q", "d", PromptKind::binary, idx++, text, 0.7, "m"));
    };
    add(rel, "Relevant");
    add(non, "Nonrelevant");
    add(unparsed, "I cannot say.");
    return out;
}

}  // namespace

TEST_CASE("platt_apply closed forms", "[calibrate]") {
    std::vector<double> s = {-3.0, 0.0, 5.5};
    for (double v : platt_apply(PlattParams{}, s)) CHECK(v == Approx(1.0).epsilon(1e-15));
    CHECK(platt_apply({1.0, 0.0}, std::vector<double>{0.0})[0] == 0.5);
    CHECK(platt_apply({2.0, 0.0}, std::vector<double>{std::log(2.0)})[0] == Approx(2.0).epsilon(1e-15));
    try {
        platt_apply({1.0, 0.0}, std::vector<double>{1.0, 701.0});
        FAIL("expected saturation");
    } catch (const SaturationError& e) {
        CHECK(e.index() == 1);
    }
}

TEST_CASE("platt_apply monotonicity follows the sign of w", "[calibrate]") {
    std::vector<double> s = {-1.0, 0.5, 2.0, 3.0};
    auto up = platt_apply({0.7, 0.1}, s);
    auto down = platt_apply({-0.7, 0.1}, s);
    for (std::size_t i = 1; i < s.size(); ++i) {
        CHECK(up[i] > up[i - 1]);
        CHECK(down[i] < down[i - 1]);
    }
}

TEST_CASE("platt_fit recovers the forward model", "[calibrate]") {
    std::vector<double> s, y;
    for (int i = 0; i <= 40; ++i) {
        s.push_back(-2.0 + 0.1 * i);
        y.push_back(std::exp(s.back()) / 2.0);
    }
    auto p = platt_fit(s, y);
    CHECK(std::abs(p.w - 1.0) < 1e-3);
    CHECK(std::abs(p.b) < 1e-3);
    CHECK(p.n_points == s.size());
    CHECK(p.fit_mse < 1e-8);
}

TEST_CASE("platt_fit on constant labels stays constant", "[calibrate]") {
    std::vector<double> s = {-1, 0, 1, 2}, y = {1, 1, 1, 1};
    auto p = platt_fit(s, y);
    CHECK(std::abs(p.w) < 1e-6);
    CHECK(std::abs(p.b - std::log(2.0)) < 1e-6);
}

TEST_CASE("platt_fit preconditions and determinism", "[calibrate]") {
    CHECK_THROWS_AS(platt_fit(std::vector<double>{1.0}, std::vector<double>{1.0}), UsageError);
    CHECK_THROWS_AS(platt_fit(std::vector<double>{1.0, NAN}, std::vector<double>{1.0, 0.0}), NumericError);
    std::vector<double> s = {0.1, 0.4, 0.9, 1.3, 2.0}, y = {0, 0, 1, 2, 3};
    auto a = platt_fit(s, y), b = platt_fit(s, y);
    CHECK(a.w == b.w);
    CHECK(a.b == b.b);
    auto back = platt_from_json(nlohmann::json::parse(to_json(a).dump()));
    CHECK(back.w == a.w);
    CHECK(back.b == a.b);
}

TEST_CASE("platt with positive w preserves rankings", "[calibrate]") {
    std::mt19937 rng(21);
    std::normal_distribution<double> z(0, 2);
    std::uniform_int_distribution<int> grade(0, 3);
    std::uniform_real_distribution<double> wdist(0.05, 3.0), bdist(-2, 2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(20);
        std::vector<int> g(20);
        for (auto& v : s) v = z(rng);
        for (auto& v : g) v = grade(rng);
        PlattParams p{wdist(rng), bdist(rng)};
        auto t = platt_apply(p, s);
        REQUIRE(oracle::argsort_desc(t) == oracle::argsort_desc(s));
        auto ranked = [&](const std::vector<double>& v) {
            std::vector<int> out;
            for (auto i : oracle::argsort_desc(v)) out.push_back(g[i]);
            return out;
        };
        REQUIRE(std::abs(ndcg(ranked(s)) - ndcg(ranked(t))) < 1e-12);
    }
}

TEST_CASE("pl_confidence", "[calibrate]") {
    CHECK(pl_confidence(binary_samples(13, 7, 0)) == Approx(0.65).epsilon(1e-15));
    CHECK(pl_confidence(binary_samples(20, 0, 0)) == 1.0);
    CHECK(pl_confidence(binary_samples(10, 5, 5)) == Approx(10.0 / 15.0).epsilon(1e-15));
    CHECK_THROWS_AS(pl_confidence(binary_samples(0, 0, 20)), DataError);
    // only the first n samples count
    CHECK(pl_confidence(binary_samples(5, 5, 0), 5) == 1.0);
    for (int r = 0; r <= 10; ++r) {
        auto s = binary_samples(r, 10 - r, 3);
        double c = pl_confidence(s);
        CHECK(c == Approx(1.0 - (10.0 - r) / 10.0).margin(1e-15));
    }
    auto mixed = binary_samples(2, 2, 0);
    mixed[1].doc_id = "other";
    CHECK_THROWS_AS(pl_confidence(mixed), UsageError);
}
