#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "nlecal/metrics.hpp"
#include "oracles.hpp"

using namespace nlecal;
using Catch::Approx;

TEST_CASE("ndcg worked examples", "[metrics]") {
    CHECK(ndcg(std::vector<int>{3, 2, 1, 0}) == 1.0);
    CHECK(ndcg(std::vector<int>{3, 0}) == 1.0);
    CHECK(dcg(std::vector<int>{0, 3}) == Approx(7.0 / std::log2(3.0)).epsilon(1e-15));
    CHECK(ndcg(std::vector<int>{0, 3}) == Approx(1.0 / std::log2(3.0)).epsilon(1e-15));
    CHECK(ndcg(std::vector<int>{0, 3}) == Approx(0.6309).margin(5e-5));
    CHECK(ndcg(std::vector<int>{0, 0, 0}) == 1.0);
    CHECK(ndcg(std::vector<int>{0, 1, 2}, 1) == 0.0);
    CHECK(ndcg(std::vector<int>{1, 2}, std::nullopt, Gain::linear) == Approx((1 + 2 / std::log2(3.0)) / (2 + 1 / std::log2(3.0))));
}

TEST_CASE("ndcg agrees with permutation enumeration", "[metrics]") {
    // every list of length 1..5 over grades 0..3 (length 6 runs in acceptance)
    for (int len = 1; len <= 5; ++len) {
        int total = 1;
        for (int i = 0; i < len; ++i) total *= 4;
        for (int code = 0; code < total; ++code) {
            std::vector<int> l;
            for (int c = code, i = 0; i < len; ++i, c /= 4) l.push_back(c % 4);
            double got = ndcg(l);
            REQUIRE(std::abs(got - oracle::ndcg_by_enumeration(l)) < 1e-12);
            REQUIRE(got <= 1.0 + 1e-15);
        }
    }
}

TEST_CASE("ece worked examples", "[metrics]") {
    std::vector<double> p = {0, 1, 2, 3}, y = {1, 1, 2, 2};
    auto r = ece(p, y, 2);
    CHECK(r.ece == 0.5);
    REQUIRE(r.reliability.bins.size() == 2);
    CHECK(r.reliability.bins[0].mean_prediction == 0.5);
    CHECK(r.reliability.bins[1].mean_label == 2.0);
    CHECK(ece(y, y).ece == 0.0);
    CHECK(ece(p, y, 1).ece == Approx(std::abs(1.5 - 1.5)).margin(1e-15));
    std::vector<double> p2 = {0.2, 0.9, 2.5}, y2 = {1, 0, 3};
    CHECK(ece(p2, y2, 1).ece == Approx(std::abs((0.2 + 0.9 + 2.5) / 3 - 4.0 / 3)).epsilon(1e-14));
}

TEST_CASE("ece bucket layout", "[metrics]") {
    std::vector<double> p = {5, 4, 3, 2, 1, 0, 6}, y(7, 0.0);
    auto r = ece(p, y, 3);  // 7 = 3 + 2 + 2
    REQUIRE(r.reliability.bins.size() == 3);
    CHECK(r.reliability.bins[0].count == 3);
    CHECK(r.reliability.bins[1].count == 2);
    CHECK(r.reliability.bins[2].count == 2);
    CHECK(r.reliability.bins[0].mean_prediction == 1.0);
    // more buckets than points: empty buckets are dropped
    CHECK(ece(std::vector<double>{1, 2}, std::vector<double>{1, 2}, 10).reliability.bins.size() == 2);
    // ties in prediction are broken by label
    auto t = ece(std::vector<double>{1, 1, 1, 1}, std::vector<double>{3, 0, 2, 1}, 2);
    CHECK(t.reliability.bins[0].mean_label == 0.5);
    CHECK(t.reliability.bins[1].mean_label == 2.5);
}

TEST_CASE("ece with singleton buckets is mean absolute error", "[metrics]") {
    std::mt19937 rng(4);
    std::uniform_real_distribution<double> u(0, 3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> p(13), y(13);
        for (auto& v : p) v = u(rng);
        for (auto& v : y) v = std::round(u(rng));
        double mae = 0;
        for (std::size_t i = 0; i < p.size(); ++i) mae += std::abs(p[i] - y[i]) / 13.0;
        REQUIRE(std::abs(ece(p, y, 13).ece - mae) < 1e-12);
        double e = ece(p, y).ece;
        REQUIRE(e >= 0.0);
        REQUIRE(e <= 3.0);
    }
}

TEST_CASE("cb_ece worked examples", "[metrics]") {
    std::vector<double> p = {0, 1, 2, 3};
    std::vector<int> y = {1, 1, 2, 2};
    auto r = cb_ece_detail(p, y, Scale{3});
    CHECK(r.per_class == std::vector<double>{1.5, 0.5, 0.5, 1.5});
    CHECK(r.cb_ece == 1.0);
    CHECK(r.empty_classes == std::vector<int>{0, 3});
    std::vector<double> exact = {0, 1, 2, 3};
    CHECK(cb_ece(exact, std::vector<int>{0, 1, 2, 3}, Scale{3}) == 0.0);
    CHECK_THROWS_AS(cb_ece(p, std::vector<int>{1, 1, 2, 5}, Scale{3}), UsageError);
}

namespace {

std::vector<int> labels_from_counts(const std::vector<int>& counts) {
    std::vector<int> out;
    for (std::size_t c = 0; c < counts.size(); ++c) out.insert(out.end(), static_cast<std::size_t>(counts[c]), static_cast<int>(c));
    return out;
}

}  // namespace

TEST_CASE("constant predictor CB-ECE is the mean distance to every class", "[metrics]") {
    std::mt19937 rng(17);
    std::uniform_int_distribution<int> classes(2, 5), count(0, 40);
    for (int trial = 0; trial < 300; ++trial) {
        int C = classes(rng);
        std::vector<int> counts(static_cast<std::size_t>(C));
        for (auto& c : counts) c = count(rng);
        auto labels = labels_from_counts(counts);
        if (labels.empty()) continue;
        int m = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        std::vector<double> pred(labels.size(), static_cast<double>(m));
        double want = 0;
        for (int c = 0; c < C; ++c) want += std::abs(c - m) / static_cast<double>(C);
        REQUIRE(std::abs(cb_ece(pred, labels, Scale{C - 1}) - want) < 1e-12);
    }
}

TEST_CASE("constant majority predictor on a skewed distribution", "[metrics]") {
    auto labels = labels_from_counts({58, 22, 14, 6});
    std::vector<double> pred(labels.size(), 0.0);
    std::vector<double> ld(labels.begin(), labels.end());
    CHECK(ece(pred, ld).ece == Approx(0.68).epsilon(1e-12));
    CHECK(cb_ece(pred, labels, Scale{3}) == Approx(1.5).epsilon(1e-12));

    // Two classes: a majority share above 1/2 always yields CB-ECE > ECE.
    for (int minority = 0; minority < 50; ++minority) {
        auto two = labels_from_counts({100 - minority, minority});
        std::vector<double> p(two.size(), 0.0), l(two.begin(), two.end());
        REQUIRE(cb_ece(p, two, Scale{1}) > ece(p, l).ece);
    }
}

TEST_CASE("majority share above 1/C does not force CB-ECE above ECE", "[metrics]") {
    // Mass far from the majority class inflates the pooled error.
    auto a = labels_from_counts({12, 24, 4, 22, 21});
    std::vector<double> pa(a.size(), 1.0), la(a.begin(), a.end());
    CHECK(ece(pa, la).ece == Approx(123.0 / 83.0).epsilon(1e-12));
    CHECK(cb_ece(pa, a, Scale{4}) == Approx(1.4).epsilon(1e-12));
    CHECK(ece(pa, la).ece > cb_ece(pa, a, Scale{4}));

    auto b = labels_from_counts({3, 3, 0, 4});
    std::vector<double> pb(b.size(), 3.0), lb(b.begin(), b.end());
    CHECK(ece(pb, lb).ece == Approx(1.5).epsilon(1e-12));
    CHECK(cb_ece(pb, b, Scale{3}) == Approx(1.5).epsilon(1e-12));
}

TEST_CASE("mse examples", "[metrics]") {
    CHECK(mse(std::vector<double>{1, 2}, std::vector<double>{1, 2}) == 0.0);
    CHECK(mse(std::vector<double>{0, 2}, std::vector<double>{1, 1}) == 1.0);
    CHECK(mse(std::vector<double>{3}, std::vector<double>{0}) == 9.0);
    CHECK_THROWS_AS(mse(std::vector<double>{3}, std::vector<double>{0, 1}), UsageError);
}

TEST_CASE("correlation closed forms", "[metrics]") {
    std::vector<double> x = {1, 2, 3, 4};
    std::vector<double> lin = {3, 5, 7, 9}, neg = {-1, -2, -3, -4}, swap = {1, 3, 2, 4};
    CHECK(std::abs(pearson(x, lin) - 1.0) < 1e-12);
    CHECK(std::abs(kendall(x, lin) - 1.0) < 1e-12);
    CHECK(std::abs(pearson(x, neg) + 1.0) < 1e-12);
    CHECK(std::abs(kendall(x, neg) + 1.0) < 1e-12);
    CHECK(std::abs(kendall(x, swap) - 4.0 / 6.0) < 1e-12);
    CHECK(std::abs(pearson(x, swap) - 0.8) < 1e-12);
    CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 1, 1, 1}), UndefinedCorrelation);
    CHECK_THROWS_AS(kendall(x, std::vector<double>{1, 1, 1, 1}), UndefinedCorrelation);
}

TEST_CASE("kendall tau-b against the pair-count reference", "[metrics]") {
    std::mt19937 rng(6);
    std::uniform_int_distribution<int> v(0, 4);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<double> x(9), y(9);
        for (auto& a : x) a = v(rng);
        for (auto& a : y) a = v(rng);
        double ref = oracle::kendall_reference(x, y);
        if (!std::isfinite(ref)) continue;
        REQUIRE(std::abs(kendall(x, y) - ref) < 1e-12);
    }
}

TEST_CASE("correlation invariances", "[metrics]") {
    std::mt19937 rng(12);
    std::normal_distribution<double> z;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(10), y(10);
        for (auto& a : x) a = z(rng);
        for (auto& a : y) a = z(rng);
        auto ax = x;
        for (auto& a : ax) a = 3.0 * a + 2.0;
        auto mx = x;
        for (auto& a : mx) a = std::exp(a);
        REQUIRE(std::abs(pearson(ax, y) - pearson(x, y)) < 1e-12);
        REQUIRE(std::abs(kendall(ax, y) - kendall(x, y)) < 1e-12);
        REQUIRE(std::abs(kendall(mx, y) - kendall(x, y)) < 1e-12);
    }
}

TEST_CASE("evaluate a run against judgments", "[metrics]") {
    std::map<PairKey, int> j = {{{"q1", "a"}, 3}, {{"q1", "b"}, 0}, {{"q1", "c"}, 1}, {{"q2", "x"}, 0}, {{"q2", "y"}, 2}};
    std::vector<RunRecord> run = {{"q1", "a", 1, 2.5, "t"}, {"q1", "b", 2, 0.5, "t"}, {"q1", "z", 3, 0.2, "t"},
                                  {"q2", "x", 1, 1.0, "t"}, {"q2", "y", 2, 0.8, "t"}, {"q3", "u", 1, 1.0, "t"}};
    auto rep = evaluate(run, j, Scale{3});
    CHECK(rep.n_queries == 2);
    CHECK(rep.n_pairs == 4);
    // q1: ranked [3,0,0] vs ideal [3,1,0] (c judged but not retrieved)
    double q1 = 7.0 / (7.0 + 1.0 / std::log2(3.0));
    double q2 = (3.0 / std::log2(3.0)) / 3.0;
    CHECK(rep.per_query_ndcg_at_k.at("q1") == Approx(q1).epsilon(1e-14));
    CHECK(rep.per_query_ndcg_at_k.at("q2") == Approx(q2).epsilon(1e-14));
    CHECK(rep.ndcg == Approx((q1 + q2) / 2).epsilon(1e-14));
    CHECK(rep.mse == Approx(((2.5 - 3) * (2.5 - 3) + 0.25 + 1 + (0.8 - 2) * (0.8 - 2)) / 4).epsilon(1e-14));
    double mean_cb = 0;
    for (double v : rep.per_class_ece) mean_cb += v / 4.0;
    CHECK(rep.cb_ece == Approx(mean_cb).epsilon(1e-14));
    auto js = to_json(rep);
    CHECK(js.contains("ndcg_at_10"));
    CHECK(js.contains("per_query_ndcg_at_10"));
    CHECK(reliability_csv(rep.reliability).rfind("mean_prediction,mean_label,count\n", 0) == 0);
    CHECK_THROWS_AS(evaluate({{"q9", "a", 1, 1.0, "t"}}, j, Scale{3}), DataError);
}
