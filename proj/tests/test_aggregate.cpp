#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "nlecal/aggregate.hpp"
#include "oracles.hpp"

using namespace nlecal;

namespace {

std::vector<std::string> texts(const MetaNle& m) {
    std::vector<std::string> out;
    for (const auto& s : m.sentences) out.push_back(s.text);
    return out;
}

AggregationParams params(double lambda, int k_l, int k_s) { return {lambda, k_l, k_s}; }

PairContext pair(std::string q, std::string d, std::optional<int> gold = std::nullopt) {
    return {q, d, "query " + q, "document " + d, gold};
}

std::vector<std::string> random_samples(std::mt19937& rng, int count) {
    static const std::vector<std::string> vocab = {"dogs", "bark", "cats", "meow", "birds", "sing", "loud", "at", "night", "the"};
    std::uniform_int_distribution<int> nsent(1, 3), len(1, 5), word(0, static_cast<int>(vocab.size()) - 1);
    std::vector<std::string> out;
    for (int i = 0; i < count; ++i) {
        std::string s;
        for (int j = nsent(rng); j > 0; --j) {
            for (int w = len(rng); w > 0; --w) s += vocab[static_cast<std::size_t>(word(rng))] + " ";
            s.back() = '.';
            s += ' ';
        }
        out.push_back(s);
    }
    return out;
}

}  // namespace

TEST_CASE("aggregate worked examples", "[aggregate]") {
    auto m = aggregate(std::vector<std::string>{"Dogs bark. Cats meow.", "Dogs bark. Birds sing."}, params(0.35, 2, 30));
    CHECK(texts(m) == std::vector<std::string>{"Dogs bark.", "Cats meow.", "Birds sing."});
    CHECK(m.source_sample_count == 2);
    CHECK(m.text() == "Dogs bark. Cats meow. Birds sing.");

    auto early = aggregate(std::vector<std::string>{"A B C. D E F."}, params(0.35, 20, 1));
    CHECK(texts(early) == std::vector<std::string>{"A B C."});

    std::vector<std::string> same(5, "Alpha beta. Gamma delta.");
    auto rep = aggregate(same, params(0.35, 5, 30));
    CHECK(texts(rep) == std::vector<std::string>{"Alpha beta.", "Gamma delta."});
    CHECK(rep.source_sample_count == 5);
}

TEST_CASE("aggregate admits similarity equal to lambda", "[aggregate]") {
    // rouge_l("a b", "a c") = 0.5
    auto at = aggregate(std::vector<std::string>{"a b. a c."}, params(0.5, 1, 30));
    CHECK(at.sentences.size() == 2);
    auto below = aggregate(std::vector<std::string>{"a b. a c."}, params(0.49, 1, 30));
    CHECK(below.sentences.size() == 1);
}

TEST_CASE("aggregate budgets and shortfall", "[aggregate]") {
    int pulled = 0;
    SampleSource endless = [&]() -> std::optional<std::string> { return "unique " + std::to_string(pulled++) + " words."; };
    auto m = aggregate(endless, params(0.99, 4, 30));
    CHECK(pulled == 4);
    CHECK(m.source_sample_count == 4);
    CHECK_FALSE(m.has_flag("shortfall"));

    auto short_src = aggregate(std::vector<std::string>{"only one."}, params(0.35, 3, 30));
    CHECK(short_src.has_flag("shortfall"));
    CHECK(short_src.source_sample_count == 1);

    CHECK_THROWS_AS(aggregate(std::vector<std::string>{"", "   "}, params(0.35, 2, 30)), EmptyMetaError);
    CHECK_THROWS_AS(aggregate(std::vector<std::string>{"x."}, params(1.5, 2, 30)), ConfigError);
    CHECK_THROWS_AS(aggregate(std::vector<std::string>{"x."}, params(0.3, 0, 30)), ConfigError);
}

TEST_CASE("aggregate matches the reference loop", "[aggregate]") {
    std::mt19937 rng(99);
    std::uniform_real_distribution<double> lam(0.0, 1.0);
    std::uniform_int_distribution<int> kl(1, 8), ks(1, 12);
    for (int trial = 0; trial < 300; ++trial) {
        auto samples = random_samples(rng, 8);
        AggregationParams p{lam(rng), kl(rng), ks(rng)};
        auto [want, consumed] = oracle::aggregate_reference(samples, oracle::split_reference, oracle::rouge_reference, p.lambda, p.k_l, p.k_s);
        auto got = aggregate(samples, p);
        REQUIRE(texts(got) == want);
        REQUIRE(got.source_sample_count == consumed);
    }
}

TEST_CASE("aggregate properties", "[aggregate]") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        auto samples = random_samples(rng, 10);
        AggregationParams loose{0.6, 10, 30}, strict{0.3, 10, 30};
        auto a = aggregate(samples, loose);
        auto b = aggregate(samples, strict);
        // novelty invariant and budgets
        for (const auto* m : {&a, &b}) {
            REQUIRE(static_cast<int>(m->sentences.size()) <= m->params.k_s);
            REQUIRE(m->source_sample_count <= m->params.k_l);
            for (std::size_t j = 1; j < m->sentences.size(); ++j)
                for (std::size_t i = 0; i < j; ++i) REQUIRE(rouge_l(m->sentences[j], m->sentences[i]) <= m->params.lambda);
        }
    }
}

TEST_CASE("stricter lambda need not keep a subsequence", "[aggregate]") {
    // B is admitted at 0.6 and then blocks C; at 0.3 B is rejected, so C
    // (close to B, far from A) gets in.
    std::vector<std::string> s = {"p q r s. p q t u. q t u."};
    auto loose = aggregate(s, {0.6, 1, 30});
    auto strict = aggregate(s, {0.3, 1, 30});
    CHECK(texts(loose) == std::vector<std::string>{"p q r s.", "p q t u."});
    CHECK(texts(strict) == std::vector<std::string>{"p q r s.", "q t u."});
    CHECK_FALSE(oracle::is_subsequence(texts(strict), texts(loose)));
}

TEST_CASE("diverse samples yield longer metas than repetitive ones", "[aggregate]") {
    std::vector<std::string> diverse = {"Solar panels cut bills.", "Batteries store excess power.", "Grid ties allow net metering.",
                                        "Roof angle affects output.", "Inverters convert current."};
    std::vector<std::string> repetitive(5, "Solar panels cut bills.");
    auto d = aggregate(diverse, {0.35, 5, 30});
    auto r = aggregate(repetitive, {0.35, 5, 30});
    CHECK(d.sentences.size() > r.sentences.size());
}

TEST_CASE("selection strategies", "[aggregate]") {
    AggregationParams p{0.35, 4, 30};

    SECTION("most_probable wraps one greedy sample") {
        auto t = std::make_shared<ScriptedTransport>(std::vector<std::string>{"Relevant. First point. Second point."});
        Sampler s(SamplerConfig{}, t);
        auto out = select(pair("q", "d"), ExplanationMode::literal, {SelectionKind::most_probable, 20, std::nullopt}, s, p);
        REQUIRE(out.size() == 1);
        CHECK(texts(out[0]) == std::vector<std::string>{"First point.", "Second point."});
        CHECK(t->calls() == 1);
        CHECK(out[0].source_sample_count == 1);
    }

    SECTION("aggregate_mc uses the explanation field") {
        auto t = std::make_shared<ScriptedTransport>(std::vector<std::string>{"Relevant. Dogs bark.", "Relevant. Cats meow."});
        Sampler s(SamplerConfig{}, t);
        auto out = select(pair("q", "d"), ExplanationMode::literal, {SelectionKind::aggregate_mc, 20, std::nullopt}, s, p);
        REQUIRE(out.size() == 1);
        CHECK(texts(out[0]) == std::vector<std::string>{"Dogs bark.", "Cats meow."});
        CHECK(out[0].polarity == Polarity::literal);
    }

    SECTION("conditional mode returns both polarities") {
        Sampler s(SamplerConfig{}, std::make_shared<SyntheticTransport>(3));
        auto out = select(pair("q", "d"), ExplanationMode::conditional, {SelectionKind::aggregate_mc, 20, std::nullopt}, s, p);
        REQUIRE(out.size() == 2);
        CHECK(out[0].polarity == Polarity::relevant);
        CHECK(out[1].polarity == Polarity::nonrelevant);
    }

    SECTION("empty aggregations become a flagged placeholder") {
        Sampler s(SamplerConfig{}, std::make_shared<ScriptedTransport>(std::vector<std::string>{"Relevant."}));
        auto out = select(pair("q", "d"), ExplanationMode::literal, {SelectionKind::aggregate_mc, 20, std::nullopt}, s, p);
        CHECK(out[0].text() == "no explanation");
        CHECK(out[0].has_flag("empty_meta"));
    }

    SECTION("oracle stops at the first matching sample") {
        auto t = std::make_shared<ScriptedTransport>(std::vector<std::string>{"Relevant. Matches well."});
        Sampler s(SamplerConfig{}, t);
        SelectionStrategy st{SelectionKind::oracle, 20, 2};
        auto out = select(pair("q", "d", 3), ExplanationMode::literal, st, s, p);
        CHECK(t->calls() == 1);
        CHECK_FALSE(out[0].has_flag("oracle_fallback"));
        CHECK(out[0].text() == "Matches well.");
    }

    SECTION("oracle falls back after max_tries mismatches") {
        auto t = std::make_shared<ScriptedTransport>(std::vector<std::string>{"Nonrelevant. Off topic."});
        Sampler s(SamplerConfig{}, t);
        SelectionStrategy st{SelectionKind::oracle, 20, 2};
        auto out = select(pair("q", "d", 3), ExplanationMode::literal, st, s, p);
        CHECK(t->calls() == 21);
        CHECK(out[0].has_flag("oracle_fallback"));
    }

    SECTION("oracle preconditions") {
        Sampler s(SamplerConfig{}, std::make_shared<SyntheticTransport>());
        CHECK_THROWS_AS(select(pair("q", "d"), ExplanationMode::literal, {SelectionKind::oracle, 20, 2}, s, p), UsageError);
        CHECK_THROWS_AS(select(pair("q", "d", 1), ExplanationMode::literal, {SelectionKind::oracle, 20, std::nullopt}, s, p), UsageError);
    }
}

TEST_CASE("oracle flags only the pairs that fell back", "[aggregate]") {
    // The synthetic judge says relevant for full overlap, so the pair whose
    // gold disagrees needs the fallback.
    Sampler s(SamplerConfig{}, std::make_shared<SyntheticTransport>(5));
    std::vector<PairContext> pairs = {{"q1", "d1", "solar power", "solar power panels", 3}, {"q2", "d2", "solar power", "solar power", 0}};
    auto out = select_all(pairs, ExplanationMode::literal, {SelectionKind::oracle, 5, 2}, s, {0.35, 4, 30});
    CHECK_FALSE(out[0][0].has_flag("oracle_fallback"));
    CHECK(out[1][0].has_flag("oracle_fallback"));
}

TEST_CASE("binarization threshold default", "[aggregate]") {
    CHECK(default_binarization_threshold(3) == 2);
    CHECK(default_binarization_threshold(4) == 2);
    CHECK(default_binarization_threshold(1) == 1);
}

TEST_CASE("meta JSON lines round trip", "[aggregate]") {
    auto m = aggregate(std::vector<std::string>{"Dogs bark. Cats meow."}, params(0.35, 2, 30));
    m.query_id = "q";
    m.doc_id = "d";
    m.polarity = Polarity::nonrelevant;
    auto text = format_metas({m, m});
    auto back = parse_metas(text);
    REQUIRE(back.size() == 2);
    CHECK(texts(back[0]) == texts(m));
    CHECK(back[0].polarity == Polarity::nonrelevant);
    CHECK(back[0].has_flag("shortfall"));
    CHECK(format_metas(back) == text);
    CHECK_THROWS_AS(parse_metas("{\"query_id\":1}\n"), ParseError);
}
