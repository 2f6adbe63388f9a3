#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "nlecal/corpus.hpp"

using namespace nlecal;

TEST_CASE("qrels parsing", "[corpus]") {
    auto q = parse_qrels("q1 0 d7 2\n");
    REQUIRE(q.judgments.size() == 1);
    CHECK(q.judgments.at({"q1", "d7"}) == 2);
    CHECK(q.warnings.empty());

    CHECK(parse_qrels("").judgments.empty());
    CHECK(parse_qrels("\n\n").judgments.empty());

    auto dup = parse_qrels("q1 0 d7 1\nq1 0 d7 3\n");
    CHECK(dup.judgments.size() == 1);
    CHECK(dup.judgments.at({"q1", "d7"}) == 3);
    CHECK(dup.warnings.size() == 1);
}

TEST_CASE("qrels errors name the line", "[corpus]") {
    try {
        parse_qrels("q1 0 d1 1\n\nq1 0 d2\n", "x.qrels");
        FAIL("expected parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
        CHECK(std::string(e.what()).find("x.qrels:3") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_qrels("q1 0 d1 two\n"), ParseError);
    CHECK_THROWS_AS(parse_qrels("q1 0 d1 -1\n"), ValidationError);
}

TEST_CASE("run parsing re-sorts and re-ranks", "[corpus]") {
    auto one = parse_run("q1 Q0 d1 1 0.9 t\n");
    REQUIRE(one.size() == 1);
    CHECK(one[0] == RunRecord{"q1", "d1", 1, 0.9, "t"});

    auto ties = parse_run("q1 Q0 d2 1 0.5 t\nq1 Q0 d1 2 0.5 t\n");
    REQUIRE(ties.size() == 2);
    CHECK(ties[0].doc_id == "d1");
    CHECK(ties[1].doc_id == "d2");

    auto rerank = parse_run("q1 Q0 a 2 0.9 t\nq1 Q0 b 1 0.1 t\n");
    CHECK(rerank[0].doc_id == "a");
    CHECK(rerank[0].rank == 1);
    CHECK(rerank[1].rank == 2);

    CHECK_THROWS_AS(parse_run("q1 Q0 a 1 high t\n"), ParseError);
    CHECK_THROWS_AS(parse_run("q1 Q0 a x 0.1 t\n"), ParseError);
    try {
        parse_run("q1 Q0 a 1 0.5 t\nq1 Q0 b 2 nan? t\n");
        FAIL("expected parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("run output is a valid ranking per query", "[corpus]") {
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<RunRecord> recs;
    for (int q = 0; q < 5; ++q)
        for (int d = 0; d < 12; ++d) recs.push_back({"q" + std::to_string(q), "d" + std::to_string(d), 1, std::round(u(rng) * 4) / 4, "t"});
    std::shuffle(recs.begin(), recs.end(), rng);
    auto run = normalize_run(recs);
    for (const auto& [qid, list] : group_by_query(run)) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            CHECK(list[i].rank == static_cast<int>(i + 1));
            if (i > 0) CHECK(list[i - 1].score >= list[i].score);
        }
    }
}

TEST_CASE("pairs loading infers the scale", "[corpus]") {
    auto line = [](std::string q, std::string d, int label, std::string split) {
        return R"({"query_id":")" + q + R"(","query":"text of )" + q + R"(","doc_id":")" + d + R"(","text":"doc )" + d +
               R"(","label":)" + std::to_string(label) + R"(,"split":")" + split + "\"}\n";
    };
    auto trec = parse_pairs(line("q1", "d1", 3, "train"));
    CHECK(trec.scale.max_grade == 3);
    CHECK(trec.scale.classes() == 4);

    std::string ntcir;
    for (int g = 0; g <= 4; ++g) ntcir += line("q1", "d" + std::to_string(g), g, "test");
    CHECK(parse_pairs(ntcir).scale.classes() == 5);

    CHECK_THROWS_WITH(parse_pairs(""), Catch::Matchers::ContainsSubstring("empty collection"));
    CHECK_THROWS_AS(parse_pairs(line("q1", "d1", 5, "train"), Scale{3}), ValidationError);
    CHECK_THROWS_AS(parse_pairs(line("q1", "d1", 1, "train") + line("q1", "d2", 1, "test")), ValidationError);
    CHECK_THROWS_AS(parse_pairs(line("q1", "d1", 1, "train") + line("q1", "d1", 2, "train")), ValidationError);
    CHECK_THROWS_AS(parse_pairs(R"({"query_id":"q","doc_id":"d"})"), ParseError);
    CHECK_THROWS_AS(parse_pairs(line("q1", "d1", 1, "holdout")), ParseError);
    CHECK_THROWS_AS(parse_pairs("{not json}\n"), ParseError);
}

TEST_CASE("collection subset keeps one split", "[corpus]") {
    JudgedCollection c;
    c.scale = Scale{2};
    for (auto [q, s] : {std::pair{"a", Split::train}, {"b", Split::validation}, {"c", Split::test}}) {
        c.queries[q] = std::string("query ") + q;
        c.query_split[q] = s;
        c.labels[{q, "d"}] = 1;
        c.docs[{q, "d"}] = "doc";
    }
    c.validate();
    auto t = c.subset(Split::test);
    CHECK(t.query_ids() == std::vector<std::string>{"c"});
    CHECK(t.labels.size() == 1);
    CHECK(c.query_ids(Split::validation) == std::vector<std::string>{"b"});
}
