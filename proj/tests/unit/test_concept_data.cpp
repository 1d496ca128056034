#include <doctest.h>

#include <sstream>

#include "steerkit/concept_data.hpp"
#include "steerkit/errors.hpp"
#include "support.hpp"

using namespace steerkit;

namespace {

ConceptSet parse(const std::string& doc) {
    std::istringstream in(doc);
    return load_concept_set(in);
}

const char* kHeader = "taxonomy: counting\ndefinition: how many objects\n";

ActivationTrace sentence_trace(const std::vector<std::pair<std::string, TokenRole>>& toks, std::int32_t sid = 0) {
    std::vector<TokenRecord> records;
    for (std::size_t i = 0; i < toks.size(); ++i) records.push_back({toks[i].first, std::uint32_t(i), toks[i].second, sid});
    return ActivationTrace("m", 2, {0}, records, {{sentence_key(sid), "s"}});
}

}  // namespace

TEST_CASE("load_concept_set parses rows") {
    const auto set = parse(std::string(kHeader) +
                           "There are three apples in the basket\tthree\nThe cat is on the table\ton\n");
    CHECK(set.taxonomy == Taxonomy::counting);
    CHECK(set.definition == "how many objects");
    REQUIRE(set.size() == 2);
    CHECK(set.pairs[0].anchor == "three");
    CHECK(set.pairs[0].sentence_id == 0);
    CHECK(set.pairs[1].sentence_id == 1);
}

TEST_CASE("K=20 rows gives K=20") {
    CHECK(test::counting_set(20).size() == 20);
}

TEST_CASE("anchor absent from sentence names the row") {
    try {
        parse(std::string(kHeader) + "There are three apples\tthree\nThere are four pears\tfive\n");
        FAIL("expected error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("five") != std::string::npos);
        CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
}

TEST_CASE("K < 2 and malformed headers are rejected") {
    CHECK_THROWS_AS(parse(std::string(kHeader) + "There are three apples\tthree\n"), ValidationError);
    CHECK_THROWS_AS(parse("definition: x\nThere are three apples\tthree\nTwo cats\tTwo\n"), ValidationError);
    CHECK_THROWS_AS(parse("taxonomy: colour\ndefinition: x\na b\tb\nc d\td\n"), ValidationError);
    CHECK_THROWS_AS(parse(std::string(kHeader) + "no tab here\n"), ValidationError);
}

TEST_CASE("anchors must match whole words") {
    CHECK(contains_word("The cat is on the table", "on"));
    CHECK_FALSE(contains_word("The cat is onto the table", "on"));
    CHECK(contains_word("left of the car.", "car"));
    CHECK_THROWS_AS(parse(std::string(kHeader) + "Bonbons everywhere\ton\nTwo cats\tTwo\n"), ValidationError);
}

TEST_CASE("taxonomy names") {
    CHECK(parse_taxonomy("spatial relationship") == Taxonomy::spatial_relationship);
    CHECK(parse_taxonomy("entity") == Taxonomy::entity);
    CHECK(to_string(Taxonomy::attribute) == "attribute");
    CHECK_THROWS(parse_taxonomy("texture"));
}

TEST_CASE("write then load round-trips") {
    const auto set = test::counting_set(5);
    std::ostringstream out;
    write_concept_set(set, out);
    const auto back = parse(out.str());
    REQUIRE(back.size() == 5);
    CHECK(back.pairs[3].sentence == set.pairs[3].sentence);
    CHECK(back.definition == set.definition);
}

TEST_CASE("partition: single anchor") {
    const auto set = test::counting_set(2);
    const auto t = sentence_trace({{"There", TokenRole::text},
                                   {"are", TokenRole::text},
                                   {"many", TokenRole::text},
                                   {"three", TokenRole::anchor},
                                   {"apples", TokenRole::text},
                                   {".", TokenRole::text}});
    const auto p = partition_tokens(set, t);
    CHECK(p.anchor_indices == std::set<std::uint32_t>{3});
    CHECK(p.control_indices == std::set<std::uint32_t>{0, 1, 2, 4, 5});
}

TEST_CASE("partition: multi-subtoken anchor keeps the final subtoken") {
    const auto set = test::counting_set(2);
    const auto t = sentence_trace({{"There", TokenRole::text},
                                   {"are", TokenRole::text},
                                   {"x", TokenRole::text},
                                   {"th", TokenRole::anchor},
                                   {"ree", TokenRole::anchor},
                                   {"apples", TokenRole::text}});
    const auto p = partition_tokens(set, t);
    CHECK(p.anchor_indices == std::set<std::uint32_t>{4});
    CHECK_FALSE(p.control_indices.contains(3));
    CHECK_FALSE(p.control_indices.contains(4));
}

TEST_CASE("partition: no anchors or no controls is an error") {
    const auto set = test::counting_set(2);
    CHECK_THROWS_AS(partition_tokens(set, sentence_trace({{"a", TokenRole::text}, {"b", TokenRole::text}})), ValidationError);
    CHECK_THROWS_AS(partition_tokens(set, sentence_trace({{"three", TokenRole::anchor}, {"A", TokenRole::output}})),
                    ValidationError);
}

TEST_CASE("partition invariants on random traces") {
    const auto set = test::counting_set(2);
    rng::Generator g(77);
    int checked = 0;
    for (int iter = 0; iter < 1000; ++iter) {
        const auto t = test::random_trace(g, 2, 1 + g.below(40), 1);
        TokenPartition p;
        try {
            p = partition_tokens(set, t);
        } catch (const ValidationError&) {
            continue;
        }
        ++checked;
        std::size_t anchor_tokens = 0;
        std::set<std::int32_t> anchor_sentences;
        for (const auto& tok : t.tokens()) {
            if (tok.role == TokenRole::anchor) {
                ++anchor_tokens;
                anchor_sentences.insert(tok.sentence_id);
            }
        }
        CHECK(p.anchor_indices.size() <= anchor_tokens);
        for (auto i : p.anchor_indices) CHECK_FALSE(p.control_indices.contains(i));
        for (auto i : p.control_indices) {
            const auto& tok = t.tokens()[t.token_position(i)];
            CHECK(anchor_sentences.contains(tok.sentence_id));
            CHECK(tok.role != TokenRole::output);
        }
    }
    CHECK(checked > 50);
}
