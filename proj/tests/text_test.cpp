#include <doctest.h>

#include "obsprobe/text.hpp"

using namespace obsprobe::text;

TEST_CASE("split_sentences basic") {
    auto s = split_sentences("The dog barked. The cat slept! Did the bird sing?");
    REQUIRE(s.size() == 3);
    CHECK(s[0].text == "The dog barked.");
    CHECK(s[1].text == "The cat slept!");
    CHECK(s[2].text == "Did the bird sing?");
    CHECK(s[0].begin == 0);
    CHECK(s[0].end == 15);
    CHECK(s[1].begin == 16);
}

TEST_CASE("split_sentences abbreviation allowlist") {
    auto s = split_sentences("Dr. Smith visited the U.S. embassy. He left at noon.");
    REQUIRE(s.size() == 2);
    CHECK(s[0].text == "Dr. Smith visited the U.S. embassy.");
    CHECK(s[1].text == "He left at noon.");
}

TEST_CASE("split_sentences single-letter initial") {
    auto s = split_sentences("J. Smith wrote the report. It was long.");
    REQUIRE(s.size() == 2);
    CHECK(s[0].text == "J. Smith wrote the report.");
}

TEST_CASE("split_sentences closing quote after terminator") {
    auto s = split_sentences("She said \"stop.\" Then she left.");
    REQUIRE(s.size() == 2);
    CHECK(s[0].text == "She said \"stop.\"");
    CHECK(s[1].text == "Then she left.");
}

TEST_CASE("split_sentences no trailing terminator") {
    auto s = split_sentences("An unfinished thought");
    REQUIRE(s.size() == 1);
    CHECK(s[0].text == "An unfinished thought");
}

TEST_CASE("spans index into the source string") {
    std::string src = "  One here.   Two there.  ";
    auto s = split_sentences(src);
    REQUIRE(s.size() == 2);
    for (const auto& sp : s) {
        CHECK(src.substr(sp.begin, sp.end - sp.begin) == sp.text);
    }
}

TEST_CASE("count_sentence_terminators") {
    CHECK(count_sentence_terminators("One. Two. Three.") == 3);
    CHECK(count_sentence_terminators("Dr. Smith went home.") == 1);
    CHECK(count_sentence_terminators("no punctuation") == 0);
    CHECK(count_sentence_terminators("Really?!") >= 1);
}

TEST_CASE("word_tokens folds case and strips punctuation") {
    auto t = word_tokens("The dog's well-lit yard, 42%!");
    REQUIRE(t.size() == 5);
    CHECK(t[0] == "the");
    CHECK(t[1] == "dog's");
    CHECK(t[2] == "well-lit");
    CHECK(t[3] == "yard");
    CHECK(t[4] == "42");
}

TEST_CASE("ngram_set") {
    auto t = word_tokens("a b c b c");
    auto uni = ngram_set(t, 1);
    CHECK(uni == std::set<std::string>{"a", "b", "c"});
    auto bi = ngram_set(t, 2);
    CHECK(bi == std::set<std::string>{"a b", "b c", "c b"});
    CHECK(ngram_set(t, 6).empty());
    CHECK(ngram_set({}, 1).empty());
}

TEST_CASE("is_numeric_token") {
    CHECK(is_numeric_token("42"));
    CHECK(is_numeric_token("3.5"));
    CHECK(is_numeric_token("1,000"));
    CHECK(is_numeric_token("12%"));
    CHECK_FALSE(is_numeric_token("abc"));
    CHECK_FALSE(is_numeric_token("a1"));
    CHECK_FALSE(is_numeric_token("."));
}
