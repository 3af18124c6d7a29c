#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace obsprobe::text {

/// A sentence plus its [begin, end) byte range in the source string.
struct SentenceSpan {
    std::string text;
    size_t begin = 0;
    size_t end = 0;
};

/// Split on '.', '!', '?' followed by whitespace or end-of-string, with an
/// abbreviation allowlist ("Mr.", "Dr.", "U.S." and friends never end a
/// sentence). Offsets cover the trimmed sentence text.
std::vector<SentenceSpan> split_sentences(std::string_view s);

/// Number of terminal punctuation marks ('.', '!', '?') that end a sentence
/// under the same rules as split_sentences.
size_t count_sentence_terminators(std::string_view s);

/// Case-folded, punctuation-stripped whitespace word tokens.
std::vector<std::string> word_tokens(std::string_view s);

/// Distinct n-grams over `tokens` (words joined with a single space).
std::set<std::string> ngram_set(const std::vector<std::string>& tokens, size_t n);

/// True if the token is entirely digits/._,%- with at least one digit.
bool is_numeric_token(std::string_view tok);

}  // namespace obsprobe::text
