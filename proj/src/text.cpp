#include "obsprobe/text.hpp"

#include <cctype>

#include "obsprobe/util.hpp"

namespace obsprobe::text {

namespace {

const std::set<std::string>& abbreviations() {
    static const std::set<std::string> abbr = {
        "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.", "vs.",
        "e.g.", "i.e.", "etc.", "u.s.", "u.k.", "no.", "inc.", "ltd.", "co.",
        "gov.", "sen.", "rep.", "gen.", "col.", "capt.", "lt.", "sgt.",
        "jan.", "feb.", "mar.", "apr.", "jun.", "jul.", "aug.", "sep.",
        "sept.", "oct.", "nov.", "dec.", "approx.", "dept.", "fig.",
    };
    return abbr;
}

// Final whitespace-delimited word ending at s[i] (inclusive), lowercased.
std::string trailing_word(std::string_view s, size_t i) {
    size_t b = i + 1;
    while (b > 0 && !std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return lowercase(s.substr(b, i - b + 1));
}

bool terminates_sentence(std::string_view s, size_t i) {
    char c = s[i];
    if (c != '.' && c != '!' && c != '?') return false;
    // must be followed by whitespace or end of string (closing quotes allowed)
    size_t j = i + 1;
    while (j < s.size() && (s[j] == '"' || s[j] == '\'' || s[j] == ')')) ++j;
    if (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) return false;
    if (c == '.') {
        std::string w = trailing_word(s, i);
        if (abbreviations().count(w)) return false;
        // single-letter initials like "J." inside names
        if (w.size() == 2 && std::isalpha(static_cast<unsigned char>(w[0]))) {
            if (j < s.size()) {
                // next non-space char uppercase suggests "J. Smith"
                size_t k = j;
                while (k < s.size() && std::isspace(static_cast<unsigned char>(s[k]))) ++k;
                if (k < s.size() && std::isupper(static_cast<unsigned char>(s[k]))) return false;
            }
        }
    }
    return true;
}

}  // namespace

std::vector<SentenceSpan> split_sentences(std::string_view s) {
    std::vector<SentenceSpan> out;
    size_t start = 0;
    auto flush = [&](size_t end_excl) {
        size_t b = start, e = end_excl;
        while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
        if (e > b) out.push_back({std::string(s.substr(b, e - b)), b, e});
        start = end_excl;
    };
    for (size_t i = 0; i < s.size(); ++i) {
        if (terminates_sentence(s, i)) {
            size_t j = i + 1;
            while (j < s.size() && (s[j] == '"' || s[j] == '\'' || s[j] == ')')) ++j;
            flush(j);
            i = j > 0 ? j - 1 : 0;
        }
    }
    flush(s.size());
    return out;
}

size_t count_sentence_terminators(std::string_view s) {
    size_t n = 0;
    for (size_t i = 0; i < s.size(); ++i) {
        if (terminates_sentence(s, i)) ++n;
    }
    return n;
}

std::vector<std::string> word_tokens(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!std::isspace(c) && (ch == '\'' || ch == '-') && !cur.empty()) {
            // keep intra-word apostrophes/hyphens: "can't", "well-known"
            cur.push_back(ch);
        } else if (!cur.empty()) {
            while (!cur.empty() && (cur.back() == '\'' || cur.back() == '-')) cur.pop_back();
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        }
    }
    while (!cur.empty() && (cur.back() == '\'' || cur.back() == '-')) cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::set<std::string> ngram_set(const std::vector<std::string>& tokens, size_t n) {
    std::set<std::string> out;
    if (n == 0 || tokens.size() < n) return out;
    for (size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string g = tokens[i];
        for (size_t j = 1; j < n; ++j) {
            g += ' ';
            g += tokens[i + j];
        }
        out.insert(std::move(g));
    }
    return out;
}

bool is_numeric_token(std::string_view tok) {
    bool has_digit = false;
    for (char ch : tok) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isdigit(c)) {
            has_digit = true;
        } else if (ch != '.' && ch != ',' && ch != '%' && ch != '-' && ch != '_' && ch != '$') {
            return false;
        }
    }
    return has_digit;
}

}  // namespace obsprobe::text
