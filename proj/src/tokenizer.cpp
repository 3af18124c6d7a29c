#include "obsprobe/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <climits>

#include <json.hpp>

namespace obsprobe::tok {

using nlohmann::json;

namespace {

constexpr const char* kEot = "<|endoftext|>";

std::string utf8_of(int cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        throw RuntimeError("tokenizer: codepoint out of range");
    }
    return out;
}

bool is_space_b(unsigned char c) { return std::isspace(c) != 0; }
bool is_letter_b(unsigned char c) { return std::isalpha(c) != 0 || c >= 0x80; }
bool is_digit_b(unsigned char c) { return std::isdigit(c) != 0; }

// Longest run of one character class starting at i, with an optional single
// leading space, mirroring " ?\p{L}+ | ?\p{N}+ | ?[^\s\p{L}\p{N}]+".
size_t scan_spaced_run(std::string_view s, size_t i) {
    size_t j = i;
    if (j < s.size() && s[j] == ' ') ++j;
    if (j >= s.size()) return i;
    unsigned char c = static_cast<unsigned char>(s[j]);
    auto cls = [&](unsigned char x) -> int {
        if (is_space_b(x)) return 0;
        if (is_letter_b(x)) return 1;
        if (is_digit_b(x)) return 2;
        return 3;
    };
    int want = cls(c);
    if (want == 0) return i;
    while (j < s.size() && cls(static_cast<unsigned char>(s[j])) == want) ++j;
    return j;
}

size_t match_contraction(std::string_view s, size_t i) {
    static const char* suffixes[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
    for (const char* suf : suffixes) {
        size_t n = std::char_traits<char>::length(suf);
        if (s.size() - i >= n && s.substr(i, n) == suf) return i + n;
    }
    return i;
}

}  // namespace

std::vector<std::string> Tokenizer::pretokenize(std::string_view s) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < s.size()) {
        if (s[i] == '\'') {
            size_t j = match_contraction(s, i);
            if (j > i) {
                out.emplace_back(s.substr(i, j - i));
                i = j;
                continue;
            }
        }
        unsigned char c = static_cast<unsigned char>(s[i]);
        if (is_space_b(c)) {
            size_t j = i;
            while (j < s.size() && is_space_b(static_cast<unsigned char>(s[j]))) ++j;
            if (j < s.size() && j - i >= 2) {
                // run minus its last char; that char joins the next token if
                // it is a plain space
                out.emplace_back(s.substr(i, j - i - 1));
                i = j - 1;
                if (s[i] != ' ') continue;
                size_t k = scan_spaced_run(s, i);
                if (k > i) {
                    out.emplace_back(s.substr(i, k - i));
                    i = k;
                } else {
                    out.emplace_back(s.substr(i, 1));
                    ++i;
                }
            } else if (j < s.size() && s[i] == ' ') {
                size_t k = scan_spaced_run(s, i);
                if (k > i) {
                    out.emplace_back(s.substr(i, k - i));
                    i = k;
                } else {
                    out.emplace_back(s.substr(i, 1));
                    ++i;
                }
            } else {
                out.emplace_back(s.substr(i, j - i));
                i = j;
            }
        } else {
            size_t k = scan_spaced_run(s, i);
            if (k == i) k = i + 1;  // lone byte safety net
            out.emplace_back(s.substr(i, k - i));
            i = k;
        }
    }
    return out;
}

void Tokenizer::build_byte_tables() {
    // GPT-2 byte<->unicode bijection: printable bytes map to themselves,
    // the rest to codepoints 256, 257, ...
    std::vector<bool> printable(256, false);
    for (int b = 33; b <= 126; ++b) printable[static_cast<size_t>(b)] = true;
    for (int b = 161; b <= 172; ++b) printable[static_cast<size_t>(b)] = true;
    for (int b = 174; b <= 255; ++b) printable[static_cast<size_t>(b)] = true;
    int next = 256;
    for (int b = 0; b < 256; ++b) {
        int cp = printable[static_cast<size_t>(b)] ? b : next++;
        byte_to_uni_[b] = utf8_of(cp);
        uni_to_byte_[byte_to_uni_[b]] = static_cast<unsigned char>(b);
    }
}

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus, size_t vocab_size) {
    if (vocab_size < 257) throw RuntimeError("tokenizer: vocab_size must be >= 257");
    Tokenizer t;
    t.build_byte_tables();

    // pretokenized chunk -> count, each chunk as a symbol sequence
    std::map<std::vector<std::string>, long long> words;
    for (const auto& line : corpus) {
        for (const auto& chunk : pretokenize(line)) {
            std::vector<std::string> syms;
            syms.reserve(chunk.size());
            for (unsigned char b : chunk) syms.push_back(t.byte_to_uni_[b]);
            ++words[syms];
        }
    }

    size_t n_merges = vocab_size - 257;
    for (size_t m = 0; m < n_merges; ++m) {
        std::map<std::pair<std::string, std::string>, long long> pair_counts;
        for (const auto& [syms, cnt] : words) {
            for (size_t i = 0; i + 1 < syms.size(); ++i) {
                pair_counts[{syms[i], syms[i + 1]}] += cnt;
            }
        }
        if (pair_counts.empty()) break;
        auto best = pair_counts.begin();
        for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
            if (it->second > best->second) best = it;
        }
        if (best->second < 2) break;
        const auto [a, b] = best->first;
        const std::string merged = a + b;
        t.merges_.emplace_back(a, b);

        std::map<std::vector<std::string>, long long> next_words;
        for (const auto& [syms, cnt] : words) {
            std::vector<std::string> out;
            out.reserve(syms.size());
            for (size_t i = 0; i < syms.size(); ++i) {
                if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
                    out.push_back(merged);
                    ++i;
                } else {
                    out.push_back(syms[i]);
                }
            }
            next_words[out] += cnt;
        }
        words = std::move(next_words);
    }

    for (int b = 0; b < 256; ++b) {
        t.token_to_id_[t.byte_to_uni_[b]] = b;
        t.id_to_token_.push_back(t.byte_to_uni_[b]);
    }
    for (size_t m = 0; m < t.merges_.size(); ++m) {
        const std::string merged = t.merges_[m].first + t.merges_[m].second;
        t.merge_rank_[t.merges_[m]] = static_cast<int>(m);
        t.token_to_id_[merged] = static_cast<int>(t.id_to_token_.size());
        t.id_to_token_.push_back(merged);
    }
    t.eot_id_ = static_cast<int>(t.id_to_token_.size());
    t.token_to_id_[kEot] = t.eot_id_;
    t.id_to_token_.push_back(kEot);
    return t;
}

void Tokenizer::save(const fs::path& dir) const {
    fs::create_directories(dir);
    json vocab = json::object();
    for (size_t i = 0; i < id_to_token_.size(); ++i) {
        vocab[id_to_token_[i]] = i;
    }
    write_text_file(dir / "vocab.json", vocab.dump());
    std::string merges = "#version: 0.2\n";
    for (const auto& [a, b] : merges_) {
        merges += a;
        merges += ' ';
        merges += b;
        merges += '\n';
    }
    write_text_file(dir / "merges.txt", merges);
}

Tokenizer Tokenizer::load(const fs::path& dir) {
    Tokenizer t;
    t.build_byte_tables();

    json vocab = json::parse(read_text_file(dir / "vocab.json"));
    size_t n = vocab.size();
    t.id_to_token_.resize(n);
    for (auto& [tok_str, id_val] : vocab.items()) {
        int id = id_val.get<int>();
        if (id < 0 || static_cast<size_t>(id) >= n) {
            throw RuntimeError("tokenizer: id out of range in vocab.json: " + tok_str);
        }
        t.id_to_token_[static_cast<size_t>(id)] = tok_str;
        t.token_to_id_[tok_str] = id;
    }
    auto eot = t.token_to_id_.find(kEot);
    t.eot_id_ = eot == t.token_to_id_.end() ? -1 : eot->second;

    std::string merges_text = read_text_file(dir / "merges.txt");
    size_t pos = 0;
    int rank = 0;
    while (pos < merges_text.size()) {
        size_t eol = merges_text.find('\n', pos);
        if (eol == std::string::npos) eol = merges_text.size();
        std::string line = merges_text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty() || line[0] == '#') continue;
        size_t sp = line.find(' ');
        if (sp == std::string::npos) throw RuntimeError("tokenizer: bad merges line: " + line);
        std::pair<std::string, std::string> pr{line.substr(0, sp), line.substr(sp + 1)};
        t.merge_rank_[pr] = rank++;
        t.merges_.push_back(std::move(pr));
    }
    return t;
}

std::vector<int> Tokenizer::bpe_chunk(std::string_view chunk) const {
    std::string key(chunk);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;

    std::vector<std::string> syms;
    syms.reserve(chunk.size());
    for (unsigned char b : chunk) syms.push_back(byte_to_uni_[b]);

    while (syms.size() > 1) {
        int best_rank = INT_MAX;
        size_t best_i = 0;
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = merge_rank_.find({syms[i], syms[i + 1]});
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_i = i;
            }
        }
        if (best_rank == INT_MAX) break;
        std::vector<std::string> out;
        out.reserve(syms.size() - 1);
        const std::string merged = syms[best_i] + syms[best_i + 1];
        for (size_t i = 0; i < syms.size(); ++i) {
            if (i + 1 < syms.size() && i == best_i) {
                out.push_back(merged);
                ++i;
            } else if (i > best_i && i + 1 < syms.size() && syms[i] == syms[best_i] &&
                       syms[i + 1] == syms[best_i + 1]) {
                out.push_back(merged);
                ++i;
            } else {
                out.push_back(syms[i]);
            }
        }
        syms = std::move(out);
    }

    std::vector<int> ids;
    ids.reserve(syms.size());
    for (const auto& s : syms) {
        auto it = token_to_id_.find(s);
        if (it == token_to_id_.end()) throw RuntimeError("tokenizer: symbol not in vocab: " + s);
        ids.push_back(it->second);
    }
    if (cache_.size() < 200000) cache_.emplace(std::move(key), ids);
    return ids;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& chunk : pretokenize(text)) {
        auto ids = bpe_chunk(chunk);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string uni;
    for (int id : ids) {
        uni += token(id);
    }
    std::string out;
    size_t i = 0;
    while (i < uni.size()) {
        size_t len = (static_cast<unsigned char>(uni[i]) & 0x80) ? 2 : 1;
        std::string sym = uni.substr(i, len);
        auto it = uni_to_byte_.find(sym);
        if (it != uni_to_byte_.end()) {
            out.push_back(static_cast<char>(it->second));
        } else {
            out += sym;  // special tokens pass through literally
        }
        i += len;
    }
    return out;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size()) {
        throw RuntimeError("tokenizer: id out of range: " + std::to_string(id));
    }
    return id_to_token_[static_cast<size_t>(id)];
}

}  // namespace obsprobe::tok
