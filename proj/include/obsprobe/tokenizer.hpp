#pragma once

#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "obsprobe/util.hpp"

namespace obsprobe::tok {

/// GPT-2-style byte-level BPE. Vocabulary ids 0..255 are the raw bytes (via
/// the printable-byte remapping), followed by merge products in merge order,
/// with "<|endoftext|>" as the final id. Encoding is lossless for arbitrary
/// byte strings: decode(encode(s)) == s.
class Tokenizer {
public:
    /// Reads vocab.json + merges.txt from `dir`.
    static Tokenizer load(const fs::path& dir);

    /// Learns up to `vocab_size - 257` merges over the corpus lines (stops
    /// early once no pair repeats).
    static Tokenizer train(const std::vector<std::string>& corpus, size_t vocab_size);

    void save(const fs::path& dir) const;

    std::vector<int> encode(std::string_view text) const;
    std::string decode(const std::vector<int>& ids) const;

    size_t vocab_size() const { return id_to_token_.size(); }
    int eot_id() const { return eot_id_; }
    const std::string& token(int id) const;

    /// GPT-2 pretokenizer chunks (contractions, space-prefixed words/numbers/
    /// punctuation, whitespace runs). Exposed for tests.
    static std::vector<std::string> pretokenize(std::string_view text);

private:
    Tokenizer() = default;
    void build_byte_tables();
    std::vector<int> bpe_chunk(std::string_view chunk) const;

    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;  // unicode-alphabet representation
    std::map<std::pair<std::string, std::string>, int> merge_rank_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::string byte_to_uni_[256];  // UTF-8 of the mapped codepoint
    std::unordered_map<std::string, unsigned char> uni_to_byte_;
    int eot_id_ = -1;
    mutable std::unordered_map<std::string, std::vector<int>> cache_;
};

}  // namespace obsprobe::tok
