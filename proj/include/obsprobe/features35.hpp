#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "obsprobe/baselines.hpp"
#include "obsprobe/corpus.hpp"
#include "obsprobe/observer.hpp"
#include "obsprobe/tokenizer.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::features35 {

using baselines::Embedder;
using baselines::EntityExtractor;
using observer::Mat;
using observer::Vec;

enum class Side { context, continuation };

/// One segment of a source text. Chunks tile the source: byte spans are
/// gapless and in order, so concatenating the raw spans reconstructs it.
struct Chunk {
    std::string parent_id;
    Side side = Side::continuation;
    int index = 0;
    std::string text;       // trimmed segment text
    size_t span_begin = 0;  // raw byte range in the source string
    size_t span_end = 0;
    int tok_begin = 0;  // absolute token range in the document (once aligned)
    int tok_end = 0;
};

/// Splits on full stops (followed by whitespace or end) and newlines.
/// Segments that trim to nothing are folded into their neighbor.
std::vector<Chunk> chunk_text(const std::string& text);
std::vector<Chunk> chunk_text(const std::string& text, const std::string& parent_id, Side side);

struct Features35Config {
    std::vector<int> attn_blocks;  // the three attention blocks to read
    int mid_layer = 0;             // residual stream key for alignment features
    int attn_top_k = 15;
    int svd_top = 32;

    /// Reference-depth fractions (blocks 40/42/44 and stream 28 of a
    /// 46-block observer) rescaled to `n_layer` blocks.
    static Features35Config scaled_defaults(int n_layer);
    void validate(int n_layer) const;
};

/// Names of the realized feature dimensions, in row order: 29 named family
/// values plus 5 degenerate-case flags.
std::vector<std::string> feature_names(const Features35Config& cfg);

struct FeatureRow {
    Chunk chunk;
    std::vector<double> values;  // parallel to feature_names(cfg)
    int label = 0;

    void validate(size_t expected_dims) const;
    std::string to_json_line() const;
    static FeatureRow from_json_line(const std::string& line);
};

void append_rows_jsonl(const fs::path& path, const std::vector<FeatureRow>& rows);
std::vector<FeatureRow> read_rows_jsonl(const fs::path& path);

/// Per-document extraction state: chunks both sides, aligns token spans,
/// and caches the tensors every chunk's features share.
class Extractor {
  public:
    Extractor(const corpus::Example& ex, const observer::TokenizedDoc& doc,
              const observer::CapturedActivations& acts, const tok::Tokenizer& tokenizer,
              Embedder& embedder, const EntityExtractor& ner, Features35Config cfg);

    const std::vector<Chunk>& continuation_chunks() const { return y_chunks_; }
    const std::vector<Chunk>& context_chunks() const { return x_chunks_; }

    FeatureRow extract(const Chunk& chunk) const;
    std::vector<FeatureRow> extract_all() const;

  private:
    const observer::CapturedActivations& acts_;
    Features35Config cfg_;
    int label_ = 0;
    int context_len_ = 0;
    std::vector<int> tokens_;
    std::string x_text_;
    std::vector<Chunk> x_chunks_, y_chunks_;
    std::vector<Mat> attn_avg_;             // head-averaged [T,T] per configured block
    std::vector<Vec> x_chunk_emb_;          // unit embeddings of context chunks
    std::vector<std::vector<double>> all_sims_;  // [y_chunk][x_chunk] cosines
    std::set<std::string> x_entities_;
    double ctx_sent_len_mean_ = 0.0, ctx_sent_len_std_ = 0.0;
    bool ctx_sent_stats_ok_ = false;
    Vec context_resid_avg_;
    Embedder* embedder_;
    const EntityExtractor* ner_;
};

/// Convenience wrapper matching the one-shot call shape; builds the
/// per-document state each time, so prefer Extractor for whole documents.
FeatureRow extract_features(const Chunk& chunk, const corpus::Example& ex,
                            const observer::TokenizedDoc& doc,
                            const observer::CapturedActivations& acts,
                            const tok::Tokenizer& tokenizer, Embedder& embedder,
                            const EntityExtractor& ner, const Features35Config& cfg);

// ---------------------------------------------------------------------------
// Random-forest feature importance
// ---------------------------------------------------------------------------

struct ForestConfig {
    int n_trees = 200;
    int max_depth = 8;
    int min_leaf = 2;
    uint64_t seed = 0;
};

/// Mean-decrease-in-impurity importances from a bagged tree ensemble,
/// normalized to sum 1. Constant features never split, so they score 0.
Vec mdi_importances(const Mat& X, const std::vector<int>& y, const ForestConfig& cfg);

/// Importances for feature rows, ranked descending (ties by name order).
std::vector<std::pair<std::string, double>> importance_report(
    const std::vector<FeatureRow>& rows, const std::vector<std::string>& names,
    const ForestConfig& cfg = {});

}  // namespace obsprobe::features35
