#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "obsprobe/observer.hpp"
#include "obsprobe/probe.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::baselines {

using observer::Mat;
using observer::Vec;

enum class Method { lexical, entity, semantic, lookback };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

/// One example's feature vector for a detector. Length: 1 for lexical and
/// semantic, 2 for entity (novelty ratio plus the no-entities flag), H*L for
/// lookback. All values lie in [0, 1].
struct BaselineFeatures {
    Method method = Method::lexical;
    std::vector<double> values;
    std::string example_id;

    void validate() const;
    std::string to_json_line() const;
    static BaselineFeatures from_json_line(const std::string& line);
};

void write_features_jsonl(const fs::path& path, const std::vector<BaselineFeatures>& rows);
std::vector<BaselineFeatures> read_features_jsonl(const fs::path& path);

// ---------------------------------------------------------------------------
// Entity extraction
// ---------------------------------------------------------------------------

class EntityExtractor {
  public:
    virtual ~EntityExtractor() = default;
    /// Returns surface forms; callers normalize before comparing.
    virtual std::vector<std::string> extract(const std::string& text) const = 0;
};

/// Rule-based extractor: runs of capitalized words (with "of"-style
/// connectors), acronyms, years, and number+unit amounts. Sentence-initial
/// function words are filtered by a stopword list.
class HeuristicNer : public EntityExtractor {
  public:
    std::vector<std::string> extract(const std::string& text) const override;
};

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

class Embedder {
  public:
    virtual ~Embedder() = default;
    virtual Vec embed(const std::string& text) = 0;
    virtual std::string model_id() const = 0;
};

/// Deterministic offline embedder: hashed character n-grams (n = 3..5)
/// bucketed into a fixed dimension, l2-normalized. Similar strings land on
/// overlapping buckets, so cosine tracks surface similarity.
class HashedNgramEmbedder : public Embedder {
  public:
    explicit HashedNgramEmbedder(int dim = 256) : dim_(dim) {}
    Vec embed(const std::string& text) override;
    std::string model_id() const override { return "hashed-ngram-" + std::to_string(dim_); }

  private:
    int dim_;
};

struct HttpEmbedderConfig {
    std::string endpoint;  // e.g. https://api.openai.com
    std::string path = "/v1/embeddings";
    std::string api_key;
    std::string model = "text-embedding-3-small";
    int max_retries = 3;
    std::chrono::milliseconds retry_backoff{500};
    fs::path cache_dir;  // empty -> memory-only cache
};

/// OpenAI-compatible embeddings client with an exponential-backoff retry
/// loop and a digest-keyed cache (memory plus optional disk).
class HttpEmbedder : public Embedder {
  public:
    explicit HttpEmbedder(HttpEmbedderConfig cfg);
    Vec embed(const std::string& text) override;
    std::string model_id() const override { return cfg_.model; }

  private:
    HttpEmbedderConfig cfg_;
    std::mutex mu_;
    std::map<std::string, Vec> memo_;
};

// ---------------------------------------------------------------------------
// The four detectors
// ---------------------------------------------------------------------------

/// Max over n in {1,2,3} of the fraction of Y's n-grams absent from X.
/// N-grams are over case-folded, punctuation-stripped word tokens with set
/// semantics. An n with too few tokens in Y is skipped; throws if every n is.
double lexical_novelty(const std::string& Y, const std::string& X);

/// Case-folds and collapses runs of whitespace; entity sets compare equal
/// through this.
std::string normalize_entity(const std::string& s);

/// |E_Y \ E_X| / |E_Y| after case-folding and whitespace normalization.
/// When Y has no entities the ratio is defined as 0 and *no_entities is set.
double entity_novelty(const std::string& Y, const std::string& X, const EntityExtractor& ner,
                      bool* no_entities = nullptr);

/// Max cosine between the final sentence of Y and any sentence of X,
/// clamped to [0, 1]. Throws if either side yields no sentences.
double semantic_similarity(const std::string& Y, const std::string& X, Embedder& embedder);

/// Per-head lookback ratios averaged over the final-sentence tokens,
/// flattened layer-major / head-minor into an H*L vector. Requires attention
/// captured for every block. A(new) includes the query token itself when
/// `include_current` is set (the default).
std::vector<double> lookback_features(const observer::CapturedActivations& acts,
                                      const observer::TokenizedDoc& doc,
                                      bool include_current = true);

/// Cross-validated logistic regression over baseline features; the same
/// harness the probe uses, with the feature vectors standing in for
/// activations. All rows must share one method and arity.
probe::EvalResult baseline_classify(const std::vector<BaselineFeatures>& features,
                                    const std::vector<int>& labels,
                                    const probe::EvalOptions& opts);

}  // namespace obsprobe::baselines
