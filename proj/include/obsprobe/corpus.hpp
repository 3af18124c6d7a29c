#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "obsprobe/llm.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::corpus {

enum class Dataset { cnn_dm, xsum, contratales, custom };
enum class Label { faithful, hallucinated };

std::string to_string(Dataset d);
std::string to_string(Label l);
Dataset dataset_from_string(const std::string& s);
Label label_from_string(const std::string& s);

/// One (context, continuation, label) record; the universal dataset row.
struct Example {
    std::string id;  // stable content hash, filled by finalize()
    Dataset dataset = Dataset::custom;
    std::string context;
    std::string continuation;
    Label label = Label::faithful;
    std::optional<std::string> replaced_sentence;
    std::string generator_model;
    std::map<std::string, std::string> meta;

    /// Computes the stable id from the content fields.
    void finalize();

    /// Checks the type invariants; throws RuntimeError on violation.
    void validate() const;

    std::string to_json_line() const;
    static Example from_json_line(const std::string& line);
};

std::vector<Example> load_jsonl(const fs::path& path);
void save_jsonl(const fs::path& path, const std::vector<Example>& examples);

/// A story prefix with paired correct/contradictory concluding sentences.
struct ContraTale {
    std::string prefix;
    std::string correct;
    std::string contradictory;

    void validate() const;
    std::string to_json_line() const;
    static ContraTale from_json_line(const std::string& line);
};

std::vector<ContraTale> load_tales(const fs::path& path);

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

struct IngestResult {
    std::vector<Example> examples;
    std::vector<size_t> skipped_lines;  // 1-based line numbers
};

/// Loads line-delimited {article, original_summary, replaced_sentence,
/// continuation, label} records. Malformed lines are skipped and counted;
/// more than 10% malformed is fatal.
IngestResult ingest_news(const fs::path& path, Dataset dataset);

// ---------------------------------------------------------------------------
// Continuation / ContraTale generation (Appendix-A / Appendix-B protocol)
// ---------------------------------------------------------------------------

enum class ContinuationKind { faithful, hallucinated };

llm::GenerationRequest continuation_request(const std::string& article,
                                            const std::string& original_summary,
                                            const std::string& replaced_sentence,
                                            ContinuationKind kind,
                                            const std::string& model_id);

/// Raised when a model response violates the output contract; the caller is
/// expected to quarantine `raw` rather than drop it.
struct ValidationError : RuntimeError {
    ValidationError(const std::string& what, std::string raw_text)
        : RuntimeError(what), raw(std::move(raw_text)) {}
    std::string raw;
};

/// Requests one replacement sentence from the client (through its cache) and
/// normalizes it: trimmed, surrounding quotes/XML stripped. Throws
/// ValidationError if the response is not a single sentence of <= 40 words.
std::string generate_continuation(const std::string& article,
                                  const std::string& original_summary,
                                  const std::string& replaced_sentence,
                                  ContinuationKind kind,
                                  llm::CachedClient& client);

llm::GenerationRequest contratale_request(const std::vector<ContraTale>& seeds,
                                          const std::string& model_id,
                                          uint64_t rng_seed);

/// Parses a model response of the labeled three-part form; throws
/// ValidationError with the raw text when unparseable.
ContraTale parse_contratale_response(const std::string& raw);

/// Samples 5 seed exemplars without replacement (deterministic in rng_seed),
/// prompts the client, and parses the response.
ContraTale generate_contratale(const std::vector<ContraTale>& seeds,
                               llm::CachedClient& client,
                               uint64_t rng_seed);

/// Appends {reason, raw, cache_key} rows to <dir>/quarantine.jsonl.
void quarantine(const fs::path& dir, const std::string& cache_key,
                const std::string& reason, const std::string& raw);

// ---------------------------------------------------------------------------
// Fold splitting
// ---------------------------------------------------------------------------

/// Label-stratified k-fold assignment, deterministic in (examples-order, k,
/// seed). Fold sizes differ by at most one. Throws RuntimeError if any class
/// would be absent from some fold.
std::vector<int> split_folds(const std::vector<Example>& examples, int k, uint64_t seed);

/// Same assignment logic over bare labels (used by harnesses that carry
/// features instead of Examples).
std::vector<int> split_folds_labels(const std::vector<int>& labels, int k, uint64_t seed);

}  // namespace obsprobe::corpus
