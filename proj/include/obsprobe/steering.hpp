#pragma once

#include <string>
#include <vector>

#include "obsprobe/llm.hpp"
#include "obsprobe/observer.hpp"
#include "obsprobe/tokenizer.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::steering {

using observer::Vec;

enum class InjectionMode {
    at_start,    // final prompt token, first step only
    every_step,  // last row of every decode pass
};

struct SteeringConfig {
    Vec direction;  // unit vector in the generator's residual space
    int layer = 0;  // stream key in [0, n_layer]
    double alpha = 0.0;
    InjectionMode mode = InjectionMode::at_start;
    int max_new_tokens = 50;
    std::string decoding = "greedy";

    void validate(const observer::ModelConfig& cfg) const;
};

/// w / ||w||; a zero vector has no direction and is refused.
Vec normalized_direction(const Vec& w);

/// Greedy decoding with alpha * direction added to the configured residual
/// stream. alpha = 0 installs no hook at all, so the output is bitwise
/// identical to the unpatched generator. Returns the generated continuation
/// text (prompt excluded).
std::string steer_generate(const observer::Model& generator, const tok::Tokenizer& tokenizer,
                           const std::string& prompt, const SteeringConfig& cfg);

// ---------------------------------------------------------------------------
// Repetition metric
// ---------------------------------------------------------------------------

size_t levenshtein(std::string_view a, std::string_view b);

/// 1 - levenshtein(a, b) / max(|a|, |b|); two empty strings are identical.
double similarity_ratio(std::string_view a, std::string_view b);

/// A text is repetitious when any two word n-grams at distinct positions
/// have similarity_ratio > threshold. Words are case-folded and
/// punctuation-stripped, so the flag ignores case and surrounding
/// whitespace. Texts shorter than 2n words cannot repeat.
bool is_repetitious(const std::string& text, int n = 5, double threshold = 0.85);

/// Per-text flag as a 0/1 rate.
double repetition_rate(const std::string& text, int n = 5, double threshold = 0.85);

/// Fraction of flagged texts.
double repetition_rate(const std::vector<std::string>& texts, int n = 5,
                       double threshold = 0.85);

// ---------------------------------------------------------------------------
// Hallucination judge
// ---------------------------------------------------------------------------

enum class Judgment { hallucination, no_hallucination, invalid };

/// The evaluation prompt, verbatim, with {article} and {summary} filled in.
std::string build_judge_prompt(const std::string& article, const std::string& summary);

/// Case-insensitive parse of the judge reply; anything other than
/// "hallucination" / "no hallucination" (modulo quotes and a trailing
/// period) is invalid.
Judgment parse_judgment(const std::string& response);

/// Asks the judge once, retries a non-conforming reply once, and reports
/// invalid if the retry does not conform either. Client errors propagate.
Judgment judge_hallucination(const std::string& article, const std::string& summary,
                             llm::Client& judge, const std::string& judge_model_id);

// ---------------------------------------------------------------------------
// Alpha sweep
// ---------------------------------------------------------------------------

struct SteeringOutcome {
    double alpha = 0.0;
    int n_samples = 0;
    double hallucination_rate = 0.0;  // over judged generations only
    double repetition_rate = 0.0;     // over all generations
    int invalid_judgments = 0;
    std::vector<std::string> generations;

    void validate() const;
    std::string to_json(bool include_generations = false) const;
    static SteeringOutcome from_json(const std::string& text);
};

struct SweepConfig {
    SteeringConfig base;  // alpha is overwritten per sweep point
    std::vector<double> alphas;
    int n_per_alpha = 128;
    int rep_n = 5;
    double rep_threshold = 0.85;
    std::string judge_model_id = "gpt-4.1";
    int judge_parallelism = 1;
    fs::path state_path;  // checkpoint after each alpha; empty disables
};

/// One SteeringOutcome per alpha over the same first n_per_alpha articles
/// (paired design; there is no sampling with replacement). The generation
/// prompt is the article plus a newline, and the judge sees the article
/// and the generated continuation. With a state path the sweep checkpoints
/// after each alpha and persists completed points before rethrowing a judge
/// failure, so a rerun resumes where it stopped.
std::vector<SteeringOutcome> alpha_sweep(const observer::Model& generator,
                                         const tok::Tokenizer& tokenizer,
                                         const std::vector<std::string>& articles,
                                         llm::Client& judge, const SweepConfig& cfg);

/// Human-readable list of adjacent alpha pairs where the hallucination rate
/// decreases as alpha grows. Empty means the directional claim held.
std::vector<std::string> monotonicity_violations(const std::vector<SteeringOutcome>& outcomes);

/// Two-curve line chart (hallucination and repetition rate vs alpha).
void save_sweep_svg(const std::vector<SteeringOutcome>& outcomes, const fs::path& path);

}  // namespace obsprobe::steering
