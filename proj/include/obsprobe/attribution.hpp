#pragma once

#include <map>
#include <string>
#include <vector>

#include "obsprobe/corpus.hpp"
#include "obsprobe/observer.hpp"
#include "obsprobe/probe.hpp"
#include "obsprobe/tokenizer.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::attribution {

using observer::Mat;
using observer::Vec;

/// The probe readout folded through its standardizer, so the score is an
/// affine function of the raw residual row: s = w_eff . h + b_eff.
Vec effective_direction(const probe::ProbeModel& probe);
double effective_bias(const probe::ProbeModel& probe);

struct DocGradients {
    double score = 0.0;
    std::map<int, Mat> resid;            // stream key -> [T, d]
    observer::CapturedActivations acts;  // unit outputs when capture_units was set
};

/// Gradients g^(l)_t of the probe score with respect to the residual
/// streams. `layers` filters which streams are returned (empty keeps all of
/// 0..probe.layer). Streams above the probed one cannot move the score, so
/// requesting them is refused instead of answered with silent zeros.
DocGradients residual_gradients(const observer::Model& model, const observer::TokenizedDoc& doc,
                                const probe::ProbeModel& probe,
                                const std::vector<int>& layers = {}, bool capture_units = false);

struct UnitAttribution {
    Mat head_attr;  // [L, H]: mean over final-sentence tokens of <g, z>
    Vec mlp_attr;   // [L]
    double score = 0.0;
};

/// Grad-times-activation per unit, averaged over the final-sentence span.
/// Block k writes into stream k+1, so its outputs project onto g^(k+1);
/// blocks at or above the probed stream contribute exactly zero.
UnitAttribution unit_attribution(const observer::TokenizedDoc& doc,
                                 const observer::CapturedActivations& acts,
                                 const std::map<int, Mat>& grads,
                                 const probe::ProbeModel& probe);

/// One forward+backward: residual_gradients with unit capture, then
/// unit_attribution.
UnitAttribution attribute_doc(const observer::Model& model, const observer::TokenizedDoc& doc,
                              const probe::ProbeModel& probe);

/// Sum over every token of <g^(block+1)_t, m_t>: the exact first-order
/// derivative ds/ddelta of rescaling block's MLP output by (1 + delta).
/// The reported mlp_attr averages the same products over the final
/// sentence only, per the readout definition.
double mlp_rescale_attribution(const observer::CapturedActivations& acts,
                               const std::map<int, Mat>& grads, int block, int probe_layer);

struct FirstOrderEntry {
    int block = 0;
    double attribution = 0.0;  // ds/ddelta at delta = 0
    double predicted = 0.0;    // delta * attribution
    double observed = 0.0;     // s(delta) - s(0)
};

/// Rescales each block's MLP output by (1 + delta) in turn and compares the
/// actual score shift against the first-order prediction.
std::vector<FirstOrderEntry> first_order_mlp_check(const observer::Model& model,
                                                   const observer::TokenizedDoc& doc,
                                                   const probe::ProbeModel& probe,
                                                   double delta = 0.01);

struct AttributionReport {
    Mat head_attr;  // [L, H], mean over the selected examples
    Vec mlp_attr;   // [L]
    int n_examples = 0;
    std::string selection;  // "top_scores" or "all"
    std::string probe_ref;  // observer id + probed stream

    void validate() const;
    std::string to_json() const;
    static AttributionReport from_json(const std::string& text);
};

/// Scores every example, keeps the top_n highest-scoring ones, and averages
/// their per-unit attributions. top_n beyond the dataset size clamps with a
/// warning and reports selection = "all".
AttributionReport aggregate_top(const std::vector<corpus::Example>& dataset,
                                const observer::Model& model, const tok::Tokenizer& tokenizer,
                                const probe::ProbeModel& probe, int top_n = 100);

/// Diverging-palette heatmap of the report (heads grid plus MLP strip).
void save_heatmap_svg(const AttributionReport& report, const fs::path& path);

// ---------------------------------------------------------------------------
// Corpus scan
// ---------------------------------------------------------------------------

struct ScanHit {
    std::string sequence_text;
    double probe_activation = 0.0;
    long corpus_offset = 0;  // token ordinal of the window start

    std::string to_json_line() const;
    static ScanHit from_json_line(const std::string& line);
};

void write_hits_jsonl(const fs::path& path, const std::vector<ScanHit>& hits);
std::vector<ScanHit> read_hits_jsonl(const fs::path& path);

struct ScanConfig {
    int seq_len = 256;
    int top_k = 20;
    int bottom_k = 20;
    fs::path checkpoint_path;   // empty: run without checkpointing
    int checkpoint_every = 64;  // windows between checkpoint writes
};

struct ScanResult {
    std::vector<ScanHit> top;     // descending activation
    std::vector<ScanHit> bottom;  // ascending activation
    long windows_scored = 0;
    long skipped_short = 0;       // tail sequences of fewer than 2 tokens
};

/// Streams the corpus line by line, tiles it into consecutive seq_len-token
/// windows, and keeps the extreme probe activations read at each window's
/// final token. Memory is bounded by the heap sizes and one window; a
/// checkpoint (byte offset + leftover tokens + heaps) makes the scan
/// resumable and append-safe.
ScanResult corpus_scan(const fs::path& corpus_path, const observer::Model& model,
                       const tok::Tokenizer& tokenizer, const probe::ProbeModel& probe,
                       const ScanConfig& cfg);

}  // namespace obsprobe::attribution
