#include "obsprobe/attribution.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

namespace obsprobe::attribution {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Effective readout
// ---------------------------------------------------------------------------

Vec effective_direction(const probe::ProbeModel& probe) {
    if (!probe.standardizer.enabled) return probe.w;
    return probe.w.cwiseProduct(probe.standardizer.scale);
}

double effective_bias(const probe::ProbeModel& probe) {
    if (!probe.standardizer.enabled) return probe.b;
    return probe.b - probe.w.cwiseProduct(probe.standardizer.scale).dot(probe.standardizer.mean);
}

// ---------------------------------------------------------------------------
// Gradients and per-document attribution
// ---------------------------------------------------------------------------

DocGradients residual_gradients(const observer::Model& model, const observer::TokenizedDoc& doc,
                                const probe::ProbeModel& probe, const std::vector<int>& layers,
                                bool capture_units) {
    doc.validate();
    for (int l : layers) {
        if (l < 0) throw RuntimeError("residual_gradients: negative stream key");
        if (l > probe.layer) {
            throw RuntimeError("residual_gradients: stream " + std::to_string(l) +
                               " is above the probed stream " + std::to_string(probe.layer) +
                               "; the score does not depend on it");
        }
    }
    observer::CaptureSpec spec;
    if (capture_units) {
        spec.capture_head_outputs = true;
        spec.capture_mlp_outputs = true;
    }
    auto res = model.score_gradients(doc.tokens, probe.layer, doc.t_star,
                                     effective_direction(probe), effective_bias(probe), spec);
    DocGradients out;
    out.score = res.score;
    out.acts = std::move(res.acts);
    if (layers.empty()) {
        out.resid = std::move(res.resid_grads);
    } else {
        for (int l : layers) out.resid[l] = std::move(res.resid_grads.at(l));
    }
    return out;
}

UnitAttribution unit_attribution(const observer::TokenizedDoc& doc,
                                 const observer::CapturedActivations& acts,
                                 const std::map<int, Mat>& grads,
                                 const probe::ProbeModel& probe) {
    doc.validate();
    if (doc.sent_end <= doc.sent_begin) {
        throw RuntimeError("unit_attribution: final sentence span is empty");
    }
    if (acts.mlp_out.empty() || acts.head_out.empty()) {
        throw RuntimeError("unit_attribution: head and MLP outputs were not captured");
    }
    const int L = acts.mlp_out.rbegin()->first + 1;
    const int H = acts.head_out.rbegin()->first.second + 1;
    const int T = static_cast<int>(doc.tokens.size());
    if (doc.sent_end > T) throw RuntimeError("unit_attribution: sentence span beyond document");

    for (int b = 0; b < L; ++b) {
        if (!acts.mlp_out.count(b)) {
            throw RuntimeError("unit_attribution: MLP output missing for block " +
                               std::to_string(b));
        }
        for (int h = 0; h < H; ++h) {
            if (!acts.head_out.count({b, h})) {
                throw RuntimeError("unit_attribution: head output missing for block " +
                                   std::to_string(b));
            }
        }
        // block b writes stream b+1; beyond the probe the gradient is zero
        if (b + 1 <= probe.layer && !grads.count(b + 1)) {
            throw RuntimeError("unit_attribution: gradient for stream " + std::to_string(b + 1) +
                               " missing; rerun residual_gradients without a layer filter");
        }
    }

    UnitAttribution out;
    out.head_attr = Mat::Zero(L, H);
    out.mlp_attr = Vec::Zero(L);
    const double span = doc.sent_end - doc.sent_begin;
    for (int b = 0; b < L && b + 1 <= probe.layer; ++b) {
        const Mat& G = grads.at(b + 1);
        if (G.rows() != T) throw RuntimeError("unit_attribution: gradient row count mismatch");
        const Mat& M = acts.mlp_out.at(b);
        if (M.rows() != T) throw RuntimeError("unit_attribution: activation row count mismatch");
        for (int t = doc.sent_begin; t < doc.sent_end; ++t) {
            out.mlp_attr(b) += G.row(t).dot(M.row(t));
        }
        out.mlp_attr(b) /= span;
        for (int h = 0; h < H; ++h) {
            const Mat& Z = acts.head_out.at({b, h});
            for (int t = doc.sent_begin; t < doc.sent_end; ++t) {
                out.head_attr(b, h) += G.row(t).dot(Z.row(t));
            }
            out.head_attr(b, h) /= span;
        }
    }
    return out;
}

UnitAttribution attribute_doc(const observer::Model& model, const observer::TokenizedDoc& doc,
                              const probe::ProbeModel& probe) {
    auto grads = residual_gradients(model, doc, probe, {}, true);
    auto out = unit_attribution(doc, grads.acts, grads.resid, probe);
    out.score = grads.score;
    return out;
}

double mlp_rescale_attribution(const observer::CapturedActivations& acts,
                               const std::map<int, Mat>& grads, int block, int probe_layer) {
    if (!acts.mlp_out.count(block)) {
        throw RuntimeError("rescale attribution: MLP output missing for block " +
                           std::to_string(block));
    }
    if (block + 1 > probe_layer) return 0.0;  // write lands above the probed stream
    const Mat& G = grads.at(block + 1);
    const Mat& M = acts.mlp_out.at(block);
    double a = 0.0;
    for (Eigen::Index t = 0; t < M.rows(); ++t) a += G.row(t).dot(M.row(t));
    return a;
}

std::vector<FirstOrderEntry> first_order_mlp_check(const observer::Model& model,
                                                   const observer::TokenizedDoc& doc,
                                                   const probe::ProbeModel& probe, double delta) {
    auto base = residual_gradients(model, doc, probe, {}, true);
    const Vec w_eff = effective_direction(probe);
    const double b_eff = effective_bias(probe);

    observer::CaptureSpec spec;
    spec.layers = {probe.layer};
    auto score_with = [&](const observer::MlpScale& scale) {
        auto acts = model.forward(doc.tokens, spec, {}, scale);
        return w_eff.dot(acts.resid.at(probe.layer).row(doc.t_star).transpose()) + b_eff;
    };
    const double s0 = score_with({});

    std::vector<FirstOrderEntry> out;
    for (int b = 0; b < model.config().n_layer; ++b) {
        FirstOrderEntry e;
        e.block = b;
        e.attribution = mlp_rescale_attribution(base.acts, base.resid, b, probe.layer);
        e.predicted = delta * e.attribution;
        e.observed = score_with({b, delta}) - s0;
        out.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset aggregation
// ---------------------------------------------------------------------------

void AttributionReport::validate() const {
    if (n_examples <= 0) throw RuntimeError("attribution report: no examples");
    if (selection != "top_scores" && selection != "all") {
        throw RuntimeError("attribution report: unknown selection '" + selection + "'");
    }
    if (!head_attr.allFinite() || !mlp_attr.allFinite()) {
        throw RuntimeError("attribution report: non-finite attribution");
    }
    if (head_attr.rows() != mlp_attr.size()) {
        throw RuntimeError("attribution report: head/mlp layer count mismatch");
    }
}

std::string AttributionReport::to_json() const {
    json j;
    j["n_examples"] = n_examples;
    j["selection"] = selection;
    j["probe_ref"] = probe_ref;
    json heads = json::array();
    for (Eigen::Index r = 0; r < head_attr.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < head_attr.cols(); ++c) row.push_back(head_attr(r, c));
        heads.push_back(std::move(row));
    }
    j["head_attr"] = std::move(heads);
    json mlp = json::array();
    for (Eigen::Index r = 0; r < mlp_attr.size(); ++r) mlp.push_back(mlp_attr(r));
    j["mlp_attr"] = std::move(mlp);
    return j.dump(2);
}

AttributionReport AttributionReport::from_json(const std::string& text) {
    json j = json::parse(text);
    AttributionReport r;
    r.n_examples = j.at("n_examples").get<int>();
    r.selection = j.at("selection").get<std::string>();
    r.probe_ref = j.at("probe_ref").get<std::string>();
    const auto& heads = j.at("head_attr");
    const auto& mlp = j.at("mlp_attr");
    r.head_attr = Mat(heads.size(), heads.empty() ? 0 : heads.at(0).size());
    for (Eigen::Index a = 0; a < r.head_attr.rows(); ++a) {
        for (Eigen::Index c = 0; c < r.head_attr.cols(); ++c) {
            r.head_attr(a, c) = heads.at(a).at(c).get<double>();
        }
    }
    r.mlp_attr = Vec(mlp.size());
    for (Eigen::Index a = 0; a < r.mlp_attr.size(); ++a) r.mlp_attr(a) = mlp.at(a).get<double>();
    r.validate();
    return r;
}

AttributionReport aggregate_top(const std::vector<corpus::Example>& dataset,
                                const observer::Model& model, const tok::Tokenizer& tokenizer,
                                const probe::ProbeModel& probe, int top_n) {
    if (dataset.empty()) throw RuntimeError("aggregate_top: empty dataset");
    if (top_n <= 0) throw RuntimeError("aggregate_top: top_n must be positive");
    const int n = static_cast<int>(dataset.size());
    if (top_n > n) {
        std::cerr << "aggregate_top: top_n " << top_n << " clamped to dataset size " << n << "\n";
        top_n = n;
    }

    observer::CaptureSpec light;
    light.layers = {probe.layer};
    std::vector<std::pair<double, int>> scored;
    std::vector<observer::TokenizedDoc> docs;
    docs.reserve(dataset.size());
    for (int i = 0; i < n; ++i) {
        docs.push_back(observer::prepare_doc(dataset[static_cast<size_t>(i)], tokenizer));
        auto acts = model.forward(docs.back().tokens, light);
        double s =
            probe::score(probe, acts.resid.at(probe.layer).row(docs.back().t_star).transpose());
        scored.emplace_back(s, i);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    AttributionReport report;
    report.n_examples = top_n;
    report.selection = top_n == n ? "all" : "top_scores";
    report.probe_ref = probe.observer_model_id + "/resid_post/" + std::to_string(probe.layer);
    report.head_attr = Mat::Zero(model.config().n_layer, model.config().n_head);
    report.mlp_attr = Vec::Zero(model.config().n_layer);
    for (int k = 0; k < top_n; ++k) {
        const int i = scored[static_cast<size_t>(k)].second;
        auto unit = attribute_doc(model, docs[static_cast<size_t>(i)], probe);
        report.head_attr += unit.head_attr;
        report.mlp_attr += unit.mlp_attr;
    }
    report.head_attr /= static_cast<double>(top_n);
    report.mlp_attr /= static_cast<double>(top_n);
    report.validate();
    return report;
}

// ---------------------------------------------------------------------------
// Heatmap
// ---------------------------------------------------------------------------

namespace {

std::string diverging_color(double v, double vmax) {
    // white at zero, red for positive, blue for negative
    double x = vmax > 0 ? std::clamp(v / vmax, -1.0, 1.0) : 0.0;
    int r = 255, g = 255, b = 255;
    if (x > 0) {
        g = b = static_cast<int>(std::lround(255 * (1.0 - x)));
    } else if (x < 0) {
        r = g = static_cast<int>(std::lround(255 * (1.0 + x)));
    }
    return "rgb(" + std::to_string(r) + "," + std::to_string(g) + "," + std::to_string(b) + ")";
}

}  // namespace

void save_heatmap_svg(const AttributionReport& report, const fs::path& path) {
    report.validate();
    const int L = static_cast<int>(report.head_attr.rows());
    const int H = static_cast<int>(report.head_attr.cols());
    const int cell = 22, left = 70, top = 40, gap = 30;
    const int width = left + (H + 2) * cell + 140;
    const int height = top + L * cell + gap + 20;
    double vmax = std::max(report.head_attr.cwiseAbs().maxCoeff(),
                           report.mlp_attr.cwiseAbs().maxCoeff());

    std::string svg;
    svg += "<svg xmlns='http://www.w3.org/2000/svg' width='" + std::to_string(width) +
           "' height='" + std::to_string(height) + "' font-family='monospace' font-size='11'>\n";
    svg += "<text x='" + std::to_string(left) + "' y='16'>unit attributions, " + report.probe_ref +
           " (n=" + std::to_string(report.n_examples) + ", " + report.selection + ")</text>\n";
    for (int b = 0; b < L; ++b) {
        int y = top + b * cell;
        svg += "<text x='8' y='" + std::to_string(y + 15) + "'>block " + std::to_string(b) +
               "</text>\n";
        for (int h = 0; h < H; ++h) {
            svg += "<rect x='" + std::to_string(left + h * cell) + "' y='" + std::to_string(y) +
                   "' width='" + std::to_string(cell - 1) + "' height='" +
                   std::to_string(cell - 1) + "' fill='" +
                   diverging_color(report.head_attr(b, h), vmax) + "'><title>head " +
                   std::to_string(b) + "." + std::to_string(h) + ": " +
                   std::to_string(report.head_attr(b, h)) + "</title></rect>\n";
        }
        // one extra column for the block's MLP
        svg += "<rect x='" + std::to_string(left + (H + 1) * cell) + "' y='" + std::to_string(y) +
               "' width='" + std::to_string(cell - 1) + "' height='" + std::to_string(cell - 1) +
               "' fill='" + diverging_color(report.mlp_attr(b), vmax) + "'><title>mlp " +
               std::to_string(b) + ": " + std::to_string(report.mlp_attr(b)) +
               "</title></rect>\n";
    }
    int lx = left, ly = top + L * cell + 16;
    svg += "<text x='" + std::to_string(lx) + "' y='" + std::to_string(ly) + "'>heads 0.." +
           std::to_string(H - 1) + ", right column = mlp, |max| = " + std::to_string(vmax) +
           "</text>\n";
    svg += "</svg>\n";
    write_text_file(path, svg);
}

// ---------------------------------------------------------------------------
// Corpus scan
// ---------------------------------------------------------------------------

std::string ScanHit::to_json_line() const {
    json j;
    j["text"] = sequence_text;
    j["activation"] = probe_activation;
    j["offset"] = corpus_offset;
    return j.dump();
}

ScanHit ScanHit::from_json_line(const std::string& line) {
    json j = json::parse(line);
    ScanHit h;
    h.sequence_text = j.at("text").get<std::string>();
    h.probe_activation = j.at("activation").get<double>();
    h.corpus_offset = j.at("offset").get<long>();
    return h;
}

void write_hits_jsonl(const fs::path& path, const std::vector<ScanHit>& hits) {
    std::string out;
    for (const auto& h : hits) {
        out += h.to_json_line();
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<ScanHit> read_hits_jsonl(const fs::path& path) {
    std::vector<ScanHit> hits;
    std::string text = read_text_file(path);
    size_t pos = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        if (!trim(line).empty()) hits.push_back(ScanHit::from_json_line(line));
        pos = nl + 1;
    }
    return hits;
}

namespace {

// ordered best-first; keeps at most k elements
struct ExtremeSet {
    bool want_high;
    size_t k;
    std::vector<ScanHit> hits;  // maintained sorted

    bool before(const ScanHit& a, const ScanHit& b) const {
        if (a.probe_activation != b.probe_activation) {
            return want_high ? a.probe_activation > b.probe_activation
                             : a.probe_activation < b.probe_activation;
        }
        return a.corpus_offset < b.corpus_offset;
    }
    void offer(ScanHit h) {
        if (k == 0) return;
        auto pos = std::upper_bound(hits.begin(), hits.end(), h,
                                    [this](const ScanHit& a, const ScanHit& b) {
                                        return before(a, b);
                                    });
        hits.insert(pos, std::move(h));
        if (hits.size() > k) hits.pop_back();
    }
};

json hits_to_json(const std::vector<ScanHit>& hits) {
    json arr = json::array();
    for (const auto& h : hits) {
        arr.push_back({{"text", h.sequence_text},
                       {"activation", h.probe_activation},
                       {"offset", h.corpus_offset}});
    }
    return arr;
}

std::vector<ScanHit> hits_from_json(const json& arr) {
    std::vector<ScanHit> hits;
    for (const auto& j : arr) {
        ScanHit h;
        h.sequence_text = j.at("text").get<std::string>();
        h.probe_activation = j.at("activation").get<double>();
        h.corpus_offset = j.at("offset").get<long>();
        hits.push_back(std::move(h));
    }
    return hits;
}

std::string scan_signature(const probe::ProbeModel& probe, const ScanConfig& cfg) {
    uint64_t h = fnv1a64(probe.observer_model_id);
    h = fnv1a64(probe.w.data(), static_cast<size_t>(probe.w.size()) * sizeof(double), h);
    h = fnv1a64(&probe.b, sizeof(probe.b), h);
    h = fnv1a64(&probe.layer, sizeof(probe.layer), h);
    h = fnv1a64(&cfg.seq_len, sizeof(cfg.seq_len), h);
    return hex64(h);
}

}  // namespace

ScanResult corpus_scan(const fs::path& corpus_path, const observer::Model& model,
                       const tok::Tokenizer& tokenizer, const probe::ProbeModel& probe,
                       const ScanConfig& cfg) {
    if (cfg.seq_len < 2) throw ConfigError("corpus_scan: seq_len must be at least 2");
    if (cfg.top_k < 0 || cfg.bottom_k < 0) throw ConfigError("corpus_scan: negative k");
    if (cfg.checkpoint_every < 1) throw ConfigError("corpus_scan: checkpoint_every must be >= 1");
    if (!fs::exists(corpus_path)) {
        throw RuntimeError("corpus_scan: no corpus at " + corpus_path.string());
    }
    if (cfg.seq_len > model.config().n_ctx) {
        throw ConfigError("corpus_scan: seq_len exceeds the observer context window");
    }

    const std::string sig = scan_signature(probe, cfg);
    long consumed_bytes = 0;
    long token_offset = 0;
    long windows_scored = 0;
    std::vector<int> buffer;
    ExtremeSet top{true, static_cast<size_t>(cfg.top_k), {}};
    ExtremeSet bottom{false, static_cast<size_t>(cfg.bottom_k), {}};

    const bool use_ckpt = !cfg.checkpoint_path.empty();
    if (use_ckpt && fs::exists(cfg.checkpoint_path)) {
        json j = json::parse(read_text_file(cfg.checkpoint_path));
        if (j.at("signature").get<std::string>() != sig) {
            throw RuntimeError("corpus_scan: checkpoint was written by a different probe/config");
        }
        consumed_bytes = j.at("consumed_bytes").get<long>();
        token_offset = j.at("token_offset").get<long>();
        windows_scored = j.at("windows_scored").get<long>();
        buffer = j.at("buffer").get<std::vector<int>>();
        top.hits = hits_from_json(j.at("top"));
        bottom.hits = hits_from_json(j.at("bottom"));
    }
    const long file_size = static_cast<long>(fs::file_size(corpus_path));
    if (consumed_bytes > file_size) {
        throw RuntimeError("corpus_scan: corpus is shorter than the checkpoint position");
    }

    auto save_ckpt = [&] {
        if (!use_ckpt) return;
        json j;
        j["signature"] = sig;
        j["consumed_bytes"] = consumed_bytes;
        j["token_offset"] = token_offset;
        j["windows_scored"] = windows_scored;
        j["buffer"] = buffer;
        j["top"] = hits_to_json(top.hits);
        j["bottom"] = hits_to_json(bottom.hits);
        write_text_file_atomic(cfg.checkpoint_path, j.dump());
    };

    observer::CaptureSpec spec;
    spec.layers = {probe.layer};
    auto score_window = [&](const std::vector<int>& window, long offset) {
        auto acts = model.forward(window, spec);
        const int last = static_cast<int>(window.size()) - 1;
        double s = probe::score(probe, acts.resid.at(probe.layer).row(last).transpose());
        ScanHit hit;
        hit.sequence_text = tokenizer.decode(window);
        hit.probe_activation = s;
        hit.corpus_offset = offset;
        top.offer(hit);
        bottom.offer(std::move(hit));
    };

    std::ifstream in(corpus_path, std::ios::binary);
    if (!in) throw RuntimeError("corpus_scan: cannot open " + corpus_path.string());
    in.seekg(consumed_bytes);
    std::string line;
    long since_ckpt = 0;
    while (std::getline(in, line)) {
        const bool had_newline = !in.eof();
        consumed_bytes += static_cast<long>(line.size()) + (had_newline ? 1 : 0);
        if (had_newline) line += '\n';
        if (!line.empty()) {
            auto toks = tokenizer.encode(line);
            buffer.insert(buffer.end(), toks.begin(), toks.end());
        }
        while (buffer.size() >= static_cast<size_t>(cfg.seq_len)) {
            std::vector<int> window(buffer.begin(), buffer.begin() + cfg.seq_len);
            buffer.erase(buffer.begin(), buffer.begin() + cfg.seq_len);
            score_window(window, token_offset);
            token_offset += cfg.seq_len;
            ++windows_scored;
            if (++since_ckpt >= cfg.checkpoint_every) {
                save_ckpt();
                since_ckpt = 0;
            }
        }
    }
    save_ckpt();  // full-window state only: the tail below stays re-scorable

    ScanResult res;
    res.windows_scored = windows_scored;
    res.skipped_short = 0;
    if (buffer.size() >= 2) {
        score_window(buffer, token_offset);
        ++res.windows_scored;
    } else if (buffer.size() == 1) {
        res.skipped_short = 1;
    }
    res.top = top.hits;
    res.bottom = bottom.hits;
    return res;
}

}  // namespace obsprobe::attribution
