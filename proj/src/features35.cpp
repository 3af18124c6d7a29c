#include "obsprobe/features35.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/SVD>
#include <json.hpp>

#include "obsprobe/text.hpp"

namespace obsprobe::features35 {

using nlohmann::json;

namespace {

constexpr double kSvFloor = 1e-12;   // stands in for vanished singular values
constexpr double kRatioEps = 1e-6;   // self-ratio denominator guard

}  // namespace

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

std::vector<Chunk> chunk_text(const std::string& text) {
    if (trim(text).empty()) throw RuntimeError("chunk_text: empty input");
    // candidate cut points: after '\n', and after '.' followed by space/end
    std::vector<size_t> cuts;
    for (size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '\n') {
            cuts.push_back(i + 1);
        } else if (text[i] == '.') {
            if (i + 1 == text.size() ||
                std::isspace(static_cast<unsigned char>(text[i + 1]))) {
                cuts.push_back(i + 1);
            }
        }
    }
    cuts.push_back(text.size());

    std::vector<Chunk> out;
    size_t begin = 0;
    for (size_t cut : cuts) {
        if (cut <= begin) continue;
        std::string piece = text.substr(begin, cut - begin);
        std::string trimmed = trim(piece);
        if (trimmed.empty()) {
            if (!out.empty()) {
                out.back().span_end = cut;  // fold separators into the neighbor
            }
            // leading whitespace-only piece: extend the next chunk backward
            begin = out.empty() ? begin : cut;
            continue;
        }
        Chunk c;
        c.index = static_cast<int>(out.size());
        c.text = std::move(trimmed);
        c.span_begin = begin;
        c.span_end = cut;
        out.push_back(std::move(c));
        begin = cut;
    }
    if (out.empty()) throw RuntimeError("chunk_text: no non-empty segments");
    out.back().span_end = text.size();
    return out;
}

std::vector<Chunk> chunk_text(const std::string& text, const std::string& parent_id, Side side) {
    auto chunks = chunk_text(text);
    for (auto& c : chunks) {
        c.parent_id = parent_id;
        c.side = side;
    }
    return chunks;
}

// ---------------------------------------------------------------------------
// Config and names
// ---------------------------------------------------------------------------

Features35Config Features35Config::scaled_defaults(int n_layer) {
    if (n_layer < 3) throw ConfigError("features: observer too shallow for three attention taps");
    Features35Config cfg;
    auto pick = [&](double frac) {
        return std::clamp(static_cast<int>(std::lround(frac * n_layer)), 0, n_layer - 1);
    };
    cfg.attn_blocks = {pick(40.0 / 46.0), pick(42.0 / 46.0), pick(44.0 / 46.0)};
    for (size_t i = 1; i < cfg.attn_blocks.size(); ++i) {
        if (cfg.attn_blocks[i] <= cfg.attn_blocks[i - 1]) {
            cfg.attn_blocks[i] = cfg.attn_blocks[i - 1] + 1;
        }
    }
    int over = cfg.attn_blocks.back() - (n_layer - 1);
    if (over > 0) {
        for (int& b : cfg.attn_blocks) b -= over;
    }
    cfg.mid_layer = std::clamp(static_cast<int>(std::lround(28.0 / 46.0 * n_layer)), 0, n_layer);
    return cfg;
}

void Features35Config::validate(int n_layer) const {
    if (attn_blocks.size() != 3) throw ConfigError("features: exactly three attention blocks");
    for (int b : attn_blocks) {
        if (b < 0 || b >= n_layer) throw ConfigError("features: attention block out of range");
    }
    if (mid_layer < 0 || mid_layer > n_layer) throw ConfigError("features: mid layer out of range");
    if (attn_top_k < 1 || svd_top < 1) throw ConfigError("features: top-k values must be positive");
}

std::vector<std::string> feature_names(const Features35Config& cfg) {
    std::vector<std::string> names = {"nll_mean", "nll_max", "rank_gt10_frac", "entropy_slope"};
    for (int b : cfg.attn_blocks) {
        std::string tag = "L" + std::to_string(b);
        names.push_back(tag + "_attn_self_ratio");
        names.push_back(tag + "_attn_top1_pos");
        names.push_back(tag + "_attn_top15_mean");
    }
    const char* rest[] = {"resid_cos_top_attn", "resid_cos_context_avg",
                          "emb_top1",           "emb_top3_mean",
                          "emb_var",            "emb_top_gap",
                          "emb_global_max",     "emb_global_mean",
                          "logits_logsum_sv",   "logits_spectral_gap",
                          "entity_coverage",    "entity_novel_count",
                          "trigram_novelty",    "numeric_ratio",
                          "sent_len_z",         "semgraph_edge_var",
                          "flag_entropy_slope", "flag_emb_top_gap",
                          "flag_entity_coverage", "flag_sent_len_z",
                          "flag_semgraph"};
    names.insert(names.end(), std::begin(rest), std::end(rest));
    return names;
}

// ---------------------------------------------------------------------------
// FeatureRow serialization
// ---------------------------------------------------------------------------

void FeatureRow::validate(size_t expected_dims) const {
    if (values.size() != expected_dims) {
        throw RuntimeError("feature row: expected " + std::to_string(expected_dims) +
                           " dims, got " + std::to_string(values.size()));
    }
    for (double v : values) {
        if (!std::isfinite(v)) throw RuntimeError("feature row: non-finite value");
    }
}

std::string FeatureRow::to_json_line() const {
    json j;
    j["chunk_id"] = chunk.parent_id + "/" +
                    (chunk.side == Side::context ? "ctx" : "cont") + "/" +
                    std::to_string(chunk.index);
    j["parent_id"] = chunk.parent_id;
    j["index"] = chunk.index;
    j["text"] = chunk.text;
    j["label"] = label;
    j["values"] = values;
    return j.dump();
}

FeatureRow FeatureRow::from_json_line(const std::string& line) {
    json j = json::parse(line);
    FeatureRow r;
    r.chunk.parent_id = j.at("parent_id").get<std::string>();
    r.chunk.index = j.at("index").get<int>();
    r.chunk.text = j.at("text").get<std::string>();
    r.label = j.at("label").get<int>();
    r.values = j.at("values").get<std::vector<double>>();
    return r;
}

void append_rows_jsonl(const fs::path& path, const std::vector<FeatureRow>& rows) {
    std::string out;
    for (const auto& r : rows) {
        out += r.to_json_line();
        out += '\n';
    }
    if (fs::exists(path)) {
        write_text_file(path, read_text_file(path) + out);
    } else {
        write_text_file(path, out);
    }
}

std::vector<FeatureRow> read_rows_jsonl(const fs::path& path) {
    std::vector<FeatureRow> rows;
    std::string text = read_text_file(path);
    size_t pos = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        if (!trim(line).empty()) rows.push_back(FeatureRow::from_json_line(line));
        pos = nl + 1;
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Extractor
// ---------------------------------------------------------------------------

namespace {

/// End byte offset of every token in the decoded document text.
std::vector<size_t> token_byte_ends(const std::vector<int>& tokens, const tok::Tokenizer& tk) {
    std::vector<size_t> ends(tokens.size());
    size_t off = 0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        off += tk.decode({tokens[i]}).size();
        ends[i] = off;
    }
    return ends;
}

/// Tokens whose byte span overlaps [begin, end).
void align_span(Chunk& c, size_t begin, size_t end, const std::vector<size_t>& ends) {
    int lo = -1, hi = -1;
    for (size_t t = 0; t < ends.size(); ++t) {
        size_t tb = t == 0 ? 0 : ends[t - 1];
        size_t te = ends[t];
        if (tb < end && te > begin) {
            if (lo < 0) lo = static_cast<int>(t);
            hi = static_cast<int>(t) + 1;
        }
    }
    if (lo < 0) throw RuntimeError("features: chunk '" + c.text + "' maps to no tokens");
    c.tok_begin = lo;
    c.tok_end = hi;
}

double cosine(const Vec& a, const Vec& b) {
    double denom = a.norm() * b.norm();
    return denom > 0 ? a.dot(b) / denom : 0.0;
}

double population_variance(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    return acc / static_cast<double>(xs.size());
}

Vec unit_embed(Embedder& emb, const std::string& text) {
    Vec v = emb.embed(text);
    double n = v.norm();
    if (n > 0) v /= n;
    return v;
}

}  // namespace

Extractor::Extractor(const corpus::Example& ex, const observer::TokenizedDoc& doc,
                     const observer::CapturedActivations& acts, const tok::Tokenizer& tokenizer,
                     Embedder& embedder, const EntityExtractor& ner, Features35Config cfg)
    : acts_(acts),
      cfg_(std::move(cfg)),
      embedder_(&embedder),
      ner_(&ner) {
    doc.validate();
    label_ = ex.label == corpus::Label::hallucinated ? 1 : 0;
    context_len_ = doc.context_len;
    tokens_ = doc.tokens;
    x_text_ = ex.context;
    const int T = static_cast<int>(doc.tokens.size());

    if (acts.logits.rows() != T) throw RuntimeError("features: logits not captured for all tokens");
    if (!acts.resid.count(cfg_.mid_layer)) {
        throw RuntimeError("features: residual stream " + std::to_string(cfg_.mid_layer) +
                           " not captured");
    }
    for (int b : cfg_.attn_blocks) {
        if (!acts.attn.count(b)) {
            throw RuntimeError("features: attention block " + std::to_string(b) +
                               " not captured");
        }
    }

    // chunk both sides and align byte spans to document tokens
    x_chunks_ = chunk_text(ex.context, ex.id, Side::context);
    y_chunks_ = chunk_text(ex.continuation, ex.id, Side::continuation);
    auto ends = token_byte_ends(doc.tokens, tokenizer);
    const size_t shift = ex.context.size() + 1;  // the "\n" joining X and Y
    for (auto& c : x_chunks_) align_span(c, c.span_begin, c.span_end, ends);
    for (auto& c : y_chunks_) align_span(c, c.span_begin + shift, c.span_end + shift, ends);

    // head-averaged attention per configured block
    for (int b : cfg_.attn_blocks) {
        const auto& heads = acts.attn.at(b);
        Mat avg = Mat::Zero(T, T);
        for (const Mat& h : heads) avg += h;
        avg /= static_cast<double>(heads.size());
        attn_avg_.push_back(std::move(avg));
    }

    // embeddings and the doc-wide similarity table
    for (const auto& c : x_chunks_) x_chunk_emb_.push_back(unit_embed(*embedder_, c.text));
    for (const auto& c : y_chunks_) {
        Vec e = unit_embed(*embedder_, c.text);
        std::vector<double> sims;
        sims.reserve(x_chunk_emb_.size());
        for (const auto& xe : x_chunk_emb_) sims.push_back(e.dot(xe));
        all_sims_.push_back(std::move(sims));
    }

    for (const auto& e : ner_->extract(ex.context)) {
        x_entities_.insert(baselines::normalize_entity(e));
    }
    x_entities_.erase("");

    // context sentence-length distribution for the z-score
    auto sents = text::split_sentences(ex.context);
    std::vector<double> lens;
    for (const auto& s : sents) lens.push_back(static_cast<double>(text::word_tokens(s.text).size()));
    if (lens.size() >= 2) {
        double mean = std::accumulate(lens.begin(), lens.end(), 0.0) / lens.size();
        double var = 0;
        for (double l : lens) var += (l - mean) * (l - mean);
        double sd = std::sqrt(var / lens.size());
        if (sd > 0) {
            ctx_sent_len_mean_ = mean;
            ctx_sent_len_std_ = sd;
            ctx_sent_stats_ok_ = true;
        }
    }

    const Mat& R = acts.resid.at(cfg_.mid_layer);
    context_resid_avg_ = R.topRows(context_len_).colwise().mean().transpose();
}

FeatureRow Extractor::extract(const Chunk& chunk) const {
    if (chunk.side != Side::continuation) {
        throw RuntimeError("features: rows are extracted for continuation chunks");
    }
    if (chunk.index < 0 || chunk.index >= static_cast<int>(y_chunks_.size())) {
        throw RuntimeError("features: unknown chunk index");
    }
    const int b0 = chunk.tok_begin, b1 = chunk.tok_end;
    if (b1 <= b0) throw RuntimeError("features: chunk has no tokens");
    const int n_tok = b1 - b0;

    FeatureRow row;
    row.chunk = chunk;
    row.label = label_;
    auto& v = row.values;

    // token-level uncertainty: predictions for token t live in logits row t-1
    std::vector<double> nlls, entropies;
    int rank_gt10 = 0;
    for (int t = b0; t < b1; ++t) {
        Eigen::RowVectorXd z = acts_.logits.row(t - 1);
        double zmax = z.maxCoeff();
        Eigen::ArrayXd shifted = (z.array() - zmax).transpose();
        double lse = zmax + std::log(shifted.exp().sum());
        int gold = tokens_[static_cast<size_t>(t)];
        nlls.push_back(lse - z(gold));
        // H = lse - sum p * z
        Eigen::ArrayXd p = (shifted - (lse - zmax)).exp();
        entropies.push_back(lse - (p * z.transpose().array()).sum());
        int rank = 1;
        for (Eigen::Index k = 0; k < z.size(); ++k) rank += z(k) > z(gold) ? 1 : 0;
        if (rank > 10) ++rank_gt10;
    }
    v.push_back(std::accumulate(nlls.begin(), nlls.end(), 0.0) / n_tok);
    v.push_back(*std::max_element(nlls.begin(), nlls.end()));
    v.push_back(static_cast<double>(rank_gt10) / n_tok);
    bool slope_flag = entropies.size() < 2;
    double slope = 0.0;
    if (!slope_flag) {
        double xbar = (entropies.size() - 1) / 2.0;
        double ybar = std::accumulate(entropies.begin(), entropies.end(), 0.0) / entropies.size();
        double num = 0, den = 0;
        for (size_t i = 0; i < entropies.size(); ++i) {
            num += (i - xbar) * (entropies[i] - ybar);
            den += (i - xbar) * (i - xbar);
        }
        slope = num / den;
    }
    v.push_back(slope);

    // cross-context attention per configured block
    auto rect_mean = [](const Mat& A, int q0, int q1, int k0, int k1) {
        return A.block(q0, k0, q1 - q0, k1 - k0).mean();
    };
    std::vector<double> first_block_ayx;  // reused to pick the top-attention chunk
    for (size_t bi = 0; bi < attn_avg_.size(); ++bi) {
        const Mat& A = attn_avg_[bi];
        double a_yy = rect_mean(A, b0, b1, b0, b1);
        std::vector<double> a_yx;
        for (const auto& xc : x_chunks_) {
            a_yx.push_back(rect_mean(A, b0, b1, xc.tok_begin, xc.tok_end));
        }
        if (bi == 0) first_block_ayx = a_yx;
        double mean_yx = std::accumulate(a_yx.begin(), a_yx.end(), 0.0) / a_yx.size();
        v.push_back(a_yy / (mean_yx + kRatioEps));
        std::sort(a_yx.begin(), a_yx.end(), std::greater<>());
        size_t take = std::min<size_t>(static_cast<size_t>(cfg_.attn_top_k), a_yx.size());
        v.push_back(a_yx.front());
        v.push_back(std::accumulate(a_yx.begin(), a_yx.begin() + take, 0.0) / take);
    }

    // residual alignment at the mid stream
    const Mat& R = acts_.resid.at(cfg_.mid_layer);
    Vec chunk_sum = R.middleRows(b0, n_tok).colwise().sum().transpose();
    size_t top_j = std::distance(first_block_ayx.begin(),
                                 std::max_element(first_block_ayx.begin(), first_block_ayx.end()));
    const Chunk& xc = x_chunks_[top_j];
    Vec top_avg = R.middleRows(xc.tok_begin, xc.tok_end - xc.tok_begin).colwise().mean().transpose();
    v.push_back(cosine(chunk_sum, top_avg));
    v.push_back(cosine(chunk_sum, context_resid_avg_));

    // embedding similarity statistics
    std::vector<double> sims = all_sims_[static_cast<size_t>(chunk.index)];
    std::sort(sims.begin(), sims.end(), std::greater<>());
    size_t top3 = std::min<size_t>(3, sims.size());
    v.push_back(sims.front());
    v.push_back(std::accumulate(sims.begin(), sims.begin() + top3, 0.0) / top3);
    v.push_back(population_variance(sims));
    bool gap_flag = sims.size() < 2;
    v.push_back(gap_flag ? 0.0 : sims[0] - sims[1]);
    double gmax = -1.0, gsum = 0.0;
    size_t gcount = 0;
    for (const auto& srow : all_sims_) {
        for (double s : srow) {
            gmax = std::max(gmax, s);
            gsum += s;
            ++gcount;
        }
    }
    v.push_back(gmax);
    v.push_back(gsum / gcount);

    // logit eigenspectrum over the chunk's rows
    Mat slice = acts_.logits.middleRows(b0, n_tok);
    Eigen::BDCSVD<Mat> svd(slice);
    Vec sv = svd.singularValues();
    double logsum = 0.0;
    for (int r = 0; r < cfg_.svd_top; ++r) {
        double s = r < sv.size() ? sv(r) : 0.0;
        logsum += std::log(std::max(s, kSvFloor));
    }
    v.push_back(logsum);
    v.push_back(sv(0) - (sv.size() > 1 ? sv(1) : 0.0));

    // entity grounding
    std::set<std::string> ei;
    for (const auto& e : ner_->extract(chunk.text)) ei.insert(baselines::normalize_entity(e));
    ei.erase("");
    bool cov_flag = ei.empty();
    double coverage = 1.0;
    double novel = 0.0;
    if (!cov_flag) {
        size_t inter = 0;
        for (const auto& e : ei) inter += x_entities_.count(e);
        coverage = static_cast<double>(inter) / static_cast<double>(ei.size());
        novel = static_cast<double>(ei.size() - inter);
    }
    v.push_back(coverage);
    v.push_back(novel);

    // surface heuristics
    auto ytoks = text::word_tokens(chunk.text);
    double tri_nov = 0.0;
    if (ytoks.size() >= 3) {
        auto ytri = text::ngram_set(ytoks, 3);
        auto xtri = text::ngram_set(text::word_tokens(x_text_), 3);
        size_t novel_tri = 0;
        for (const auto& g : ytri) novel_tri += xtri.count(g) ? 0 : 1;
        tri_nov = static_cast<double>(novel_tri) / static_cast<double>(ytri.size());
    }
    v.push_back(tri_nov);
    size_t numeric = 0;
    for (const auto& t : ytoks) numeric += text::is_numeric_token(t) ? 1 : 0;
    v.push_back(ytoks.empty() ? 0.0 : static_cast<double>(numeric) / ytoks.size());
    auto ysents = text::split_sentences(chunk.text);
    bool z_flag = !ctx_sent_stats_ok_;
    double z = 0.0;
    if (!z_flag && !ysents.empty()) {
        double mean_len = 0;
        for (const auto& s : ysents) mean_len += text::word_tokens(s.text).size();
        mean_len /= ysents.size();
        z = (mean_len - ctx_sent_len_mean_) / ctx_sent_len_std_;
    }
    v.push_back(z);

    // intra-chunk semantic graph
    bool graph_flag = ysents.size() < 2;
    double edge_var = 0.0;
    if (!graph_flag) {
        std::vector<Vec> embs;
        for (const auto& s : ysents) embs.push_back(unit_embed(*embedder_, s.text));
        std::set<std::pair<size_t, size_t>> edges;
        for (size_t i = 0; i < embs.size(); ++i) {
            std::vector<std::pair<double, size_t>> nb;
            for (size_t j = 0; j < embs.size(); ++j) {
                if (j != i) nb.emplace_back(embs[i].dot(embs[j]), j);
            }
            std::sort(nb.begin(), nb.end(), std::greater<>());
            for (size_t k = 0; k < std::min<size_t>(3, nb.size()); ++k) {
                size_t j = nb[k].second;
                edges.insert({std::min(i, j), std::max(i, j)});
            }
        }
        std::vector<double> edge_sims;
        for (const auto& [i, j] : edges) edge_sims.push_back(embs[i].dot(embs[j]));
        edge_var = population_variance(edge_sims);
    }
    v.push_back(edge_var);

    // degenerate-case flags
    v.push_back(slope_flag ? 1.0 : 0.0);
    v.push_back(gap_flag ? 1.0 : 0.0);
    v.push_back(cov_flag ? 1.0 : 0.0);
    v.push_back(z_flag ? 1.0 : 0.0);
    v.push_back(graph_flag ? 1.0 : 0.0);

    row.validate(feature_names(cfg_).size());
    return row;
}

std::vector<FeatureRow> Extractor::extract_all() const {
    std::vector<FeatureRow> rows;
    rows.reserve(y_chunks_.size());
    for (const auto& c : y_chunks_) rows.push_back(extract(c));
    return rows;
}

FeatureRow extract_features(const Chunk& chunk, const corpus::Example& ex,
                            const observer::TokenizedDoc& doc,
                            const observer::CapturedActivations& acts,
                            const tok::Tokenizer& tokenizer, Embedder& embedder,
                            const EntityExtractor& ner, const Features35Config& cfg) {
    Extractor ex_state(ex, doc, acts, tokenizer, embedder, ner, cfg);
    // match by index: the caller's chunk may carry stale token spans
    return ex_state.extract(ex_state.continuation_chunks().at(static_cast<size_t>(chunk.index)));
}

// ---------------------------------------------------------------------------
// Random forest MDI
// ---------------------------------------------------------------------------

namespace {

double gini(int n0, int n1) {
    int n = n0 + n1;
    if (n == 0) return 0.0;
    double p0 = static_cast<double>(n0) / n, p1 = static_cast<double>(n1) / n;
    return 1.0 - p0 * p0 - p1 * p1;
}

struct TreeBuilder {
    const Mat& X;
    const std::vector<int>& y;
    const ForestConfig& cfg;
    Rng& rng;
    Vec& importance;  // raw MDI accumulator for this tree
    int n_root;

    void build(std::vector<int>& idx, int depth) {
        int n = static_cast<int>(idx.size());
        int n1 = 0;
        for (int i : idx) n1 += y[static_cast<size_t>(i)];
        int n0 = n - n1;
        double g_parent = gini(n0, n1);
        if (depth >= cfg.max_depth || n < 2 * cfg.min_leaf || n0 == 0 || n1 == 0) return;

        int F = static_cast<int>(X.cols());
        int mtry = std::max(1, static_cast<int>(std::lround(std::sqrt(double(F)))));
        std::vector<size_t> feats = rng.sample_without_replacement(static_cast<size_t>(F),
                                                                   static_cast<size_t>(mtry));
        std::sort(feats.begin(), feats.end());

        double best_gain = 0.0, best_thresh = 0.0;
        int best_feat = -1;
        for (size_t f : feats) {
            std::vector<std::pair<double, int>> vals;
            vals.reserve(idx.size());
            for (int i : idx) {
                vals.emplace_back(X(i, static_cast<Eigen::Index>(f)), y[static_cast<size_t>(i)]);
            }
            std::sort(vals.begin(), vals.end());
            int l0 = 0, l1 = 0;
            for (int i = 0; i + 1 < n; ++i) {
                l0 += vals[static_cast<size_t>(i)].second == 0;
                l1 += vals[static_cast<size_t>(i)].second == 1;
                if (vals[static_cast<size_t>(i)].first ==
                    vals[static_cast<size_t>(i + 1)].first) {
                    continue;  // can't split between equal values
                }
                int nl = i + 1, nr = n - nl;
                if (nl < cfg.min_leaf || nr < cfg.min_leaf) continue;
                double gl = gini(l0, l1), gr = gini(n0 - l0, n1 - l1);
                double gain = g_parent - (nl * gl + nr * gr) / n;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_feat = static_cast<int>(f);
                    best_thresh = 0.5 * (vals[static_cast<size_t>(i)].first +
                                         vals[static_cast<size_t>(i + 1)].first);
                }
            }
        }
        if (best_feat < 0 || best_gain <= 0.0) return;

        importance(best_feat) += (static_cast<double>(n) / n_root) * best_gain;
        std::vector<int> left, right;
        for (int i : idx) {
            (X(i, best_feat) <= best_thresh ? left : right).push_back(i);
        }
        build(left, depth + 1);
        build(right, depth + 1);
    }
};

}  // namespace

Vec mdi_importances(const Mat& X, const std::vector<int>& y, const ForestConfig& cfg) {
    const int n = static_cast<int>(X.rows());
    if (static_cast<size_t>(n) != y.size()) throw RuntimeError("forest: feature/label mismatch");
    bool has0 = false, has1 = false;
    for (int v : y) (v ? has1 : has0) = true;
    if (!has0 || !has1) throw RuntimeError("forest: need both classes");

    Vec total = Vec::Zero(X.cols());
    Rng rng(cfg.seed);
    for (int t = 0; t < cfg.n_trees; ++t) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(rng.below(n));
        Vec imp = Vec::Zero(X.cols());
        TreeBuilder builder{X, y, cfg, rng, imp, n};
        builder.build(idx, 0);
        double s = imp.sum();
        if (s > 0) total += imp / s;  // per-tree normalization, as in the usual MDI
    }
    double s = total.sum();
    if (s > 0) total /= s;
    return total;
}

std::vector<std::pair<std::string, double>> importance_report(
    const std::vector<FeatureRow>& rows, const std::vector<std::string>& names,
    const ForestConfig& cfg) {
    if (rows.empty()) throw RuntimeError("forest: no rows");
    Mat X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(names.size()));
    std::vector<int> y;
    for (size_t i = 0; i < rows.size(); ++i) {
        rows[i].validate(names.size());
        for (size_t j = 0; j < names.size(); ++j) {
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i].values[j];
        }
        y.push_back(rows[i].label);
    }
    Vec imp = mdi_importances(X, y, cfg);
    std::vector<std::pair<std::string, double>> ranked;
    for (size_t j = 0; j < names.size(); ++j) {
        ranked.emplace_back(names[j], imp(static_cast<Eigen::Index>(j)));
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    return ranked;
}

}  // namespace obsprobe::features35
