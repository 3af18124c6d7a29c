#include "obsprobe/baselines.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "obsprobe/text.hpp"

namespace obsprobe::baselines {

using nlohmann::json;

std::string method_name(Method m) {
    switch (m) {
        case Method::lexical: return "lexical";
        case Method::entity: return "entity";
        case Method::semantic: return "semantic";
        case Method::lookback: return "lookback";
    }
    throw RuntimeError("unknown baseline method");
}

Method method_from_name(const std::string& name) {
    if (name == "lexical") return Method::lexical;
    if (name == "entity") return Method::entity;
    if (name == "semantic") return Method::semantic;
    if (name == "lookback") return Method::lookback;
    throw ConfigError("unknown baseline method '" + name + "'");
}

void BaselineFeatures::validate() const {
    size_t want_min = 1, want_max = 1;
    if (method == Method::entity) want_max = 2;  // ratio + no-entities flag
    if (method == Method::lookback) want_max = SIZE_MAX;
    if (values.size() < want_min || values.size() > want_max) {
        throw RuntimeError("baseline features: bad arity " + std::to_string(values.size()) +
                           " for method " + method_name(method));
    }
    for (double v : values) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw RuntimeError("baseline features: value " + std::to_string(v) +
                               " outside [0,1] for " + example_id);
        }
    }
}

std::string BaselineFeatures::to_json_line() const {
    json j;
    j["example_id"] = example_id;
    j["method"] = method_name(method);
    j["values"] = values;
    return j.dump();
}

BaselineFeatures BaselineFeatures::from_json_line(const std::string& line) {
    json j = json::parse(line);
    BaselineFeatures f;
    f.example_id = j.at("example_id").get<std::string>();
    f.method = method_from_name(j.at("method").get<std::string>());
    f.values = j.at("values").get<std::vector<double>>();
    return f;
}

void write_features_jsonl(const fs::path& path, const std::vector<BaselineFeatures>& rows) {
    std::string out;
    for (const auto& r : rows) {
        r.validate();
        out += r.to_json_line();
        out += '\n';
    }
    write_text_file_atomic(path, out);
}

std::vector<BaselineFeatures> read_features_jsonl(const fs::path& path) {
    std::vector<BaselineFeatures> rows;
    std::string text = read_text_file(path);
    size_t pos = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        if (!trim(line).empty()) rows.push_back(BaselineFeatures::from_json_line(line));
        pos = nl + 1;
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Heuristic NER
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string>& cap_stopwords() {
    static const std::set<std::string> words = {
        "a",        "an",      "and",     "after",  "also",   "as",      "at",      "before",
        "but",      "by",      "despite", "during", "each",   "earlier", "finally", "for",
        "from",     "he",      "her",     "his",    "however", "i",      "if",      "in",
        "it",       "its",     "last",    "later",  "many",   "meanwhile", "more",  "most",
        "new",      "no",      "not",     "now",    "officials", "on",   "once",    "one",
        "or",       "our",     "she",     "since",  "so",     "some",    "that",    "the",
        "their",    "then",    "there",   "these",  "they",   "this",    "though",  "to",
        "today",    "two",     "under",   "until",  "we",     "when",    "where",   "while",
        "with",     "yesterday", "you",
    };
    return words;
}

const std::set<std::string>& entity_connectors() {
    static const std::set<std::string> words = {"of", "de", "van", "von", "der", "al"};
    return words;
}

const std::set<std::string>& unit_words() {
    static const std::set<std::string> words = {
        "percent", "million",  "billion", "thousand", "km",     "kilometers", "miles",
        "tons",    "tonnes",   "people",  "dollars",  "euros",  "hectares",   "megawatts",
        "meters",  "residents", "years",  "workers",  "homes",
    };
    return words;
}

struct RawToken {
    std::string text;  // outer punctuation stripped, case preserved
    bool title = false;
    bool acronym = false;
    bool numeric = false;
    bool year = false;
    bool money = false;
};

std::vector<RawToken> scan_tokens(const std::string& text) {
    std::vector<RawToken> out;
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t j = i;
        while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j == i) break;
        std::string tok = text.substr(i, j - i);
        i = j;
        size_t b = 0, e = tok.size();
        while (b < e && !std::isalnum(static_cast<unsigned char>(tok[b])) && tok[b] != '$') ++b;
        while (e > b && !std::isalnum(static_cast<unsigned char>(tok[e - 1])) && tok[e - 1] != '%')
            --e;
        if (b >= e) continue;
        RawToken rt;
        rt.text = tok.substr(b, e - b);
        const std::string& s = rt.text;
        rt.money = s[0] == '$';
        size_t digits = 0, uppers = 0, lowers = 0;
        for (char c : s) {
            if (std::isdigit(static_cast<unsigned char>(c))) ++digits;
            else if (std::isupper(static_cast<unsigned char>(c))) ++uppers;
            else if (std::islower(static_cast<unsigned char>(c))) ++lowers;
        }
        rt.numeric = digits > 0 && uppers + lowers == 0;
        rt.year = rt.numeric && s.size() == 4 && s[0] >= '1' && s[0] <= '2';
        if (std::isupper(static_cast<unsigned char>(s[0]))) {
            if (uppers >= 2 && lowers == 0 && s.size() >= 2) rt.acronym = true;
            else rt.title = true;
        }
        out.push_back(std::move(rt));
    }
    return out;
}

}  // namespace

std::vector<std::string> HeuristicNer::extract(const std::string& text) const {
    std::vector<RawToken> toks = scan_tokens(text);
    std::vector<std::string> out;
    const auto& stop = cap_stopwords();
    for (size_t i = 0; i < toks.size();) {
        const RawToken& t = toks[i];
        bool cap = t.title || t.acronym;
        if (cap && !stop.count(lowercase(t.text))) {
            std::string ent = t.text;
            size_t j = i + 1;
            while (j < toks.size()) {
                const RawToken& nx = toks[j];
                if ((nx.title || nx.acronym) && !stop.count(lowercase(nx.text))) {
                    ent += " " + nx.text;
                    ++j;
                } else if (j + 1 < toks.size() && entity_connectors().count(lowercase(nx.text)) &&
                           (toks[j + 1].title || toks[j + 1].acronym)) {
                    ent += " " + nx.text + " " + toks[j + 1].text;
                    j += 2;
                } else {
                    break;
                }
            }
            out.push_back(ent);
            i = j;
            continue;
        }
        if (t.money) {
            std::string ent = t.text;
            if (i + 1 < toks.size() && unit_words().count(lowercase(toks[i + 1].text))) {
                ent += " " + toks[i + 1].text;
                ++i;
            }
            out.push_back(ent);
            ++i;
            continue;
        }
        if (t.numeric) {
            if (i + 1 < toks.size() && unit_words().count(lowercase(toks[i + 1].text))) {
                out.push_back(t.text + " " + toks[i + 1].text);
                i += 2;
                continue;
            }
            if (t.year) out.push_back(t.text);
        }
        ++i;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

Vec HashedNgramEmbedder::embed(const std::string& text) {
    Vec v = Vec::Zero(dim_);
    std::string s = " " + lowercase(trim(text)) + " ";
    for (size_t n = 3; n <= 5; ++n) {
        if (s.size() < n) continue;
        for (size_t i = 0; i + n <= s.size(); ++i) {
            uint64_t h = fnv1a64(std::string_view(s).substr(i, n));
            auto idx = static_cast<Eigen::Index>(h % static_cast<uint64_t>(dim_));
            double sign = (h >> 63) ? 1.0 : -1.0;
            v(idx) += sign;
        }
    }
    double norm = v.norm();
    if (norm > 0) v /= norm;
    return v;
}

HttpEmbedder::HttpEmbedder(HttpEmbedderConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.endpoint.empty()) throw ConfigError("embedder: endpoint not configured");
    if (!cfg_.cache_dir.empty()) fs::create_directories(cfg_.cache_dir);
}

Vec HttpEmbedder::embed(const std::string& text) {
    std::string key = sha256_hex(cfg_.model + "\n" + text);
    {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = memo_.find(key);
        if (it != memo_.end()) return it->second;
    }
    fs::path cache_file;
    if (!cfg_.cache_dir.empty()) {
        cache_file = cfg_.cache_dir / (key + ".json");
        if (fs::exists(cache_file)) {
            json j = json::parse(read_text_file(cache_file));
            auto vals = j.at("embedding").get<std::vector<double>>();
            Vec v(static_cast<Eigen::Index>(vals.size()));
            for (size_t i = 0; i < vals.size(); ++i) v(static_cast<Eigen::Index>(i)) = vals[i];
            std::lock_guard<std::mutex> lock(mu_);
            memo_[key] = v;
            return v;
        }
    }

    json payload;
    payload["model"] = cfg_.model;
    payload["input"] = text;
    std::string body = payload.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(cfg_.retry_backoff * (1 << (attempt - 1)));
        httplib::Client cli(cfg_.endpoint);
        cli.set_read_timeout(std::chrono::seconds(60));
        cli.set_connection_timeout(std::chrono::seconds(10));
        httplib::Headers headers;
        if (!cfg_.api_key.empty()) headers.insert({"Authorization", "Bearer " + cfg_.api_key});
        auto res = cli.Post(cfg_.path, headers, body, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "server error " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw RuntimeError("embedder: http " + std::to_string(res->status) + ": " + res->body);
        }
        json j = json::parse(res->body);
        auto vals = j.at("data").at(0).at("embedding").get<std::vector<double>>();
        Vec v(static_cast<Eigen::Index>(vals.size()));
        for (size_t i = 0; i < vals.size(); ++i) v(static_cast<Eigen::Index>(i)) = vals[i];
        if (!cache_file.empty()) {
            json out;
            out["model"] = cfg_.model;
            out["embedding"] = vals;
            write_text_file_atomic(cache_file, out.dump());
        }
        std::lock_guard<std::mutex> lock(mu_);
        memo_[key] = v;
        return v;
    }
    throw RuntimeError("embedder: giving up after " + std::to_string(cfg_.max_retries + 1) +
                       " attempts: " + last_error);
}

// ---------------------------------------------------------------------------
// Detectors
// ---------------------------------------------------------------------------

double lexical_novelty(const std::string& Y, const std::string& X) {
    std::vector<std::string> ytok = text::word_tokens(Y);
    if (ytok.empty()) throw RuntimeError("lexical novelty: continuation has no word tokens");
    std::vector<std::string> xtok = text::word_tokens(X);
    double best = 0.0;
    for (size_t n = 1; n <= 3; ++n) {
        if (ytok.size() < n) continue;
        std::set<std::string> yn = text::ngram_set(ytok, n);
        std::set<std::string> xn = text::ngram_set(xtok, n);
        size_t shared = 0;
        for (const auto& g : yn) shared += xn.count(g);
        double nov = 1.0 - static_cast<double>(shared) / static_cast<double>(yn.size());
        best = std::max(best, nov);
    }
    return best;
}

std::string normalize_entity(const std::string& s) {
    std::string folded = lowercase(s);
    std::string out;
    bool in_space = true;
    for (char c : folded) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_space) out += ' ';
            in_space = true;
        } else {
            out += c;
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

double entity_novelty(const std::string& Y, const std::string& X, const EntityExtractor& ner,
                      bool* no_entities) {
    std::set<std::string> ey, ex;
    for (const auto& e : ner.extract(Y)) ey.insert(normalize_entity(e));
    for (const auto& e : ner.extract(X)) ex.insert(normalize_entity(e));
    ey.erase("");
    ex.erase("");
    if (ey.empty()) {
        if (no_entities) *no_entities = true;
        return 0.0;
    }
    if (no_entities) *no_entities = false;
    size_t novel = 0;
    for (const auto& e : ey) novel += ex.count(e) ? 0 : 1;
    return static_cast<double>(novel) / static_cast<double>(ey.size());
}

double semantic_similarity(const std::string& Y, const std::string& X, Embedder& embedder) {
    auto ysents = text::split_sentences(Y);
    if (ysents.empty()) throw RuntimeError("semantic similarity: continuation has no sentences");
    auto xsents = text::split_sentences(X);
    if (xsents.empty()) throw RuntimeError("semantic similarity: context has no sentences");
    Vec f = embedder.embed(ysents.back().text);
    double fn = f.norm();
    double best = -1.0;
    for (const auto& xs : xsents) {
        Vec e = embedder.embed(xs.text);
        double denom = fn * e.norm();
        double cosv = denom > 0 ? f.dot(e) / denom : 0.0;
        best = std::max(best, cosv);
    }
    return std::clamp(best, 0.0, 1.0);
}

std::vector<double> lookback_features(const observer::CapturedActivations& acts,
                                      const observer::TokenizedDoc& doc, bool include_current) {
    doc.validate();
    if (acts.attn.empty()) throw RuntimeError("lookback: no attention captured");
    const int L = acts.attn.rbegin()->first + 1;
    for (int b = 0; b < L; ++b) {
        if (!acts.attn.count(b)) {
            throw RuntimeError("lookback: attention missing for block " + std::to_string(b));
        }
    }
    const int H = static_cast<int>(acts.attn.begin()->second.size());
    const int N = doc.context_len;
    if (doc.sent_begin < N) throw RuntimeError("lookback: final sentence overlaps the context");

    std::vector<double> out;
    out.reserve(static_cast<size_t>(L) * static_cast<size_t>(H));
    for (int b = 0; b < L; ++b) {
        const auto& heads = acts.attn.at(b);
        if (static_cast<int>(heads.size()) != H) {
            throw RuntimeError("lookback: inconsistent head count at block " + std::to_string(b));
        }
        for (int h = 0; h < H; ++h) {
            const Mat& A = heads[static_cast<size_t>(h)];
            if (A.rows() < doc.sent_end) {
                throw RuntimeError("lookback: attention shorter than the document");
            }
            double total = 0.0;
            for (int t = doc.sent_begin; t < doc.sent_end; ++t) {
                double a_ctx = A.row(t).head(N).sum() / N;
                int first_new = N;
                int count = include_current ? t - N + 1 : t - N;
                if (count == 0) {  // t == N with the current token excluded
                    first_new = t;
                    count = 1;
                }
                double a_new = A.row(t).segment(first_new, count).sum() / count;
                double denom = a_ctx + a_new;
                total += denom > 0 ? a_ctx / denom : 0.5;
            }
            out.push_back(total / (doc.sent_end - doc.sent_begin));
        }
    }
    return out;
}

probe::EvalResult baseline_classify(const std::vector<BaselineFeatures>& features,
                                    const std::vector<int>& labels,
                                    const probe::EvalOptions& opts) {
    if (features.empty()) throw RuntimeError("baseline classify: no features");
    if (features.size() != labels.size()) {
        throw RuntimeError("baseline classify: feature/label count mismatch");
    }
    const Method m = features.front().method;
    const size_t arity = features.front().values.size();
    Mat X(static_cast<Eigen::Index>(features.size()), static_cast<Eigen::Index>(arity));
    for (size_t i = 0; i < features.size(); ++i) {
        features[i].validate();
        if (features[i].method != m) throw RuntimeError("baseline classify: mixed methods");
        if (features[i].values.size() != arity) {
            throw RuntimeError("baseline classify: inconsistent arity at row " + std::to_string(i));
        }
        for (size_t j = 0; j < arity; ++j) {
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = features[i].values[j];
        }
    }
    return probe::crossval_matrix(X, labels, /*layer_tag=*/-1, opts);
}

}  // namespace obsprobe::baselines
