#include "obsprobe/steering.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "obsprobe/text.hpp"

namespace obsprobe::steering {

using nlohmann::json;

void SteeringConfig::validate(const observer::ModelConfig& cfg) const {
    if (direction.size() != cfg.n_embd) {
        throw ConfigError("steering: direction has " + std::to_string(direction.size()) +
                          " dims, generator residual has " + std::to_string(cfg.n_embd));
    }
    if (std::abs(direction.norm() - 1.0) > 1e-6) {
        throw ConfigError("steering: direction must be a unit vector");
    }
    if (layer < 0 || layer > cfg.n_layer) {
        throw ConfigError("steering: stream key " + std::to_string(layer) +
                          " outside [0, " + std::to_string(cfg.n_layer) + "]");
    }
    if (max_new_tokens < 1) throw ConfigError("steering: max_new_tokens must be positive");
    if (decoding != "greedy") {
        throw ConfigError("steering: only greedy decoding is supported, got '" + decoding + "'");
    }
}

Vec normalized_direction(const Vec& w) {
    double n = w.norm();
    if (n == 0.0) throw ConfigError("steering: zero probe direction");
    return w / n;
}

std::string steer_generate(const observer::Model& generator, const tok::Tokenizer& tokenizer,
                           const std::string& prompt, const SteeringConfig& cfg) {
    cfg.validate(generator.config());
    auto toks = tokenizer.encode(prompt);
    if (toks.empty()) throw RuntimeError("steer_generate: empty prompt");
    if (static_cast<int>(toks.size()) >= generator.config().n_ctx) {
        throw RuntimeError("steer_generate: prompt fills the context window");
    }

    std::vector<observer::ResidHook> hooks;
    if (cfg.alpha != 0.0) {
        Vec delta = cfg.alpha * cfg.direction;
        int row = cfg.mode == InjectionMode::at_start ? static_cast<int>(toks.size()) - 1 : -1;
        hooks.push_back({cfg.layer, row, [delta](Eigen::Ref<Eigen::RowVectorXd> r) {
                             r += delta.transpose();
                         }});
    }
    auto out = generator.generate_greedy(toks, cfg.max_new_tokens, hooks);
    std::vector<int> cont(out.begin() + static_cast<long>(toks.size()), out.end());
    return tokenizer.decode(cont);
}

// ---------------------------------------------------------------------------
// Repetition metric
// ---------------------------------------------------------------------------

size_t levenshtein(std::string_view a, std::string_view b) {
    const size_t n = a.size(), m = b.size();
    if (n == 0) return m;
    if (m == 0) return n;
    std::vector<size_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = j;
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= m; ++j) {
            size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double similarity_ratio(std::string_view a, std::string_view b) {
    size_t mx = std::max(a.size(), b.size());
    if (mx == 0) return 1.0;
    return 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(mx);
}

bool is_repetitious(const std::string& text, int n, double threshold) {
    if (n < 1) throw ConfigError("repetition: n-gram order must be positive");
    if (threshold < 0.0 || threshold > 1.0) throw ConfigError("repetition: threshold outside [0, 1]");
    auto words = text::word_tokens(text);
    if (static_cast<int>(words.size()) < 2 * n) return false;

    const size_t m = words.size() - static_cast<size_t>(n) + 1;
    std::vector<std::string> grams;
    grams.reserve(m);
    for (size_t i = 0; i < m; ++i) {
        std::string g = words[i];
        for (size_t k = 1; k < static_cast<size_t>(n); ++k) g += " " + words[i + k];
        grams.push_back(std::move(g));
    }
    // an exact duplicate at two positions has ratio 1
    std::set<std::string> uniq(grams.begin(), grams.end());
    if (uniq.size() < grams.size()) return true;
    for (size_t i = 0; i < grams.size(); ++i) {
        for (size_t j = i + 1; j < grams.size(); ++j) {
            if (similarity_ratio(grams[i], grams[j]) > threshold) return true;
        }
    }
    return false;
}

double repetition_rate(const std::string& text, int n, double threshold) {
    return is_repetitious(text, n, threshold) ? 1.0 : 0.0;
}

double repetition_rate(const std::vector<std::string>& texts, int n, double threshold) {
    if (texts.empty()) throw RuntimeError("repetition_rate: no texts");
    double flagged = 0.0;
    for (const auto& t : texts) flagged += repetition_rate(t, n, threshold);
    return flagged / static_cast<double>(texts.size());
}

// ---------------------------------------------------------------------------
// Hallucination judge
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kJudgeTemplate =
    R"(You are an expert at detecting hallucinations in summaries.

I will provide you with an article and a summary. Your task is to determine if the summary contains any hallucinations - information that is not supported by or contradicts the article.

A hallucination in a summary is when:
1. It contains information NOT present in the article
2. It contradicts information in the article
3. It makes claims that require outside knowledge not in the article

Answer with ONLY "hallucination" or "no hallucination".

Article:
{article}

Summary:
{summary})";

std::string replace_once(std::string s, const std::string& slot, const std::string& value) {
    auto pos = s.find(slot);
    if (pos == std::string::npos) throw RuntimeError("judge template missing " + slot);
    return s.replace(pos, slot.size(), value);
}

}  // namespace

std::string build_judge_prompt(const std::string& article, const std::string& summary) {
    std::string p = kJudgeTemplate;
    p = replace_once(std::move(p), "{article}", article);
    p = replace_once(std::move(p), "{summary}", summary);
    return p;
}

Judgment parse_judgment(const std::string& response) {
    std::string s = lowercase(trim(response));
    while (!s.empty() && (s.front() == '"' || s.front() == '\'')) s.erase(s.begin());
    while (!s.empty() && (s.back() == '"' || s.back() == '\'' || s.back() == '.')) s.pop_back();
    s = trim(s);
    if (s == "hallucination") return Judgment::hallucination;
    if (s == "no hallucination") return Judgment::no_hallucination;
    return Judgment::invalid;
}

Judgment judge_hallucination(const std::string& article, const std::string& summary,
                             llm::Client& judge, const std::string& judge_model_id) {
    llm::GenerationRequest req;
    req.user_prompt = build_judge_prompt(article, summary);
    req.model_id = judge_model_id;
    Judgment j = parse_judgment(judge.complete(req));
    if (j != Judgment::invalid) return j;
    return parse_judgment(judge.complete(req));
}

// ---------------------------------------------------------------------------
// Alpha sweep
// ---------------------------------------------------------------------------

void SteeringOutcome::validate() const {
    if (n_samples <= 0) throw RuntimeError("steering outcome: no samples");
    if (hallucination_rate < 0.0 || hallucination_rate > 1.0 || repetition_rate < 0.0 ||
        repetition_rate > 1.0) {
        throw RuntimeError("steering outcome: rate outside [0, 1]");
    }
    if (invalid_judgments < 0 || invalid_judgments > n_samples) {
        throw RuntimeError("steering outcome: invalid judgment count out of range");
    }
    if (!generations.empty() && static_cast<int>(generations.size()) != n_samples) {
        throw RuntimeError("steering outcome: generation count != n_samples");
    }
}

std::string SteeringOutcome::to_json(bool include_generations) const {
    json j;
    j["alpha"] = alpha;
    j["n"] = n_samples;
    j["hallucination_rate"] = hallucination_rate;
    j["repetition_rate"] = repetition_rate;
    j["invalid_judgments"] = invalid_judgments;
    if (include_generations) j["generations"] = generations;
    return j.dump(2);
}

SteeringOutcome SteeringOutcome::from_json(const std::string& text) {
    json j = json::parse(text);
    SteeringOutcome o;
    o.alpha = j.at("alpha").get<double>();
    o.n_samples = j.at("n").get<int>();
    o.hallucination_rate = j.at("hallucination_rate").get<double>();
    o.repetition_rate = j.at("repetition_rate").get<double>();
    o.invalid_judgments = j.at("invalid_judgments").get<int>();
    if (j.contains("generations")) o.generations = j.at("generations").get<std::vector<std::string>>();
    o.validate();
    return o;
}

namespace {

std::string sweep_signature(const observer::Model& generator,
                            const std::vector<std::string>& articles, llm::Client& judge,
                            const SweepConfig& cfg) {
    uint64_t h = fnv1a64(generator.config().model_id);
    const auto& d = cfg.base.direction;
    h = fnv1a64(d.data(), static_cast<size_t>(d.size()) * sizeof(double), h);
    int64_t ints[] = {cfg.base.layer, static_cast<int64_t>(cfg.base.mode),
                      cfg.base.max_new_tokens, cfg.n_per_alpha, cfg.rep_n};
    h = fnv1a64(ints, sizeof(ints), h);
    h = fnv1a64(&cfg.rep_threshold, sizeof(double), h);
    h = fnv1a64(cfg.judge_model_id.data(), cfg.judge_model_id.size(), h);
    h = fnv1a64(judge.name().data(), judge.name().size(), h);
    h = fnv1a64(cfg.alphas.data(), cfg.alphas.size() * sizeof(double), h);
    for (int i = 0; i < cfg.n_per_alpha; ++i) {
        h = fnv1a64(articles[static_cast<size_t>(i)].data(),
                    articles[static_cast<size_t>(i)].size(), h);
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_state(const fs::path& path, const std::string& signature,
                const std::vector<SteeringOutcome>& done) {
    json j;
    j["signature"] = signature;
    json arr = json::array();
    for (const auto& o : done) arr.push_back(json::parse(o.to_json(true)));
    j["outcomes"] = std::move(arr);
    write_text_file_atomic(path, j.dump(2));
}

SteeringOutcome run_point(const observer::Model& generator, const tok::Tokenizer& tokenizer,
                          const std::vector<std::string>& articles, llm::Client& judge,
                          const SweepConfig& cfg, double alpha) {
    SteeringConfig point = cfg.base;
    point.alpha = alpha;
    const int n = cfg.n_per_alpha;

    SteeringOutcome out;
    out.alpha = alpha;
    out.n_samples = n;
    out.generations.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.generations.push_back(
            steer_generate(generator, tokenizer, articles[static_cast<size_t>(i)] + "\n", point));
    }

    std::vector<Judgment> verdicts(static_cast<size_t>(n), Judgment::invalid);
    auto judge_one = [&](size_t i) {
        verdicts[i] = judge_hallucination(articles[i], out.generations[i], judge,
                                          cfg.judge_model_id);
    };
    if (cfg.judge_parallelism > 1) {
        llm::parallel_for(static_cast<size_t>(n), cfg.judge_parallelism, judge_one);
    } else {
        for (size_t i = 0; i < static_cast<size_t>(n); ++i) judge_one(i);
    }

    int halluc = 0, invalid = 0;
    for (auto v : verdicts) {
        if (v == Judgment::invalid) ++invalid;
        if (v == Judgment::hallucination) ++halluc;
    }
    out.invalid_judgments = invalid;
    int judged = n - invalid;
    out.hallucination_rate = judged > 0 ? static_cast<double>(halluc) / judged : 0.0;
    out.repetition_rate = repetition_rate(out.generations, cfg.rep_n, cfg.rep_threshold);
    out.validate();
    return out;
}

}  // namespace

std::vector<SteeringOutcome> alpha_sweep(const observer::Model& generator,
                                         const tok::Tokenizer& tokenizer,
                                         const std::vector<std::string>& articles,
                                         llm::Client& judge, const SweepConfig& cfg) {
    if (cfg.alphas.empty()) throw ConfigError("alpha_sweep: no alphas");
    if (cfg.n_per_alpha < 1) throw ConfigError("alpha_sweep: n_per_alpha must be positive");
    if (static_cast<int>(articles.size()) < cfg.n_per_alpha) {
        throw RuntimeError("alpha_sweep: " + std::to_string(articles.size()) +
                           " articles for n_per_alpha = " + std::to_string(cfg.n_per_alpha) +
                           "; sampling with replacement is not supported");
    }
    cfg.base.validate(generator.config());

    const std::string signature = sweep_signature(generator, articles, judge, cfg);
    std::vector<SteeringOutcome> done;
    if (!cfg.state_path.empty() && fs::exists(cfg.state_path)) {
        json j = json::parse(read_text_file(cfg.state_path));
        if (j.at("signature").get<std::string>() != signature) {
            throw RuntimeError("alpha_sweep: state was written by a different sweep");
        }
        for (const auto& oj : j.at("outcomes")) {
            done.push_back(SteeringOutcome::from_json(oj.dump()));
        }
        if (done.size() > cfg.alphas.size()) {
            throw RuntimeError("alpha_sweep: state has more points than the alpha grid");
        }
    }

    for (size_t i = done.size(); i < cfg.alphas.size(); ++i) {
        SteeringOutcome out;
        try {
            out = run_point(generator, tokenizer, articles, judge, cfg, cfg.alphas[i]);
        } catch (...) {
            if (!cfg.state_path.empty()) save_state(cfg.state_path, signature, done);
            throw;
        }
        done.push_back(std::move(out));
        if (!cfg.state_path.empty()) save_state(cfg.state_path, signature, done);
    }
    return done;
}

std::vector<std::string> monotonicity_violations(const std::vector<SteeringOutcome>& outcomes) {
    auto sorted = outcomes;
    std::sort(sorted.begin(), sorted.end(),
              [](const SteeringOutcome& a, const SteeringOutcome& b) { return a.alpha < b.alpha; });
    std::vector<std::string> out;
    for (size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i].hallucination_rate < sorted[i - 1].hallucination_rate - 1e-12) {
            out.push_back("hallucination rate fell from " +
                          std::to_string(sorted[i - 1].hallucination_rate) + " at alpha=" +
                          std::to_string(sorted[i - 1].alpha) + " to " +
                          std::to_string(sorted[i].hallucination_rate) + " at alpha=" +
                          std::to_string(sorted[i].alpha));
        }
    }
    return out;
}

void save_sweep_svg(const std::vector<SteeringOutcome>& outcomes, const fs::path& path) {
    if (outcomes.empty()) throw RuntimeError("sweep svg: no outcomes");
    auto sorted = outcomes;
    std::sort(sorted.begin(), sorted.end(),
              [](const SteeringOutcome& a, const SteeringOutcome& b) { return a.alpha < b.alpha; });
    const int W = 520, Hpx = 320, left = 60, top = 20, pw = 420, ph = 240;
    double a_min = sorted.front().alpha, a_max = sorted.back().alpha;
    double span = a_max > a_min ? a_max - a_min : 1.0;
    auto px = [&](double a) { return left + (a - a_min) / span * pw; };
    auto py = [&](double rate) { return top + (1.0 - rate) * ph; };

    std::string svg = "<svg xmlns='http://www.w3.org/2000/svg' width='" + std::to_string(W) +
                      "' height='" + std::to_string(Hpx) +
                      "' font-family='monospace' font-size='11'>\n";
    svg += "<rect x='" + std::to_string(left) + "' y='" + std::to_string(top) + "' width='" +
           std::to_string(pw) + "' height='" + std::to_string(ph) +
           "' fill='none' stroke='#999'/>\n";
    for (double r : {0.0, 0.5, 1.0}) {
        svg += "<text x='8' y='" + std::to_string(static_cast<int>(py(r)) + 4) + "'>" +
               std::to_string(r).substr(0, 3) + "</text>\n";
    }
    auto curve = [&](auto get, const char* color, const char* label, int ly) {
        std::string pts;
        for (const auto& o : sorted) {
            pts += std::to_string(px(o.alpha)) + "," + std::to_string(py(get(o))) + " ";
        }
        svg += "<polyline points='" + pts + "' fill='none' stroke='" + color +
               "' stroke-width='2'/>\n";
        for (const auto& o : sorted) {
            svg += "<circle cx='" + std::to_string(px(o.alpha)) + "' cy='" +
                   std::to_string(py(get(o))) + "' r='3' fill='" + color + "'><title>alpha " +
                   std::to_string(o.alpha) + ": " + std::to_string(get(o)) +
                   "</title></circle>\n";
        }
        svg += "<text x='" + std::to_string(left + 8) + "' y='" + std::to_string(ly) +
               "' fill='" + color + "'>" + label + "</text>\n";
    };
    curve([](const SteeringOutcome& o) { return o.hallucination_rate; }, "#c0392b",
          "hallucination rate", top + 16);
    curve([](const SteeringOutcome& o) { return o.repetition_rate; }, "#2471a3",
          "repetition rate", top + 32);
    for (const auto& o : sorted) {
        svg += "<text x='" + std::to_string(px(o.alpha) - 10) + "' y='" +
               std::to_string(top + ph + 16) + "'>" + std::to_string(o.alpha).substr(0, 6) +
               "</text>\n";
    }
    svg += "<text x='" + std::to_string(left + pw / 2 - 20) + "' y='" +
           std::to_string(Hpx - 4) + "'>alpha</text>\n</svg>\n";
    write_text_file(path, svg);
}

}  // namespace obsprobe::steering
