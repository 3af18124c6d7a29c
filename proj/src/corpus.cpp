#include "obsprobe/corpus.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "obsprobe/text.hpp"

namespace obsprobe::corpus {

using nlohmann::json;

std::string to_string(Dataset d) {
    switch (d) {
        case Dataset::cnn_dm: return "cnn_dm";
        case Dataset::xsum: return "xsum";
        case Dataset::contratales: return "contratales";
        case Dataset::custom: return "custom";
    }
    return "custom";
}

std::string to_string(Label l) {
    return l == Label::faithful ? "faithful" : "hallucinated";
}

Dataset dataset_from_string(const std::string& s) {
    if (s == "cnn_dm") return Dataset::cnn_dm;
    if (s == "xsum") return Dataset::xsum;
    if (s == "contratales") return Dataset::contratales;
    if (s == "custom") return Dataset::custom;
    throw RuntimeError("unknown dataset: " + s);
}

Label label_from_string(const std::string& s) {
    if (s == "faithful") return Label::faithful;
    if (s == "hallucinated") return Label::hallucinated;
    throw RuntimeError("unknown label: " + s);
}

void Example::finalize() {
    std::string blob = to_string(dataset);
    blob += '\x1f';
    blob += context;
    blob += '\x1f';
    blob += continuation;
    blob += '\x1f';
    blob += to_string(label);
    blob += '\x1f';
    blob += replaced_sentence.value_or("");
    blob += '\x1f';
    blob += generator_model;
    id = hex64(fnv1a64(blob));
}

void Example::validate() const {
    if (context.empty()) throw RuntimeError("example " + id + ": empty context");
    if (continuation.empty()) throw RuntimeError("example " + id + ": empty continuation");
    if (dataset == Dataset::contratales) {
        if (text::count_sentence_terminators(continuation) != 1 ||
            text::split_sentences(continuation).size() != 1) {
            throw RuntimeError("contratales example " + id +
                               ": continuation must be exactly one sentence: " + continuation);
        }
    }
}

std::string Example::to_json_line() const {
    json j;
    j["id"] = id;
    j["dataset"] = to_string(dataset);
    j["context"] = context;
    j["continuation"] = continuation;
    j["label"] = to_string(label);
    if (replaced_sentence) j["replaced_sentence"] = *replaced_sentence;
    j["generator_model"] = generator_model;
    j["meta"] = meta;
    return j.dump();
}

Example Example::from_json_line(const std::string& line) {
    json j = json::parse(line);
    Example e;
    e.id = j.at("id").get<std::string>();
    e.dataset = dataset_from_string(j.at("dataset").get<std::string>());
    e.context = j.at("context").get<std::string>();
    e.continuation = j.at("continuation").get<std::string>();
    e.label = label_from_string(j.at("label").get<std::string>());
    if (j.contains("replaced_sentence") && !j["replaced_sentence"].is_null()) {
        e.replaced_sentence = j["replaced_sentence"].get<std::string>();
    }
    e.generator_model = j.at("generator_model").get<std::string>();
    if (j.contains("meta")) e.meta = j["meta"].get<std::map<std::string, std::string>>();
    e.validate();
    return e;
}

std::vector<Example> load_jsonl(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw RuntimeError("cannot open dataset: " + path.string());
    std::vector<Example> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            out.push_back(Example::from_json_line(line));
        } catch (const std::exception& e) {
            throw RuntimeError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void save_jsonl(const fs::path& path, const std::vector<Example>& examples) {
    std::string buf;
    for (const auto& e : examples) {
        buf += e.to_json_line();
        buf += '\n';
    }
    write_text_file(path, buf);
}

void ContraTale::validate() const {
    if (prefix.empty()) throw RuntimeError("contratale: empty prefix");
    if (correct == contradictory) {
        throw RuntimeError("contratale: correct and contradictory conclusions are identical");
    }
    for (const std::string* s : {&correct, &contradictory}) {
        if (text::count_sentence_terminators(*s) != 1) {
            throw RuntimeError("contratale: conclusion must be a single sentence: " + *s);
        }
    }
}

std::string ContraTale::to_json_line() const {
    json j;
    j["prefix"] = prefix;
    j["correct"] = correct;
    j["contradictory"] = contradictory;
    return j.dump();
}

ContraTale ContraTale::from_json_line(const std::string& line) {
    json j = json::parse(line);
    ContraTale t;
    t.prefix = j.at("prefix").get<std::string>();
    t.correct = j.at("correct").get<std::string>();
    t.contradictory = j.at("contradictory").get<std::string>();
    t.validate();
    return t;
}

std::vector<ContraTale> load_tales(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw RuntimeError("cannot open tales file: " + path.string());
    std::vector<ContraTale> out;
    std::string line;
    while (std::getline(f, line)) {
        if (trim(line).empty()) continue;
        out.push_back(ContraTale::from_json_line(line));
    }
    return out;
}

IngestResult ingest_news(const fs::path& path, Dataset dataset) {
    std::ifstream f(path);
    if (!f) throw RuntimeError("ingest_news: missing file: " + path.string());
    IngestResult res;
    std::string line;
    size_t lineno = 0, total = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        ++total;
        try {
            json j = json::parse(line);
            Example e;
            e.dataset = dataset;
            e.context = j.at("article").get<std::string>();
            e.continuation = j.at("continuation").get<std::string>();
            e.label = label_from_string(j.at("label").get<std::string>());
            if (j.contains("replaced_sentence") && !j["replaced_sentence"].is_null()) {
                e.replaced_sentence = j["replaced_sentence"].get<std::string>();
            }
            e.generator_model = j.value("generator_model", std::string("unknown"));
            if (j.contains("original_summary")) {
                e.meta["original_summary"] = j["original_summary"].get<std::string>();
            }
            if (j.contains("meta")) {
                for (auto& [k, v] : j["meta"].items()) e.meta[k] = v.get<std::string>();
            }
            e.finalize();
            e.validate();
            res.examples.push_back(std::move(e));
        } catch (const std::exception&) {
            res.skipped_lines.push_back(lineno);
        }
    }
    if (total > 0 && res.skipped_lines.size() * 10 > total) {
        std::string lines;
        for (size_t i = 0; i < res.skipped_lines.size(); ++i) {
            if (i) lines += ",";
            lines += std::to_string(res.skipped_lines[i]);
            if (i >= 19) {
                lines += ",...";
                break;
            }
        }
        throw RuntimeError("ingest_news: " + std::to_string(res.skipped_lines.size()) + "/" +
                           std::to_string(total) + " malformed lines (>10%) in " + path.string() +
                           " at lines " + lines);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Generation protocol
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kHallucinationSystem =
    "You are an expert summarization assistant helping to create a hallucination dataset. \n"
    "Your task is to produce exactly ONE sentence that *appears* relevant to the given article "
    "but introduces at least one factual detail that cannot be inferred from the article.\n"
    "The sentence must be grammatically correct, and <= 40 words.";

constexpr const char* kFactualSystem =
    "You are an expert summarization assistant helping to create a dataset.\n"
    "You will be given an existing summary and asked to replace a single sentence with one "
    "written by you.\n"
    "The sentence you write must be factually accurate, grammatically correct, and only contain "
    "information directly from the original article.\n"
    "Your sentence should be concise and <= 40 words.";

std::string continuation_user_prompt(const std::string& article, const std::string& summary,
                                     const std::string& replaced, ContinuationKind kind) {
    std::ostringstream os;
    os << "Original article:\n<article>\n" << article << "\n</article>\n\n";
    os << "Original correct summary:\n<summary>\n" << summary << "\n</summary>\n\n";
    os << "We are going to replace this sentence: <sentence_to_replace>" << replaced
       << "</sentence_to_replace> with a ";
    if (kind == ContinuationKind::hallucinated) {
        os << "hallucinated sentence that you generate.\n\n"
              "The new sentence must contain a made up factual detail that is not present in the "
              "original article.\n\n";
    } else {
        os << "new sentence that you generate.\n\n"
              "The new sentence must be completely factual, only containing information directly "
              "from the original article.\n\n";
    }
    os << "Return JUST the new sentence, without quotation marks, xml tags, or any additional "
          "commentary.";
    return os.str();
}

/// Strips one layer of surrounding quotes and any single wrapping <tag>...</tag>.
std::string strip_wrapping(std::string s) {
    s = trim(s);
    for (int pass = 0; pass < 3; ++pass) {
        if (s.size() >= 2 &&
            ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
            s = trim(s.substr(1, s.size() - 2));
            continue;
        }
        if (s.size() > 3 && s.front() == '<') {
            size_t close = s.find('>');
            if (close != std::string::npos && close + 1 < s.size()) {
                std::string tag = s.substr(1, close - 1);
                std::string closing = "</" + tag + ">";
                if (tag.find(' ') == std::string::npos && s.size() > closing.size() &&
                    s.compare(s.size() - closing.size(), closing.size(), closing) == 0) {
                    s = trim(s.substr(close + 1, s.size() - close - 1 - closing.size()));
                    continue;
                }
            }
        }
        break;
    }
    return s;
}

}  // namespace

llm::GenerationRequest continuation_request(const std::string& article,
                                            const std::string& original_summary,
                                            const std::string& replaced_sentence,
                                            ContinuationKind kind,
                                            const std::string& model_id) {
    llm::GenerationRequest req;
    req.system_prompt =
        kind == ContinuationKind::hallucinated ? kHallucinationSystem : kFactualSystem;
    req.user_prompt = continuation_user_prompt(article, original_summary, replaced_sentence, kind);
    req.model_id = model_id;
    return req;
}

std::string generate_continuation(const std::string& article, const std::string& original_summary,
                                  const std::string& replaced_sentence, ContinuationKind kind,
                                  llm::CachedClient& client) {
    if (article.empty() || original_summary.empty()) {
        throw RuntimeError("generate_continuation: article and summary must be non-empty");
    }
    auto req = continuation_request(article, original_summary, replaced_sentence, kind,
                                    client.default_model_id());
    std::string raw = client.complete(req);
    std::string s = strip_wrapping(raw);
    if (s.empty()) throw ValidationError("empty continuation response", raw);
    if (text::split_sentences(s).size() >= 2) {
        throw ValidationError("continuation has >= 2 sentences", raw);
    }
    if (text::word_tokens(s).size() > 40) {
        throw ValidationError("continuation exceeds 40 words", raw);
    }
    return s;
}

namespace {

constexpr const char* kContrataleInstruction =
    "Write one new story in exactly this format:\n"
    "Story Prefix: a short story of 7-10 sentences. The FIRST sentence must state one "
    "unambiguous constraint or fact about a character (an inability, an allergy, something "
    "they do not own, or a permanent condition). The remaining sentences develop a neutral, "
    "everyday scene and must not mention or negate the constraint.\n"
    "Correct Concluding Sentence: a single sentence that continues the story and respects the "
    "constraint.\n"
    "Contradictory Concluding Sentence: a single sentence, structurally and tonally similar to "
    "the correct one, that subtly but logically contradicts the first sentence's constraint.\n"
    "Return the three labeled parts and nothing else.";

}  // namespace

llm::GenerationRequest contratale_request(const std::vector<ContraTale>& seeds,
                                          const std::string& model_id, uint64_t rng_seed) {
    if (seeds.size() < 5) {
        throw RuntimeError("contratale_request: need at least 5 seed exemplars, got " +
                           std::to_string(seeds.size()));
    }
    Rng rng(rng_seed);
    auto idx = rng.sample_without_replacement(seeds.size(), 5);
    std::ostringstream os;
    os << "Here are example stories:\n\n";
    for (size_t i = 0; i < idx.size(); ++i) {
        const ContraTale& t = seeds[idx[i]];
        os << "Example " << (i + 1) << ":\n";
        os << "Story Prefix: " << t.prefix << "\n";
        os << "Correct Concluding Sentence: " << t.correct << "\n";
        os << "Contradictory Concluding Sentence: " << t.contradictory << "\n\n";
    }
    os << kContrataleInstruction;
    llm::GenerationRequest req;
    req.user_prompt = os.str();
    req.model_id = model_id;
    return req;
}

ContraTale parse_contratale_response(const std::string& raw) {
    auto find_part = [&raw](const std::string& tag) -> std::pair<size_t, size_t> {
        size_t p = raw.find(tag);
        if (p == std::string::npos) return {std::string::npos, 0};
        return {p, p + tag.size()};
    };
    auto [p0, b0] = find_part("Story Prefix:");
    auto [p1, b1] = find_part("Correct Concluding Sentence:");
    auto [p2, b2] = find_part("Contradictory Concluding Sentence:");
    if (p0 == std::string::npos || p1 == std::string::npos || p2 == std::string::npos ||
        !(p0 < p1 && p1 < p2)) {
        throw ValidationError("contratale response missing labeled parts", raw);
    }
    ContraTale t;
    t.prefix = trim(raw.substr(b0, p1 - b0));
    t.correct = trim(raw.substr(b1, p2 - b1));
    t.contradictory = trim(raw.substr(b2));
    try {
        t.validate();
    } catch (const std::exception& e) {
        throw ValidationError(std::string("contratale response invalid: ") + e.what(), raw);
    }
    return t;
}

ContraTale generate_contratale(const std::vector<ContraTale>& seeds, llm::CachedClient& client,
                               uint64_t rng_seed) {
    auto req = contratale_request(seeds, client.default_model_id(), rng_seed);
    std::string raw = client.complete(req);
    return parse_contratale_response(raw);
}

void quarantine(const fs::path& dir, const std::string& cache_key, const std::string& reason,
                const std::string& raw) {
    fs::create_directories(dir);
    json j;
    j["cache_key"] = cache_key;
    j["reason"] = reason;
    j["raw"] = raw;
    std::ofstream f(dir / "quarantine.jsonl", std::ios::app);
    f << j.dump() << "\n";
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

std::vector<int> split_folds_labels(const std::vector<int>& labels, int k, uint64_t seed) {
    if (k < 2) throw RuntimeError("split_folds: k must be >= 2");
    if (labels.size() < static_cast<size_t>(k)) {
        throw RuntimeError("split_folds: fewer examples than folds");
    }
    std::vector<int> fold(labels.size(), -1);
    Rng rng(seed);
    size_t pointer = 0;
    for (int cls : {0, 1}) {
        std::vector<size_t> idx;
        for (size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == cls) idx.push_back(i);
        }
        rng.shuffle(idx);
        for (size_t i : idx) {
            fold[i] = static_cast<int>(pointer % static_cast<size_t>(k));
            ++pointer;
        }
    }
    // every class present in every fold
    for (int cls : {0, 1}) {
        std::vector<int> count(static_cast<size_t>(k), 0);
        bool class_exists = false;
        for (size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == cls) {
                class_exists = true;
                ++count[static_cast<size_t>(fold[i])];
            }
        }
        if (!class_exists) continue;
        for (int f = 0; f < k; ++f) {
            if (count[static_cast<size_t>(f)] == 0) {
                throw RuntimeError("split_folds: class " + std::to_string(cls) +
                                   " absent from fold " + std::to_string(f));
            }
        }
    }
    return fold;
}

std::vector<int> split_folds(const std::vector<Example>& examples, int k, uint64_t seed) {
    std::vector<int> labels(examples.size());
    for (size_t i = 0; i < examples.size(); ++i) {
        labels[i] = examples[i].label == Label::hallucinated ? 1 : 0;
    }
    return split_folds_labels(labels, k, seed);
}

}  // namespace obsprobe::corpus
