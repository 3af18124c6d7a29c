#include "obsprobe/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "helpers.hpp"
#include "obsprobe/corpus.hpp"
#include "obsprobe/observer.hpp"
#include "obsprobe/tokenizer.hpp"

using namespace obsprobe;
using namespace obsprobe::attribution;
using obsprobe::testing::TempDir;

namespace {

const tok::Tokenizer& test_tokenizer() {
    static tok::Tokenizer tk = tok::Tokenizer::train(
        {"alpha beta gamma delta epsilon eta theta iota kappa lambda mu nu.\n",
         "the dam was finished early. water levels rose fast. crews kept working.\n"},
        320);
    return tk;
}

/// Small random observer with well-behaved layer norms.
observer::Model random_model(int L, int H, int d, int V, int ctx, uint64_t seed) {
    observer::ModelConfig cfg;
    cfg.model_id = "rand" + std::to_string(seed);
    cfg.n_layer = L;
    cfg.n_head = H;
    cfg.n_embd = d;
    cfg.n_ctx = ctx;
    cfg.vocab_size = V;
    auto w = observer::Weights::zeros_like(cfg);
    Rng rng(seed);
    for (auto& tv : observer::tensor_views(w)) {
        const bool ln = tv.name.find("ln_") != std::string::npos;
        const bool gain = ln && tv.name.size() > 7 &&
                          tv.name.compare(tv.name.size() - 7, 7, ".weight") == 0;
        for (size_t i = 0; i < tv.size(); ++i) {
            if (gain) {
                tv.data[i] = 1.0 + 0.05 * rng.normal();
            } else if (ln) {
                tv.data[i] = 0.02 * rng.normal();
            } else {
                tv.data[i] = 0.4 / std::sqrt(static_cast<double>(d)) * rng.normal();
            }
        }
    }
    return observer::Model(cfg, std::move(w));
}

const observer::Model& attr_model() {
    static observer::Model m = random_model(4, 2, 16, 340, 96, 2024);
    return m;
}

corpus::Example make_ex(const std::string& ctx, const std::string& cont) {
    corpus::Example ex;
    ex.dataset = corpus::Dataset::custom;
    ex.context = ctx;
    ex.continuation = cont;
    ex.label = corpus::Label::hallucinated;
    ex.finalize();
    return ex;
}

observer::TokenizedDoc make_doc(const std::string& ctx, const std::string& cont) {
    auto doc = observer::prepare_doc(make_ex(ctx, cont), test_tokenizer());
    REQUIRE(static_cast<int>(doc.tokens.size()) <= attr_model().config().n_ctx);
    return doc;
}

probe::ProbeModel make_probe(int layer, int d, uint64_t seed, bool standardize) {
    probe::ProbeModel p;
    Rng rng(seed);
    p.w = observer::Vec(d);
    for (Eigen::Index i = 0; i < d; ++i) p.w(i) = 0.3 * rng.normal();
    p.b = 0.1;
    p.layer = layer;
    p.l2_strength = 1e-2;
    p.observer_model_id = attr_model().config().model_id;
    if (standardize) {
        p.standardizer.enabled = true;
        p.standardizer.mean = observer::Vec(d);
        p.standardizer.scale = observer::Vec(d);
        for (Eigen::Index i = 0; i < d; ++i) {
            p.standardizer.mean(i) = 0.2 * rng.normal();
            p.standardizer.scale(i) = 0.5 + rng.uniform();
        }
    }
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Effective readout and gradients
// ---------------------------------------------------------------------------

TEST_CASE("effective readout reproduces the probe score") {
    const int d = 16;
    auto raw = make_probe(3, d, 5, false);
    CHECK(effective_direction(raw) == raw.w);
    CHECK(effective_bias(raw) == raw.b);

    auto std_probe = make_probe(3, d, 6, true);
    Vec w_eff = effective_direction(std_probe);
    double b_eff = effective_bias(std_probe);
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        Vec h(d);
        for (Eigen::Index i = 0; i < d; ++i) h(i) = rng.normal();
        CHECK(w_eff.dot(h) + b_eff ==
              doctest::Approx(probe::score(std_probe, h)).epsilon(1e-12));
    }
}

TEST_CASE("gradient at the probed stream is the effective direction") {
    auto doc = make_doc("the dam was finished early. water levels rose fast.",
                        "crews kept working. alpha beta gamma.");
    auto raw = make_probe(3, 16, 5, false);
    auto g = residual_gradients(attr_model(), doc, raw);
    CHECK(g.resid.at(3).row(doc.t_star).transpose() == raw.w);
    // rows off t_star carry no direct readout
    for (int t = 0; t < static_cast<int>(doc.tokens.size()); ++t) {
        if (t != doc.t_star) CHECK(g.resid.at(3).row(t).norm() == 0.0);
    }

    auto std_probe = make_probe(3, 16, 6, true);
    auto gs = residual_gradients(attr_model(), doc, std_probe);
    CHECK(gs.resid.at(3).row(doc.t_star).transpose() == effective_direction(std_probe));
}

TEST_CASE("streams above the probe are refused") {
    auto doc = make_doc("the dam was finished early.", "crews kept working.");
    auto p = make_probe(2, 16, 5, false);
    CHECK_THROWS_WITH_AS(residual_gradients(attr_model(), doc, p, {3}),
                         doctest::Contains("does not depend"), RuntimeError);
    CHECK_THROWS_AS(residual_gradients(attr_model(), doc, p, {-1}), RuntimeError);

    auto g = residual_gradients(attr_model(), doc, p, {0, 2});
    CHECK(g.resid.size() == 2);
    CHECK(g.resid.count(0) == 1);
    CHECK(g.resid.count(2) == 1);
    auto all = residual_gradients(attr_model(), doc, p);
    CHECK(all.resid.size() == 3);  // streams 0, 1, 2
}

TEST_CASE("probe gradients agree with finite differences") {
    auto doc = make_doc("the dam was finished early. water levels rose fast.",
                        "crews kept working. alpha beta gamma delta.");
    auto p = make_probe(3, 16, 8, true);  // standardizer on: hardest path
    auto g = residual_gradients(attr_model(), doc, p);

    observer::CaptureSpec spec;
    spec.layers = {p.layer};
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        int k = static_cast<int>(rng.below(static_cast<uint64_t>(p.layer)));
        int t = static_cast<int>(rng.below(doc.tokens.size()));
        Vec v(16);
        for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
        v.normalize();
        auto score_at = [&](double eps) {
            std::vector<observer::ResidHook> hooks;
            hooks.push_back({k, t, [&](Eigen::Ref<Eigen::RowVectorXd> row) {
                                 row += eps * v.transpose();
                             }});
            auto acts = attr_model().forward(doc.tokens, spec, hooks);
            return probe::score(p, acts.resid.at(p.layer).row(doc.t_star).transpose());
        };
        const double eps = 1e-6;
        double fd = (score_at(eps) - score_at(-eps)) / (2 * eps);
        double analytic = g.resid.at(k).row(t).dot(v.transpose());
        CHECK(std::abs(fd - analytic) <= 1e-3 * std::max(1.0, std::abs(analytic)));
    }
}

// ---------------------------------------------------------------------------
// Unit attribution
// ---------------------------------------------------------------------------

TEST_CASE("zeroed unit outputs attribute exactly zero") {
    auto doc = make_doc("the dam was finished early.", "crews kept working. water rose.");
    auto p = make_probe(3, 16, 5, false);
    auto g = residual_gradients(attr_model(), doc, p, {}, true);

    auto acts = g.acts;
    acts.mlp_out.at(1).setZero();
    acts.head_out.at({0, 1}).setZero();
    auto unit = unit_attribution(doc, acts, g.resid, p);
    CHECK(unit.mlp_attr(1) == 0.0);
    CHECK(unit.head_attr(0, 1) == 0.0);
    CHECK(unit.mlp_attr(0) != 0.0);
}

TEST_CASE("self-projection attributes the squared gradient norm") {
    auto doc = make_doc("the dam was finished early.", "crews kept working. water rose.");
    auto p = make_probe(3, 16, 5, false);
    auto g = residual_gradients(attr_model(), doc, p, {}, true);

    const int block = 1;  // writes into stream 2
    auto acts = g.acts;
    acts.mlp_out.at(block) = g.resid.at(block + 1);
    auto unit = unit_attribution(doc, acts, g.resid, p);

    double want = 0.0;
    for (int t = doc.sent_begin; t < doc.sent_end; ++t) {
        want += g.resid.at(block + 1).row(t).squaredNorm();
    }
    want /= doc.sent_end - doc.sent_begin;
    CHECK(unit.mlp_attr(block) == doctest::Approx(want).epsilon(1e-12));
    CHECK(unit.mlp_attr(block) >= 0.0);
}

TEST_CASE("attribution is linear in the unit output") {
    auto doc = make_doc("the dam was finished early.", "crews kept working. water rose.");
    auto p = make_probe(3, 16, 5, false);
    auto g = residual_gradients(attr_model(), doc, p, {}, true);

    const int block = 0;
    Mat U = g.acts.mlp_out.at(block);
    Mat V = U;
    Rng rng(3);
    for (Eigen::Index r = 0; r < V.rows(); ++r) {
        for (Eigen::Index c = 0; c < V.cols(); ++c) V(r, c) = rng.normal();
    }

    auto attr_with = [&](const Mat& m) {
        auto acts = g.acts;
        acts.mlp_out.at(block) = m;
        return unit_attribution(doc, acts, g.resid, p).mlp_attr(block);
    };
    double au = attr_with(U), av = attr_with(V);
    CHECK(attr_with(U + V) == doctest::Approx(au + av).epsilon(1e-9));
    CHECK(attr_with(-2.5 * U) == doctest::Approx(-2.5 * au).epsilon(1e-9));
}

TEST_CASE("blocks writing above the probed stream contribute zero") {
    auto doc = make_doc("the dam was finished early.", "crews kept working. water rose.");
    auto p = make_probe(3, 16, 5, false);  // 4-block model, probe at stream 3
    auto unit = attribute_doc(attr_model(), doc, p);
    REQUIRE(unit.mlp_attr.size() == 4);
    CHECK(unit.mlp_attr(3) == 0.0);
    CHECK(unit.head_attr.row(3).cwiseAbs().maxCoeff() == 0.0);
    // blocks below the probe generically do contribute
    CHECK(unit.mlp_attr.head(3).cwiseAbs().minCoeff() > 0.0);
}

TEST_CASE("unit attribution validates its inputs") {
    auto doc = make_doc("the dam was finished early.", "crews kept working. water rose.");
    auto p = make_probe(3, 16, 5, false);
    auto g = residual_gradients(attr_model(), doc, p, {}, true);

    auto empty_span = doc;
    empty_span.sent_begin = empty_span.sent_end;
    CHECK_THROWS_WITH_AS(unit_attribution(empty_span, g.acts, g.resid, p),
                         doctest::Contains("sentence span"), RuntimeError);

    auto no_units = g.acts;
    no_units.mlp_out.clear();
    CHECK_THROWS_WITH_AS(unit_attribution(doc, no_units, g.resid, p),
                         doctest::Contains("not captured"), RuntimeError);

    auto filtered = residual_gradients(attr_model(), doc, p, {3});
    CHECK_THROWS_WITH_AS(unit_attribution(doc, g.acts, filtered.resid, p),
                         doctest::Contains("without a layer filter"), RuntimeError);
}

TEST_CASE("mlp rescaling shifts the score by delta times the attribution") {
    auto p = make_probe(3, 16, 5, true);
    const std::vector<std::pair<std::string, std::string>> docs = {
        {"the dam was finished early.", "crews kept working. water rose."},
        {"water levels rose fast. crews kept working.", "alpha beta gamma delta epsilon."},
        {"alpha beta gamma. delta epsilon eta.", "the dam was finished early. water rose."},
    };
    for (const auto& [ctx, cont] : docs) {
        auto doc = make_doc(ctx, cont);
        auto entries = first_order_mlp_check(attr_model(), doc, p, 0.01);
        REQUIRE(entries.size() == 4);
        double max_a = 0.0;
        for (const auto& e : entries) max_a = std::max(max_a, std::abs(e.attribution));
        REQUIRE(max_a > 0.0);
        for (const auto& e : entries) {
            if (std::abs(e.attribution) <= 0.1 * max_a) continue;
            CHECK(std::abs(e.observed - e.predicted) <= 0.1 * std::abs(e.predicted));
        }
        // the block above the probe cannot move the score at all
        CHECK(entries[3].attribution == 0.0);
        CHECK(entries[3].observed == 0.0);
    }
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

namespace {

std::vector<corpus::Example> small_dataset() {
    return {
        make_ex("the dam was finished early.", "crews kept working. water rose."),
        make_ex("water levels rose fast.", "alpha beta gamma delta."),
        make_ex("alpha beta gamma.", "the dam was finished early."),
        make_ex("crews kept working. water rose.", "delta epsilon eta theta."),
        make_ex("delta epsilon eta.", "water levels rose fast. crews kept working."),
    };
}

}  // namespace

TEST_CASE("aggregating the whole dataset is the plain mean") {
    auto data = small_dataset();
    auto p = make_probe(3, 16, 9, false);
    auto report = aggregate_top(data, attr_model(), test_tokenizer(), p,
                                static_cast<int>(data.size()));
    CHECK(report.selection == "all");
    CHECK(report.n_examples == 5);

    Mat head = Mat::Zero(4, 2);
    Vec mlp = Vec::Zero(4);
    for (const auto& ex : data) {
        auto unit = attribute_doc(attr_model(), observer::prepare_doc(ex, test_tokenizer()), p);
        head += unit.head_attr;
        mlp += unit.mlp_attr;
    }
    head /= 5.0;
    mlp /= 5.0;
    CHECK((report.head_attr - head).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((report.mlp_attr - mlp).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("identical documents aggregate to the single-document attribution") {
    auto ex = make_ex("the dam was finished early.", "crews kept working. water rose.");
    std::vector<corpus::Example> data(4, ex);
    auto p = make_probe(3, 16, 9, false);
    auto report = aggregate_top(data, attr_model(), test_tokenizer(), p, 4);
    auto unit = attribute_doc(attr_model(), observer::prepare_doc(ex, test_tokenizer()), p);
    CHECK((report.head_attr - unit.head_attr).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((report.mlp_attr - unit.mlp_attr).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("top-N selection keeps the highest-scoring examples") {
    auto data = small_dataset();
    auto p = make_probe(3, 16, 9, false);

    // independent scoring pass to find the top two
    observer::CaptureSpec spec;
    spec.layers = {p.layer};
    std::vector<std::pair<double, int>> scored;
    for (int i = 0; i < 5; ++i) {
        auto doc = observer::prepare_doc(data[static_cast<size_t>(i)], test_tokenizer());
        auto acts = attr_model().forward(doc.tokens, spec);
        scored.emplace_back(
            probe::score(p, acts.resid.at(p.layer).row(doc.t_star).transpose()), i);
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    Mat head = Mat::Zero(4, 2);
    Vec mlp = Vec::Zero(4);
    for (int k = 0; k < 2; ++k) {
        auto doc = observer::prepare_doc(data[static_cast<size_t>(scored[k].second)],
                                         test_tokenizer());
        auto unit = attribute_doc(attr_model(), doc, p);
        head += unit.head_attr;
        mlp += unit.mlp_attr;
    }
    auto report = aggregate_top(data, attr_model(), test_tokenizer(), p, 2);
    CHECK(report.selection == "top_scores");
    CHECK(report.n_examples == 2);
    CHECK((report.head_attr - head / 2.0).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((report.mlp_attr - mlp / 2.0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("oversized top-N clamps to the dataset") {
    auto data = small_dataset();
    auto p = make_probe(3, 16, 9, false);
    auto report = aggregate_top(data, attr_model(), test_tokenizer(), p, 99);
    CHECK(report.n_examples == 5);
    CHECK(report.selection == "all");

    CHECK_THROWS_AS(aggregate_top({}, attr_model(), test_tokenizer(), p, 1), RuntimeError);
    CHECK_THROWS_AS(aggregate_top(data, attr_model(), test_tokenizer(), p, 0), RuntimeError);
}

TEST_CASE("attribution report json round trip") {
    auto data = small_dataset();
    auto p = make_probe(3, 16, 9, false);
    auto report = aggregate_top(data, attr_model(), test_tokenizer(), p, 3);

    auto back = AttributionReport::from_json(report.to_json());
    CHECK(back.n_examples == report.n_examples);
    CHECK(back.selection == report.selection);
    CHECK(back.probe_ref == report.probe_ref);
    CHECK((back.head_attr - report.head_attr).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.mlp_attr - report.mlp_attr).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attribution report validation") {
    AttributionReport r;
    r.head_attr = Mat::Zero(2, 2);
    r.mlp_attr = Vec::Zero(2);
    r.selection = "all";
    r.n_examples = 0;
    CHECK_THROWS_AS(r.validate(), RuntimeError);
    r.n_examples = 1;
    CHECK_NOTHROW(r.validate());
    r.selection = "weird";
    CHECK_THROWS_AS(r.validate(), RuntimeError);
    r.selection = "top_scores";
    r.mlp_attr(0) = std::nan("");
    CHECK_THROWS_AS(r.validate(), RuntimeError);
    r.mlp_attr(0) = 0.0;
    r.mlp_attr = Vec::Zero(3);
    CHECK_THROWS_AS(r.validate(), RuntimeError);
}

TEST_CASE("heatmap svg lists every unit") {
    auto data = small_dataset();
    auto p = make_probe(3, 16, 9, false);
    auto report = aggregate_top(data, attr_model(), test_tokenizer(), p, 2);

    TempDir tmp("attr_svg");
    auto path = tmp.path / "heatmap.svg";
    save_heatmap_svg(report, path);
    std::string svg = read_text_file(path);
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("mlp 0:") != std::string::npos);
    CHECK(svg.find("head 3.1:") != std::string::npos);
    size_t rects = 0, pos = 0;
    while ((pos = svg.find("<rect", pos)) != std::string::npos) {
        ++rects;
        pos += 5;
    }
    CHECK(rects == 4 * (2 + 1));  // heads grid plus one mlp column
}

// ---------------------------------------------------------------------------
// Corpus scan
// ---------------------------------------------------------------------------

namespace {

const observer::Model& scan_model() {
    static observer::Model m = random_model(2, 2, 12, 340, 64, 4242);
    return m;
}

probe::ProbeModel scan_probe(uint64_t seed) {
    probe::ProbeModel p;
    Rng rng(seed);
    p.w = observer::Vec(12);
    for (Eigen::Index i = 0; i < 12; ++i) p.w(i) = 0.3 * rng.normal();
    p.b = 0.05;
    p.layer = 2;
    p.observer_model_id = scan_model().config().model_id;
    return p;
}

const std::vector<std::string>& corpus_lines() {
    static std::vector<std::string> lines = {
        "the dam was finished early. water levels rose fast.",
        "crews kept working. alpha beta gamma delta epsilon.",
        "eta theta iota kappa lambda mu nu. the dam was finished.",
        "water levels rose fast. crews kept working. alpha beta.",
        "gamma delta epsilon eta theta. iota kappa lambda mu nu.",
        "the dam was finished early. crews kept working today.",
    };
    return lines;
}

std::string join_lines(size_t n) {
    std::string out;
    for (size_t i = 0; i < n; ++i) out += corpus_lines()[i] + "\n";
    return out;
}

// token count the scan will see: each line tokenized with its newline
long oracle_token_count(const std::string& corpus) {
    long total = 0;
    size_t pos = 0;
    while (pos < corpus.size()) {
        size_t nl = corpus.find('\n', pos);
        std::string line = nl == std::string::npos ? corpus.substr(pos)
                                                   : corpus.substr(pos, nl - pos + 1);
        total += static_cast<long>(test_tokenizer().encode(line).size());
        pos = nl == std::string::npos ? corpus.size() : nl + 1;
    }
    return total;
}

}  // namespace

TEST_CASE("scan returns every window sorted when k covers the corpus") {
    TempDir tmp("scan_all");
    auto path = tmp.path / "corpus.txt";
    write_text_file(path, join_lines(6));

    ScanConfig cfg;
    cfg.seq_len = 12;
    cfg.top_k = 1000;
    cfg.bottom_k = 1000;
    auto p = scan_probe(31);
    auto res = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);

    long total = oracle_token_count(join_lines(6));
    long full = total / cfg.seq_len;
    long tail = total % cfg.seq_len;
    CHECK(res.windows_scored == full + (tail >= 2 ? 1 : 0));
    CHECK(res.skipped_short == (tail == 1 ? 1 : 0));
    CHECK(res.top.size() == static_cast<size_t>(res.windows_scored));
    CHECK(res.bottom.size() == res.top.size());

    for (size_t i = 1; i < res.top.size(); ++i) {
        CHECK(res.top[i - 1].probe_activation >= res.top[i].probe_activation);
    }
    for (size_t i = 1; i < res.bottom.size(); ++i) {
        CHECK(res.bottom[i - 1].probe_activation <= res.bottom[i].probe_activation);
    }
    // same multiset of hits, opposite order
    auto rev = res.bottom;
    std::reverse(rev.begin(), rev.end());
    for (size_t i = 0; i < rev.size(); ++i) {
        CHECK(rev[i].corpus_offset == res.top[i].corpus_offset);
        CHECK(rev[i].probe_activation == res.top[i].probe_activation);
    }
    // offsets tile the token stream
    std::vector<long> offs;
    for (const auto& h : res.top) offs.push_back(h.corpus_offset);
    std::sort(offs.begin(), offs.end());
    for (size_t i = 0; i < offs.size(); ++i) {
        CHECK(offs[i] == static_cast<long>(i) * cfg.seq_len);
    }
}

TEST_CASE("scan is deterministic") {
    TempDir tmp("scan_det");
    auto path = tmp.path / "corpus.txt";
    write_text_file(path, join_lines(5));

    ScanConfig cfg;
    cfg.seq_len = 10;
    cfg.top_k = 3;
    cfg.bottom_k = 3;
    auto p = scan_probe(31);
    auto a = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);
    auto b = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);
    REQUIRE(a.top.size() == b.top.size());
    for (size_t i = 0; i < a.top.size(); ++i) {
        CHECK(a.top[i].probe_activation == b.top[i].probe_activation);
        CHECK(a.top[i].corpus_offset == b.top[i].corpus_offset);
        CHECK(a.top[i].sequence_text == b.top[i].sequence_text);
    }
}

TEST_CASE("bottom hits equal top hits of the negated probe") {
    TempDir tmp("scan_neg");
    auto path = tmp.path / "corpus.txt";
    write_text_file(path, join_lines(6));

    ScanConfig cfg;
    cfg.seq_len = 10;
    cfg.top_k = 4;
    cfg.bottom_k = 4;
    auto p = scan_probe(31);
    auto neg = p;
    neg.w = -neg.w;
    neg.b = -neg.b;

    auto res = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);
    auto flipped = corpus_scan(path, scan_model(), test_tokenizer(), neg, cfg);
    REQUIRE(res.bottom.size() == flipped.top.size());
    for (size_t i = 0; i < res.bottom.size(); ++i) {
        CHECK(res.bottom[i].corpus_offset == flipped.top[i].corpus_offset);
        CHECK(res.bottom[i].probe_activation ==
              doctest::Approx(-flipped.top[i].probe_activation).epsilon(1e-12));
        CHECK(res.bottom[i].sequence_text == flipped.top[i].sequence_text);
    }
}

TEST_CASE("scan resumes from its checkpoint when the corpus grows") {
    TempDir tmp("scan_resume");
    auto path = tmp.path / "corpus.txt";
    auto ckpt = tmp.path / "scan.ckpt";

    ScanConfig cfg;
    cfg.seq_len = 10;
    cfg.top_k = 3;
    cfg.bottom_k = 3;
    cfg.checkpoint_path = ckpt;
    cfg.checkpoint_every = 1;
    auto p = scan_probe(31);

    write_text_file(path, join_lines(3));
    auto half = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);
    CHECK(fs::exists(ckpt));

    write_text_file(path, join_lines(6));
    auto resumed = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);

    ScanConfig fresh_cfg = cfg;
    fresh_cfg.checkpoint_path.clear();
    auto fresh = corpus_scan(path, scan_model(), test_tokenizer(), p, fresh_cfg);

    CHECK(resumed.windows_scored == fresh.windows_scored);
    REQUIRE(resumed.top.size() == fresh.top.size());
    REQUIRE(resumed.bottom.size() == fresh.bottom.size());
    for (size_t i = 0; i < fresh.top.size(); ++i) {
        CHECK(resumed.top[i].corpus_offset == fresh.top[i].corpus_offset);
        CHECK(resumed.top[i].probe_activation == fresh.top[i].probe_activation);
        CHECK(resumed.top[i].sequence_text == fresh.top[i].sequence_text);
    }
    for (size_t i = 0; i < fresh.bottom.size(); ++i) {
        CHECK(resumed.bottom[i].corpus_offset == fresh.bottom[i].corpus_offset);
        CHECK(resumed.bottom[i].probe_activation == fresh.bottom[i].probe_activation);
    }
    CHECK(half.windows_scored <= resumed.windows_scored);
}

TEST_CASE("scan checkpoint rejects a different probe") {
    TempDir tmp("scan_sig");
    auto path = tmp.path / "corpus.txt";
    auto ckpt = tmp.path / "scan.ckpt";
    write_text_file(path, join_lines(4));

    ScanConfig cfg;
    cfg.seq_len = 10;
    cfg.top_k = 2;
    cfg.bottom_k = 2;
    cfg.checkpoint_path = ckpt;
    auto p = scan_probe(31);
    corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);

    auto other = scan_probe(32);
    CHECK_THROWS_WITH_AS(corpus_scan(path, scan_model(), test_tokenizer(), other, cfg),
                         doctest::Contains("different probe"), RuntimeError);
}

TEST_CASE("scan tail handling") {
    TempDir tmp("scan_tail");
    auto path = tmp.path / "corpus.txt";
    std::string corpus = join_lines(1);
    write_text_file(path, corpus);
    long total = oracle_token_count(corpus);
    REQUIRE(total > 4);
    REQUIRE(total - 1 <= scan_model().config().n_ctx);
    auto p = scan_probe(31);

    // leftover of exactly one token: skipped and counted
    ScanConfig cfg;
    cfg.top_k = 100;
    cfg.bottom_k = 100;
    cfg.seq_len = static_cast<int>(total - 1);
    REQUIRE(cfg.seq_len <= scan_model().config().n_ctx);
    auto res = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);
    CHECK(res.windows_scored == 1);
    CHECK(res.skipped_short == 1);
    CHECK(res.top.size() == 1);

    // leftover of two tokens: scored as a short final sequence
    cfg.seq_len = static_cast<int>(total - 2);
    auto res2 = corpus_scan(path, scan_model(), test_tokenizer(), p, cfg);
    CHECK(res2.windows_scored == 2);
    CHECK(res2.skipped_short == 0);
    CHECK(res2.top.size() == 2);
}

TEST_CASE("scan validates its configuration") {
    TempDir tmp("scan_cfg");
    auto path = tmp.path / "corpus.txt";
    write_text_file(path, join_lines(2));
    auto p = scan_probe(31);

    ScanConfig cfg;
    cfg.seq_len = 1;
    CHECK_THROWS_AS(corpus_scan(path, scan_model(), test_tokenizer(), p, cfg), ConfigError);
    cfg.seq_len = scan_model().config().n_ctx + 1;
    CHECK_THROWS_AS(corpus_scan(path, scan_model(), test_tokenizer(), p, cfg), ConfigError);
    cfg.seq_len = 10;
    cfg.checkpoint_every = 0;
    CHECK_THROWS_AS(corpus_scan(path, scan_model(), test_tokenizer(), p, cfg), ConfigError);
    cfg.checkpoint_every = 1;
    CHECK_THROWS_AS(corpus_scan(tmp.path / "missing.txt", scan_model(), test_tokenizer(), p, cfg),
                    RuntimeError);
}

TEST_CASE("scan hits round trip through jsonl") {
    std::vector<ScanHit> hits(2);
    hits[0].sequence_text = "first window text\nwith newline";
    hits[0].probe_activation = -3.25;
    hits[0].corpus_offset = 256;
    hits[1].sequence_text = "second";
    hits[1].probe_activation = 1.5e-7;
    hits[1].corpus_offset = 512;

    TempDir tmp("scan_jsonl");
    auto path = tmp.path / "hits.jsonl";
    write_hits_jsonl(path, hits);
    auto back = read_hits_jsonl(path);
    REQUIRE(back.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(back[i].sequence_text == hits[i].sequence_text);
        CHECK(back[i].probe_activation == hits[i].probe_activation);
        CHECK(back[i].corpus_offset == hits[i].corpus_offset);
    }
}
