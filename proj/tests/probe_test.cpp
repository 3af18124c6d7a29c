#include "obsprobe/probe.hpp"

#include <cmath>
#include <fstream>

#include <doctest.h>
#include <json.hpp>

#include "helpers.hpp"

using namespace obsprobe;
using namespace obsprobe::probe;
using obsprobe::testing::TempDir;
using obsprobe::testing::source_dir;
using nlohmann::json;

namespace {

const json& probe_cases() {
    static json cases = [] {
        std::ifstream in(source_dir() / "tests" / "data" / "probe_cases.json");
        REQUIRE(in.good());
        return json::parse(in);
    }();
    return cases;
}

Mat mat_of(const json& rows) {
    Mat m(rows.size(), rows[0].size());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)].get<double>();
    return m;
}

Vec vec_of(const json& vals) {
    Vec v(vals.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = vals[static_cast<size_t>(i)].get<double>();
    return v;
}

/// Two gaussian blobs at +/- sep * direction. Labels: 1 on the + side.
void make_blobs(int n, int d, double sep, uint64_t seed, Mat& X, std::vector<int>& y) {
    Rng rng(seed);
    Vec dir(d);
    for (int j = 0; j < d; ++j) dir(j) = rng.normal();
    dir.normalize();
    X = Mat(n, d);
    y.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        int label = i % 2;
        for (int j = 0; j < d; ++j) X(i, j) = rng.normal() + (label ? sep : -sep) * dir(j);
        y[static_cast<size_t>(i)] = label;
    }
}

}  // namespace

TEST_SUITE("probe") {

TEST_CASE("training matches the reference fits") {
    for (const auto& c : probe_cases()["fits"]) {
        Mat X = mat_of(c["X"]);
        std::vector<int> y = c["y"].get<std::vector<int>>();
        ProbeModel m = train_probe(X, y, c["l2"].get<double>(), 11, /*standardize=*/false);
        Vec w_ref = vec_of(c["w"]);
        CHECK((m.w - w_ref).cwiseAbs().maxCoeff() < 1e-4);
        CHECK(std::abs(m.b - c["b"].get<double>()) < 1e-4);
    }
}

TEST_CASE("f1 matches the reference pairs") {
    for (const auto& c : probe_cases()["f1"]) {
        double got = f1_score(c["y_true"].get<std::vector<int>>(),
                              c["y_pred"].get<std::vector<int>>());
        CHECK(got == doctest::Approx(c["f1"].get<double>()).epsilon(1e-12));
    }
}

TEST_CASE("f1 handles empty denominators and length errors") {
    CHECK(f1_score({0, 0}, {0, 0}) == 0.0);
    CHECK(f1_score({1, 1}, {1, 1}) == 1.0);
    CHECK_THROWS_AS(f1_score({1}, {1, 0}), RuntimeError);
}

TEST_CASE("well-separated clusters train to a perfect separator") {
    Mat X;
    std::vector<int> y;
    make_blobs(80, 6, 10.0, 5, X, y);
    ProbeModel m = train_probe(X, y, 1e-3, 0);
    std::vector<int> pred;
    for (Eigen::Index i = 0; i < X.rows(); ++i) pred.push_back(predict(m, X.row(i).transpose()));
    CHECK(f1_score(y, pred) == 1.0);
}

TEST_CASE("flipping every label negates the solution") {
    Mat X;
    std::vector<int> y;
    make_blobs(60, 4, 1.0, 9, X, y);
    std::vector<int> y_flip;
    for (int v : y) y_flip.push_back(1 - v);
    ProbeModel a = train_probe(X, y, 1e-2, 3, false);
    ProbeModel b = train_probe(X, y_flip, 1e-2, 4, false);
    CHECK((a.w + b.w).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(std::abs(a.b + b.b) < 1e-5);
}

TEST_CASE("duplicating the dataset leaves the optimum unchanged") {
    Mat X;
    std::vector<int> y;
    make_blobs(40, 3, 1.0, 12, X, y);
    Mat X2(X.rows() * 2, X.cols());
    X2 << X, X;
    std::vector<int> y2 = y;
    y2.insert(y2.end(), y.begin(), y.end());
    ProbeModel a = train_probe(X, y, 0.1, 1, false);
    ProbeModel b = train_probe(X2, y2, 0.1, 2, false);
    CHECK((a.w - b.w).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(a.b - b.b) < 1e-6);
}

TEST_CASE("score probability and predict behave at the boundary") {
    ProbeModel m;
    m.w = Vec::Zero(4);
    m.b = 0.0;
    Vec h = Vec::Ones(4);
    CHECK(score(m, h) == 0.0);
    CHECK(probability(m, h) == 0.5);
    CHECK(predict(m, h) == 0);  // strictly-greater rule

    m.w = Vec::LinSpaced(4, 1.0, 4.0);
    Vec unit = m.w / m.w.squaredNorm();
    CHECK(score(m, unit) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(predict(m, unit) == 1);
}

TEST_CASE("score agrees with a scalar-loop dot product") {
    Rng rng(31);
    ProbeModel m;
    m.w = Vec(7);
    for (int j = 0; j < 7; ++j) m.w(j) = rng.normal();
    m.b = 0.37;
    Vec h(7);
    for (int j = 0; j < 7; ++j) h(j) = rng.normal();
    double manual = m.b;
    for (int j = 0; j < 7; ++j) manual += m.w(j) * h(j);
    CHECK(score(m, h) == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("input validation rejects malformed training sets") {
    Mat X = Mat::Random(6, 3);
    CHECK_THROWS_WITH_AS(train_probe(X, {1, 1, 1, 1, 1, 1}, 0.1, 0),
                         doctest::Contains("single-class"), RuntimeError);
    CHECK_THROWS_AS(train_probe(X, {0, 1, 0}, 0.1, 0), RuntimeError);
    CHECK_THROWS_AS(train_probe(Mat::Random(1, 3), {1}, 0.1, 0), RuntimeError);
    CHECK_THROWS_AS(train_probe(X, {0, 1, 0, 1, 0, 2}, 0.1, 0), RuntimeError);
    CHECK_THROWS_AS(train_probe(X, {0, 1, 0, 1, 0, 1}, 0.0, 0), RuntimeError);

    Mat Xbad = X;
    Xbad(2, 1) = std::numeric_limits<double>::quiet_NaN();
    Xbad(4, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH_AS(train_probe(Xbad, {0, 1, 0, 1, 0, 1}, 0.1, 0),
                         doctest::Contains("rows: 2 4"), RuntimeError);

    ProbeModel m = train_probe(X, {0, 1, 0, 1, 0, 1}, 0.1, 0);
    CHECK_THROWS_AS(score(m, Vec::Zero(5)), RuntimeError);
}

TEST_CASE("objective gradient matches finite differences") {
    Mat X;
    std::vector<int> y;
    make_blobs(30, 5, 0.7, 77, X, y);
    Rng rng(7);
    Vec w(5);
    for (int j = 0; j < 5; ++j) w(j) = rng.normal();
    double b = rng.normal();
    double l2 = 0.05;
    double gb = 0.0;
    Vec gw = objective_gradient(X, y, w, b, l2, &gb);
    const double eps = 1e-6;
    for (int j = 0; j < 5; ++j) {
        Vec wp = w, wm = w;
        wp(j) += eps;
        wm(j) -= eps;
        double fd = (objective(X, y, wp, b, l2) - objective(X, y, wm, b, l2)) / (2 * eps);
        CHECK(std::abs(gw(j) - fd) / std::max(std::abs(fd), 1e-8) < 1e-4);
    }
    double fdb = (objective(X, y, w, b + eps, l2) - objective(X, y, w, b - eps, l2)) / (2 * eps);
    CHECK(std::abs(gb - fdb) / std::max(std::abs(fdb), 1e-8) < 1e-4);
}

TEST_CASE("different starts reach the same optimum") {
    Mat X;
    std::vector<int> y;
    make_blobs(50, 4, 0.8, 21, X, y);
    ProbeModel a = train_probe(X, y, 0.01, 101);
    ProbeModel b = train_probe(X, y, 0.01, 202);
    CHECK((a.w - b.w).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(std::abs(a.b - b.b) < 1e-5);
}

TEST_CASE("standardizer zeroes out constant dimensions") {
    Mat H(4, 3);
    H << 1, 5, 0.1, 2, 5, 0.2, 3, 5, 0.3, 4, 5, 0.4;
    Standardizer s = Standardizer::fit(H, true);
    CHECK(s.scale(1) == 0.0);
    CHECK(s.scale(0) > 0.0);
    Mat Z = s.apply(H);
    CHECK(Z.col(1).cwiseAbs().maxCoeff() == 0.0);
    CHECK(std::abs(Z.col(0).mean()) < 1e-12);
    CHECK(std::abs(Z.col(0).array().square().mean() - 1.0) < 1e-12);

    Standardizer off = Standardizer::fit(H, false);
    CHECK(off.apply(H) == H);
}

TEST_CASE("crossval on separable data is perfect in every fold") {
    Mat X;
    std::vector<int> y;
    make_blobs(60, 5, 8.0, 13, X, y);
    EvalOptions opts;
    opts.seed = 1;
    opts.bootstrap_resamples = 200;
    EvalResult r = crossval_matrix(X, y, 3, opts);
    CHECK(r.f1_mean == 1.0);
    CHECK(r.layer == 3);
    CHECK(r.n_examples == 60);
    CHECK(r.f1_per_fold.size() == 5);
    for (double f : r.f1_per_fold) CHECK(f == 1.0);
    CHECK(r.ci_lo == 1.0);
    CHECK(r.ci_hi == 1.0);
    CHECK(r.fold_l2.size() == 5);
    for (double l2 : r.fold_l2)
        CHECK(std::find(kL2Grid.begin(), kL2Grid.end(), l2) != kL2Grid.end());
}

TEST_CASE("crossval on label noise sits near chance") {
    Rng rng(55);
    Mat X(80, 6);
    std::vector<int> y;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = rng.normal();
        y.push_back(static_cast<int>(i) % 2);
    }
    EvalOptions opts;
    opts.seed = 2;
    opts.bootstrap_resamples = 200;
    EvalResult r = crossval_matrix(X, y, 0, opts);
    CHECK(r.f1_mean > 0.2);
    CHECK(r.f1_mean < 0.8);
    CHECK(r.ci_lo <= r.f1_mean);
    CHECK(r.ci_hi >= r.f1_mean);
}

TEST_CASE("crossval is deterministic") {
    Mat X;
    std::vector<int> y;
    make_blobs(40, 4, 1.5, 77, X, y);
    EvalOptions opts;
    opts.seed = 9;
    opts.bootstrap_resamples = 300;
    EvalResult a = crossval_matrix(X, y, 1, opts);
    EvalResult b = crossval_matrix(X, y, 1, opts);
    CHECK(a.f1_mean == b.f1_mean);
    CHECK(a.ci_lo == b.ci_lo);
    CHECK(a.ci_hi == b.ci_hi);
    CHECK(a.f1_per_fold == b.f1_per_fold);
    CHECK(a.fold_l2 == b.fold_l2);
    CHECK(a.pooled_pred == b.pooled_pred);
}

TEST_CASE("pooled f1 is computed over all held-out predictions") {
    Mat X;
    std::vector<int> y;
    make_blobs(50, 4, 1.2, 31, X, y);
    EvalOptions opts;
    opts.seed = 4;
    opts.bootstrap_resamples = 100;
    EvalResult r = crossval_matrix(X, y, 0, opts);
    CHECK(r.pooled_true == y);
    CHECK(r.pooled_pred.size() == y.size());
    CHECK(r.f1_mean == f1_score(r.pooled_true, r.pooled_pred));
}

TEST_CASE("a single-entry grid pins the strength") {
    Mat X;
    std::vector<int> y;
    make_blobs(40, 3, 2.0, 61, X, y);
    EvalOptions opts;
    opts.seed = 5;
    opts.l2_grid = {0.5};
    opts.bootstrap_resamples = 100;
    EvalResult r = crossval_matrix(X, y, 0, opts);
    for (double l2 : r.fold_l2) CHECK(l2 == 0.5);
}

// --- store-backed paths -----------------------------------------------------

namespace {

struct StoreFixture {
    TempDir tmp{"probe_store"};
    std::vector<corpus::Example> dataset;
    std::unique_ptr<store::ActivationStore> st;

    /// Layer 1 rows at t* carry the label signal; layers 0 and 2 are noise.
    explicit StoreFixture(int n = 40, int d = 8, double sep = 6.0) {
        observer::CaptureSpec spec;
        spec.layers = {0, 1, 2};
        st = std::make_unique<store::ActivationStore>(tmp.path / "store", "obs-test", spec);
        Rng rng(404);
        Vec dir(d);
        for (int j = 0; j < d; ++j) dir(j) = rng.normal();
        dir.normalize();
        for (int i = 0; i < n; ++i) {
            corpus::Example ex;
            ex.context = "ctx " + std::to_string(i);
            ex.continuation = "cont " + std::to_string(i);
            ex.label = i % 2 ? corpus::Label::hallucinated : corpus::Label::faithful;
            ex.finalize();
            int T = 4 + i % 3;
            int t_star = T - 1;
            observer::CapturedActivations acts;
            acts.T = T;
            for (int k = 0; k <= 2; ++k) {
                Mat r(T, d);
                for (int t = 0; t < T; ++t)
                    for (int j = 0; j < d; ++j) r(t, j) = rng.normal();
                if (k == 1) r.row(t_star) += ((i % 2) ? sep : -sep) * dir.transpose();
                acts.resid[k] = r;
            }
            st->put(ex.id, acts, {{"t_star", t_star}, {"context_len", 2}});
            dataset.push_back(ex);
        }
    }
};

}  // namespace

TEST_CASE("gather_features pulls the t* rows from the store") {
    StoreFixture fx(12);
    Mat H = gather_features(fx.dataset, *fx.st, 1);
    CHECK(H.rows() == 12);
    CHECK(H.cols() == 8);
    for (size_t i = 0; i < fx.dataset.size(); ++i) {
        int t_star = fx.st->doc_meta(fx.dataset[i].id).at("t_star");
        Vec direct = fx.st->resid_row(fx.dataset[i].id, 1, t_star);
        CHECK((H.row(static_cast<Eigen::Index>(i)).transpose() - direct).cwiseAbs().maxCoeff() ==
              0.0);
    }
    CHECK(labels_of(fx.dataset)[0] == 0);
    CHECK(labels_of(fx.dataset)[1] == 1);
}

TEST_CASE("gather_features reports every missing document") {
    StoreFixture fx(6);
    auto broken = fx.dataset;
    corpus::Example ghost;
    ghost.context = "missing";
    ghost.continuation = "doc";
    ghost.label = corpus::Label::faithful;
    ghost.finalize();
    broken.push_back(ghost);
    CHECK_THROWS_WITH_AS(gather_features(broken, *fx.st, 1), doctest::Contains(ghost.id.c_str()),
                         RuntimeError);
}

TEST_CASE("store-backed crossval separates the signal layer from noise") {
    StoreFixture fx(40);
    EvalOptions opts;
    opts.seed = 6;
    opts.bootstrap_resamples = 200;
    EvalResult signal = crossval(fx.dataset, *fx.st, 1, opts);
    EvalResult noise = crossval(fx.dataset, *fx.st, 0, opts);
    CHECK(signal.f1_mean == 1.0);
    CHECK(noise.f1_mean < 0.9);
}

TEST_CASE("layer_sweep picks the informative layer by inner score") {
    StoreFixture fx(40);
    EvalOptions opts;
    opts.seed = 7;
    opts.bootstrap_resamples = 100;
    SweepResult sweep = layer_sweep(fx.dataset, *fx.st, {0, 1, 2}, opts);
    CHECK(sweep.layers.size() == 3);
    CHECK(sweep.best_layer == 1);

    EvalResult lone = crossval(fx.dataset, *fx.st, 1, opts);
    CHECK(sweep.layers[1].second.f1_mean == lone.f1_mean);
    CHECK(sweep.layers[1].second.inner_score == lone.inner_score);
    CHECK_THROWS_AS(layer_sweep(fx.dataset, *fx.st, {}, opts), RuntimeError);
}

TEST_CASE("transfer_eval trains on one set and scores the other") {
    StoreFixture fx(60);
    std::vector<corpus::Example> train(fx.dataset.begin(), fx.dataset.begin() + 40);
    std::vector<corpus::Example> test(fx.dataset.begin() + 40, fx.dataset.end());
    EvalOptions opts;
    opts.seed = 8;
    opts.bootstrap_resamples = 200;
    EvalResult r = transfer_eval(train, test, *fx.st, *fx.st, 1, opts);
    CHECK(r.f1_mean == 1.0);
    CHECK(r.n_examples == 20);
    CHECK(r.pooled_pred.size() == 20);
    CHECK(r.fold_l2.size() == 1);
}

TEST_CASE("transfer_eval rejects stores from different observers") {
    StoreFixture fx(6);
    TempDir other("probe_store_b");
    observer::CaptureSpec spec;
    spec.layers = {0, 1, 2};
    store::ActivationStore st_b(other.path / "store", "different-observer", spec);
    CHECK_THROWS_WITH_AS(transfer_eval(fx.dataset, fx.dataset, *fx.st, st_b, 1, EvalOptions{}),
                         doctest::Contains("different observers"), RuntimeError);
}

TEST_CASE("probe models survive a save/load round trip") {
    Mat X;
    std::vector<int> y;
    make_blobs(30, 5, 2.0, 91, X, y);
    ProbeModel m = train_probe(X, y, 0.01, 17);
    m.layer = 9;
    m.observer_model_id = "obs-test";
    TempDir tmp("probe_io");
    m.save(tmp.path / "probe");
    ProbeModel r = ProbeModel::load(tmp.path / "probe");
    CHECK(r.layer == 9);
    CHECK(r.l2_strength == m.l2_strength);
    CHECK(r.train_seed == 17);
    CHECK(r.observer_model_id == "obs-test");
    CHECK(r.standardizer.enabled);
    // weights round through f32 storage
    CHECK((r.w - m.w).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(r.b - m.b) < 1e-15);
    Vec h = X.row(3).transpose();
    CHECK(std::abs(score(r, h) - score(m, h)) < 1e-5);
}

}  // TEST_SUITE
