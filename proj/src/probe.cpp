#include "obsprobe/probe.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace obsprobe::probe {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const Mat& H, bool enabled) {
    Standardizer s;
    s.enabled = enabled;
    if (!enabled) return s;
    const Eigen::Index n = H.rows(), d = H.cols();
    s.mean = H.colwise().mean();
    s.scale = Vec(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        double var = (H.col(j).array() - s.mean(j)).square().sum() / static_cast<double>(n);
        double sd = std::sqrt(var);
        s.scale(j) = sd > 0.0 ? 1.0 / sd : 0.0;
    }
    return s;
}

Vec Standardizer::apply(const Vec& h) const {
    if (!enabled) return h;
    if (h.size() != mean.size()) throw RuntimeError("standardizer: dimension mismatch");
    return (h - mean).cwiseProduct(scale);
}

Mat Standardizer::apply(const Mat& H) const {
    if (!enabled) return H;
    if (H.cols() != mean.size()) throw RuntimeError("standardizer: dimension mismatch");
    Mat Z = H;
    Z.rowwise() -= mean.transpose();
    Z = Z.array().rowwise() * scale.transpose().array();
    return Z;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

namespace {

// log(1 + e^z) without overflow
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

void check_training_input(const Mat& X, const std::vector<int>& y) {
    const Eigen::Index n = X.rows();
    if (n < 2) throw RuntimeError("probe: need at least 2 examples");
    if (static_cast<size_t>(n) != y.size()) throw RuntimeError("probe: feature/label count mismatch");
    bool has0 = false, has1 = false;
    for (int v : y) {
        if (v == 0) has0 = true;
        else if (v == 1) has1 = true;
        else throw RuntimeError("probe: labels must be 0 or 1");
    }
    if (!has0 || !has1) throw RuntimeError("probe: training labels are single-class");
    std::vector<Eigen::Index> bad;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!X.row(i).allFinite()) bad.push_back(i);
    }
    if (!bad.empty()) {
        std::string msg = "probe: non-finite features in rows:";
        for (size_t i = 0; i < bad.size() && i < 20; ++i) msg += " " + std::to_string(bad[i]);
        if (bad.size() > 20) msg += " ... (" + std::to_string(bad.size()) + " total)";
        throw RuntimeError(msg);
    }
}

}  // namespace

double objective(const Mat& X, const std::vector<int>& y, const Vec& w, double b, double l2) {
    const Eigen::Index n = X.rows();
    Vec z = X * w;
    double J = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double zi = z(i) + b;
        J += softplus(zi) - (y[static_cast<size_t>(i)] ? zi : 0.0);
    }
    return J / static_cast<double>(n) + 0.5 * l2 * w.squaredNorm();
}

Vec objective_gradient(const Mat& X, const std::vector<int>& y, const Vec& w, double b,
                       double l2, double* gb) {
    const Eigen::Index n = X.rows();
    Vec r(n);  // p - y
    Vec z = X * w;
    for (Eigen::Index i = 0; i < n; ++i) {
        r(i) = sigmoid(z(i) + b) - y[static_cast<size_t>(i)];
    }
    Vec gw = X.transpose() * r / static_cast<double>(n) + l2 * w;
    if (gb) *gb = r.mean();
    return gw;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

constexpr double kGradTol = 1e-6;
constexpr int kMaxNewtonIters = 500;

struct Fit {
    Vec w;
    double b = 0.0;
};

Fit newton_fit(const Mat& X, const std::vector<int>& y, double l2, uint64_t seed) {
    const Eigen::Index n = X.rows(), d = X.cols();
    Vec w(d);
    Rng rng(seed);
    for (Eigen::Index j = 0; j < d; ++j) {
        w(j) = 0.01 * rng.normal() / std::sqrt(static_cast<double>(d));
    }
    double b = 0.0;

    double J = objective(X, y, w, b, l2);
    for (int iter = 0; iter < kMaxNewtonIters; ++iter) {
        double gb = 0.0;
        Vec gw = objective_gradient(X, y, w, b, l2, &gb);
        Vec g(d + 1);
        g.head(d) = gw;
        g(d) = gb;
        if (g.norm() <= kGradTol) return {w, b};

        Vec z = X * w;
        Vec s(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            double p = sigmoid(z(i) + b);
            s(i) = std::max(p * (1.0 - p), 1e-12);
        }
        Mat Xs = X.array().colwise() * s.array();
        Mat H(d + 1, d + 1);
        H.topLeftCorner(d, d) = X.transpose() * Xs / static_cast<double>(n);
        H.topLeftCorner(d, d).diagonal().array() += l2;
        Vec cross = Xs.colwise().sum().transpose() / static_cast<double>(n);
        H.block(0, d, d, 1) = cross;
        H.block(d, 0, 1, d) = cross.transpose();
        H(d, d) = s.mean();
        H.diagonal().array() += 1e-12;

        Vec step = H.ldlt().solve(-g);
        double slope = g.dot(step);
        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            Vec w_try = w + t * step.head(d);
            double b_try = b + t * step(d);
            double J_try = objective(X, y, w_try, b_try, l2);
            if (J_try <= J + 1e-4 * t * slope) {
                w = std::move(w_try);
                b = b_try;
                J = J_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;  // stationary up to floating point
    }
    double gb = 0.0;
    Vec gw = objective_gradient(X, y, w, b, l2, &gb);
    double gnorm = std::sqrt(gw.squaredNorm() + gb * gb);
    if (gnorm > kGradTol * 1e3) {
        throw RuntimeError("probe: optimizer stalled at gradient norm " + std::to_string(gnorm));
    }
    return {w, b};
}

}  // namespace

ProbeModel train_probe(const Mat& H, const std::vector<int>& y, double l2_strength,
                       uint64_t seed, bool standardize) {
    if (l2_strength <= 0.0) throw RuntimeError("probe: l2_strength must be positive");
    check_training_input(H, y);
    ProbeModel model;
    model.standardizer = Standardizer::fit(H, standardize);
    Mat Z = model.standardizer.apply(H);
    Fit fit = newton_fit(Z, y, l2_strength, seed);
    model.w = std::move(fit.w);
    model.b = fit.b;
    model.l2_strength = l2_strength;
    model.train_seed = seed;
    return model;
}

double score(const ProbeModel& probe, const Vec& h) {
    if (h.size() != probe.w.size()) throw RuntimeError("probe: feature dimension mismatch");
    return probe.w.dot(probe.standardizer.apply(h)) + probe.b;
}

double probability(const ProbeModel& probe, const Vec& h) { return sigmoid(score(probe, h)); }

int predict(const ProbeModel& probe, const Vec& h) { return score(probe, h) > 0.0 ? 1 : 0; }

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double f1_score(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    if (y_true.size() != y_pred.size()) throw RuntimeError("f1: length mismatch");
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < y_true.size(); ++i) {
        if (y_pred[i] == 1 && y_true[i] == 1) ++tp;
        else if (y_pred[i] == 1 && y_true[i] == 0) ++fp;
        else if (y_pred[i] == 0 && y_true[i] == 1) ++fn;
    }
    const long denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    return fnv1a64(&seed, sizeof(seed), fnv1a64(&tag, sizeof(tag)));
}

std::vector<std::vector<size_t>> fold_indices(const std::vector<int>& y, int k, uint64_t seed) {
    std::vector<int> assign = corpus::split_folds_labels(y, k, seed);
    std::vector<std::vector<size_t>> folds(static_cast<size_t>(k));
    for (size_t i = 0; i < assign.size(); ++i) {
        folds[static_cast<size_t>(assign[i])].push_back(i);
    }
    return folds;
}

Mat take_rows(const Mat& X, const std::vector<size_t>& idx) {
    Mat out(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
    return out;
}

std::vector<int> take_labels(const std::vector<int>& y, const std::vector<size_t>& idx) {
    std::vector<int> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = y[idx[i]];
    return out;
}

/// Mean validation F1 of `l2` over an inner split of the training rows.
double inner_cv_f1(const Mat& X, const std::vector<int>& y, double l2, int inner_k,
                   uint64_t seed, bool standardize) {
    auto folds = fold_indices(y, inner_k, seed);
    double total = 0.0;
    for (int j = 0; j < inner_k; ++j) {
        std::vector<size_t> train_idx, val_idx = folds[static_cast<size_t>(j)];
        for (int o = 0; o < inner_k; ++o) {
            if (o == j) continue;
            const auto& f = folds[static_cast<size_t>(o)];
            train_idx.insert(train_idx.end(), f.begin(), f.end());
        }
        ProbeModel p = train_probe(take_rows(X, train_idx), take_labels(y, train_idx), l2,
                                   mix_seed(seed, static_cast<uint64_t>(j)), standardize);
        std::vector<int> truth = take_labels(y, val_idx), pred;
        pred.reserve(val_idx.size());
        for (size_t i : val_idx) pred.push_back(predict(p, X.row(static_cast<Eigen::Index>(i)).transpose()));
        total += f1_score(truth, pred);
    }
    return total / inner_k;
}

struct CiBounds {
    double lo, hi;
};

/// Percentile bootstrap over example-level (truth, prediction) pairs.
CiBounds bootstrap_ci(const std::vector<int>& truth, const std::vector<int>& pred,
                      int resamples, uint64_t seed) {
    const size_t n = truth.size();
    Rng rng(seed);
    std::vector<double> stats(static_cast<size_t>(resamples));
    std::vector<int> st(n), sp(n);
    for (int b = 0; b < resamples; ++b) {
        for (size_t i = 0; i < n; ++i) {
            size_t j = static_cast<size_t>(rng.below(n));
            st[i] = truth[j];
            sp[i] = pred[j];
        }
        stats[static_cast<size_t>(b)] = f1_score(st, sp);
    }
    std::sort(stats.begin(), stats.end());
    auto quantile = [&](double q) {
        double pos = q * static_cast<double>(stats.size() - 1);
        size_t lo = static_cast<size_t>(std::floor(pos));
        size_t hi = std::min(lo + 1, stats.size() - 1);
        double frac = pos - static_cast<double>(lo);
        return stats[lo] + frac * (stats[hi] - stats[lo]);
    };
    return {quantile(0.025), quantile(0.975)};
}

}  // namespace

EvalResult crossval_matrix(const Mat& H, const std::vector<int>& y, int layer_tag,
                           const EvalOptions& opts) {
    if (opts.k < 2) throw RuntimeError("probe: crossval needs k >= 2");
    if (opts.l2_grid.empty()) throw RuntimeError("probe: empty l2 grid");
    check_training_input(H, y);

    auto folds = fold_indices(y, opts.k, opts.seed);
    EvalResult res;
    res.layer = layer_tag;
    res.n_examples = static_cast<int>(y.size());
    res.pooled_true = y;
    res.pooled_pred.assign(y.size(), 0);

    double inner_total = 0.0;
    for (int j = 0; j < opts.k; ++j) {
        std::vector<size_t> train_idx;
        const std::vector<size_t>& test_idx = folds[static_cast<size_t>(j)];
        for (int o = 0; o < opts.k; ++o) {
            if (o == j) continue;
            const auto& f = folds[static_cast<size_t>(o)];
            train_idx.insert(train_idx.end(), f.begin(), f.end());
        }
        Mat Xtr = take_rows(H, train_idx);
        std::vector<int> ytr = take_labels(y, train_idx);

        // strength selection never sees the held-out fold
        uint64_t inner_seed = mix_seed(opts.seed, 1000 + static_cast<uint64_t>(j));
        double best_l2 = opts.l2_grid.front();
        double best_f1 = -1.0;
        for (double l2 : opts.l2_grid) {
            double f1 = inner_cv_f1(Xtr, ytr, l2, opts.inner_k, inner_seed, opts.standardize);
            if (f1 > best_f1) {
                best_f1 = f1;
                best_l2 = l2;
            }
        }
        inner_total += best_f1;
        res.fold_l2.push_back(best_l2);

        ProbeModel p = train_probe(Xtr, ytr, best_l2, mix_seed(opts.seed, static_cast<uint64_t>(j)),
                                   opts.standardize);
        std::vector<int> truth = take_labels(y, test_idx), pred;
        pred.reserve(test_idx.size());
        for (size_t i : test_idx) {
            int yhat = predict(p, H.row(static_cast<Eigen::Index>(i)).transpose());
            pred.push_back(yhat);
            res.pooled_pred[i] = yhat;
        }
        res.f1_per_fold.push_back(f1_score(truth, pred));
    }
    res.inner_score = inner_total / opts.k;
    res.f1_mean = f1_score(res.pooled_true, res.pooled_pred);
    auto ci = bootstrap_ci(res.pooled_true, res.pooled_pred, opts.bootstrap_resamples,
                           mix_seed(opts.seed, 0xb007));
    res.ci_lo = ci.lo;
    res.ci_hi = ci.hi;
    return res;
}

Mat gather_features(const std::vector<corpus::Example>& dataset,
                    const store::ActivationStore& store, int layer) {
    std::vector<std::string> missing;
    for (const auto& ex : dataset) {
        if (!store.contains(ex.id)) missing.push_back(ex.id);
    }
    if (!missing.empty()) {
        std::string msg = "probe: activations missing for:";
        for (size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
        if (missing.size() > 20) msg += " ... (" + std::to_string(missing.size()) + " total)";
        throw RuntimeError(msg);
    }
    Mat H;
    for (size_t i = 0; i < dataset.size(); ++i) {
        auto meta = store.doc_meta(dataset[i].id);
        auto it = meta.find("t_star");
        if (it == meta.end()) {
            throw RuntimeError("probe: doc '" + dataset[i].id + "' has no t_star metadata");
        }
        Vec h = store.resid_row(dataset[i].id, layer, it->second);
        if (H.size() == 0) H = Mat(static_cast<Eigen::Index>(dataset.size()), h.size());
        H.row(static_cast<Eigen::Index>(i)) = h.transpose();
    }
    return H;
}

std::vector<int> labels_of(const std::vector<corpus::Example>& dataset) {
    std::vector<int> y;
    y.reserve(dataset.size());
    for (const auto& ex : dataset) y.push_back(ex.label == corpus::Label::hallucinated ? 1 : 0);
    return y;
}

EvalResult crossval(const std::vector<corpus::Example>& dataset,
                    const store::ActivationStore& store, int layer, const EvalOptions& opts) {
    Mat H = gather_features(dataset, store, layer);
    return crossval_matrix(H, labels_of(dataset), layer, opts);
}

SweepResult layer_sweep(const std::vector<corpus::Example>& dataset,
                        const store::ActivationStore& store, const std::vector<int>& layers,
                        const EvalOptions& opts) {
    if (layers.empty()) throw RuntimeError("probe: layer sweep needs at least one layer");
    SweepResult sweep;
    sweep.layers.resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
        sweep.layers[i] = {layers[i], crossval(dataset, store, layers[i], opts)};
    }
    double best = -1.0;
    for (const auto& [layer, result] : sweep.layers) {
        if (result.inner_score > best) {
            best = result.inner_score;
            sweep.best_layer = layer;
        }
    }
    return sweep;
}

EvalResult transfer_eval(const std::vector<corpus::Example>& train_ds,
                         const std::vector<corpus::Example>& test_ds,
                         const store::ActivationStore& train_store,
                         const store::ActivationStore& test_store, int layer,
                         const EvalOptions& opts) {
    if (train_store.model_id() != test_store.model_id() ||
        train_store.hash() != test_store.hash()) {
        throw RuntimeError("probe: transfer datasets were captured under different observers");
    }
    Mat Xtr = gather_features(train_ds, train_store, layer);
    std::vector<int> ytr = labels_of(train_ds);

    uint64_t inner_seed = mix_seed(opts.seed, 42);
    double best_l2 = opts.l2_grid.front();
    double best_f1 = -1.0;
    for (double l2 : opts.l2_grid) {
        double f1 = inner_cv_f1(Xtr, ytr, l2, opts.inner_k, inner_seed, opts.standardize);
        if (f1 > best_f1) {
            best_f1 = f1;
            best_l2 = l2;
        }
    }
    ProbeModel p = train_probe(Xtr, ytr, best_l2, mix_seed(opts.seed, 7), opts.standardize);

    Mat Xte = gather_features(test_ds, test_store, layer);
    EvalResult res;
    res.layer = layer;
    res.n_examples = static_cast<int>(test_ds.size());
    res.pooled_true = labels_of(test_ds);
    res.inner_score = best_f1;
    res.fold_l2 = {best_l2};
    for (Eigen::Index i = 0; i < Xte.rows(); ++i) {
        res.pooled_pred.push_back(predict(p, Xte.row(i).transpose()));
    }
    res.f1_mean = f1_score(res.pooled_true, res.pooled_pred);
    res.f1_per_fold = {res.f1_mean};
    auto ci = bootstrap_ci(res.pooled_true, res.pooled_pred, opts.bootstrap_resamples,
                           mix_seed(opts.seed, 0xb007));
    res.ci_lo = ci.lo;
    res.ci_hi = ci.hi;
    return res;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

void write_vec(const fs::path& path, const Vec& v) {
    std::vector<float> raw(static_cast<size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) raw[static_cast<size_t>(i)] = static_cast<float>(v(i));
    write_f32_file(path, raw.data(), raw.size());
}

Vec read_vec(const fs::path& path) {
    auto raw = read_f32_file(path);
    Vec v(static_cast<Eigen::Index>(raw.size()));
    for (size_t i = 0; i < raw.size(); ++i) v(static_cast<Eigen::Index>(i)) = raw[i];
    return v;
}

}  // namespace

void ProbeModel::save(const fs::path& dir) const {
    fs::create_directories(dir);
    write_vec(dir / "w.bin", w);
    json j;
    j["b"] = b;
    j["layer"] = layer;
    j["l2_strength"] = l2_strength;
    j["train_seed"] = train_seed;
    j["observer_model_id"] = observer_model_id;
    j["hook_point"] = "resid_post";
    j["d"] = w.size();
    j["standardize"] = standardizer.enabled;
    if (standardizer.enabled) {
        write_vec(dir / "mean.bin", standardizer.mean);
        write_vec(dir / "scale.bin", standardizer.scale);
    }
    write_text_file_atomic(dir / "probe.json", j.dump(2));
}

ProbeModel ProbeModel::load(const fs::path& dir) {
    json j = json::parse(read_text_file(dir / "probe.json"));
    ProbeModel m;
    m.w = read_vec(dir / "w.bin");
    if (m.w.size() != j.at("d").get<Eigen::Index>()) {
        throw RuntimeError("probe: stored weight length disagrees with manifest");
    }
    m.b = j.at("b").get<double>();
    m.layer = j.at("layer").get<int>();
    m.l2_strength = j.at("l2_strength").get<double>();
    m.train_seed = j.at("train_seed").get<uint64_t>();
    m.observer_model_id = j.at("observer_model_id").get<std::string>();
    m.standardizer.enabled = j.at("standardize").get<bool>();
    if (m.standardizer.enabled) {
        m.standardizer.mean = read_vec(dir / "mean.bin");
        m.standardizer.scale = read_vec(dir / "scale.bin");
    }
    return m;
}

}  // namespace obsprobe::probe
