#pragma once

#include <string>
#include <utility>
#include <vector>

#include "obsprobe/corpus.hpp"
#include "obsprobe/observer.hpp"
#include "obsprobe/store.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::probe {

using observer::Mat;
using observer::Vec;

/// Per-dimension z-scoring. Fit on training rows only; zero-variance
/// dimensions get scale 0 so they drop out of the score.
struct Standardizer {
    Vec mean;
    Vec scale;
    bool enabled = false;

    static Standardizer fit(const Mat& H, bool enabled);
    Vec apply(const Vec& h) const;
    Mat apply(const Mat& H) const;
};

struct ProbeModel {
    Vec w;
    double b = 0.0;
    int layer = -1;
    double l2_strength = 0.0;
    uint64_t train_seed = 0;
    std::string observer_model_id;
    Standardizer standardizer;

    void save(const fs::path& dir) const;
    static ProbeModel load(const fs::path& dir);
};

/// Mean binary cross-entropy plus l2/2 * ||w||^2 (bias unregularized).
double objective(const Mat& X, const std::vector<int>& y, const Vec& w, double b, double l2);

/// Gradient of `objective` with respect to w (returned) and b (via *gb).
Vec objective_gradient(const Mat& X, const std::vector<int>& y, const Vec& w, double b,
                       double l2, double* gb);

/// Full-batch damped Newton to gradient-norm tolerance 1e-6. The seed only
/// draws the (tiny) random start; the optimum is unique, so any seed lands at
/// the same place within tolerance.
ProbeModel train_probe(const Mat& H, const std::vector<int>& y, double l2_strength,
                       uint64_t seed, bool standardize = true);

double score(const ProbeModel& probe, const Vec& h);
double probability(const ProbeModel& probe, const Vec& h);
/// 1 = hallucinated iff score > 0.
int predict(const ProbeModel& probe, const Vec& h);

/// Positive class = hallucinated (label 1); empty denominator gives 0.0.
double f1_score(const std::vector<int>& y_true, const std::vector<int>& y_pred);

inline const std::vector<double> kL2Grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0};

struct EvalOptions {
    int k = 5;
    int inner_k = 3;
    uint64_t seed = 0;
    bool standardize = true;
    std::vector<double> l2_grid = kL2Grid;  // single entry pins the strength
    int bootstrap_resamples = 1000;
};

struct EvalResult {
    double f1_mean = 0.0;  // pooled over all held-out predictions
    std::vector<double> f1_per_fold;
    double ci_lo = 0.0, ci_hi = 0.0;
    int layer = -1;
    int n_examples = 0;
    double inner_score = 0.0;          // mean inner-validation F1 (selection signal)
    std::vector<double> fold_l2;       // strength chosen inside each outer fold
    std::vector<int> pooled_true, pooled_pred;  // example-level, dataset order
};

/// Rows r^(layer)_{t*} for every example, in dataset order. The capture step
/// records t* in each document's store metadata.
Mat gather_features(const std::vector<corpus::Example>& dataset,
                    const store::ActivationStore& store, int layer);
std::vector<int> labels_of(const std::vector<corpus::Example>& dataset);

/// k-fold cross-validation on an explicit feature matrix.
EvalResult crossval_matrix(const Mat& H, const std::vector<int>& y, int layer_tag,
                           const EvalOptions& opts);

EvalResult crossval(const std::vector<corpus::Example>& dataset,
                    const store::ActivationStore& store, int layer, const EvalOptions& opts);

struct SweepResult {
    std::vector<std::pair<int, EvalResult>> layers;
    int best_layer = -1;  // argmax of inner_score; outer test folds never consulted
};

SweepResult layer_sweep(const std::vector<corpus::Example>& dataset,
                        const store::ActivationStore& store, const std::vector<int>& layers,
                        const EvalOptions& opts);

/// Fit on all of train_ds, evaluate once on test_ds. The stores may be the
/// same object; their observer and capture spec must agree.
EvalResult transfer_eval(const std::vector<corpus::Example>& train_ds,
                         const std::vector<corpus::Example>& test_ds,
                         const store::ActivationStore& train_store,
                         const store::ActivationStore& test_store, int layer,
                         const EvalOptions& opts);

}  // namespace obsprobe::probe
