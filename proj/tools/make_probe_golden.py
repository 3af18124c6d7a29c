#!/usr/bin/env python3
"""Freeze logistic-regression reference fits into tests/data/probe_cases.json.

sklearn's LogisticRegression minimizes sum BCE + ||w||^2 / (2C) while ours
minimizes mean BCE + l2 * ||w||^2 / 2, so C = 1 / (n * l2). The intercept is
unregularized in both.
"""

import json
import pathlib

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import f1_score

OUT = pathlib.Path(__file__).resolve().parent.parent / "tests" / "data" / "probe_cases.json"


def fit_case(rng, n, d, l2, sep, seed):
    w_true = rng.standard_normal(d)
    w_true /= np.linalg.norm(w_true)
    X = rng.standard_normal((n, d))
    y = (X @ w_true + sep * rng.standard_normal(n) > 0.15).astype(int)
    if y.min() == y.max():  # force both classes
        y[0] = 1 - y[0]
    C = 1.0 / (n * l2)
    clf = LogisticRegression(C=C, penalty="l2", solver="lbfgs", tol=1e-12, max_iter=20000)
    clf.fit(X, y)
    return {
        "seed": seed,
        "n": n,
        "d": d,
        "l2": l2,
        "X": [[float(v) for v in row] for row in X],
        "y": [int(v) for v in y],
        "w": [float(v) for v in clf.coef_[0]],
        "b": float(clf.intercept_[0]),
    }


def main():
    rng = np.random.default_rng(20250825)
    cases = {
        "fits": [
            fit_case(rng, 60, 4, 1e-2, 0.8, 1),
            fit_case(rng, 120, 8, 1e-1, 1.2, 2),
            fit_case(rng, 40, 3, 1.0, 0.5, 3),
        ],
        "f1": [],
    }
    for i in range(8):
        m = int(rng.integers(4, 40))
        yt = rng.integers(0, 2, m)
        yp = rng.integers(0, 2, m)
        cases["f1"].append(
            {
                "y_true": [int(v) for v in yt],
                "y_pred": [int(v) for v in yp],
                "f1": float(f1_score(yt, yp, zero_division=0)),
            }
        )
    # degenerate pairs: no predicted or true positives
    cases["f1"].append({"y_true": [0, 0, 0], "y_pred": [0, 0, 0], "f1": 0.0})
    cases["f1"].append({"y_true": [1, 0, 1], "y_pred": [0, 0, 0],
                        "f1": float(f1_score([1, 0, 1], [0, 0, 0], zero_division=0))})
    OUT.write_text(json.dumps(cases))
    print(f"wrote {OUT} ({OUT.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
