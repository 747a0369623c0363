"""Pairwise flow correlation: pair features, a trained scorer, and AUC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.ensemble import HistGradientBoostingClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedGroupKFold, train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .features import SUMMARY_NAMES
from .metrics import AttackMetrics


class DegenerateLabels(ValueError):
    pass


def compute_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average 1-based ranks over tie groups
    ranks = np.empty(len(s))
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


MAX_LAG = 2  # windows


def _best_corr(x: np.ndarray, y: np.ndarray) -> float:
    # either side may trail by a few windows, depending on the direction of the data
    best = 0.0
    for lag in range(-MAX_LAG, MAX_LAG + 1):
        a, b = (x[:len(x) - lag], y[lag:]) if lag >= 0 else (x[-lag:], y[:len(y) + lag])
        if a.std() > 0 and b.std() > 0:
            best = max(best, float(np.corrcoef(a, b)[0, 1]))
    return best


def pair_features(entry: np.ndarray, exit_: np.ndarray) -> np.ndarray:
    """Element-wise difference and product of log features, plus window-series correlations.

    Both vectors come from :func:`extract_features` with the same window
    layout (in-windows, out-windows, summary).
    """
    entry = np.asarray(entry, dtype=np.float64)
    exit_ = np.asarray(exit_, dtype=np.float64)
    a, b = np.log1p(entry), np.log1p(exit_)
    n = (len(entry) - len(SUMMARY_NAMES)) // 2
    corr = [_best_corr(entry[:n], exit_[:n]), _best_corr(entry[n:2 * n], exit_[n:2 * n])]
    return np.concatenate([np.abs(a - b), a * b, corr])


@dataclass
class Correlator:
    model: object
    metrics: AttackMetrics
    test_scores: np.ndarray
    test_labels: np.ndarray

    def score(self, entry: np.ndarray, exit_: np.ndarray) -> float:
        x = pair_features(entry, exit_)[None, :]
        return float(self.model.predict_proba(x)[0, 1])


def _model(algorithm: str, seed: int):
    if algorithm == "gbt":
        return HistGradientBoostingClassifier(max_iter=200, learning_rate=0.05, random_state=seed)
    if algorithm == "logistic":
        return make_pipeline(StandardScaler(), LogisticRegression(C=1.0, max_iter=2000))
    raise ValueError(f"unknown algorithm {algorithm!r}")


def train_correlator(pairs: Sequence[tuple[np.ndarray, np.ndarray, int]], seed: int = 0,
                     algorithm: str = "gbt", test_size: float = 0.3,
                     config: dict | None = None, groups: Sequence[int] | None = None,
                     folds: int = 5) -> Correlator:
    """Fit a matched/unmatched scorer and measure it on pairs it was not trained on.

    ``algorithm`` is ``"gbt"`` (histogram gradient-boosted trees) or
    ``"logistic"`` (L2-regularised logistic regression).

    Without ``groups``: a stratified split, metrics on the held-out
    ``test_size`` share. With ``groups`` (e.g. the entry flow of each pair):
    stratified group k-fold, so every pair is scored out of fold and no group
    is ever on both sides; the returned model is then refit on all pairs.
    """
    if not pairs:
        raise DegenerateLabels("no pairs")
    x = np.stack([pair_features(e, f) for e, f, _ in pairs])
    y = np.array([int(lab) for _, _, lab in pairs])
    if y.min() == y.max():
        raise DegenerateLabels("training pairs contain a single class")
    _model(algorithm, seed)  # reject unknown algorithms before any fitting
    if groups is None:
        x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=test_size, stratify=y,
                                                  random_state=seed)
        model = _model(algorithm, seed).fit(x_tr, y_tr)
        scores = model.predict_proba(x_te)[:, 1]
    else:
        cv = StratifiedGroupKFold(n_splits=folds, shuffle=True, random_state=seed)
        scores = np.empty(len(y))
        for tr, te in cv.split(x, y, groups=np.asarray(groups)):
            if y[tr].min() == y[tr].max():
                raise DegenerateLabels("a training fold holds a single class")
            scores[te] = _model(algorithm, seed).fit(x[tr], y[tr]).predict_proba(x[te])[:, 1]
        model = _model(algorithm, seed).fit(x, y)
        y_te = y
    pred = scores >= 0.5
    neg = y_te == 0
    metrics = AttackMetrics(
        auc=compute_auc(scores, y_te),
        accuracy=float(np.mean(pred == y_te.astype(bool))),
        fpr=float(np.mean(pred[neg])) if neg.any() else 0.0,
        n_positive=int(y_te.sum()), n_negative=int(neg.sum()),
        config=dict(config or {}, algorithm=algorithm, seed=seed),
    )
    return Correlator(model, metrics, scores, y_te)
