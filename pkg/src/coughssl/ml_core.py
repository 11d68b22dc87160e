"""Classical ML building blocks: scaling, linear classifiers, resampling,
grouped validation splits, ROC analysis and agreement/separability metrics.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit
from scipy.stats import rankdata

PROB_CLIP = 1e-12
LOGISTIC = "logistic_regression"
LDA = "lda"
LOGIT_MEAN = "logit_mean"
LOGIT_MEDIAN = "logit_median"
MODEL_FORMAT = "coughssl.trained_model"
MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    zero_variance: np.ndarray  # bool flag per feature; their std is stored as 1


def standardize_fit(X) -> Standardizer:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty 2-D matrix")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    flat = ~(stds > 1e-12 * np.maximum(1.0, np.abs(means)))
    if flat.any():
        warnings.warn(f"{int(flat.sum())} zero-variance feature(s); scaled by 1", stacklevel=2)
    stds = np.where(flat, 1.0, stds)
    return Standardizer(means, stds, flat)


def standardize_apply(s: Standardizer, X) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - s.means) / s.stds


# ---------------------------------------------------------------- models


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float
    kind: str
    hyperparams: dict = field(default_factory=dict)

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    return X, y.astype(np.float64)


def class_sample_weights(y, class_weight: str | None) -> np.ndarray:
    y = np.asarray(y)
    if class_weight in (None, "none"):
        return np.ones(y.shape[0])
    if class_weight != "balanced":
        raise ValueError(f"unknown class_weight {class_weight!r}")
    n = y.shape[0]
    w = np.empty(n)
    for c in (0, 1):
        nc = np.count_nonzero(y == c)
        w[y == c] = n / (2.0 * nc) if nc else 0.0
    return w


def logistic_objective(params, X, y, C: float, sample_weight=None) -> float:
    """Weighted negative log-likelihood plus ||w||^2 / (2C); params = [w..., b]."""
    X = np.asarray(X, dtype=np.float64)
    w, b = params[:-1], params[-1]
    sw = np.ones(X.shape[0]) if sample_weight is None else sample_weight
    z = X @ w + b
    nll = np.sum(sw * (np.logaddexp(0.0, z) - y * z))
    return float(nll + 0.5 * np.dot(w, w) / C)


def logistic_gradient(params, X, y, C: float, sample_weight=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    w, b = params[:-1], params[-1]
    sw = np.ones(X.shape[0]) if sample_weight is None else sample_weight
    r = sw * (expit(X @ w + b) - y)
    return np.concatenate((X.T @ r + w / C, [r.sum()]))


def fit_logistic(
    X,
    y,
    C: float = 1.0,
    class_weight: str | None = None,
    seed: int = 0,
    max_iter: int = 1000,
    tol: float = 1e-6,
) -> LinearModel:
    """L2-regularised logistic regression by damped Newton (IRLS).

    The bias is not penalised. Stops when the gradient max-norm falls
    below ``tol``; after ``max_iter`` steps warns and returns the best
    iterate. ``seed`` is accepted for interface symmetry; the solver is
    deterministic.
    """
    X, y = _check_xy(X, y)
    if not C > 0:
        raise ValueError("C must be positive")
    n, d = X.shape
    sw = class_sample_weights(y, class_weight)
    A = np.hstack((X, np.ones((n, 1))))
    ridge = np.full(d + 1, 1.0 / C)
    ridge[-1] = 1e-10  # keeps the Hessian invertible for one-class batches

    theta = np.zeros(d + 1)
    f = logistic_objective(theta, X, y, C, sw)
    best, best_gnorm = theta, math.inf
    converged = False
    for _ in range(max_iter):
        g = logistic_gradient(theta, X, y, C, sw)
        gnorm = float(np.max(np.abs(g)))
        if gnorm < best_gnorm:
            best, best_gnorm = theta, gnorm
        if gnorm < tol:
            converged = True
            break
        p = expit(A @ theta)
        h = sw * p * (1.0 - p)
        H = (A * h[:, None]).T @ A + np.diag(ridge)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        slope = float(g @ step)
        while t > 1e-10:
            cand = theta - t * step
            fc = logistic_objective(cand, X, y, C, sw)
            if fc <= f - 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no decrease possible at machine precision
            converged = gnorm < 1e3 * tol
            break
        theta, f = cand, fc
    if not converged:
        warnings.warn(
            f"logistic regression did not converge (grad max-norm {best_gnorm:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return LinearModel(
        best[:-1].copy(),
        float(best[-1]),
        LOGISTIC,
        {"C": float(C), "class_weight": class_weight or "none", "solver": "newton-irls"},
    )


def fit_lda(X, y, ridge: float = 1e-6) -> LinearModel:
    """Two-class LDA with a shared covariance (plus ``ridge`` on the diagonal)."""
    X, y = _check_xy(X, y)
    pos, neg = X[y == 1], X[y == 0]
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ValueError("LDA needs samples from both classes")
    mu1, mu0 = pos.mean(axis=0), neg.mean(axis=0)
    n, d = X.shape
    centred = np.vstack((pos - mu1, neg - mu0))
    cov = centred.T @ centred / max(n - 2, 1) + ridge * np.eye(d)
    try:
        w = np.linalg.solve(cov, mu1 - mu0)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(cov, mu1 - mu0, rcond=None)[0]
    prior = math.log(pos.shape[0] / neg.shape[0])
    b = float(-0.5 * (mu1 + mu0) @ w + prior)
    return LinearModel(w, b, LDA, {"ridge": float(ridge)})


def fit_model(kind: str, X, y, params: dict, seed: int = 0) -> LinearModel:
    if kind == LOGISTIC:
        return fit_logistic(X, y, C=params["C"], class_weight=params.get("class_weight"), seed=seed)
    if kind == LDA:
        return fit_lda(X, y, ridge=params.get("ridge", 1e-6))
    raise ValueError(f"unknown model kind {kind!r}")


def sigmoid(z):
    return expit(z)


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    return np.log(p) - np.log1p(-p)


def predict_proba(model: LinearModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.clip(expit(model.decision(X)), PROB_CLIP, 1.0 - PROB_CLIP)


# ---------------------------------------------------------------- aggregation


def _logits(ps) -> np.ndarray:
    ps = np.asarray(ps, dtype=np.float64).ravel()
    if ps.size == 0:
        raise ValueError("cannot aggregate an empty probability list")
    return logit(ps)


def aggregate_logit_mean(ps) -> float:
    return float(np.mean(_logits(ps)))


def aggregate_logit_median(ps) -> float:
    return float(np.median(_logits(ps)))


AGGREGATORS = {LOGIT_MEAN: aggregate_logit_mean, LOGIT_MEDIAN: aggregate_logit_median}


def aggregate_by_group(ps, groups, mode: str = LOGIT_MEAN) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate per-cough probabilities into one logit score per group.

    Returns (group ids in first-appearance order, scores).
    """
    ps = np.asarray(ps, dtype=np.float64)
    groups = np.asarray(groups)
    ids, first, inv = np.unique(groups, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    lg = logit(ps)
    if mode == LOGIT_MEAN:
        sums = np.bincount(inv, weights=lg, minlength=ids.size)
        scores = sums / np.bincount(inv, minlength=ids.size)
    elif mode == LOGIT_MEDIAN:
        scores = np.array([np.median(lg[inv == k]) for k in range(ids.size)])
    else:
        raise ValueError(f"unknown aggregation {mode!r}")
    return ids[order], scores[order]


# ---------------------------------------------------------------- SMOTE


def smote(X, y, k: int = 5, seed: int = 0, return_parents: bool = False):
    """Oversample the minority class until both classes are equally large.

    Each synthetic row is ``x_i + u * (x_j - x_i)`` with ``u ~ U[0, 1)``,
    ``x_i`` a random minority row and ``x_j`` one of its ``k`` nearest
    minority neighbours. Originals come first, unchanged. With
    ``return_parents`` the (i, j) input-row indices of each synthetic row
    are returned as a third element.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = int(np.count_nonzero(y == 0))
    parents = np.empty((0, 2), dtype=np.int64)
    if n_pos == n_neg:
        return (X, y, parents) if return_parents else (X, y)
    minority = 1 if n_pos < n_neg else 0
    idx = np.flatnonzero(y == minority)
    if idx.size < 2:
        raise ValueError(f"SMOTE needs >= 2 minority samples, got {idx.size}")
    if k > idx.size - 1:
        warnings.warn(f"SMOTE k={k} clipped to {idx.size - 1}", stacklevel=2)
        k = idx.size - 1
    need = abs(n_pos - n_neg)
    rng = np.random.default_rng(seed)
    P = X[idx]
    _, nn = cKDTree(P).query(P, k=k + 1)
    nn = np.asarray(nn).reshape(idx.size, k + 1)
    # drop self; duplicates may put self at a later position, so filter by id
    neigh = np.empty((idx.size, k), dtype=np.int64)
    for r in range(idx.size):
        row = [c for c in nn[r] if c != r][:k]
        neigh[r] = row
    base = rng.integers(0, idx.size, size=need)
    pick = neigh[base, rng.integers(0, k, size=need)]
    gap = rng.random(need)[:, None]
    synth = P[base] + gap * (P[pick] - P[base])
    Xo = np.vstack((X, synth))
    yo = np.concatenate((y, np.full(need, minority, dtype=y.dtype)))
    if return_parents:
        return Xo, yo, np.column_stack((idx[base], idx[pick]))
    return Xo, yo


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class CvSplit:
    """Per fold: the recording ids held out for validation."""

    groups: np.ndarray  # group id per row
    val_groups: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.val_groups)

    def folds(self):
        """Yield (train_rows, val_rows) index arrays."""
        for vg in self.val_groups:
            val = np.isin(self.groups, vg)
            yield np.flatnonzero(~val), np.flatnonzero(val)


def group_shuffle_split(recording_ids, n_folds: int = 5, val_frac: float = 0.2, seed: int = 42) -> CvSplit:
    """Independent random group hold-outs, ``ceil(val_frac * n_groups)`` per fold."""
    groups = np.asarray(recording_ids)
    uniq = np.unique(groups)
    if uniq.size < max(n_folds, 2):
        raise ValueError(f"need at least {max(n_folds, 2)} recordings, got {uniq.size}")
    if not 0 < val_frac < 1:
        raise ValueError("val_frac must be in (0, 1)")
    n_val = min(uniq.size - 1, max(1, math.ceil(val_frac * uniq.size - 1e-9)))
    rng = np.random.default_rng(seed)
    folds = tuple(np.sort(rng.permutation(uniq)[:n_val]) for _ in range(n_folds))
    return CvSplit(groups, folds)


# ---------------------------------------------------------------- ROC


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # predict positive when score >= threshold


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).ravel().astype(int)
    if s.shape != l.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = np.count_nonzero(l == 1)
    if n_pos == 0 or n_pos == l.size:
        raise ValueError("ROC analysis needs both classes present")
    return s, l


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties 1/2)."""
    s, l = _check_binary(scores, labels)
    r = rankdata(s)
    n_pos = np.count_nonzero(l == 1)
    n_neg = l.size - n_pos
    return float((r[l == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    s, l = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, l = s[order], l[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    cut = np.concatenate((distinct, [s.size - 1]))
    tps = np.cumsum(l)[cut]
    fps = (cut + 1) - tps
    n_pos, n_neg = tps[-1], fps[-1]
    tpr = np.concatenate(([0.0], tps / n_pos))
    fpr = np.concatenate(([0.0], fps / n_neg))
    thr = np.concatenate(([np.inf], s[cut]))
    return RocCurve(fpr, tpr, thr)


def trapezoid_auc(curve: RocCurve) -> float:
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def pick_threshold(curve: RocCurve) -> float:
    """Threshold maximising sqrt(TPR * (1 - FPR)); ties go to the lower FPR."""
    fpr, tpr, thr = curve.fpr, curve.tpr, curve.thresholds
    finite = np.isfinite(thr)
    if finite.any():
        fpr, tpr, thr = fpr[finite], tpr[finite], thr[finite]
    g = np.sqrt(tpr * (1.0 - fpr))
    best = np.flatnonzero(g >= g.max() - 1e-15)
    i = best[np.argmin(fpr[best])]
    return float(thr[i])


# ---------------------------------------------------------------- RFECV


def cv_auc(fit_fn: Callable, X, y, splits: CvSplit) -> tuple[float, float]:
    """Mean and std of per-fold validation AUC; single-class folds are skipped."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    aucs = []
    for tr, va in splits.folds():
        if np.unique(y[va]).size < 2 or np.unique(y[tr]).size < 2:
            continue
        m = fit_fn(X[tr], y[tr])
        aucs.append(roc_auc(m.decision(X[va]), y[va]))
    if not aucs:
        return -math.inf, 0.0
    return float(np.mean(aucs)), float(np.std(aucs))


def rfecv(fit_fn: Callable, X, y, splits: CvSplit, return_scores: bool = False):
    """Recursive elimination of the smallest-|weight| feature, scored by CV AUC.

    Returns the smallest mask whose mean CV AUC is within one standard
    error of the best count's mean (scores that close count as ties).
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    if d < 2:
        raise ValueError("RFECV needs at least 2 features")
    mask = np.ones(d, dtype=bool)
    history: list[tuple[np.ndarray, float, float]] = []
    while True:
        cols = np.flatnonzero(mask)
        score, sd = cv_auc(fit_fn, X[:, cols], y, splits)
        history.append((mask.copy(), score, sd))
        if cols.size == 1:
            break
        w = np.abs(fit_fn(X[:, cols], y).weights)
        # among equal weights drop the last column, keeping earlier ones
        drop = cols[::-1][np.argmin(w[::-1])]
        mask[drop] = False
    _, best, best_sd = max(history, key=lambda h: (h[1], -h[0].sum()))
    tol = best_sd / math.sqrt(max(len(splits), 1)) + 1e-12
    chosen = min((m for m, s, _ in history if s >= best - tol), key=lambda m: m.sum())
    if return_scores:
        return chosen, [(int(m.sum()), s) for m, s, _ in history]
    return chosen


# ---------------------------------------------------------------- SHAP


def linear_shap(model: LinearModel, x, background_means) -> np.ndarray:
    """Exact SHAP values of a linear score: w_i * (x_i - mean_i)."""
    x = np.asarray(x, dtype=np.float64)
    return model.weights * (x - np.asarray(background_means, dtype=np.float64))


def shap_ranking(model: LinearModel, X, names: Sequence[str]) -> list[tuple[str, float]]:
    """Features ordered by mean |SHAP| over the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    contrib = linear_shap(model, X, X.mean(axis=0))
    imp = np.abs(contrib).mean(axis=0)
    order = np.argsort(-imp, kind="stable")
    return [(names[i], float(imp[i])) for i in order]


# ---------------------------------------------------------------- agreement


def fleiss_kappa(counts) -> float:
    """Fleiss' kappa from an items x categories matrix of rating counts.

    When every rating falls in a single category (chance agreement 1) the
    statistic is undefined; 1.0 is returned since agreement is perfect.
    """
    M = np.asarray(counts, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] == 0:
        raise ValueError("need a non-empty items x categories matrix")
    n_per = M.sum(axis=1)
    n = n_per[0]
    if not np.all(n_per == n):
        raise ValueError("every item must be rated by the same number of raters")
    if n < 2:
        raise ValueError("need at least 2 raters per item")
    N = M.shape[0]
    P_i = (np.sum(M * M, axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    p_j = M.sum(axis=0) / (N * n)
    P_e = float(np.sum(p_j * p_j))
    if math.isclose(P_e, 1.0):
        return 1.0
    return float((P_bar - P_e) / (1.0 - P_e))


# ---------------------------------------------------------------- separability


def jensen_shannon(samples_a, samples_b, n_bins: int = 50, eps: float = 1e-10) -> float:
    """Base-2 JS divergence of two samples' histograms over their pooled range."""
    a = np.asarray(samples_a, dtype=np.float64).ravel()
    b = np.asarray(samples_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    pa = np.histogram(a, bins=edges)[0] / a.size + eps
    pb = np.histogram(b, bins=edges)[0] / b.size + eps
    pa /= pa.sum()
    pb /= pb.sum()
    m = 0.5 * (pa + pb)
    kl_a = np.sum(pa * np.log2(pa / m))
    kl_b = np.sum(pb * np.log2(pb / m))
    return float(min(1.0, max(0.0, 0.5 * kl_a + 0.5 * kl_b)))


def mean_js_divergence(features_a, features_b, n_bins: int = 50) -> float:
    A = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError("feature counts differ")
    return float(np.mean([jensen_shannon(A[:, j], B[:, j], n_bins) for j in range(A.shape[1])]))


# ---------------------------------------------------------------- trained model


@dataclass(frozen=True)
class TrainedModel:
    standardizer: Standardizer
    model: LinearModel
    feature_mask: np.ndarray
    threshold: float
    aggregation: str
    feature_names: tuple[str, ...] = ()
    fingerprint: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if not np.any(self.feature_mask):
            raise ValueError("feature mask selects no feature")
        if self.aggregation not in AGGREGATORS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @property
    def selected_names(self) -> list[str]:
        return [n for n, m in zip(self.feature_names, self.feature_mask) if m]

    def transform(self, X) -> np.ndarray:
        return standardize_apply(self.standardizer, X)[:, self.feature_mask]

    def cough_proba(self, X) -> np.ndarray:
        return predict_proba(self.model, self.transform(X))

    def recording_scores(self, X, groups, mode: str | None = None):
        return aggregate_by_group(self.cough_proba(X), groups, mode or self.aggregation)

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "kind": self.model.kind,
            "hyperparams": self.model.hyperparams,
            "feature_names": list(self.feature_names),
            "feature_mask": [bool(v) for v in self.feature_mask],
            "standardizer": {
                "means": self.standardizer.means.tolist(),
                "stds": self.standardizer.stds.tolist(),
                "zero_variance": [bool(v) for v in self.standardizer.zero_variance],
            },
            "weights": self.model.weights.tolist(),
            "bias": self.model.bias,
            "threshold": self.threshold,
            "aggregation": self.aggregation,
            "training_fingerprint": self.fingerprint,
            "info": self.info,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> TrainedModel:
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError("not a trained-model document")
        if doc.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        st = doc["standardizer"]
        return cls(
            Standardizer(
                np.array(st["means"], dtype=float),
                np.array(st["stds"], dtype=float),
                np.array(st["zero_variance"], dtype=bool),
            ),
            LinearModel(np.array(doc["weights"], dtype=float), float(doc["bias"]), doc["kind"], doc["hyperparams"]),
            np.array(doc["feature_mask"], dtype=bool),
            float(doc["threshold"]),
            doc["aggregation"],
            tuple(doc["feature_names"]),
            doc["training_fingerprint"],
            doc.get("info", {}),
        )


def data_fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.asarray(a)
        if a.dtype == object:
            a = a.astype(str)
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
