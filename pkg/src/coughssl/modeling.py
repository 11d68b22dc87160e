"""Model development: TPE per model kind, optional RFECV, aggregation and
threshold selection on a held-out recording split, then a full refit.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ml_core, tpe

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSettings:
    kinds: tuple[str, ...] = (ml_core.LOGISTIC, ml_core.LDA)
    budget: int = 100
    n_folds: int = 5
    val_frac: float = 0.2
    seed: int = 42
    use_smote: bool = True
    smote_k: int = 5
    rfecv: str = "auto"  # "auto" (on overfit) | "always" | "never"
    overfit_gap: float = 0.05
    aggregation: str | None = None  # None: pick by validation AUC


@dataclass
class DevelopmentReport:
    kind_scores: dict = field(default_factory=dict)
    kind: str = ""
    config: dict = field(default_factory=dict)
    cv_auc: float = math.nan
    cv_std: float = math.nan
    train_auc: float = math.nan
    rfecv_applied: bool = False
    rfecv_scores: list = field(default_factory=list)
    aggregation_auc: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)


def _fit(kind: str, params: dict, X, y, settings: ModelSettings, seed: int) -> ml_core.LinearModel:
    if settings.use_smote:
        X, y = ml_core.smote(X, y, k=settings.smote_k, seed=seed)
    return ml_core.fit_model(kind, X, y, params, seed=seed)


def _train_auc(kind, params, X, y, splits, settings) -> float:
    aucs = []
    for f, (tr, _) in enumerate(splits.folds()):
        if np.unique(y[tr]).size < 2:
            continue
        m = _fit(kind, params, X[tr], y[tr], settings, settings.seed + f)
        aucs.append(ml_core.roc_auc(m.decision(X[tr]), y[tr]))
    return float(np.mean(aucs)) if aucs else math.nan


def _search(X, y, splits, settings: ModelSettings, kinds, report: DevelopmentReport):
    best = None
    for kind in kinds:
        config, score, history = tpe.optimize(
            kind, X, y, splits, budget=settings.budget, seed=settings.seed,
            use_smote=settings.use_smote, smote_k=settings.smote_k,
        )
        report.kind_scores[kind] = score
        report.histories[kind] = history
        if best is None or score > best[2]:
            best = (kind, config, score, history.best().std)
    return best


def _holdout_split(groups, y, settings: ModelSettings):
    # one more random recording split; retried until both sides hold both classes
    for attempt in range(50):
        split = ml_core.group_shuffle_split(
            groups, n_folds=1, val_frac=settings.val_frac, seed=settings.seed + 1000 + attempt
        )
        tr, va = next(split.folds())
        if np.unique(y[tr]).size == 2 and np.unique(y[va]).size == 2:
            return tr, va
    return None


def develop_model(
    X,
    y,
    groups,
    names: Sequence[str] = (),
    settings: ModelSettings = ModelSettings(),
    return_report: bool = False,
):
    """Run the full development procedure and return a :class:`TrainedModel`.

    ``y`` is the per-cough label (constant within a recording) and
    ``groups`` the recording id of each cough.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    groups = np.asarray(groups)
    if np.unique(y).size < 2:
        raise ValueError("training labels cover only one class")
    names = tuple(names) if len(names) else tuple(f"f{i}" for i in range(X.shape[1]))
    report = DevelopmentReport()

    scaler = ml_core.standardize_fit(X)
    Xs = ml_core.standardize_apply(scaler, X)
    splits = ml_core.group_shuffle_split(groups, settings.n_folds, settings.val_frac, settings.seed)

    kind, config, score, std = _search(Xs, y, splits, settings, settings.kinds, report)
    if not math.isfinite(score):
        raise ValueError("every hyperparameter trial failed")
    params = tpe.model_params(kind, config)
    mask = np.ones(X.shape[1], dtype=bool)
    train_auc = _train_auc(kind, params, Xs, y, splits, settings)
    overfit = train_auc - score > settings.overfit_gap
    if X.shape[1] > 1 and (settings.rfecv == "always" or (settings.rfecv == "auto" and overfit)):
        fit_fn = lambda A, b: _fit(kind, params, A, b, settings, settings.seed)  # noqa: E731
        mask, scores = ml_core.rfecv(fit_fn, Xs, y, splits, return_scores=True)
        report.rfecv_applied = True
        report.rfecv_scores = scores
        _, config, score, std = _search(Xs[:, mask], y, splits, settings, (kind,), report)
        params = tpe.model_params(kind, config)
        train_auc = _train_auc(kind, params, Xs[:, mask], y, splits, settings)
    Xm = Xs[:, mask]
    report.kind, report.config = kind, config
    report.cv_auc, report.cv_std, report.train_auc = score, std, train_auc

    modes = [settings.aggregation] if settings.aggregation else [ml_core.LOGIT_MEAN, ml_core.LOGIT_MEDIAN]
    aggregation, threshold = modes[0], 0.0
    split = _holdout_split(groups, y, settings)
    if split is None:
        warnings.warn("no two-class validation split found; threshold left at 0", stacklevel=2)
    else:
        tr, va = split
        m = _fit(kind, params, Xm[tr], y[tr], settings, settings.seed)
        ps = ml_core.predict_proba(m, Xm[va])
        rec_label = dict(zip(groups[va], y[va]))
        best_auc = -math.inf
        for mode in modes:
            ids, scores = ml_core.aggregate_by_group(ps, groups[va], mode)
            labels = np.array([rec_label[i] for i in ids])
            auc = ml_core.roc_auc(scores, labels)
            report.aggregation_auc[mode] = auc
            if auc > best_auc:
                best_auc = auc
                aggregation = mode
                threshold = ml_core.pick_threshold(ml_core.roc_curve(scores, labels))

    final = _fit(kind, params, Xm, y, settings, settings.seed)
    info = {
        "cv_auc": score,
        "cv_auc_std": std,
        "train_auc": train_auc,
        "rfecv_applied": report.rfecv_applied,
        "kind_scores": report.kind_scores,
        "aggregation_auc": report.aggregation_auc,
        "n_coughs": int(y.size),
        "n_recordings": int(np.unique(groups).size),
    }
    model = ml_core.TrainedModel(
        scaler, final, mask, float(threshold), aggregation, names,
        ml_core.data_fingerprint(X, y, groups), info,
    )
    log.info("developed %s model, CV AUC %.3f, %d/%d features", kind, score, mask.sum(), mask.size)
    return (model, report) if return_report else model
