"""Tree-structured Parzen Estimator search over model hyperparameters."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.stats import truncnorm

from . import ml_core

GAMMA = 0.25
N_CANDIDATES = 24
N_STARTUP = 10
FAILED = -math.inf


@dataclass(frozen=True)
class Dim:
    name: str
    kind: str  # "log_uniform" | "uniform" | "categorical"
    lo: float = 0.0
    hi: float = 1.0
    options: tuple = ()

    def __post_init__(self):
        if self.kind in ("log_uniform", "uniform"):
            if not self.lo < self.hi:
                raise ValueError(f"{self.name}: need lo < hi")
            if self.kind == "log_uniform" and self.lo <= 0:
                raise ValueError(f"{self.name}: log-uniform bounds must be positive")
        elif self.kind == "categorical":
            if not self.options:
                raise ValueError(f"{self.name}: categorical needs options")
        else:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")

    # internal coordinates: log for log-uniform, identity otherwise
    def to_internal(self, v: float) -> float:
        return math.log(v) if self.kind == "log_uniform" else float(v)

    def from_internal(self, u: float) -> float:
        v = math.exp(u) if self.kind == "log_uniform" else float(u)
        return min(max(v, self.lo), self.hi)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.to_internal(self.lo), self.to_internal(self.hi)

    def contains(self, v) -> bool:
        if self.kind == "categorical":
            return v in self.options
        return self.lo <= v <= self.hi


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...]

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")

    def contains(self, config: dict) -> bool:
        return set(config) == {d.name for d in self.dims} and all(d.contains(config[d.name]) for d in self.dims)

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for d in self.dims:
            if d.kind == "categorical":
                out[d.name] = d.options[int(rng.integers(len(d.options)))]
            else:
                lo, hi = d.bounds
                out[d.name] = d.from_internal(rng.uniform(lo, hi))
        return out


SPACES = {
    ml_core.LOGISTIC: SearchSpace(
        (
            Dim("C", "log_uniform", 1e-3, 1e2),
            Dim("class_weight", "categorical", options=("none", "balanced")),
        )
    ),
    ml_core.LDA: SearchSpace((Dim("ridge", "log_uniform", 1e-8, 1e-2),)),
}


@dataclass(frozen=True)
class Trial:
    config: dict
    objective: float
    std: float = 0.0


@dataclass
class TrialHistory:
    trials: list[Trial] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trials)

    def best(self) -> Trial:
        if not self.trials:
            raise ValueError("empty history")
        # first occurrence wins ties
        return max(self.trials, key=lambda t: t.objective)

    def best_so_far(self) -> list[float]:
        return list(np.maximum.accumulate([t.objective for t in self.trials]))

    def to_csv(self, path: str | Path, space: SearchSpace) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", *[d.name for d in space.dims], "mean_auc", "std_auc"])
            for i, t in enumerate(self.trials):
                w.writerow([i, *[t.config[d.name] for d in space.dims], repr(t.objective), repr(t.std)])


class _Parzen:
    """1-D mixture of truncated Gaussians plus a uniform prior component."""

    def __init__(self, points: np.ndarray, lo: float, hi: float):
        self.lo, self.hi = lo, hi
        self.points = points
        width = hi - lo
        n = points.size
        # Scott's rule, floored so a tight cluster keeps exploring nearby
        sigma = 1.06 * float(np.std(points, ddof=1)) * n ** (-1.0 / 5.0) if n > 1 else width
        self.sigma = float(np.clip(sigma, width / (1.0 + n), width))
        self.n = n

    def pdf(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        dens = np.full(u.shape, 1.0 / (self.hi - self.lo))  # prior
        if self.n:
            a = (self.lo - self.points) / self.sigma
            b = (self.hi - self.points) / self.sigma
            comp = truncnorm.pdf(
                (u[..., None] - self.points) / self.sigma, a, b
            ) / self.sigma
            dens = dens + comp.sum(axis=-1)
        return dens / (self.n + 1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        which = rng.integers(0, self.n + 1, size=size)
        out = rng.uniform(self.lo, self.hi, size=size)
        for k in range(self.n):
            sel = which == k
            if sel.any():
                c = self.points[k]
                a, b = (self.lo - c) / self.sigma, (self.hi - c) / self.sigma
                out[sel] = truncnorm.rvs(a, b, loc=c, scale=self.sigma, size=int(sel.sum()), random_state=rng)
        return out


def _categorical_probs(values: Sequence, options: tuple) -> np.ndarray:
    counts = np.array([sum(1 for v in values if v == o) for o in options], dtype=float)
    return (counts + 1.0) / (counts.sum() + len(options))


def tpe_suggest(
    history: TrialHistory | Sequence[Trial],
    space: SearchSpace,
    gamma: float = GAMMA,
    n_candidates: int = N_CANDIDATES,
    seed: int | np.random.Generator = 0,
    n_startup: int = N_STARTUP,
) -> dict:
    """Propose the next configuration.

    Below ``n_startup`` trials this is a uniform draw. Afterwards the trials
    are split at the ``gamma`` quantile of the objective into good and bad
    sets, per-dimension densities l (good) and g (bad) are fitted, and the
    candidate drawn from l with the largest l/g is returned.
    """
    if not isinstance(space, SearchSpace) or not space.dims:
        raise ValueError("invalid search space")
    trials = list(history.trials if isinstance(history, TrialHistory) else history)
    rng = np.random.default_rng(seed)
    if len(trials) < n_startup:
        return space.sample(rng)

    ranked = sorted(trials, key=lambda t: -t.objective if math.isfinite(t.objective) else math.inf)
    n_good = max(1, math.ceil(gamma * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]

    cands = [dict() for _ in range(n_candidates)]
    score = np.zeros(n_candidates)
    for d in space.dims:
        gv = [t.config[d.name] for t in good]
        bv = [t.config[d.name] for t in bad]
        if d.kind == "categorical":
            pl = _categorical_probs(gv, d.options)
            pg = _categorical_probs(bv, d.options)
            pick = rng.choice(len(d.options), size=n_candidates, p=pl)
            for c, k in zip(cands, pick):
                c[d.name] = d.options[k]
            score += np.log(pl[pick]) - np.log(pg[pick])
        else:
            lo, hi = d.bounds
            l = _Parzen(np.array([d.to_internal(v) for v in gv]), lo, hi)
            g = _Parzen(np.array([d.to_internal(v) for v in bv]), lo, hi)
            u = l.sample(rng, n_candidates)
            for c, ui in zip(cands, u):
                c[d.name] = d.from_internal(ui)
            score += np.log(l.pdf(u)) - np.log(g.pdf(u))
    return cands[int(np.argmax(score))]


def tpe_search(
    objective: Callable[[dict], tuple[float, float] | float],
    space: SearchSpace,
    budget: int,
    seed: int = 0,
    **tpe_kwargs: Any,
) -> TrialHistory:
    """Sequential TPE loop; failing objectives are recorded as -inf."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    history = TrialHistory()
    for i in range(budget):
        config = tpe_suggest(history, space, seed=np.random.default_rng([seed, i]), **tpe_kwargs)
        try:
            res = objective(config)
            mean, std = res if isinstance(res, tuple) else (res, 0.0)
            if not math.isfinite(mean):
                mean, std = FAILED, 0.0
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            mean, std = FAILED, 0.0
        history.trials.append(Trial(config, float(mean), float(std)))
    return history


def random_search(objective: Callable[[dict], float], space: SearchSpace, budget: int, seed: int = 0) -> TrialHistory:
    """Uniform sampling baseline with the same bookkeeping as :func:`tpe_search`."""
    return tpe_search(objective, space, budget, seed=seed, n_startup=budget + 1)


def model_params(kind: str, config: dict) -> dict:
    params = dict(config)
    if kind == ml_core.LOGISTIC and params.get("class_weight") == "none":
        params["class_weight"] = None
    return params


def make_cv_objective(
    kind: str,
    X,
    y,
    splits: ml_core.CvSplit,
    use_smote: bool = True,
    smote_k: int = 5,
    seed: int = 0,
    audit: list | None = None,
) -> Callable[[dict], tuple[float, float]]:
    """Objective = mean validation AUC over the folds.

    SMOTE is applied to each fold's training rows only. When ``audit`` is
    a list, one ``(fold, train_rows, parent_rows)`` tuple per fold is
    appended, with ``parent_rows`` the original-row indices every
    synthetic sample was interpolated from.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)

    def objective(config: dict) -> tuple[float, float]:
        params = model_params(kind, config)
        aucs = []
        for f, (tr, va) in enumerate(splits.folds()):
            ytr, yva = y[tr], y[va]
            if np.unique(ytr).size < 2 or np.unique(yva).size < 2:
                continue
            Xtr = X[tr]
            if use_smote:
                Xtr, ytr, parents = ml_core.smote(Xtr, ytr, k=smote_k, seed=seed + f, return_parents=True)
                if audit is not None:
                    audit.append((f, tr, tr[parents.ravel()]))
            m = ml_core.fit_model(kind, Xtr, ytr, params, seed=seed)
            aucs.append(ml_core.roc_auc(m.decision(X[va]), yva))
        if not aucs:
            return FAILED, 0.0
        return float(np.mean(aucs)), float(np.std(aucs))

    return objective


def optimize(
    model_kind: str,
    X,
    y,
    splits: ml_core.CvSplit,
    budget: int = 100,
    seed: int = 0,
    use_smote: bool = True,
    smote_k: int = 5,
    audit: list | None = None,
) -> tuple[dict, float, TrialHistory]:
    """TPE search of ``model_kind``'s hyperparameters by mean CV AUC."""
    space = SPACES[model_kind]
    objective = make_cv_objective(model_kind, X, y, splits, use_smote, smote_k, seed, audit)
    history = tpe_search(objective, space, budget, seed=seed)
    best = history.best()
    return best.config, best.objective, history
