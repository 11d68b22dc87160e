"""Expert-model pseudo-labelling and agreement-based relabelling."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import ml_core
from .dataset_io import (
    ExpertLabel,
    LabelRecord,
    LabelSource,
    RecordingMeta,
    SslStatus,
    UserStatus,
)
from .modeling import ModelSettings, develop_model

log = logging.getLogger(__name__)

UNIVERSAL = "universal"
EXPERT = "expert"
MAJORITY = "majority"
SCHEMES = (UNIVERSAL, EXPERT, MAJORITY)
MIN_MINORITY = 10


class NoEligibleAnnotator(ValueError):
    pass


# ---------------------------------------------------------------- feature table


@dataclass(frozen=True)
class FeatureTable:
    """Per-cough feature matrix with the owning recording of each row."""

    uuids: np.ndarray
    segment_index: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        if self.X.shape != (self.uuids.size, len(self.names)):
            raise ValueError("feature matrix shape does not match ids/names")

    def __len__(self) -> int:
        return self.uuids.size

    def rows(self, uuids: Iterable[str]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.uuids, np.asarray(list(uuids), dtype=object)))

    def subset(self, rows) -> FeatureTable:
        return FeatureTable(self.uuids[rows], self.segment_index[rows], self.X[rows], self.names)

    def recordings(self) -> set[str]:
        return set(self.uuids.tolist())

    def to_csv(self, path: str | Path) -> None:
        df = pd.DataFrame(self.X, columns=list(self.names))
        df.insert(0, "segment", self.segment_index)
        df.insert(0, "uuid", self.uuids)
        df.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: str | Path) -> FeatureTable:
        df = pd.read_csv(path, dtype={"uuid": str}, float_precision="round_trip")
        names = tuple(c for c in df.columns if c not in ("uuid", "segment"))
        return cls(
            df["uuid"].to_numpy(dtype=object),
            df["segment"].to_numpy(dtype=int),
            df[list(names)].to_numpy(dtype=np.float64),
            names,
        )


def _binary(label) -> int | None:
    if label in (ExpertLabel.COVID, UserStatus.COVID, SslStatus.COVID):
        return 1
    if label in (ExpertLabel.HEALTHY, UserStatus.HEALTHY, SslStatus.HEALTHY):
        return 0
    return None


def cough_labels(table: FeatureTable, labels: Mapping[str, int]) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``table`` whose recording has a label, and those labels."""
    rows = table.rows(labels.keys())
    return rows, np.array([labels[u] for u in table.uuids[rows]], dtype=int)


# ---------------------------------------------------------------- expert models


@dataclass(frozen=True)
class ExpertModelSet:
    models: Mapping[str, ml_core.TrainedModel]
    excluded: Mapping[str, str] = field(default_factory=dict)

    @property
    def annotators(self) -> list[str]:
        return list(self.models)


def expert_training_labels(corpus: Sequence[RecordingMeta], annotator: str, table: FeatureTable) -> dict[str, int]:
    have = table.recordings()
    out = {}
    for m in corpus:
        b = _binary(m.expert_labels.get(annotator, ExpertLabel.NONE))
        if b is not None and m.uuid in have:
            out[m.uuid] = b
    return out


def train_expert_models(
    corpus: Sequence[RecordingMeta],
    table: FeatureTable,
    annotators: Sequence[str],
    settings: ModelSettings = ModelSettings(),
    min_minority: int = MIN_MINORITY,
) -> ExpertModelSet:
    """One model per annotator with at least ``min_minority`` recordings per class.

    Labels other than covid/healthy are ignored. Expert models always
    aggregate with the logit mean.
    """
    settings = dataclasses.replace(settings, aggregation=ml_core.LOGIT_MEAN)
    models, excluded = {}, {}
    for a in annotators:
        labels = expert_training_labels(corpus, a, table)
        counts = np.bincount(np.fromiter(labels.values(), dtype=int, count=len(labels)), minlength=2)
        minority = int(counts.min())
        if minority < min_minority:
            excluded[a] = f"minority count {minority} < {min_minority}"
            log.info("annotator %s excluded: %s", a, excluded[a])
            continue
        rows, y = cough_labels(table, labels)
        models[a] = develop_model(table.X[rows], y, table.uuids[rows], table.names, settings)
    if not models:
        raise NoEligibleAnnotator(f"no eligible annotator among {list(annotators)}: {excluded}")
    return ExpertModelSet(models, excluded)


# ---------------------------------------------------------------- propagation


def propagate(
    models: ExpertModelSet, corpus: Sequence[RecordingMeta], table: FeatureTable
) -> tuple[list[LabelRecord], list[str]]:
    """Fill every annotator slot with the original label or a pseudo-label.

    Returns the records (``ssl_status`` still unset, i.e. discarded) and
    the ids of recordings without any segment, which cannot be labelled.
    """
    have = table.recordings()
    scores = {}
    for a, model in models.models.items():
        ids, s = model.recording_scores(table.X, table.uuids, ml_core.LOGIT_MEAN)
        scores[a] = dict(zip(ids, s))
    records, unlabelable = [], []
    for m in corpus:
        if m.uuid not in have:
            unlabelable.append(m.uuid)
            continue
        labels, sources = {}, {}
        for a, model in models.models.items():
            orig = m.expert_labels.get(a, ExpertLabel.NONE)
            if orig in (ExpertLabel.COVID, ExpertLabel.HEALTHY):
                labels[a], sources[a] = orig, LabelSource.ORIGINAL_EXPERT
            else:
                covid = scores[a][m.uuid] >= model.threshold
                labels[a] = ExpertLabel.COVID if covid else ExpertLabel.HEALTHY
                sources[a] = LabelSource.PSEUDO_MODEL
        records.append(LabelRecord(m.uuid, m.user_status, labels, sources, SslStatus.DISCARDED))
    return records, unlabelable


def apply_agreement(record: LabelRecord, scheme: str, annotators: Sequence[str] | None = None) -> SslStatus:
    """Decide a recording's label under an agreement scheme.

    universal: all expert slots agree and the user label matches.
    expert:    all expert slots agree (user ignored).
    majority:  all expert slots agree, or at least ceil(k/2) of the k slots
               share the user's label.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    annotators = list(record.expert_or_pseudo) if annotators is None else list(annotators)
    missing = [a for a in annotators if a not in record.expert_or_pseudo]
    if missing or not annotators:
        raise ValueError(f"record {record.uuid!r} lacks expert slots {missing or 'all'}")
    votes = [record.expert_or_pseudo[a] for a in annotators]
    user = record.user_status.trainable
    to_status = {ExpertLabel.COVID: SslStatus.COVID, ExpertLabel.HEALTHY: SslStatus.HEALTHY}
    if all(v == votes[0] for v in votes):
        label = to_status[votes[0]]
        if scheme == UNIVERSAL and _binary(user) != _binary(label):
            return SslStatus.DISCARDED
        return label
    if scheme != MAJORITY or user is UserStatus.NONE:
        return SslStatus.DISCARDED
    need = math.ceil(len(votes) / 2)
    user_vote = ExpertLabel.COVID if user is UserStatus.COVID else ExpertLabel.HEALTHY
    if sum(v == user_vote for v in votes) >= need:
        return to_status[user_vote]
    return SslStatus.DISCARDED


def is_majority_conflict(record: LabelRecord, annotators: Sequence[str]) -> bool:
    """A majority of slots agree but the present user label contradicts them."""
    votes = [record.expert_or_pseudo[a] for a in annotators]
    user = record.user_status.trainable
    if user is UserStatus.NONE or all(v == votes[0] for v in votes):
        return False
    need = math.ceil(len(votes) / 2)
    user_vote = ExpertLabel.COVID if user is UserStatus.COVID else ExpertLabel.HEALTHY
    other = ExpertLabel.HEALTHY if user_vote is ExpertLabel.COVID else ExpertLabel.COVID
    return sum(v == other for v in votes) >= need and sum(v == user_vote for v in votes) < need


# ---------------------------------------------------------------- coverage


@dataclass(frozen=True)
class CoverageRow:
    scheme: str
    train_recordings: int
    train_positive_recordings: int
    train_coughs: int
    train_positive_coughs: int
    test_recordings: int
    test_positive_recordings: int
    test_coughs: int
    test_positive_coughs: int
    js_divergence: float
    majority_conflicts: int = 0


@dataclass
class CoverageReport:
    rows: list[CoverageRow] = field(default_factory=list)

    def row(self, scheme: str) -> CoverageRow:
        for r in self.rows:
            if r.scheme == scheme:
                return r
        raise KeyError(scheme)

    def to_csv(self, path: str | Path) -> None:
        cols = [f.name for f in dataclasses.fields(CoverageRow)]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(r)])

    def summary(self) -> str:
        lines = [
            f"{'scheme':<10} {'train recs (+)':>16} {'train coughs (+)':>18} "
            f"{'test recs (+)':>15} {'test coughs (+)':>17} {'mean JS':>9}"
        ]
        for r in self.rows:
            lines.append(
                f"{r.scheme:<10} {f'{r.train_recordings} ({r.train_positive_recordings})':>16} "
                f"{f'{r.train_coughs} ({r.train_positive_coughs})':>18} "
                f"{f'{r.test_recordings} ({r.test_positive_recordings})':>15} "
                f"{f'{r.test_coughs} ({r.test_positive_coughs})':>17} {r.js_divergence:>9.5f}"
            )
        conflicts = [r for r in self.rows if r.majority_conflicts]
        for r in conflicts:
            lines.append(
                f"note: {r.majority_conflicts} recording(s) had two agreeing expert slots "
                f"contradicted by the user label and were discarded ({r.scheme})"
            )
        return "\n".join(lines)


def coverage_row(
    scheme: str,
    labels: Mapping[str, int],
    splits: Mapping[str, str],
    table: FeatureTable,
    n_bins: int = 50,
    conflicts: int = 0,
) -> CoverageRow:
    """Tally kept recordings/coughs per split and the training-set mean JS divergence."""
    counts = {}
    for split in ("train", "test"):
        sub = {u: v for u, v in labels.items() if splits.get(u) == split}
        rows, y = cough_labels(table, sub)
        counts[split] = (len(sub), sum(sub.values()), rows.size, int(y.sum()))
    rows, y = cough_labels(table, {u: v for u, v in labels.items() if splits.get(u) == "train"})
    X = table.X[rows]
    if (y == 1).any() and (y == 0).any():
        js = ml_core.mean_js_divergence(X[y == 1], X[y == 0], n_bins)
    else:
        warnings.warn(f"scheme {scheme!r} keeps a single class; JS divergence undefined", stacklevel=2)
        js = math.nan
    return CoverageRow(scheme, *counts["train"], *counts["test"], js, conflicts)


def ssl_labels(records: Iterable[LabelRecord]) -> dict[str, int]:
    return {r.uuid: _binary(r.ssl_status) for r in records if r.ssl_status is not SslStatus.DISCARDED}


def user_labels(corpus: Iterable[RecordingMeta]) -> dict[str, int]:
    return {m.uuid: _binary(m.user_status) for m in corpus if _binary(m.user_status.trainable) is not None}


def build_ssl_dataset(
    corpus: Sequence[RecordingMeta],
    table: FeatureTable,
    models: ExpertModelSet,
    scheme: str = MAJORITY,
    n_bins: int = 50,
) -> tuple[list[LabelRecord], CoverageRow]:
    """Propagate, apply ``scheme`` and tally coverage for every recording."""
    records, unlabelable = propagate(models, corpus, table)
    if unlabelable:
        log.info("%d recording(s) without segments left out", len(unlabelable))
    annotators = models.annotators
    records = [dataclasses.replace(r, ssl_status=apply_agreement(r, scheme, annotators)) for r in records]
    conflicts = sum(is_majority_conflict(r, annotators) for r in records) if scheme == MAJORITY else 0
    splits = {m.uuid: m.split for m in corpus}
    row = coverage_row(scheme, ssl_labels(records), splits, table, n_bins, conflicts)
    if row.train_positive_recordings in (0, row.train_recordings):
        warnings.warn(f"scheme {scheme!r} keeps a single class; final training is blocked", stacklevel=2)
    return records, row


def coverage_report(
    corpus: Sequence[RecordingMeta],
    table: FeatureTable,
    models: ExpertModelSet,
    schemes: Sequence[str] = SCHEMES,
    n_bins: int = 50,
) -> tuple[dict[str, list[LabelRecord]], CoverageReport]:
    """Coverage of the user labels and of every scheme, in one report."""
    splits = {m.uuid: m.split for m in corpus}
    report = CoverageReport([coverage_row("user", user_labels(corpus), splits, table, n_bins)])
    by_scheme = {}
    for s in schemes:
        by_scheme[s], row = build_ssl_dataset(corpus, table, models, s, n_bins)
        report.rows.append(row)
    return by_scheme, report


# ---------------------------------------------------------------- final model


def train_final_model(
    labels: Mapping[str, int],
    table: FeatureTable,
    settings: ModelSettings = ModelSettings(rfecv="always"),
) -> ml_core.TrainedModel:
    """Develop the final classifier on the kept recordings' labels."""
    rows, y = cough_labels(table, labels)
    if np.unique(y).size < 2:
        raise ValueError("final training needs both classes among the kept recordings")
    return develop_model(table.X[rows], y, table.uuids[rows], table.names, settings)


def evaluate(model: ml_core.TrainedModel, table: FeatureTable, labels: Mapping[str, int]) -> dict:
    """Per-cough and per-recording AUC plus sensitivity/specificity at the stored threshold."""
    rows, y = cough_labels(table, labels)
    if np.unique(y).size < 2:
        raise ValueError("evaluation set holds a single class")
    X, groups = table.X[rows], table.uuids[rows]
    ps = model.cough_proba(X)
    ids, scores = ml_core.aggregate_by_group(ps, groups, model.aggregation)
    rec_y = np.array([labels[i] for i in ids], dtype=int)
    pred = scores >= model.threshold
    pos, neg = rec_y == 1, rec_y == 0
    return {
        "auc_not_aggregated": ml_core.roc_auc(ps, y),
        "auc_aggregated": ml_core.roc_auc(scores, rec_y),
        "sensitivity": float(np.mean(pred[pos])),
        "specificity": float(np.mean(~pred[neg])),
        "threshold": model.threshold,
        "n_recordings": int(ids.size),
        "n_positive_recordings": int(pos.sum()),
        "n_coughs": int(y.size),
        "roc": ml_core.roc_curve(scores, rec_y),
    }
