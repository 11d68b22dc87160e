"""Pipeline stages with a hash manifest tying every artifact to its inputs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import pandas as pd

from . import dsp, features, ml_core, segmentation, ssl
from .config import PipelineConfig
from .dataset_io import (
    DataError,
    ExpertLabel,
    Gender,
    RecordingMeta,
    attach_snr,
    filter_corpus,
    load_audio,
    load_metadata,
    read_labels,
    write_audio,
    write_labels,
    write_metadata,
)
from .modeling import develop_model
from .tpe import SPACES

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# stage -> (upstream stages, config sections its outputs depend on)
STAGES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "preprocess": ((), ("dsp",)),
    "segment": (("preprocess",), ("dsp", "segmentation", "filter")),
    "features": (("segment",), ("features", "ml")),
    "train-experts": (("features",), ("ml",)),
    "ssl-relabel": (("train-experts",), ("ml",)),
    "train-final": (("ssl-relabel",), ("ml",)),
    "evaluate": (("train-final",), ("ml",)),
    "report": (("evaluate",), ("features", "ml")),
}
ORDER = list(STAGES)


class StageError(Exception):
    """An upstream artifact is missing or stale."""


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------- manifest


class Manifest:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.path = out_dir / MANIFEST
        self.stages: dict = {}
        if self.path.exists():
            self.stages = json.loads(self.path.read_text()).get("stages", {})

    def rel(self, p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            return p.as_posix()

    def abs(self, key: str) -> Path:
        p = Path(key)
        return p if p.is_absolute() else self.out_dir / p

    def record(self, stage: str, cfg: PipelineConfig, inputs: Iterable[Path], outputs: Iterable[Path]) -> None:
        entry = {
            "config_hash": cfg.section_hash(*STAGES[stage][1]),
            "seed": cfg.seed,
            "inputs": {self.rel(p): file_hash(Path(p)) for p in sorted(set(map(Path, inputs)))},
            "outputs": {self.rel(p): file_hash(Path(p)) for p in sorted(set(map(Path, outputs)))},
        }
        self.stages[stage] = entry
        # later stages were built from the old artifacts
        for later in ORDER[ORDER.index(stage) + 1:]:
            self.stages.pop(later, None)
        self.save()

    def save(self) -> None:
        doc = {"stages": {s: self.stages[s] for s in ORDER if s in self.stages}}
        self.path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def check(self, stage: str, cfg: PipelineConfig) -> None:
        """Raise StageError naming the earliest upstream stage to (re)run."""
        for up in _ancestors(stage):
            entry = self.stages.get(up)
            if entry is None:
                raise StageError(f"stage '{up}' has not been run; run `coughssl {up}` first")
            if entry["config_hash"] != cfg.section_hash(*STAGES[up][1]):
                raise StageError(f"configuration changed since stage '{up}' ran; rerun `coughssl {up}`")
            for key, digest in {**entry["inputs"], **entry["outputs"]}.items():
                p = self.abs(key)
                if not p.exists():
                    raise StageError(f"artifact {key} of stage '{up}' is missing; rerun `coughssl {up}`")
                if file_hash(p) != digest:
                    raise StageError(f"artifact {key} changed since stage '{up}' ran; rerun `coughssl {up}`")


def _ancestors(stage: str) -> list[str]:
    out: list[str] = []
    todo = list(STAGES[stage][0])
    while todo:
        s = todo.pop()
        if s not in out:
            out.append(s)
            todo.extend(STAGES[s][0])
    return sorted(out, key=ORDER.index)


# ---------------------------------------------------------------- helpers


def _map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _paths(cfg: PipelineConfig) -> dict[str, Path]:
    out = cfg.out_dir
    return {
        "pre": out / "preprocessed",
        "recordings": out / "recordings.csv",
        "segments": out / "segments.csv",
        "features": out / "features.csv",
        "models": out / "models",
        "experts": out / "experts.json",
        "labels": out / "labels.csv",
        "coverage": out / "coverage.csv",
        "coverage_txt": out / "coverage.txt",
        "metrics": out / "metrics.csv",
        "report": out / "report",
    }


def _annotators(corpus: list[RecordingMeta]) -> list[str]:
    seen: dict[str, None] = {}
    for m in corpus:
        for a in m.expert_labels:
            seen.setdefault(a, None)
    return list(seen)


def _read_annotators(path: Path) -> list[str]:
    with path.open(newline="") as fh:
        header = next(csv.reader(fh))
    return [h[len("expert_"):] for h in header if h.startswith("expert_")]


def _write_rows(path: Path, header: list[str], rows: Iterable[Iterable]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------- preprocess


def _preprocess_one(args) -> tuple[str, str | None]:
    uuid, src, dst, cutoff, order, rate = args
    try:
        sig = load_audio(src)
    except (DataError, FileNotFoundError) as e:
        return uuid, str(e)
    out = dsp.preprocess(sig, cutoff_hz=cutoff, order=order, target_rate=rate)
    write_audio(dst, out, bits=32)
    return uuid, None


def run_preprocess(cfg: PipelineConfig) -> list[Path]:
    p = _paths(cfg)
    meta_path = cfg.path("metadata")
    corpus = load_metadata(meta_path)
    audio_dir = cfg.path("audio_dir")
    p["pre"].mkdir(parents=True, exist_ok=True)
    d = cfg.data["dsp"]
    jobs = [
        (m.uuid, audio_dir / f"{m.uuid}.wav", p["pre"] / f"{m.uuid}.wav", d["cutoff_hz"], d["order"], d["sample_rate"])
        for m in corpus
    ]
    results = _map(_preprocess_one, jobs, cfg.jobs)
    errors = [f"{u}: {e}" for u, e in results if e]
    if errors:
        raise DataError(f"{len(errors)} recording(s) could not be read:\n  " + "\n  ".join(errors[:10]))
    outputs = [j[2] for j in jobs]
    Manifest(cfg.out_dir).record("preprocess", cfg, [meta_path] + [j[1] for j in jobs], outputs)
    log.info("preprocessed %d recordings", len(outputs))
    return outputs


# ---------------------------------------------------------------- segment


def _segment_one(args):
    uuid, path, params = args
    sig = load_audio(path)
    segs = segmentation.segment_coughs(sig, params, uuid)
    try:
        snr = segmentation.estimate_snr(sig, segs)
    except segmentation.UndefinedSNR:
        snr = None
    return uuid, [(s.start_sample, s.end_sample) for s in segs], snr


def run_segment(cfg: PipelineConfig) -> list[Path]:
    p = _paths(cfg)
    man = Manifest(cfg.out_dir)
    man.check("segment", cfg)
    corpus = load_metadata(cfg.path("metadata"))
    params = cfg.segmentation_params()
    results = _map(_segment_one, [(m.uuid, p["pre"] / f"{m.uuid}.wav", params) for m in corpus], cfg.jobs)
    snr = {u: s for u, _, s in results if s is not None and math.isfinite(s)}
    undefined = [u for u, _, s in results if u not in snr]
    if undefined:
        log.info("%d recording(s) with undefined SNR dropped", len(undefined))
    defined = [m for m in corpus if m.uuid in snr]
    f = cfg.data["filter"]
    kept = filter_corpus(attach_snr(defined, snr), f["min_cough_score"], f["min_snr_db"])
    kept_ids = {m.uuid for m in kept}
    log.info("%d of %d recordings pass the cough-score/SNR filter", len(kept), len(corpus))
    write_metadata(kept, p["recordings"], _annotators(corpus))
    rows = []
    for uuid, segs, _ in results:
        if uuid in kept_ids:
            for i, (s, e) in enumerate(segs):
                rows.append([uuid, i, s, e, snr[uuid]])
    _write_rows(p["segments"], ["uuid", "index", "start_sample", "end_sample", "snr_db"], rows)
    outputs = [p["recordings"], p["segments"]]
    man.record("segment", cfg, [cfg.path("metadata")], outputs)
    return outputs


def read_segments(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"uuid": str}, float_precision="round_trip")


# ---------------------------------------------------------------- features


def _features_one(args):
    uuid, path, spans, fcfg = args
    x = load_audio(path).samples
    out = []
    for i, (s, e) in enumerate(spans):
        fv = features.extract_features(x[s:e], fcfg, math.nan, (uuid, i))
        out.append(fv.values)
    return uuid, out


def _gender_value(g: Gender) -> float:
    return {Gender.MALE: 1.0, Gender.FEMALE: 0.0}.get(g, math.nan)


def run_features(cfg: PipelineConfig) -> list[Path]:
    p = _paths(cfg)
    man = Manifest(cfg.out_dir)
    man.check("features", cfg)
    corpus = load_metadata(p["recordings"])
    segs = read_segments(p["segments"])
    fcfg = cfg.feature_config()
    spans = {u: list(zip(g["start_sample"], g["end_sample"])) for u, g in segs.groupby("uuid", sort=False)}
    jobs = [(m.uuid, p["pre"] / f"{m.uuid}.wav", spans.get(m.uuid, []), fcfg) for m in corpus]
    results = _map(_features_one, jobs, cfg.jobs)
    uuids, index, rows = [], [], []
    for uuid, vecs in results:
        for i, v in enumerate(vecs):
            uuids.append(uuid)
            index.append(i)
            rows.append(v)
    names = tuple(fcfg.feature_names())
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    uuids = np.array(uuids, dtype=object)
    outputs = [p["features"]]
    if fcfg.include_gender:
        gcol = names.index(features.GENDER_NAME)
        gender_of = {m.uuid: _gender_value(m.gender) for m in corpus}
        split_of = {m.uuid: m.split for m in corpus}
        gender = np.array([gender_of[u] for u in uuids])
        other = [j for j in range(len(names)) if j != gcol]
        train = np.array([split_of[u] == "train" for u in uuids])
        known = train & ~np.isnan(gender)
        p["models"].mkdir(parents=True, exist_ok=True)
        if np.isnan(gender).any():
            settings = cfg.model_settings(rfecv="auto")
            model = features.train_gender_model(
                X[known][:, other], gender[known], uuids[known], [names[j] for j in other], settings
            )
            gender = features.impute_gender(model, X[:, other], gender, uuids)
            gpath = p["models"] / "gender.json"
            gpath.write_text(model.to_json() + "\n")
            outputs.append(gpath)
        X[:, gcol] = gender
    ssl.FeatureTable(uuids, np.array(index, dtype=int), X, names).to_csv(p["features"])
    man.record("features", cfg, [p["recordings"], p["segments"]], outputs)
    log.info("extracted %d x %d features", *X.shape)
    return outputs


# ---------------------------------------------------------------- experts


def _train_split(corpus, table: ssl.FeatureTable):
    train = [m for m in corpus if m.split == "train"]
    return train, table.subset(table.rows(m.uuid for m in train))


def run_train_experts(cfg: PipelineConfig) -> list[Path]:
    p = _paths(cfg)
    man = Manifest(cfg.out_dir)
    man.check("train-experts", cfg)
    corpus = load_metadata(p["recordings"])
    table = ssl.FeatureTable.from_csv(p["features"])
    annotators = _read_annotators(p["recordings"])
    train, train_table = _train_split(corpus, table)
    settings = cfg.model_settings(rfecv="auto")
    try:
        models = ssl.train_expert_models(train, train_table, annotators, settings, cfg.data["ml"]["min_minority"])
    except ssl.NoEligibleAnnotator as e:
        raise DataError(str(e)) from None
    p["models"].mkdir(parents=True, exist_ok=True)
    outputs = []
    for a, m in models.models.items():
        path = p["models"] / f"expert_{a}.json"
        path.write_text(m.to_json() + "\n")
        outputs.append(path)
    p["experts"].write_text(
        json.dumps({"included": models.annotators, "excluded": dict(models.excluded)}, indent=2, sort_keys=True) + "\n"
    )
    outputs.append(p["experts"])
    man.record("train-experts", cfg, [p["recordings"], p["features"]], outputs)
    return outputs


def load_experts(p: dict[str, Path]) -> ssl.ExpertModelSet:
    doc = json.loads(p["experts"].read_text())
    models = {
        a: ml_core.TrainedModel.from_json((p["models"] / f"expert_{a}.json").read_text()) for a in doc["included"]
    }
    return ssl.ExpertModelSet(models, doc["excluded"])


# ---------------------------------------------------------------- relabel


def run_ssl_relabel(cfg: PipelineConfig) -> list[Path]:
    p = _paths(cfg)
    man = Manifest(cfg.out_dir)
    man.check("ssl-relabel", cfg)
    corpus = load_metadata(p["recordings"])
    table = ssl.FeatureTable.from_csv(p["features"])
    models = load_experts(p)
    by_scheme, report = ssl.coverage_report(corpus, table, models, ssl.SCHEMES, cfg.data["ml"]["js_bins"])
    outputs = []
    for scheme, records in by_scheme.items():
        path = cfg.out_dir / f"labels_{scheme}.csv"
        write_labels(records, path, models.annotators)
        outputs.append(path)
    write_labels(by_scheme[cfg.data["ml"]["scheme"]], p["labels"], models.annotators)
    report.to_csv(p["coverage"])
    p["coverage_txt"].write_text(report.summary() + "\n")
    outputs += [p["labels"], p["coverage"], p["coverage_txt"]]
    man.record("ssl-relabel", cfg, [p["recordings"], p["features"], p["experts"]], outputs)
    log.info("coverage\n%s", report.summary())
    return outputs


def scheme_labels(p: dict[str, Path], corpus, split: str) -> dict[str, int]:
    ids = {m.uuid for m in corpus if m.split == split}
    return {u: v for u, v in ssl.ssl_labels(read_labels(p["labels"])).items() if u in ids}


def user_split_labels(corpus, split: str) -> dict[str, int]:
    return ssl.user_labels(m for m in corpus if m.split == split)


# ---------------------------------------------------------------- final models


def run_train_final(cfg: PipelineConfig) -> list[Path]:
    """Final model on the scheme labels plus a baseline on raw user labels."""
    p = _paths(cfg)
    man = Manifest(cfg.out_dir)
    man.check("train-final", cfg)
    corpus = load_metadata(p["recordings"])
    table = ssl.FeatureTable.from_csv(p["features"])
    settings = cfg.model_settings(rfecv="always")
    outputs = []
    for tag, labels in (
        ("ssl", scheme_labels(p, corpus, "train")),
        ("user", user_split_labels(corpus, "train")),
    ):
        rows, y = ssl.cough_labels(table, labels)
        if np.unique(y).size < 2:
            raise DataError(f"{tag} training labels hold a single class; cannot train the final model")
        model, rep = develop_model(table.X[rows], y, table.uuids[rows], table.names, settings, return_report=True)
        path = p["models"] / f"final_{tag}.json"
        path.write_text(model.to_json() + "\n")
        outputs.append(path)
        for kind, hist in rep.histories.items():
            hpath = cfg.out_dir / f"tpe_history_{tag}_{kind}.csv"
            hist.to_csv(hpath, SPACES[kind])
            outputs.append(hpath)
    man.record("train-final", cfg, [p["recordings"], p["features"], p["labels"]], outputs)
    return outputs


# ---------------------------------------------------------------- evaluate


METRIC_COLUMNS = [
    "model",
    "cv_auc",
    "auc_not_aggregated",
    "auc_aggregated",
    "sensitivity",
    "specificity",
    "threshold",
    "aggregation",
    "n_features",
    "n_recordings",
    "n_positive_recordings",
    "n_coughs",
]


def run_evaluate(cfg: PipelineConfig) -> list[Path]:
    p = _paths(cfg)
    man = Manifest(cfg.out_dir)
    man.check("evaluate", cfg)
    corpus = load_metadata(p["recordings"])
    table = ssl.FeatureTable.from_csv(p["features"])
    rows, outputs = [], []
    for tag, labels in (
        ("ssl", scheme_labels(p, corpus, "test")),
        ("user", user_split_labels(corpus, "test")),
    ):
        model = ml_core.TrainedModel.from_json((p["models"] / f"final_{tag}.json").read_text())
        try:
            m = ssl.evaluate(model, table, labels)
        except ValueError as e:
            raise DataError(f"{tag} test labels: {e}") from None
        rows.append(
            [tag, model.info.get("cv_auc", math.nan), m["auc_not_aggregated"], m["auc_aggregated"],
             m["sensitivity"], m["specificity"], m["threshold"], model.aggregation, int(model.feature_mask.sum()),
             m["n_recordings"], m["n_positive_recordings"], m["n_coughs"]]
        )
        roc = m["roc"]
        rpath = cfg.out_dir / f"roc_{tag}.csv"
        _write_rows(rpath, ["fpr", "tpr", "threshold"], zip(roc.fpr, roc.tpr, roc.thresholds))
        outputs.append(rpath)
    _write_rows(p["metrics"], METRIC_COLUMNS, rows)
    outputs.insert(0, p["metrics"])
    man.record(
        "evaluate", cfg,
        [p["recordings"], p["features"], p["labels"], p["models"] / "final_ssl.json", p["models"] / "final_user.json"],
        outputs,
    )
    return outputs


def read_metrics(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip").set_index("model")


# ---------------------------------------------------------------- report


def _psd_curves(p, corpus_ids: set[str], fcfg) -> tuple[list[str], list[features.PsdCurve]]:
    segs = read_segments(p["segments"])
    uuids, curves = [], []
    for uuid, g in segs.groupby("uuid", sort=False):
        if uuid not in corpus_ids:
            continue
        x = load_audio(p["pre"] / f"{uuid}.wav").samples
        for s, e in zip(g["start_sample"], g["end_sample"]):
            curves.append(features.normalized_psd(x[s:e], fcfg.sample_rate, fcfg.welch_nperseg))
            uuids.append(uuid)
    return uuids, curves


def psd_report(p, labels: dict[str, int], fcfg) -> features.ClassPsdReport:
    uuids, curves = _psd_curves(p, set(labels), fcfg)
    return features.class_psd_report(curves, [labels[u] for u in uuids], fcfg.psd_bands)


def expert_kappa(corpus, annotators: list[str]) -> tuple[float, int]:
    """Fleiss' kappa over recordings that every annotator labelled covid/healthy."""
    counts = []
    for m in corpus:
        labs = [m.expert_labels.get(a, ExpertLabel.NONE) for a in annotators]
        if all(lab in (ExpertLabel.COVID, ExpertLabel.HEALTHY) for lab in labs):
            pos = sum(lab is ExpertLabel.COVID for lab in labs)
            counts.append([pos, len(labs) - pos])
    if len(counts) < 2 or len(annotators) < 2:
        return math.nan, len(counts)
    return ml_core.fleiss_kappa(np.array(counts)), len(counts)


def _roc_svg(path: Path, curves: dict[str, ml_core.RocCurve], aucs: dict[str, float]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "coughssl"  # stable element ids
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for tag, c in curves.items():
        ax.plot(c.fpr, c.tpr, label=f"{tag} (AUC {aucs[tag]:.3f})")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def run_report(cfg: PipelineConfig) -> list[Path]:
    p = _paths(cfg)
    man = Manifest(cfg.out_dir)
    man.check("report", cfg)
    out = p["report"]
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_metadata(p["recordings"])
    fcfg = cfg.feature_config()
    outputs = []

    kept = ssl.ssl_labels(read_labels(p["labels"]))
    for tag, labels in (("ssl", kept), ("user", ssl.user_labels(corpus))):
        rep = psd_report(p, labels, fcfg)
        for name, writer in ((f"psd_{tag}.csv", rep.to_csv), (f"psd_bands_{tag}.csv", rep.bands_to_csv)):
            writer(out / name)
            outputs.append(out / name)
        rep.to_svg(out / f"psd_{tag}.svg", title=f"{tag} labels")
        outputs.append(out / f"psd_{tag}.svg")

    table = ssl.FeatureTable.from_csv(p["features"])
    model = ml_core.TrainedModel.from_json((p["models"] / "final_ssl.json").read_text())
    rows, _ = ssl.cough_labels(table, kept)
    ranking = ml_core.shap_ranking(model.model, model.transform(table.X[rows]), model.selected_names)
    _write_rows(out / "shap_ranking.csv", ["rank", "feature", "mean_abs_shap"],
                ((i + 1, n, v) for i, (n, v) in enumerate(ranking)))
    outputs.append(out / "shap_ranking.csv")

    annotators = _read_annotators(p["recordings"])
    kappa, n = expert_kappa(corpus, annotators)
    _write_rows(out / "kappa.csv", ["annotators", "n_recordings", "fleiss_kappa"], [[" ".join(annotators), n, kappa]])
    outputs.append(out / "kappa.csv")

    curves, aucs = {}, {}
    metrics = read_metrics(p["metrics"])
    for tag in ("ssl", "user"):
        r = pd.read_csv(cfg.out_dir / f"roc_{tag}.csv")
        curves[tag] = ml_core.RocCurve(r["fpr"].to_numpy(), r["tpr"].to_numpy(), r["threshold"].to_numpy())
        aucs[tag] = float(metrics.loc[tag, "auc_aggregated"])
    _roc_svg(out / "roc.svg", curves, aucs)
    outputs.append(out / "roc.svg")

    man.record("report", cfg, [p["recordings"], p["segments"], p["features"], p["labels"], p["metrics"]], outputs)
    return outputs


RUNNERS: dict[str, Callable[[PipelineConfig], list[Path]]] = {
    "preprocess": run_preprocess,
    "segment": run_segment,
    "features": run_features,
    "train-experts": run_train_experts,
    "ssl-relabel": run_ssl_relabel,
    "train-final": run_train_final,
    "evaluate": run_evaluate,
    "report": run_report,
}


def run_all(cfg: PipelineConfig, stages: Iterable[str] = ORDER) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for s in stages:
        log.info("stage %s", s)
        RUNNERS[s](cfg)
