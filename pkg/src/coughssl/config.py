"""Pipeline configuration: one TOML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import tomli

from .dsp import CANONICAL_RATE, DEFAULT_CUTOFF_HZ, DEFAULT_ORDER
from .features import FeatureConfig
from .modeling import ModelSettings
from .segmentation import SegmentationParams
from .ssl import SCHEMES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(Exception):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "paths": {"audio_dir": "audio", "metadata": "metadata.csv", "output_dir": "out"},
    "dsp": {"cutoff_hz": DEFAULT_CUTOFF_HZ, "order": DEFAULT_ORDER, "sample_rate": CANONICAL_RATE},
    "segmentation": {
        "lower_mult": 0.1,
        "upper_mult": 2.0,
        "tolerance_ms": 10.0,
        "min_cough_ms": 200.0,
        "pad_ms": 200.0,
        "smooth_ms": 10.0,
    },
    "features": {
        "frame_len": 1024,
        "hop_len": 512,
        "n_mels": 40,
        "n_mfcc": 13,
        "welch_nperseg": 1024,
        "psd_bands": [[400.0, 550.0], [550.0, 800.0], [1000.0, 1500.0]],
        "include_gender": True,
    },
    "filter": {"min_cough_score": 0.8, "min_snr_db": 5.0},
    "ml": {
        "seed": 42,
        "budget": 100,
        "n_folds": 5,
        "val_frac": 0.2,
        "use_smote": True,
        "smote_k": 5,
        "kinds": ["logistic_regression", "lda"],
        "overfit_gap": 0.05,
        "scheme": "majority",
        "min_minority": 10,
        "js_bins": 50,
    },
    "run": {"jobs": 1},
}

# (section, key) -> (lo, hi) inclusive ranges for numeric parameters
RANGES = {
    ("dsp", "cutoff_hz"): (1.0, 1e6),
    ("dsp", "order"): (1, 12),
    ("dsp", "sample_rate"): (1000, 384000),
    ("segmentation", "lower_mult"): (0.0, 1e3),
    ("segmentation", "upper_mult"): (0.0, 1e3),
    ("segmentation", "tolerance_ms"): (0.0, 1e4),
    ("segmentation", "min_cough_ms"): (0.0, 1e4),
    ("segmentation", "pad_ms"): (0.0, 1e4),
    ("segmentation", "smooth_ms"): (0.0, 1e3),
    ("features", "frame_len"): (16, 1 << 16),
    ("features", "hop_len"): (1, 1 << 16),
    ("features", "n_mels"): (1, 512),
    ("features", "n_mfcc"): (1, 512),
    ("features", "welch_nperseg"): (16, 1 << 16),
    ("filter", "min_cough_score"): (0.0, 1.0),
    ("filter", "min_snr_db"): (-200.0, 200.0),
    ("ml", "budget"): (1, 100000),
    ("ml", "n_folds"): (1, 1000),
    ("ml", "val_frac"): (0.01, 0.99),
    ("ml", "smote_k"): (1, 1000),
    ("ml", "overfit_gap"): (0.0, 1.0),
    ("ml", "min_minority"): (1, 100000),
    ("ml", "js_bins"): (2, 100000),
    ("run", "jobs"): (1, 1024),
}


def _coerce(text: str, like: Any) -> Any:
    """Parse an override value, using the default's type as a hint."""
    try:
        val = tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        val = text
    if isinstance(like, bool) or like is None:
        return val
    if isinstance(like, float) and isinstance(val, int):
        return float(val)
    if isinstance(like, str) and not isinstance(val, str):
        return text
    return val


def _merge(base: dict, extra: dict, where: str) -> None:
    for section, values in extra.items():
        if section not in base:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{where}: [{section}] must be a table")
        for key, val in values.items():
            if key not in base[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            like = base[section][key]
            if isinstance(like, float) and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if type(val) is not type(like):
                raise ConfigError(
                    f"{where}: {section}.{key} expects {type(like).__name__}, got {type(val).__name__}"
                )
            base[section][key] = val


@dataclass(frozen=True)
class PipelineConfig:
    data: dict
    base_dir: Path

    # ------------------------------------------------------------ loading

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        overrides: Iterable[str] = (),
        check_paths: bool = True,
    ) -> PipelineConfig:
        data = copy.deepcopy(DEFAULTS)
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            try:
                raw = tomli.loads(path.read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
            _merge(data, raw, str(path))
            base = path.resolve().parent
        for item in overrides:
            key, sep, text = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            if section not in data or name not in data[section]:
                raise ConfigError(f"override {item!r}: unknown key {key.strip()}")
            _merge(data, {section: {name: _coerce(text.strip(), data[section][name])}}, "override")
        cfg = cls(data, base)
        cfg.validate(check_paths)
        return cfg

    def validate(self, check_paths: bool = True) -> None:
        d = self.data
        for (section, key), (lo, hi) in RANGES.items():
            v = d[section][key]
            if not lo <= v <= hi:
                raise ConfigError(f"{section}.{key} = {v} outside [{lo}, {hi}]")
        if d["ml"]["scheme"] not in SCHEMES:
            raise ConfigError(f"ml.scheme must be one of {list(SCHEMES)}")
        for k in d["ml"]["kinds"]:
            if k not in ("logistic_regression", "lda"):
                raise ConfigError(f"ml.kinds: unsupported model {k!r}")
        if not d["ml"]["kinds"]:
            raise ConfigError("ml.kinds must not be empty")
        if d["segmentation"]["lower_mult"] >= d["segmentation"]["upper_mult"]:
            raise ConfigError("segmentation.lower_mult must be below upper_mult")
        try:
            self.feature_config()
            self.segmentation_params()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        if check_paths:
            for key in ("audio_dir", "metadata"):
                p = self.path(key)
                if not p.exists():
                    raise ConfigError(f"paths.{key}: {p} does not exist")

    # ------------------------------------------------------------ views

    def path(self, key: str) -> Path:
        p = Path(self.data["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.path("output_dir")

    @property
    def seed(self) -> int:
        return int(self.data["ml"]["seed"])

    @property
    def jobs(self) -> int:
        return int(self.data["run"]["jobs"])

    def segmentation_params(self) -> SegmentationParams:
        return SegmentationParams(**self.data["segmentation"])

    def feature_config(self) -> FeatureConfig:
        f = dict(self.data["features"])
        f["psd_bands"] = tuple((float(lo), float(hi)) for lo, hi in f["psd_bands"])
        return FeatureConfig(sample_rate=self.data["dsp"]["sample_rate"], **f)

    def model_settings(self, **kw) -> ModelSettings:
        ml = self.data["ml"]
        base = ModelSettings(
            kinds=tuple(ml["kinds"]),
            budget=ml["budget"],
            n_folds=ml["n_folds"],
            val_frac=ml["val_frac"],
            seed=ml["seed"],
            use_smote=ml["use_smote"],
            smote_k=ml["smote_k"],
            overfit_gap=ml["overfit_gap"],
        )
        return ModelSettings(**{**base.__dict__, **kw})

    def section_hash(self, *sections: str) -> str:
        """Hash of the named sections; paths and run options never enter it."""
        sub = {s: self.data[s] for s in sections}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        lines = []
        for section, values in self.data.items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                lines.append(f"{k} = {_toml_value(v)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
