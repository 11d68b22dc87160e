"""Synthetic crowdsourced cough corpus with known ground truth.

Each cough is a shaped noise burst. Positive recordings get a band boost
(default +6 dB in 1000-1500 Hz) on top of a per-cough random band gain,
so single coughs are ambiguous while the recording average is not.
Annotators see the truth through independent label noise; user labels
are noisier and partly erased.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import (
    AudioSignal,
    ExpertLabel,
    Gender,
    RecordingMeta,
    UserStatus,
    write_audio,
    write_metadata,
)


@dataclass(frozen=True)
class SynthConfig:
    n_recordings: int = 300
    sample_rate: int = 24000
    positive_frac: float = 0.35
    band_hz: tuple[float, float] = (1000.0, 1500.0)
    band_boost_db: float = 6.0
    cough_band_sd_db: float = 5.0
    coughs_per_recording: tuple[int, int] = (3, 5)
    cough_ms: tuple[float, float] = (250.0, 450.0)
    gap_ms: tuple[float, float] = (550.0, 900.0)
    noise_floor_db: float = -45.0
    annotators: tuple[str, ...] = ("1", "2", "3")
    annotator_coverage: float | None = None  # None: enough for ~30 positives each
    annotator_noise: float = 0.15
    annotator_other_frac: float = 0.05
    user_noise: float = 0.30
    user_erased: float = 0.40
    gender_unknown: float = 0.2
    low_score_frac: float = 0.04
    noisy_frac: float = 0.03
    test_frac: float = 0.25
    seed: int = 0


@dataclass
class SynthCorpus:
    corpus: list[RecordingMeta]
    signals: dict[str, AudioSignal]
    truth: dict[str, int]
    config: SynthConfig = field(default_factory=SynthConfig)

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        """Write ``audio/<uuid>.wav`` and ``metadata.csv``; returns both paths."""
        root = Path(directory)
        audio = root / "audio"
        audio.mkdir(parents=True, exist_ok=True)
        for uuid, sig in self.signals.items():
            write_audio(audio / f"{uuid}.wav", sig, bits=16)
        meta = root / "metadata.csv"
        write_metadata(self.corpus, meta, list(self.config.annotators))
        with (root / "truth.csv").open("w") as fh:
            fh.write("uuid,label\n")
            for u, v in self.truth.items():
                fh.write(f"{u},{v}\n")
        return audio, meta


def _band_gain(freqs: np.ndarray, lo: float, hi: float, db: float) -> np.ndarray:
    g = np.ones_like(freqs)
    g[(freqs >= lo) & (freqs < hi)] = 10.0 ** (db / 20.0)
    return g


def synth_cough(
    rng: np.random.Generator, n: int, fs: int, band_db: float, cfg: SynthConfig, male: bool
) -> np.ndarray:
    """One burst: coloured noise with a formant-like envelope and a decaying amplitude."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    f0 = 350.0 if male else 500.0
    shape = 1.0 / (1.0 + (f / 2500.0) ** 2)
    for k, w in ((1, 1.0), (3, 0.5), (6, 0.3)):
        fc = f0 * k * rng.uniform(0.85, 1.15)
        shape += w * np.exp(-0.5 * ((f - fc) / (0.25 * fc)) ** 2)
    spec *= shape * _band_gain(f, *cfg.band_hz, band_db)
    y = np.fft.irfft(spec, n)
    t = np.arange(n) / fs
    attack = 0.02
    env = np.minimum(t / attack, 1.0) * np.exp(-np.maximum(t - attack, 0.0) / (0.3 * n / fs))
    y *= env
    return y / np.max(np.abs(y))


def synth_recording(rng: np.random.Generator, label: int, cfg: SynthConfig, male: bool, noise_db: float) -> np.ndarray:
    fs = cfg.sample_rate
    ms = lambda v: int(round(v * fs / 1000.0))  # noqa: E731
    parts = [np.zeros(ms(rng.uniform(*cfg.gap_ms)))]
    k = int(rng.integers(cfg.coughs_per_recording[0], cfg.coughs_per_recording[1] + 1))
    for _ in range(k):
        band_db = cfg.band_boost_db * label + rng.normal(0.0, cfg.cough_band_sd_db)
        c = synth_cough(rng, ms(rng.uniform(*cfg.cough_ms)), fs, band_db, cfg, male)
        parts.append(c * rng.uniform(0.5, 1.0))
        parts.append(np.zeros(ms(rng.uniform(*cfg.gap_ms))))
    x = np.concatenate(parts)
    x += rng.standard_normal(x.size) * 10.0 ** (noise_db / 20.0)
    return 0.9 * x / np.max(np.abs(x))


def annotator_coverage(cfg: SynthConfig) -> float:
    if cfg.annotator_coverage is not None:
        return cfg.annotator_coverage
    n_train = cfg.n_recordings * (1.0 - cfg.test_frac)
    return float(np.clip(30.0 / max(n_train * cfg.positive_frac, 1e-9), 0.35, 1.0))


def _flip(rng: np.random.Generator, y: int, p: float) -> int:
    return 1 - y if rng.random() < p else y


def make_corpus(cfg: SynthConfig = SynthConfig()) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_recordings
    width = len(str(n - 1))
    corpus, signals, truth = [], {}, {}
    n_test = int(round(cfg.test_frac * n))
    test = set(rng.permutation(n)[:n_test].tolist())
    coverage = annotator_coverage(cfg)
    for i in range(n):
        uuid = f"rec{i:0{width}d}"
        y = int(rng.random() < cfg.positive_frac)
        male = bool(rng.random() < 0.5)
        noisy = rng.random() < cfg.noisy_frac
        noise_db = -8.0 if noisy else cfg.noise_floor_db
        signals[uuid] = AudioSignal(synth_recording(rng, y, cfg, male, noise_db), cfg.sample_rate)
        truth[uuid] = y

        experts = {}
        for a in cfg.annotators:
            if rng.random() < coverage:
                if rng.random() < cfg.annotator_other_frac:
                    experts[a] = ExpertLabel.OTHER
                else:
                    experts[a] = ExpertLabel.COVID if _flip(rng, y, cfg.annotator_noise) else ExpertLabel.HEALTHY
        u = _flip(rng, y, cfg.user_noise)
        if rng.random() < cfg.user_erased:
            user = UserStatus.SYMPTOMATIC if rng.random() < 0.1 else UserStatus.NONE
        else:
            user = UserStatus.COVID if u else UserStatus.HEALTHY
        if rng.random() < cfg.gender_unknown:
            gender = Gender.UNKNOWN
        else:
            gender = Gender.MALE if male else Gender.FEMALE
        score = rng.uniform(0.1, 0.79) if rng.random() < cfg.low_score_frac else rng.uniform(0.85, 1.0)
        corpus.append(
            RecordingMeta(uuid, user, experts, gender, round(float(score), 4), None, "test" if i in test else "train")
        )
    return SynthCorpus(corpus, signals, truth, cfg)
