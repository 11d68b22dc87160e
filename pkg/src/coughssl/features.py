"""Per-cough audio features, normalised PSD analysis and gender imputation."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy import signal as sps
from scipy import stats
from scipy.fft import dct, rfft, rfftfreq
from scipy.integrate import trapezoid

SCHEMA_VERSION = "1"
LOG_FLOOR = 1e-10

SPECTRAL_NAMES = (
    "dominant_frequency",
    "spectral_centroid",
    "spectral_rolloff",
    "spectral_spread",
    "spectral_skewness",
    "spectral_kurtosis",
    "spectral_bandwidth",
    "spectral_flatness",
    "spectral_std",
    "spectral_slope",
    "spectral_decrease",
)
TIME_NAMES = ("rms_power", "zero_crossing_rate", "crest_factor", "signal_length")
GENDER_NAME = "gender"


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 12000
    frame_len: int = 1024
    hop_len: int = 512
    n_mels: int = 40
    n_mfcc: int = 13
    eepd_lo_hz: float = 50.0
    eepd_hi_hz: float = 1000.0
    eepd_width_hz: float = 50.0
    eepd_filter_order: int = 4
    eepd_smooth_ms: float = 50.0
    eepd_peak_frac: float = 0.1
    rolloff_frac: float = 0.85
    welch_nperseg: int = 1024
    psd_bands: tuple[tuple[float, float], ...] = ((400.0, 550.0), (550.0, 800.0), (1000.0, 1500.0))
    include_gender: bool = True

    def __post_init__(self):
        nyq = self.sample_rate / 2.0
        for lo, hi in self.psd_bands:
            if not 0.0 <= lo < hi <= nyq:
                raise ValueError(f"PSD band ({lo}, {hi}) must satisfy 0 <= lo < hi <= {nyq}")
        if self.hop_len <= 0 or self.frame_len <= 0:
            raise ValueError("frame and hop lengths must be positive")

    @property
    def eepd_bands(self) -> list[tuple[float, float]]:
        n = int(round((self.eepd_hi_hz - self.eepd_lo_hz) / self.eepd_width_hz))
        return [(self.eepd_lo_hz + i * self.eepd_width_hz, self.eepd_lo_hz + (i + 1) * self.eepd_width_hz) for i in range(n)]

    def core_names(self) -> list[str]:
        names = [f"mfcc_mean_{i}" for i in range(self.n_mfcc)]
        names += [f"mfcc_std_{i}" for i in range(self.n_mfcc)]
        names += [f"eepd_{lo:g}_{hi:g}" for lo, hi in self.eepd_bands]
        names += list(SPECTRAL_NAMES) + list(TIME_NAMES)
        return names

    def psd_names(self) -> list[str]:
        return [f"psd_{lo:g}_{hi:g}" for lo, hi in self.psd_bands]

    def feature_names(self) -> list[str]:
        return self.core_names() + ([GENDER_NAME] if self.include_gender else []) + self.psd_names()


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    names: tuple[str, ...]
    segment_ref: tuple[str, int] = ("", 0)

    def __post_init__(self):
        if len(self.values) != len(self.names):
            raise ValueError("values and names differ in length")


@dataclass(frozen=True)
class PsdCurve:
    freqs_hz: np.ndarray
    density: np.ndarray

    def area(self) -> float:
        return float(trapezoid(self.density, self.freqs_hz))


# ---------------------------------------------------------------- MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: float) -> np.ndarray:
    """Triangular filters (peak 1) equally spaced on the HTK mel scale, 0 Hz to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    f = rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if x.size < frame_len:
        raise ValueError(f"segment of {x.size} samples is shorter than one {frame_len}-sample frame")
    n = 1 + (x.size - frame_len) // hop
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n]


def mfcc_matrix(x, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Frames x n_mfcc matrix: Hann-windowed |FFT| -> mel -> log -> DCT-II (orthonormal)."""
    frames = frame_signal(np.asarray(x, dtype=np.float64), config.frame_len, config.hop_len)
    win = sps.get_window("hann", config.frame_len)
    mag = np.abs(rfft(frames * win, axis=1))
    fb = mel_filterbank(config.n_mels, config.frame_len, config.sample_rate)
    mel = np.log(np.maximum(mag @ fb.T, LOG_FLOOR))
    return dct(mel, type=2, norm="ortho", axis=1)[:, : config.n_mfcc]


def mfcc_stats(x, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Per-coefficient mean then standard deviation over frames."""
    m = mfcc_matrix(x, config)
    return np.concatenate((m.mean(axis=0), m.std(axis=0)))


# ---------------------------------------------------------------- EEPD


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x
    return ndimage.uniform_filter1d(x, width, mode="constant")


@functools.lru_cache(maxsize=256)
def _bandpass(order: int, lo: float, hi: float, fs: float) -> np.ndarray:
    sos = sps.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    sos.setflags(write=False)
    return sos


def eepd_envelopes(x, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Smoothed rectified band-pass output, one row per EEPD band."""
    x = np.asarray(x, dtype=np.float64)
    fs = config.sample_rate
    width = max(1, int(round(config.eepd_smooth_ms * fs / 1000.0)))
    rows = []
    for lo, hi in config.eepd_bands:
        sos = _bandpass(config.eepd_filter_order, lo, hi, fs).copy()
        rows.append(_moving_average(np.abs(sps.sosfilt(sos, x)), width))
    return np.array(rows)


def eepd(x, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Envelope peak counts per band, in peaks per second.

    A peak is a local maximum of the band envelope above ``eepd_peak_frac``
    of the largest envelope value over all bands, and peaks are at least
    one smoothing window apart.
    """
    x = np.asarray(x, dtype=np.float64)
    env = eepd_envelopes(x, config)
    top = env.max() if env.size else 0.0
    out = np.zeros(env.shape[0])
    if not top > 0.0:
        return out
    dist = max(1, int(round(config.eepd_smooth_ms * config.sample_rate / 1000.0)))
    duration = x.size / config.sample_rate
    for b, e in enumerate(env):
        peaks, _ = sps.find_peaks(e, height=config.eepd_peak_frac * top, distance=dist)
        out[b] = peaks.size / duration
    return out


# ---------------------------------------------------------------- spectral / time


def magnitude_spectrum(x, sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    win = sps.get_window("hann", x.size) if x.size > 1 else np.ones(1)
    return rfftfreq(x.size, 1.0 / sample_rate), np.abs(rfft(x * win))


def spectral_features(x, sample_rate: float = 12000, rolloff_frac: float = 0.85) -> np.ndarray:
    f, M = magnitude_spectrum(x, sample_rate)
    total = M.sum()
    if not total > 0.0:
        return np.zeros(len(SPECTRAL_NAMES))
    w = M / total
    dominant = f[np.argmax(M)]
    centroid = float(np.sum(f * w))
    cum = np.cumsum(w)
    at = lambda q: f[min(np.searchsorted(cum, q), f.size - 1)]  # noqa: E731
    rolloff = at(rolloff_frac)
    dev = f - centroid
    spread = math.sqrt(float(np.sum(dev**2 * w)))
    if spread > 0:
        skew = float(np.sum(dev**3 * w)) / spread**3
        kurt = float(np.sum(dev**4 * w)) / spread**4
    else:
        skew, kurt = 0.0, 0.0
    bandwidth = at(0.95) - at(0.05)
    flatness = math.exp(float(np.mean(np.log(M + LOG_FLOOR)))) / (float(M.mean()) + LOG_FLOOR)
    std = float(np.std(M))
    fc = f - f.mean()
    denom = float(np.sum(fc**2))
    slope = float(np.sum(fc * (M - M.mean())) / denom) if denom > 0 else 0.0
    if M.size > 1 and M[1:].sum() > 0:
        k = np.arange(1, M.size)
        decrease = float(np.sum((M[1:] - M[0]) / k) / M[1:].sum())
    else:
        decrease = 0.0
    return np.array(
        [dominant, centroid, rolloff, spread, skew, kurt, bandwidth, flatness, std, slope, decrease]
    )


def time_features(x, sample_rate: float = 12000) -> np.ndarray:
    """RMS, zero crossings per second, crest factor (peak / RMS) and length in s."""
    x = np.asarray(x, dtype=np.float64)
    rms = math.sqrt(float(np.mean(x * x)))
    s = np.sign(x)
    s = s[s != 0]
    crossings = int(np.count_nonzero(s[1:] != s[:-1])) if s.size > 1 else 0
    duration = x.size / sample_rate
    crest = float(np.max(np.abs(x))) / rms if rms > 0 else 0.0
    return np.array([rms, crossings / duration, crest, duration])


# ---------------------------------------------------------------- PSD


def normalized_psd(x, sample_rate: float = 12000, nperseg: int = 1024) -> PsdCurve:
    """Welch periodogram scaled to unit trapezoidal area over 0..Nyquist."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < nperseg:
        raise ValueError(f"segment of {x.size} samples is shorter than one Welch window ({nperseg})")
    f, p = sps.welch(x, fs=sample_rate, window="hann", nperseg=nperseg, noverlap=nperseg // 2, detrend=False)
    area = trapezoid(p, f)
    if not area > 0:
        raise ValueError("signal has no power; PSD cannot be normalised")
    return PsdCurve(f, p / area)


def _band_integral(f: np.ndarray, p: np.ndarray, lo: float, hi: float) -> float:
    inner = (f > lo) & (f < hi)
    xs = np.concatenate(([lo], f[inner], [hi]))
    ys = np.concatenate(([np.interp(lo, f, p)], p[inner], [np.interp(hi, f, p)]))
    return float(trapezoid(ys, xs))


def band_powers(psd: PsdCurve, bands: Sequence[tuple[float, float]]) -> np.ndarray:
    """Exact integral of the piecewise-linear PSD over each band."""
    f, p = psd.freqs_hz, psd.density
    out = []
    for lo, hi in bands:
        if not f[0] <= lo < hi <= f[-1]:
            raise ValueError(f"band ({lo}, {hi}) outside the PSD grid [{f[0]}, {f[-1]}]")
        out.append(_band_integral(f, p, lo, hi))
    return np.array(out)


@dataclass(frozen=True)
class ClassPsdReport:
    freqs_hz: np.ndarray
    mean: Mapping[int, np.ndarray]
    ci: Mapping[int, np.ndarray]  # 95 % half-width
    counts: Mapping[int, int]
    band_pvalues: Mapping[tuple[float, float], float]
    band_means: Mapping[tuple[float, float], tuple[float, float]] = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        """Columns freq, mean_A, ci_A, mean_B, ci_B with A = healthy (0), B = COVID-19 (1)."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["freq", "mean_A", "ci_A", "mean_B", "ci_B"])
            for i, f in enumerate(self.freqs_hz):
                w.writerow([repr(float(f)), repr(float(self.mean[0][i])), repr(float(self.ci[0][i])),
                            repr(float(self.mean[1][i])), repr(float(self.ci[1][i]))])

    def bands_to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["f_lo", "f_hi", "mean_A", "mean_B", "p_value"])
            for band, p in self.band_pvalues.items():
                a, b = self.band_means[band]
                w.writerow([band[0], band[1], repr(a), repr(b), repr(p)])

    def to_svg(self, path: str | Path, title: str = "") -> None:
        import matplotlib

        matplotlib.use("Agg")
        matplotlib.rcParams["svg.hashsalt"] = "coughssl"  # stable element ids
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4))
        for cls, name in ((0, "healthy"), (1, "COVID-19")):
            m, c = self.mean[cls], self.ci[cls]
            ax.plot(self.freqs_hz, m, label=f"{name} (n={self.counts[cls]})")
            ax.fill_between(self.freqs_hz, m - c, m + c, alpha=0.3)
        ax.set_xlabel("Frequency (Hz)")
        ax.set_ylabel("Normalised PSD")
        ax.set_xlim(0, 3000)
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def class_psd_report(curves: Sequence[PsdCurve], labels, bands: Sequence[tuple[float, float]]) -> ClassPsdReport:
    """Mean normalised PSD with 95 % CI per class plus Welch t-tests of band powers."""
    labels = np.asarray(labels).astype(int)
    if len(curves) != labels.size:
        raise ValueError("one label per PSD curve required")
    for c in (0, 1):
        k = int(np.count_nonzero(labels == c))
        if k < 2:
            raise ValueError(f"class {c} has {k} segment(s); need at least 2")
    freqs = curves[0].freqs_hz
    D = np.array([c.density for c in curves])
    mean, ci, counts = {}, {}, {}
    for c in (0, 1):
        rows = D[labels == c]
        mean[c] = rows.mean(axis=0)
        ci[c] = 1.96 * rows.std(axis=0, ddof=1) / math.sqrt(rows.shape[0])
        counts[c] = rows.shape[0]
    pvals, bmeans = {}, {}
    for band in bands:
        bp = np.array([band_powers(c, [band])[0] for c in curves])
        a, b = bp[labels == 0], bp[labels == 1]
        res = stats.ttest_ind(a, b, equal_var=False)
        key = (float(band[0]), float(band[1]))
        pvals[key] = float(res.pvalue)
        bmeans[key] = (float(a.mean()), float(b.mean()))
    return ClassPsdReport(freqs, mean, ci, counts, pvals, bmeans)


# ---------------------------------------------------------------- assembly


def core_features(x, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """The 60 core features (MFCC stats, EEPD, spectral, time) of one segment."""
    fs = config.sample_rate
    return np.concatenate(
        (
            mfcc_stats(x, config),
            eepd(x, config),
            spectral_features(x, fs, config.rolloff_frac),
            time_features(x, fs),
        )
    )


def extract_features(
    x, config: FeatureConfig = FeatureConfig(), gender: float = math.nan, segment_ref=("", 0)
) -> FeatureVector:
    """Full feature vector: core, then gender (1 male / 0 female), then PSD bands.

    ``gender`` may be NaN until it is imputed.
    """
    parts = [core_features(x, config)]
    if config.include_gender:
        parts.append([gender])
    if config.psd_bands:
        psd = normalized_psd(x, config.sample_rate, config.welch_nperseg)
        parts.append(band_powers(psd, config.psd_bands))
    return FeatureVector(np.concatenate(parts), tuple(config.feature_names()), segment_ref)


# ---------------------------------------------------------------- gender


def train_gender_model(X, gender, groups, names: Sequence[str] = (), settings=None):
    """Fit a gender classifier (male = 1) on rows whose gender is known.

    ``X`` must not contain the gender column itself; ``gender`` holds
    1.0 / 0.0 / NaN per row.
    """
    from .modeling import ModelSettings, develop_model

    gender = np.asarray(gender, dtype=float)
    known = ~np.isnan(gender)
    if not known.any():
        raise ValueError("no recording carries a gender label")
    y = gender[known].astype(int)
    if np.unique(y).size < 2:
        raise ValueError("gender labels cover only one class")
    settings = settings or ModelSettings()
    return develop_model(np.asarray(X)[known], y, np.asarray(groups)[known], names, settings)


def impute_gender(model, X, gender, groups) -> np.ndarray:
    """Fill NaN genders with per-recording predictions; known values are kept."""
    gender = np.array(gender, dtype=float)
    missing = np.isnan(gender)
    if not missing.any():
        return gender
    groups = np.asarray(groups)
    ids, scores = model.recording_scores(np.asarray(X)[missing], groups[missing])
    pred = dict(zip(ids, (scores >= model.threshold).astype(float)))
    gender[missing] = [pred[g] for g in groups[missing]]
    return gender
