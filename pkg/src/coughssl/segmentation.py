"""Cough segmentation by a debounced hysteresis comparator on signal power.

The comparator input is the squared signal smoothed by a short moving
average (``smooth_ms``); without it, oscillating audio drops to zero power
twice per period and no threshold run could ever last ``tolerance_ms``.

Rules, with ``U = upper_mult * mean(x**2)`` and ``L = lower_mult * mean(x**2)``:

* closed -> open once the envelope stays above U for ``tolerance`` samples;
  the onset is the first sample of that run.
* open -> closed once the envelope stays below L for ``tolerance`` samples;
  the (exclusive) end is the first sample of that run. A region still open
  at the end of the signal ends there.
* candidates shorter than ``min_cough`` samples are dropped, survivors are
  padded by ``pad`` samples on both sides, clipped, and overlapping or
  touching padded regions are merged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset_io import AudioSignal


@dataclass(frozen=True)
class SegmentationParams:
    lower_mult: float = 0.1
    upper_mult: float = 2.0
    tolerance_ms: float = 10.0
    min_cough_ms: float = 200.0
    pad_ms: float = 200.0
    smooth_ms: float = 10.0

    def __post_init__(self):
        if not 0 < self.lower_mult < self.upper_mult:
            raise ValueError("need 0 < lower_mult < upper_mult")
        for name in ("tolerance_ms", "min_cough_ms", "pad_ms", "smooth_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def samples(self, fs: int) -> tuple[int, int, int, int]:
        """(tolerance, min_cough, pad, smooth) in samples at rate ``fs``."""
        conv = lambda ms: max(1, int(round(ms * fs / 1000.0)))  # noqa: E731
        return conv(self.tolerance_ms), conv(self.min_cough_ms), conv(self.pad_ms), conv(self.smooth_ms)


@dataclass(frozen=True)
class CoughSegment:
    start_sample: int
    end_sample: int
    recording_uuid: str = ""

    def __post_init__(self):
        if not 0 <= self.start_sample < self.end_sample:
            raise ValueError(f"bad segment span [{self.start_sample}, {self.end_sample})")

    def __len__(self) -> int:
        return self.end_sample - self.start_sample


class UndefinedSNR(ValueError):
    pass


def power_envelope(x: np.ndarray, width: int) -> np.ndarray:
    """Centred moving average of ``x**2`` (window shrinks at the edges)."""
    p = np.asarray(x, dtype=np.float64) ** 2
    if width <= 1:
        return p
    c = np.concatenate(([0.0], np.cumsum(p)))
    n = p.size
    lo_off = width // 2
    hi_off = width - lo_off
    idx = np.arange(n)
    lo = np.clip(idx - lo_off, 0, n)
    hi = np.clip(idx + hi_off, 0, n)
    return (c[hi] - c[lo]) / (hi - lo)


def _thresholds(x: np.ndarray, params: SegmentationParams) -> tuple[float, float]:
    mean_power = float(np.mean(np.asarray(x, dtype=np.float64) ** 2))
    return params.lower_mult * mean_power, params.upper_mult * mean_power


def _runs(mask: np.ndarray, min_len: int) -> np.ndarray:
    """Start indices of True-runs of length >= min_len."""
    d = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return starts[(ends - starts) >= min_len]


def _finish(candidates, n, min_cough, pad, uuid) -> list[CoughSegment]:
    out: list[list[int]] = []
    for s, e in candidates:
        if e - s < min_cough:
            continue
        s, e = max(0, s - pad), min(n, e + pad)
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [CoughSegment(s, e, uuid) for s, e in out]


def segment_coughs(
    signal: AudioSignal, params: SegmentationParams = SegmentationParams(), uuid: str = ""
) -> list[CoughSegment]:
    x = signal.samples
    n = x.size
    tol, min_cough, pad, smooth = params.samples(signal.sample_rate)
    lower, upper = _thresholds(x, params)
    env = power_envelope(x, smooth)
    # a run above U can never overlap a run below L, so the state machine
    # reduces to alternating searches over the two run lists
    high = _runs(env > upper, tol)
    low = _runs(env < lower, tol)

    candidates = []
    pos = 0
    while True:
        i = np.searchsorted(high, pos)
        if i == high.size:
            break
        start = int(high[i])
        j = np.searchsorted(low, start)
        if j == low.size:
            candidates.append((start, n))
            break
        end = int(low[j])
        candidates.append((start, end))
        pos = end + tol
    return _finish(candidates, n, min_cough, pad, uuid)


def segment_coughs_reference(
    signal: AudioSignal, params: SegmentationParams = SegmentationParams(), uuid: str = ""
) -> list[CoughSegment]:
    """Sample-by-sample simulation of the comparator; slow, used as an oracle."""
    x = signal.samples
    n = x.size
    tol, min_cough, pad, smooth = params.samples(signal.sample_rate)
    lower, upper = _thresholds(x, params)
    env = power_envelope(x, smooth)

    candidates = []
    is_open = False
    run = 0
    start = 0
    for k in range(n):
        v = env[k]
        if not is_open:
            run = run + 1 if v > upper else 0
            if run == tol:
                is_open, start, run = True, k - tol + 1, 0
        else:
            run = run + 1 if v < lower else 0
            if run == tol:
                candidates.append((start, k - tol + 1))
                is_open, run = False, 0
    if is_open:
        candidates.append((start, n))

    merged: list[list[int]] = []
    for s, e in candidates:
        if e - s < min_cough:
            continue
        s = s - pad if s - pad >= 0 else 0
        e = e + pad if e + pad <= n else n
        if merged and s <= merged[-1][1]:
            if e > merged[-1][1]:
                merged[-1][1] = e
        else:
            merged.append([s, e])
    return [CoughSegment(s, e, uuid) for s, e in merged]


def segment_mask(n: int, segments: Sequence[CoughSegment]) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for seg in segments:
        mask[seg.start_sample:seg.end_sample] = True
    return mask


def estimate_snr(signal: AudioSignal, segments: Sequence[CoughSegment]) -> float:
    """20*log10 of RMS inside the segments over RMS outside them."""
    x = signal.samples
    mask = segment_mask(x.size, segments)
    if not mask.any():
        raise UndefinedSNR("no cough segments: SNR undefined")
    if mask.all():
        raise UndefinedSNR("segments cover the whole recording: SNR undefined")
    rms_in = math.sqrt(float(np.mean(x[mask] ** 2)))
    rms_out = math.sqrt(float(np.mean(x[~mask] ** 2)))
    if rms_out == 0.0:
        return math.inf if rms_in > 0 else 0.0
    if rms_in == 0.0:
        return -math.inf
    return 20.0 * math.log10(rms_in / rms_out)
