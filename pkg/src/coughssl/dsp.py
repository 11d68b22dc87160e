"""Pre-processing: peak normalisation, Butterworth low-pass and resampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from scipy import special

from .dataset_io import AudioSignal

CANONICAL_RATE = 12000
DEFAULT_CUTOFF_HZ = 6000.0
DEFAULT_ORDER = 4

RESAMPLE_TAPS = 64
KAISER_BETA = 8.0


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections, each ``(b0, b1, b2, a1, a2)`` with a0 == 1."""

    sections: tuple[tuple[float, float, float, float, float], ...]
    sample_rate: float

    def sos(self) -> np.ndarray:
        return np.array([[b0, b1, b2, 1.0, a1, a2] for b0, b1, b2, a1, a2 in self.sections])

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response at ``freqs_hz``."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / self.sample_rate)
        zi = 1.0 / z
        h = np.ones_like(z)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * zi + b2 * zi**2) / (1.0 + a1 * zi + a2 * zi**2)
        return h

    def gain(self, freqs_hz) -> np.ndarray:
        return np.abs(self.response(freqs_hz))

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for *_, a1, a2 in self.sections])


def normalize_peak(signal: AudioSignal) -> AudioSignal:
    x = signal.samples
    peak = np.max(np.abs(x))
    if peak == 0.0:
        raise ValueError("cannot peak-normalise an all-zero signal")
    return AudioSignal(x / peak, signal.sample_rate)


def design_butterworth_lp(order: int, cutoff_hz: float, sample_rate_hz: float) -> BiquadCascade:
    """Digital Butterworth low-pass via the pre-warped bilinear transform.

    Conjugate analog pole pairs become biquads; an odd order adds one
    first-order section (stored with b2 = a2 = 0).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    nyquist = sample_rate_hz / 2.0
    if not 0.0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz")

    k = 2.0 * sample_rate_hz
    wc = k * math.tan(math.pi * cutoff_hz / sample_rate_hz)
    sections = []
    for i in range(order // 2):
        theta = math.pi * (2 * i + order + 1) / (2 * order)
        a = -2.0 * math.cos(theta) * wc  # -2 Re(p) wc, positive
        d0 = k * k + a * k + wc * wc
        d1 = 2.0 * (wc * wc - k * k)
        d2 = k * k - a * k + wc * wc
        g = wc * wc / d0
        sections.append((g, 2.0 * g, g, d1 / d0, d2 / d0))
    if order % 2:
        d0 = k + wc
        sections.append((wc / d0, wc / d0, 0.0, (wc - k) / d0, 0.0))
    return BiquadCascade(tuple(sections), float(sample_rate_hz))


def apply_filter(cascade: BiquadCascade, signal: AudioSignal) -> AudioSignal:
    """Causal filtering from zero initial state; output length equals input."""
    if not math.isclose(cascade.sample_rate, signal.sample_rate):
        raise ValueError(
            f"filter designed for {cascade.sample_rate} Hz, signal is {signal.sample_rate} Hz"
        )
    y = sps.sosfilt(cascade.sos(), signal.samples)
    return AudioSignal(y, signal.sample_rate)


def _kaiser(u: np.ndarray, beta: float) -> np.ndarray:
    inside = np.clip(1.0 - u * u, 0.0, None)
    return special.i0(beta * np.sqrt(inside)) / special.i0(beta)


def resample(signal: AudioSignal, target_rate: int = CANONICAL_RATE) -> AudioSignal:
    """Windowed-sinc (Kaiser) interpolation to ``target_rate``.

    The kernel spans RESAMPLE_TAPS input samples; its cutoff tracks the
    lower of the two Nyquist rates and its weights are renormalised per
    output sample so DC passes with unit gain, edges included.
    """
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    src = signal.sample_rate
    if target_rate == src:
        return signal
    x = signal.samples
    n = x.size
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    m = max(1, int(round(n * up / down)))
    fc = min(1.0, up / down)
    half = RESAMPLE_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)
    # output k sits at input position k*down/up; its fractional part takes
    # only `up` distinct values, so the kernel is tabulated per phase
    d = np.arange(up)[:, None] / up - offsets[None, :]
    table = fc * np.sinc(fc * d) * _kaiser(d / half, KAISER_BETA)

    out = np.empty(m)
    chunk = 65536
    for s in range(0, m, chunk):
        k = np.arange(s, min(m, s + chunk), dtype=np.int64) * down
        base, phase = k // up, k % up
        idx = base[:, None] + offsets[None, :]
        valid = (idx >= 0) & (idx < n)
        w = np.where(valid, table[phase], 0.0)
        vals = x[np.clip(idx, 0, n - 1)]
        norm = w.sum(axis=1)
        norm[norm == 0.0] = 1.0
        out[s:s + k.size] = (w * vals).sum(axis=1) / norm
    return AudioSignal(out, target_rate)


def preprocess(
    signal: AudioSignal,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    order: int = DEFAULT_ORDER,
    target_rate: int = CANONICAL_RATE,
) -> AudioSignal:
    """Normalise, low-pass and resample one recording.

    The low-pass is skipped when the source is already band-limited at or
    below ``cutoff_hz`` (cutoff at or above its Nyquist frequency).
    """
    x = normalize_peak(signal)
    if cutoff_hz < x.sample_rate / 2.0:
        x = apply_filter(design_butterworth_lp(order, cutoff_hz, x.sample_rate), x)
    return resample(x, target_rate)
