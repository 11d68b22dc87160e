import math

import numpy as np
import pytest
from scipy import signal as sps

from coughssl.features import (
    FeatureConfig,
    PsdCurve,
    band_powers,
    class_psd_report,
    eepd,
    extract_features,
    impute_gender,
    mfcc_matrix,
    mfcc_stats,
    normalized_psd,
    spectral_features,
    time_features,
    train_gender_model,
)
from coughssl.modeling import ModelSettings

FS = 12000
CFG = FeatureConfig()


def _tone(f, dur=1.0, amp=1.0, fs=FS):
    return amp * np.sin(2 * np.pi * f * np.arange(int(dur * fs)) / fs)


# ---------------------------------------------------------------- MFCC oracle


def _naive_mfcc(x, fs=FS, n_fft=1024, hop=512, n_mels=40, n_ceps=13, floor=1e-10):
    """Loop-based MFCC: periodic Hann, direct DFT, HTK mel triangles, orthonormal DCT-II."""
    mel = lambda f: 2595.0 * math.log10(1.0 + f / 700.0)  # noqa: E731
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)  # noqa: E731
    top = mel(fs / 2)
    edges = [inv(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    bins = n_fft // 2 + 1
    freqs = [k * fs / n_fft for k in range(bins)]
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        for k, f in enumerate(freqs):
            if lo < f <= c:
                fb[m, k] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[m, k] = (hi - f) / (hi - c)
    win = np.array([0.5 - 0.5 * math.cos(2 * math.pi * n / n_fft) for n in range(n_fft)])
    kk = np.arange(bins)[:, None] * np.arange(n_fft)[None, :]
    dft = np.exp(-2j * np.pi * kk / n_fft)
    out = []
    start = 0
    while start + n_fft <= len(x):
        mag = np.abs(dft @ (x[start:start + n_fft] * win))
        logmel = [math.log(max(float(fb[m] @ mag), floor)) for m in range(n_mels)]
        ceps = []
        for q in range(n_ceps):
            s = sum(logmel[m] * math.cos(math.pi * q * (2 * m + 1) / (2 * n_mels)) for m in range(n_mels))
            scale = math.sqrt(1.0 / n_mels) if q == 0 else math.sqrt(2.0 / n_mels)
            ceps.append(scale * s)
        out.append(ceps)
        start += hop
    return np.array(out)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mfcc_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(4000) * np.hanning(4000) + 0.3 * _tone(700, 4000 / FS)
    got = mfcc_matrix(x, CFG)
    ref = _naive_mfcc(x)
    assert got.shape == ref.shape == (6, 13)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9)


def test_identical_frames_zero_std():
    frame = np.random.default_rng(0).standard_normal(512)
    x = np.tile(frame, 4)  # hop 512 -> every 1024 frame is identical
    stats = mfcc_stats(x, CFG)
    assert stats.shape == (26,)
    np.testing.assert_allclose(stats[13:], 0.0, atol=1e-9)


def test_dc_segment_finite():
    assert np.all(np.isfinite(mfcc_stats(np.full(3000, 0.25), CFG)))
    assert np.all(np.isfinite(mfcc_stats(np.zeros(3000), CFG)))


def test_440_vs_880():
    a = mfcc_stats(_tone(440, 0.5), CFG)[:13]
    b = mfcc_stats(_tone(880, 0.5), CFG)[:13]
    assert np.linalg.norm(a - b) > 1.0


def test_short_segment_rejected():
    with pytest.raises(ValueError):
        mfcc_stats(np.ones(1000), CFG)


# ---------------------------------------------------------------- EEPD


def _reference_envelope(x, lo, hi, fs=FS, smooth_ms=50.0):
    b, a = sps.butter(4, [lo, hi], btype="bandpass", fs=fs)
    env = np.abs(sps.lfilter(b, a, x))
    w = int(round(smooth_ms * fs / 1000))
    env = np.convolve(env, np.ones(w) / w, mode="same")
    return env


def test_eepd_75hz_burst():
    x = np.zeros(int(0.9 * FS))
    s = int(0.3 * FS)
    x[s:s + int(0.3 * FS)] = _tone(75, 0.3)
    counts = eepd(x, CFG)
    assert counts.shape == (19,)
    bands = CFG.eepd_bands
    assert counts[0] >= 1 / 0.9 - 1e-9
    for (lo, _), c in zip(bands, counts):
        if lo >= 150:
            assert c == 0
    # independent envelope simulation agrees: the 50-100 Hz envelope dominates
    envs = {band: _reference_envelope(x, *band) for band in bands}
    top = max(e.max() for e in envs.values())
    assert envs[bands[0]].max() == top
    for band, e in envs.items():
        if band[0] >= 150:
            assert e.max() < 0.1 * top


def test_eepd_zero_segment():
    np.testing.assert_array_equal(eepd(np.zeros(2000), CFG), np.zeros(19))


# ---------------------------------------------------------------- spectral / time


def test_spectral_pure_sine():
    f = spectral_features(_tone(1000), FS)
    bin_hz = 1.0
    assert abs(f[0] - 1000) <= bin_hz
    assert abs(f[1] - 1000) <= 5


def test_flatness_noise_vs_sine():
    noise_ok = sine_ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        noise_ok += spectral_features(rng.standard_normal(6000), FS)[7] > 0.5
        tone = _tone(rng.uniform(200, 4000), 0.5, amp=rng.uniform(0.1, 1))
        sine_ok += spectral_features(tone, FS)[7] < 0.1
    assert noise_ok == 100 and sine_ok == 100


def test_two_tone_symmetry():
    x = _tone(900) + _tone(1100)
    f = spectral_features(x, FS)
    assert abs(f[1] - 1000) <= 1.0
    assert abs(f[4]) < 1e-2


def test_time_features_closed_forms():
    rms, zcr, crest, length = time_features(np.full(12000, 0.5), FS)
    assert (rms, zcr, crest, length) == (0.5, 0.0, 1.0, 1.0)
    sq = np.sign(_tone(50))
    sq[sq == 0] = 1
    assert time_features(sq, FS)[2] == pytest.approx(1.0)
    assert time_features(_tone(50), FS)[2] == pytest.approx(math.sqrt(2), abs=1e-3)
    assert time_features(_tone(50), FS)[1] == pytest.approx(100.0, abs=2.0)


# ---------------------------------------------------------------- PSD


def test_psd_unit_area_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = sps.lfilter([1.0], [1.0, -rng.uniform(-0.9, 0.9)], rng.standard_normal(rng.integers(1024, 8000)))
        assert normalized_psd(x, FS).area() == pytest.approx(1.0, abs=1e-6)


def test_psd_sine_concentration():
    psd = normalized_psd(_tone(1000), FS)
    assert band_powers(psd, [(950, 1050)])[0] >= 0.9


def test_psd_scale_invariance():
    x = np.random.default_rng(3).standard_normal(5000)
    a = normalized_psd(x, FS)
    for c in (1e-4, 0.3, 7.0, 1e3):
        np.testing.assert_allclose(normalized_psd(c * x, FS).density, a.density, rtol=1e-9, atol=1e-15)


def test_psd_short_segment():
    with pytest.raises(ValueError):
        normalized_psd(np.ones(500), FS)


def test_band_power_rules():
    psd = normalized_psd(np.random.default_rng(1).standard_normal(8000), FS)
    assert band_powers(psd, [(0, 6000)])[0] == pytest.approx(1.0, abs=1e-6)
    edges = [0, 333.3, 1000, 2500.5, 4100, 6000]
    parts = band_powers(psd, list(zip(edges[:-1], edges[1:])))
    assert parts.sum() == pytest.approx(1.0, abs=1e-6)
    sine = normalized_psd(_tone(1000), FS)
    hi, lo = band_powers(sine, [(1000, 1500), (400, 550)])
    assert hi > 100 * lo
    with pytest.raises(ValueError):
        band_powers(psd, [(5000, 7000)])


# ---------------------------------------------------------------- class report


def _noise_curves(n, seed, boost_db=0.0):
    rng = np.random.default_rng(seed)
    sos = sps.butter(4, [1000, 1500], btype="bandpass", fs=FS, output="sos")
    curves = []
    for _ in range(n):
        x = sps.lfilter([1.0], [1.0, -rng.uniform(0.0, 0.5)], rng.standard_normal(6000))
        if boost_db:
            band = sps.sosfilt(sos, x)
            x = x + (10 ** (boost_db / 20) - 1) * band
        curves.append(normalized_psd(x, FS))
    return curves


def test_class_report_null():
    curves = _noise_curves(80, 0)
    bands = CFG.psd_bands
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(100):
        labels = rng.permutation(np.repeat([0, 1], 40))
        rep = class_psd_report(curves, labels, bands)
        hits += any(p < 1e-3 for p in rep.band_pvalues.values())
    assert hits <= 5


def test_class_report_boosted_band():
    curves = _noise_curves(30, 2) + _noise_curves(30, 3, boost_db=6.0)
    labels = np.repeat([0, 1], 30)
    rep = class_psd_report(curves, labels, CFG.psd_bands)
    assert rep.band_pvalues[(1000.0, 1500.0)] < 1e-10
    assert rep.band_means[(1000.0, 1500.0)][1] > rep.band_means[(1000.0, 1500.0)][0]
    assert rep.counts == {0: 30, 1: 30}


def test_class_report_single_class(tmp_path):
    curves = _noise_curves(4, 0)
    with pytest.raises(ValueError):
        class_psd_report(curves, [1, 1, 1, 1], CFG.psd_bands)


def test_class_report_outputs(tmp_path):
    curves = _noise_curves(6, 0)
    rep = class_psd_report(curves, [0, 0, 0, 1, 1, 1], CFG.psd_bands)
    rep.to_csv(tmp_path / "psd.csv")
    rep.bands_to_csv(tmp_path / "bands.csv")
    rep.to_svg(tmp_path / "psd.svg")
    assert (tmp_path / "psd.csv").read_text().startswith("freq,mean_A,ci_A,mean_B,ci_B")
    assert len((tmp_path / "bands.csv").read_text().splitlines()) == 4
    assert (tmp_path / "psd.svg").read_text().lstrip().startswith("<?xml")


# ---------------------------------------------------------------- assembly


def test_feature_vector_shape_and_names():
    names = CFG.feature_names()
    assert len(names) == 60 + 1 + 3 and len(set(names)) == len(names)
    fv = extract_features(np.random.default_rng(0).standard_normal(3000), CFG, gender=1.0, segment_ref=("u", 2))
    assert len(fv.values) == 64 and fv.names == tuple(names)
    assert fv.values[names.index("gender")] == 1.0


def test_features_finite_on_random_audio():
    rng = np.random.default_rng(9)
    for _ in range(30):
        n = int(rng.integers(1100, 9000))
        kind = rng.integers(3)
        if kind == 0:
            x = rng.standard_normal(n)
        elif kind == 1:
            x = _tone(rng.uniform(50, 5000), n / FS) * np.hanning(n)
        else:
            # click away from the edges, where Welch windows are zero or absent
            x = np.zeros(n)
            x[rng.integers(n // 4, n // 2)] = 1.0
        v = extract_features(x * rng.uniform(1e-4, 1.0), CFG, gender=0.0).values
        assert np.all(np.isfinite(v))


def test_scale_behaviour():
    x = np.random.default_rng(4).standard_normal(4000) * np.hanning(4000)
    names = CFG.feature_names()
    a = extract_features(x, CFG, gender=1.0).values
    b = extract_features(3.5 * x, CFG, gender=1.0).values
    for name in ("zero_crossing_rate", "crest_factor", "signal_length") + tuple(CFG.psd_names()):
        i = names.index(name)
        assert b[i] == pytest.approx(a[i], rel=1e-9)
    i = names.index("rms_power")
    assert b[i] == pytest.approx(3.5 * a[i], rel=1e-12)


# ---------------------------------------------------------------- gender


def _gender_data(seed=0, n_rec=60, per=3):
    rng = np.random.default_rng(seed)
    g_rec = rng.integers(0, 2, n_rec).astype(float)
    groups = np.repeat([f"r{i}" for i in range(n_rec)], per)
    g = np.repeat(g_rec, per)
    X = rng.standard_normal((g.size, 5))
    X[:, 0] = 4 * g - 2 + 0.1 * rng.standard_normal(g.size)
    return X, g, groups


SMALL = ModelSettings(kinds=("logistic_regression",), budget=4, use_smote=False, n_folds=3)


def test_gender_perfect_feature():
    X, g, groups = _gender_data()
    partial = g.copy()
    hide = np.isin(groups, [f"r{i}" for i in range(0, 60, 3)])
    partial[hide] = np.nan
    model = train_gender_model(X, partial, groups, settings=SMALL)
    out = impute_gender(model, X, partial, groups)
    np.testing.assert_array_equal(out, g)
    np.testing.assert_array_equal(out[~hide], partial[~hide])


def test_gender_without_labels():
    X, g, groups = _gender_data()
    with pytest.raises(ValueError):
        train_gender_model(X, np.full_like(g, np.nan), groups, settings=SMALL)


def test_psd_curve_area_helper():
    c = PsdCurve(np.array([0.0, 1.0, 2.0]), np.array([0.5, 0.5, 0.5]))
    assert c.area() == 1.0
