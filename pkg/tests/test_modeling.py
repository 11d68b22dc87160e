import warnings

import numpy as np
import pytest

from coughssl import ml_core as mc
from coughssl.modeling import ModelSettings, develop_model


def _data(seed=0, n_rec=80, per=3, d=8):
    rng = np.random.default_rng(seed)
    y_rec = (rng.random(n_rec) < 0.35).astype(int)
    groups = np.repeat([f"g{i}" for i in range(n_rec)], per)
    y = np.repeat(y_rec, per)
    X = rng.standard_normal((y.size, d))
    X[:, 0] += 3.0 * y
    X[:, 2] -= 2.0 * y
    # arbitrary units per column; standardisation must undo them
    return X * rng.uniform(0.5, 20, d) + rng.uniform(-5, 5, d), y, groups


FAST = ModelSettings(budget=6, n_folds=3)


def test_develop_model_basic():
    X, y, g = _data()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, report = develop_model(X, y, g, [f"x{i}" for i in range(8)], FAST, return_report=True)
    assert model.model.kind in FAST.kinds
    assert model.aggregation in (mc.LOGIT_MEAN, mc.LOGIT_MEDIAN)
    assert np.isfinite(model.threshold)
    assert set(report.kind_scores) == set(FAST.kinds)
    assert report.cv_auc > 0.8
    ids, s = model.recording_scores(X, g)
    assert mc.roc_auc(s, [y[g == i][0] for i in ids]) > 0.85


def test_rfecv_always_gives_strict_subset():
    X, y, g = _data(1, d=12)
    settings = ModelSettings(budget=5, n_folds=3, rfecv="always")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, report = develop_model(X, y, g, settings=settings, return_report=True)
    assert report.rfecv_applied
    assert 1 <= model.feature_mask.sum() < 12
    assert model.feature_mask[0]


def test_fixed_aggregation_respected():
    X, y, g = _data(2)
    model = develop_model(X, y, g, settings=ModelSettings(budget=4, n_folds=3, aggregation=mc.LOGIT_MEDIAN))
    assert model.aggregation == mc.LOGIT_MEDIAN


def test_deterministic_and_json():
    X, y, g = _data(3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = develop_model(X, y, g, settings=FAST)
        b = develop_model(X, y, g, settings=FAST)
    assert a.to_json() == b.to_json()
    back = mc.TrainedModel.from_json(a.to_json())
    np.testing.assert_array_equal(back.cough_proba(X), a.cough_proba(X))
    assert back.fingerprint == a.fingerprint != ""


def test_one_class_rejected():
    X, y, g = _data(4)
    with pytest.raises(ValueError):
        develop_model(X, np.zeros_like(y), g, settings=FAST)
