import itertools
import warnings

import numpy as np
import pytest

from coughssl import ml_core as mc
from coughssl.dataset_io import (
    ExpertLabel,
    LabelRecord,
    LabelSource,
    RecordingMeta,
    SslStatus,
    UserStatus,
)
from coughssl.modeling import ModelSettings, develop_model
from coughssl.ssl import (
    EXPERT,
    MAJORITY,
    SCHEMES,
    UNIVERSAL,
    ExpertModelSet,
    FeatureTable,
    NoEligibleAnnotator,
    apply_agreement,
    build_ssl_dataset,
    coverage_report,
    evaluate,
    is_majority_conflict,
    propagate,
    ssl_labels,
    train_expert_models,
    train_final_model,
)

C, H = ExpertLabel.COVID, ExpertLabel.HEALTHY
SMALL = ModelSettings(kinds=("logistic_regression",), budget=4, n_folds=3, use_smote=False, rfecv="never")
ANN = ("1", "2", "3")


def _rec(votes, user=UserStatus.NONE):
    labels = dict(zip(ANN, votes))
    return LabelRecord("r", user, labels, {a: LabelSource.PSEUDO_MODEL for a in labels}, SslStatus.DISCARDED)


# ---------------------------------------------------------------- agreement rules


def test_scheme_examples():
    r = _rec((C, C, C), UserStatus.COVID)
    assert apply_agreement(r, UNIVERSAL) is SslStatus.COVID
    r = _rec((C, C, H))
    assert apply_agreement(r, EXPERT) is SslStatus.DISCARDED
    assert apply_agreement(r, MAJORITY) is SslStatus.DISCARDED
    r = _rec((C, C, H), UserStatus.COVID)
    assert apply_agreement(r, MAJORITY) is SslStatus.COVID
    assert apply_agreement(r, UNIVERSAL) is SslStatus.DISCARDED


def test_universal_needs_user_and_expert_ignores_user():
    assert apply_agreement(_rec((H, H, H)), UNIVERSAL) is SslStatus.DISCARDED
    assert apply_agreement(_rec((H, H, H), UserStatus.COVID), UNIVERSAL) is SslStatus.DISCARDED
    assert apply_agreement(_rec((H, H, H), UserStatus.COVID), EXPERT) is SslStatus.HEALTHY
    # symptomatic users carry no trainable label
    assert apply_agreement(_rec((C, H, C), UserStatus.SYMPTOMATIC), MAJORITY) is SslStatus.DISCARDED


def test_majority_conflict_flag():
    r = _rec((C, C, H), UserStatus.HEALTHY)
    assert apply_agreement(r, MAJORITY) is SslStatus.DISCARDED
    assert is_majority_conflict(r, ANN)
    assert not is_majority_conflict(_rec((C, C, H)), ANN)
    assert not is_majority_conflict(_rec((C, C, C), UserStatus.HEALTHY), ANN)


def test_missing_slot_and_unknown_scheme():
    with pytest.raises(ValueError):
        apply_agreement(_rec((C, C)), MAJORITY, ANN)
    with pytest.raises(ValueError):
        apply_agreement(_rec((C, C, C)), "plurality")


def test_inclusion_over_all_records():
    users = [UserStatus.COVID, UserStatus.HEALTHY, UserStatus.NONE, UserStatus.SYMPTOMATIC]
    for k in (1, 2, 3, 4, 5):
        ann = tuple(str(i) for i in range(k))
        for votes in itertools.product((C, H), repeat=k):
            for u in users:
                r = LabelRecord("r", u, dict(zip(ann, votes)), {a: LabelSource.PSEUDO_MODEL for a in ann},
                                SslStatus.DISCARDED)
                out = {s: apply_agreement(r, s) for s in SCHEMES}
                if out[UNIVERSAL] is not SslStatus.DISCARDED:
                    assert out[EXPERT] is out[UNIVERSAL]
                if out[EXPERT] is not SslStatus.DISCARDED:
                    assert out[MAJORITY] is out[EXPERT]


# ---------------------------------------------------------------- tabular fixture


def _world(seed=0, n_rec=120, per=3, coverage=(0.6, 0.6, 0.6), noise=0.1):
    rng = np.random.default_rng(seed)
    truth = (rng.random(n_rec) < 0.4).astype(int)
    uuids = np.array([f"r{i:03d}" for i in range(n_rec)], dtype=object)
    corpus = []
    for i, u in enumerate(uuids):
        labels = {}
        for a, cov in zip(ANN, coverage):
            if rng.random() < cov:
                lab = truth[i] if rng.random() > noise else 1 - truth[i]
                labels[a] = C if lab else H
            else:
                labels[a] = ExpertLabel.NONE
        r = rng.random()
        user = UserStatus.NONE if r < 0.3 else (
            (UserStatus.COVID if truth[i] else UserStatus.HEALTHY) if r < 0.8
            else (UserStatus.HEALTHY if truth[i] else UserStatus.COVID))
        corpus.append(RecordingMeta(u, user, labels, split="train" if i < 0.75 * n_rec else "test"))
    rows = np.repeat(np.arange(n_rec), per)
    X = rng.standard_normal((rows.size, 6))
    X[:, 0] += 2.0 * truth[rows]
    X[:, 1] += 1.0 * truth[rows]
    table = FeatureTable(uuids[rows], np.tile(np.arange(per), n_rec), X, tuple(f"f{j}" for j in range(6)))
    return corpus, table, truth


@pytest.fixture(scope="module")
def world():
    corpus, table, truth = _world()
    models = train_expert_models(corpus, table, ANN, SMALL)
    return corpus, table, truth, models


def test_feature_table_csv_round_trip(tmp_path):
    _, table, _ = _world(n_rec=10)
    table.to_csv(tmp_path / "f.csv")
    back = FeatureTable.from_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(back.X, table.X)
    assert back.uuids.tolist() == table.uuids.tolist() and back.names == table.names


def test_three_eligible_models(world):
    _, _, _, models = world
    assert models.annotators == list(ANN)
    assert not models.excluded
    for m in models.models.values():
        assert m.aggregation == mc.LOGIT_MEAN
        assert np.isfinite(m.threshold)


def test_sparse_annotator_excluded():
    corpus, table, _ = _world(seed=1)
    # annotator 3 keeps a single COVID-19 label
    first = True
    thinned = []
    for m in corpus:
        labels = dict(m.expert_labels)
        if labels["3"] is C:
            if first:
                first = False
            else:
                labels["3"] = ExpertLabel.NONE
        thinned.append(RecordingMeta(m.uuid, m.user_status, labels, split=m.split))
    models = train_expert_models(thinned, table, ANN, SMALL)
    assert models.annotators == ["1", "2"]
    assert models.excluded["3"] == "minority count 1 < 10"


def test_no_eligible_annotator():
    corpus, table, _ = _world(seed=2, n_rec=30, coverage=(0.1, 0.1, 0.1))
    with pytest.raises(NoEligibleAnnotator):
        train_expert_models(corpus, table, ANN, SMALL)


def test_propagate_keeps_originals_and_thresholds(world):
    corpus, table, _, models = world
    records, unlabelable = propagate(models, corpus, table)
    assert unlabelable == []
    by_id = {m.uuid: m for m in corpus}
    scores = {a: dict(zip(*m.recording_scores(table.X, table.uuids, mc.LOGIT_MEAN))) for a, m in models.models.items()}
    for r in records:
        for a in ANN:
            orig = by_id[r.uuid].expert_labels[a]
            if orig in (C, H):
                assert r.expert_or_pseudo[a] is orig
                assert r.label_source[a] is LabelSource.ORIGINAL_EXPERT
            else:
                expect = C if scores[a][r.uuid] >= models.models[a].threshold else H
                assert r.expert_or_pseudo[a] is expect
                assert r.label_source[a] is LabelSource.PSEUDO_MODEL


def test_recording_without_segments_is_unlabelable(world):
    corpus, table, _, models = world
    extra = list(corpus) + [RecordingMeta("ghost", UserStatus.COVID, {"1": C, "2": C, "3": C})]
    records, unlabelable = propagate(models, extra, table)
    assert unlabelable == ["ghost"]
    assert "ghost" not in {r.uuid for r in records}


def test_build_dataset_and_report(world):
    corpus, table, _, models = world
    by_scheme, report = coverage_report(corpus, table, models)
    kept = {s: set(ssl_labels(by_scheme[s])) for s in SCHEMES}
    assert kept[UNIVERSAL] <= kept[EXPERT] <= kept[MAJORITY]
    assert [r.scheme for r in report.rows] == ["user", *SCHEMES]
    for s in SCHEMES:
        row = report.row(s)
        labels = ssl_labels(by_scheme[s])
        discarded = {r.uuid for r in by_scheme[s] if r.ssl_status is SslStatus.DISCARDED}
        assert not discarded & set(labels)
        assert row.train_recordings + row.test_recordings == len(labels)
        assert row.train_coughs + row.test_coughs == 3 * len(labels)
        assert 0 <= row.train_positive_recordings <= row.train_recordings
    assert "mean JS" in report.summary()


def test_order_independence(world):
    corpus, table, _, models = world
    a, _ = build_ssl_dataset(corpus, table, models, MAJORITY)
    b, _ = build_ssl_dataset(corpus[::-1], table, models, MAJORITY)
    assert {r.uuid: r for r in a} == {r.uuid: r for r in b}


def test_final_model_and_evaluate(world):
    corpus, table, truth, models = world
    records, _ = build_ssl_dataset(corpus, table, models, MAJORITY)
    splits = {m.uuid: m.split for m in corpus}
    labels = ssl_labels(records)
    train = {u: v for u, v in labels.items() if splits[u] == "train"}
    test = {u: v for u, v in labels.items() if splits[u] == "test"}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = train_final_model(train, table, SMALL)
        again = train_final_model(train, table, SMALL)
    assert model.to_json() == again.to_json()
    m = evaluate(model, table, test)
    assert m["auc_aggregated"] > 0.9
    assert m["n_recordings"] == len(test)
    with pytest.raises(ValueError):
        train_final_model({u: 1 for u in train}, table, SMALL)


def test_evaluate_perfect_model():
    uuids = np.array(["a", "a", "b", "b", "c", "c", "d", "d"], dtype=object)
    X = np.array([[1.0], [2], [1.5], [1.2], [-1], [-2], [-1.1], [-1.4]])
    table = FeatureTable(uuids, np.tile([0, 1], 4), X, ("x",))
    s = mc.Standardizer(np.zeros(1), np.ones(1), np.zeros(1, bool))
    model = mc.TrainedModel(s, mc.LinearModel(np.array([5.0]), 0.0, mc.LOGISTIC), np.ones(1, bool), 0.0,
                            mc.LOGIT_MEAN)
    m = evaluate(model, table, {"a": 1, "b": 1, "c": 0, "d": 0})
    assert m["auc_not_aggregated"] == 1.0 and m["auc_aggregated"] == 1.0
    assert m["sensitivity"] == 1.0 and m["specificity"] == 1.0
    with pytest.raises(ValueError):
        evaluate(model, table, {"a": 1, "b": 1})


def test_expert_model_set_is_plain_mapping():
    corpus, table, _ = _world(seed=3, n_rec=60)
    rows = np.arange(len(table))
    y = np.repeat([int(m.uuid[-1]) % 2 for m in corpus], 3)
    model = develop_model(table.X[rows], y, table.uuids, table.names, SMALL)
    ms = ExpertModelSet({"x": model})
    assert ms.annotators == ["x"] and dict(ms.excluded) == {}
