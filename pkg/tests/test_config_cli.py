import json
import shutil

import pytest

from coughssl import pipeline
from coughssl.cli import main
from coughssl.config import EXIT_CONFIG, EXIT_DATA, EXIT_OK, ConfigError, PipelineConfig

# ---------------------------------------------------------------- config


def test_defaults_and_overrides(tmp_path):
    cfg = PipelineConfig.load(None, ["ml.budget=7", "dsp.cutoff_hz=5000", 'ml.scheme="expert"'], check_paths=False)
    assert cfg.data["ml"]["budget"] == 7
    assert cfg.data["dsp"]["cutoff_hz"] == 5000.0 and isinstance(cfg.data["dsp"]["cutoff_hz"], float)
    assert cfg.data["ml"]["scheme"] == "expert"
    s = cfg.model_settings()
    assert s.budget == 7


def test_file_then_override(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[ml]\nbudget = 3\nseed = 5\n")
    cfg = PipelineConfig.load(p, ["ml.seed=9"], check_paths=False)
    assert cfg.data["ml"]["budget"] == 3 and cfg.seed == 9
    assert cfg.base_dir == tmp_path.resolve()


@pytest.mark.parametrize(
    "text,overrides",
    [
        ("[nope]\na = 1\n", []),
        ("[ml]\nbudgett = 3\n", []),
        ('[ml]\nbudget = "many"\n', []),
        ("[ml]\nbudget = 0\n", []),
        ("[segmentation]\nlower_mult = 3.0\n", []),
        ('[ml]\nkinds = ["svm"]\n', []),
        ("", ["ml.budget"]),
        ("", ["ml.nothing=1"]),
        ("", ['ml.scheme="plurality"']),
        ("[ml\n", []),
    ],
)
def test_config_errors(tmp_path, text, overrides):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        PipelineConfig.load(p, overrides, check_paths=False)


def test_missing_paths(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[paths]\naudio_dir = "none"\n')
    with pytest.raises(ConfigError, match="audio_dir"):
        PipelineConfig.load(p)
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "absent.toml")


def test_section_hash_tracks_only_its_sections():
    a = PipelineConfig.load(None, check_paths=False)
    b = PipelineConfig.load(None, ["ml.budget=3"], check_paths=False)
    assert a.section_hash("segmentation") == b.section_hash("segmentation")
    assert a.section_hash("ml") != b.section_hash("ml")


# ---------------------------------------------------------------- cli


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("[ml]\nbudget = -1\n")
    assert main(["preprocess", "--config", str(p)]) == EXIT_CONFIG
    assert "ml.budget" in capsys.readouterr().err


def test_cli_missing_upstream(tmp_path, capsys):
    assert main(["synth", str(tmp_path), "--recordings", "12"]) == EXIT_OK
    rc = main(["features", "--config", str(tmp_path / "config.toml")])
    assert rc == EXIT_DATA
    err = capsys.readouterr().err
    assert "preprocess" in err and "coughssl preprocess" in err


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    assert main(["synth", str(d), "--recordings", "60", "--seed", "0"]) == EXIT_OK
    rc = main(["run", "--config", str(d / "config.toml"), "--budget", "4"])
    assert rc == EXIT_OK
    return d


def test_smoke_run_artifacts(smoke):
    out = smoke / "out"
    expected = [
        "recordings.csv", "segments.csv", "features.csv", "experts.json",
        "models/final_ssl.json", "models/final_user.json", "models/gender.json",
        "labels.csv", "coverage.csv", "coverage.txt", "metrics.csv",
        "roc_ssl.csv", "roc_user.csv", "manifest.json",
        "report/psd_ssl.csv", "report/psd_user.csv", "report/psd_ssl.svg",
        "report/psd_bands_ssl.csv", "report/shap_ranking.csv", "report/kappa.csv", "report/roc.svg",
    ] + [f"labels_{s}.csv" for s in ("universal", "expert", "majority")]
    for name in expected:
        assert (out / name).is_file(), name
    assert list((out / "models").glob("expert_*.json"))
    m = pipeline.read_metrics(out / "metrics.csv")
    assert {"ssl", "user"} <= set(m.index)
    stages = json.loads((out / "manifest.json").read_text())["stages"]
    assert set(stages) == set(pipeline.ORDER)
    # every emitted file carries a content hash
    for entry in stages.values():
        for key, digest in entry["outputs"].items():
            assert pipeline.file_hash(out / key) == digest


def test_changed_segmentation_config_is_stale(smoke, tmp_path, capsys):
    d = tmp_path / "copy"
    shutil.copytree(smoke, d)
    cfg = d / "config.toml"
    cfg.write_text(cfg.read_text() + "\n[segmentation]\nmin_cough_ms = 150.0\n")
    assert main(["features", "--config", str(cfg)]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "'segment'" in err and "rerun `coughssl segment`" in err


def test_tampered_artifact_is_stale(smoke, tmp_path, capsys):
    d = tmp_path / "copy"
    shutil.copytree(smoke, d)
    with (d / "out" / "features.csv").open("a") as fh:
        fh.write("\n")
    assert main(["train-experts", "--config", str(d / "config.toml")]) == EXIT_DATA
    assert "'features'" in capsys.readouterr().err


def test_rerun_invalidates_downstream(smoke, tmp_path):
    d = tmp_path / "copy"
    shutil.copytree(smoke, d)
    assert main(["segment", "--config", str(d / "config.toml")]) == EXIT_OK
    stages = json.loads((d / "out" / "manifest.json").read_text())["stages"]
    assert set(stages) == {"preprocess", "segment"}
