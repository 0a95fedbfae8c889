import json

import numpy as np
import pytest

from tlupdate.cli import main
from tlupdate.data import PLANT_SCHEMA, generate_synthetic, load_csv
from tlupdate.pipeline import ConfigError, PipelineConfig, run_pipeline
from tlupdate.serialize import load_model

DRIFT = {"start_day": 8, "mean_shift": {"Secondary Air Outlet Temperature": 2.0}, "rotation": 0.2}


def small_config(out, drift=True, **over):
    d = {
        "data": {"synthetic": {"days": 20, "interval": 900, "seed": 1, **({"drift": DRIFT} if drift else {})}},
        "batch_days": 4,
        "search_space": {"hidden_widths": [16], "hidden_depths": [1], "learning_rates": [0.003]},
        "train": {"max_epochs": 300, "patience": 15},
        "update": {"max_epochs": 80, "patience": 10},
        "drift": {"permutations": 99},
        "explain": {"background_size": 15, "eval_size": 15},
        "output_dir": str(out),
    }
    d.update(over)
    return d


@pytest.fixture(scope="module")
def drifted_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_pipeline(PipelineConfig.from_dict(small_config(out))), out


def test_fires_and_updates(drifted_run):
    report, out = drifted_run
    assert report.fired
    assert set(report.strategies) == {"LLTL", "ALTL", "ETL"}
    stale = report.stale_metrics.rmse
    for run in report.strategies.values():
        assert run.metrics.rmse < stale


def test_artifacts(drifted_run):
    report, out = drifted_run
    names = {p for p in report.to_dict()["artifacts"]}
    for f in ("daily_errors.csv", "parity.csv", "weight_summary.csv", "importance_evolution.csv",
              "trials.csv", "drift.json", "models/reference.json", "models/ETL.json", "report.json"):
        assert f in names and (out / f).exists()
    header = (out / "parity.csv").read_text().splitlines()[0]
    assert header == "timestamp,actual,baseline,LLTL,ALTL,ETL"
    assert len(load_model(out / "models" / "ETL.json").members) == 2
    saved = json.loads((out / "report.json").read_text())
    assert saved["stages"] == {"drift": "done", "update": "done", "explain": "done"}


def test_single_strategy(tmp_path):
    report = run_pipeline(PipelineConfig.from_dict(small_config(tmp_path, strategies=["LLTL"],
                                                                explain={"enabled": False})))
    assert list(report.strategies) == ["LLTL"]
    assert not (tmp_path / "models" / "ALTL.json").exists()


def test_no_drift_skips_update(tmp_path):
    report = run_pipeline(PipelineConfig.from_dict(small_config(tmp_path, drift=False)))
    assert not report.fired
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["stages"]["update"] == "skipped" and d["stages"]["drift"] == "skipped"
    assert (tmp_path / "parity.csv").read_text().splitlines()[0] == "timestamp,actual,baseline"


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"data": {"synthetic": {}}, "strategies": ["XTL"]})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"data": {"synthetic": {}}, "bogus": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"batch_days": 5})
    cfg = PipelineConfig.from_dict(small_config("x"))
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


class TestCli:
    def test_generate(self, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["generate", "--days", "2", "--out", str(out)]) == 0
        d = load_csv(out, PLANT_SCHEMA)
        np.testing.assert_array_equal(d.rows, generate_synthetic(2, 600, seed=0).rows)

    def test_missing_config(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_data(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("Timestamp,Flue Gas DP\n2024-01-01T00:00:00Z,1\n")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"csv": str(bad)}}))
        assert main(["train", "--config", str(cfg)]) == 3
        assert "missing column" in capsys.readouterr().err

    def test_train_replay_update_explain_report(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(small_config(tmp_path / "out")))
        base = ["--config", str(cfg)]
        assert main(["train", *base]) == 0
        model = str(tmp_path / "out" / "models" / "reference.json")
        assert main(["replay", *base, "--model", model]) == 0
        trig = json.loads((tmp_path / "out" / "trigger.json").read_text())
        assert trig["fired_on"] is not None and trig["buffer"]["rows"] > 0
        assert main(["update", *base, "--model", model, "--strategy", "LLTL"]) == 0
        assert (tmp_path / "out" / "models" / "LLTL.json").exists()
        assert main(["explain", *base, "--model", model, "--rows", "3"]) == 0
        assert len((tmp_path / "out" / "attributions_model.csv").read_text().splitlines()) == 4
        assert main(["run", *base]) == 0
        capsys.readouterr()
        assert main(["report", *base]) == 0
        assert "trigger fired" in capsys.readouterr().out
