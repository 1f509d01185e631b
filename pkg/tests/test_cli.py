import json

import pytest

from diffpark.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from diffpark.config import RunConfig, config_to_dict
from diffpark.plot import controlled_polylines

SMALL = {"collect": {"n_trials": 4, "max_steps": 100}, "train": {"epochs": 3, "hidden": [8]},
         "planner": {"max_steps": 12, "horizon": 5}, "run": {"episodes": 2}}


def write_config(path, **overrides):
    d = config_to_dict(RunConfig())
    for section, values in {**SMALL, **overrides}.items():
        d[section].update(values)
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    data, model = root / "data.jsonl", root / "model.json"
    assert main(["collect", "--config", cfg, "--out", str(data), "--seed", "3"]) == EXIT_OK
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(model), "--seed", "3"]) == EXIT_OK
    return root, cfg, data, model


def test_collect_is_deterministic(pipeline, tmp_path):
    root, cfg, data, _ = pipeline
    again = tmp_path / "again.jsonl"
    assert main(["collect", "--config", cfg, "--out", str(again), "--seed", "3"]) == EXIT_OK
    assert again.read_bytes() == data.read_bytes()


def test_train_writes_model_history_and_metrics(pipeline, tmp_path, capsys):
    root, cfg, data, model = pipeline
    assert (root / "model.history.csv").exists()
    metrics = json.loads((root / "model.metrics.json").read_text())
    assert {"mse", "coverage_1", "coverage_2", "coverage_3"} <= set(metrics)
    again = tmp_path / "model.json"
    capsys.readouterr()
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(again), "--seed", "3"]) == EXIT_OK
    assert again.read_bytes() == model.read_bytes()
    assert json.loads(capsys.readouterr().out) == metrics


def test_run_outputs(pipeline, tmp_path):
    root, cfg, _, model = pipeline
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert main(["run", "--config", cfg, "--model", str(model), "--out", str(out), "--seed", "7"]) == EXIT_OK
    summary = json.loads((out1 / "summary.json").read_text())
    assert summary["episodes"] == 2 and summary["seeds"] == [7, 8]
    assert {"success_rate", "collision_rate", "timeout_rate", "mean_steps", "outcomes"} <= set(summary)
    for f in sorted(p.name for p in out1.iterdir()):
        assert (out1 / f).read_bytes() == (out2 / f).read_bytes(), f
    n_controlled = RunConfig().lot.n_controlled
    for e in range(2):
        svg = (out1 / f"episode_{e:03d}.svg").read_text()
        lines = controlled_polylines(svg)
        assert len(lines) == n_controlled and all(len(p.split()) >= 2 for p in lines)


def test_eval_matches_between_runs(pipeline, capsys):
    _, _, data, model = pipeline
    capsys.readouterr()
    assert main(["eval", "--model", str(model), "--data", str(data)]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(["eval", "--model", str(model), "--data", str(data)]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert "mse" in json.loads(first)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_exit_codes(pipeline, tmp_path):
    root, cfg, data, model = pipeline
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1, "planner": {"horizon": 0}}')
    assert main(["collect", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["collect", "--config", cfg, "--out", str(tmp_path / "x"), "--seed", "-1"]) == EXIT_CONFIG
    assert main(["collect", "--config", cfg, "--out", str(tmp_path / "x"), "--threads", "0"]) == EXIT_CONFIG
    assert main(["eval", "--model", str(tmp_path / "missing.json"), "--data", str(data)]) == EXIT_IO
    assert main(["collect", "--config", cfg, "--out", str(tmp_path / "no" / "dir" / "d.jsonl")]) == EXIT_IO
    diverge = write_config(tmp_path / "div.json", train={"epochs": 3, "hidden": [8], "lr": 1e30})
    assert main(["train", "--config", diverge, "--data", str(data), "--out", str(tmp_path / "m.json")]) == EXIT_NUMERIC


def test_threads_do_not_change_results(pipeline, tmp_path):
    _, cfg, data, _ = pipeline
    out = tmp_path / "t.jsonl"
    assert main(["collect", "--config", cfg, "--out", str(out), "--seed", "3", "--threads", "2"]) == EXIT_OK
    assert out.read_bytes() == data.read_bytes()
