import json
import logging
import math
import time

import numpy as np
import pandas as pd
import pytest

from quse_tensorgraph.cli import build_parser, main, stage_patterns
from quse_tensorgraph.config import load_config
from quse_tensorgraph.errors import NumericalError
from quse_tensorgraph.storage import read_tensor, write_container

PIPELINE = ("prepare", "build-graph", "lift", "train", "predict", "eval")


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def config_path(tmp_path, tiny_config):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_config))
    return path


def _run(capsys, stage, config_path, out, *extra):
    code = main([stage, "--config", str(config_path), "--out", str(out), *extra])
    lines = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(lines[-1])


def test_every_stage_is_routed():
    names = [command.name for command in stage_patterns]
    assert names == [
        "prepare",
        "build-graph",
        "peps",
        "lift",
        "train",
        "predict",
        "eval",
        "ablate",
        "dump-config",
    ]
    args = build_parser().parse_args(["train", "--set", "epochs=1", "--set", "seed=2", "--seed", "5"])
    assert args.overrides == ["epochs=1", "seed=2"] and args.seed == 5


@pytest.mark.slow
def test_pipeline_writes_metrics_and_plot_data(capsys, config_path, artifact_dir):
    for stage in PIPELINE:
        code, payload = _run(capsys, stage, config_path, artifact_dir)
        assert code == 0, payload
        assert payload["stage"] == stage

    records = [json.loads(line) for line in (artifact_dir / "metrics.jsonl").read_text().splitlines()]
    assert [(r["tag"], r["horizon"]) for r in records] == [
        ("STG+TTG", 1),
        ("STG+TTG", 3),
        ("persistence", 1),
        ("persistence", 3),
    ]
    assert all(math.isfinite(r[name]) for r in records for name in ("mae", "rmse"))
    plot = pd.read_csv(artifact_dir / "plot_data.csv")
    assert list(plot.columns) == ["time", "node", "truth", "prediction"]
    assert plot["node"].nunique() == 4

    history = pd.read_csv(artifact_dir / "model" / "history.csv")
    assert list(history.columns[:4]) == ["epoch", "train_loss", "val_loss", "lr"]
    stg, _ = read_tensor(artifact_dir / "graphs" / "stg.bin", "STG1")
    assert stg.shape == (4, 4, 4)
    kernel, tag = read_tensor(artifact_dir / "model" / "kernels" / "block0_w_a.bin", "WA31")
    assert kernel.shape == (3 * 2, 3, 4) and tag == 0


@pytest.mark.slow
def test_same_seed_gives_identical_metrics(capsys, config_path, tmp_path):
    outputs = []
    for name in ("one", "two"):
        out = tmp_path / name
        for stage in PIPELINE:
            assert _run(capsys, stage, config_path, out)[0] == 0
        outputs.append((out / "metrics.jsonl").read_bytes())
    assert outputs[0] == outputs[1]


@pytest.mark.slow
def test_peps_pipeline_lifts_reconstructed_graphs(capsys, config_path, artifact_dir):
    extra = ("--set", "use_peps=true")
    for stage in ("prepare", "build-graph", "peps", "lift"):
        code, payload = _run(capsys, stage, config_path, artifact_dir, *extra)
        assert code == 0, payload
    assert payload["source"] == "peps"
    manifest = json.loads((artifact_dir / "peps" / "manifest.json").read_text())
    history = manifest["metadata"]["history"]
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert manifest["metadata"]["ranks"] == [1, 2]


def test_lift_with_peps_needs_peps_artifacts(capsys, config_path, artifact_dir):
    for stage in ("prepare", "build-graph"):
        _run(capsys, stage, config_path, artifact_dir)
    code, payload = _run(capsys, "lift", config_path, artifact_dir, "--set", "use_peps=true")
    assert code == 3
    assert "missing artifact" in payload["error"][0]


def test_constant_series_gives_dense_graphs(capsys, tmp_path, config_path):
    data = tmp_path / "flat.csv"
    rows = ["a,b,c"] + ["5,5,5"] * 40
    data.write_text("\n".join(rows) + "\n")
    out = tmp_path / "flat"
    extra = ("--set", f"data_path={json.dumps(str(data))}", "--set", "stg_mode=kernel")
    assert _run(capsys, "prepare", config_path, out, *extra)[0] == 0
    code, payload = _run(capsys, "build-graph", config_path, out, *extra)
    assert code == 0
    assert payload["summary"]["stg"]["density"] == [1.0] * 4
    assert payload["summary"]["ttg"]["density"] == [1.0] * 3


def test_epsilon_one_gives_empty_graphs(capsys, config_path, artifact_dir):
    extra = ("--set", "epsilon=1.0", "--set", "stg_mode=kernel", "--set", "write_edge_lists=true")
    _run(capsys, "prepare", config_path, artifact_dir, *extra)
    code, payload = _run(capsys, "build-graph", config_path, artifact_dir, *extra)
    assert code == 0
    assert set(payload["summary"]["stg"]["density"]) == {0.0}
    assert (artifact_dir / "graphs" / "stg_edges.txt").read_text() == ""


def test_eval_of_identical_forecast_is_zero(capsys, config_path, artifact_dir):
    truth = np.arange(1.0, 1.0 + 2 * 3 * 4).reshape(2, 3, 4, 1)
    write_container(
        artifact_dir / "forecast",
        {"prediction": truth, "truth": truth},
        {"tag": "STG+TTG", "start": 0, "window": 4},
    )
    code, payload = _run(capsys, "eval", config_path, artifact_dir)
    assert code == 0
    for record in payload["metrics"]:
        assert (record["mae"], record["rmse"], record["mape"]) == (0.0, 0.0, 0.0)
    plot = pd.read_csv(artifact_dir / "plot_data.csv")
    assert plot["time"].tolist()[:4] == [4, 4, 4, 4]


def test_eval_rejects_horizon_beyond_forecast(capsys, config_path, artifact_dir):
    truth = np.ones((2, 2, 4, 1))
    write_container(artifact_dir / "forecast", {"prediction": truth, "truth": truth}, {"tag": "STG", "start": 0, "window": 4})
    code, payload = _run(capsys, "eval", config_path, artifact_dir)
    assert code == 2
    assert "exceeds the trained horizon" in payload["error"][0]


def test_config_errors_exit_with_two(capsys, config_path, artifact_dir):
    code, payload = _run(capsys, "prepare", config_path, artifact_dir, "--set", "sigma=1")
    assert code == 2
    assert payload == {"error": ["unknown config key 'sigma'"], "exit_code": 2}


def test_missing_artifacts_exit_with_three(capsys, config_path, artifact_dir):
    code, payload = _run(capsys, "build-graph", config_path, artifact_dir)
    assert code == 3
    assert "dataset" in payload["error"][0]


def test_numerical_failures_exit_with_four(capsys, config_path, artifact_dir, monkeypatch):
    for stage in ("prepare", "build-graph", "lift"):
        _run(capsys, stage, config_path, artifact_dir)

    def diverge(*args, **kwargs):
        raise NumericalError("training diverged at epoch 1 (loss inf)")

    monkeypatch.setattr("quse_tensorgraph.commands.train", diverge)
    code, payload = _run(capsys, "train", config_path, artifact_dir)
    assert code == 4
    assert payload["error"] == ["training diverged at epoch 1 (loss inf)"]


def test_dump_config_round_trips(capsys, config_path, artifact_dir):
    code, payload = _run(capsys, "dump-config", config_path, artifact_dir, "--seed", "9")
    assert code == 0
    dumped = load_config(payload["config"])
    assert dumped == load_config(config_path, seed=9)


@pytest.mark.slow
def test_ablation_report_structure(capsys, config_path, artifact_dir):
    code, payload = _run(capsys, "ablate", config_path, artifact_dir)
    assert code == 0, payload
    tags = [r["tag"] for r in payload["metrics"]]
    assert tags == ["STG"] * 2 + ["STG+TTG"] * 2 + ["STG+TTG+PEPS"] * 2 + ["persistence"] * 2
    table = pd.read_csv(artifact_dir / "ablation" / "ablation.csv", index_col="variant")
    assert table.index.tolist() == ["STG", "STG+TTG", "STG+TTG+PEPS", "persistence"]
    assert table.columns.tolist() == ["mae@1", "mae@3", "rmse@1", "rmse@3", "mape@1", "mape@3"]
    assert np.all(np.isfinite(table.to_numpy(dtype=float)))


def _main(capsys, *argv):
    code = main(list(argv))
    lines = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(lines[-1])


def test_later_stages_reuse_the_prepared_config(capsys, artifact_dir):
    out = str(artifact_dir)
    code, payload = _main(
        capsys,
        "prepare",
        "--out",
        out,
        "--set",
        "synth_nodes=4",
        "--set",
        "synth_steps=200",
        "--set",
        "horizon=3",
        "--set",
        "eval_horizons=[1,2,3]",
        "--set",
        "epochs=1",
    )
    assert code == 0, payload
    stored = json.loads((artifact_dir / "config.json").read_text())
    assert (stored["horizon"], stored["epochs"]) == (3, 1)
    for stage in ("build-graph", "lift", "train"):
        code, payload = _main(capsys, stage, "--out", out)
        assert code == 0, payload
        assert payload["stage"] == stage
    history = pd.read_csv(artifact_dir / "model" / "history.csv")
    assert len(history) == 1


def test_changing_the_horizon_after_prepare_is_rejected(capsys, config_path, artifact_dir):
    assert _run(capsys, "prepare", config_path, artifact_dir)[0] == 0
    code, payload = _run(capsys, "build-graph", config_path, artifact_dir, "--set", "horizon=2")
    assert code == 2
    assert "horizon" in payload["error"][0]
    code, payload = _main(capsys, "build-graph", "--out", str(artifact_dir), "--set", "window=5")
    assert code == 2
    assert "window" in payload["error"][0]


@pytest.mark.slow
def test_default_ablation_beats_persistence_in_time(capsys, tmp_path):
    overrides = [
        "window=12",
        "horizon=3",
        "eval_horizons=[1,2,3]",
        "synth_nodes=16",
        "synth_steps=2000",
        "synth_noise=0.05",
    ]
    argv = ["ablate", "--out", str(tmp_path / "ablation"), "--seed", "7"]
    for override in overrides:
        argv += ["--set", override]
    started = time.perf_counter()
    code, payload = _main(capsys, *argv)
    elapsed = time.perf_counter() - started
    assert code == 0, payload
    assert elapsed < 600
    records = payload["metrics"]
    assert all(math.isfinite(r[name]) for r in records for name in ("mae", "rmse"))

    def mean_mae(tag):
        return np.mean([r["mae"] for r in records if r["tag"] == tag])

    assert mean_mae("STG+TTG") <= 0.9 * mean_mae("persistence")
