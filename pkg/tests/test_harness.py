import csv
import json

import numpy as np
import pytest
import yaml

from talbo.config import DEFAULT_CONFIG, ConfigError, load_suite, parse_suite, suite_to_dict
from talbo.harness import aggregate, aggregate_rank_table, main, moving_average
from talbo.optimizer import CSV_COLUMNS, write_csv

MINIMAL = """schema_version: 1
tasks: [median-2]
variants: [full]
seeds: [0]
"""


def test_validate_default_config_exit_zero(capsys):
    assert main(["validate-config", "--config", str(DEFAULT_CONFIG)]) == 0
    assert "ok" in capsys.readouterr().out


def test_default_config_roundtrip():
    suite = load_suite(DEFAULT_CONFIG)
    again = parse_suite(yaml.safe_dump(suite_to_dict(suite)))
    assert again == suite
    assert suite.run.horizon == 600 and len(suite.seeds) == 10


@pytest.mark.parametrize(
    "text, where, fragment",
    [
        (MINIMAL + "bogus: 1\n", "5:1", "unknown key"),
        (MINIMAL + "run:\n  horizon: ten\n", "6:12", "expected an integer"),
        (MINIMAL + "retrain:\n  stepz: 3\n", "6:3", "unknown key"),
        (MINIMAL.replace("[full]", "[fast]"), "3:12", "unknown variant"),
        (MINIMAL.replace("schema_version: 1", "schema_version: 9"), "1:17", "schema version"),
        ("tasks: [\n", "2:1", "malformed"),
    ],
)
def test_invalid_config_line_anchored(tmp_path, capsys, text, where, fragment):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=fragment) as info:
        load_suite(path)
    assert f"{path}:{where}:" in str(info.value)
    assert main(["validate-config", "--config", str(path)]) == 2
    assert where in capsys.readouterr().err


def test_missing_config_file_exit_two(tmp_path):
    assert main(["validate-config", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_rank_table_known_ordering():
    res = {"t": {0: {"a": np.array([1.0, 2.0]), "b": np.array([1.0, 3.0]), "c": np.array([0.0, 4.0])}}}
    table = aggregate_rank_table(res)
    assert [table[b]["mean_rank"] for b in "abc"] == [1.0, 2.0, 3.0]
    assert all(table[b]["half_std"] == 0.0 for b in "abc")


def test_rank_table_dominant_baseline(rng):
    res = {
        task: {s: {"best": np.array([0.0]), "x": rng.uniform(1, 2, 1), "y": rng.uniform(1, 2, 1)} for s in range(5)}
        for task in ("t1", "t2")
    }
    table = aggregate_rank_table(res)
    assert table["best"]["mean_rank"] == 1.0 and table["best"]["cells"] == 10


def test_rank_table_missing_cell():
    res = {"t": {0: {"a": np.ones(2), "b": np.ones(2)}, 1: {"a": np.ones(2)}}}
    with pytest.raises(ValueError, match=r"\('t', 1, 'b'\)"):
        aggregate_rank_table(res)


def test_rank_table_coin_flips():
    rng = np.random.default_rng(7)
    res = {"t": {}}
    for s in range(200):
        u = rng.random() < 0.5
        res["t"][s] = {"a": np.array([float(u)]), "b": np.array([float(not u)])}
    table = aggregate_rank_table(res)
    # binomial(200, 1/2) mean rank has std 0.5/sqrt(200) ~ 0.035
    for b in "ab":
        assert abs(table[b]["mean_rank"] - 1.5) < 3 * 0.5 / np.sqrt(200)
    assert table["a"]["mean_rank"] + table["b"]["mean_rank"] == pytest.approx(3.0)


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.array([1.0, 3.0, 5.0, 7.0]), 2), [1.0, 2.0, 4.0, 6.0])
    np.testing.assert_array_equal(moving_average(np.array([1.0, 2.0]), 1), [1.0, 2.0])


def _fake_log(path, baseline, seed, regrets):
    rows = []
    cum = 0.0
    for i, r in enumerate(regrets, start=1):
        cum += r
        rows.append({"iteration": i, "baseline": baseline, "seed": seed, "task": "t", "best_per_time": 1 - r, "cumulative_regret": cum, "instantaneous": 0.5, "oracle_calls": i, "wall_seconds": 0.0})
    path.mkdir(parents=True)
    write_csv([{c: row.get(c, 0) for c in CSV_COLUMNS} for row in rows], path / "log.csv")


def _fake_tree(root):
    for seed in (0, 1):
        _fake_log(root / "t" / "full" / f"seed-{seed}", "full", seed, [0.1, 0.2, 0.0])
        _fake_log(root / "t" / "random" / f"seed-{seed}", "random", seed, [0.5, 0.4, 0.3])


def test_aggregate_identical_seeds_zero_std(tmp_path):
    _fake_tree(tmp_path)
    table = aggregate(tmp_path, smooth_window=2)
    with open(tmp_path / "curves.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert all(float(r[c]) == 0.0 for r in rows for c in r if c.endswith("_std"))
    assert table["full"]["mean_rank"] == 1.0 and table["random"]["mean_rank"] == 2.0
    assert json.loads((tmp_path / "aggregate.json").read_text())["smooth_window"] == 2
    # raw logs untouched by smoothing
    raw = list(csv.DictReader(open(tmp_path / "t" / "full" / "seed-0" / "log.csv")))
    assert float(raw[1]["cumulative_regret"]) == pytest.approx(0.3)


def test_aggregate_is_byte_stable(tmp_path):
    _fake_tree(tmp_path)
    aggregate(tmp_path)
    first = {n: (tmp_path / n).read_bytes() for n in ("curves.csv", "ranks.csv", "aggregate.json")}
    assert main(["aggregate", "--out", str(tmp_path)]) == 0
    assert first == {n: (tmp_path / n).read_bytes() for n in first}


def test_aggregate_empty_root_fails(tmp_path):
    assert main(["aggregate", "--out", str(tmp_path)]) == 1


def _tiny_yaml(tmp_path):
    text = MINIMAL + """run:
  horizon: 2
  batch_size: 2
  num_init: 8
  num_init_slots: 4
latent:
  latent_dim: 2
  num_features: 4
  hidden_size: 8
  embedding_size: 4
surrogate:
  num_inducing: 8
  fit_steps: 1
  num_candidates: 32
pretrain:
  steps: 20
retrain:
  steps: 2
inversion:
  max_steps: 5
"""
    path = tmp_path / "tiny.yaml"
    path.write_text(text)
    return path


def test_cli_run_writes_complete_run_dir(tmp_path, monkeypatch):
    cfg = _tiny_yaml(tmp_path)
    monkeypatch.setenv("TALBO_OUTPUT_ROOT", str(tmp_path / "env-root"))
    assert main(["run", "--config", str(cfg), "--task", "median-2", "--variant", "full", "--seed", "0"]) == 0
    run = tmp_path / "env-root" / "median-2" / "full" / "seed-0"
    assert {"manifest.json", "log.csv", "config.yaml"} <= {p.name for p in run.iterdir()}
    assert (run / "config.yaml").read_text() == cfg.read_text()
    log = (run / "log.csv").read_bytes()
    assert main(["run", "--config", str(run / "config.yaml"), "--out", str(tmp_path / "again"), "--task", "median-2", "--variant", "full", "--seed", "0"]) == 0
    assert (tmp_path / "again" / "median-2" / "full" / "seed-0" / "log.csv").read_bytes() == log


def test_cli_run_unknown_task_exit_two(tmp_path):
    cfg = _tiny_yaml(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path), "--task", "nope", "--variant", "full", "--seed", "0"]) == 2


def test_cli_sweep_and_reference_curves(tmp_path):
    cfg = _tiny_yaml(tmp_path)
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "median-2" / "full" / "seed-0" / "log.csv").exists()
    assert main(["reference-curves", "--config", str(cfg), "--out", str(out), "--task", "median-2"]) == 0
    with open(out / "median-2" / "reference_curves.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and rows[0]["iteration"] == "1"
    assert all(float(r["max"]) >= float(r["q0.95"]) for r in rows)
