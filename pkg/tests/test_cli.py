import csv
import json
from pathlib import Path

import pytest

from latticelab.cli import main, run

CONFIGS = sorted((Path(__file__).resolve().parent.parent / "configs").glob("*.json"))
DATA_FILES = ("results.csv", "raw.jsonl")


def _run(config_path, out, *extra):
    return main(["--config", str(config_path), "--out", str(out), *extra])


def test_realize_vanishing_sigma_counts_sites(tmp_path):
    cfg = next(p for p in CONFIGS if p.name == "realize_gaussian.json")
    assert _run(cfg, tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "results.csv")))
    assert int(rows[0]["points"]) == 11**2
    assert len((tmp_path / "raw.jsonl").read_text().splitlines()) == 121


def test_psi_on_stored_single_point(tmp_path):
    cfg = next(p for p in CONFIGS if p.name == "psi_single_point.json")
    assert _run(cfg, tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "results.csv")))
    assert float(rows[0]["m"]) == 2.0 and float(rows[0]["psi"]) == 1.0


def test_manifest_contents(tmp_path):
    cfg = next(p for p in CONFIGS if p.name == "gla_gaussian_d2.json")
    assert _run(cfg, tmp_path, "--seed", "99") == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 99 and man["config_echo"]["seed"] == 99
    assert {"numpy", "scipy", "python"} <= set(man["versions"])
    assert man["wall_time"] >= 0


@pytest.mark.parametrize("config", CONFIGS, ids=lambda p: p.stem)
def test_example_configs_are_deterministic(config, tmp_path):
    outs = []
    for k, threads in enumerate(("1", "1", "8")):
        out = tmp_path / f"run{k}"
        assert _run(config, out, "--threads", threads) == 0
        outs.append({name: (out / name).read_bytes() for name in DATA_FILES})
    assert outs[0] == outs[1] == outs[2]


def _write(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_schema_errors_name_the_field(tmp_path, capsys):
    bad = {"command": "realize", "seed": 1, "law": {"kind": "gaussian", "sigma": 1.0, "dim": 2},
           "window": {"radius": "five"}}
    assert _run(_write(tmp_path, bad), tmp_path / "o") == 2
    assert "window.radius" in capsys.readouterr().err
    bad = {"command": "realize", "seed": 1, "law": {"kind": "gaussian", "sigma": -1.0, "dim": 2},
           "window": {"radius": 2}}
    assert _run(_write(tmp_path, bad), tmp_path / "o") == 2
    assert "sigma" in capsys.readouterr().err
    assert _run(_write(tmp_path, {"command": "dance", "seed": 1}), tmp_path / "o") == 2
    assert "config.command" in capsys.readouterr().err


def test_command_override_and_missing_seed(tmp_path, capsys):
    cfg = {"law": {"kind": "gaussian", "sigma": 0.1, "dim": 1}, "window": {"radius": 3}}
    assert _run(_write(tmp_path, cfg), tmp_path / "o", "--command", "realize") == 2
    assert "config.seed" in capsys.readouterr().err
    assert _run(_write(tmp_path, cfg), tmp_path / "o", "--command", "realize", "--seed", "4") == 0


def test_resource_and_replicate_errors_exit_nonzero(tmp_path, capsys):
    big = {"command": "realize", "seed": 1, "law": {"kind": "gaussian", "sigma": 1.0, "dim": 3},
           "window": {"radius": 400, "margin": 0}}
    assert _run(_write(tmp_path, big), tmp_path / "o") == 4
    broken = {"command": "discriminate", "seed": 1, "law": {"kind": "gaussian", "sigma": 0.5, "dim": 2},
              "window": {"radius": 3},
              "discriminate": {"replicates": 5, "alt": {},
                               "statistic": {"name": "psi_average", "schedule": {"n_sched": 2}}}}
    assert _run(_write(tmp_path, broken), tmp_path / "o") == 3
    assert "replicate 0" in capsys.readouterr().err


def test_single_cell_sweep_equals_power_experiment(tmp_path):
    base = {"seed": 21, "law": {"kind": "stable_symmetric", "alpha": 1.0, "dim": 1},
            "window": {"radius": 100, "margin": 1000}}
    stat = {"name": "psi_average", "schedule": {"n_sched": 3, "m0": 10}}
    sweep = dict(base, command="sweep", sweep={"parameter": "alpha", "grid": [1.0], "replicates": 100,
                                               "alt": {"deleted_sites": [[0]]}, "statistic": stat})
    one = dict(base, command="discriminate", discriminate={"replicates": 100, "alt": {"deleted_sites": [[0]]},
                                                            "statistic": stat})
    assert run(sweep, tmp_path / "s") == 0
    assert run(one, tmp_path / "d") == 0
    s = list(csv.DictReader(open(tmp_path / "s" / "results.csv")))[0]
    d = list(csv.DictReader(open(tmp_path / "d" / "results.csv")))[0]
    assert s["power"] == d["power"] and s["ci_lo"] == d["power_ci_lo"]
    summary = json.loads((tmp_path / "s" / "raw.jsonl").read_text().splitlines()[-1])
    self_test = summary["self_test"]
    assert abs(self_test["power"] - 0.05) <= 3 * (0.05 * 0.95 / 100) ** 0.5
