import json
import re

import numpy as np
import pytest
import yaml

from gfmsysid import cli
from gfmsysid.cli import DEFAULT_CONFIG, ConfigError, RunConfig, load_config, main, parse_config

SMALL = {
    "simulation": {
        "t_end": 0.3,
        "schedule": [
            {"time": 0.1, "target": "p_ref", "value": 0.7},
            {"time": 0.15, "target": "q_ref", "value": 0.2},
            {"time": 0.2, "target": "v_ref", "value": 0.9},
        ],
    },
    "dsr": {"epochs": 1, "batch_size": 20},
}


def write_config(path, raw):
    path.write_text(yaml.safe_dump(raw))
    return str(path)


@pytest.fixture
def small_config(tmp_path):
    return write_config(tmp_path / "small.yaml", SMALL)


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- configuration

def test_shipped_default_equals_code_defaults():
    assert load_config(DEFAULT_CONFIG) == RunConfig()
    assert load_config(None) == RunConfig()


@pytest.mark.parametrize("raw,path", [
    ({"bogus": 1}, "bogus"),
    ({"plant": {"network": {"foo": 1}}}, "plant.network.foo"),
    ({"plant": {"control": {"k_x": 1}}}, "plant.control.k_x"),
    ({"simulation": {"schedule": [{"time": 0.5, "target": "p_ref", "value": 0.7, "ramp": 1}]}},
     "simulation.schedule[0].ramp"),
    ({"sindy": {"stlsq": {"lam": 1}}}, "sindy.stlsq.lam"),
    ({"dsr": {"seed": 3}}, "dsr.seed"),
])
def test_unknown_keys_name_their_path(raw, path):
    with pytest.raises(ConfigError, match="unknown key " + re.escape(path)):
        parse_config(raw)


@pytest.mark.parametrize("raw,prefix", [
    ({"dsr": {"epsilon": 0.0}}, "dsr"),
    ({"plant": {"network": {"l_f": -1.0}}}, "plant.network"),
    ({"simulation": {"t_end": 1.2}}, "simulation"),
    ({"sindy": {"solver": "ista"}}, "sindy.solver"),
    ({"seed": -1}, "seed"),
    ({"plant": 3}, "plant"),
])
def test_bad_values_name_their_section(raw, prefix):
    with pytest.raises(ConfigError, match=rf"^{prefix}"):
        parse_config(raw)


def test_lasso_solver_selected():
    cfg = parse_config({"sindy": {"solver": "lasso", "lasso": {"lam": 0.5}}})
    assert cfg.solver.lam == 0.5


def test_seed_derivation_is_documented_and_stable():
    state = np.random.SeedSequence(7).generate_state(2)
    cfg = RunConfig(seed=7).seeded()
    assert cfg.sim.seed == int(state[0]) and cfg.dsr.seed == int(state[1])


def test_bad_config_exits_nonzero(tmp_path, capsys):
    assert run("--config", write_config(tmp_path / "c.yaml", {"dsr": {"nope": 1}}), "simulate") == 1
    assert "unknown key dsr.nope" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert run("--config", tmp_path / "absent.yaml", "simulate") == 1
    assert "not found" in capsys.readouterr().err


def test_unknown_method_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("identify", "--method", "gp")
    assert exc.value.code == 2
    assert "invalid choice" in capsys.readouterr().err


# ---------------------------------------------------------------- commands

def test_identify_without_dataset(tmp_path, small_config, capsys):
    assert run("--config", small_config, "--out", tmp_path / "o", "sindy") == 1
    assert "dataset.csv" in capsys.readouterr().err


def test_simulate_is_reproducible(tmp_path, small_config):
    for d in ("a", "b"):
        assert run("--config", small_config, "--out", tmp_path / d, "simulate") == 0
    assert (tmp_path / "a/dataset.csv").read_bytes() == (tmp_path / "b/dataset.csv").read_bytes()
    m = json.loads((tmp_path / "a/manifest.json").read_text())
    assert m["config"]["simulation"]["t_end"] == 0.3
    assert set(m["derived_seeds"]) == {"noise", "dsr"}


def test_seed_changes_noisy_dataset(tmp_path):
    raw = {**SMALL, "simulation": {**SMALL["simulation"], "noise_std": 0.01}}
    cfg = write_config(tmp_path / "n.yaml", raw)
    run("--config", cfg, "--out", tmp_path / "a", "--seed", 1, "simulate")
    run("--config", cfg, "--out", tmp_path / "b", "--seed", 2, "simulate")
    assert (tmp_path / "a/dataset.csv").read_bytes() != (tmp_path / "b/dataset.csv").read_bytes()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root / "small.yaml", SMALL)
    for d in ("first", "second"):
        assert main(["--config", cfg, "--out", str(root / d), "all"]) == 0
    return root, cfg


def _files(d):
    return sorted(p.relative_to(d) for p in d.rglob("*") if p.is_file())


def test_all_writes_every_artifact(pipeline):
    root, _ = pipeline
    names = {str(p) for p in _files(root / "first")}
    expected = {"dataset.csv", "manifest.json", "timings.json", "comparison.csv", "comparison.txt"}
    for m in ("sindy", "dsr"):
        expected |= {f"{m}_model.json", f"{m}_equations.txt", f"{m}_report.json"}
    assert expected <= names
    assert sum(n.startswith("plots/") for n in names) == 9
    lines = (root / "first/comparison.csv").read_text().splitlines()
    assert len(lines) == 10


def test_all_twice_is_bitwise_identical(pipeline):
    root, _ = pipeline
    a, b = root / "first", root / "second"
    assert _files(a) == _files(b)
    for rel in _files(a):
        if rel.name == "timings.json":
            continue
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_manifest_hashes_match_files(pipeline):
    root, _ = pipeline
    d = root / "first"
    m = json.loads((d / "manifest.json").read_text())
    for name, digest in m["files"].items():
        assert cli._sha256(d / name) == digest
    assert "timings.json" not in m["files"]


def test_report_is_idempotent(pipeline, capsys):
    root, cfg = pipeline
    d = root / "first"
    before = (d / "comparison.csv").read_bytes()
    assert main(["--config", cfg, "--out", str(d), "report"]) == 0
    out = capsys.readouterr().out
    assert (d / "comparison.csv").read_bytes() == before
    assert "dsr / sindy runtime ratio" in out


def test_report_names_missing_file(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    d = tmp_path / "copy"
    d.mkdir()
    for rel in _files(root / "first"):
        if rel.name != "dsr_report.json" and rel.parent.name != "plots":
            (d / rel).write_bytes((root / "first" / rel).read_bytes())
    assert main(["--config", cfg, "--out", str(d), "report"]) == 1
    err = capsys.readouterr().err
    assert "dsr_report.json" in err and "'dsr'" in err


def test_report_refuses_stale_dataset(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    d = tmp_path / "stale"
    d.mkdir()
    for rel in _files(root / "first"):
        if rel.parent.name != "plots":
            (d / rel).write_bytes((root / "first" / rel).read_bytes())
    raw = {**SMALL, "simulation": {**SMALL["simulation"], "noise_std": 1e-3}}
    other = write_config(tmp_path / "noisy.yaml", raw)
    assert main(["--config", other, "--out", str(d), "simulate"]) == 0
    assert main(["--config", cfg, "--out", str(d), "report"]) == 1
    assert "different dataset" in capsys.readouterr().err


def test_zero_epoch_search_gives_valid_report(tmp_path, capsys):
    raw = {**SMALL, "dsr": {"epochs": 0, "batch_size": 10}}
    cfg = write_config(tmp_path / "z.yaml", raw)
    out = tmp_path / "z"
    assert main(["--config", cfg, "--out", str(out), "simulate"]) == 0
    assert main(["--config", cfg, "--out", str(out), "identify", "--method", "dsr"]) == 0
    rep = json.loads((out / "dsr_report.json").read_text())
    assert len(rep["rows"]) == 9
    assert all(r["mse"] >= 0 and r["r2"] <= 1 for r in rep["rows"])
    model = json.loads((out / "dsr_model.json").read_text())
    assert all(0 <= t["reward"] <= 1 for t in model["targets"].values())
