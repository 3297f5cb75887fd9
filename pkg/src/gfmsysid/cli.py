"""Command line entry point: simulate, identify, report, or run everything.

Outputs land in one directory::

    dataset.csv           measured states, inputs and exact derivatives
    sindy_model.json      sparse coefficients      sindy_equations.txt
    sindy_report.json     per-target scores
    dsr_model.json        best expression per target   dsr_equations.txt
    dsr_report.json       per-target scores
    comparison.csv/.txt   side-by-side scores
    plots/<target>.csv    time, actual and predicted derivatives
    timings.json          training wall-clock (the only non-reproducible file)
    manifest.json         resolved config, seeds and content hashes

Seeds: the global seed feeds ``numpy.random.SeedSequence``; the first two
words of its state become the measurement-noise seed and the symbolic
search seed, in that order.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, dsr, metrics, sindy
from .plant import ControlParams, NetworkParams, PlantParams
from .simulator import DisturbanceEvent, SimConfig, read_dataset, simulate, write_dataset

log = logging.getLogger("gfmsysid")

METHODS = ("sindy", "dsr")
DEFAULT_CONFIG = Path(__file__).with_name("default_config.yaml")


class ConfigError(ValueError):
    """Bad configuration, reported with the offending key path."""


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, validated up front."""

    params: PlantParams = field(default_factory=PlantParams)
    sim: SimConfig = field(default_factory=SimConfig)
    library: sindy.LibrarySpec = field(default_factory=sindy.LibrarySpec)
    solver: sindy.StlsqConfig | sindy.LassoConfig = field(default_factory=sindy.StlsqConfig)
    dsr: dsr.DsrConfig = field(default_factory=dsr.DsrConfig)
    out: Path = Path("runs/default")
    seed: int = 0

    def derived_seeds(self) -> dict[str, int]:
        state = np.random.SeedSequence(self.seed).generate_state(2)
        return {"noise": int(state[0]), "dsr": int(state[1])}

    def seeded(self) -> "RunConfig":
        """Copy with module seeds filled in from the global seed."""
        s = self.derived_seeds()
        return dataclasses.replace(self, sim=dataclasses.replace(self.sim, seed=s["noise"]),
                                   dsr=dataclasses.replace(self.dsr, seed=s["dsr"]))

    def to_dict(self) -> dict:
        solver_name = "lasso" if isinstance(self.solver, sindy.LassoConfig) else "stlsq"
        sim = dataclasses.asdict(self.sim)
        sim.pop("seed")
        sim["schedule"] = [dataclasses.asdict(e) for e in self.sim.schedule]
        d = self.dsr.to_dict()
        d.pop("seed")
        return {
            "seed": self.seed,
            "out": str(self.out),
            "plant": {"network": dataclasses.asdict(self.params.net),
                      "control": dataclasses.asdict(self.params.ctl)},
            "simulation": sim,
            "sindy": {"library": dataclasses.asdict(self.library), "solver": solver_name,
                      solver_name: dataclasses.asdict(self.solver)},
            "dsr": d,
        }


def _take(section: dict, allowed: set[str], path: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {path + '.' if path else ''}{unknown[0]}")
    return dict(section)


def _fields(cls, exclude=()) -> set[str]:
    return {f.name for f in dataclasses.fields(cls) if f.init and f.name not in exclude}


def _build(cls, values: dict, path: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(raw: dict | None) -> RunConfig:
    """Validate a nested mapping and build a :class:`RunConfig`.

    Missing keys take their defaults; unknown keys are errors.
    """
    top = _take(raw or {}, {"seed", "out", "plant", "simulation", "sindy", "dsr"}, "")
    plant = _take(top.get("plant"), {"network", "control"}, "plant")
    net = _build(NetworkParams, _take(plant.get("network"), _fields(NetworkParams), "plant.network"),
                 "plant.network")
    ctl = _build(ControlParams, _take(plant.get("control"), _fields(ControlParams), "plant.control"),
                 "plant.control")

    sim = _take(top.get("simulation"), _fields(SimConfig, {"seed"}), "simulation")
    if "schedule" in sim:
        events = sim["schedule"] or []
        if not isinstance(events, list):
            raise ConfigError("simulation.schedule: expected a list of events")
        sim["schedule"] = tuple(
            _build(DisturbanceEvent, _take(e, _fields(DisturbanceEvent), f"simulation.schedule[{i}]"),
                   f"simulation.schedule[{i}]")
            for i, e in enumerate(events))
    sim_cfg = _build(SimConfig, sim, "simulation")

    sec = _take(top.get("sindy"), {"library", "solver", "stlsq", "lasso"}, "sindy")
    library = _build(sindy.LibrarySpec, _take(sec.get("library"), _fields(sindy.LibrarySpec), "sindy.library"),
                     "sindy.library")
    solver_name = sec.get("solver", "stlsq")
    if solver_name not in ("stlsq", "lasso"):
        raise ConfigError(f"sindy.solver: expected 'stlsq' or 'lasso', got {solver_name!r}")
    stlsq = _build(sindy.StlsqConfig, _take(sec.get("stlsq"), _fields(sindy.StlsqConfig), "sindy.stlsq"),
                   "sindy.stlsq")
    lasso = _build(sindy.LassoConfig, _take(sec.get("lasso"), _fields(sindy.LassoConfig), "sindy.lasso"),
                   "sindy.lasso")

    d = _take(top.get("dsr"), _fields(dsr.DsrConfig, {"seed"}), "dsr")
    if "operators" in d and not isinstance(d["operators"], list):
        raise ConfigError("dsr.operators: expected a list")
    dsr_cfg = _build(dsr.DsrConfig, d, "dsr")

    seed = top.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: expected a non-negative integer")
    out = top.get("out", "runs/default")
    if not isinstance(out, str) or not out:
        raise ConfigError("out: expected a nonempty path string")
    return RunConfig(PlantParams(net, ctl), sim_cfg, library, lasso if solver_name == "lasso" else stlsq,
                     dsr_cfg, Path(out), seed)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return parse_config(raw)


# ---------------------------------------------------------------- artifacts

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _update_manifest(cfg: RunConfig, out: Path, files: list[str]) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    config = cfg.to_dict()
    # the manifest sits in the output directory, so recording it would only break reproducibility
    config.pop("out")
    manifest.update({
        "package_version": __version__,
        "config": config,
        "seed": cfg.seed,
        "derived_seeds": cfg.derived_seeds(),
    })
    hashes = manifest.setdefault("files", {})
    for name in files:
        hashes[name] = _sha256(out / name)
    _write_json(path, manifest)


def _record_timing(out: Path, method: str, seconds: float, per_target: dict | None = None) -> None:
    path = out / "timings.json"
    t = json.loads(path.read_text()) if path.exists() else {}
    t[method] = seconds
    if per_target:
        t[f"{method}_targets"] = per_target
    _write_json(path, t)


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing {path}; {hint}")
    return path


def cmd_simulate(cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    ds = simulate(cfg.sim, cfg.params)
    path = write_dataset(ds, out / "dataset.csv")
    _update_manifest(cfg, out, ["dataset.csv"])
    print(f"wrote {path} ({len(ds)} samples, fingerprint {ds.fingerprint()[:12]})")
    return path


def cmd_identify(cfg: RunConfig, out: Path, method: str) -> Path:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    ds = read_dataset(_require(out / "dataset.csv", "run the 'simulate' command first"))
    if method == "sindy":
        model = sindy.fit(ds, cfg.library, cfg.solver)
        model.save(out / "sindy_model.json")
        eqs = sindy.to_equations(model)
    else:
        model = dsr.fit(ds, cfg.dsr, log=log.info)
    report = metrics.evaluate_model(model, ds, runtime_s=model.runtime_s)
    if method == "dsr":
        model.r2 = {r.target: r.r2 for r in report.rows}
        model.save(out / "dsr_model.json")
        eqs = model.equations()
    (out / f"{method}_equations.txt").write_text("\n".join(eqs) + "\n")
    report.save(out / f"{method}_report.json")
    _record_timing(out, method, model.runtime_s, getattr(model, "target_runtimes", None))
    _update_manifest(cfg, out, [f"{method}_model.json", f"{method}_equations.txt", f"{method}_report.json"])
    print(f"{method}: fitted {len(report.rows)} targets in {model.runtime_s:.2f} s; "
          f"min R^2 {min(r.r2 for r in report.rows):.6f}")
    return out / f"{method}_report.json"


def cmd_report(cfg: RunConfig, out: Path) -> metrics.Comparison:
    ds = read_dataset(_require(out / "dataset.csv", "run the 'simulate' command first"))
    timings_path = out / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    reports, preds = [], {}
    for m in METHODS:
        rp = _require(out / f"{m}_report.json", f"run the '{m}' command first")
        mp = _require(out / f"{m}_model.json", f"run the '{m}' command first")
        reports.append(metrics.FitReport.load(rp, timings.get(m, 0.0)))
        model = sindy.SparseModel.load(mp) if m == "sindy" else dsr.DsrModel.load(mp)
        preds[m] = model.predict(ds.features)
    for r in reports:
        if r.fingerprint != ds.fingerprint():
            raise ValueError(f"{r.method} report was computed on a different dataset "
                             f"({r.fingerprint[:12]} vs {ds.fingerprint()[:12]}); rerun '{r.method}'")
    comp = metrics.compare(reports)
    (out / "comparison.csv").write_text(comp.to_csv())
    (out / "comparison.txt").write_text(comp.to_text())
    plots = metrics.write_plot_csvs(ds, preds, out / "plots")
    _update_manifest(cfg, out, ["comparison.csv", "comparison.txt"]
                     + [str(p.relative_to(out)) for p in plots])
    print(comp.to_text(), end="")
    print(comp.runtime_summary(), end="")
    return comp


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfmsysid", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="YAML run configuration (defaults apply to missing keys)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="generate the dataset")
    sub.add_parser("sindy", help="fit the sparse regression model")
    sub.add_parser("dsr", help="run the symbolic-regression search")
    ident = sub.add_parser("identify", help="fit one method chosen with --method")
    ident.add_argument("--method", required=True, choices=METHODS)
    sub.add_parser("report", help="compare the two fitted models")
    sub.add_parser("all", help="simulate, fit both methods, report")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out=Path(args.out))
        cfg = cfg.seeded()
        out = cfg.out
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command in METHODS:
            cmd_identify(cfg, out, args.command)
        elif args.command == "identify":
            cmd_identify(cfg, out, args.method)
        elif args.command == "report":
            cmd_report(cfg, out)
        else:
            cmd_simulate(cfg, out)
            for m in METHODS:
                cmd_identify(cfg, out, m)
            cmd_report(cfg, out)
    except (ConfigError, FileNotFoundError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
