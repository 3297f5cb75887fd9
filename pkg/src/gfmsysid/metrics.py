"""Fit scores, per-method reports and method comparison tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .plant import PlantParams, derivative
from .simulator import Dataset

METHOD_ORDER = ("sindy", "dsr")


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {a.size} targets")
    if a.size == 0:
        raise ValueError("need at least one sample")
    return p, a


def mse(pred, actual) -> float:
    """Mean squared residual."""
    p, a = _pair(pred, actual)
    return float(np.mean((p - a) ** 2))


def r2(pred, actual) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    p, a = _pair(pred, actual)
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined: target has zero variance")
    return 1.0 - float(np.sum((p - a) ** 2)) / ss_tot


@dataclass(frozen=True)
class TargetRow:
    target: str
    mse: float
    r2: float
    complexity: int


@dataclass
class FitReport:
    """Scores of one identified model on one dataset.

    ``complexity`` is the active term count for sparse models and the token
    length for expressions.  ``runtime_s`` is training wall-clock and is kept
    out of :meth:`to_dict` so report files stay reproducible.
    """

    method: str
    rows: list[TargetRow]
    fingerprint: str
    runtime_s: float = 0.0
    predictions: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        names = [r.target for r in self.rows]
        if len(set(names)) != len(names):
            raise ValueError("duplicate target rows")
        for r in self.rows:
            if r.mse < 0 or not r.r2 <= 1.0:
                raise ValueError(f"row {r.target}: mse must be >= 0 and r2 <= 1")

    @property
    def targets(self) -> list[str]:
        return [r.target for r in self.rows]

    def row(self, target: str) -> TargetRow:
        for r in self.rows:
            if r.target == target:
                return r
        raise KeyError(target)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "fingerprint": self.fingerprint,
            "rows": [{"target": r.target, "mse": r.mse, "r2": r.r2, "complexity": r.complexity}
                     for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict, runtime_s: float = 0.0) -> "FitReport":
        rows = [TargetRow(r["target"], float(r["mse"]), float(r["r2"]), int(r["complexity"])) for r in d["rows"]]
        return cls(d["method"], rows, d["fingerprint"], runtime_s)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path, runtime_s: float = 0.0) -> "FitReport":
        return cls.from_dict(json.loads(Path(path).read_text()), runtime_s)


class GroundTruth:
    """The plant right-hand side used as an identified model.

    It needs the unmeasured states, so it only scores datasets produced in
    memory by the simulator.
    """

    method = "truth"

    def __init__(self, params: PlantParams):
        self.params = params

    def predict_dataset(self, ds: Dataset) -> np.ndarray:
        if ds.hidden is None:
            raise ValueError("ground truth needs the unmeasured states, which this dataset lacks")
        k = self.params.constants
        n_meas = ds.X.shape[1]
        full = np.hstack([ds.X, ds.hidden])
        return np.array([derivative(x, u, k)[:n_meas] for x, u in zip(full.tolist(), ds.U.tolist())])

    def complexity(self, target: str) -> int:
        return 0


def _method_of(model) -> str:
    name = getattr(model, "method", None)
    if name:
        return name
    kind = type(model).__name__
    return {"SparseModel": "sindy", "DsrModel": "dsr"}.get(kind, kind.lower())


def _complexity(model, target: str) -> int:
    if hasattr(model, "complexity"):
        return int(model.complexity(target))
    if hasattr(model, "expressions"):
        return model.expressions[target].length
    j = list(model.target_names).index(target)
    return int(model.active_counts[j])


def evaluate_model(model, ds: Dataset, runtime_s: float | None = None) -> FitReport:
    """Score one-step derivative predictions of ``model`` against ``ds``.

    ``model`` is a fitted sparse model, a symbolic-regression model or a
    :class:`GroundTruth`.  Targets follow the dataset column order.
    """
    targets = list(ds.target_names)
    if hasattr(model, "predict_dataset"):
        pred = model.predict_dataset(ds)
        model_targets = targets
    else:
        if tuple(model.var_names) != tuple(ds.feature_names):
            raise ValueError(f"column layout mismatch: model expects {list(model.var_names)}, "
                             f"dataset has {list(ds.feature_names)}")
        model_targets = list(model.target_names)
        if sorted(model_targets) != sorted(targets):
            raise ValueError(f"target mismatch: model has {model_targets}, dataset has {targets}")
        pred = model.predict(ds.features)
    pred = np.asarray(pred, dtype=float)
    order = [model_targets.index(t) for t in targets]
    pred = pred[:, order]
    rows = [TargetRow(t, mse(pred[:, j], ds.dX[:, j]), r2(pred[:, j], ds.dX[:, j]), _complexity(model, t))
            for j, t in enumerate(targets)]
    if runtime_s is None:
        runtime_s = float(getattr(model, "runtime_s", 0.0))
    return FitReport(_method_of(model), rows, ds.fingerprint(), runtime_s, pred)


def _method_key(method: str):
    return (METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER), method)


@dataclass
class Comparison:
    """Side-by-side scores of several methods on one dataset.

    Deltas are taken against the first method in canonical order.
    """

    reports: list[FitReport]

    @property
    def methods(self) -> list[str]:
        return [r.method for r in self.reports]

    @property
    def targets(self) -> list[str]:
        return self.reports[0].targets

    @property
    def runtime_ratio(self) -> float | None:
        """DSR over SINDy training wall-clock, when both are present."""
        by = {r.method: r.runtime_s for r in self.reports}
        if "dsr" in by and "sindy" in by and by["sindy"] > 0:
            return by["dsr"] / by["sindy"]
        return None

    def table(self) -> tuple[list[str], list[list]]:
        base = self.reports[0]
        header = ["target"]
        for r in self.reports:
            header += [f"{r.method}_mse", f"{r.method}_r2", f"{r.method}_complexity"]
        for r in self.reports[1:]:
            header += [f"{r.method}_minus_{base.method}_mse", f"{r.method}_minus_{base.method}_r2"]
        body = []
        for t in self.targets:
            line = [t]
            for r in self.reports:
                row = r.row(t)
                line += [row.mse, row.r2, row.complexity]
            for r in self.reports[1:]:
                line += [r.row(t).mse - base.row(t).mse, r.row(t).r2 - base.row(t).r2]
            body.append(line)
        return header, body

    def to_csv(self) -> str:
        header, body = self.table()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for line in body:
            w.writerow([_cell(v, full=True) for v in line])
        return buf.getvalue()

    def to_text(self) -> str:
        header, body = self.table()
        cells = [header] + [[_cell(v) for v in line] for line in body]
        widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
        lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i]) for i in range(len(c)))
                 for c in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def runtime_summary(self, reference_ratio: float | None = 11.0) -> str:
        lines = [f"{r.method} training wall-clock: {r.runtime_s:.3f} s" for r in self.reports]
        ratio = self.runtime_ratio
        if ratio is not None:
            lines.append(f"dsr / sindy runtime ratio: {ratio:.2f}"
                         + (f" (reference: about {reference_ratio:g})" if reference_ratio else ""))
        return "\n".join(lines) + "\n"


def _cell(v, full: bool = False) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v)) if full else f"{v:.6g}"


def compare(reports: Sequence[FitReport]) -> Comparison:
    """Align reports that share a dataset fingerprint and target set."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    fps = {r.fingerprint for r in reports}
    if len(fps) != 1:
        raise ValueError(f"reports come from different datasets (fingerprints {sorted(fps)})")
    targets = reports[0].targets
    for r in reports[1:]:
        if sorted(r.targets) != sorted(targets):
            raise ValueError(f"report {r.method} covers different targets")
    ordered = sorted(reports, key=lambda r: _method_key(r.method))
    # rows follow the first report's target order whatever the input order
    canon = ordered[0].targets
    ordered = [FitReport(r.method, [r.row(t) for t in canon], r.fingerprint, r.runtime_s, r.predictions)
               for r in ordered]
    return Comparison(ordered)


def write_plot_csvs(ds: Dataset, predictions: dict[str, np.ndarray], out_dir) -> list[Path]:
    """One ``<target>.csv`` per derivative with time, actual and each method's prediction."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = sorted(predictions, key=_method_key)
    for m in methods:
        if np.shape(predictions[m]) != ds.dX.shape:
            raise ValueError(f"{m} predictions have shape {np.shape(predictions[m])}, expected {ds.dX.shape}")
    paths = []
    for j, t in enumerate(ds.target_names):
        cols = [ds.time, ds.dX[:, j]] + [np.asarray(predictions[m])[:, j] for m in methods]
        data = np.column_stack(cols)
        buf = io.StringIO()
        np.savetxt(buf, data, fmt="%.17g", delimiter=",", comments="",
                   header=",".join(["t", "actual"] + [f"{m}_pred" for m in methods]))
        p = out / f"{t}.csv"
        p.write_text(buf.getvalue())
        paths.append(p)
    return paths
