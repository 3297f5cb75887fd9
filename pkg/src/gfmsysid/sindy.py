"""Sparse regression of state derivatives on a candidate function library."""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .simulator import Dataset

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    """The dataset carries no excitation to regress on."""


class LassoDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class LibrarySpec:
    poly_degree: int = 2
    include_trig: bool = False
    include_bias: bool = True
    normalization: str = "max_abs"
    trig_variable: str = "theta_oc"

    def __post_init__(self):
        if self.poly_degree not in (1, 2, 3):
            raise ValueError("poly_degree must be 1, 2 or 3")
        if self.normalization not in ("none", "max_abs"):
            raise ValueError("normalization must be 'none' or 'max_abs'")


@dataclass(frozen=True, order=True)
class Term:
    """A monomial over the regression variables, optionally times sin/cos of
    one variable.  ``exponents`` is indexed like the variable names."""

    exponents: tuple[int, ...]
    trig: str | None = None
    trig_index: int = -1

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def name(self, names: Sequence[str]) -> str:
        parts = []
        if self.trig is not None:
            parts.append(f"{self.trig}({names[self.trig_index]})")
        for i, e in enumerate(self.exponents):
            if e == 1:
                parts.append(names[i])
            elif e > 1:
                parts.append(f"{names[i]}^{e}")
        return "*".join(parts) if parts else "1"

    def evaluate(self, Z: np.ndarray) -> np.ndarray:
        col = np.ones(Z.shape[0])
        for i, e in enumerate(self.exponents):
            if e:
                col = col * Z[:, i] ** e if e > 1 else col * Z[:, i]
        if self.trig == "sin":
            col = col * np.sin(Z[:, self.trig_index])
        elif self.trig == "cos":
            col = col * np.cos(Z[:, self.trig_index])
        return col

    def to_dict(self) -> dict:
        return {"exponents": list(self.exponents), "trig": self.trig, "trig_index": self.trig_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Term":
        return cls(tuple(int(e) for e in d["exponents"]), d.get("trig"), int(d.get("trig_index", -1)))


def library_terms(n_vars: int, library: LibrarySpec, trig_index: int | None = None) -> list[Term]:
    """Term descriptors in graded lexicographic order."""
    terms = []
    if library.include_bias:
        terms.append(Term((0,) * n_vars))
    for deg in range(1, library.poly_degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), deg):
            e = [0] * n_vars
            for i in combo:
                e[i] += 1
            terms.append(Term(tuple(e)))
    if library.include_trig:
        if trig_index is None:
            raise ValueError(f"trig terms need the variable {library.trig_variable!r}")
        for fn in ("sin", "cos"):
            terms.append(Term((0,) * n_vars, fn, trig_index))
            for i in range(n_vars):
                e = [0] * n_vars
                e[i] = 1
                terms.append(Term(tuple(e), fn, trig_index))
    return terms


@dataclass
class CandidateLibrary:
    theta: np.ndarray
    terms: list[Term]
    column_scales: np.ndarray
    var_names: tuple[str, ...]
    dropped: list[Term] = field(default_factory=list)

    @property
    def normalized(self) -> np.ndarray:
        return self.theta / self.column_scales

    def term_names(self) -> list[str]:
        return [t.name(self.var_names) for t in self.terms]


def evaluate_terms(terms: Sequence[Term], Z: np.ndarray) -> np.ndarray:
    if not terms:
        return np.empty((Z.shape[0], 0))
    return np.column_stack([t.evaluate(Z) for t in terms])


def _dependent_columns(A: np.ndarray, tol: float) -> list[int]:
    """Indices of columns that are, to relative tolerance ``tol``, linear
    combinations of earlier columns.  Gram-Schmidt with one
    reorthogonalisation pass, in column order."""
    n, m = A.shape
    Q = np.empty((n, m))
    r = 0
    dependent = []
    for j in range(m):
        v = A[:, j].copy()
        norm0 = np.linalg.norm(v)
        for _ in range(2):
            if r:
                v -= Q[:, :r] @ (Q[:, :r].T @ v)
        nv = np.linalg.norm(v)
        if norm0 == 0.0 or nv <= tol * norm0:
            dependent.append(j)
            continue
        Q[:, r] = v / nv
        r += 1
    return dependent


def build_library(ds: Dataset | np.ndarray, library: LibrarySpec = LibrarySpec(),
                  var_names: Sequence[str] | None = None,
                  drop_dependent: bool = True, dependence_tol: float = 1e-9) -> CandidateLibrary:
    """Evaluate every candidate term on every sample.

    ``ds`` is a :class:`Dataset` (its measured states and references are the
    variables) or a plain ``(samples, variables)`` array with ``var_names``.
    All-zero columns are always dropped.  With ``drop_dependent`` a column
    that is an exact linear combination of earlier columns is dropped too;
    piecewise-constant references make products of references collinear
    with the references themselves.
    """
    if isinstance(ds, Dataset):
        Z = ds.features
        names = tuple(ds.feature_names)
    else:
        Z = np.asarray(ds, dtype=float)
        if Z.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        names = tuple(var_names) if var_names is not None else tuple(f"x{i + 1}" for i in range(Z.shape[1]))
    if Z.shape[0] == 0:
        raise ValueError("cannot build a library on an empty dataset")
    if len(names) != Z.shape[1]:
        raise ValueError("var_names does not match the number of columns")
    use_trig = library.include_trig and library.trig_variable in names
    trig_index = names.index(library.trig_variable) if use_trig else None
    terms = library_terms(len(names), library, trig_index)
    theta = evaluate_terms(terms, Z)
    if not np.all(np.isfinite(theta)):
        raise ValueError("library contains non-finite values")

    scales = np.abs(theta).max(axis=0)
    zero = [j for j in range(len(terms)) if scales[j] == 0.0]
    drop = set(zero)
    for j in zero:
        warnings.warn(f"dropping all-zero library column {terms[j].name(names)}", stacklevel=2)
    if drop_dependent:
        keep0 = [j for j in range(len(terms)) if j not in drop]
        dep = _dependent_columns(theta[:, keep0] / scales[keep0], dependence_tol)
        dep_idx = [keep0[j] for j in dep]
        if dep_idx:
            warnings.warn(
                "dropping linearly dependent library columns: "
                + ", ".join(terms[j].name(names) for j in dep_idx), stacklevel=2)
        drop.update(dep_idx)
    keep = [j for j in range(len(terms)) if j not in drop]
    if library.normalization == "none":
        scales = np.ones(len(terms))
    return CandidateLibrary(
        theta=theta[:, keep],
        terms=[terms[j] for j in keep],
        column_scales=scales[keep],
        var_names=names,
        dropped=[terms[j] for j in sorted(drop)],
    )


@dataclass(frozen=True)
class StlsqConfig:
    threshold: float = 0.05
    ridge: float = 0.0
    max_iter: int = 20

    def __post_init__(self):
        if self.threshold < 0 or self.ridge < 0 or self.max_iter < 1:
            raise ValueError("need threshold >= 0, ridge >= 0, max_iter >= 1")


@dataclass(frozen=True)
class LassoConfig:
    lam: float = 1e-3
    step: float | None = None
    max_iter: int = 50000
    tol: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def _ridge_lstsq(A: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    if ridge > 0.0:
        k = A.shape[1]
        A = np.vstack([A, math.sqrt(ridge) * np.eye(k)])
        y = np.concatenate([y, np.zeros(k)])
    Q, R = scipy.linalg.qr(A, mode="economic")
    d = np.abs(np.diag(R))
    if d.size and d.min() <= d.max() * A.shape[1] * np.finfo(float).eps:
        log.debug("active set is numerically singular; using minimum-norm solution")
        return scipy.linalg.lstsq(A, y)[0]
    return scipy.linalg.solve_triangular(R, Q.T @ y)


def stlsq(lib: CandidateLibrary, y: np.ndarray, cfg: StlsqConfig = StlsqConfig()) -> np.ndarray:
    """Sequentially thresholded ridge least squares.

    Works on the normalized library, so ``cfg.threshold`` bounds the peak
    contribution of a term in target units.  Returns coefficients for the
    unnormalized library.
    """
    A = lib.normalized
    y = np.asarray(y, dtype=float)
    if A.shape[0] != y.shape[0]:
        raise ValueError("library and target have different row counts")
    m = A.shape[1]
    coef = np.zeros(m)
    active = np.ones(m, dtype=bool)
    for _ in range(cfg.max_iter):
        if not active.any():
            break
        coef = np.zeros(m)
        coef[active] = _ridge_lstsq(A[:, active], y, cfg.ridge)
        small = np.abs(coef) < cfg.threshold
        new_active = active & ~small
        coef[~new_active] = 0.0
        if np.array_equal(new_active, active):
            break
        active = new_active
    else:
        if active.any():
            coef = np.zeros(m)
            coef[active] = _ridge_lstsq(A[:, active], y, cfg.ridge)
    return coef / lib.column_scales


def lasso_objective(A: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float) -> float:
    r = y - A @ w
    return float(r @ r + lam * np.abs(w).sum())


def lasso(lib: CandidateLibrary, y: np.ndarray, cfg: LassoConfig = LassoConfig(),
          trace: list | None = None) -> np.ndarray:
    """Iterative soft thresholding for ``min ||y - Theta xi||^2 + lam ||xi||_1``
    on the normalized library.  If ``trace`` is a list, the objective after
    every iteration is appended to it."""
    A = lib.normalized
    y = np.asarray(y, dtype=float)
    if A.shape[0] != y.shape[0]:
        raise ValueError("library and target have different row counts")
    G = A.T @ A
    b = A.T @ y
    yy = float(y @ y)
    L = 2.0 * np.linalg.eigvalsh(G)[-1] if G.size else 1.0
    step = cfg.step if cfg.step is not None else 1.0 / max(L, 1e-300)
    w = np.zeros(A.shape[1])

    def obj(w):
        return yy - 2.0 * b @ w + w @ G @ w + cfg.lam * np.abs(w).sum()

    f_prev = obj(w)
    rising = 0
    for _ in range(cfg.max_iter):
        z = w - step * 2.0 * (G @ w - b)
        w_new = np.sign(z) * np.maximum(np.abs(z) - step * cfg.lam, 0.0)
        f = obj(w_new)
        if trace is not None:
            trace.append(f)
        rising = rising + 1 if f > f_prev else 0
        if rising >= 10 or not np.isfinite(f):
            raise LassoDivergence(f"objective increased for {rising} iterations; use a smaller step")
        delta = np.linalg.norm(w_new - w)
        w, f_prev = w_new, f
        if delta <= cfg.tol * max(np.linalg.norm(w), 1e-300):
            break
    return w / lib.column_scales


@dataclass
class SparseModel:
    xi: np.ndarray
    terms: list[Term]
    var_names: tuple[str, ...]
    target_names: tuple[str, ...]
    hyperparams: dict
    runtime_s: float = 0.0

    @property
    def active_counts(self) -> list[int]:
        return [int(np.count_nonzero(self.xi[:, k])) for k in range(self.xi.shape[1])]

    def predict(self, Z: np.ndarray | Dataset) -> np.ndarray:
        if isinstance(Z, Dataset):
            Z = Z.features
        return evaluate_terms(self.terms, np.asarray(Z, dtype=float)) @ self.xi

    def coefficients(self, target: str) -> dict[tuple[int, ...], float]:
        k = self.target_names.index(target)
        return {t.exponents: float(self.xi[j, k]) for j, t in enumerate(self.terms)
                if t.trig is None and self.xi[j, k] != 0.0}

    def to_dict(self) -> dict:
        return {
            "kind": "sindy",
            "var_names": list(self.var_names),
            "target_names": list(self.target_names),
            "terms": [t.to_dict() for t in self.terms],
            "term_names": [t.name(self.var_names) for t in self.terms],
            "xi": self.xi.tolist(),
            "active_counts": self.active_counts,
            "hyperparams": self.hyperparams,
        }

    @classmethod
    def from_dict(cls, d: dict, runtime_s: float = 0.0) -> "SparseModel":
        if d.get("kind") != "sindy":
            raise ValueError("not a SINDy model file")
        return cls(
            xi=np.array(d["xi"], dtype=float).reshape(len(d["terms"]), len(d["target_names"])),
            terms=[Term.from_dict(t) for t in d["terms"]],
            var_names=tuple(d["var_names"]),
            target_names=tuple(d["target_names"]),
            hyperparams=d["hyperparams"],
            runtime_s=runtime_s,
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SparseModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_excitation(ds: Dataset) -> None:
    X = ds.X
    span = X.max(axis=0) - X.min(axis=0)
    level = np.maximum(np.abs(X).max(axis=0), 1.0)
    if np.all(span <= 1e-9 * level):
        raise DegenerateDataError(
            "measured states are constant over the dataset; regression on unexcited data is ill-posed")


def fit(ds: Dataset, library: LibrarySpec = LibrarySpec(),
        solver: StlsqConfig | LassoConfig = StlsqConfig()) -> SparseModel:
    """Fit every derivative column of ``ds`` independently, in column order."""
    _check_excitation(ds)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        lib = build_library(ds, library)
    for w in caught:
        log.info("%s", w.message)
    cols = []
    for k in range(ds.dX.shape[1]):
        if isinstance(solver, LassoConfig):
            cols.append(lasso(lib, ds.dX[:, k], solver))
        else:
            cols.append(stlsq(lib, ds.dX[:, k], solver))
    runtime = time.perf_counter() - t0
    name = "lasso" if isinstance(solver, LassoConfig) else "stlsq"
    return SparseModel(
        xi=np.column_stack(cols),
        terms=list(lib.terms),
        var_names=lib.var_names,
        target_names=tuple(ds.target_names),
        hyperparams={"solver": name, **asdict(solver), "library": asdict(library),
                     "dropped_terms": [t.name(lib.var_names) for t in lib.dropped]},
        runtime_s=runtime,
    )


def to_equations(model: SparseModel) -> list[str]:
    """One ``d/dt <state> = ...`` line per target; coefficients below 1e-3
    switch to scientific notation so they survive printing."""
    lines = []
    for k, target in enumerate(model.target_names):
        lhs = target[2:] if target.startswith("d_") else target
        parts = []
        for j, term in enumerate(model.terms):
            c = model.xi[j, k]
            if c == 0.0:
                continue
            mag = _fmt(abs(c))
            name = term.name(model.var_names)
            body = mag if name == "1" else f"{mag}*{name}"
            if not parts:
                parts.append(f"-{body}" if c < 0 else body)
            else:
                parts.append(f"- {body}" if c < 0 else f"+ {body}")
        lines.append(f"d/dt {lhs} = " + (" ".join(parts) if parts else "0"))
    return lines


def _fmt(x: float) -> str:
    if x == 0.0 or x >= 1e-3:
        return f"{x:.6f}"
    return f"{x:.6e}"
