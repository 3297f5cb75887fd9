"""Equilibrium search, fixed-step RK4 integration and dataset I/O."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .plant import (
    INPUT_NAMES,
    MEASURED_NAMES,
    N_MEASURED,
    N_STATES,
    STATE_NAMES,
    NumericalBlowUp,
    PlantParams,
    PlantState,
    ReferenceInput,
    derivative,
    park,
)

log = logging.getLogger(__name__)

DERIVATIVE_NAMES: tuple[str, ...] = tuple(f"d_{n}" for n in MEASURED_NAMES)
COLUMN_NAMES: tuple[str, ...] = ("t",) + MEASURED_NAMES + INPUT_NAMES + DERIVATIVE_NAMES
HIDDEN_NAMES: tuple[str, ...] = STATE_NAMES[N_MEASURED:]


class EquilibriumError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DisturbanceEvent:
    time: float
    target: str
    value: float

    def __post_init__(self):
        if self.target not in INPUT_NAMES:
            raise ValueError(f"unknown event target {self.target!r}; expected one of {INPUT_NAMES}")
        if not (math.isfinite(self.time) and self.time >= 0.0):
            raise ValueError(f"event time must be finite and >= 0, got {self.time}")
        if not math.isfinite(self.value):
            raise ValueError("event value must be finite")


DEFAULT_SCHEDULE: tuple[DisturbanceEvent, ...] = (
    DisturbanceEvent(0.5, "p_ref", 0.7),
    DisturbanceEvent(1.0, "q_ref", 0.2),
    DisturbanceEvent(1.5, "v_ref", 0.9),
)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-5
    t_end: float = 2.0
    sample_stride: int = 10
    schedule: tuple[DisturbanceEvent, ...] = DEFAULT_SCHEDULE
    noise_std: float = 0.0
    seed: int = 0
    derivative_mode: str = "exact"

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(self.schedule))
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")
        if not self.t_end > 0.0:
            raise ValueError("t_end must be > 0")
        if int(self.sample_stride) != self.sample_stride or self.sample_stride < 1:
            raise ValueError("sample_stride must be an integer >= 1")
        times = [e.time for e in self.schedule]
        if times != sorted(times):
            raise ValueError("schedule must be sorted by time")
        if times and times[-1] > self.t_end:
            raise ValueError(f"event at t={times[-1]} lies beyond t_end={self.t_end}")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")
        if self.derivative_mode not in ("exact", "finite_difference"):
            raise ValueError("derivative_mode must be 'exact' or 'finite_difference'")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def sample_dt(self) -> float:
        return self.dt * self.sample_stride


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sampled measured states ``X``, references ``U`` and derivatives ``dX``.

    ``hidden`` carries the six unmeasured controller states when the data
    came straight from :func:`simulate`; it is never written to disk.
    """

    time: np.ndarray
    X: np.ndarray
    U: np.ndarray
    dX: np.ndarray
    column_names: tuple[str, ...] = COLUMN_NAMES
    hidden: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.time)
        if n == 0:
            raise ValueError("dataset is empty")
        shapes = {"X": (n, N_MEASURED), "U": (n, len(INPUT_NAMES)), "dX": (n, N_MEASURED)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("time", "X", "U", "dX"):
            a = getattr(self, name)
            a.setflags(write=False)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"dataset column block {name} contains non-finite values")

    def __len__(self) -> int:
        return len(self.time)

    @property
    def features(self) -> np.ndarray:
        """Measured states followed by references, ``(samples, 12)``."""
        return np.hstack([self.X, self.U])

    @property
    def feature_names(self) -> tuple[str, ...]:
        return MEASURED_NAMES + INPUT_NAMES

    @property
    def target_names(self) -> tuple[str, ...]:
        return DERIVATIVE_NAMES

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.time, self.X, self.U, self.dX):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def subsample(self, n: int) -> "Dataset":
        """Evenly strided subset of at most ``n`` rows (first and last kept)."""
        if n >= len(self):
            return self
        idx = np.unique(np.linspace(0, len(self) - 1, n).round().astype(int))
        hid = None if self.hidden is None else self.hidden[idx]
        return Dataset(self.time[idx], self.X[idx], self.U[idx], self.dX[idx], self.column_names, hid)


def _rk4(f: Callable[[Sequence[float]], Sequence[float]], x: Sequence[float], dt: float) -> list[float]:
    k1 = f(x)
    h = 0.5 * dt
    k2 = f([a + h * b for a, b in zip(x, k1)])
    k3 = f([a + h * b for a, b in zip(x, k2)])
    k4 = f([a + dt * b for a, b in zip(x, k3)])
    w = dt / 6.0
    return [a + w * (b + 2.0 * c + 2.0 * d + e) for a, b, c, d, e in zip(x, k1, k2, k3, k4)]


def rk4_step(state, u, params: PlantParams | Callable, dt: float, t: float = 0.0) -> list[float]:
    """One classical Runge-Kutta step with ``u`` held over the step.

    ``params`` is normally a :class:`PlantParams`; any callable ``f(x, u)``
    is also accepted so the scheme can be exercised on other systems.
    """
    if not dt > 0.0:
        raise ValueError("dt must be > 0")
    x = state.as_tuple() if isinstance(state, PlantState) else list(state)
    if isinstance(params, PlantParams):
        k = params.constants
        uu = u.as_tuple() if isinstance(u, ReferenceInput) else tuple(u)
        f = lambda y: derivative(y, uu, k)  # noqa: E731
    else:
        f = lambda y: params(y, u)  # noqa: E731
    out = _rk4(f, x, dt)
    if not math.isfinite(sum(out)):
        raise NumericalBlowUp(f"non-finite state after RK4 step at t={t:.6g} s")
    return out


def _flat_start(u: ReferenceInput, params: PlantParams) -> np.ndarray:
    x = np.zeros(N_STATES)
    x[STATE_NAMES.index("v_filt_r")] = u.v_ref
    x[STATE_NAMES.index("i_cv_r")] = x[STATE_NAMES.index("i_filt_r")] = u.p_ref / u.v_ref
    x[STATE_NAMES.index("p_m")] = u.p_ref
    x[STATE_NAMES.index("q_m")] = u.q_ref
    x[STATE_NAMES.index("phi_d")], x[STATE_NAMES.index("phi_q")] = park(0.0, u.v_ref, 0.0)
    return x


def _newton(x0: np.ndarray, u: tuple, k: tuple, tol: float, max_iter: int = 60) -> tuple[np.ndarray, float]:
    F = lambda y: np.array(derivative(y, u, k))  # noqa: E731
    x = x0.copy()
    f = F(x)
    for _ in range(max_iter):
        res = np.abs(f).max()
        if res < tol:
            break
        J = np.empty((N_STATES, N_STATES))
        for j in range(N_STATES):
            h = 1e-7 * max(1.0, abs(x[j]))
            e = np.zeros(N_STATES)
            e[j] = h
            J[:, j] = (F(x + e) - F(x - e)) / (2.0 * h)
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            break
        norm0 = np.linalg.norm(f)
        lam = 1.0
        while lam > 1e-6:
            xt = x + lam * dx
            ft = F(xt)
            if np.all(np.isfinite(ft)) and np.linalg.norm(ft) < norm0:
                break
            lam *= 0.5
        else:
            break
        x, f = xt, ft
    return x, float(np.abs(f).max())


def find_equilibrium(u0: ReferenceInput, params: PlantParams, tol: float = 1e-8) -> PlantState:
    """Steady state of the closed loop for constant references ``u0``.

    Damped Newton on ``rhs = 0`` with a central-difference Jacobian from a
    flat start; if that stalls, the plant is integrated for 2 s from the flat
    start and Newton is restarted from the settled state.
    """
    u = u0.as_tuple()
    k = params.constants
    x0 = _flat_start(u0, params)
    x, res = _newton(x0, u, k, tol)
    if res < tol:
        return PlantState.from_array(x)
    log.info("Newton from flat start stalled (max|rhs|=%.3g); settling by integration", res)
    try:
        xs = list(x0)
        for i in range(int(round(2.0 / 1e-5))):
            xs = rk4_step(xs, u, params, 1e-5, t=i * 1e-5)
        x, res = _newton(np.array(xs), u, k, tol)
    except NumericalBlowUp:
        res = math.inf
    if res < tol:
        return PlantState.from_array(x)
    d = np.abs(np.array(derivative(x, u, k)))
    worst = np.argsort(d)[::-1][:4]
    detail = ", ".join(f"{STATE_NAMES[i]}={d[i]:.3g}" for i in worst)
    raise EquilibriumError(f"no equilibrium found (max|rhs|={res:.3g}); worst residuals: {detail}")


def _event_steps(config: SimConfig) -> list[tuple[int, DisturbanceEvent]]:
    return [(int(math.ceil(e.time / config.dt - 1e-9)), e) for e in config.schedule]


def simulate(config: SimConfig, params: PlantParams, x0: PlantState | None = None,
             u0: ReferenceInput | None = None) -> Dataset:
    """Integrate through the disturbance schedule and record the dataset.

    Starts from the equilibrium for the nominal references unless ``x0`` is
    given.  Each event is applied at the first step whose time is at or
    after the event time, so a sample taken at that step already carries the
    new reference.
    """
    if u0 is None:
        u0 = params.ctl.nominal_input()
    if x0 is None:
        x0 = find_equilibrium(u0, params)
    k = params.constants
    dt = config.dt
    stride = config.sample_stride
    n_steps = config.n_steps
    n_samples = n_steps // stride + 1

    events = _event_steps(config)
    u = list(u0.as_tuple())
    x = list(x0.as_tuple())
    rec_x = np.empty((n_samples, N_STATES))
    rec_u = np.empty((n_samples, len(INPUT_NAMES)))
    rec_d = np.empty((n_samples, N_MEASURED))
    ei = 0
    ut = tuple(u)
    f = lambda y: derivative(y, ut, k)  # noqa: E731
    for step in range(n_steps + 1):
        if ei < len(events) and events[ei][0] <= step:
            while ei < len(events) and events[ei][0] <= step:
                ev = events[ei][1]
                u[INPUT_NAMES.index(ev.target)] = ev.value
                ei += 1
            ut = tuple(u)
            f = lambda y: derivative(y, ut, k)  # noqa: E731
        if step % stride == 0:
            j = step // stride
            rec_x[j] = x
            rec_u[j] = ut
            rec_d[j] = f(x)[:N_MEASURED]
        if step == n_steps:
            break
        x = _rk4(f, x, dt)
        if not math.isfinite(sum(x)):
            raise NumericalBlowUp(f"simulation blew up at t={(step + 1) * dt:.6g} s")

    time = np.arange(n_samples) * config.sample_dt
    X = rec_x[:, :N_MEASURED].copy()
    dX = rec_d
    if config.noise_std > 0.0:
        rng = np.random.default_rng(config.seed)
        X = X + rng.normal(0.0, config.noise_std, X.shape)
    if config.derivative_mode == "finite_difference":
        dX = np.gradient(X, config.sample_dt, axis=0)
    return Dataset(time, X, rec_u, dX, COLUMN_NAMES, rec_x[:, N_MEASURED:].copy())


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(COLUMN_NAMES) + "\n")
    block = np.hstack([ds.time[:, None], ds.X, ds.U, ds.dX])
    np.savetxt(buf, block, fmt="%.17g", delimiter=",", newline="\n")
    return buf.getvalue()


def write_dataset(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(dataset_to_csv(ds))
    return path


def read_dataset(path: str | Path) -> Dataset:
    """Parse a dataset file, reporting the first problem with its line number."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) != len(COLUMN_NAMES):
            raise DatasetFormatError(
                f"{path}:1: header has {len(header)} columns, expected {len(COLUMN_NAMES)}")
        for got, want in zip(header, COLUMN_NAMES):
            if got != want:
                raise DatasetFormatError(f"{path}:1: unexpected column {got!r} where {want!r} belongs")
        data = []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(COLUMN_NAMES):
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {len(COLUMN_NAMES)} cells, found {len(row)}")
            try:
                data.append([float(c) for c in row])
            except ValueError:
                bad = next(i for i, c in enumerate(row) if not _is_float(c))
                raise DatasetFormatError(
                    f"{path}:{lineno}: non-numeric value {row[bad]!r} in column {COLUMN_NAMES[bad]!r}"
                ) from None
    if not data:
        raise DatasetFormatError(f"{path}: no data rows")
    a = np.array(data)
    i0 = 1 + N_MEASURED
    i1 = i0 + len(INPUT_NAMES)
    return Dataset(a[:, 0], a[:, 1:i0], a[:, i0:i1], a[:, i1:], COLUMN_NAMES)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
