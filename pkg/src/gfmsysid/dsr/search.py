"""Risk-seeking policy-gradient search for closed-form derivative models."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import Constraints, PolicyNet, SampledBatch
from .tokens import OPERATORS, Expression, TokenSet, columns_of

# finite stand-in for invalid losses keeps the simplex arithmetic nan-free
_BAD_LOSS = 1e300


@dataclass(frozen=True)
class DsrConfig:
    """Search hyperparameters.

    ``n_train`` rows (evenly spaced over the record) are used for reward
    and constant fitting.  ``stop_reward`` ends a search early once the
    best reward reaches it.
    """

    batch_size: int = 500
    epochs: int = 200
    epsilon: float = 0.05
    learning_rate: float = 5e-4
    entropy_weight: float = 0.005
    hidden: int = 32
    max_length: int = 32
    min_length: int = 2
    max_consts: int = 5
    max_unary_chain: int = 2
    operators: tuple[str, ...] = tuple(OPERATORS)
    const_max_evals: int = 200
    const_starts: tuple[float, ...] = (1.0, -1.0, 0.1)
    n_train: int = 1000
    stop_reward: float | None = 0.99999
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "const_starts", tuple(float(s) for s in self.const_starts))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.learning_rate <= 0 or self.entropy_weight < 0:
            raise ValueError("learning_rate must be > 0 and entropy_weight >= 0")
        if self.const_max_evals < 1 or not self.const_starts:
            raise ValueError("constant search needs a positive budget and at least one start")
        if self.n_train < 2:
            raise ValueError("n_train must be >= 2")
        if self.stop_reward is not None and not 0 < self.stop_reward <= 1:
            raise ValueError("stop_reward must lie in (0, 1]")
        self.constraints  # validates the length/constant bounds

    @property
    def constraints(self) -> Constraints:
        return Constraints(self.max_length, self.min_length, self.max_consts, self.max_unary_chain)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["operators"] = list(self.operators)
        d["const_starts"] = list(self.const_starts)
        return d


def nrmse(y_hat: np.ndarray, y: np.ndarray) -> float:
    sd = float(np.std(y))
    if sd == 0.0:
        raise ValueError("target has zero variance; NRMSE is undefined")
    return float(np.sqrt(np.mean((y_hat - y) ** 2)) / sd)


def reward(expr: Expression, columns, y: np.ndarray) -> float:
    """``1 / (1 + NRMSE)``, or 0 when the expression is not finite on the data."""
    y_hat, ok = expr.evaluate(columns)
    if not ok:
        return 0.0
    return 1.0 / (1.0 + nrmse(y_hat, y))


def nelder_mead(f, x0: Sequence[float], max_evals: int, step: float = 0.1,
                xtol: float = 1e-10, ftol: float = 1e-14) -> tuple[list[float], float, int]:
    """Minimise ``f`` from ``x0`` with the Nelder-Mead simplex.

    Works on plain lists, which is much faster than small arrays for the
    handful of constants an expression carries.  Convergence is relative:
    the simplex must shrink below ``xtol`` times the scale of its best vertex
    and the spread of values below ``ftol`` times the best value.

    Returns ``(x, f(x), evaluations used)``.
    """
    n = len(x0)
    simplex = [[float(v) for v in x0]]
    for i in range(n):
        v = list(simplex[0])
        v[i] = v[i] * (1.0 + step) if v[i] != 0.0 else 0.00025
        simplex.append(v)
    vals = [f(v) for v in simplex[:max_evals]]
    used = len(vals)
    if used < n + 1:
        i = min(range(used), key=vals.__getitem__)
        return simplex[i], vals[i], used
    # adaptive coefficients (Gao and Han) suit higher dimensions and reduce to the classic ones at n=2
    rho, chi, psi, sigma = 1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), 1.0 - 1.0 / n
    while used < max_evals:
        order = sorted(range(n + 1), key=vals.__getitem__)
        simplex = [simplex[i] for i in order]
        vals = [vals[i] for i in order]
        best, worst = simplex[0], simplex[-1]
        scale = max(1.0, max(abs(b) for b in best))
        spread = max(abs(a - b) for v in simplex[1:] for a, b in zip(v, best))
        if spread <= xtol * scale and vals[-1] - vals[0] <= ftol * max(vals[0], 1e-300):
            break
        cen = [sum(col) / n for col in zip(*simplex[:-1])]
        xr = [c + rho * (c - w) for c, w in zip(cen, worst)]
        fr = f(xr)
        used += 1
        if fr < vals[0]:
            if used < max_evals:
                xe = [c + rho * chi * (c - w) for c, w in zip(cen, worst)]
                fe = f(xe)
                used += 1
                simplex[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
            else:
                simplex[-1], vals[-1] = xr, fr
        elif fr < vals[-2]:
            simplex[-1], vals[-1] = xr, fr
        else:
            if fr < vals[-1]:
                xc = [c + psi * rho * (c - w) for c, w in zip(cen, worst)]
            else:
                xc = [c - psi * (c - w) for c, w in zip(cen, worst)]
            fc = f(xc)
            used += 1
            if fc < min(fr, vals[-1]):
                simplex[-1], vals[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    if used >= max_evals:
                        break
                    simplex[i] = [b + sigma * (v - b) for v, b in zip(simplex[i], best)]
                    vals[i] = f(simplex[i])
                    used += 1
    i = min(range(n + 1), key=vals.__getitem__)
    return simplex[i], vals[i], used


def optimize_constants(expr: Expression, columns, y: np.ndarray, max_evals: int = 200,
                       starts: Sequence[float] = (1.0, -1.0, 0.1)) -> Expression:
    """Fit the constants of ``expr`` by Nelder-Mead on the squared error.

    Minimising the squared error maximises the reward.  Starts fill every
    constant with the same value and run in order while the shared budget of
    ``max_evals`` evaluations lasts; an exact fit ends the search early.
    Expressions without constants come back unchanged.
    """
    k = expr.n_consts
    if k == 0:
        return expr
    fn = expr._compiled()
    n = len(y)
    exact = 1e-28 * max(float(np.dot(y, y)), 1e-300)

    def loss(c):
        r = fn(columns, c) - y
        v = float(np.dot(r, r)) if np.ndim(r) else float(r * r) * n
        # nan fails both comparisons
        return v if v < _BAD_LOSS else _BAD_LOSS

    best_c, best_f = [float(starts[0])] * k, _BAD_LOSS
    left = max_evals
    with np.errstate(all="ignore"):
        for s in starts:
            if left <= 0:
                break
            c, f, used = nelder_mead(loss, [float(s)] * k, left)
            left -= used
            if f < best_f:
                best_c, best_f = c, f
            if best_f <= exact:
                break
    return expr.with_constants(best_c)


def risk_filter(rewards: np.ndarray, epsilon: float) -> tuple[np.ndarray, float]:
    """Indices of the top ``epsilon`` fraction of the batch and the cut-off reward."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("empty reward batch")
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    r_eps = float(np.quantile(r, 1.0 - epsilon))
    return np.flatnonzero(r >= r_eps), r_eps


def policy_update(policy: PolicyNet, batch: SampledBatch, rewards: np.ndarray, r_eps: float,
                  lr: float, entropy_weight: float = 0.0) -> float:
    """One risk-seeking gradient step on the retained sequences.

    Returns the objective value before the step.  A non-finite gradient
    leaves the policy untouched.
    """
    if len(batch) == 0:
        raise ValueError("no retained sequences")
    adv = (np.asarray(rewards, dtype=float) - r_eps) / len(batch)
    with np.errstate(invalid="ignore", over="ignore"):
        J, grads, _ = policy.objective(batch, adv, entropy_weight)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        warnings.warn("non-finite policy gradient; update skipped", RuntimeWarning, stacklevel=2)
        return J
    policy.ascend(grads, lr)
    return J


@dataclass
class TrainResult:
    """Outcome of one search.

    ``history`` holds the best reward seen so far after each epoch.
    """

    best: Expression
    best_reward: float
    history: list[float] = field(default_factory=list)
    n_evaluated: int = 0
    runtime_s: float = 0.0


def _train_rows(n: int, n_train: int) -> np.ndarray:
    if n <= n_train:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, n_train).round().astype(int))


def train(Z: np.ndarray, y: np.ndarray, var_names: Sequence[str], cfg: DsrConfig = DsrConfig()) -> TrainResult:
    """Search for an expression in ``var_names`` that reproduces ``y``.

    With ``epochs == 0`` a single random batch is scored and no update
    is made.
    """
    t0 = time.perf_counter()
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0] or Z.shape[1] != len(var_names):
        raise ValueError("Z must be (n, len(var_names)) and match y")
    rows = _train_rows(len(y), cfg.n_train)
    cols, yt = columns_of(Z[rows]), y[rows]
    if np.std(yt) == 0.0:
        raise ValueError("target has zero variance on the training rows")
    ts = TokenSet(tuple(var_names), cfg.operators)
    cons = cfg.constraints
    rng = np.random.default_rng(cfg.seed)
    policy = PolicyNet(len(ts), cfg.hidden, seed=int(rng.integers(2**31)))
    cache: dict[tuple[int, ...], tuple[Expression, float]] = {}
    best, best_r = None, -1.0
    history: list[float] = []

    def score(seq):
        hit = cache.get(seq)
        if hit is None:
            e = optimize_constants(Expression(seq, ts), cols, yt, cfg.const_max_evals, cfg.const_starts)
            hit = cache[seq] = (e, reward(e, cols, yt))
        return hit

    for epoch in range(max(cfg.epochs, 1)):
        batch = policy.sample(cfg.batch_size, ts, cons, rng)
        scored = [score(batch.sequence(i)) for i in range(len(batch))]
        rewards = np.array([s[1] for s in scored])
        i_best = int(np.argmax(rewards))
        # ties go to the shorter expression, then the earlier sample
        if rewards[i_best] > best_r or (rewards[i_best] == best_r and scored[i_best][0].length < best.length):
            best, best_r = scored[i_best]
        history.append(best_r)
        if cfg.epochs == 0 or (cfg.stop_reward is not None and best_r >= cfg.stop_reward):
            break
        keep, r_eps = risk_filter(rewards, cfg.epsilon)
        policy_update(policy, batch.subset(keep), rewards[keep], r_eps, cfg.learning_rate, cfg.entropy_weight)
    return TrainResult(best, best_r, history, len(cache), time.perf_counter() - t0)


@dataclass
class DsrModel:
    """One fitted expression per derivative target.

    Wall-clock times (``runtime_s`` and ``target_runtimes``) stay in memory
    and are not written to the model file.
    """

    expressions: dict[str, Expression]
    var_names: tuple[str, ...]
    rewards: dict[str, float]
    config: DsrConfig
    runtime_s: float = 0.0
    r2: dict[str, float] | None = None
    target_runtimes: dict[str, float] = field(default_factory=dict)

    @property
    def target_names(self) -> list[str]:
        return list(self.expressions)

    def predict(self, Z: np.ndarray) -> np.ndarray:
        cols = columns_of(Z)
        out = []
        for name, e in self.expressions.items():
            y, _ = e.evaluate(cols)
            out.append(y)
        return np.column_stack(out)

    def to_dict(self) -> dict:
        return {
            "kind": "dsr",
            "var_names": list(self.var_names),
            "config": self.config.to_dict(),
            "targets": {
                name: {
                    "tokens": e.names,
                    "constants": [float(c) for c in e.constants],
                    "infix": e.infix(),
                    "reward": self.rewards[name],
                    **({"r2": self.r2[name]} if self.r2 and name in self.r2 else {}),
                }
                for name, e in self.expressions.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DsrModel":
        if d.get("kind") != "dsr":
            raise ValueError("not a symbolic-regression model file")
        cfg = DsrConfig(**d["config"])
        ts = TokenSet(tuple(d["var_names"]), cfg.operators)
        exprs, rewards = {}, {}
        for name, t in d["targets"].items():
            exprs[name] = Expression.from_names(t["tokens"], ts, t["constants"])
            rewards[name] = float(t["reward"])
        r2 = {n: float(t["r2"]) for n, t in d["targets"].items() if "r2" in t} or None
        return cls(exprs, tuple(d["var_names"]), rewards, cfg, r2=r2)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DsrModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def equations(self) -> list[str]:
        return [f"d/dt {name.removeprefix('d_')} = {e.infix()}" for name, e in self.expressions.items()]


def fit(ds, cfg: DsrConfig = DsrConfig(), targets: Sequence[str] | None = None, log=None) -> DsrModel:
    """Run one independent search per derivative column of ``ds``.

    Each target gets its own seed spawned from ``cfg.seed``.
    """
    t0 = time.perf_counter()
    names = list(ds.target_names)
    targets = names if targets is None else list(targets)
    unknown = set(targets) - set(names)
    if unknown:
        raise ValueError(f"unknown targets: {sorted(unknown)}")
    Z = ds.features
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(names))
    exprs, rewards, runtimes = {}, {}, {}
    for name in targets:
        j = names.index(name)
        sub = DsrConfig(**{**cfg.to_dict(), "seed": int(seeds[j])})
        res = train(Z, ds.dX[:, j], ds.feature_names, sub)
        exprs[name], rewards[name], runtimes[name] = res.best, res.best_reward, res.runtime_s
        if log is not None:
            log(f"{name}: reward {res.best_reward:.6f} after {len(res.history)} epochs "
                f"({res.runtime_s:.1f} s): {res.best.infix()}")
    return DsrModel(exprs, tuple(ds.feature_names), rewards, cfg, time.perf_counter() - t0,
                    target_runtimes=runtimes)
