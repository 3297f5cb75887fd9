"""Token vocabulary, pre-order expressions and their numeric evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

OPERATORS: dict[str, int] = {"add": 2, "sub": 2, "mul": 2, "div": 2, "sin": 1, "cos": 1}
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
CONST = "const"


@dataclass(frozen=True)
class TokenSet:
    """Operators first, then variables, then the constant placeholder.

    Token ids are positions in :attr:`names` and never change for a given
    operator/variable selection.
    """

    variables: tuple[str, ...]
    operators: tuple[str, ...] = tuple(OPERATORS)
    use_const: bool = True
    names: tuple[str, ...] = field(init=False)
    arities: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        for op in self.operators:
            if op not in OPERATORS:
                raise ValueError(f"unknown operator {op!r}")
        if len(set(self.variables)) != len(self.variables) or not self.variables:
            raise ValueError("variables must be unique and nonempty")
        clash = set(self.variables) & (set(OPERATORS) | {CONST})
        if clash:
            raise ValueError(f"variable names clash with tokens: {sorted(clash)}")
        names = tuple(self.operators) + tuple(self.variables) + ((CONST,) if self.use_const else ())
        arities = tuple(OPERATORS[o] for o in self.operators) + (0,) * (len(names) - len(self.operators))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "arities", arities)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def n_ops(self) -> int:
        return len(self.operators)

    @property
    def const_id(self) -> int:
        return len(self.names) - 1 if self.use_const else -1

    def var_id(self, name: str) -> int:
        return self.n_ops + self.variables.index(name)

    def ids(self, names: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.names.index(n) for n in names)

    def is_unary(self, tok: int) -> bool:
        return self.arities[tok] == 1


def is_complete(tokens: Sequence[int], arities: Sequence[int]) -> bool:
    """True when ``tokens`` is exactly one full pre-order tree."""
    open_slots = 1
    for t in tokens:
        if open_slots == 0:
            return False
        open_slots += arities[t] - 1
    return open_slots == 0 and len(tokens) > 0


@dataclass(frozen=True)
class Node:
    token: int
    children: tuple["Node", ...] = ()


def decode(tokens: Sequence[int], arities: Sequence[int]) -> Node:
    if not is_complete(tokens, arities):
        raise ValueError("token sequence is not a complete pre-order expression")
    pos = 0

    def build() -> Node:
        nonlocal pos
        t = tokens[pos]
        pos += 1
        return Node(t, tuple(build() for _ in range(arities[t])))

    return build()


def encode(node: Node) -> tuple[int, ...]:
    out = [node.token]
    for c in node.children:
        out.extend(encode(c))
    return tuple(out)


class Expression:
    """A complete pre-order token sequence plus fitted constant values."""

    __slots__ = ("tokens", "tokenset", "constants", "_fn")

    def __init__(self, tokens: Sequence[int], tokenset: TokenSet, constants: Sequence[float] | None = None):
        self.tokens = tuple(int(t) for t in tokens)
        self.tokenset = tokenset
        if not is_complete(self.tokens, tokenset.arities):
            raise ValueError(f"incomplete expression {self.names}")
        n = self.n_consts
        if constants is None:
            constants = np.ones(n)
        self.constants = np.asarray(constants, dtype=float).reshape(n)
        self._fn = None

    @classmethod
    def from_names(cls, names: Sequence[str], tokenset: TokenSet, constants=None) -> "Expression":
        return cls(tokenset.ids(names), tokenset, constants)

    @property
    def names(self) -> list[str]:
        return [self.tokenset.names[t] for t in self.tokens]

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def n_consts(self) -> int:
        return sum(1 for t in self.tokens if t == self.tokenset.const_id)

    def with_constants(self, constants) -> "Expression":
        e = Expression(self.tokens, self.tokenset, constants)
        e._fn = self._fn
        return e

    def _source(self, const_fmt, var_fmt=str) -> str:
        return _render(self.tokens, self.tokenset, const_fmt, var_fmt)

    def infix(self, precision: int | None = 6) -> str:
        """Readable formula; constants shown with ``precision`` significant
        digits, or as ``c0, c1, ...`` when ``precision`` is None."""
        if precision is None:
            return self._source(lambda k: f"c{k}")
        return self._source(lambda k: f"{self.constants[k]:.{precision}g}")

    def _compiled(self):
        if self._fn is None:
            index = {v: i for i, v in enumerate(self.tokenset.variables)}
            code = self._source(lambda k: f"c[{k}]", lambda v: f"X[{index[v]}]")
            self._fn = eval(f"lambda X, c: {code}", {"sin": np.sin, "cos": np.cos})  # noqa: S307
        return self._fn

    def evaluate(self, columns: Sequence[np.ndarray], constants=None) -> tuple[np.ndarray, bool]:
        """Evaluate on a list of variable columns.

        Returns ``(prediction, valid)``; any non-finite value invalidates
        the expression.
        """
        c = self.constants if constants is None else constants
        with np.errstate(all="ignore"):
            y = self._compiled()(columns, c)
        n = len(columns[0])
        y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
        return y, bool(np.all(np.isfinite(y)))

    def __eq__(self, other):
        return isinstance(other, Expression) and self.tokens == other.tokens and np.array_equal(
            self.constants, other.constants)

    def __hash__(self):
        return hash(self.tokens)

    def __repr__(self):
        return f"Expression({self.infix()})"


def _render(tokens, ts: TokenSet, const_fmt, var_fmt) -> str:
    pos = 0
    k = 0

    def walk() -> str:
        nonlocal pos, k
        t = tokens[pos]
        pos += 1
        if t == ts.const_id:
            k += 1
            return const_fmt(k - 1)
        name = ts.names[t]
        if ts.arities[t] == 0:
            return var_fmt(name)
        args = [walk() for _ in range(ts.arities[t])]
        if ts.arities[t] == 1:
            return f"{name}({args[0]})"
        return f"({args[0]} {_SYMBOL[name]} {args[1]})"

    return walk()


def columns_of(Z: np.ndarray) -> list[np.ndarray]:
    """Contiguous per-variable columns, the layout :meth:`Expression.evaluate` expects."""
    Z = np.asarray(Z, dtype=float)
    return [np.ascontiguousarray(Z[:, i]) for i in range(Z.shape[1])]
