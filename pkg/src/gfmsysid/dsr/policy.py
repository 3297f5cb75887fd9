"""Recurrent sampling policy over pre-order token sequences.

A single-layer tanh RNN reads the parent and left-sibling tokens of the
slot being filled and emits logits over the vocabulary.  Invalid tokens are
masked before the softmax, so every sampled sequence is a complete
expression within the length budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokens import Expression, TokenSet


@dataclass(frozen=True)
class Constraints:
    """Structural priors applied while sampling.

    Attributes
    ----------
    max_length, min_length : int
        Token-count bounds for a complete expression.
    max_consts : int
        Cap on constant placeholders per expression.
    max_unary_chain : int
        Longest allowed run of directly nested unary operators.
    """

    max_length: int = 32
    min_length: int = 2
    max_consts: int = 5
    max_unary_chain: int = 2

    def __post_init__(self):
        if self.max_length < 1 or self.min_length < 1 or self.min_length > self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.max_consts < 0 or self.max_unary_chain < 0:
            raise ValueError("max_consts and max_unary_chain must be >= 0")


@dataclass
class SampledBatch:
    """Padded record of sampled sequences, enough to replay the policy.

    ``parents`` and ``siblings`` use ``n_tokens`` as the empty marker and
    ``masks[i, t]`` holds the allowed tokens at step ``t``.
    """

    tokens: np.ndarray
    parents: np.ndarray
    siblings: np.ndarray
    masks: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.lengths)

    def sequence(self, i: int) -> tuple[int, ...]:
        return tuple(int(t) for t in self.tokens[i, : self.lengths[i]])

    def subset(self, idx) -> "SampledBatch":
        idx = np.asarray(idx, dtype=int)
        return SampledBatch(self.tokens[idx], self.parents[idx], self.siblings[idx], self.masks[idx],
                            self.lengths[idx])


class _Slot:
    __slots__ = ("parent", "left", "chain", "right")

    def __init__(self, parent, chain, right=None):
        self.parent = parent
        self.left = None
        self.chain = chain
        self.right = right


class _Builder:
    """Tracks the open slots of one partially sampled expression."""

    def __init__(self, ts: TokenSet, cons: Constraints):
        self.ts = ts
        self.cons = cons
        self.stack = [_Slot(None, 0)]
        self.length = 0
        self.n_consts = 0

    @property
    def done(self) -> bool:
        return not self.stack

    def context(self) -> tuple[int, int]:
        empty = len(self.ts)
        top = self.stack[-1]
        return (empty if top.parent is None else top.parent,
                empty if top.left is None else top.left)

    def mask(self) -> np.ndarray:
        ts, cons = self.ts, self.cons
        ar = np.asarray(ts.arities)
        top = self.stack[-1]
        n_open = len(self.stack)
        # every open slot still needs at least one token
        room = cons.max_length - self.length - n_open
        m = ar <= room
        if n_open == 1 and self.length + 1 < cons.min_length:
            m &= ar > 0
        if top.chain >= cons.max_unary_chain:
            m &= ar != 1
        c = ts.const_id
        if c >= 0:
            parent_unary = top.parent is not None and ts.arities[top.parent] == 1
            if parent_unary or top.left == c or self.n_consts >= cons.max_consts:
                m[c] = False
        return m

    def push(self, tok: int):
        slot = self.stack.pop()
        if slot.right is not None:
            slot.right.left = tok
        self.length += 1
        if tok == self.ts.const_id:
            self.n_consts += 1
        a = self.ts.arities[tok]
        if a == 2:
            right = _Slot(tok, 0)
            self.stack.append(right)
            self.stack.append(_Slot(tok, 0, right))
        elif a == 1:
            self.stack.append(_Slot(tok, slot.chain + 1))


class PolicyNet:
    """Tanh RNN with a masked softmax head.

    Parameters
    ----------
    n_tokens : int
        Vocabulary size.
    hidden : int
        Hidden-state width.
    seed : int
        Seed for the weight initialisation.
    """

    PARAM_NAMES = ("W_x", "W_h", "b", "W_o", "b_o")

    def __init__(self, n_tokens: int, hidden: int = 32, seed: int = 0):
        if n_tokens < 1 or hidden < 1:
            raise ValueError("n_tokens and hidden must be positive")
        rng = np.random.default_rng(seed)
        self.n_tokens = n_tokens
        self.hidden = hidden
        n_in = 2 * (n_tokens + 1)
        s_in = np.sqrt(1.0 / n_in + 1.0 / hidden)
        self.params = {
            "W_x": rng.normal(0.0, s_in, (hidden, n_in)),
            "W_h": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
            "b": np.zeros(hidden),
            "W_o": rng.normal(0.0, 0.1 / np.sqrt(hidden), (n_tokens, hidden)),
            "b_o": np.zeros(n_tokens),
        }
        self._adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._adam_t = 0

    # ------------------------------------------------------------------ sampling
    def _step(self, h, parents, siblings):
        p = self.params
        a = p["W_x"][:, parents].T + p["W_x"][:, self.n_tokens + 1 + siblings].T + h @ p["W_h"].T + p["b"]
        h = np.tanh(a)
        return h, h @ p["W_o"].T + p["b_o"]

    def sample(self, n: int, tokenset: TokenSet, constraints: Constraints,
               rng: np.random.Generator) -> SampledBatch:
        """Draw ``n`` complete expressions."""
        if len(tokenset) != self.n_tokens:
            raise ValueError("token set size does not match the policy")
        L, V = constraints.max_length, self.n_tokens
        tokens = np.zeros((n, L), dtype=np.int64)
        parents = np.full((n, L), V, dtype=np.int64)
        siblings = np.full((n, L), V, dtype=np.int64)
        masks = np.zeros((n, L, V), dtype=bool)
        lengths = np.zeros(n, dtype=np.int64)
        builders = [_Builder(tokenset, constraints) for _ in range(n)]
        h = np.zeros((n, self.hidden))
        alive = np.arange(n)
        for t in range(L):
            if alive.size == 0:
                break
            for i in alive:
                b = builders[i]
                parents[i, t], siblings[i, t] = b.context()
                masks[i, t] = b.mask()
            h_new, logits = self._step(h[alive], parents[alive, t], siblings[alive, t])
            h[alive] = h_new
            probs = _masked_softmax(logits, masks[alive, t])
            u = rng.random(alive.size)
            cdf = np.cumsum(probs, axis=1)
            choice = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), V - 1)
            # never land on a masked token through round-off at the cdf edge
            bad = ~masks[alive, t][np.arange(alive.size), choice]
            if bad.any():
                choice[bad] = np.argmax(probs[bad], axis=1)
            tokens[alive, t] = choice
            for i, tok in zip(alive, choice):
                builders[i].push(int(tok))
            lengths[alive] += 1
            alive = np.array([i for i in alive if not builders[i].done], dtype=np.int64)
        if alive.size:
            raise RuntimeError("sampling exceeded the length budget")
        return SampledBatch(tokens, parents, siblings, masks, lengths)

    # ------------------------------------------------------------------ objective
    def objective(self, batch: SampledBatch, weights, entropy_coef: float = 0.0,
                  grad: bool = True):
        """Weighted log-likelihood plus entropy bonus, with its gradient.

        ``J = sum_i w_i log p(seq_i) + entropy_coef / N * sum_i sum_t H_it``.

        Returns ``(J, grads, logp)`` where ``logp`` is per sequence and
        ``grads`` is None when ``grad`` is False.
        """
        p = self.params
        w = np.asarray(weights, dtype=float)
        N = len(batch)
        T = int(batch.lengths.max()) if N else 0
        V = self.n_tokens
        hs = np.zeros((T + 1, N, self.hidden))
        probs = np.zeros((T, N, V))
        logp = np.zeros(N)
        ent = np.zeros((T, N))
        active = np.arange(T)[:, None] < batch.lengths[None, :]
        rows = np.arange(N)
        for t in range(T):
            hs[t + 1], logits = self._step(hs[t], batch.parents[:, t], batch.siblings[:, t])
            m = batch.masks[:, t]
            m = np.where(active[t][:, None], m, True)
            pr = _masked_softmax(logits, m)
            probs[t] = pr
            with np.errstate(divide="ignore"):
                lp = np.where(pr > 0, np.log(np.where(pr > 0, pr, 1.0)), 0.0)
            logp += np.where(active[t], lp[rows, batch.tokens[:, t]], 0.0)
            ent[t] = np.where(active[t], -(pr * lp).sum(axis=1), 0.0)
        J = float(w @ logp + entropy_coef / max(N, 1) * ent.sum())
        if not grad:
            return J, None, logp
        g = {k: np.zeros_like(v) for k, v in p.items()}
        dh_next = np.zeros((N, self.hidden))
        beta = entropy_coef / max(N, 1)
        for t in reversed(range(T)):
            pr = probs[t]
            onehot = np.zeros_like(pr)
            onehot[rows, batch.tokens[:, t]] = 1.0
            with np.errstate(divide="ignore"):
                lp = np.where(pr > 0, np.log(np.where(pr > 0, pr, 1.0)), 0.0)
            dz = w[:, None] * (onehot - pr) - beta * pr * (lp + ent[t][:, None])
            dz *= active[t][:, None]
            g["W_o"] += dz.T @ hs[t + 1]
            g["b_o"] += dz.sum(axis=0)
            dh = dz @ p["W_o"] + dh_next
            da = dh * (1.0 - hs[t + 1] ** 2) * active[t][:, None]
            np.add.at(g["W_x"].T, batch.parents[:, t], da)
            np.add.at(g["W_x"].T, V + 1 + batch.siblings[:, t], da)
            g["W_h"] += da.T @ hs[t]
            g["b"] += da.sum(axis=0)
            dh_next = da @ p["W_h"]
        return J, g, logp

    def log_prob(self, batch: SampledBatch) -> np.ndarray:
        return self.objective(batch, np.zeros(len(batch)), grad=False)[2]

    def ascend(self, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        """One Adam step in the direction that increases the objective."""
        self._adam_t += 1
        t = self._adam_t
        for k, gk in grads.items():
            m = self._adam_m[k] = beta1 * self._adam_m[k] + (1 - beta1) * gk
            v = self._adam_v[k] = beta2 * self._adam_v[k] + (1 - beta2) * gk * gk
            self.params[k] += lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)


def sample_expression(policy: PolicyNet, tokenset: TokenSet, rng: np.random.Generator,
                      constraints: Constraints = Constraints()) -> Expression:
    """Draw a single expression; constants start at 1."""
    return Expression(policy.sample(1, tokenset, constraints, rng).sequence(0), tokenset)


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
