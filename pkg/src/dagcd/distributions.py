"""Probability-distribution primitives and rank/uncertainty statistics.

Everything here is a pure function over immutable inputs. Ties are always
broken by ascending token id so results are deterministic across platforms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, UndefinedCorrelation

SUM_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TokenDistribution:
    """A probability vector over a vocabulary (sums to 1 within 1e-9)."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(np.asarray(self.probs)))
        p = self.probs
        if p.ndim != 1 or p.size == 0:
            raise InvalidInput("probs must be a non-empty 1-d vector")
        if not np.all(np.isfinite(p)):
            raise InvalidInput("probs must be finite")
        if p.min() < 0.0 or p.max() > 1.0:
            raise InvalidInput("probs must lie in [0, 1]")
        if abs(float(p.sum()) - 1.0) > SUM_TOL:
            raise InvalidInput(f"probs must sum to 1 within {SUM_TOL}, got {p.sum()!r}")

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class LogitVector:
    """Pre-softmax model output; all entries finite."""

    logits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logits", _frozen(np.asarray(self.logits)))
        z = self.logits
        if z.ndim != 1 or z.size == 0:
            raise InvalidInput("logits must be a non-empty 1-d vector")
        if not np.all(np.isfinite(z)):
            raise InvalidInput("logits must be finite (no NaN/Inf)")


def softmax(logits: LogitVector | np.ndarray) -> TokenDistribution:
    """Numerically stable softmax (max-subtraction)."""
    z = logits.logits if isinstance(logits, LogitVector) else LogitVector(logits).logits
    e = np.exp(z - z.max())
    return TokenDistribution(e / e.sum())


def normalized_entropy(dist: TokenDistribution) -> float:
    """Shannon entropy divided by log(vocab_size); in [0, 1].

    Uses the 0*log(0) = 0 convention. Requires vocab_size >= 2 (log N = 0
    singularity otherwise).
    """
    n = dist.vocab_size
    if n < 2:
        raise InvalidInput("normalized entropy needs vocab_size >= 2")
    p = dist.probs
    nz = p[p > 0.0]
    h = -float(np.dot(nz, np.log(nz)))
    return min(1.0, max(0.0, h / math.log(n)))


def max_softmax_probability(dist: TokenDistribution) -> float:
    return float(dist.probs.max())


def _check_token(dist: TokenDistribution, token_id: int) -> None:
    if not 0 <= token_id < dist.vocab_size:
        raise InvalidInput(f"token id {token_id} out of range for vocab {dist.vocab_size}")


def rank_of_token(dist: TokenDistribution, token_id: int) -> int:
    """1-based rank of ``token_id`` under descending probability, ties by id."""
    _check_token(dist, token_id)
    p = dist.probs
    pt = p[token_id]
    higher = int(np.sum(p > pt))
    tied_before = int(np.sum(p[:token_id] == pt))
    return higher + tied_before + 1


def probability_gap(dist: TokenDistribution, token_id: int) -> float:
    """max(probs) - probs[token_id]; zero iff the token attains the max."""
    _check_token(dist, token_id)
    return float(dist.probs.max() - dist.probs[token_id])


def top_r_token_set(dist: TokenDistribution, r: int) -> list[int]:
    """The r highest-probability token ids, in rank order (ties by id)."""
    n = dist.vocab_size
    if not 1 <= r <= n:
        raise InvalidInput(f"R must be in [1, {n}], got {r}")
    order = np.lexsort((np.arange(n), -dist.probs))
    return [int(i) for i in order[:r]]


def average_ranks(xs: np.ndarray) -> np.ndarray:
    """1-based ranks with the average method for ties."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Spearman rank correlation: Pearson of average-rank vectors."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise InvalidInput("spearman needs two equal-length vectors")
    if x.size < 3:
        raise InvalidInput("spearman needs length >= 3")
    rx = average_ranks(x)
    ry = average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelation("zero rank variance")
    return float(np.dot(dx, dy)) / math.sqrt(vx * vy)
