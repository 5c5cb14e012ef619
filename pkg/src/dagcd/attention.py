"""Attention-ratio featurization over context-restricted attention rows.

A snapshot holds one post-softmax attention row per (layer, head): the row
from the current decode position back to every prior position. Featurization
normalizes each row's context weights by the head's total context mass, which
removes head-scale and attention-sink effects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import EmptyContext, InvalidInput

ROW_SUM_TOL = 1e-6
DEGENERATE_MASS = 1e-12

ROLE_TEMPLATE = "template"
ROLE_CONTEXT = "context"
ROLE_QUESTION = "question"
ROLE_GENERATED = "generated"
_ROLES = {ROLE_TEMPLATE, ROLE_CONTEXT, ROLE_QUESTION, ROLE_GENERATED}


class HeadId(NamedTuple):
    layer: int
    head: int


@dataclass(frozen=True)
class AttentionSnapshot:
    """Per-head attention rows from the current position to all prior ones."""

    rows: Mapping[HeadId, np.ndarray]
    seq_len: int

    def __post_init__(self):
        rows = {}
        for hid, row in self.rows.items():
            row = np.ascontiguousarray(row, dtype=np.float64)
            if row.ndim != 1 or row.size != self.seq_len:
                raise InvalidInput(f"row for {hid} must have length {self.seq_len}")
            if row.min() < 0.0:
                raise InvalidInput(f"row for {hid} has negative weights")
            if abs(float(row.sum()) - 1.0) > ROW_SUM_TOL:
                raise InvalidInput(f"row for {hid} does not sum to 1 (got {row.sum()!r})")
            row.flags.writeable = False
            rows[HeadId(*hid)] = row
        object.__setattr__(self, "rows", rows)

    @property
    def head_ids(self) -> list[HeadId]:
        """All heads in layer-major order."""
        return sorted(self.rows)


@dataclass(frozen=True)
class ContextSpan:
    """Sorted sequence positions of the retrieved context and their token ids."""

    indices: tuple[int, ...]
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.indices:
            raise EmptyContext("context span is empty")
        if len(self.indices) != len(self.token_ids):
            raise InvalidInput("indices and token_ids must align")
        if list(self.indices) != sorted(set(self.indices)):
            raise InvalidInput("indices must be sorted and unique")

    def token_at(self, position: int) -> int:
        return self.token_ids[self.indices.index(position)]


@dataclass(frozen=True)
class FeatureVector:
    """Attention ratios in a fixed head order; every value in [0, 1]."""

    values: tuple[float, ...]
    head_order: tuple[HeadId, ...]

    def __post_init__(self):
        if len(self.values) != len(self.head_order):
            raise InvalidInput("values and head_order must align")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise InvalidInput("feature values must lie in [0, 1]")


@dataclass(frozen=True)
class PromptLayout:
    """Prompt token ids with a role label per position."""

    token_ids: tuple[int, ...]
    roles: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        object.__setattr__(self, "roles", tuple(self.roles))
        if len(self.token_ids) != len(self.roles):
            raise InvalidInput("token_ids and roles must align")
        bad = set(self.roles) - _ROLES
        if bad:
            raise InvalidInput(f"unknown roles: {sorted(bad)}")


def context_mask(layout: PromptLayout) -> ContextSpan:
    """Positions labeled as retrieved context."""
    idx = tuple(i for i, r in enumerate(layout.roles) if r == ROLE_CONTEXT)
    if not idx:
        raise EmptyContext("layout labels no position as context")
    return ContextSpan(idx, tuple(layout.token_ids[i] for i in idx))


def attention_ratio(
    snapshot: AttentionSnapshot, head: HeadId, span: ContextSpan, j: int
) -> float:
    """Context-normalized attention weight of position ``j`` for one head.

    Returns 0 when the head's total context mass is below 1e-12 (a head that
    attends nowhere in context carries no utilization signal).
    """
    head = HeadId(*head)
    if head not in snapshot.rows:
        raise InvalidInput(f"head {head} not present in snapshot")
    if j not in span.indices:
        raise InvalidInput(f"position {j} is not in the context span")
    row = snapshot.rows[head]
    idx = np.fromiter(span.indices, dtype=np.intp)
    denom = float(row[idx].sum())
    if denom < DEGENERATE_MASS:
        return 0.0
    return float(row[j]) / denom


def full_feature_vector(snapshot: AttentionSnapshot, span: ContextSpan, j: int) -> FeatureVector:
    """One attention ratio per head, layer-major head order."""
    heads = tuple(snapshot.head_ids)
    vals = tuple(attention_ratio(snapshot, h, span, j) for h in heads)
    return FeatureVector(vals, heads)


def topk_feature_vector(
    snapshot: AttentionSnapshot, span: ContextSpan, j: int, heads: Sequence[HeadId]
) -> FeatureVector:
    """Attention ratios restricted to ``heads``, in the given order."""
    heads = tuple(HeadId(*h) for h in heads)
    if not heads:
        raise InvalidInput("heads must be non-empty")
    if len(set(heads)) != len(heads):
        raise InvalidInput("duplicate heads in selection")
    vals = tuple(attention_ratio(snapshot, h, span, j) for h in heads)
    return FeatureVector(vals, heads)


def project_features(fv: FeatureVector, heads: Sequence[HeadId]) -> FeatureVector:
    """Reorder/select entries of an existing feature vector."""
    heads = tuple(HeadId(*h) for h in heads)
    pos = {h: i for i, h in enumerate(fv.head_order)}
    missing = [h for h in heads if h not in pos]
    if missing:
        raise InvalidInput(f"heads not present in feature vector: {missing}")
    return FeatureVector(tuple(fv.values[pos[h]] for h in heads), heads)
