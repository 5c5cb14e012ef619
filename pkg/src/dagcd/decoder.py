"""Single-pass attention-guided decoding loop.

Each step: one oracle call yields next-token logits and the current attention
rows. Context tokens the detector classifies as utilized get a utilization
score from coefficient-weighted attention ratios; scores are normalized into
a distribution over vocabulary ids, restricted to the model's own top-R
candidates, and added to the softmax distribution scaled by alpha times the
step's normalized entropy. The emitted token is the argmax of the adjusted
distribution, so the loop keeps exactly one forward pass per emitted token.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .attention import AttentionSnapshot, ContextSpan, PromptLayout, context_mask, topk_feature_vector
from .detector import UtilizationDetector, classify, head_weights
from .distributions import (
    LogitVector,
    TokenDistribution,
    normalized_entropy,
    max_softmax_probability,
    softmax,
    top_r_token_set,
)
from .errors import InvalidInput, ReplayDivergence, TraceExhausted


@dataclass(frozen=True)
class DecoderConfig:
    alpha: float = 2.0
    top_rank: int = 10
    max_new_tokens: int = 32
    stop_token_ids: frozenset[int] = frozenset()
    newline_stop: bool = False
    newline_token_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stop_token_ids", frozenset(self.stop_token_ids))
        if self.alpha < 0:
            raise InvalidInput("alpha must be non-negative")
        if self.top_rank < 1:
            raise InvalidInput("top_rank must be >= 1")
        if self.max_new_tokens < 1:
            raise InvalidInput("max_new_tokens must be >= 1")


class StepOracle(Protocol):
    """One autoregressive forward pass: prefix -> (logits, attention rows)."""

    num_layers: int
    num_heads: int
    calls: int

    def step(self, prefix: Sequence[int]) -> tuple[LogitVector, AttentionSnapshot]:
        ...


@dataclass(frozen=True)
class UtilizationDistribution:
    """Sparse non-negative masses over vocabulary ids.

    Freshly normalized instances sum to 1; top-rank restriction yields a
    sub-distribution whose entries keep their original masses.
    """

    masses: Mapping[int, float]

    def __post_init__(self):
        object.__setattr__(
            self, "masses", {int(i): float(m) for i, m in self.masses.items() if m > 0.0}
        )

    @property
    def is_empty(self) -> bool:
        return not self.masses

    def total(self) -> float:
        return sum(self.masses.values())


def utilization_scores(
    snapshot: AttentionSnapshot, span: ContextSpan, detector: UtilizationDetector
) -> dict[int, float]:
    """Per-context-position utilization score.

    Positions classified as non-utilized score 0; utilized positions score
    the head-weight-weighted sum of their attention ratios.
    """
    w = head_weights(detector)
    scores: dict[int, float] = {}
    for j in span.indices:
        fv = topk_feature_vector(snapshot, span, j, detector.head_order)
        if classify(detector, fv):
            scores[j] = float(np.dot(w, fv.values))
        else:
            scores[j] = 0.0
    return scores


def utilization_distribution(
    scores: Mapping[int, float], span: ContextSpan
) -> UtilizationDistribution:
    """Sum scores per vocabulary id, then normalize; all-zero -> empty."""
    per_id: dict[int, float] = {}
    for j, s in scores.items():
        if s <= 0.0:
            continue
        tok = span.token_at(j)
        per_id[tok] = per_id.get(tok, 0.0) + s
    total = sum(per_id.values())
    if total <= 0.0:
        return UtilizationDistribution({})
    return UtilizationDistribution({i: s / total for i, s in per_id.items()})


def top_rank_restrict(
    u: UtilizationDistribution, dist: TokenDistribution, r: int
) -> UtilizationDistribution:
    """Drop entries outside the model's top-R candidates; no renormalization."""
    if u.is_empty:
        return u
    keep = set(top_r_token_set(dist, min(r, dist.vocab_size)))
    return UtilizationDistribution({i: m for i, m in u.masses.items() if i in keep})


def adjust_distribution(
    p: TokenDistribution, u_top: UtilizationDistribution, alpha: float
) -> TokenDistribution:
    """Add alpha * H_norm(P) * U_top to P and renormalize.

    Renormalization is a positive scaling, so the argmax matches the raw
    super-normalized vector. Empty utilization leaves P unchanged.
    """
    if u_top.is_empty:
        return p
    scale = alpha * normalized_entropy(p)
    raw = np.array(p.probs)
    for i, m in u_top.masses.items():
        raw[i] += scale * m
    return TokenDistribution(raw / raw.sum())


@dataclass(frozen=True)
class StepDiagnostics:
    step_index: int
    entropy: float
    msp: float
    utilized_positions: tuple[int, ...]
    utilization: dict[int, float]  # post top-rank restriction
    adjustment_fired: bool
    pre_argmax: int
    post_argmax: int
    pre_top1_stop: bool
    post_top1_stop: bool


@dataclass(frozen=True)
class GenerationResult:
    token_ids: tuple[int, ...]
    per_step: tuple[StepDiagnostics, ...]
    oracle_calls: int
    outcome: str  # stop | max_tokens | divergence | trace_exhausted
    divergence_step: int | None = None


def _is_stop(token: int, config: DecoderConfig) -> bool:
    if token in config.stop_token_ids:
        return True
    return config.newline_stop and config.newline_token_id == token


def decode(
    oracle: StepOracle,
    layout: PromptLayout,
    detector: UtilizationDetector | None,
    config: DecoderConfig = DecoderConfig(),
) -> GenerationResult:
    """Run the guided generation loop (greedy when ``detector`` is None).

    Exactly one oracle call per emitted token. When the pre-adjustment top-1
    token hits a stop condition, the step's probabilities are left unchanged.
    """
    span = context_mask(layout)
    if detector is not None:
        if detector.geometry != (oracle.num_layers, oracle.num_heads):
            raise InvalidInput(
                f"detector geometry {detector.geometry} does not match oracle "
                f"({oracle.num_layers}, {oracle.num_heads})"
            )
        head_weights(detector)  # fail fast on NoPositiveEvidence
    prefix = list(layout.token_ids)
    emitted: list[int] = []
    steps: list[StepDiagnostics] = []
    outcome = "max_tokens"
    divergence_step = None
    calls = 0
    while len(emitted) < config.max_new_tokens:
        try:
            logits, snapshot = oracle.step(tuple(prefix))
        except TraceExhausted:
            outcome = "trace_exhausted"
            break
        except ReplayDivergence as exc:
            outcome = "divergence"
            divergence_step = exc.step
            break
        calls += 1
        p = softmax(logits)
        pre_argmax = int(np.argmax(p.probs))
        pre_stop = _is_stop(pre_argmax, config)
        fired = False
        utilized: tuple[int, ...] = ()
        u_masses: dict[int, float] = {}
        if pre_stop or detector is None or config.alpha == 0.0:
            adjusted = p
        else:
            scores = utilization_scores(snapshot, span, detector)
            utilized = tuple(j for j, s in scores.items() if s > 0.0)
            u = utilization_distribution(scores, span)
            u_top = top_rank_restrict(u, p, config.top_rank)
            u_masses = dict(u_top.masses)
            adjusted = adjust_distribution(p, u_top, config.alpha)
            fired = not u_top.is_empty
        token = int(np.argmax(adjusted.probs))
        post_stop = _is_stop(token, config)
        steps.append(
            StepDiagnostics(
                step_index=len(emitted),
                entropy=normalized_entropy(p),
                msp=max_softmax_probability(p),
                utilized_positions=utilized,
                utilization=u_masses,
                adjustment_fired=fired,
                pre_argmax=pre_argmax,
                post_argmax=token,
                pre_top1_stop=pre_stop,
                post_top1_stop=post_stop,
            )
        )
        emitted.append(token)
        prefix.append(token)
        if pre_stop or post_stop:
            outcome = "stop"
            break
    return GenerationResult(
        token_ids=tuple(emitted),
        per_step=tuple(steps),
        oracle_calls=calls,
        outcome=outcome,
        divergence_step=divergence_step,
    )
