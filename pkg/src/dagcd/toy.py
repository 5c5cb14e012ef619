"""Deterministic miniature causal transformer plus synthetic scenario generators.

The toy model is a standard pre-norm transformer with seeded random weights
(no training); it exists to provide a bit-deterministic in-process step oracle
with valid attention rows. Scenario generators construct planted decode steps
and synthetic attention-ratio datasets with known margins, so the guided
decoder and the detector can be verified against analytic ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import (
    ROLE_CONTEXT,
    ROLE_QUESTION,
    ROLE_TEMPLATE,
    AttentionSnapshot,
    ContextSpan,
    FeatureVector,
    HeadId,
    PromptLayout,
    context_mask,
    topk_feature_vector,
)
from .decoder import (
    DecoderConfig,
    UtilizationDistribution,
    adjust_distribution,
    top_rank_restrict,
    utilization_distribution,
    utilization_scores,
)
from .detector import LabeledExample, UtilizationDetector, classify, head_weights
from .distributions import (
    LogitVector,
    TokenDistribution,
    normalized_entropy,
    rank_of_token,
    softmax,
)
from .errors import InfeasibleScenario, InvalidInput

MAX_VOCAB = 256
MAX_LAYERS = 4
MAX_HEADS = 4
MAX_HIDDEN = 64


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + 1e-5) + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


@dataclass(frozen=True)
class ToyTransformer:
    vocab_size: int
    num_layers: int
    num_heads: int
    hidden_dim: int
    max_seq_len: int
    seed: int
    params: dict = field(repr=False, default_factory=dict)


def new_seeded(
    vocab_size: int = 64,
    num_layers: int = 2,
    num_heads: int = 2,
    hidden_dim: int = 32,
    max_seq_len: int = 128,
    seed: int = 0,
) -> ToyTransformer:
    """Build a toy model with weights drawn from a seeded Gaussian scheme."""
    if not 1 <= vocab_size <= MAX_VOCAB:
        raise InvalidInput(f"vocab_size must be in [1, {MAX_VOCAB}]")
    if not 1 <= num_layers <= MAX_LAYERS:
        raise InvalidInput(f"num_layers must be in [1, {MAX_LAYERS}]")
    if not 1 <= num_heads <= MAX_HEADS:
        raise InvalidInput(f"num_heads must be in [1, {MAX_HEADS}]")
    if not 1 <= hidden_dim <= MAX_HIDDEN or hidden_dim % num_heads:
        raise InvalidInput(f"hidden_dim must be in [1, {MAX_HIDDEN}] and divisible by num_heads")
    rng = np.random.default_rng(seed)
    d = hidden_dim
    scale = 1.0 / math.sqrt(d)

    def w(*shape):
        return rng.normal(0.0, scale, size=shape)

    params = {"emb": w(vocab_size, d), "pos": w(max_seq_len, d)}
    for l in range(num_layers):
        params[f"l{l}"] = {
            "ln1_g": 1.0 + 0.1 * rng.normal(size=d),
            "ln1_b": 0.1 * rng.normal(size=d),
            "wq": w(d, d),
            "wk": w(d, d),
            "wv": w(d, d),
            "wo": w(d, d),
            "ln2_g": 1.0 + 0.1 * rng.normal(size=d),
            "ln2_b": 0.1 * rng.normal(size=d),
            "w1": w(d, 4 * d),
            "b1": 0.1 * rng.normal(size=4 * d),
            "w2": w(4 * d, d),
            "b2": 0.1 * rng.normal(size=d),
        }
    params["lnf_g"] = 1.0 + 0.1 * rng.normal(size=d)
    params["lnf_b"] = 0.1 * rng.normal(size=d)
    params["unemb"] = w(d, vocab_size)
    return ToyTransformer(vocab_size, num_layers, num_heads, d, max_seq_len, seed, params)


def step(model: ToyTransformer, prefix: Sequence[int]) -> tuple[LogitVector, AttentionSnapshot]:
    """Forward pass over ``prefix``; next-token logits plus last-row attention."""
    toks = np.asarray(prefix, dtype=np.intp)
    n = toks.size
    if n == 0 or n > model.max_seq_len:
        raise InvalidInput(f"prefix length must be in [1, {model.max_seq_len}]")
    if toks.min() < 0 or toks.max() >= model.vocab_size:
        raise InvalidInput("prefix contains out-of-vocabulary ids")
    p = model.params
    d, nh = model.hidden_dim, model.num_heads
    dh = d // nh
    h = p["emb"][toks] + p["pos"][:n]
    rows: dict[HeadId, np.ndarray] = {}
    mask = np.triu(np.full((n, n), -1e30), k=1)
    for l in range(model.num_layers):
        lp = p[f"l{l}"]
        x = _layer_norm(h, lp["ln1_g"], lp["ln1_b"])
        q = (x @ lp["wq"]).reshape(n, nh, dh).transpose(1, 0, 2)
        k = (x @ lp["wk"]).reshape(n, nh, dh).transpose(1, 0, 2)
        v = (x @ lp["wv"]).reshape(n, nh, dh).transpose(1, 0, 2)
        att = q @ k.transpose(0, 2, 1) / math.sqrt(dh) + mask
        att -= att.max(axis=-1, keepdims=True)
        att = np.exp(att)
        att /= att.sum(axis=-1, keepdims=True)
        for head in range(nh):
            rows[HeadId(l, head)] = att[head, -1]
        out = (att @ v).transpose(1, 0, 2).reshape(n, d)
        h = h + out @ lp["wo"]
        x = _layer_norm(h, lp["ln2_g"], lp["ln2_b"])
        h = h + _gelu(x @ lp["w1"] + lp["b1"]) @ lp["w2"] + lp["b2"]
    hf = _layer_norm(h[-1], p["lnf_g"], p["lnf_b"])
    logits = hf @ p["unemb"]
    return LogitVector(logits), AttentionSnapshot(rows, seq_len=n)


class ToyOracle:
    """StepOracle over a toy transformer, with an invocation counter."""

    def __init__(self, model: ToyTransformer):
        self.model = model
        self.num_layers = model.num_layers
        self.num_heads = model.num_heads
        self.calls = 0

    def step(self, prefix):
        self.calls += 1
        return step(self.model, prefix)


@dataclass(frozen=True)
class PlantedScenario:
    """A decode instance where greedy provably fails and adjustment recovers.

    ``flip_margin`` is the slack in alpha * H_norm(P) * u_gold >
    P(distractor) - P(gold) + margin; for out-of-rank plants the gold token
    sits at rank ``gold_rank`` > R instead and no flip may occur.
    """

    layout: PromptLayout
    gold_token_id: int
    distractor_token_id: int
    gold_position: int  # sequence position of the gold token in context
    stop_token_id: int
    gold_rank: int
    attention_margin: float
    logit_margin: float
    flip_margin: float
    answer_probs: np.ndarray = field(repr=False)
    answer_rows: dict = field(repr=False)


class PlantedOracle:
    """Serves the planted answer step, then steers straight to the stop token."""

    def __init__(self, scenario: PlantedScenario, num_layers: int, num_heads: int):
        self.scenario = scenario
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.calls = 0
        self._prompt_len = len(scenario.layout.token_ids)

    def step(self, prefix):
        self.calls += 1
        sc = self.scenario
        n = len(prefix)
        if n == self._prompt_len:
            logits = np.log(sc.answer_probs)
            rows = {h: r for h, r in sc.answer_rows.items()}
            return LogitVector(logits), AttentionSnapshot(rows, seq_len=n)
        probs = np.full(len(sc.answer_probs), 1e-6)
        probs[sc.stop_token_id] = 1.0
        probs /= probs.sum()
        uniform = np.full(n, 1.0 / n)
        rows = {
            HeadId(l, h): uniform
            for l in range(self.num_layers)
            for h in range(self.num_heads)
        }
        return LogitVector(np.log(probs)), AttentionSnapshot(rows, seq_len=n)


def plant_scenario(
    seed: int,
    detector: UtilizationDetector,
    alpha: float = 2.0,
    top_rank: int = 10,
    gold_rank: int = 2,
    vocab_size: int = 64,
    n_context: int = 6,
    margin: float = 0.02,
) -> tuple[PlantedScenario, PlantedOracle]:
    """Construct an answer step with analytic logit and attention margins.

    With ``gold_rank <= top_rank`` the returned scenario satisfies the flip
    inequality for the given alpha (checked numerically, else
    :class:`InfeasibleScenario`). With ``gold_rank > top_rank`` the gold token
    is planted outside the restriction window so adjustment cannot fire on it.
    """
    rng = np.random.default_rng(seed)
    num_layers, num_heads = detector.geometry
    if gold_rank < 2 or gold_rank > vocab_size - 2:
        raise InvalidInput("gold_rank must be in [2, vocab_size - 2]")
    stop_id, template_id, question_id = 0, 1, 2
    pool = rng.permutation(np.arange(3, vocab_size))
    context_ids = pool[:n_context]
    gold_id = int(context_ids[0])
    non_context = [int(t) for t in pool[n_context:]]
    distractor_id = non_context[0]
    fillers = non_context[1 : 1 + (gold_rank - 2)]

    token_ids = [template_id, template_id, *[int(t) for t in context_ids], question_id, question_id]
    roles = (
        [ROLE_TEMPLATE] * 2 + [ROLE_CONTEXT] * n_context + [ROLE_QUESTION] * 2
    )
    layout = PromptLayout(tuple(token_ids), tuple(roles))
    gold_position = 2  # first context slot
    seq_len = len(token_ids)

    # Answer-step probabilities: distractor first, fillers, gold at gold_rank.
    # Top block holds 0.9 of the mass in a strict arithmetic descent; the
    # remaining 0.1 spreads uniformly below the gold token.
    probs = np.zeros(vocab_size)
    top = [distractor_id, *fillers, gold_id]
    m = len(top)
    gap = 0.01
    p0 = 0.9 / m + gap * (m - 1) / 2.0
    for r, tok in enumerate(top):
        probs[tok] = p0 - r * gap
    rest = [i for i in range(vocab_size) if probs[i] == 0.0]
    probs[rest] = (1.0 - probs.sum()) / len(rest)
    if probs.min() <= 0:
        raise InfeasibleScenario("probability construction left non-positive mass")
    dist = TokenDistribution(probs)
    if int(np.argmax(probs)) != distractor_id or rank_of_token(dist, gold_id) != gold_rank:
        raise InfeasibleScenario("planted ranking does not hold")

    # Attention rows: heads with positive coefficients concentrate on gold.
    strong = {h for h, c in zip(detector.head_order, detector.coefficients) if c > 0}
    ctx_positions = list(range(2, 2 + n_context))
    rows: dict[HeadId, np.ndarray] = {}
    gold_ratio = 0.9
    for l in range(num_layers):
        for h in range(num_heads):
            hid = HeadId(l, h)
            row = np.zeros(seq_len)
            row[0] = 0.2  # attention sink on the first template token
            ctx_mass = 0.7
            if hid in strong:
                row[gold_position] = ctx_mass * gold_ratio
                for pos in ctx_positions[1:]:
                    row[pos] = ctx_mass * (1.0 - gold_ratio) / (n_context - 1)
            else:
                for pos in ctx_positions:
                    row[pos] = ctx_mass / n_context
            row[-1] = 1.0 - row.sum()  # remainder on the last question token
            rows[hid] = row
    snapshot = AttentionSnapshot(rows, seq_len=seq_len)
    span = context_mask(layout)

    # Validate against the actual detector.
    fv_gold = topk_feature_vector(snapshot, span, gold_position, detector.head_order)
    if not classify(detector, fv_gold):
        raise InfeasibleScenario("detector does not classify the gold token as utilized")
    scores = utilization_scores(snapshot, span, detector)
    others = [scores[j] for j in span.indices if j != gold_position]
    if any(s > 0 for s in others):
        raise InfeasibleScenario("detector classifies a non-gold context token as utilized")
    u = utilization_distribution(scores, span)
    u_top = top_rank_restrict(u, dist, top_rank)
    u_gold = u_top.masses.get(gold_id, 0.0)
    h_norm = normalized_entropy(dist)
    boost = alpha * h_norm * u_gold
    need = float(probs[distractor_id] - probs[gold_id])
    flip_margin = boost - need - margin
    if gold_rank <= top_rank:
        if u_gold != 1.0 or flip_margin <= 0:
            raise InfeasibleScenario(
                f"flip inequality fails: boost {boost:.4f} <= gap {need:.4f} + margin {margin}"
            )
        adjusted = adjust_distribution(dist, u_top, alpha)
        if int(np.argmax(adjusted.probs)) != gold_id:
            raise InfeasibleScenario("adjusted argmax is not the gold token")
    else:
        if not u_top.is_empty:
            raise InfeasibleScenario("out-of-rank plant still inside the restriction window")

    weak_ratio = (1.0 - gold_ratio) / (n_context - 1)
    scenario = PlantedScenario(
        layout=layout,
        gold_token_id=gold_id,
        distractor_token_id=distractor_id,
        gold_position=gold_position,
        stop_token_id=stop_id,
        gold_rank=gold_rank,
        attention_margin=gold_ratio - weak_ratio,
        logit_margin=need,
        flip_margin=flip_margin,
        answer_probs=probs,
        answer_rows=rows,
    )
    return scenario, PlantedOracle(scenario, num_layers, num_heads)


def synth_attention_dataset(
    n: int,
    family: str,
    seed: int,
    num_layers: int = 2,
    num_heads: int = 2,
    label_noise: float = 0.0,
) -> list[LabeledExample]:
    """Balanced synthetic attention-ratio examples with a planted separation.

    Family "A" is sink-heavy (negatives occasionally crushed toward zero by a
    dominant sink); family "B" is diffuse (everything jittered toward the
    uniform ratio). Positives concentrate high ratios on a designated first
    half of the heads in both families, so detectors transfer across families.
    """
    if n % 2:
        raise InvalidInput("n must be even (balanced construction)")
    if family not in ("A", "B"):
        raise InvalidInput("family must be 'A' or 'B'")
    rng = np.random.default_rng(seed)
    heads = tuple(HeadId(l, h) for l in range(num_layers) for h in range(num_heads))
    n_strong = max(1, len(heads) // 2)
    strong = set(heads[:n_strong])

    def sample(label: int) -> FeatureVector:
        vals = []
        for hid in heads:
            if label == 1 and hid in strong:
                lo, hi = (0.65, 0.95) if family == "A" else (0.55, 0.85)
            elif label == 1:
                lo, hi = (0.0, 0.15) if family == "A" else (0.05, 0.25)
            else:
                lo, hi = (0.02, 0.30) if family == "A" else (0.05, 0.35)
            v = rng.uniform(lo, hi)
            if family == "A" and label == 0 and rng.random() < 0.3:
                v *= rng.uniform(0.0, 0.2)  # sink swallowed most of the row
            vals.append(float(v))
        return FeatureVector(tuple(vals), heads)

    examples = []
    for i in range(n):
        label = 1 if i < n // 2 else 0
        fv = sample(label)
        if label_noise > 0.0 and rng.random() < label_noise:
            label = 1 - label
        examples.append(LabeledExample(fv, label, provenance=f"synth-{family}"))
    return examples
