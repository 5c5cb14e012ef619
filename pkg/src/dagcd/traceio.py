"""Trace container format, replay oracle, and QA answer metrics.

A trace file captures a greedy generation run of some model: per step the
top-M logits (or the full vector), the attention rows of a recorded head
list, and the token the run emitted. Replaying a trace stands in for the
model itself, so decoding interventions can be evaluated without in-process
model execution. The container is a length-prefixed binary file with a JSON
header, little-endian 64-bit floats, and a CRC-32C checksum over the step
payload.
"""
from __future__ import annotations

import json
import math
import re
import string
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import AttentionSnapshot, HeadId, PromptLayout, context_mask
from .distributions import LogitVector, softmax
from .errors import (
    CorruptTrace,
    EmptyDataset,
    InvalidInput,
    ReplayDivergence,
    TraceExhausted,
    UnsupportedVersion,
)

TRACE_MAGIC = b"DAGCDTRC"
TRACE_FORMAT_VERSION = 1
DEFAULT_TOP_M = 100

_CRC32C_TABLE = []
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ 0x82F63B78 if _c & 1 else _c >> 1
    _CRC32C_TABLE.append(_c)


def crc32c(data: bytes) -> int:
    """CRC-32C (Castagnoli), reflected, init/xorout 0xFFFFFFFF."""
    crc = 0xFFFFFFFF
    for b in data:
        crc = (crc >> 8) ^ _CRC32C_TABLE[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFF


@dataclass(frozen=True)
class StepTrace:
    """Recorded logits, attention rows, and the emitted token for one step.

    Either ``full_logits`` is set, or ``top_logits`` (id -> logit) plus
    ``remainder_log_mass`` = log sum-exp of all unrecorded logits.
    """

    step_index: int
    recorded_token_id: int
    rows: dict  # HeadId -> np.ndarray
    full_logits: np.ndarray | None = None
    top_logits: tuple = ()  # ((id, logit), ...)
    remainder_log_mass: float = -math.inf

    def __post_init__(self):
        if self.full_logits is None:
            ids = [i for i, _ in self.top_logits]
            if len(set(ids)) != len(ids):
                raise InvalidInput("top-M payload ids must be unique")
            if not ids:
                raise InvalidInput("step needs either full or top-M logits")

    def reconstruct_logits(self, vocab_size: int) -> LogitVector:
        """Full logit vector; unrecorded ids share the remainder mass uniformly."""
        if self.full_logits is not None:
            return LogitVector(self.full_logits)
        n_rest = vocab_size - len(self.top_logits)
        fill = self.remainder_log_mass - math.log(n_rest) if n_rest else -1e30
        if not math.isfinite(fill):
            fill = -1e30
        z = np.full(vocab_size, fill)
        for i, logit in self.top_logits:
            z[i] = logit
        return LogitVector(z)


@dataclass(frozen=True)
class TraceFile:
    model_name: str
    vocab_size: int
    num_layers: int
    num_heads: int
    heads: tuple  # recorded HeadId list
    layout: PromptLayout
    steps: tuple  # StepTrace...
    top_m: int | None = None
    display: dict = field(default_factory=dict)  # token id -> display string
    approx_error_bound: float | None = None
    format_version: int = TRACE_FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(HeadId(*h) for h in self.heads))
        object.__setattr__(self, "steps", tuple(self.steps))
        context_mask(self.layout)  # must yield a non-empty context span


def _pack_step(st: StepTrace) -> bytes:
    out = [struct.pack("<IIB", st.step_index, st.recorded_token_id, 0 if st.full_logits is not None else 1)]
    if st.full_logits is not None:
        z = np.ascontiguousarray(st.full_logits, dtype="<f8")
        out.append(struct.pack("<I", z.size))
        out.append(z.tobytes())
    else:
        out.append(struct.pack("<I", len(st.top_logits)))
        for i, logit in st.top_logits:
            out.append(struct.pack("<Id", i, logit))
        out.append(struct.pack("<d", st.remainder_log_mass))
    out.append(struct.pack("<I", len(st.rows)))
    for hid in sorted(st.rows):
        row = np.ascontiguousarray(st.rows[hid], dtype="<f8")
        out.append(struct.pack("<HHI", hid[0], hid[1], row.size))
        out.append(row.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.data):
            raise CorruptTrace("truncated step payload")
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += size
        return vals

    def take_f64(self, n: int) -> np.ndarray:
        size = 8 * n
        if self.off + size > len(self.data):
            raise CorruptTrace("truncated step payload")
        arr = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.off).copy()
        self.off += size
        return arr


def _unpack_step(r: _Reader) -> StepTrace:
    idx, tok, kind = r.take("<IIB")
    if kind == 0:
        (n,) = r.take("<I")
        full = r.take_f64(n)
        top, rem = (), -math.inf
    elif kind == 1:
        (m,) = r.take("<I")
        top = tuple((r.take("<Id")) for _ in range(m))
        full = None
        (rem,) = r.take("<d")
    else:
        raise CorruptTrace(f"unknown logits payload kind {kind}")
    (n_rows,) = r.take("<I")
    rows = {}
    for _ in range(n_rows):
        layer, head, seq = r.take("<HHI")
        rows[HeadId(layer, head)] = r.take_f64(seq)
    return StepTrace(idx, tok, rows, full_logits=full, top_logits=top, remainder_log_mass=rem)


def write_trace(trace: TraceFile, path: str | Path) -> None:
    header = {
        "format_version": trace.format_version,
        "model_name": trace.model_name,
        "vocab_size": trace.vocab_size,
        "num_layers": trace.num_layers,
        "num_heads": trace.num_heads,
        "heads": [[h.layer, h.head] for h in trace.heads],
        "prompt_token_ids": list(trace.layout.token_ids),
        "prompt_roles": list(trace.layout.roles),
        "top_m": trace.top_m,
        "display": {str(k): v for k, v in trace.display.items()},
        "approx_error_bound": trace.approx_error_bound,
        "n_steps": len(trace.steps),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(_pack_step(s) for s in trace.steps)
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        f.write(struct.pack("<I", crc32c(payload)))


def read_trace(path: str | Path) -> TraceFile:
    data = Path(path).read_bytes()
    if data[: len(TRACE_MAGIC)] != TRACE_MAGIC:
        raise CorruptTrace("bad magic")
    off = len(TRACE_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off : off + hlen].decode())
        off += hlen
        (plen,) = struct.unpack_from("<I", data, off)
        off += 4
        payload = data[off : off + plen]
        if len(payload) != plen:
            raise CorruptTrace("truncated payload")
        off += plen
        (stored_crc,) = struct.unpack_from("<I", data, off)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptTrace(f"malformed container: {exc}") from exc
    if header.get("format_version") != TRACE_FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {header.get('format_version')!r}")
    if crc32c(payload) != stored_crc:
        raise CorruptTrace("checksum mismatch")
    r = _Reader(payload)
    steps = tuple(_unpack_step(r) for _ in range(header["n_steps"]))
    if r.off != len(payload):
        raise CorruptTrace("trailing bytes in payload")
    try:
        return TraceFile(
            model_name=header["model_name"],
            vocab_size=header["vocab_size"],
            num_layers=header["num_layers"],
            num_heads=header["num_heads"],
            heads=tuple(HeadId(*h) for h in header["heads"]),
            layout=PromptLayout(tuple(header["prompt_token_ids"]), tuple(header["prompt_roles"])),
            steps=steps,
            top_m=header.get("top_m"),
            display={int(k): v for k, v in (header.get("display") or {}).items()},
            approx_error_bound=header.get("approx_error_bound"),
        )
    except InvalidInput as exc:
        raise CorruptTrace(f"invalid trace contents: {exc}") from exc


class ReplayOracle:
    """Serves recorded steps while the decoded prefix matches the recording.

    The first mismatching emitted token raises :class:`ReplayDivergence`
    (attention after a divergent token would be counterfactual); requests
    past the recorded range raise :class:`TraceExhausted`.
    """

    def __init__(self, trace: TraceFile):
        self.trace = trace
        self.num_layers = trace.num_layers
        self.num_heads = trace.num_heads
        self.calls = 0
        self._prompt = tuple(trace.layout.token_ids)

    def step(self, prefix: Sequence[int]):
        prefix = tuple(prefix)
        n_prompt = len(self._prompt)
        if prefix[:n_prompt] != self._prompt:
            raise InvalidInput("prefix does not start with the recorded prompt")
        t = len(prefix) - n_prompt
        for i in range(t):
            if prefix[n_prompt + i] != self.trace.steps[i].recorded_token_id:
                raise ReplayDivergence(step=i + 1)
        if t >= len(self.trace.steps):
            raise TraceExhausted(f"trace has only {len(self.trace.steps)} steps")
        self.calls += 1
        st = self.trace.steps[t]
        logits = st.reconstruct_logits(self.trace.vocab_size)
        snap = AttentionSnapshot(st.rows, seq_len=len(prefix))
        return logits, snap


def replay_oracle(trace: TraceFile) -> ReplayOracle:
    return ReplayOracle(trace)


def record_trace(
    oracle,
    layout: PromptLayout,
    vocab_size: int,
    max_steps: int,
    heads: Sequence[HeadId] | None = None,
    top_m: int | None = DEFAULT_TOP_M,
    stop_token_ids: frozenset[int] = frozenset(),
    model_name: str = "toy",
) -> TraceFile:
    """Record a greedy run through ``oracle`` into a trace."""
    prefix = list(layout.token_ids)
    steps = []
    for t in range(max_steps):
        logits, snap = oracle.step(tuple(prefix))
        z = np.asarray(logits.logits)
        token = int(np.argmax(softmax(logits).probs))
        keep = heads if heads is not None else snap.head_ids
        rows = {HeadId(*h): snap.rows[HeadId(*h)] for h in keep}
        if top_m is not None and top_m < vocab_size:
            order = np.argsort(-z, kind="stable")[:top_m]
            rest = np.delete(z, order)
            mx = float(rest.max())
            rem = mx + math.log(float(np.exp(rest - mx).sum()))
            steps.append(
                StepTrace(
                    t,
                    token,
                    rows,
                    top_logits=tuple((int(i), float(z[i])) for i in order),
                    remainder_log_mass=rem,
                )
            )
        else:
            steps.append(StepTrace(t, token, rows, full_logits=z))
        prefix.append(token)
        if token in stop_token_ids:
            break
    geometry_heads = heads if heads is not None else tuple(steps[0].rows)
    return TraceFile(
        model_name=model_name,
        vocab_size=vocab_size,
        num_layers=oracle.num_layers,
        num_heads=oracle.num_heads,
        heads=tuple(geometry_heads),
        layout=layout,
        steps=tuple(steps),
        top_m=top_m,
    )


def replay_greedy(trace: TraceFile) -> list[int]:
    """Greedy replay over a trace; must reproduce the recorded tokens."""
    oracle = ReplayOracle(trace)
    prefix = list(trace.layout.token_ids)
    out = []
    for _ in range(len(trace.steps)):
        logits, _ = oracle.step(tuple(prefix))
        token = int(np.argmax(softmax(logits).probs))
        out.append(token)
        prefix.append(token)
    return out


# --- QA answer metrics (SQuAD-convention normalization) ---------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = "".join(c for c in text if c not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def em(prediction: str, golds: Sequence[str]) -> int:
    if not golds:
        raise InvalidInput("golds must be non-empty")
    norm = normalize_answer(prediction)
    return int(any(norm == normalize_answer(g) for g in golds))


def _token_f1(pred: str, gold: str) -> float:
    pt = normalize_answer(pred).split()
    gt = normalize_answer(gold).split()
    if not pt and not gt:
        return 1.0
    if not pt or not gt:
        return 0.0
    common = sum((Counter(pt) & Counter(gt)).values())
    if common == 0:
        return 0.0
    precision = common / len(pt)
    recall = common / len(gt)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, golds: Sequence[str]) -> float:
    if not golds:
        raise InvalidInput("golds must be non-empty")
    return max(_token_f1(prediction, g) for g in golds)


@dataclass(frozen=True)
class QAExample:
    id: str
    context: str
    question: str
    answers: tuple

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise InvalidInput("answers must be non-empty")


@dataclass(frozen=True)
class EvalRecord:
    example_id: str
    prediction: str
    em: int
    f1: float
    diagnostics_ref: str = ""


def read_qa_dataset(path: str | Path) -> tuple[list[QAExample], list[tuple[int, str]]]:
    """Parse a line-delimited JSON dataset; returns (examples, rejected lines)."""
    examples: list[QAExample] = []
    rejected: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                examples.append(
                    QAExample(
                        id=str(doc["id"]),
                        context=doc["context"],
                        question=doc["question"],
                        answers=tuple(doc["answers"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, InvalidInput) as exc:
                rejected.append((lineno, str(exc)))
    if not examples:
        raise EmptyDataset(f"no valid examples in {path}")
    return examples, rejected
