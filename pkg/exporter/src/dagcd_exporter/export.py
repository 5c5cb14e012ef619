"""Greedy-generation trace export from transformer checkpoints.

Runs unmodified greedy decoding over a QA dataset with a chosen prompt
template, recording per-step top-M logits and the last attention row of the
configured heads, and writes one trace file per example in the dagcd binary
trace format. Guided decoding itself happens later, in the dagcd engine,
by replaying these traces.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from dagcd.attention import (
    ROLE_CONTEXT,
    ROLE_QUESTION,
    ROLE_TEMPLATE,
    AttentionSnapshot,
    HeadId,
    PromptLayout,
)
from dagcd.distributions import LogitVector
from dagcd.errors import InvalidInput
from dagcd.traceio import record_trace, write_trace

from .errors import ExportUnsupported
from .templates import DEFAULT_TEMPLATE_ID, get_template

_ROLE_BY_SEGMENT = {
    "template": ROLE_TEMPLATE,
    "context": ROLE_CONTEXT,
    "question": ROLE_QUESTION,
}


@dataclass(frozen=True)
class ExportJob:
    model: str
    dataset_path: str
    out_dir: str
    template_id: int = DEFAULT_TEMPLATE_ID
    heads: tuple | None = None  # None = all heads, else ((layer, head), ...)
    top_m: int = 100
    max_examples: int = 5
    max_new_tokens: int = 32
    downstream_top_rank: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.heads is not None:
            heads = tuple(HeadId(*h) for h in self.heads)
            if not heads:
                raise InvalidInput("explicit head list must be non-empty")
            object.__setattr__(self, "heads", heads)
        if self.top_m < self.downstream_top_rank:
            raise InvalidInput(
                f"top_m ({self.top_m}) must cover the downstream top-rank "
                f"restriction ({self.downstream_top_rank})"
            )
        if self.max_examples < 1 or self.max_new_tokens < 1:
            raise InvalidInput("max_examples and max_new_tokens must be >= 1")


@dataclass(frozen=True)
class ExportResult:
    trace_paths: tuple
    skipped: tuple  # ((example_id, reason), ...)
    manifest_path: Path


class HFStepOracle:
    """One-position step oracle over a loaded causal LM with eager attention."""

    def __init__(self, model, num_layers: int, num_heads: int):
        self._model = model
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.calls = 0

    @torch.no_grad()
    def step(self, prefix: Sequence[int]):
        self.calls += 1
        ids = torch.tensor([list(prefix)], dtype=torch.long)
        out = self._model(ids, output_attentions=True, use_cache=False)
        if not out.attentions or any(a is None for a in out.attentions):
            raise ExportUnsupported(
                "model does not expose attention weights; load with eager attention"
            )
        logits = out.logits[0, -1].double().numpy()
        rows = {}
        for layer, attn in enumerate(out.attentions):
            # attn: (batch, query_heads, seq, seq); the recording convention is
            # the last row, i.e. attention from the current position backwards.
            # For grouped/multi-query attention these are per-query-head rows.
            last = attn[0, :, -1, :].double().numpy()
            for head in range(last.shape[0]):
                rows[HeadId(layer, head)] = np.ascontiguousarray(last[head])
        return LogitVector(logits), AttentionSnapshot(rows, seq_len=len(prefix))


def build_layout(tokenizer, template_id: int, context: str, question: str) -> PromptLayout:
    """Tokenize each template segment independently and label positions.

    Boundary tokens therefore never straddle roles: every token belongs to
    exactly one segment, and slot-adjacent punctuation stays labeled template.
    """
    token_ids: list[int] = []
    roles: list[str] = []
    for role, piece in get_template(template_id).segments():
        if role == "context":
            text = context
        elif role == "question":
            text = question
        else:
            text = piece
        ids = tokenizer(text, add_special_tokens=False)["input_ids"]
        token_ids.extend(int(i) for i in ids)
        roles.extend([_ROLE_BY_SEGMENT[role]] * len(ids))
    return PromptLayout(tuple(token_ids), tuple(roles))


def _stop_token_ids(tokenizer) -> frozenset[int]:
    stops = set()
    if tokenizer.eos_token_id is not None:
        stops.add(int(tokenizer.eos_token_id))
    newline = tokenizer("\n", add_special_tokens=False)["input_ids"]
    if len(newline) == 1:
        stops.add(int(newline[0]))
    return frozenset(stops)


def _load(model_name: str):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(model_name)
    model = AutoModelForCausalLM.from_pretrained(model_name, attn_implementation="eager")
    model.eval()
    return model, tokenizer


def export_traces(job: ExportJob, model=None, tokenizer=None) -> ExportResult:
    """Export one trace file per dataset example plus a job manifest.

    ``model``/``tokenizer`` may be passed pre-loaded (e.g. for local test
    checkpoints); otherwise they are loaded from ``job.model``.
    """
    from dagcd.traceio import read_qa_dataset

    if model is None or tokenizer is None:
        model, tokenizer = _load(job.model)
    torch.manual_seed(job.seed)  # greedy decoding is seed-free; set for hygiene

    config = model.config
    num_layers = getattr(config, "num_hidden_layers", None) or config.n_layer
    num_heads = getattr(config, "num_attention_heads", None) or config.n_head
    max_positions = getattr(config, "max_position_embeddings", None) or getattr(
        config, "n_positions", None
    )
    oracle = HFStepOracle(model, num_layers, num_heads)
    stop_ids = _stop_token_ids(tokenizer)

    examples, rejected = read_qa_dataset(job.dataset_path)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    trace_paths: list[Path] = []
    skipped: list[tuple[str, str]] = [(f"line {ln}", reason) for ln, reason in rejected]
    for ex in examples[: job.max_examples]:
        layout = build_layout(tokenizer, job.template_id, ex.context, ex.question)
        if max_positions and len(layout.token_ids) + job.max_new_tokens > max_positions:
            skipped.append((ex.id, f"prompt + generation exceed {max_positions} positions"))
            continue
        try:
            trace = record_trace(
                oracle,
                layout,
                vocab_size=int(config.vocab_size),
                max_steps=job.max_new_tokens,
                heads=job.heads,
                top_m=job.top_m,
                stop_token_ids=stop_ids,
                model_name=job.model,
            )
        except (RuntimeError, InvalidInput) as exc:
            skipped.append((ex.id, str(exc)))
            continue
        path = out_dir / f"{ex.id}.trace"
        write_trace(trace, path)
        trace_paths.append(path)

    manifest = {
        "job": {
            "model": job.model,
            "dataset_path": job.dataset_path,
            "template_id": job.template_id,
            "heads": None if job.heads is None else [[h.layer, h.head] for h in job.heads],
            "top_m": job.top_m,
            "max_examples": job.max_examples,
            "max_new_tokens": job.max_new_tokens,
            "seed": job.seed,
        },
        "dataset_sha256": hashlib.sha256(Path(job.dataset_path).read_bytes()).hexdigest(),
        "attention_convention": (
            "per-query-head last-row attention; for grouped/multi-query "
            "attention, rows are indexed by query head"
        ),
        "traces": [p.name for p in trace_paths],
        "skipped": [list(s) for s in skipped],
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExportResult(tuple(trace_paths), tuple(skipped), manifest_path)
