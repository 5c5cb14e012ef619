"""Desk-scale diagnostic studies: uncertainty statistics, gold-token rank and
probability-gap breakdowns, rank-correlation reports, cross-family detector
generalization, training-size curves, and head-importance summaries.

Reports are plot-ready tables with provenance metadata; full-scale reference
statistics from large-model runs are attached as labeled footnotes only,
never as pass/fail targets.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .detector import (
    LabeledExample,
    TrainConfig,
    UtilizationDetector,
    auc_score,
    evaluate,
    restrict_to_heads,
    select_top_heads,
    train,
)
from .distributions import spearman
from .errors import InvalidInput

# Full-scale reference statistics from large-model runs; desk-scale synthetic
# data cannot reproduce these, so they are report footnotes only.
REFERENCE_STATS = {
    "ne_mean_wrong": 0.36,
    "ne_mean_correct": 0.29,
    "msp_mean_wrong": 0.25,
    "msp_mean_correct": 0.41,
    "gold_rank_top10_share": 0.66,
    "gold_rank_2to4_share": 0.43,
    "gap_mean_rank_2to4": 0.14,
    "gap_mean_rank_beyond_30": 0.24,
    "spearman_with_context_llama2_7b": -0.53,
    "cross_domain_auc_floor": 0.99,
    "auc_at_100_train_samples": 0.96,
}

DEFAULT_RANK_BINS = ((1, 1), (2, 4), (5, 10), (11, 30), (31, None))


@dataclass(frozen=True)
class AnalysisRecord:
    """Per-example first-step statistics for diagnostic aggregation."""

    example_id: str
    correct: bool
    entropy: float
    msp: float
    gold_rank: int
    probability_gap: float
    f1: float

    def __post_init__(self):
        if not 0.0 <= self.entropy <= 1.0:
            raise InvalidInput("entropy must lie in [0, 1]")
        if not 0.0 < self.msp <= 1.0:
            raise InvalidInput("msp must lie in (0, 1]")
        if self.gold_rank < 1:
            raise InvalidInput("gold_rank must be >= 1")
        if not 0.0 <= self.probability_gap <= 1.0:
            raise InvalidInput("probability_gap must lie in [0, 1]")


@dataclass(frozen=True)
class ReportTable:
    name: str
    columns: dict  # column name -> list of values (rectangular)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise InvalidInput("columns must be rectangular")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def _bin_label(lo: int, hi: int | None) -> str:
    if hi is None:
        return f">{lo - 1}"
    return str(lo) if lo == hi else f"{lo}-{hi}"


def uncertainty_report(records: Sequence[AnalysisRecord]) -> ReportTable:
    """Mean/median NE and MSP per correctness partition plus 0.05-wide bins."""
    cols = {"partition": [], "n": [], "ne_mean": [], "ne_median": [], "msp_mean": [], "msp_median": []}
    hist_cols = {"partition": [], "bin_lo": [], "ne_share": [], "msp_share": []}
    edges = np.arange(0.0, 1.0 + 1e-12, 0.05)
    for name, flag in (("correct", True), ("wrong", False)):
        part = [r for r in records if r.correct == flag]
        if not part:
            continue
        ne = np.array([r.entropy for r in part])
        msp = np.array([r.msp for r in part])
        cols["partition"].append(name)
        cols["n"].append(len(part))
        cols["ne_mean"].append(float(ne.mean()))
        cols["ne_median"].append(float(np.median(ne)))
        cols["msp_mean"].append(float(msp.mean()))
        cols["msp_median"].append(float(np.median(msp)))
        ne_hist = np.histogram(ne, bins=edges)[0] / len(part)
        msp_hist = np.histogram(msp, bins=edges)[0] / len(part)
        for b in range(edges.size - 1):
            hist_cols["partition"].append(name)
            hist_cols["bin_lo"].append(round(float(edges[b]), 2))
            hist_cols["ne_share"].append(float(ne_hist[b]))
            hist_cols["msp_share"].append(float(msp_hist[b]))
    meta = {"histogram": hist_cols, "reference": {k: REFERENCE_STATS[k] for k in
            ("ne_mean_wrong", "ne_mean_correct", "msp_mean_wrong", "msp_mean_correct")}}
    return ReportTable("uncertainty", cols, meta)


def rank_histogram(
    records: Sequence[AnalysisRecord], bins: Sequence[tuple[int, int | None]] = DEFAULT_RANK_BINS
) -> ReportTable:
    """Share of records per gold-rank interval."""
    ranks = [r.gold_rank for r in records]
    n = len(ranks)
    cols = {"bin": [], "count": [], "share": []}
    for lo, hi in bins:
        c = sum(1 for r in ranks if r >= lo and (hi is None or r <= hi))
        cols["bin"].append(_bin_label(lo, hi))
        cols["count"].append(c)
        cols["share"].append(c / n if n else 0.0)
    meta = {"n": n, "reference": {k: REFERENCE_STATS[k] for k in
            ("gold_rank_top10_share", "gold_rank_2to4_share")}}
    return ReportTable("rank-histogram", cols, meta)


def gap_by_rank(
    records: Sequence[AnalysisRecord], bins: Sequence[tuple[int, int | None]] = DEFAULT_RANK_BINS
) -> ReportTable:
    """Mean probability gap per gold-rank interval."""
    cols = {"bin": [], "n": [], "gap_mean": []}
    for lo, hi in bins:
        part = [r.probability_gap for r in records if r.gold_rank >= lo and (hi is None or r.gold_rank <= hi)]
        cols["bin"].append(_bin_label(lo, hi))
        cols["n"].append(len(part))
        cols["gap_mean"].append(float(np.mean(part)) if part else math.nan)
    meta = {"reference": {k: REFERENCE_STATS[k] for k in
            ("gap_mean_rank_2to4", "gap_mean_rank_beyond_30")}}
    return ReportTable("gap-by-rank", cols, meta)


def spearman_report(f1_scores: Sequence[float], entropies: Sequence[float]) -> ReportTable:
    """Rank correlation of answer F1 against uncertainty, with a two-sided
    p-value from the large-sample t approximation (flagged for n < 30)."""
    rho = spearman(f1_scores, entropies)
    n = len(f1_scores)
    if abs(rho) >= 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * float(_scipy_stats.t.sf(abs(t), df=n - 2))
    cols = {"n": [n], "spearman": [rho], "p_value": [p], "small_sample": [n < 30]}
    meta = {"reference": {"spearman_with_context_llama2_7b":
            REFERENCE_STATS["spearman_with_context_llama2_7b"]}}
    return ReportTable("spearman", cols, meta)


def cross_domain_matrix(
    families: Mapping[str, Sequence[LabeledExample]],
    config: TrainConfig = TrainConfig(),
) -> ReportTable:
    """Train on each family, report AUC on every family, plus row means."""
    names = sorted(families)
    if len(names) < 2:
        raise InvalidInput("need at least two families")
    cols: dict = {"train_family": []}
    for name in names:
        cols[f"auc_on_{name}"] = []
    cols["off_diagonal_mean"] = []
    for tr in names:
        det = train(families[tr], config)
        cols["train_family"].append(tr)
        off = []
        for ev in names:
            auc = evaluate(det, families[ev])["auc"]
            cols[f"auc_on_{ev}"].append(auc)
            if ev != tr:
                off.append(auc)
        cols["off_diagonal_mean"].append(float(np.mean(off)))
    meta = {"reference": {"cross_domain_auc_floor": REFERENCE_STATS["cross_domain_auc_floor"]}}
    return ReportTable("cross-domain", cols, meta)


def train_size_curve(
    sizes: Sequence[int],
    pool: Sequence[LabeledExample],
    eval_set: Sequence[LabeledExample],
    config: TrainConfig = TrainConfig(),
) -> ReportTable:
    """Held-out AUC as a function of training-set size (balanced prefixes)."""
    if list(sizes) != sorted(sizes):
        raise InvalidInput("sizes must be ascending")
    if sizes and sizes[-1] > len(pool):
        raise InvalidInput("size exceeds the available example pool")
    pos = [e for e in pool if e.label == 1]
    neg = [e for e in pool if e.label == 0]
    cols = {"train_size": [], "auc": [], "accuracy": []}
    for size in sizes:
        half = size // 2
        subset = pos[:half] + neg[: size - half]
        det = train(subset, config)
        res = evaluate(det, eval_set)
        cols["train_size"].append(size)
        cols["auc"].append(res["auc"])
        cols["accuracy"].append(res["accuracy"])
    meta = {"reference": {"auc_at_100_train_samples": REFERENCE_STATS["auc_at_100_train_samples"]}}
    return ReportTable("train-size-curve", cols, meta)


def head_importance_report(
    full_detector: UtilizationDetector,
    train_examples: Sequence[LabeledExample],
    eval_examples: Sequence[LabeledExample],
    ks: Sequence[int] = (1, 5, 10, 50),
    config: TrainConfig = TrainConfig(),
) -> ReportTable:
    """Per-head |coefficient| ranking plus top-K/bottom-K retrained AUC."""
    n = len(full_detector.head_order)
    ranked = select_top_heads(full_detector, n)
    coef = dict(zip(full_detector.head_order, full_detector.coefficients))
    ranking = {
        "rank": list(range(1, n + 1)),
        "layer": [h.layer for h in ranked],
        "head": [h.head for h in ranked],
        "coefficient": [coef[h] for h in ranked],
        "abs_coefficient": [abs(coef[h]) for h in ranked],
    }
    cols: dict = {"k": [], "top_k_auc": [], "bottom_k_auc": []}
    full_auc = evaluate(full_detector, eval_examples)["auc"]
    k_values = sorted({min(k, n) for k in ks} | {n})
    for k in k_values:
        tops = ranked[:k]
        bottoms = ranked[n - k :]
        det_top = train(restrict_to_heads(train_examples, tops), config, full_detector.geometry)
        det_bot = train(restrict_to_heads(train_examples, bottoms), config, full_detector.geometry)
        cols["k"].append(k)
        cols["top_k_auc"].append(evaluate(det_top, restrict_to_heads(eval_examples, tops))["auc"])
        cols["bottom_k_auc"].append(evaluate(det_bot, restrict_to_heads(eval_examples, bottoms))["auc"])
    meta = {"full_auc": full_auc, "ranking": ranking}
    return ReportTable("head-importance", cols, meta)


def emit_report(table: ReportTable, path: str | Path, fmt: str = "csv") -> None:
    """Deterministic serialization with a provenance header."""
    if fmt not in ("csv", "json"):
        raise InvalidInput("format must be 'csv' or 'json'")
    path = Path(path)
    if fmt == "json":
        doc = {"name": table.name, "columns": table.columns, "metadata": table.metadata}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")
        return
    buf = io.StringIO()
    buf.write(f"# report: {table.name}\n")
    for k in sorted(table.metadata):
        buf.write(f"# {k}: {json.dumps(table.metadata[k], sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    names = list(table.columns)
    writer.writerow(names)
    for i in range(table.n_rows):
        writer.writerow([table.columns[c][i] for c in names])
    path.write_text(buf.getvalue())


def parse_report(path: str | Path) -> ReportTable:
    """Read back an emitted report (csv or json)."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        return ReportTable(doc["name"], doc["columns"], doc.get("metadata", {}))
    lines = text.splitlines()
    name = ""
    metadata = {}
    body = []
    for line in lines:
        if line.startswith("# report: "):
            name = line[len("# report: ") :]
        elif line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            metadata[k] = json.loads(v)
        else:
            body.append(line)
    rows = list(csv.reader(body))
    header, data = rows[0], rows[1:]
    columns = {c: [_coerce(r[i]) for r in data] for i, c in enumerate(header)}
    return ReportTable(name, columns, metadata)


def _coerce(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            continue
    if s in ("True", "False"):
        return s == "True"
    return s
