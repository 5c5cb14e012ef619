"""Command-line entry point.

Subcommands: train-detector, decode, eval, analyze, toy-demo. Every run
writes a manifest recording the resolved config, seeds, input fingerprints,
and output paths; all outputs are byte-deterministic under fixed seeds.
Config precedence: flags > config file > defaults.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, analysis, detector as det_mod, traceio
from .decoder import DecoderConfig, decode
from .detector import TrainConfig, evaluate, load_detector, restrict_to_heads, save_detector, select_top_heads, train
from .errors import DegenerateLabels, EmptyDataset, InvalidInput
from .toy import ToyOracle, new_seeded, plant_scenario, synth_attention_dataset

ANALYSES = (
    "rank-histogram",
    "uncertainty",
    "gap-by-rank",
    "spearman",
    "cross-domain",
    "train-size-curve",
    "head-importance",
)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("DAGCD_OUT", "out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: list, outputs: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(Path(o).name) for o in outputs],
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _apply_config_file(args, parser_defaults: dict) -> None:
    """Flags beat config-file values beat defaults."""
    if not getattr(args, "config", None):
        return
    doc = json.loads(Path(args.config).read_text())
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)


def _result_to_doc(result) -> dict:
    return {
        "token_ids": list(result.token_ids),
        "oracle_calls": result.oracle_calls,
        "outcome": result.outcome,
        "divergence_step": result.divergence_step,
        "per_step": [
            {
                "step_index": s.step_index,
                "entropy": s.entropy,
                "msp": s.msp,
                "utilized_positions": list(s.utilized_positions),
                "utilization": {str(k): v for k, v in sorted(s.utilization.items())},
                "adjustment_fired": s.adjustment_fired,
                "pre_argmax": s.pre_argmax,
                "post_argmax": s.post_argmax,
                "pre_top1_stop": s.pre_top1_stop,
                "post_top1_stop": s.post_top1_stop,
            }
            for s in result.per_step
        ],
    }


def cmd_train_detector(args) -> int:
    out = _out_dir(args)
    train_set = synth_attention_dataset(
        args.n, args.family, args.seed, num_layers=args.num_layers, num_heads=args.num_heads
    )
    held_out = synth_attention_dataset(
        args.n, args.family, args.seed + 1, num_layers=args.num_layers, num_heads=args.num_heads
    )
    config = TrainConfig(l2_strength=args.l2, folds=args.folds, seed=args.seed)
    detector = train(train_set, config, geometry=(args.num_layers, args.num_heads))
    if args.top_heads and args.top_heads < len(detector.head_order):
        heads = select_top_heads(detector, args.top_heads)
        detector = train(restrict_to_heads(train_set, heads), config,
                         geometry=(args.num_layers, args.num_heads))
        held_out_eval = restrict_to_heads(held_out, heads)
    else:
        held_out_eval = held_out
    metrics = evaluate(detector, held_out_eval)
    det_path = out / "detector.json"
    save_detector(detector, det_path)
    report = analysis.ReportTable(
        "detector-eval",
        {"metric": ["accuracy", "auc"], "value": [metrics["accuracy"], metrics["auc"]]},
        {"n_train": args.n, "family": args.family, "seed": args.seed},
    )
    analysis.emit_report(report, out / "eval_report.csv", "csv")
    resolved = {
        "family": args.family, "n": args.n, "l2": args.l2, "folds": args.folds,
        "top_heads": args.top_heads, "num_layers": args.num_layers, "num_heads": args.num_heads,
    }
    _write_manifest(out, "train-detector", resolved, {"seed": args.seed}, [],
                    [det_path, out / "eval_report.csv"])
    print(f"held-out accuracy={metrics['accuracy']:.4f} auc={metrics['auc']:.4f}")
    print(f"detector written to {det_path}")
    return 0


def cmd_decode(args) -> int:
    out = _out_dir(args)
    detector = load_detector(args.detector) if args.detector else None
    inputs = [args.detector] if args.detector else []
    generations = []
    if args.oracle == "toy":
        if detector is None:
            print("decode --oracle toy requires --detector", file=sys.stderr)
            return 2
        config = DecoderConfig(alpha=args.alpha, top_rank=args.top_rank,
                               max_new_tokens=args.max_new_tokens)
        for i in range(args.scenarios):
            scenario, oracle = plant_scenario(
                args.seed + i, detector, alpha=max(args.alpha, 2.0), top_rank=args.top_rank
            )
            config_i = DecoderConfig(
                alpha=args.alpha, top_rank=args.top_rank,
                max_new_tokens=args.max_new_tokens,
                stop_token_ids=frozenset({scenario.stop_token_id}),
            )
            result = decode(oracle, scenario.layout, detector if args.policy == "dagcd" else None, config_i)
            doc = _result_to_doc(result)
            doc["scenario"] = {
                "seed": args.seed + i,
                "gold_token_id": scenario.gold_token_id,
                "distractor_token_id": scenario.distractor_token_id,
                "flip_step": 0,
                "emitted_gold": scenario.gold_token_id in result.token_ids,
            }
            generations.append(doc)
    else:
        trace = traceio.read_trace(args.trace)
        inputs.append(args.trace)
        if detector is None and args.policy == "dagcd":
            print("decode --oracle replay --policy dagcd requires --detector", file=sys.stderr)
            return 2
        if detector is not None and detector.geometry != (trace.num_layers, trace.num_heads):
            print(
                f"detector geometry {detector.geometry} does not match trace "
                f"({trace.num_layers}, {trace.num_heads})",
                file=sys.stderr,
            )
            return 2
        config = DecoderConfig(alpha=args.alpha, top_rank=args.top_rank,
                               max_new_tokens=min(args.max_new_tokens, len(trace.steps)))
        oracle = traceio.replay_oracle(trace)
        result = decode(oracle, trace.layout, detector if args.policy == "dagcd" else None, config)
        generations.append(_result_to_doc(result))
    gen_path = out / "generations.json"
    gen_path.write_text(json.dumps(generations, indent=2, sort_keys=True) + "\n")
    resolved = {"oracle": args.oracle, "policy": args.policy, "alpha": args.alpha,
                "top_rank": args.top_rank, "max_new_tokens": args.max_new_tokens,
                "scenarios": args.scenarios, "detector": args.detector, "trace": args.trace}
    _write_manifest(out, "decode", resolved, {"seed": args.seed}, inputs, [gen_path])
    print(f"wrote {gen_path} ({len(generations)} generation(s))")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    try:
        examples, rejected = traceio.read_qa_dataset(args.dataset)
    except EmptyDataset as exc:
        print(str(exc), file=sys.stderr)
        return 2
    preds = {}
    with open(args.predictions, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                doc = json.loads(line)
                preds[str(doc["id"])] = doc["prediction"]
    if not preds:
        print("predictions file is empty", file=sys.stderr)
        return 2
    missing = [ex.id for ex in examples if ex.id not in preds]
    if missing:
        print(f"missing predictions for ids: {', '.join(missing)}", file=sys.stderr)
        return 2
    records = []
    for ex in examples:
        pred = preds[ex.id]
        records.append(traceio.EvalRecord(ex.id, pred, traceio.em(pred, ex.answers),
                                          traceio.f1(pred, ex.answers)))
    agg_em = 100.0 * sum(r.em for r in records) / len(records)
    agg_f1 = 100.0 * sum(r.f1 for r in records) / len(records)
    table = analysis.ReportTable(
        "qa-eval",
        {
            "id": [r.example_id for r in records],
            "em": [r.em for r in records],
            "f1": [r.f1 for r in records],
        },
        {"aggregate_em": agg_em, "aggregate_f1": agg_f1, "n": len(records),
         "rejected_lines": [list(r) for r in rejected]},
    )
    analysis.emit_report(table, out / "eval_records.csv", "csv")
    _write_manifest(out, "eval", {"dataset": args.dataset, "predictions": args.predictions},
                    {}, [args.dataset, args.predictions], [out / "eval_records.csv"])
    print(f"EM {agg_em:.2f}  F1 {agg_f1:.2f}  (n={len(records)})")
    return 0


def _load_analysis_records(path: str) -> list[analysis.AnalysisRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            records.append(analysis.AnalysisRecord(
                example_id=str(doc["id"]), correct=bool(doc["correct"]),
                entropy=doc["entropy"], msp=doc["msp"], gold_rank=doc["gold_rank"],
                probability_gap=doc["probability_gap"], f1=doc["f1"]))
    return records


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    fmt = args.format
    inputs = []
    config = TrainConfig(seed=args.seed)
    if args.analysis in ("rank-histogram", "uncertainty", "gap-by-rank", "spearman"):
        if not args.records:
            print(f"--analysis {args.analysis} requires --records", file=sys.stderr)
            return 2
        records = _load_analysis_records(args.records)
        inputs.append(args.records)
        if args.analysis == "rank-histogram":
            table = analysis.rank_histogram(records)
        elif args.analysis == "uncertainty":
            table = analysis.uncertainty_report(records)
        elif args.analysis == "gap-by-rank":
            table = analysis.gap_by_rank(records)
        else:
            table = analysis.spearman_report([r.f1 for r in records], [r.entropy for r in records])
    elif args.analysis == "cross-domain":
        families = {
            "A": synth_attention_dataset(args.n, "A", args.seed),
            "B": synth_attention_dataset(args.n, "B", args.seed + 1),
        }
        table = analysis.cross_domain_matrix(families, config)
    elif args.analysis == "train-size-curve":
        pool = synth_attention_dataset(max(args.sizes), "A", args.seed)
        eval_set = synth_attention_dataset(args.n, "A", args.seed + 1)
        table = analysis.train_size_curve(args.sizes, pool, eval_set, config)
    else:  # head-importance
        train_set = synth_attention_dataset(args.n, "A", args.seed, num_layers=4, num_heads=4)
        eval_set = synth_attention_dataset(args.n, "A", args.seed + 1, num_layers=4, num_heads=4)
        full = train(train_set, config, geometry=(4, 4))
        table = analysis.head_importance_report(full, train_set, eval_set, config=config)
    path = out / f"{args.analysis}.{fmt}"
    analysis.emit_report(table, path, fmt)
    _write_manifest(out, "analyze", {"analysis": args.analysis, "n": args.n,
                    "sizes": args.sizes, "format": fmt}, {"seed": args.seed}, inputs, [path])
    print(f"wrote {path}")
    return 0


def cmd_toy_demo(args) -> int:
    if args.scenarios < 1:
        print("--scenarios must be >= 1", file=sys.stderr)
        return 2
    train_set = synth_attention_dataset(100, "A", args.seed)
    detector = train(train_set, TrainConfig(seed=args.seed))
    flips = 0
    for i in range(args.scenarios):
        scenario, oracle = plant_scenario(args.seed + i, detector)
        config = DecoderConfig(alpha=2.0, top_rank=10,
                               stop_token_ids=frozenset({scenario.stop_token_id}))
        guided = decode(oracle, scenario.layout, detector, config)
        greedy = decode(PlantedReuse(oracle), scenario.layout, None, config)
        greedy_fails = greedy.token_ids[0] == scenario.distractor_token_id
        guided_recovers = guided.token_ids[0] == scenario.gold_token_id
        if greedy_fails and guided_recovers:
            flips += 1
        print(f"scenario {i}: greedy={greedy.token_ids[0]} guided={guided.token_ids[0]} "
              f"gold={scenario.gold_token_id} flip={'yes' if greedy_fails and guided_recovers else 'no'}")
    print(f"{flips}/{args.scenarios} scenarios: greedy fails, guided recovers the gold token")
    if args.out:
        out = _out_dir(args)
        (out / "toy_demo.json").write_text(json.dumps(
            {"scenarios": args.scenarios, "flips": flips}, sort_keys=True) + "\n")
        _write_manifest(out, "toy-demo", {"scenarios": args.scenarios}, {"seed": args.seed},
                        [], [out / "toy_demo.json"])
    return 0 if flips == args.scenarios else 1


class PlantedReuse:
    """Fresh call counter over an existing planted oracle."""

    def __init__(self, oracle):
        self._oracle = oracle
        self.num_layers = oracle.num_layers
        self.num_heads = oracle.num_heads
        self.calls = 0

    def step(self, prefix):
        self.calls += 1
        res = self._oracle.step(prefix)
        self._oracle.calls -= 1
        return res


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagcd", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory (default $DAGCD_OUT or ./out)")
        p.add_argument("--config", default=None, help="JSON config file (flags take precedence)")

    p = sub.add_parser("train-detector", help="train a utilization detector on synthetic data")
    common(p)
    p.add_argument("--family", choices=["A", "B"], default="A")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--l2", type=float, default=None, help="L2 strength (default: k-fold CV grid)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--top-heads", type=int, default=None, help="retrain on the top-K |coef| heads")
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--num-heads", type=int, default=2)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("decode", help="run guided decoding over a toy or replay oracle")
    common(p)
    p.add_argument("--oracle", choices=["toy", "replay"], default="toy")
    p.add_argument("--policy", choices=["dagcd", "greedy"], default="dagcd")
    p.add_argument("--detector", default=None)
    p.add_argument("--trace", default=None)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--top-rank", type=int, default=10)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--scenarios", type=int, default=1)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score predictions against a QA dataset (EM/F1)")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="emit a diagnostic report table")
    common(p)
    p.add_argument("--analysis", choices=ANALYSES, required=True)
    p.add_argument("--records", default=None, help="JSONL analysis records")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--sizes", type=int, nargs="+", default=[20, 50, 100, 200])
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("toy-demo", help="plant scenarios, train, decode, report flips")
    common(p)
    p.add_argument("--scenarios", type=int, default=5)
    p.set_defaults(func=cmd_toy_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for g in parser._subparsers._group_actions
                for a in g.choices[args.command]._actions}
    try:
        _apply_config_file(args, defaults)
        return args.func(args)
    except (InvalidInput, DegenerateLabels, EmptyDataset, FileNotFoundError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
