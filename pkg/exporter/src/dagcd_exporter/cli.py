"""Command-line entry point for trace export.

Flags mirror the ExportJob fields; ``--list-templates`` prints the catalog.
"""
from __future__ import annotations

import argparse
import sys

from dagcd.errors import EmptyDataset, InvalidInput

from .errors import ExportUnsupported
from .export import ExportJob, export_traces
from .templates import list_templates


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagcd-export", description=__doc__)
    parser.add_argument("--list-templates", action="store_true",
                        help="print the prompt template catalog and exit")
    parser.add_argument("--model", help="checkpoint name or local path")
    parser.add_argument("--dataset", help="line-delimited JSON QA dataset")
    parser.add_argument("--out", help="output directory for trace files")
    parser.add_argument("--template", type=int, default=1, help="prompt template id (1-4)")
    parser.add_argument("--heads", default=None,
                        help="comma-separated layer:head pairs (default: all heads)")
    parser.add_argument("--top-m", type=int, default=100)
    parser.add_argument("--max-examples", type=int, default=5)
    parser.add_argument("--max-new-tokens", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    return parser


def _parse_heads(spec: str | None):
    if spec is None:
        return None
    heads = []
    for part in spec.split(","):
        layer, _, head = part.strip().partition(":")
        heads.append((int(layer), int(head)))
    return tuple(heads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list_templates:
        for t in list_templates():
            print(f"{t.template_id}: {t.name}")
            print("    " + t.text.replace("\n", "\\n"))
        return 0
    if not (args.model and args.dataset and args.out):
        print("--model, --dataset, and --out are required", file=sys.stderr)
        return 2
    try:
        job = ExportJob(
            model=args.model,
            dataset_path=args.dataset,
            out_dir=args.out,
            template_id=args.template,
            heads=_parse_heads(args.heads),
            top_m=args.top_m,
            max_examples=args.max_examples,
            max_new_tokens=args.max_new_tokens,
            seed=args.seed,
        )
        result = export_traces(job)
    except (InvalidInput, EmptyDataset, ExportUnsupported, FileNotFoundError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(result.trace_paths)} trace(s) to {args.out}")
    for ex_id, reason in result.skipped:
        print(f"skipped {ex_id}: {reason}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
