"""Command line entry point: ``fang prune | eval | report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import pipeline
from .calib import load_corpus
from .errors import ConfigError, FangError, FormatError, NumericalError, StageError
from .model import Checkpoint, perplexity

log = logging.getLogger("fang")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

TABLE_COLUMNS = (
    ("layer", "layer", "d"),
    ("sp_target", "sp_target", ".6g"),
    ("realized", "realized_sparsity", ".6g"),
    ("fc", "fc", ".6g"),
    ("heads", "heads_pruned", "d"),
    ("neurons", "neurons_pruned", "d"),
    ("err_before", "ffn_error_before", ".6g"),
    ("err_after", "ffn_error_after", ".6g"),
)

OVERRIDES = {
    "sparsity": "prune.sparsity",
    "method": "prune.method",
    "k_groups": "prune.k_groups",
    "tau": "prune.tau",
    "pca_dim": "prune.pca_dim",
    "alloc": "prune.alloc",
    "reweight": "prune.reweight",
    "grouping": "prune.grouping",
    "propagation": "prune.propagation",
    "seed": "prune.seed",
}


def _thread_limit():
    n = os.environ.get("FANG_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def render_table(report: dict) -> str:
    """Pipe-delimited per-layer table followed by the summary and config delta."""
    lines = [" | ".join(name for name, _, _ in TABLE_COLUMNS)]
    for entry in report["layers"]:
        lines.append(" | ".join(format(entry[key], fmt) for _, key, fmt in TABLE_COLUMNS))
    summary = report.get("summary", {})
    if summary:
        lines.append("")
        for key in ("target_sparsity", "realized_sparsity", "param_reduction", "ppl_dense", "ppl_pruned"):
            if key in summary:
                lines.append(f"{key}: {summary[key]:.6g}")
    delta = pipeline.config_delta(report.get("config", {}))
    if delta:
        lines.append("")
        lines.append("config delta from defaults:")
        for key, value in sorted(delta.items()):
            lines.append(f"  {key} = {json.dumps(value)}")
    return "\n".join(lines)


def cmd_prune(args) -> int:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {dotted: getattr(args, name) for name, dotted in OVERRIDES.items()}
    if args.no_shared_group:
        overrides["prune.shared_group"] = False
    cfg = pipeline.resolve_config(raw, overrides)
    with _thread_limit():
        ckpt, report, groupings = pipeline.run_prune(cfg, return_groupings=True)
    paths = pipeline.write_outputs(args.out, ckpt, report, groupings)
    s = report["summary"]
    print(f"realized sparsity {s['realized_sparsity']:.4f} (target {s['target_sparsity']:.4f})")
    print(f"perplexity dense {s['ppl_dense']:.4f} pruned {s['ppl_pruned']:.4f}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(pipeline.resolve_path(args.ckpt))
    tokens = load_corpus(pipeline.resolve_path(args.corpus))
    if args.max_tokens:
        tokens = tokens[: args.max_tokens]
    with _thread_limit():
        ppl = perplexity(ckpt, tokens, args.window)
    print(f"perplexity {ppl!r}")
    print(f"tokens {tokens.size}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = pipeline.load_report(args.input)
    print(render_table(report))
    if not args.no_figures:
        from .plotting import render_report_figures

        out = Path(args.figures) if args.figures else Path(args.input).parent
        for path in render_report_figures(report, out):
            print(f"figure: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fang", description="Function-aware structured pruning of a toy transformer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="prune a checkpoint and write an archive plus report")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--k-groups", dest="k_groups", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--pca-dim", dest="pca_dim", type=int)
    p.add_argument("--alloc", choices=("uniform", "fc", "taylor"))
    p.add_argument("--reweight", choices=("ours", "reverse", "uniform", "only_matched"))
    p.add_argument("--grouping", choices=("fang", "random"))
    p.add_argument("--no-shared-group", action="store_true")
    p.add_argument("--propagation", choices=pipeline.PROPAGATION)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a text corpus")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", default="builtin:eval")
    e.add_argument("--window", type=int, default=128)
    e.add_argument("--max-tokens", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render a run report as a table and figures")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--figures", help="directory for figures (default: next to the report)")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)
    return parser


def _is_numerical(exc) -> bool:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return isinstance(cause, NumericalError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FangError as exc:
        if _is_numerical(exc):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        if isinstance(exc, StageError) and isinstance(exc.cause, ConfigError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        kind = "format error" if isinstance(exc, FormatError) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
