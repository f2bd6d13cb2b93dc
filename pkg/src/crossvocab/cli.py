"""Command-line entry points: generate, eval, sweep, analyze, serve-toy."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .analysis import aggregate_by_category, annotate_output, load_category_map, render_html
from .config import RunConfig
from .ensemble import generate
from .errors import CrossvocabError
from .harness import dataset_hash, load_dataset, run_task
from . import trace as trace_io


def _apply_overrides(cfg, args) -> None:
    if getattr(args, "method", None):
        cfg.ensemble.method = args.method
    if getattr(args, "k", None) is not None:
        cfg.ensemble.k = args.k
    if getattr(args, "alpha", None) is not None:
        cfg.ensemble.alpha = args.alpha
    if getattr(args, "max_tokens", None) is not None:
        cfg.ensemble.max_tokens = args.max_tokens


def cmd_generate(args) -> int:
    cfg = RunConfig.load(args.config)
    _apply_overrides(cfg, args)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    backends = cfg.role_backends()
    result = generate(args.prompt, cfg.ensemble, backends, cfg.generation_constraint())

    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.jsonl"
    trace_io.write_generation(result, trace_path)
    if result.method == "capt":
        annotated = annotate_output(result)
        render_html(annotated, out_dir / "annotated.html")
        (out_dir / "annotated.json").write_text(
            json.dumps(annotated.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    print(result.text)
    print(f"[{result.finish_reason}] trace written to {trace_path}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    _apply_overrides(cfg, args)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    task = cfg.task_spec()
    data = load_dataset(cfg.task["dataset_path"])
    report, _ = run_task(
        task, cfg.ensemble, cfg.role_backends(), data,
        seed=cfg.task.get("seed", 0),
        out_dir=out_dir,
        manifest_extra={"dataset_hash": dataset_hash(cfg.task["dataset_path"])},
    )
    print(json.dumps({"macro_f1": report.macro_f1, "accuracy": report.accuracy}))
    print(f"metrics written to {out_dir/'metrics.json'}", file=sys.stderr)
    return 0


def _parse_grid(text: str, cast):
    values = [cast(v) for v in text.split(",") if v.strip() != ""]
    if not values:
        raise ValueError("empty grid")
    return values


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    k_grid = _parse_grid(args.k_grid, int)
    alpha_grid = _parse_grid(args.alpha_grid, float)
    task = cfg.task_spec()
    data = load_dataset(cfg.task["dataset_path"])
    ds_hash = dataset_hash(cfg.task["dataset_path"])

    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in k_grid:
        for alpha in alpha_grid:
            cell_dir = out_dir / f"k{k}_alpha{alpha:g}"
            try:
                cell = dataclasses.replace(cfg.ensemble, k=k, alpha=alpha,
                                           stop_sequences=list(cfg.ensemble.stop_sequences))
                report, _ = run_task(
                    task, cell, cfg.role_backends(), data,
                    seed=cfg.task.get("seed", 0),
                    out_dir=cell_dir,
                    manifest_extra={"dataset_hash": ds_hash},
                )
                rows.append([k, alpha, repr(report.macro_f1),
                             repr(report.accuracy), "ok"])
            except CrossvocabError as exc:
                rows.append([k, alpha, "", "", f"error: {exc}"])
    csv_path = out_dir / "sweep.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "alpha", "macro_f1", "accuracy", "status"])
        writer.writerows(rows)
    print(f"sweep table written to {csv_path}", file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    analysis_cfg = {}
    if args.config:
        analysis_cfg = RunConfig.load(args.config).analysis
    map_path = args.category_map or analysis_cfg.get("category_map_path")
    if not map_path:
        print("error: --category-map required (or an analysis section in --config)",
              file=sys.stderr)
        return 2
    min_freq = args.min_freq if args.min_freq is not None else \
        analysis_cfg.get("min_freq", 6)
    top_frac = args.top_frac if args.top_frac is not None else \
        analysis_cfg.get("top_frac", 0.25)

    traces_dir = Path(args.traces)
    category_map = load_category_map(map_path)
    out_dir = Path(args.out) if args.out else traces_dir / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)

    steps = []
    results = list(trace_io.read_traces_dir(traces_dir)) if traces_dir.exists() else []
    for result in results:
        steps.extend(result.steps)
    report = aggregate_by_category(steps, category_map, min_freq=min_freq,
                                   top_frac=top_frac)
    (out_dir / "offset_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for idx, result in enumerate(results):
        if result.method == "capt" and result.steps:
            render_html(annotate_output(result), out_dir / f"annotated_{idx:04d}.html")
    print(f"offset report written to {out_dir/'offset_report.json'}", file=sys.stderr)
    return 0


def cmd_serve_toy(args) -> int:
    from .backends import make_toy_model
    from .server import ToyProtocolServer

    backend = make_toy_model(args.spec)
    server = ToyProtocolServer(
        backend, host=args.host, port=args.port,
        max_context_chars=args.max_context_chars,
    )
    print(f"serving toy backend {backend.id!r} on {server.url}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossvocab",
        description="Decoding-time ensembling across mismatched vocabularies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run config JSON")
    common.add_argument("--out", default=None, help="output directory override")
    common.add_argument("--method", default=None,
                        choices=["capt", "proxy_tuning", "unite", "single"])
    common.add_argument("--k", type=int, default=None, help="top-k override")
    common.add_argument("--alpha", type=float, default=None, help="offset scale override")
    common.add_argument("--max-tokens", type=int, default=None, dest="max_tokens")

    p = sub.add_parser("generate", parents=[common], help="run one generation")
    p.add_argument("prompt", help="prompt text")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common], help="run a classification task")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="cross-product of k and alpha values")
    p.add_argument("--k-grid", required=True, help="comma-separated k values")
    p.add_argument("--alpha-grid", required=True, help="comma-separated alpha values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="aggregate offsets over saved traces")
    p.add_argument("--traces", required=True, help="directory of trace JSONL files")
    p.add_argument("--category-map", default=None, help="token category JSON")
    p.add_argument("--config", default=None,
                   help="run config supplying analysis defaults")
    p.add_argument("--min-freq", type=int, default=None, help="default 6")
    p.add_argument("--top-frac", type=float, default=None, help="default 0.25")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve-toy", help="host a toy model on the wire protocol")
    p.add_argument("--spec", required=True, help="toy model spec JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8601)
    p.add_argument("--max-context-chars", type=int, default=100_000,
                   dest="max_context_chars")
    p.set_defaults(func=cmd_serve_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CrossvocabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
