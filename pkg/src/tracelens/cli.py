"""Command-line front end.

Subcommands compose the library into the full workflow: validate a trace
file, scan layers for the retrieval reference layer, run the tracer, build
evidence regions, run the whole pipeline in one shot, generate and evaluate
synthetic traces, and render heatmaps. Every invocation prints a JSON run
report to stdout; diagnostics go to stderr.

Exit codes: 0 ok, 2 validation failure, 3 parse or I/O error, 4 empty
evaluation, 5 bad configuration, 64 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as tio
from .core import AttentionTrace, visual_slice
from .errors import (
    EmptyEvaluationError,
    RejectedInputError,
    TraceLensError,
    TraceParseError,
    ValidationFailedError,
)
from .recall import scan_layers
from .regions import CropManifest, RegionConfig, build_regions
from .synth import SynthSpec, drift_sweep, generate
from .tracer import TracerConfig, TraceScoreMap, run_tracer

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARSE = 3
EXIT_EMPTY = 4
EXIT_CONFIG = 5
EXIT_USAGE = 64

_TRACER_KEYS = ("layer", "tau_q", "tau_v", "fallback_k")
_REGION_KEYS = ("eps", "min_pts", "pad", "min_side")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; the contract wants 64
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    obj = tio._load_json(Path(path), "config file")
    allowed = set(_TRACER_KEYS) | set(_REGION_KEYS)
    unknown = set(obj) - allowed
    if unknown:
        raise RejectedInputError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    return obj


def _merged(args, cfg: dict, key: str):
    """Flag value if given, else config-file value, else None."""
    value = getattr(args, key, None)
    return cfg.get(key) if value is None else value


def _tracer_config(args, cfg: dict, layer: int) -> TracerConfig:
    kwargs = {}
    for key in ("tau_q", "tau_v", "fallback_k"):
        value = _merged(args, cfg, key)
        if value is not None:
            kwargs[key] = value
    return TracerConfig(layer=layer, **kwargs)


def _region_config(args, cfg: dict) -> RegionConfig:
    kwargs = {}
    for key in _REGION_KEYS:
        value = _merged(args, cfg, key)
        if value is not None:
            kwargs[key] = value
    return RegionConfig(**kwargs)


def _read_valid_trace(path: str) -> AttentionTrace:
    trace = tio.read_trace(path)
    if trace.verdict is not None and not trace.verdict.passed:
        raise ValidationFailedError(f"{path} fails validation:\n{trace.verdict.summary()}")
    return trace


def _resolve_layer(args, cfg: dict, trace: AttentionTrace) -> int:
    layer = _merged(args, cfg, "layer")
    if layer is None:
        layer = trace.l_max
    if layer is None:
        raise RejectedInputError("no --layer given and the trace records no reference layer")
    layer = int(layer)
    if not 0 <= layer < trace.n_layers:
        raise RejectedInputError(f"layer {layer} out of range [0, {trace.n_layers})")
    return layer


def _manifest_with_fallback(
    vmap: TraceScoreMap,
    grid,
    region_config: RegionConfig,
    tracer_config: Optional[TracerConfig],
    image_ref: str,
) -> CropManifest:
    """Region build with the all-noise fallback.

    When clustering rejects every selected token, keep one region covering
    the single highest-score token's patch and mark the manifest.
    """
    manifest = build_regions(vmap, grid, region_config, tracer_config, image_ref)
    if not manifest.noise_only:
        return manifest
    top = int(np.argmax(vmap.scores))
    solo = replace(vmap, selected=(top,))
    fb = build_regions(solo, grid, region_config, tracer_config, image_ref)
    return CropManifest(
        image_ref=image_ref,
        regions=fb.regions,
        noise=frozenset(set(vmap.selected) - {top}),
        provenance=fb.provenance,
        noise_only=False,
        fallback_region=True,
    )


def _manifest_metrics(manifest: CropManifest) -> dict:
    return {
        "n_regions": len(manifest.regions),
        "rects": [list(r.rect) for r in manifest.regions],
        "n_noise": len(manifest.noise),
        "fallback_region": manifest.fallback_region,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args, report: dict) -> int:
    trace = tio.read_trace(args.trace)
    verdict = trace.verdict
    assert verdict is not None
    report["metrics"] = {
        "passed": verdict.passed,
        "n_violations": len(verdict.violations),
    }
    if not verdict.passed:
        print(verdict.summary(), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_recall_scan(args, report: dict) -> int:
    instances = tio.load_instances(args.manifest)
    try:
        scan = scan_layers(instances)
    except EmptyEvaluationError:
        raise EmptyEvaluationError("no mention steps in any instance")
    report["metrics"] = {
        "per_layer": list(scan.per_layer),
        "l_max": scan.l_max,
        "n_instances": scan.n_instances,
        "n_skipped": scan.n_skipped,
    }
    if args.out:
        out = Path(args.out)
        out.write_bytes(tio._dump_json({"version": 1, **report["metrics"]}))
        report["outputs"].append(str(out))
    return EXIT_OK


def cmd_trace(args, report: dict) -> int:
    cfg = _load_config_file(args.config)
    trace = _read_valid_trace(args.trace)
    layer = _resolve_layer(args, cfg, trace)
    config = _tracer_config(args, cfg, layer)
    report["config"].update(asdict(config))
    key, vmap = run_tracer(trace, config)
    dump = tio.TraceDump(
        image_ref=trace.image_ref, grid=trace.grid, config=config, key=key, vmap=vmap
    )
    tio.write_trace_dump(dump, args.out)
    report["outputs"].append(str(args.out))
    report["metrics"] = {
        "layer": layer,
        "selected_queries": list(key.selected),
        "query_degenerate": key.degenerate,
        "query_fallback": key.fallback_used,
        "selected_visual": list(vmap.selected),
        "visual_degenerate": vmap.degenerate,
        "visual_fallback": vmap.fallback_used,
    }
    return EXIT_OK


def cmd_regions(args, report: dict) -> int:
    cfg = _load_config_file(args.config)
    dump = tio.read_trace_dump(args.dump)
    region_config = _region_config(args, cfg)
    report["config"].update(asdict(region_config))
    manifest = _manifest_with_fallback(
        dump.vmap, dump.grid, region_config, dump.config, dump.image_ref
    )
    tio.write_crop_manifest(manifest, args.out)
    report["outputs"].append(str(args.out))
    report["metrics"] = _manifest_metrics(manifest)
    return EXIT_OK


def cmd_pipeline(args, report: dict) -> int:
    cfg = _load_config_file(args.config)
    trace = _read_valid_trace(args.trace)
    layer = _resolve_layer(args, cfg, trace)
    config = _tracer_config(args, cfg, layer)
    region_config = _region_config(args, cfg)
    report["config"].update(asdict(config))
    report["config"].update(asdict(region_config))
    key, vmap = run_tracer(trace, config)
    manifest = _manifest_with_fallback(
        vmap, trace.grid, region_config, config, trace.image_ref
    )
    tio.write_crop_manifest(manifest, args.out)
    report["outputs"].append(str(args.out))
    report["metrics"] = {
        "layer": layer,
        "selected_queries": list(key.selected),
        "selected_visual": list(vmap.selected),
        **_manifest_metrics(manifest),
    }
    return EXIT_OK


def _synth_spec(args) -> SynthSpec:
    kwargs = {}
    for flag, key in (
        ("t_steps", "t_steps"), ("n_layers", "n_layers"), ("n_sys", "n_sys"),
        ("n_query", "n_query"), ("n_distractors", "n_distractors"),
        ("drift", "drift"), ("concentration", "concentration"),
        ("mention_step_frac", "mention_step_frac"), ("best_layer", "best_layer"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag)
        if value is not None:
            kwargs[key] = value
    if args.planted_query is not None:
        kwargs["planted_query"] = tuple(args.planted_query)
    if args.region is not None:
        if len(args.region) != 4:
            raise RejectedInputError("--region needs four numbers: x0,y0,x1,y1")
        kwargs["planted_region"] = tuple(args.region)
    if any(v is not None for v in (args.rows, args.cols, args.image_w, args.image_h)):
        base = SynthSpec()
        from .core import VisualGrid

        kwargs["grid"] = VisualGrid(
            rows=args.rows if args.rows is not None else base.grid.rows,
            cols=args.cols if args.cols is not None else base.grid.cols,
            image_w=args.image_w if args.image_w is not None else base.grid.image_w,
            image_h=args.image_h if args.image_h is not None else base.grid.image_h,
        )
    return SynthSpec(**kwargs)


def cmd_synth(args, report: dict) -> int:
    spec = _synth_spec(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(args.count):
        sp = replace(spec, seed=spec.seed + i)
        trace, truth = generate(sp)
        name = f"synth-{sp.seed}.trace"
        tio.write_trace(trace, out_dir / name)
        report["outputs"].append(str(out_dir / name))
        records.append(tio.LabelRecord(
            trace_path=name,
            category="target",
            category_token_texts=("target",),
            bbox=sp.planted_region,
        ))
    labels = tio.write_label_manifest(records, out_dir / "labels.json")
    report["outputs"].append(str(labels))
    report["metrics"] = {
        "count": args.count,
        "first_seed": spec.seed,
        "best_layer": spec.best_layer,
        "drift": spec.drift,
    }
    return EXIT_OK


def cmd_eval_synth(args, report: dict) -> int:
    spec = _synth_spec(args)
    rows = drift_sweep(spec, args.drifts, args.seeds)
    report["metrics"] = {"rows": [asdict(r) for r in rows]}
    if args.out:
        tio.write_sweep_report(rows, args.out)
        report["outputs"].append(str(args.out))
    if args.table:
        Path(args.table).write_text(tio.render_sweep_table(rows), encoding="utf-8")
        report["outputs"].append(str(args.table))
    return EXIT_OK


def cmd_render(args, report: dict, parser: _Parser) -> int:
    if args.step is not None and args.scores:
        parser.error("--step and --scores are mutually exclusive")
    if args.step is None and not args.scores:
        parser.error("one of --step or --scores is required")

    with open(args.input, "rb") as fh:
        is_trace = fh.read(len(tio.MAGIC)) == tio.MAGIC

    if args.scores:
        if is_trace:
            raise RejectedInputError("--scores needs a tracer dump, not a trace file")
        dump = tio.read_trace_dump(args.input)
        grid = dump.grid
        field = dump.vmap.scores.reshape(grid.rows, grid.cols)
    else:
        if not is_trace:
            raise RejectedInputError("--step needs a trace file, not a tracer dump")
        trace = _read_valid_trace(args.input)
        cfg = _load_config_file(args.config)
        layer = _resolve_layer(args, cfg, trace)
        if not 0 <= args.step < trace.n_steps:
            raise RejectedInputError(f"step {args.step} out of range [0, {trace.n_steps})")
        grid = trace.grid
        field = visual_slice(trace, args.step, layer).reshape(grid.rows, grid.cols)

    tio.write_pgm(field, args.out)
    report["outputs"].append(str(args.out))
    r, c = np.unravel_index(int(np.argmax(field)), field.shape)
    report["metrics"] = {
        "shape": [grid.rows, grid.cols],
        "min": float(field.min()),
        "max": float(field.max()),
        "argmax": [int(r), int(c)],
    }
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> _Parser:
    parser = _Parser(prog="tracelens", description=__doc__.split("\n\n")[1])
    common = _Parser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="omit timestamps and timings from the run report")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", parents=[common], help="check a trace file's invariants")
    p.add_argument("trace")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("recall-scan", parents=[common],
                       help="per-layer retrieval scores over a labeled set")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_recall_scan)

    p = sub.add_parser("trace", parents=[common], help="run the tracer on one trace")
    p.add_argument("trace")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--tau-q", dest="tau_q", type=float, default=None)
    p.add_argument("--tau-v", dest="tau_v", type=float, default=None)
    p.add_argument("--fallback-k", dest="fallback_k", type=_positive_int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("regions", parents=[common], help="cluster a tracer dump into crops")
    p.add_argument("dump")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--min-pts", dest="min_pts", type=_positive_int, default=None)
    p.add_argument("--pad", type=float, default=None)
    p.add_argument("--min-side", dest="min_side", type=_positive_int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("pipeline", parents=[common],
                       help="trace file to crop manifest in one step")
    p.add_argument("trace")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--tau-q", dest="tau_q", type=float, default=None)
    p.add_argument("--tau-v", dest="tau_v", type=float, default=None)
    p.add_argument("--fallback-k", dest="fallback_k", type=_positive_int, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--min-pts", dest="min_pts", type=_positive_int, default=None)
    p.add_argument("--pad", type=float, default=None)
    p.add_argument("--min-side", dest="min_side", type=_positive_int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    synth_flags = _Parser(add_help=False)
    synth_flags.add_argument("--t-steps", dest="t_steps", type=_positive_int, default=None)
    synth_flags.add_argument("--n-layers", dest="n_layers", type=_positive_int, default=None)
    synth_flags.add_argument("--rows", type=_positive_int, default=None)
    synth_flags.add_argument("--cols", type=_positive_int, default=None)
    synth_flags.add_argument("--image-w", dest="image_w", type=float, default=None)
    synth_flags.add_argument("--image-h", dest="image_h", type=float, default=None)
    synth_flags.add_argument("--n-sys", dest="n_sys", type=int, default=None)
    synth_flags.add_argument("--n-query", dest="n_query", type=_positive_int, default=None)
    synth_flags.add_argument("--planted-query", dest="planted_query", type=_int_list, default=None)
    synth_flags.add_argument("--region", type=_float_list, default=None,
                             help="planted bbox as x0,y0,x1,y1")
    synth_flags.add_argument("--n-distractors", dest="n_distractors", type=int, default=None)
    synth_flags.add_argument("--drift", type=float, default=None)
    synth_flags.add_argument("--concentration", type=float, default=None)
    synth_flags.add_argument("--mention-frac", dest="mention_step_frac", type=float, default=None)
    synth_flags.add_argument("--best-layer", dest="best_layer", type=int, default=None)
    synth_flags.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", parents=[common, synth_flags],
                       help="generate synthetic traces with planted truth")
    p.add_argument("--count", type=_positive_int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval-synth", parents=[common, synth_flags],
                       help="drift sweep of recovery quality")
    p.add_argument("--drifts", type=_float_list, required=True)
    p.add_argument("--seeds", type=_positive_int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--table", default=None)
    p.set_defaults(func=cmd_eval_synth)

    p = sub.add_parser("render", parents=[common],
                       help="portable graymap of visual attention or trace scores")
    p.add_argument("input", help="trace file or tracer dump")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--scores", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render, needs_parser=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.monotonic()
    report = {"command": args.cmd, "config": {}, "outputs": [], "metrics": {}}
    try:
        if getattr(args, "needs_parser", False):
            code = args.func(args, report, parser)
        else:
            code = args.func(args, report)
    except ValidationFailedError as exc:
        code = EXIT_VALIDATION
        print(f"error: {exc}", file=sys.stderr)
    except TraceParseError as exc:
        code = EXIT_PARSE
        print(f"error: {exc}", file=sys.stderr)
    except EmptyEvaluationError as exc:
        code = EXIT_EMPTY
        print(f"error: {exc}", file=sys.stderr)
    except (RejectedInputError, TraceLensError) as exc:
        code = EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
    except OSError as exc:
        code = EXIT_PARSE
        print(f"error: {exc}", file=sys.stderr)
    report["status"] = code
    if not args.deterministic:
        report["timestamp"] = datetime.now(timezone.utc).isoformat()
        report["elapsed_s"] = round(time.monotonic() - start, 6)
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
