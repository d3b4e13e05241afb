"""Command-line entry point.

Subcommands: ``generate`` (scenes -> QA JSONL), ``eval`` (predictions vs
ground truth -> report JSON), ``codec`` (space-token encode/decode),
``select`` (token-selection demo over a stack file), and ``review-serve``
(the annotation QC server). Option values resolve as flags > environment
(``SCENEBENCH_<NAME>``) > ``--config`` JSON file > defaults. Diagnostics
go to stderr; data goes to files or stdout; exit code 0 means no errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, assets
from .qaforge import (
    TASKS,
    GenerationConfig,
    TemplateBank,
    generate,
    load_scenes_dir,
    pairs_to_jsonl,
)
from .reporting import (
    FAMILIES,
    IdMismatchError,
    build_report,
    load_records,
    validate_report,
)
from .spatial import (
    DEFAULT_EXTENT_MAX,
    DEFAULT_EXTENT_MIN,
    GridIndex,
    GridSpec,
    build_space_vocab,
    dequantize,
    grid_to_tokens,
    load_frequency_file,
    quantize,
    tokens_to_grid,
)
from .tokenbank import (
    BankParams,
    ProjectedStack,
    TokenStack,
    encode_prompt,
    encode_stack,
    hard_select,
    manual_select,
    soft_select,
)

_TRIPLE = "%.1f,%.1f,%.1f"


def _resolve(args, config: dict, name: str, default, cast=None):
    """flags > env > config file > default."""
    value = getattr(args, name, None)
    if value is None:
        env = os.environ.get(f"SCENEBENCH_{name.upper()}")
        if env is not None:
            value = env
        elif name in config:
            value = config[name]
    if value is None:
        return default
    return cast(value) if cast else value


def _load_config(args) -> dict:
    path = getattr(args, "config", None) or os.environ.get("SCENEBENCH_CONFIG")
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _parse_triple(text) -> tuple[float, float, float]:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",")]
    if len(vals) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return tuple(vals)


def _grid_from(args, config) -> GridSpec:
    return GridSpec(
        resolution=_resolve(args, config, "resolution", 1.0, float),
        extent_min=_resolve(args, config, "extent_min", DEFAULT_EXTENT_MIN, _parse_triple),
        extent_max=_resolve(args, config, "extent_max", DEFAULT_EXTENT_MAX, _parse_triple),
    )


def _vocab_from(args, config, grid: GridSpec):
    freq = _resolve(
        args, config, "freq_file", str(assets.default_vocab_path()), str
    )
    return build_space_vocab(load_frequency_file(freq), grid)


def _add_grid_flags(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--resolution",
        type=float,
        help=f"grid cell size in meters (default 1.0)",
    )
    parser.add_argument(
        "--extent-min",
        dest="extent_min",
        help=f"grid lower corner x,y,z in meters (default {_TRIPLE % DEFAULT_EXTENT_MIN})",
    )
    parser.add_argument(
        "--extent-max",
        dest="extent_max",
        help=f"grid upper corner x,y,z in meters (default {_TRIPLE % DEFAULT_EXTENT_MAX})",
    )
    parser.add_argument(
        "--freq-file",
        dest="freq_file",
        help="base vocabulary frequency file, token<TAB>count per line "
        "(default: the bank shipped with the package)",
    )


def cmd_generate(args) -> int:
    config = _load_config(args)
    grid = _grid_from(args, config)
    vocab = _vocab_from(args, config, grid)
    templates = TemplateBank.load(
        _resolve(args, config, "templates", str(assets.default_templates_path()), str)
    )
    seed = _resolve(args, config, "seed", 0, int)
    tasks = _resolve(args, config, "tasks", None)
    if tasks:
        wanted = tuple(t.strip() for t in str(tasks).split(",") if t.strip())
        unknown = set(wanted) - set(TASKS)
        if unknown:
            raise SystemExit(f"unknown tasks: {', '.join(sorted(unknown))}")
    else:
        wanted = TASKS

    scenes, calibs = load_scenes_dir(args.scenes)
    cfg = GenerationConfig(
        grid=grid, vocab=vocab, templates=templates, calibs=calibs, seed=seed, tasks=wanted
    )
    pairs = generate(scenes, cfg)
    payload = pairs_to_jsonl(pairs)
    Path(args.out).write_text(payload, encoding="utf-8")

    counts: dict[str, int] = {}
    for p in pairs:
        counts[p.task] = counts.get(p.task, 0) + 1
    print(f"wrote {len(pairs)} pairs to {args.out} (seed {seed})")
    for task in TASKS:
        if task in counts:
            print(f"  {task}: {counts[task]}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    preds = load_records(args.predictions)
    gts = load_records(args.ground_truth)
    families = _resolve(args, config, "families", None)
    if families:
        wanted = tuple(f.strip() for f in str(families).split(",") if f.strip())
        unknown = set(wanted) - set(FAMILIES)
        if unknown:
            raise SystemExit(f"unknown metric families: {', '.join(sorted(unknown))}")
    else:
        wanted = FAMILIES
    report = build_report(
        preds,
        gts,
        wanted,
        config={
            "predictions": str(args.predictions),
            "ground_truth": str(args.ground_truth),
            "families": list(wanted),
        },
    )
    validate_report(report)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote report to {args.out}")
    else:
        print(text)
    return 0


def cmd_codec(args) -> int:
    config = _load_config(args)
    grid = _grid_from(args, config)
    vocab = _vocab_from(args, config, grid)
    values = args.values if args.values else sys.stdin.read().split()
    if args.direction == "encode":
        if len(values) % 3 != 0 or not values:
            raise SystemExit("encode expects x y z coordinate triples")
        for i in range(0, len(values), 3):
            point = tuple(float(v) for v in values[i : i + 3])
            toks = grid_to_tokens(quantize(point, grid), vocab)
            print(" ".join(toks))
    else:
        if len(values) % 3 != 0 or not values:
            raise SystemExit("decode expects token triples")
        for i in range(0, len(values), 3):
            idx = tokens_to_grid(values[i : i + 3], vocab)
            x, y, z = dequantize(idx, grid)
            print(f"{x} {y} {z}")
    return 0


def _load_stack(path) -> tuple[TokenStack, ProjectedStack | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    stack = TokenStack(
        data=np.array(doc["data"], dtype=np.float64),
        timestamps=tuple(doc["timestamps"]),
    )
    projected = None
    if doc.get("projected") is not None:
        projected = ProjectedStack(
            data=np.array(doc["projected"], dtype=np.float64),
            timestamps=stack.timestamps,
        )
    return stack, projected


def cmd_select(args) -> int:
    config = _load_config(args)
    bank = BankParams.load(args.params)
    stack, projected = _load_stack(args.stack)
    if projected is None:
        projected = encode_stack(stack, bank.qformer)

    mode = args.mode
    if mode in ("soft", "sinusoidal-ablation", "hard"):
        if not args.prompt:
            raise SystemExit(f"--prompt is required for {mode} selection")
        prompt = encode_prompt(args.prompt, bank.time_table)

    if mode == "soft":
        out = soft_select(bank, prompt, stack, projected, "textual")
    elif mode == "sinusoidal-ablation":
        out = soft_select(bank, prompt, stack, projected, "sinusoidal")
    elif mode == "hard":
        n = _resolve(args, config, "n_frames", 3, int)
        out = hard_select(bank, prompt, stack, projected, n)
    elif mode == "manual":
        if not args.gt_timestamps:
            raise SystemExit("--gt-timestamps is required for manual selection")
        ts = [float(v) for v in args.gt_timestamps.split(",")]
        out = manual_select(stack, ts)
    else:
        raise SystemExit(f"unknown mode {mode!r}")

    dump = {
        "mode": out.mode,
        "timestamp_encoding": "sinusoidal" if mode == "sinusoidal-ablation" else (
            "textual" if mode in ("soft", "hard") else None
        ),
        "relevance": [float(v) for v in out.relevance],
        "frame_indices": list(out.frame_indices) if out.frame_indices else None,
        "selected_shape": list(out.selected.shape),
        "selected": out.selected.tolist(),
    }
    text = json.dumps(dump, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote selection to {args.out}")
    else:
        print(text)
    return 0


def cmd_review_serve(args) -> int:
    import uvicorn

    from .review import CaptionerClient, MockCaptioner, ReviewStore
    from .review_api import create_app

    config = _load_config(args)
    port = _resolve(args, config, "port", 8008, int)
    store_dir = Path(_resolve(args, config, "store_dir", "./review-store", str))
    captioner_url = _resolve(args, config, "captioner_url", None, str)
    seed = _resolve(args, config, "seed", 0, int)
    static_dir = _resolve(args, config, "static_dir", None, str)
    if static_dir is None:
        candidate = Path("frontend/dist")
        static_dir = candidate if candidate.is_dir() else None

    store_dir.mkdir(parents=True, exist_ok=True)
    store = ReviewStore(log_path=store_dir / "events.jsonl", seed=seed)
    if captioner_url == "mock":
        captioner = MockCaptioner()
    elif captioner_url:
        captioner = CaptionerClient(captioner_url)
    else:
        captioner = None
    app = create_app(store, captioner=captioner, static_dir=static_dir)
    print(
        f"review server on port {port}, store {store_dir}, seed {seed}",
        file=sys.stderr,
    )
    try:
        uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
    finally:
        store.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenebench",
        description="Driving-scene QA toolkit: generation, evaluation, "
        "spatial codec, token selection, and the annotation review loop.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON config file (lowest-precedence options)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build QA pairs from a scenes directory")
    p.add_argument("--scenes", required=True, help="directory of <scene>.jsonl files")
    p.add_argument("--templates", help="template bank JSON (default: shipped bank)")
    p.add_argument("--out", required=True, help="output QA JSONL path")
    p.add_argument("--seed", type=int, help="generation seed (default 0)")
    p.add_argument("--tasks", help="comma-separated task filter (default: all)")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ground-truth", dest="ground_truth", required=True)
    p.add_argument("--out", help="report JSON path (default: stdout)")
    p.add_argument(
        "--families", help=f"comma-separated subset of {','.join(FAMILIES)}"
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "codec",
        help="encode xyz points to space tokens or decode tokens to cell centers",
    )
    p.add_argument("direction", choices=["encode", "decode"])
    p.add_argument(
        "values",
        nargs="*",
        help="coordinate or token triples; read from stdin when omitted",
    )
    _add_grid_flags(p)
    p.set_defaults(func=cmd_codec)

    p = sub.add_parser("select", help="run token selection over a stack file")
    p.add_argument("--stack", required=True, help="JSON stack file (data, timestamps)")
    p.add_argument("--params", required=True, help="token-bank checkpoint JSON")
    p.add_argument(
        "--mode",
        required=True,
        choices=["soft", "hard", "manual", "sinusoidal-ablation"],
    )
    p.add_argument("--prompt", help="prompt text (soft/hard modes)")
    p.add_argument("--n-frames", dest="n_frames", type=int, help="frames to pick (hard)")
    p.add_argument(
        "--gt-timestamps",
        dest="gt_timestamps",
        help="comma-separated ground-truth timestamps (manual)",
    )
    p.add_argument("--out", help="selection dump path (default: stdout)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("review-serve", help="run the annotation review server")
    p.add_argument("--port", type=int, help="listen port (default 8008)")
    p.add_argument("--store-dir", dest="store_dir", help="event-log directory")
    p.add_argument(
        "--captioner-url",
        dest="captioner_url",
        help="relabeling captioner endpoint, or 'mock' for the built-in one",
    )
    p.add_argument("--seed", type=int, help="sampling seed (default 0)")
    p.add_argument("--static-dir", dest="static_dir", help="built UI assets to serve")
    p.set_defaults(func=cmd_review_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, IdMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
