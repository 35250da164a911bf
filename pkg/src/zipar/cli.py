"""Command-line interface: plan / generate / compare / analyze / render.

Structured results go to ``--out`` (or stdout) as JSON or CSV; aligned
human-readable tables and one-line summaries go to stderr.  Identical run
configurations produce byte-identical output files.

Environment: ``ZIPAR_SEED`` supplies the default seed, ``ZIPAR_THREADS``
caps the worker pool used by ``compare``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis, engine
from .grid import GridShape, TokenGrid
from .model import LocalOracle, ToyTransformer
from .sampler import SamplerConfig
from .scheduler import plan_fixed


class UsageError(ValueError):
    """Invalid flag combination or value; maps to exit code 2."""


def _env_seed() -> int:
    try:
        return int(os.environ.get("ZIPAR_SEED", "0"))
    except ValueError:
        return 0


def _env_threads() -> int:
    try:
        return max(1, int(os.environ.get("ZIPAR_THREADS", "1")))
    except ValueError:
        return 1


def _parse_int_list(text: str) -> list[int]:
    """Parse '2,4,8' or '1..24' (inclusive range)."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _parse_grids(text: str) -> list[tuple[int, int]]:
    grids = []
    for item in text.split(","):
        if not item.strip():
            continue
        h, w = item.lower().split("x", 1)
        grids.append((int(h), int(w)))
    if not grids:
        raise UsageError("no grids given")
    return grids


def _write_output(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _dump_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ": ")) + "\n"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def _build_shape(args) -> GridShape:
    eor = bool(args.eor)
    eor_id = None
    if eor:
        eor_id = args.eor_token_id
        if eor_id is None:
            eor_id = args.vocab - 1
    prefix = _parse_prefix(args)
    return GridShape(rows=args.rows, cols=args.cols, prefix_len=len(prefix),
                     eor=eor, vocab_size=args.vocab, eor_token_id=eor_id)


def _parse_prefix(args) -> tuple[int, ...]:
    if getattr(args, "prefix", None):
        return tuple(int(t) for t in str(args.prefix).split(","))
    return ()


def _build_backend(args, shape: GridShape):
    if args.backend == "toy":
        return ToyTransformer(vocab_size=args.vocab,
                              max_positions=shape.raster_len,
                              seed=args.backend_seed)
    if args.backend == "oracle":
        return LocalOracle(vocab_size=args.vocab, radius=args.radius,
                           seed=args.backend_seed)
    raise UsageError(f"unknown backend {args.backend!r}")


def _build_sampler(args) -> SamplerConfig:
    return SamplerConfig(temperature=args.temperature, top_k=args.top_k,
                         top_p=args.top_p, cfg_scale=args.cfg_scale)


def _add_shape_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--eor", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--eor-token-id", type=int, default=None)
    p.add_argument("--vocab", type=int, default=None)


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("toy", "oracle"), default=None)
    p.add_argument("--backend-seed", type=int, default=None)
    p.add_argument("--radius", type=int, default=None,
                   help="locality radius for the oracle backend")


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)


_DEFAULTS = {
    "eor": False,
    "vocab": 256,
    "backend": "toy",
    "backend_seed": 0,
    "radius": 1,
    "temperature": 1.0,
    "top_k": 0,
    "top_p": 1.0,
    "cfg_scale": 0.0,
    "window": None,
    "min_window": None,
    "prefix": None,
    "eor_token_id": None,
}


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge precedence: explicit flags > config file > defaults."""
    config = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
    for key, value in config.items():
        key = key.replace("-", "_")
        if not hasattr(args, key):
            raise UsageError(f"config key {key!r} matches no flag")
        if getattr(args, key) is None:
            setattr(args, key, value)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = config.get("seed", _env_seed())
    for key, value in _DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    return args


def _summary(line: str) -> None:
    sys.stderr.write(line + "\n")


def _aligned_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths))
             for row in cells]
    return "\n".join(lines) + "\n"


# ---- subcommands ---------------------------------------------------------

def _cmd_plan(args) -> int:
    shape = _build_shape(args)
    _require(args.window is not None, "plan requires --window")
    _require(1 <= args.window <= shape.cols,
             f"--window must lie in [1, {shape.cols}]")
    plan = plan_fixed(shape, args.window)
    doc = {
        "seed": args.seed,
        "rows": shape.rows,
        "cols": shape.cols,
        "eor": shape.eor,
        "window": args.window,
        "decode_step": plan.decode_step.tolist(),
        "total_steps": plan.total_steps,
        "max_batch_width": plan.max_batch_width,
        "ntp_steps": shape.ntp_step_count(),
    }
    _write_output(_dump_json(doc), args.out)
    rows = []
    for s in range(1, shape.cols + 1):
        p = plan_fixed(shape, s)
        red = 100.0 * (1.0 - p.total_steps / shape.ntp_step_count())
        rows.append([s, p.total_steps, p.max_batch_width, f"{red:.1f}%"])
    sys.stderr.write(_aligned_table(
        ["window", "steps", "max_lanes", "reduction"], rows))
    _summary(f"total_steps={plan.total_steps} "
             f"reduction={100.0 * (1.0 - plan.total_steps / shape.ntp_step_count()):.1f}% "
             f"max_lanes={plan.max_batch_width}")
    return 0


def _cmd_generate(args) -> int:
    mode = args.mode
    if mode == "ntp":
        _require(args.window is None and args.min_window is None,
                 "--window/--min-window are meaningless with --mode ntp; "
                 "drop them or pick --mode fixed/adaptive")
        window = None
    elif mode == "fixed":
        _require(args.window is not None,
                 "--mode fixed requires --window")
        _require(args.min_window is None,
                 "--min-window belongs to --mode adaptive; use --window")
        window = args.window
    else:
        _require(args.min_window is not None,
                 "--mode adaptive requires --min-window")
        _require(args.window is None,
                 "--window belongs to --mode fixed; use --min-window")
        window = args.min_window
    shape = _build_shape(args)
    backend = _build_backend(args, shape)
    sampler = _build_sampler(args)
    prefix = _parse_prefix(args)
    result = engine.generate(mode, shape, backend, sampler, args.seed,
                             window=window, prefix_tokens=prefix)
    result.check_step_log()
    _write_output(result.grid.to_json(), args.out)
    if args.log:
        doc = result.step_log_doc()
        doc["backend"] = backend.provenance()
        doc["sampler"] = {
            "temperature": sampler.temperature,
            "top_k": sampler.top_k,
            "top_p": sampler.top_p,
            "cfg_scale": sampler.cfg_scale,
        }
        _write_output(_dump_json(doc), args.log)
    ntp = shape.ntp_step_count()
    _summary(f"mode={mode} steps={result.steps} "
             f"reduction={100.0 * (1.0 - result.steps / ntp):.1f}% "
             f"accepts={result.accepts} rejects={result.rejects} "
             f"seed={args.seed}")
    return 0


def _cmd_compare(args) -> int:
    shape = _build_shape(args)
    backend = _build_backend(args, shape)
    sampler = _build_sampler(args)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    for m in modes:
        _require(m in ("fixed", "adaptive"), f"unknown compare mode {m!r}")
    windows = _parse_int_list(args.windows)
    seeds = _parse_int_list(args.seeds)
    prefix = _parse_prefix(args)

    def one_seed(seed: int) -> dict:
        return engine.equivalence_report(shape, backend, sampler, windows,
                                         [seed], modes=modes,
                                         prefix_tokens=prefix)

    workers = min(_env_threads(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one_seed, seeds))
    else:
        parts = [one_seed(s) for s in seeds]
    entries = [e for part in parts for e in part["entries"]]
    summary = []
    for mode in modes:
        for s in windows:
            sel = [e for e in entries
                   if e["mode"] == mode and e["window"] == s]
            summary.append({
                "mode": mode,
                "window": s,
                "mean_agreement": float(np.mean([e["agreement"] for e in sel])),
                "mean_tv": float(np.mean([e["mean_tv"] for e in sel])),
                "mean_steps": float(np.mean([e["steps"] for e in sel])),
            })
    report = {
        "seed": seeds[0],
        "seeds": seeds,
        "shape": parts[0]["shape"],
        "entries": entries,
        "summary": summary,
    }
    _write_output(_dump_json(report), args.out)
    rows = [[r["mode"], r["window"], f"{r['mean_steps']:.1f}",
             f"{r['mean_agreement']:.3f}", f"{r['mean_tv']:.5f}"]
            for r in summary]
    sys.stderr.write(_aligned_table(
        ["mode", "window", "steps", "agreement", "mean_tv"], rows))
    _summary(f"compared modes={','.join(modes)} windows={args.windows} "
             f"seeds={len(seeds)}")
    return 0


def _cmd_analyze_attention(args) -> int:
    _require(args.backend == "toy",
             "attention analysis needs a backend that exposes attention "
             "(--backend toy)")
    shape = _build_shape(args)
    backend = _build_backend(args, shape)
    records = analysis.collect_attention(backend, shape, args.seed,
                                         _build_sampler(args),
                                         _parse_prefix(args))
    lines = [f"# seed={args.seed} retain={args.retain}", "row,min_window"]
    for rec in records:
        s = analysis.min_window_for_mass(rec, shape, args.retain)
        lines.append(f"{rec.query.row},{s}")
    _write_output("\n".join(lines) + "\n", args.out)
    _summary(f"analyzed {len(records)} row-start queries at "
             f"retain={args.retain}")
    return 0


def _cmd_analyze_steps(args) -> int:
    grids = _parse_grids(args.grids)
    windows = _parse_int_list(args.windows)
    table = analysis.step_table(grids, windows, bool(args.eor))
    lines = [f"# seed={args.seed}",
             "rows,cols,window,fixed_steps,ntp_steps,reduction_pct"]
    for r in table:
        lines.append(f"{r['rows']},{r['cols']},{r['window']},"
                     f"{r['fixed_steps']},{r['ntp_steps']},"
                     f"{r['reduction_pct']:.1f}")
    _write_output("\n".join(lines) + "\n", args.out)
    sys.stderr.write(_aligned_table(
        ["rows", "cols", "window", "fixed", "ntp", "reduction"],
        [[r["rows"], r["cols"], r["window"], r["fixed_steps"],
          r["ntp_steps"], f"{r['reduction_pct']:.1f}%"] for r in table]))
    _summary(f"{len(table)} schedule rows")
    return 0


def _cmd_render(args) -> int:
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid = TokenGrid.from_json(fh.read())
    header = f"P5\n{grid.cols} {grid.rows}\n255\n".encode("ascii")
    pixels = bytes(t % 256 for t in grid.tokens)
    with open(args.output, "wb") as fh:
        fh.write(header + pixels)
    _summary(f"rendered {grid.cols}x{grid.rows} grid to {args.output}")
    return 0


# ---- parser wiring -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zipar",
        description="Wavefront-parallel decoding over raster-order token grids")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file whose keys mirror flags; flags win")
        p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("plan", help="fixed-window schedule arithmetic")
    _add_shape_flags(p)
    p.add_argument("--window", type=int, default=None)
    common(p)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("generate", help="run one generation")
    p.add_argument("--mode", choices=("ntp", "fixed", "adaptive"),
                   required=True)
    _add_shape_flags(p)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--min-window", type=int, default=None)
    p.add_argument("--prefix", type=str, default=None,
                   help="comma-separated conditioning token ids")
    _add_backend_flags(p)
    _add_sampler_flags(p)
    common(p)
    p.add_argument("--log", type=str, default=None,
                   help="write the step log JSON here")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("compare", help="coupled-randomness equivalence report")
    _add_shape_flags(p)
    p.add_argument("--modes", type=str, default="fixed")
    p.add_argument("--windows", type=str, required=True)
    p.add_argument("--seeds", type=str, required=True)
    p.add_argument("--prefix", type=str, default=None)
    _add_backend_flags(p)
    _add_sampler_flags(p)
    common(p)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("analyze", help="attention locality / step tables")
    asub = p.add_subparsers(dest="analysis", required=True)

    pa = asub.add_parser("attention")
    _add_shape_flags(pa)
    pa.add_argument("--retain", type=float, default=0.95)
    pa.add_argument("--prefix", type=str, default=None)
    _add_backend_flags(pa)
    _add_sampler_flags(pa)
    common(pa)
    pa.set_defaults(func=_cmd_analyze_attention)

    ps = asub.add_parser("steps")
    ps.add_argument("--grids", type=str, required=True,
                    help="e.g. 24x24,32x32,48x48")
    ps.add_argument("--windows", type=str, required=True,
                    help="e.g. 1..24 or 2,4,8")
    ps.add_argument("--eor", action=argparse.BooleanOptionalAction,
                    default=None)
    common(ps)
    ps.set_defaults(func=_cmd_analyze_steps)

    p = sub.add_parser("render", help="token grid JSON to binary PGM")
    p.add_argument("grid")
    p.add_argument("output")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=str, default=None)
    p.set_defaults(func=_cmd_render)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _resolve(args)
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
