"""Command-line entry point: ``chunkkv <subcommand> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from pathlib import Path

import numpy as np

from chunkkv.bench.harness import bench_e2e, bench_kernel, build_batch
from chunkkv.bench.report import FORMATS, report
from chunkkv.bench.roofline import PUBLISHED_ATTENTION, estimate_roofline
from chunkkv.bench.verify import run_verify
from chunkkv.config import ModelConfig
from chunkkv.engine import EngineConfig
from chunkkv.kvcache import dump_dot, dump_text
from chunkkv.synth import hash_combine
from chunkkv.workload import WorkloadSpec

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE = 0, 1, 2

# option dest -> (type, built-in default)
DEFAULTS = {
    "heads": (int, 4),
    "head_dim": (int, 64),
    "chunk": (int, 64),
    "batch": (int, 32),
    "prompt": (int, 1024),
    "shared": (int, 0),
    "completion": (int, 64),
    "lam": (float, math.inf),
    "requests": (int, 32),
    "prompt_pool": (int, 1),
    "mode": (str, None),
    "seed": (int, 0),
    "format": (str, "table"),
    "repeats": (int, 5),
    "workers": (int, None),
    "clock": (str, "wall"),
    "cases": (int, 1000),
    "bytes": (int, 2),
}

# config-file key aliases
CONFIG_KEYS = {"h": "heads", "d": "head_dim", "c": "chunk", "b_max": "batch", "lambda": "lam", "n_p": "prompt",
               "n_s": "shared", "n_c": "completion"}


class UsageError(Exception):
    pass


def _float(raw: str) -> float:
    return float(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkkv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *groups: str) -> None:
        p.add_argument("--config", type=Path, help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--format", choices=FORMATS)
        p.add_argument("--out", type=Path)
        if "model" in groups:
            p.add_argument("--heads", type=int)
            p.add_argument("--head-dim", type=int)
            p.add_argument("--chunk", type=int)
        if "shape" in groups:
            p.add_argument("--batch", type=int)
            p.add_argument("--prompt", type=int)
            p.add_argument("--shared", type=int)
            p.add_argument("--completion", type=int)
        if "run" in groups:
            p.add_argument("--mode", choices=("shared", "monolithic"))
            p.add_argument("--repeats", type=int)
            p.add_argument("--workers", type=int)

    p = sub.add_parser("verify", help="oracle-equivalence property suite")
    common(p)
    p.add_argument("--cases", type=int)

    p = sub.add_parser("bench-kernel", help="lockstep attention kernel benchmark")
    common(p, "model", "shape", "run")

    p = sub.add_parser("bench-e2e", help="Poisson-arrival end-to-end run, both storage modes")
    common(p, "model", "shape", "run")
    p.add_argument("--lambda", dest="lam", type=_float)
    p.add_argument("--requests", type=int)
    p.add_argument("--prompt-pool", type=int)
    p.add_argument("--clock", choices=("wall", "virtual"))

    p = sub.add_parser("roofline", help="analytic FLOPs/MOPs of decode self-attention")
    common(p, "model", "shape")
    p.add_argument("--bytes", type=int, help="bytes per element (default 2)")

    p = sub.add_parser("dump-tree", help="text or graphviz dump of a prefix tree")
    common(p, "model", "shape")
    p.add_argument("--mode", choices=("shared", "monolithic"))
    p.add_argument("--graph", action="store_true", help="emit graphviz instead of text")
    return parser


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    text = path.read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser()
    cp.read_string(text)
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            key = key.replace("-", "_")
            dest = CONFIG_KEYS.get(key, key)
            if dest not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r} in {path}")
            cast = DEFAULTS[dest][0]
            out[dest] = cast(raw)
    return out


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    cfg = _load_config(getattr(args, "config", None))
    args.explicit = {d for d in DEFAULTS if getattr(args, d, None) is not None} | set(cfg)
    for dest, (_, default) in DEFAULTS.items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, cfg.get(dest, default))
    return args


def _model(args) -> ModelConfig:
    return ModelConfig(args.heads, args.head_dim, args.chunk)


def _emit(args, rows: list[dict], columns=None) -> None:
    text = report(rows, args.format, args.out, columns)
    if args.out is None:
        sys.stdout.write(text)


def cmd_verify(args) -> int:
    rep = run_verify(args.cases, args.seed)
    print(f"passed={rep.passed} failed={rep.failed} max_rel_err={rep.max_rel_err:.3e}")
    for case, err in rep.failures[:10]:
        print(f"  FAIL rel_err={err:.3e} {case}")
    return EXIT_OK if rep.ok else EXIT_VERIFY_FAILED


def cmd_bench_kernel(args) -> int:
    modes = (args.mode,) if args.mode else ("shared", "monolithic")
    results = bench_kernel(
        _model(args), args.batch, args.prompt, args.shared, args.completion,
        modes=modes, repeats=args.repeats, workers=args.workers, seed=args.seed,
    )
    rows = [r.record() for r in results]
    base = {r.mode: r.token_rate for r in results}.get("monolithic")
    for row in rows:
        row["speedup"] = row["token_rate"] / base if base else float("nan")
    _emit(args, rows)
    return EXIT_OK


def cmd_bench_e2e(args) -> int:
    spec = WorkloadSpec(
        lam=args.lam, request_count=args.requests, n_p=args.prompt, n_s=args.shared,
        n_c=args.completion, prompt_pool=args.prompt_pool, seed=args.seed,
    )
    cfg = EngineConfig(
        model=_model(args), max_batch_size=args.batch, seed=args.seed, clock=args.clock, workers=args.workers,
    )
    cmp = bench_e2e(spec, cfg)
    rows = cmp.rows()
    if args.mode:
        rows = [r for r in rows if r["mode"] == args.mode]
    _emit(args, rows)
    return EXIT_OK


def cmd_roofline(args) -> int:
    explicit = bool(args.explicit & {"batch", "heads", "prompt", "head_dim"})
    if explicit:
        shapes = [(args.batch, args.heads, args.prompt, args.head_dim)]
    else:
        # the published Llama2-7B configuration
        shapes = [(b, 32, 2048, 128) for b in sorted(PUBLISHED_ATTENTION)]
    rows = []
    for b, h, n, d in shapes:
        est = estimate_roofline(b, h, n, d, args.bytes)
        row = {"batch": b, "heads": h, "context": n, "head_dim": d, "bytes_per_element": args.bytes,
               "flops": est.flops, "mops": est.mops, "intensity": est.arithmetic_intensity}
        ref = PUBLISHED_ATTENTION.get(b) if not explicit else None
        row["ref_flops"] = ref["flops"] if ref else ""
        row["ref_mops"] = ref["mops"] if ref else ""
        rows.append(row)
    _emit(args, rows)
    return EXIT_OK


def cmd_dump_tree(args) -> int:
    mode = args.mode or "shared"
    tree, model, seq_ids, _ = build_batch(_model(args), args.batch, args.prompt, args.shared, mode, args.seed)
    for step in range(args.completion):
        toks = hash_combine(np.uint64(args.seed), np.arange(len(seq_ids), dtype=np.uint64), np.uint64(step))
        toks = (toks % np.uint64(32000)).astype(np.int64)
        _, k, v = model.qkv(toks, np.full(len(seq_ids), args.prompt + step))
        for i, sid in enumerate(seq_ids):
            tree.append_token(sid, int(toks[i]), k[i], v[i])
    text = dump_dot(tree) if args.graph else dump_text(tree)
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "bench-kernel": cmd_bench_kernel,
    "bench-e2e": cmd_bench_e2e,
    "roofline": cmd_roofline,
    "dump-tree": cmd_dump_tree,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _resolve(args)
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, configparser.Error, OSError) as exc:
        print(f"chunkkv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
