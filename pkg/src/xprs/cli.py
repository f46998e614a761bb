"""``xprs`` command line: run, compare and inspect."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .adapt import VARIANTS
from .config import ConfigError, RunConfig, load_config
from .memory import SnapshotError, memory_usage, restore, snapshot
from .metrics import MetricsWriter, write_summary
from .policy import save_checkpoint

log = logging.getLogger("xprs")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _setup_logging() -> None:
    name = os.environ.get("XPRS_LOG_LEVEL", "error").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"XPRS_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    return cfg, out


def _summary_event(writer: MetricsWriter, variant: str) -> dict:
    for ev in reversed(writer.events):
        if ev["kind"] == "summary" and ev["variant"] == variant:
            return {k: v for k, v in ev.items() if k not in ("schema", "kind")}
    raise RuntimeError(f"no summary for {variant}")


def cmd_run(args) -> int:
    from .experiment import prepare_world, run_variant

    cfg, out = _resolve(args)
    out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl")
    try:
        world = prepare_world(cfg)
        writer.emit("config", seed=cfg.seed, config=cfg.to_dict(),
                    encoder_checksum=world.encoder.checksum(),
                    base_checksum=world.policy.base_checksum())
        res = run_variant(world, "full", writer)
        summary = _summary_event(writer, "full")
        summary["encoder_checksum"] = world.encoder.checksum()
        summary["base_checksum"] = res.policy.base_checksum()
        snapshot(res.success_buf, res.failure_buf, world.encoder, out / "buffers.xprsbuf")
        save_checkpoint(res.policy, out / "policy.xprspol")
        write_summary(out / "summary.json", summary)
    except Exception as exc:
        log.error("run failed: %s", exc)
        print(f"xprs run: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        writer.flush()
        writer.close()
    print(json.dumps({k: summary[k] for k in ("pre_source", "pre_target", "post_source",
                                              "post_target", "cycles")}, sort_keys=True))
    return 0


def _table(rows: list[dict]) -> str:
    cols = ("variant", "pre_source", "post_source", "pre_target", "post_target", "source_drop", "cycles")
    lines = ["  ".join(f"{c:>14}" for c in cols)]
    for r in rows:
        cells = [f"{r[c]:>14.3f}" if isinstance(r[c], float) else f"{r[c]:>14}" for c in cols]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def cmd_compare(args) -> int:
    from .experiment import prepare_world, run_variant

    cfg, out = _resolve(args)
    variants = args.variant or list(VARIANTS)
    out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl")
    try:
        world = prepare_world(cfg)
        writer.emit("config", seed=cfg.seed, config=cfg.to_dict(), variants=variants)
        rows = []
        for v in variants:
            run_variant(world, v, writer)
            rows.append(_summary_event(writer, v))
        write_summary(out / "summary.json", {"seed": cfg.seed, "variants": rows})
    except Exception as exc:
        log.error("compare failed: %s", exc)
        print(f"xprs compare: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        writer.flush()
        writer.close()
    print(_table(rows))
    return 0


def inspect_snapshot(path, query: Optional[np.ndarray] = None, bins: int = 10) -> dict:
    """Buffer statistics of a snapshot file as a JSON-ready dict."""
    sbuf, fbuf, enc = restore(path)
    report = {"d_e": enc.d_e, "encoder_checksum": enc.checksum(),
              "memory_bytes": memory_usage([sbuf, fbuf]), "buffers": {}}
    for buf in (sbuf, fbuf):
        entries = buf.entries()
        last = max((e.stored_cycle for e in entries), default=0)
        ages = [last - e.stored_cycle for e in entries]
        hist: dict[str, int] = {}
        for a in ages:
            hist[str(a)] = hist.get(str(a), 0) + 1
        info = {"count": len(entries), "capacity": buf.capacity,
                "memory_bytes": memory_usage([buf]),
                "age_histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0])))}
        if query is not None and entries:
            sims = np.array([float(np.dot(e.embedding.astype(np.float64), query)) for e in entries])
            counts, edges = np.histogram(sims, bins=bins, range=(-1.0, 1.0))
            info["similarity"] = {"min": float(sims.min()), "max": float(sims.max()),
                                  "mean": float(sims.mean()), "histogram": counts.tolist(),
                                  "edges": [round(float(x), 6) for x in edges]}
        report["buffers"]["success" if buf.success else "failure"] = info
    return report


def cmd_inspect(args) -> int:
    query = None
    if args.query:
        try:
            query = np.load(args.query).astype(np.float64).ravel()
        except (OSError, ValueError) as exc:
            print(f"xprs inspect: cannot read query: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        report = inspect_snapshot(args.snapshot, query)
    except SnapshotError as exc:
        print(f"xprs inspect: corrupt snapshot ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"xprs inspect: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if query is not None and query.shape[0] != report["d_e"]:
        print(f"xprs inspect: query has {query.shape[0]} dims, snapshot has {report['d_e']}",
              file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xprs", description="Compressed experience replay experiments.")
    p.add_argument("--backend", action="store_true", help="print the kernel backend and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (default: config out_dir)")

    run = sub.add_parser("run", help="deploy the full method on the target domain")
    common(run)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run the full method, ablations and naive fine-tuning")
    common(cmp_)
    cmp_.add_argument("--variant", action="append", choices=VARIANTS,
                      help="restrict to these variants (repeatable)")
    cmp_.set_defaults(func=cmd_compare)

    ins = sub.add_parser("inspect", help="print buffer statistics of a snapshot")
    ins.add_argument("snapshot", help="path to a .xprsbuf snapshot")
    ins.add_argument("--query", help=".npy embedding for a similarity spectrum")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.backend:
        print(kernels.BACKEND)
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        _setup_logging()
        if args.command in ("run", "compare"):
            _resolve(args)  # validate before anything touches the filesystem
    except ConfigError as exc:
        print(f"xprs {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"xprs {args.command}: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
