"""Command line front end: single runs, sweeps, and report tables.

Exit codes: 0 on success, 2 on configuration errors (message names the
offending field), 3 when a run was truncated at the simulation horizon
without completing its iterations (a liveness failure in the configured
scenario).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .baseline import run_learningchain
from .config import ConfigError, RunConfig, load_config, load_config_file
from .engine import RunResult, run_pirate
from .metrics import (CSV_HEADER, build_manifest, read_manifest,
                      write_manifest, write_metrics_csv)

SUMMARY_HEADER = ("protocol,nodes,committee_size,payload_mb,seed,iterations,"
                  "mean_iteration_time_s,final_storage_bytes,final_loss,"
                  "trace_digest")


def execute(cfg: RunConfig) -> RunResult:
    if cfg.protocol == "pirate":
        return run_pirate(cfg)
    return run_learningchain(cfg)


def _summarize(result: RunResult) -> dict:
    rows = result.rows
    mean_iter = (sum(result.iteration_times) / len(result.iteration_times)
                 if result.iteration_times else 0.0)
    return {
        "final_loss": result.final_loss,
        "mean_iteration_time_s": mean_iter,
        "final_storage_bytes": rows[-1].per_node_storage_bytes if rows else 0,
        "committed_payload_blocks": result.committed_payload_blocks,
        "timeouts_fired": result.timeouts_fired,
        "fallback_queries": result.fallback_queries,
        "qc_conflicts": result.qc_conflicts,
        "falsified_commits": result.falsified_commits,
        "evictions_total": result.evictions_total,
    }


def write_run_artifacts(result: RunResult, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = write_metrics_csv(result.rows, str(out_dir / "metrics.csv"))
    manifest = build_manifest(result.config.to_dict(),
                              trace_digest=result.trace_digest,
                              metrics_digest_hex=digest,
                              iterations_completed=len(result.rows),
                              summary=_summarize(result))
    write_manifest(manifest, str(out_dir / "manifest.json"))
    return manifest


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config_file(args.config)
    if args.seed is not None:
        cfg = load_config({**cfg.to_dict(), "seed": args.seed})
    result = execute(cfg)
    out_dir = Path(args.out)
    manifest = write_run_artifacts(result, out_dir)
    summary = manifest["summary"]
    print(f"protocol={cfg.protocol} nodes={cfg.nodes} "
          f"committee_size={cfg.committee_size} seed={cfg.seed}")
    print(f"iterations_completed={manifest['iterations_completed']} "
          f"of {cfg.iterations}")
    print(f"mean_iteration_time_s={summary['mean_iteration_time_s']:.3f} "
          f"final_storage_bytes={summary['final_storage_bytes']} "
          f"final_loss={summary['final_loss']:.6g}")
    print(f"trace_digest={manifest['trace_digest']}")
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'manifest.json'}")
    if args.verify_manifest:
        reference = read_manifest(args.verify_manifest)
        same = (reference["trace_digest"] == manifest["trace_digest"]
                and reference["metrics_digest"] == manifest["metrics_digest"])
        print("replay match" if same else "replay MISMATCH")
        if not same:
            return 1
    if result.truncated or len(result.rows) < cfg.iterations:
        print("run truncated before completing all iterations",
              file=sys.stderr)
        return 3
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    base = load_config_file(args.config)
    nodes_list = ([int(x) for x in args.nodes.split(",")]
                  if args.nodes else [base.nodes])
    protocols = (args.protocols.split(",") if args.protocols
                 else [base.protocol])
    seeds = ([int(x) for x in args.seeds.split(",")]
             if args.seeds else [base.seed])
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    lines = [SUMMARY_HEADER]
    status = 0
    for protocol in protocols:
        for nodes in nodes_list:
            for seed in seeds:
                data = base.to_dict()
                data.update(protocol=protocol, nodes=nodes, seed=seed)
                cfg = load_config(data)
                result = execute(cfg)
                run_dir = out_root / f"{protocol}-n{nodes}-s{seed}"
                manifest = write_run_artifacts(result, run_dir)
                s = manifest["summary"]
                lines.append(
                    f"{protocol},{nodes},{cfg.committee_size},"
                    f"{cfg.payload_mb!r},{seed},"
                    f"{manifest['iterations_completed']},"
                    f"{s['mean_iteration_time_s']!r},"
                    f"{s['final_storage_bytes']},{s['final_loss']!r},"
                    f"{manifest['trace_digest']}")
                print(f"{protocol} n={nodes} seed={seed}: "
                      f"mean_iter={s['mean_iteration_time_s']:.2f}s "
                      f"storage={s['final_storage_bytes']} "
                      f"loss={s['final_loss']:.4g}")
                if result.truncated or len(result.rows) < cfg.iterations:
                    status = 3
    (out_root / "summary.csv").write_text("\n".join(lines) + "\n",
                                          encoding="utf-8")
    print(f"wrote {out_root / 'summary.csv'}")
    return status


def _load_summary(runs_dir: Path) -> list[dict]:
    summary_path = runs_dir / "summary.csv"
    records: list[dict] = []
    if summary_path.exists():
        with summary_path.open(newline="", encoding="utf-8") as fh:
            records = list(csv.DictReader(fh))
        return records
    for manifest_path in sorted(runs_dir.glob("*/manifest.json")):
        manifest = read_manifest(manifest_path)
        cfg = manifest["config"]
        s = manifest["summary"]
        records.append({
            "protocol": cfg["protocol"], "nodes": str(cfg["nodes"]),
            "committee_size": str(cfg["committee_size"]),
            "payload_mb": str(cfg["payload_mb"]), "seed": str(cfg["seed"]),
            "iterations": str(manifest["iterations_completed"]),
            "mean_iteration_time_s": str(s["mean_iteration_time_s"]),
            "final_storage_bytes": str(s["final_storage_bytes"]),
            "final_loss": str(s["final_loss"]),
            "trace_digest": manifest["trace_digest"]})
    return records


def cmd_report(args: argparse.Namespace) -> int:
    runs_dir = Path(args.runs)
    records = _load_summary(runs_dir)
    if not records:
        print(f"no runs found under {runs_dir}", file=sys.stderr)
        return 1
    cols = ("protocol", "nodes", "committee_size", "payload_mb",
            "mean_iteration_time_s", "final_storage_bytes", "final_loss")
    widths = {c: max(len(c), *(len(r[c]) for r in records)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in sorted(records, key=lambda r: (r["protocol"], int(r["nodes"]))):
        print("  ".join(r[c].ljust(widths[c]) for c in cols))
    if args.plots:
        _write_plots(runs_dir, records)
    return 0


def _write_plots(runs_dir: Path, records: list[dict]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_protocol: dict[str, list[dict]] = {}
    for r in records:
        by_protocol.setdefault(r["protocol"], []).append(r)

    fig, ax = plt.subplots(figsize=(6, 4))
    for protocol, recs in sorted(by_protocol.items()):
        recs = sorted(recs, key=lambda r: int(r["nodes"]))
        ax.plot([int(r["nodes"]) for r in recs],
                [float(r["mean_iteration_time_s"]) for r in recs],
                marker="o", label=protocol)
    ax.set_xlabel("nodes")
    ax.set_ylabel("mean iteration time (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(runs_dir / "iteration_time.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for manifest_path in sorted(runs_dir.glob("*/metrics.csv")):
        label = manifest_path.parent.name
        iters, storage = [], []
        with manifest_path.open(encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != CSV_HEADER:
                continue
            for line in fh:
                parts = line.strip().split(",")
                iters.append(int(parts[0]))
                storage.append(int(parts[2]) / 1e6)
        if iters:
            ax.plot(iters, storage, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("per-node storage (MB)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(runs_dir / "storage.png", dpi=120)
    plt.close(fig)
    print(f"wrote {runs_dir / 'iteration_time.png'} "
          f"and {runs_dir / 'storage.png'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="piratesim",
        description="Sharded blockchain-protected SGD simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="out-run")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--verify-manifest", default=None,
                       help="compare digests against an earlier manifest")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid over nodes/protocols")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--nodes", default=None,
                         help="comma-separated node counts")
    p_sweep.add_argument("--protocols", default=None,
                         help="comma-separated protocol names")
    p_sweep.add_argument("--seeds", default=None,
                         help="comma-separated seeds")
    p_sweep.add_argument("--out", default="out-sweep")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="tabulate and plot sweep output")
    p_report.add_argument("--runs", required=True)
    p_report.add_argument("--plots", action="store_true")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
