"""Per-iteration metrics rows, CSV serialization, and the run manifest.

The CSV column set is part of the external interface and is fixed:
iteration, simulated_time_s, per_node_storage_bytes, global_loss,
committed_blocks, rejected_blocks, evictions. Floats are written with
repr so a replayed run reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from typing import Optional

CSV_HEADER = ("iteration,simulated_time_s,per_node_storage_bytes,"
              "global_loss,committed_blocks,rejected_blocks,evictions")
MANIFEST_FORMAT = 1


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    simulated_time_s: float
    per_node_storage_bytes: int
    global_loss: float
    committed_blocks: int
    rejected_blocks: int
    evictions: int

    def as_csv(self) -> str:
        return (f"{self.iteration},{self.simulated_time_s!r},"
                f"{self.per_node_storage_bytes},{self.global_loss!r},"
                f"{self.committed_blocks},{self.rejected_blocks},"
                f"{self.evictions}")


def metrics_csv_text(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for row in rows:
        buf.write(row.as_csv() + "\n")
    return buf.getvalue()


def write_metrics_csv(rows: list[MetricsRow], path: str) -> str:
    """Write the rows; returns the sha256 digest of the file content."""
    text = metrics_csv_text(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode()).hexdigest()


def metrics_digest(rows: list[MetricsRow]) -> str:
    return hashlib.sha256(metrics_csv_text(rows).encode()).hexdigest()


def read_metrics_csv(path: str) -> list[MetricsRow]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    rows = []
    for line in lines[1:]:
        it, t, storage, loss, committed, rejected, evictions = line.split(",")
        rows.append(MetricsRow(
            iteration=int(it), simulated_time_s=float(t),
            per_node_storage_bytes=int(storage), global_loss=float(loss),
            committed_blocks=int(committed), rejected_blocks=int(rejected),
            evictions=int(evictions)))
    return rows


def build_manifest(config_dict: dict, *, trace_digest: str,
                   metrics_digest_hex: str, iterations_completed: int,
                   summary: Optional[dict] = None,
                   package_version: str = "0.1.0") -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "package_version": package_version,
        "config": config_dict,
        "trace_digest": trace_digest,
        "metrics_digest": metrics_digest_hex,
        "iterations_completed": iterations_completed,
        "summary": summary or {},
    }


def write_manifest(manifest: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unsupported manifest format")
    return manifest
