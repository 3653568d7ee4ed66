"""Synthetic learning tasks and the model-side of distributed SGD.

Tasks are small least-squares or logistic-regression problems with exact
analytic gradients. Gradient payload size on the wire is configured
independently of the parameter dimension.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .aggregation import Gradient


@dataclass
class NodeShard:
    features: np.ndarray   # (m, d)
    targets: np.ndarray    # (m,)


@dataclass
class LearningTask:
    """A synthetic task with per-node data shards and a held-out oracle set."""

    kind: str                       # "least-squares" | "logistic"
    dimension: int
    shards: list[NodeShard]
    oracle_features: np.ndarray
    oracle_targets: np.ndarray
    true_params: np.ndarray         # harness-only ground truth

    def loss(self, params: np.ndarray,
             features: Optional[np.ndarray] = None,
             targets: Optional[np.ndarray] = None) -> float:
        x = self.oracle_features if features is None else features
        y = self.oracle_targets if targets is None else targets
        if self.kind == "least-squares":
            r = x @ params - y
            return float(0.5 * (r @ r) / len(y))
        z = x @ params
        # log(1 + exp(z)) - y*z, stably
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def gradient(self, params: np.ndarray, shard: NodeShard,
                 batch: Optional[np.ndarray] = None) -> np.ndarray:
        x, y = shard.features, shard.targets
        if batch is not None:
            x, y = x[batch], y[batch]
        if self.kind == "least-squares":
            return x.T @ (x @ params - y) / len(y)
        p = 1.0 / (1.0 + np.exp(-(x @ params)))
        return x.T @ (p - y) / len(y)


def make_task(kind: str, nodes: int, dimension: int, samples_per_node: int,
              seed_seq: np.random.SeedSequence, noise_std: float = 0.1,
              sharding: str = "iid", oracle_samples: int = 512) -> LearningTask:
    """Generate a task whose shards are iid or sorted by target value."""
    if kind not in ("least-squares", "logistic"):
        raise ValueError(f"unknown task kind {kind!r}")
    if sharding not in ("iid", "non-iid-by-label"):
        raise ValueError(f"unknown sharding mode {sharding!r}")
    rng = np.random.default_rng(seed_seq)
    w = rng.normal(0.0, 1.0, dimension)
    total = nodes * samples_per_node
    x = rng.normal(0.0, 1.0, (total + oracle_samples, dimension))
    if kind == "least-squares":
        y = x @ w + rng.normal(0.0, noise_std, total + oracle_samples)
    else:
        p = 1.0 / (1.0 + np.exp(-(x @ w)))
        y = (rng.random(total + oracle_samples) < p).astype(np.float64)
    xo, yo = x[total:], y[total:]
    x, y = x[:total], y[:total]
    if sharding == "non-iid-by-label":
        order = np.argsort(y, kind="stable")
        x, y = x[order], y[order]
    shards = [NodeShard(x[i * samples_per_node:(i + 1) * samples_per_node],
                        y[i * samples_per_node:(i + 1) * samples_per_node])
              for i in range(nodes)]
    return LearningTask(kind, dimension, shards, xo, yo, w)


@dataclass
class ModelState:
    """Version-tracked parameter vector with a content digest."""

    params: np.ndarray
    iteration: int = 0
    skipped_updates: int = 0

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.params.astype("<f8").tobytes())
        return h.hexdigest()


def local_gradient(task: LearningTask, model: ModelState, node_index: int,
                   payload_bytes: int, batch_size: Optional[int] = None,
                   batch_rng: Optional[np.random.Generator] = None) -> Gradient:
    """Exact gradient on the node's shard (or a seeded minibatch of it)."""
    shard = task.shards[node_index]
    batch = None
    if batch_size is not None and batch_size < len(shard.targets):
        if batch_rng is None:
            raise ValueError("batch_size requires a batch_rng")
        batch = batch_rng.choice(len(shard.targets), size=batch_size, replace=False)
        batch.sort()
    vec = task.gradient(model.params, shard, batch)
    return Gradient(values=vec, payload_bytes=payload_bytes,
                    origin=node_index, iteration=model.iteration)


def apply_update(model: ModelState, aggregated: np.ndarray, lr: float) -> bool:
    """params <- params - lr * aggregated; non-finite updates are skipped.

    Returns True when the update was applied. The iteration counter always
    advances so a skipped update is visible but does not stall the loop.
    """
    applied = bool(np.all(np.isfinite(aggregated)))
    if applied:
        model.params = model.params - lr * aggregated
    else:
        model.skipped_updates += 1
    model.iteration += 1
    return applied


def stable_learning_rate(task: LearningTask) -> float:
    """A safely convergent step size for the full-batch least-squares task."""
    x = np.concatenate([s.features for s in task.shards])
    hess = x.T @ x / len(x)
    lam = float(np.linalg.eigvalsh(hess)[-1])
    return 1.0 / (2.0 * lam) if lam > 0 else 0.1
