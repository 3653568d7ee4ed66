"""Gradient container and byzantine-tolerant aggregation rules.

All aggregators are pure functions of their inputs. A module-level
distance counter instruments how many vector-distance evaluations each
rule performs, so tests can witness the O(n^2) cost of Krum against the
O(n) cost of the cosine and anomaly-score rules.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DistanceCounter:
    """Counts distance evaluations; test instrumentation only."""

    def __init__(self) -> None:
        self.count = 0

    def reset(self) -> None:
        self.count = 0

    def add(self, n: int = 1) -> None:
        self.count += n


DISTANCE_COUNTER = DistanceCounter()


@dataclass(frozen=True)
class Gradient:
    """Fixed-dimension real vector with a declared wire/storage byte size.

    payload_bytes is the simulated size of the serialized gradient and is
    deliberately decoupled from the vector dimension.
    """

    values: np.ndarray
    payload_bytes: int
    origin: object = None
    iteration: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("gradient must be a non-empty 1-d vector")
        if self.payload_bytes <= 0:
            raise ValueError("payload_bytes must be positive")

    @property
    def dimension(self) -> int:
        return int(self.values.size)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.values.tobytes())
        h.update(str(self.iteration).encode())
        h.update(str(self.origin).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class AggregatorSpec:
    """Aggregation rule plus its parameters."""

    kind: str                       # mean | krum | multi-krum | l-nearest | detection-weighted
    f: int = 0                      # assumed byzantine count (krum family)
    m: int = 1                      # multi-krum selection size
    l: int = 1                      # l-nearest selection size
    detection_threshold: float = 3.0

    KINDS = ("mean", "krum", "multi-krum", "l-nearest", "detection-weighted")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown aggregator kind {self.kind!r}")


@dataclass
class AggregationResult:
    """Aggregated gradient plus per-input weights and fallback flags."""

    gradient: Gradient
    weights: Optional[np.ndarray] = None
    selected: Optional[list[int]] = None
    fallback: Optional[str] = None


def _stack(gradients: Sequence[Gradient]) -> np.ndarray:
    if not gradients:
        raise ValueError("aggregation requires at least one gradient")
    dims = {g.dimension for g in gradients}
    if len(dims) != 1:
        raise ValueError(f"mixed gradient dimensions {sorted(dims)}")
    return np.stack([g.values for g in gradients])


def _result_gradient(values: np.ndarray, gradients: Sequence[Gradient]) -> Gradient:
    return Gradient(values=values,
                    payload_bytes=max(g.payload_bytes for g in gradients),
                    origin="aggregate",
                    iteration=gradients[0].iteration)


def mean(gradients: Sequence[Gradient],
         counts: Optional[Sequence[int]] = None) -> Gradient:
    """Coordinate-wise mean, optionally count-weighted.

    counts give the number of raw gradients already folded into each input,
    so a chain of partial means reproduces the flat mean of all leaves.
    """
    mat = _stack(gradients)
    if counts is None:
        out = mat.mean(axis=0)
    else:
        w = np.asarray(counts, dtype=np.float64)
        if w.shape[0] != mat.shape[0] or np.any(w <= 0):
            raise ValueError("counts must be positive, one per gradient")
        out = (mat * w[:, None]).sum(axis=0) / w.sum()
    return _result_gradient(out, gradients)


def _sq_dist(a: np.ndarray, b: np.ndarray) -> float:
    DISTANCE_COUNTER.add()
    d = a - b
    return float(d @ d)


def krum_scores(gradients: Sequence[Gradient], f: int) -> np.ndarray:
    """Krum score: sum of squared distances to the n-f-2 nearest others."""
    n = len(gradients)
    k = n - f - 2
    if k < 1:
        raise ValueError(f"krum requires n - f - 2 >= 1, got n={n}, f={f}")
    mat = _stack(gradients)
    dists = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dists[i, j] = dists[j, i] = _sq_dist(mat[i], mat[j])
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(dists[i], i)
        others.sort()
        scores[i] = others[:k].sum()
    return scores


def krum(gradients: Sequence[Gradient], f: int) -> Gradient:
    """Return the input with the lowest Krum score (lowest index on ties)."""
    scores = krum_scores(gradients, f)
    return gradients[int(np.argmin(scores))]


def multi_krum(gradients: Sequence[Gradient], f: int, m: int) -> Gradient:
    """Mean of the m lowest-scored inputs (index order breaks ties)."""
    n = len(gradients)
    if not 1 <= m <= n:
        raise ValueError(f"multi-krum requires 1 <= m <= n, got m={m}, n={n}")
    scores = krum_scores(gradients, f)
    chosen = np.argsort(scores, kind="stable")[:m]
    return mean([gradients[int(i)] for i in chosen])


def l_nearest(gradients: Sequence[Gradient], l: int) -> AggregationResult:
    """Mean of the l inputs with smallest cosine distance to the input sum.

    Cosine distance is 1 - g.s / (|g||s|); a zero-norm gradient is assigned
    the maximal distance 2. A zero-norm sum leaves the ranking undefined, so
    the rule falls back to the mean of all inputs and flags the result.
    """
    n = len(gradients)
    if not 1 <= l <= n:
        raise ValueError(f"l-nearest requires 1 <= l <= n, got l={l}, n={n}")
    mat = _stack(gradients)
    s = mat.sum(axis=0)
    s_norm = float(np.linalg.norm(s))
    if s_norm == 0.0:
        return AggregationResult(mean(gradients), fallback="zero-norm-sum")
    dists = np.empty(n)
    for i in range(n):
        DISTANCE_COUNTER.add()
        g_norm = float(np.linalg.norm(mat[i]))
        if g_norm == 0.0:
            dists[i] = 2.0
        else:
            dists[i] = 1.0 - float(mat[i] @ s) / (g_norm * s_norm)
    chosen = np.argsort(dists, kind="stable")[:l]
    chosen_list = sorted(int(i) for i in chosen)
    out = mean([gradients[i] for i in chosen_list])
    return AggregationResult(out, selected=chosen_list)


def anomaly_score(gradient: Gradient, peers: Sequence[Gradient]) -> float:
    """Robust z-score of a gradient against a peer population.

    Score = ||g - median(peers)|| / (1.4826 * MAD + 1e-12) where the median
    is coordinate-wise and MAD is the median of the peers' distances to it.
    """
    if not peers:
        raise ValueError("anomaly_score requires at least one peer")
    mat = _stack(list(peers))
    center = np.median(mat, axis=0)
    DISTANCE_COUNTER.add()
    dist = float(np.linalg.norm(gradient.values - center))
    peer_dists = np.empty(len(peers))
    for i in range(mat.shape[0]):
        DISTANCE_COUNTER.add()
        peer_dists[i] = np.linalg.norm(mat[i] - center)
    mad = float(np.median(peer_dists))
    return dist / (1.4826 * mad + 1e-12)


def pooled_median_scores(mat: np.ndarray) -> np.ndarray:
    """Default detector: robust z-scores against the pooled median/MAD.

    One shared center keeps the distance count at Theta(n); a per-input
    leave-one-out median would square it.
    """
    center = np.median(mat, axis=0)
    dists = np.empty(mat.shape[0])
    for i in range(mat.shape[0]):
        DISTANCE_COUNTER.add()
        dists[i] = np.linalg.norm(mat[i] - center)
    mad = float(np.median(dists))
    return dists / (1.4826 * mad + 1e-12)


def detection_weighted(gradients: Sequence[Gradient], threshold: float = 3.0,
                       detector: Optional[Callable[[np.ndarray], np.ndarray]] = None
                       ) -> AggregationResult:
    """Anomaly-score-weighted mean.

    weight_i = 0 if score_i > threshold else 1 / (1 + score_i), renormalized.
    If every weight is zero the rule falls back to the coordinate-wise median
    of all inputs and flags the result. The detector is pluggable; the default
    scores each input against the pooled median/MAD of the whole set.
    """
    mat = _stack(gradients)
    scores = (detector or pooled_median_scores)(mat)
    weights = np.where(scores > threshold, 0.0, 1.0 / (1.0 + scores))
    total = float(weights.sum())
    if total == 0.0:
        out = _result_gradient(np.median(mat, axis=0), gradients)
        return AggregationResult(out, weights=weights, fallback="all-filtered")
    norm = weights / total
    out = _result_gradient((mat * norm[:, None]).sum(axis=0), gradients)
    return AggregationResult(out, weights=norm)


def aggregate(spec: AggregatorSpec, gradients: Sequence[Gradient],
              counts: Optional[Sequence[int]] = None) -> AggregationResult:
    """Dispatch to the configured rule; counts only affect the mean rule."""
    if spec.kind == "mean":
        return AggregationResult(mean(gradients, counts))
    if spec.kind == "krum":
        return AggregationResult(krum(gradients, spec.f))
    if spec.kind == "multi-krum":
        return AggregationResult(multi_krum(gradients, spec.f, spec.m))
    if spec.kind == "l-nearest":
        return l_nearest(gradients, spec.l)
    if spec.kind == "detection-weighted":
        return detection_weighted(gradients, spec.detection_threshold)
    raise ValueError(f"unknown aggregator kind {spec.kind!r}")
