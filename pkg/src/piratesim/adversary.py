"""Byzantine strategies applied at protocol hook points.

Protocol code never reads a byzantine flag: the experiment harness attaches
a strategy object to the nodes it wants corrupted, and the ground-truth
byzantine map lives only on the harness side. The omniscient grant is an
explicit view object handed over by the harness, never scraped from
protocol state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .aggregation import Gradient

KINDS = (
    "harmful-gradient",
    "omniscient-craft",
    "falsify-partial-aggregation",
    "withhold",
    "equivocate-leader",
    "contaminate-model",
)


@dataclass
class ByzantineStrategy:
    kind: str
    magnitude: float = 1.0
    # omniscient-craft: steer either the step's mean ("aggregate") toward
    # target_vector, or the model parameters ("params") toward it.
    target_kind: str = "aggregate"
    target_vector: Optional[np.ndarray] = None
    noise_scale: float = 0.01
    contaminate_at_iteration: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown byzantine strategy {self.kind!r}")
        if self.target_vector is not None:
            self.target_vector = np.asarray(self.target_vector, dtype=np.float64)


@dataclass
class OmniscientView:
    """Harness-granted visibility for crafting attacks.

    others_sum is the sum of every other node's honest submission for the
    current step; n counts all submissions including the adversary's.
    """

    others_sum: np.ndarray
    n: int
    current_params: Optional[np.ndarray] = None
    learning_rate: Optional[float] = None


def craft_target_mean(strategy: ByzantineStrategy, view: OmniscientView) -> np.ndarray:
    if strategy.target_kind == "params":
        if view.current_params is None or view.learning_rate is None:
            raise ValueError("params-steering craft needs model visibility")
        if strategy.target_vector is None:
            raise ValueError("params-steering craft needs a target vector")
        return (view.current_params - strategy.target_vector) / view.learning_rate
    if strategy.target_vector is None:
        raise ValueError("aggregate craft needs a target vector")
    return strategy.target_vector


def corrupt_gradient(honest: Gradient, strategy: ByzantineStrategy,
                     rng: np.random.Generator,
                     view: Optional[OmniscientView] = None) -> Gradient:
    """Produce the gradient a byzantine node actually submits.

    harmful-gradient: -magnitude * honest plus seeded noise.
    omniscient-craft: solve n*target = g* + sum(others) for g*; without a
    visibility grant it degrades to the harmful gradient.
    Other strategies leave the submission untouched.
    """
    if strategy.kind == "omniscient-craft" and view is not None:
        target = craft_target_mean(strategy, view)
        vec = view.n * target - view.others_sum
    elif strategy.kind in ("harmful-gradient", "omniscient-craft"):
        noise = rng.normal(0.0, strategy.noise_scale, honest.dimension)
        vec = -strategy.magnitude * honest.values + noise
    else:
        return honest
    return Gradient(values=vec, payload_bytes=honest.payload_bytes,
                    origin=honest.origin, iteration=honest.iteration)


def falsify_aggregation(honest_comp3: np.ndarray, strategy: ByzantineStrategy,
                        rng: np.random.Generator) -> np.ndarray:
    """Adversary-chosen replacement for a partial aggregation."""
    return (-strategy.magnitude * honest_comp3
            + rng.normal(0.0, strategy.noise_scale, honest_comp3.size))


def contaminate_model(params: np.ndarray, strategy: ByzantineStrategy,
                      rng: np.random.Generator) -> np.ndarray:
    """Perturb local parameters so the node's model digest diverges."""
    return params + strategy.magnitude * rng.normal(0.0, 1.0, params.size)


def withholds(strategy: Optional[ByzantineStrategy]) -> bool:
    return strategy is not None and strategy.kind == "withhold"


def equivocates(strategy: Optional[ByzantineStrategy]) -> bool:
    return strategy is not None and strategy.kind == "equivocate-leader"


def falsifies(strategy: Optional[ByzantineStrategy]) -> bool:
    return strategy is not None and strategy.kind == "falsify-partial-aggregation"
