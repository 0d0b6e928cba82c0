"""Aggregation-time defenses applied uniformly by every client."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

KINDS = ("none", "norm_clip", "neighbor_median")


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    threshold: float = float("inf")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown defense {self.kind!r}")
        if self.kind == "norm_clip" and not self.threshold > 0:
            raise InvalidArgument("norm_clip needs a positive threshold")

    def describe(self) -> str:
        return f"norm_clip(threshold={self.threshold})" if self.kind == "norm_clip" else self.kind


def clip_incoming(own: np.ndarray, neighbors: np.ndarray, threshold: float) -> np.ndarray:
    """Pull each neighbor vector toward ``own`` until ``||neighbor - own|| <= threshold``."""
    own = np.asarray(own, dtype=np.float64)
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    delta = neighbors - own
    norms = np.linalg.norm(delta, axis=1)
    scale = np.ones_like(norms)
    over = norms > threshold
    scale[over] = threshold / norms[over]
    return own + delta * scale[:, None]


def median_aggregate(own: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Coordinate-wise median over the client's own vector and its neighbors'."""
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    if neighbors.shape[0] < 1:
        raise InvalidArgument("median aggregation needs at least one neighbor")
    return np.median(np.vstack([own, neighbors]), axis=0)
