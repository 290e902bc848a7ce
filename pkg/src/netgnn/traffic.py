"""Traffic-matrix generation and what-if demand transformations.

Demands are average packet-arrival rates in packets per time-unit with
unit-mean packet size, so intensity values are directly comparable to link
capacities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["TrafficMatrix", "generate_tm", "scale_user_demand"]


@dataclass(frozen=True)
class TrafficMatrix:
    """N x N nonnegative demand rates with a zero diagonal."""

    demand: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.demand, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ConfigError("demand must be a square matrix")
        if d.shape[0] < 2:
            raise ConfigError("need at least 2 nodes")
        if np.any(d < 0):
            raise ConfigError("demands must be nonnegative")
        if np.any(np.diag(d) != 0):
            raise ConfigError("diagonal demands must be zero")
        d.setflags(write=False)
        object.__setattr__(self, "demand", d)

    @property
    def n(self) -> int:
        return self.demand.shape[0]

    def rate(self, src: int, dst: int) -> float:
        return float(self.demand[src, dst])

    def total_rate(self) -> float:
        return float(self.demand.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, TrafficMatrix) and np.array_equal(self.demand, other.demand)


def generate_tm(n: int, ti: float, seed: int) -> TrafficMatrix:
    """Each off-diagonal demand is uniform on [0.1, 1] scaled by ti/(n-1).

    Bit-reproducible per (n, ti, seed).
    """
    if n < 2:
        raise ConfigError("n must be >= 2")
    if ti <= 0:
        raise ConfigError("traffic intensity must be > 0")
    rng = np.random.default_rng(seed)
    demand = rng.uniform(0.1, 1.0, size=(n, n)) * (ti / (n - 1))
    np.fill_diagonal(demand, 0.0)
    return TrafficMatrix(demand=demand)


def scale_user_demand(tm: TrafficMatrix, node: int, factor: float) -> TrafficMatrix:
    """Scale all traffic sourced at and destined to `node` by `factor`.

    Row and column entries are each scaled once; the diagonal stays zero.
    """
    if not (0 <= node < tm.n):
        raise ConfigError(f"node {node} outside 0..{tm.n - 1}")
    if factor <= 0:
        raise ConfigError("factor must be > 0")
    demand = tm.demand.copy()
    demand[node, :] *= factor
    demand[:, node] *= factor
    demand[node, node] = 0.0
    return TrafficMatrix(demand=demand)
