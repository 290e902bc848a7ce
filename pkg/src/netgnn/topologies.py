"""Canned and generated topologies.

All builders expand undirected edges into two directed links, one per egress
direction, since queues live on directed links.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .graph import Topology, build_topology, undirected_to_directed

__all__ = ["nsf_topology", "random_topology", "NSF_EDGES"]

# 14-node / 21-edge NSF backbone, 0-indexed undirected edges.
NSF_EDGES: list[tuple[int, int]] = [
    (0, 1), (0, 2), (0, 7),
    (1, 2), (1, 3),
    (2, 5),
    (3, 4), (3, 10),
    (4, 5), (4, 6),
    (5, 9), (5, 12),
    (6, 7),
    (7, 8),
    (8, 9), (8, 11),
    (9, 13),
    (10, 11), (10, 13),
    (11, 12),
    (12, 13),
]


def nsf_topology(capacity: float = 1.0) -> Topology:
    """14 nodes, 21 undirected edges, 42 directed links."""
    return build_topology(14, undirected_to_directed(NSF_EDGES), capacity=capacity)


def random_topology(
    node_count: int,
    extra_edges: int,
    seed: int,
    capacity: float = 1.0,
) -> Topology:
    """Connected random topology: a random spanning tree plus extra edges.

    The tree guarantees connectivity; `extra_edges` additional distinct
    undirected edges are sampled uniformly from the remaining node pairs.
    Deterministic per seed.
    """
    if node_count < 2:
        raise ConfigError("need at least 2 nodes")
    max_extra = node_count * (node_count - 1) // 2 - (node_count - 1)
    if extra_edges < 0 or extra_edges > max_extra:
        raise ConfigError(f"extra_edges must be in 0..{max_extra}")
    rng = np.random.default_rng(seed)
    edges: set[tuple[int, int]] = set()
    # random attachment tree over a shuffled node order
    order = rng.permutation(node_count)
    for i in range(1, node_count):
        a = int(order[i])
        b = int(order[rng.integers(0, i)])
        edges.add((min(a, b), max(a, b)))
    while len(edges) < node_count - 1 + extra_edges:
        a = int(rng.integers(0, node_count))
        b = int(rng.integers(0, node_count))
        if a != b:
            edges.add((min(a, b), max(a, b)))
    ordered = sorted(edges)
    return build_topology(node_count, undirected_to_directed(ordered), capacity=capacity)
