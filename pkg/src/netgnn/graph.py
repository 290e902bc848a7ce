"""Topology, path, and routing-scheme types plus routing generators.

Links are directed and carry one shared capacity. A routing scheme assigns
exactly one loop-free path to every ordered node pair, which is what the
simulator and the prediction model both consume.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DisconnectedError

__all__ = [
    "Link",
    "Topology",
    "Path",
    "RoutingScheme",
    "build_topology",
    "shortest_path_routing",
    "random_routing_variants",
    "apply_link_failures",
]


@dataclass(frozen=True)
class Link:
    id: int
    src: int
    dst: int
    capacity: float


@dataclass(frozen=True)
class Topology:
    """Directed graph with at most one link per ordered node pair.

    Link ids are unique and ascending but not necessarily dense: reduced
    topologies returned by :func:`apply_link_failures` keep the surviving
    links' original ids.
    """

    node_count: int
    links: tuple[Link, ...]

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ConfigError("node_count must be positive")
        seen_pairs: set[tuple[int, int]] = set()
        last_id = -1
        for link in self.links:
            if not (0 <= link.src < self.node_count and 0 <= link.dst < self.node_count):
                raise ConfigError(f"link {link.id}: endpoint outside 0..{self.node_count - 1}")
            if link.src == link.dst:
                raise ConfigError(f"link {link.id}: self-loop {link.src}->{link.dst}")
            if (link.src, link.dst) in seen_pairs:
                raise ConfigError(f"duplicate edge {link.src}->{link.dst}")
            if link.capacity <= 0:
                raise ConfigError(f"link {link.id}: capacity must be > 0")
            if link.id <= last_id:
                raise ConfigError("link ids must be unique and ascending")
            seen_pairs.add((link.src, link.dst))
            last_id = link.id

    @property
    def link_count(self) -> int:
        return len(self.links)

    @property
    def capacity(self) -> float:
        """The single capacity shared by all links."""
        caps = {l.capacity for l in self.links}
        if len(caps) != 1:
            raise ConfigError("topology links do not share one capacity")
        return next(iter(caps))

    def link_by_id(self, link_id: int) -> Link:
        link = self._id_map().get(link_id)
        if link is None:
            raise ConfigError(f"no link with id {link_id}")
        return link

    def _id_map(self) -> dict[int, Link]:
        # cached on first use; the dataclass is frozen so this is safe
        cache = self.__dict__.get("_id_map_cache")
        if cache is None:
            cache = {l.id: l for l in self.links}
            object.__setattr__(self, "_id_map_cache", cache)
        return cache

    def out_links(self) -> list[list[Link]]:
        """Adjacency as per-node outgoing links, each list sorted by dst."""
        adj: list[list[Link]] = [[] for _ in range(self.node_count)]
        for link in self.links:
            adj[link.src].append(link)
        for lst in adj:
            lst.sort(key=lambda l: l.dst)
        return adj

    def is_connected(self) -> bool:
        """True when every node reaches every other along directed links."""
        if self.node_count == 1:
            return True
        fwd: list[list[int]] = [[] for _ in range(self.node_count)]
        rev: list[list[int]] = [[] for _ in range(self.node_count)]
        for link in self.links:
            fwd[link.src].append(link.dst)
            rev[link.dst].append(link.src)
        return _reaches_all(fwd, 0) and _reaches_all(rev, 0)


def _reaches_all(adj: list[list[int]], start: int) -> bool:
    seen = [False] * len(adj)
    seen[start] = True
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return all(seen)


@dataclass(frozen=True)
class Path:
    """Loop-free link sequence from src to dst."""

    src: int
    dst: int
    link_seq: tuple[int, ...]

    def validate(self, topology: Topology) -> None:
        if not self.link_seq:
            raise ConfigError(f"path {self.src}->{self.dst} is empty")
        if len(set(self.link_seq)) != len(self.link_seq):
            raise ConfigError(f"path {self.src}->{self.dst} repeats a link")
        at = self.src
        for link_id in self.link_seq:
            link = topology.link_by_id(link_id)
            if link.src != at:
                raise ConfigError(
                    f"path {self.src}->{self.dst}: link {link_id} starts at "
                    f"{link.src}, expected {at}"
                )
            at = link.dst
        if at != self.dst:
            raise ConfigError(f"path {self.src}->{self.dst} ends at {at}")


@dataclass(frozen=True)
class RoutingScheme:
    """One path per ordered node pair (s, d), s != d."""

    paths: dict[tuple[int, int], Path] = field(hash=False)

    def validate(self, topology: Topology) -> None:
        n = topology.node_count
        expected = {(s, d) for s in range(n) for d in range(n) if s != d}
        if set(self.paths.keys()) != expected:
            raise ConfigError(
                f"routing must cover exactly the {n * (n - 1)} ordered pairs"
            )
        for (s, d), path in self.paths.items():
            if (path.src, path.dst) != (s, d):
                raise ConfigError(f"path stored under {(s, d)} routes {path.src}->{path.dst}")
            path.validate(topology)

    def ordered_pairs(self) -> list[tuple[int, int]]:
        """Pairs in the canonical lexicographic (s, d) order."""
        return sorted(self.paths.keys())

    def canonical_key(self) -> tuple[tuple[int, ...], ...]:
        """Hashable identity used to deduplicate schemes."""
        return tuple(self.paths[p].link_seq for p in self.ordered_pairs())

    @property
    def path_count(self) -> int:
        return len(self.paths)


def build_topology(
    node_count: int,
    edges: list[tuple[int, int]],
    capacity: float = 1.0,
    require_connected: bool = False,
) -> Topology:
    """Build a topology from directed edges, links indexed in input order.

    Raises on duplicate ordered pairs or endpoints outside the node range.
    Connectivity is only enforced when `require_connected` is set; routing
    generators check it themselves.
    """
    links = tuple(
        Link(id=i, src=s, dst=d, capacity=capacity) for i, (s, d) in enumerate(edges)
    )
    topo = Topology(node_count=node_count, links=links)
    if require_connected and not topo.is_connected():
        raise DisconnectedError("topology is not strongly connected")
    return topo


def undirected_to_directed(edges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Expand undirected edges into two directed links each."""
    out: list[tuple[int, int]] = []
    for s, d in edges:
        out.append((s, d))
        out.append((d, s))
    return out


def _weight_map(topology: Topology, link_weights) -> dict[int, float]:
    if link_weights is None:
        return {l.id: 1.0 for l in topology.links}
    if len(link_weights) != topology.link_count:
        raise ConfigError("need one weight per link")
    weights = {}
    for link, w in zip(topology.links, link_weights):
        w = float(w)
        if w <= 0:
            raise ConfigError("link weights must be positive")
        weights[link.id] = w
    return weights


def _distances_to(topology: Topology, dest: int, weights: dict[int, float]) -> list[float]:
    """Dijkstra on the reversed graph: min cost from every node to `dest`."""
    rev: list[list[tuple[int, float]]] = [[] for _ in range(topology.node_count)]
    for link in topology.links:
        rev[link.dst].append((link.src, weights[link.id]))
    dist = [float("inf")] * topology.node_count
    dist[dest] = 0.0
    heap = [(0.0, dest)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in rev[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def shortest_path_routing(topology: Topology, link_weights=None) -> RoutingScheme:
    """Minimum-weight path for every ordered pair, lexicographic tie-break.

    Among all minimum-weight paths for a pair, the one whose node sequence is
    lexicographically smallest is returned, which makes the result independent
    of link insertion order.
    """
    weights = _weight_map(topology, link_weights)
    adj = topology.out_links()
    n = topology.node_count
    # per-destination distances; then greedy lexicographic walk per source
    dist_to = [_distances_to(topology, d, weights) for d in range(n)]
    paths: dict[tuple[int, int], Path] = {}
    for s in range(n):
        for d in range(n):
            if s == d:
                continue
            if dist_to[d][s] == float("inf"):
                raise DisconnectedError(f"no path from {s} to {d}")
            link_seq: list[int] = []
            at = s
            while at != d:
                target = dist_to[d][at]
                step = None
                for link in adj[at]:  # sorted by dst: first feasible = lexicographic min
                    if weights[link.id] + dist_to[d][link.dst] == target:
                        step = link
                        break
                assert step is not None, "inconsistent shortest-path distances"
                link_seq.append(step.id)
                at = step.dst
            paths[(s, d)] = Path(src=s, dst=d, link_seq=tuple(link_seq))
    return RoutingScheme(paths=paths)


def random_routing_variants(
    topology: Topology, count: int, seed: int, max_attempts: int | None = None
) -> list[RoutingScheme]:
    """Distinct loop-free schemes from random link weights, one Dijkstra each.

    Weights are drawn i.i.d. uniform from [1, 10] per variant; the resulting
    schemes are destination-consistent and loop-free by construction. Raises
    when the topology cannot supply `count` distinct schemes within the
    attempt bound.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if not topology.is_connected():
        raise DisconnectedError("topology must be connected")
    rng = np.random.default_rng(seed)
    if max_attempts is None:
        max_attempts = 50 * count + 100
    schemes: list[RoutingScheme] = []
    seen: set[tuple[tuple[int, ...], ...]] = set()
    attempts = 0
    while len(schemes) < count:
        if attempts >= max_attempts:
            raise ConfigError(
                f"could not generate {count} distinct schemes in {max_attempts} attempts"
            )
        attempts += 1
        weights = rng.uniform(1.0, 10.0, size=topology.link_count)
        scheme = shortest_path_routing(topology, weights)
        key = scheme.canonical_key()
        if key not in seen:
            seen.add(key)
            schemes.append(scheme)
    return schemes


def apply_link_failures(
    topology: Topology, failed_link_ids: list[int] | set[int]
) -> tuple[Topology, RoutingScheme]:
    """Remove links and reroute every pair by shortest path on the survivors.

    Surviving links keep their original ids, so no output path can reference
    a failed id. Raises DisconnectedError when the failures partition the
    graph.
    """
    failed = set(failed_link_ids)
    known = {l.id for l in topology.links}
    unknown = failed - known
    if unknown:
        raise ConfigError(f"unknown link ids: {sorted(unknown)}")
    survivors = tuple(l for l in topology.links if l.id not in failed)
    reduced = Topology(node_count=topology.node_count, links=survivors)
    if not reduced.is_connected():
        raise DisconnectedError("link failures disconnect the graph")
    routing = shortest_path_routing(reduced)
    return reduced, routing
