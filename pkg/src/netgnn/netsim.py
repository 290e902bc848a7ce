"""Packet-level simulation producing per-pair delay/jitter/loss labels, plus
the dataset factory that sweeps routings and traffic intensities.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from . import simkernel
from .errors import ConfigError, DataError
from .graph import RoutingScheme, Topology
from .traffic import TrafficMatrix, generate_tm

__all__ = [
    "SimConfig",
    "FlowStats",
    "Sample",
    "simulate",
    "generate_dataset",
    "dataset_size",
    "resolve_workers",
]

log = logging.getLogger(__name__)

PACKET_SIZE_DISTS = ("exp", "fixed")


@dataclass(frozen=True)
class SimConfig:
    """Measurement window, queueing, and service-process settings.

    `duration` is the generation horizon; the run drains in-flight packets
    afterwards so that generated == delivered + dropped holds exactly for
    packets created in [warmup, duration).
    """

    duration: float = 16000.0
    warmup: float = 1000.0
    buffer_packets: int = 32
    packet_size_dist: str = "exp"   # exponential with unit mean, or "fixed"
    fixed_size: float = 1.0
    capacity: float | None = None   # None: use the topology's link capacity
    prop_delay: float = 0.0

    def __post_init__(self):
        if not (self.duration > self.warmup >= 0):
            raise ConfigError("need duration > warmup >= 0")
        if self.buffer_packets < 1:
            raise ConfigError("buffer_packets must be >= 1")
        if self.packet_size_dist not in PACKET_SIZE_DISTS:
            raise ConfigError(f"packet_size_dist must be one of {PACKET_SIZE_DISTS}")
        if self.fixed_size <= 0:
            raise ConfigError("fixed_size must be > 0")
        if self.capacity is not None and self.capacity <= 0:
            raise ConfigError("capacity override must be > 0")
        if self.prop_delay < 0:
            raise ConfigError("prop_delay must be >= 0")

    def digest(self, extra: dict | None = None) -> str:
        """Stable hex digest of the config (plus generator metadata)."""
        doc = {"sim": asdict(self), "extra": extra or {}}
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FlowStats:
    """Per ordered pair, in lexicographic (s, d) order."""

    pairs: tuple[tuple[int, int], ...]
    mean_delay: np.ndarray     # time-units; NaN when nothing was delivered
    jitter: np.ndarray         # variance of per-packet delay, time-units^2
    delivered: np.ndarray
    dropped: np.ndarray
    generated: np.ndarray

    def index_of(self, src: int, dst: int) -> int:
        return self.pairs.index((src, dst))

    def all_pairs_delivered(self) -> bool:
        return bool(np.all(self.delivered > 0))


@dataclass(frozen=True)
class Sample:
    """One labeled instance of (topology, routing, traffic)."""

    topology: Topology
    routing: RoutingScheme
    tm: TrafficMatrix
    stats: FlowStats
    seed: int
    sim_digest: str


def simulate(topology: Topology, routing: RoutingScheme, tm: TrafficMatrix,
             config: SimConfig, seed: int) -> FlowStats:
    """Run the event-driven simulation and aggregate per-pair statistics.

    Packet generation is Poisson per pair at the matrix rate; per-pair delays
    are measured source departure to destination arrival for packets created
    after the warmup.
    """
    routing.validate(topology)
    if tm.n != topology.node_count:
        raise ConfigError("traffic matrix size does not match the topology")

    link_ids = sorted(l.id for l in topology.links)
    row_of = {lid: i for i, lid in enumerate(link_ids)}
    cap_value = config.capacity if config.capacity is not None else topology.capacity
    capacity = np.full(len(link_ids), float(cap_value), dtype=np.float64)

    pairs = routing.ordered_pairs()
    rates = np.asarray([tm.rate(s, d) for s, d in pairs], dtype=np.float64)
    path_links: list[int] = []
    path_start = [0]
    for p in pairs:
        path_links.extend(row_of[lid] for lid in routing.paths[p].link_seq)
        path_start.append(len(path_links))

    generated, delivered, dropped, sum_d, sum_d2 = simkernel.run_kernel(
        capacity, config.buffer_packets, path_links, path_start, rates,
        config.duration, config.warmup,
        1 if config.packet_size_dist == "exp" else 0,
        config.fixed_size, config.prop_delay, seed,
    )

    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sum_d / delivered
        second = sum_d2 / delivered
        jitter = np.maximum(second - mean * mean, 0.0)
    mean[delivered == 0] = np.nan
    jitter[delivered == 0] = np.nan

    return FlowStats(
        pairs=tuple(pairs),
        mean_delay=mean, jitter=jitter,
        delivered=delivered, dropped=dropped, generated=generated,
    )


def resolve_workers(requested: int | None) -> int:
    """Worker count capped by the NETGNN_THREADS environment variable."""
    cap = os.environ.get("NETGNN_THREADS")
    cap_value = max(1, int(cap)) if cap else None
    if requested is None:
        return 1 if cap_value is None else cap_value
    workers = max(1, requested)
    return min(workers, cap_value) if cap_value is not None else workers


def dataset_size(topologies, routings, ti_list, samples_per_cell: int) -> int:
    return sum(len(r) for r in routings) * len(ti_list) * samples_per_cell


def _normalize_inputs(topologies, routings):
    if isinstance(topologies, Topology):
        topologies = [topologies]
    if routings and isinstance(routings[0], RoutingScheme):
        routings = [list(routings)]
    if len(topologies) != len(routings):
        raise ConfigError("need one routing list per topology")
    for topo, schemes in zip(topologies, routings):
        if not schemes:
            raise ConfigError("empty routing list")
        for scheme in schemes:
            scheme.validate(topo)
    return list(topologies), [list(r) for r in routings]


def _sample_cells(topologies, routings, ti_list, samples_per_cell):
    """Replicate-major order so truncated prefixes stay balanced."""
    for rep in range(samples_per_cell):
        for ti in ti_list:
            for topo_idx, topo in enumerate(topologies):
                for scheme in routings[topo_idx]:
                    yield rep, ti, topo, scheme


def _make_sample(args) -> Sample | None:
    topo, scheme, ti, config, master_seed, index = args
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    tm_ss, sim_ss = ss.spawn(2)
    tm_seed = int(tm_ss.generate_state(1, np.uint64)[0])
    sim_seed = int(sim_ss.generate_state(1, np.uint64)[0])
    tm = generate_tm(topo.node_count, ti, tm_seed)
    try:
        stats = simulate(topo, scheme, tm, config, sim_seed)
        if not stats.all_pairs_delivered():
            raise DataError("a pair delivered no packets inside the window")
    except Exception as exc:  # noqa: BLE001 - one bad sample must not kill the sweep
        log.warning("sample %d (seed %d) failed: %s", index, sim_seed, exc)
        return None
    return Sample(topology=topo, routing=scheme, tm=tm, stats=stats,
                  seed=sim_seed, sim_digest=config.digest({"ti": ti}))


def generate_dataset(topologies, routings, ti_list, samples_per_cell: int,
                     config: SimConfig, seed: int, limit: int | None = None,
                     workers: int | None = None) -> Iterator[Sample]:
    """Cartesian sweep over (routing, traffic intensity) cells with a fresh
    traffic matrix per sample.

    Sample seeds derive from (seed, running index), so output is
    deterministic regardless of worker count; failed samples are skipped and
    logged with their seed.
    """
    topologies, routings = _normalize_inputs(topologies, routings)
    if not ti_list or samples_per_cell < 1:
        raise ConfigError("need a nonempty ti_list and samples_per_cell >= 1")
    n_workers = resolve_workers(workers)

    tasks = (
        (topo, scheme, ti, config, seed, index)
        for index, (rep, ti, topo, scheme)
        in enumerate(_sample_cells(topologies, routings, ti_list, samples_per_cell))
    )

    def _bounded(iterator):
        emitted = 0
        for sample in iterator:
            if sample is None:
                continue
            yield sample
            emitted += 1
            if limit is not None and emitted >= limit:
                return

    if n_workers <= 1:
        yield from _bounded(map(_make_sample, tasks))
    else:
        import multiprocessing

        with multiprocessing.Pool(processes=n_workers) as pool:
            yield from _bounded(pool.imap(_make_sample, tasks, chunksize=8))
