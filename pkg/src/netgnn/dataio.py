"""On-disk formats: JSON-lines datasets and atomic file writes.

One sample per line; arrays are fixed-order (pairs lexicographic by (s, d))
so traffic and label vectors align without per-entry keys. Numbers serialize
as shortest round-trip decimals, which is what `json` emits for Python
floats.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError
from .graph import Link, Path, RoutingScheme, Topology
from .netsim import Sample
from .traffic import TrafficMatrix

__all__ = [
    "DatasetRecord",
    "record_from_sample",
    "to_json_dict",
    "from_json_dict",
    "write_dataset",
    "read_dataset",
    "iter_dataset",
    "atomic_write_bytes",
    "atomic_write_text",
]


@dataclass(frozen=True)
class DatasetRecord:
    """One labeled instance as stored on disk."""

    topology: Topology
    routing: RoutingScheme
    tm: TrafficMatrix
    delay: np.ndarray
    jitter: np.ndarray
    dropped: np.ndarray
    seed: int
    sim_digest: str

    def __post_init__(self):
        n_p = self.routing.path_count
        for name in ("delay", "jitter", "dropped"):
            arr = getattr(self, name)
            if len(arr) != n_p:
                raise DataError(f"label array {name!r} must have {n_p} entries")
        if not (np.isfinite(self.delay).all() and np.isfinite(self.jitter).all()):
            raise DataError("labels must be finite")


def record_from_sample(sample: Sample) -> DatasetRecord:
    return DatasetRecord(
        topology=sample.topology,
        routing=sample.routing,
        tm=sample.tm,
        delay=np.asarray(sample.stats.mean_delay, dtype=np.float64),
        jitter=np.asarray(sample.stats.jitter, dtype=np.float64),
        dropped=np.asarray(sample.stats.dropped, dtype=np.int64),
        seed=sample.seed,
        sim_digest=sample.sim_digest,
    )


def to_json_dict(record: DatasetRecord) -> dict:
    topo = record.topology
    pairs = record.routing.ordered_pairs()
    return {
        "topology": {
            "nodes": topo.node_count,
            "links": [
                {"id": l.id, "src": l.src, "dst": l.dst, "capacity": l.capacity}
                for l in topo.links
            ],
        },
        "routing": [
            {"src": s, "dst": d, "links": list(record.routing.paths[(s, d)].link_seq)}
            for s, d in pairs
        ],
        "tm": [float(x) for x in record.tm.demand.reshape(-1)],
        "labels": {
            "delay": [float(x) for x in record.delay],
            "jitter": [float(x) for x in record.jitter],
            "dropped": [int(x) for x in record.dropped],
        },
        "seed": int(record.seed),
        "sim_digest": record.sim_digest,
    }


def from_json_dict(doc: dict) -> DatasetRecord:
    try:
        topo_doc = doc["topology"]
        topology = Topology(
            node_count=int(topo_doc["nodes"]),
            links=tuple(
                Link(id=int(l["id"]), src=int(l["src"]), dst=int(l["dst"]),
                     capacity=float(l["capacity"]))
                for l in topo_doc["links"]
            ),
        )
        paths = {}
        for p in doc["routing"]:
            s, d = int(p["src"]), int(p["dst"])
            paths[(s, d)] = Path(src=s, dst=d, link_seq=tuple(int(x) for x in p["links"]))
        routing = RoutingScheme(paths=paths)
        n = topology.node_count
        tm = TrafficMatrix(demand=np.asarray(doc["tm"], dtype=np.float64).reshape(n, n))
        labels = doc["labels"]
        return DatasetRecord(
            topology=topology,
            routing=routing,
            tm=tm,
            delay=np.asarray(labels["delay"], dtype=np.float64),
            jitter=np.asarray(labels["jitter"], dtype=np.float64),
            dropped=np.asarray(labels["dropped"], dtype=np.int64),
            seed=int(doc["seed"]),
            sim_digest=str(doc["sim_digest"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed dataset line: {exc}") from exc


def atomic_write_bytes(path, blob: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_dataset(records: Iterable[DatasetRecord | Sample], path) -> int:
    """Write records as JSON lines (atomically); returns the line count."""
    lines = []
    for rec in records:
        if isinstance(rec, Sample):
            rec = record_from_sample(rec)
        lines.append(json.dumps(to_json_dict(rec), sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
    return len(lines)


def iter_dataset(path) -> Iterator[DatasetRecord]:
    if not os.path.exists(path):
        raise DataError(f"no such dataset file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            yield from_json_dict(doc)


def read_dataset(path) -> list[DatasetRecord]:
    return list(iter_dataset(path))
