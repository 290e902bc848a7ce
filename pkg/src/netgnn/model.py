"""Path/link message-passing model: state init, alternating updates, readout,
Monte-Carlo dropout inference, and checkpoint i/o.

Every path threads its state through the links it crosses with a shared GRU,
leaving one message per (path, link) visit; each link sums the messages of
the paths crossing it (ascending path id) and applies a second shared GRU.
After a fixed number of rounds a small SELU network with dropout maps each
path state to a scalar estimate.
"""

from __future__ import annotations

import binascii
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, ParamStore, Tensor
from .errors import CheckpointVersionError, ConfigError, CorruptCheckpointError
from .graph import RoutingScheme, Topology
from .traffic import TrafficMatrix

__all__ = [
    "ModelConfig",
    "ModelParams",
    "InstanceEncoding",
    "PredictiveDistribution",
    "init_model_params",
    "encode_instance",
    "merge_instances",
    "init_states",
    "message_passing",
    "readout",
    "sample_readout_masks",
    "forward",
    "predict_mc",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

_CKPT_MAGIC = b"NGN1"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    path_state_dim: int = 32
    link_state_dim: int = 16
    iterations: int = 8
    readout_hidden: tuple[int, ...] = (8, 8)
    dropout_rate: float = 0.5
    input_scale: float = 1.0

    def __post_init__(self):
        if self.path_state_dim < 1 or self.link_state_dim < 1:
            raise ConfigError("state dims must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout rate must be in [0, 1)")
        if self.input_scale <= 0:
            raise ConfigError("input_scale must be > 0")
        object.__setattr__(self, "readout_hidden", tuple(self.readout_hidden))


class ModelParams:
    """All trainable tensors, grouped for the forward pass and named in a
    ParamStore for optimization and checkpointing."""

    def __init__(self, store: ParamStore, path_cell: GruParams, link_cell: GruParams,
                 readout_layers: list[tuple[Tensor, Tensor]], readout_out: tuple[Tensor, Tensor]):
        self.store = store
        self.path_cell = path_cell
        self.link_cell = link_cell
        self.readout_layers = readout_layers
        self.readout_out = readout_out

    @property
    def dtype(self):
        return self.path_cell.w_update.data.dtype


def init_model_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init, fixed seed."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    path_cell = store.add_gru(
        "path_cell", ad.init_gru_params(config.path_state_dim, config.link_state_dim, rng, dtype)
    )
    link_cell = store.add_gru(
        "link_cell", ad.init_gru_params(config.link_state_dim, config.path_state_dim, rng, dtype)
    )

    def dense(name: str, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        s = 1.0 / math.sqrt(fan_in)
        w = store.add(f"{name}.w", Tensor(rng.uniform(-s, s, (fan_in, fan_out)).astype(dtype)), decay=True)
        b = store.add(f"{name}.b", Tensor(rng.uniform(-s, s, (fan_out,)).astype(dtype)), decay=False)
        return w, b

    layers = []
    fan_in = config.path_state_dim
    for i, width in enumerate(config.readout_hidden):
        layers.append(dense(f"readout.{i}", fan_in, width))
        fan_in = width
    out = dense("readout.out", fan_in, 1)
    return ModelParams(store, path_cell, link_cell, layers, out)


# ---------------------------------------------------------------------------
# instance encoding


@dataclass
class InstanceEncoding:
    """Structural arrays for one (or one merged batch of) routed instances.

    `incidence` lists (path id, position, link row) triples sorted by
    (path id, position); the remaining arrays are layouts derived from it for
    the vectorized sweep. Link rows index the sorted original link ids.
    """

    n_paths: int
    n_links: int
    x_path: np.ndarray                     # (n_paths,) scaled demand feature
    incidence: np.ndarray                  # (n_triples, 3)
    pairs: list[tuple[int, int]]
    link_ids: np.ndarray                   # (n_links,) row -> original link id
    step_paths: list[np.ndarray] = field(repr=False, default_factory=list)
    step_links: list[np.ndarray] = field(repr=False, default_factory=list)
    agg_perm: np.ndarray = field(repr=False, default=None)
    agg_segments: np.ndarray = field(repr=False, default=None)

    @property
    def max_path_len(self) -> int:
        return len(self.step_paths)

    @property
    def step_offsets(self) -> np.ndarray:
        """Sweep-row offset of each position block (cumulative active counts)."""
        cached = getattr(self, "_step_offsets", None)
        if cached is None:
            cached = np.concatenate(
                [[0], np.cumsum([len(sp) for sp in self.step_paths])]
            ).astype(np.int64)
            self._step_offsets = cached
        return cached


def _build_encoding(n_paths: int, n_links: int, x_path: np.ndarray,
                    path_link_rows: list[list[int]], pairs: list[tuple[int, int]],
                    link_ids: np.ndarray) -> InstanceEncoding:
    for rows in path_link_rows:
        if not rows:
            raise ConfigError("every path must reference at least one link")
    triples = [
        (p, pos, row)
        for p, rows in enumerate(path_link_rows)
        for pos, row in enumerate(rows)
    ]
    incidence = np.asarray(triples, dtype=np.int64).reshape(len(triples), 3)
    max_len = max(len(rows) for rows in path_link_rows)

    step_paths, step_links, row_of_triple = [], [], {}
    offset = 0
    for pos in range(max_len):
        act = [(p, rows[pos]) for p, rows in enumerate(path_link_rows) if len(rows) > pos]
        step_paths.append(np.asarray([p for p, _ in act], dtype=np.int64))
        step_links.append(np.asarray([r for _, r in act], dtype=np.int64))
        for rank, (p, _) in enumerate(act):
            row_of_triple[(p, pos)] = offset + rank
        offset += len(act)

    # messages regrouped by (link row, path id) for the per-link sums
    by_link = sorted(triples, key=lambda t: (t[2], t[0], t[1]))
    agg_perm = np.asarray([row_of_triple[(p, pos)] for p, pos, _ in by_link], dtype=np.int64)
    agg_segments = np.asarray([row for _, _, row in by_link], dtype=np.int64)

    return InstanceEncoding(
        n_paths=n_paths, n_links=n_links,
        x_path=np.asarray(x_path, dtype=np.float64),
        incidence=incidence, pairs=list(pairs), link_ids=np.asarray(link_ids, dtype=np.int64),
        step_paths=step_paths, step_links=step_links,
        agg_perm=agg_perm, agg_segments=agg_segments,
    )


def encode_instance(topology: Topology, routing: RoutingScheme, tm: TrafficMatrix,
                    config: ModelConfig) -> InstanceEncoding:
    """Canonical encoding: paths ordered by (src, dst), links by id.

    The per-path input feature is the pair's demand divided by the
    configured input scale; links carry no input features.
    """
    if tm.n != topology.node_count:
        raise ConfigError("traffic matrix size does not match the topology")
    link_ids = np.asarray(sorted(l.id for l in topology.links), dtype=np.int64)
    row_of = {lid: i for i, lid in enumerate(link_ids)}
    pairs = routing.ordered_pairs()
    x_path = [tm.rate(s, d) / config.input_scale for s, d in pairs]
    path_link_rows = [[row_of[lid] for lid in routing.paths[p].link_seq] for p in pairs]
    return _build_encoding(len(pairs), len(link_ids), x_path, path_link_rows, pairs, link_ids)


def merge_instances(encodings: list[InstanceEncoding]) -> InstanceEncoding:
    """Disjoint union of instances, used to run one pass over a whole batch.

    Path and link rows are offset per instance. Links never mix across
    instances, so concatenating the per-instance aggregation layouts in
    instance order keeps the (link row, path id) sort and therefore the exact
    per-link summation order of the unmerged instances.
    """
    if not encodings:
        raise ConfigError("nothing to merge")
    if len(encodings) == 1:
        return encodings[0]
    path_offs = np.concatenate([[0], np.cumsum([e.n_paths for e in encodings])])
    link_offs = np.concatenate([[0], np.cumsum([e.n_links for e in encodings])])
    max_len = max(e.max_path_len for e in encodings)

    step_paths, step_links = [], []
    merged_offs = np.zeros(max_len + 1, dtype=np.int64)
    for pos in range(max_len):
        sp = [e.step_paths[pos] + path_offs[i]
              for i, e in enumerate(encodings) if pos < e.max_path_len]
        sl = [e.step_links[pos] + link_offs[i]
              for i, e in enumerate(encodings) if pos < e.max_path_len]
        step_paths.append(np.concatenate(sp))
        step_links.append(np.concatenate(sl))
        merged_offs[pos + 1] = merged_offs[pos] + step_paths[-1].size

    # remap each instance's sweep rows into the merged position-major layout
    perms, segs = [], []
    placed = np.zeros(max_len, dtype=np.int64)   # rows already placed per position
    for i, enc in enumerate(encodings):
        local_offs = enc.step_offsets
        rows = enc.agg_perm
        pos_of = np.searchsorted(local_offs, rows, side="right") - 1
        perms.append(merged_offs[pos_of] + placed[pos_of] + rows - local_offs[pos_of])
        segs.append(enc.agg_segments + link_offs[i])
        counts = local_offs[1:] - local_offs[:-1]
        placed[: counts.size] += counts

    incidence = np.concatenate([
        e.incidence + np.asarray([[path_offs[i], 0, link_offs[i]]], dtype=np.int64)
        for i, e in enumerate(encodings)
    ])
    pairs = [p for e in encodings for p in e.pairs]
    return InstanceEncoding(
        n_paths=int(path_offs[-1]), n_links=int(link_offs[-1]),
        x_path=np.concatenate([e.x_path for e in encodings]),
        incidence=incidence, pairs=pairs,
        link_ids=np.concatenate([e.link_ids + link_offs[i]
                                 for i, e in enumerate(encodings)]),
        step_paths=step_paths, step_links=step_links,
        agg_perm=np.concatenate(perms), agg_segments=np.concatenate(segs),
    )


# ---------------------------------------------------------------------------
# forward pass


def init_states(instance: InstanceEncoding, config: ModelConfig, dtype=np.float32
                ) -> tuple[Tensor, Tensor]:
    """Path states start as [x_p, 0, ..., 0]; link states start all zero."""
    hp = np.zeros((instance.n_paths, config.path_state_dim), dtype=dtype)
    hp[:, 0] = instance.x_path.astype(dtype)
    hl = np.zeros((instance.n_links, config.link_state_dim), dtype=dtype)
    return Tensor(hp), Tensor(hl)


class _FusedGru:
    """Update and reset gates fused into one matmul; rebuilt per forward so
    gradients still flow to the separate weight tensors via concat."""

    def __init__(self, cell: GruParams):
        self.w_gates = ad.concat([cell.w_update, cell.w_reset], axis=1)
        self.b_gates = ad.concat([cell.b_update, cell.b_reset], axis=0)
        self.w_cand = cell.w_cand
        self.b_cand = cell.b_cand
        self.state_dim = cell.state_dim


def _fused_gru_step(cell: _FusedGru, state: Tensor, inp: Tensor) -> Tensor:
    s = cell.state_dim
    joint = ad.concat([state, inp], axis=1)
    gates = ad.sigmoid(ad.add(ad.matmul(joint, cell.w_gates), cell.b_gates))
    z = ad.narrow(gates, 1, 0, s)
    r = ad.narrow(gates, 1, s, 2 * s)
    gated = ad.concat([ad.mul(r, state), inp], axis=1)
    cand = ad.tanh(ad.add(ad.matmul(gated, cell.w_cand), cell.b_cand))
    return ad.add(state, ad.mul(z, ad.sub(cand, state)))


def message_passing(hp: Tensor, hl: Tensor, instance: InstanceEncoding,
                    params: ModelParams, iterations: int) -> tuple[Tensor, Tensor]:
    """Alternate `iterations` rounds of path sweeps and link updates.

    Within one round every path runs the shared GRU along its link sequence
    in order (the running state after each link is that visit's message);
    afterwards every link sums its incoming messages in ascending path-id
    order and applies the link GRU. States thread through rounds, so running
    T rounds then T' more equals running T+T' at once.
    """
    if iterations == 0:
        return hp, hl
    path_cell = _FusedGru(params.path_cell)
    link_cell = _FusedGru(params.link_cell)
    for _ in range(iterations):
        messages = []
        for pos in range(instance.max_path_len):
            path_idx = instance.step_paths[pos]
            link_idx = instance.step_links[pos]
            if pos == 0:
                # every path is active at its first link
                hp_active = hp
            else:
                hp_active = ad.gather(hp, path_idx, unique=True)
            hl_active = ad.gather(hl, link_idx)
            hp_new = _fused_gru_step(path_cell, hp_active, hl_active)
            if pos == 0:
                hp = hp_new
            else:
                hp = ad.scatter_rows(hp, path_idx, hp_new)
            messages.append(hp_new)
        swept = ad.concat(messages, axis=0) if len(messages) > 1 else messages[0]
        by_link = ad.gather(swept, instance.agg_perm, unique=True)
        link_input = ad.segment_sum(by_link, instance.agg_segments, instance.n_links)
        hl = _fused_gru_step(link_cell, hl, link_input)
    return hp, hl


def sample_readout_masks(rng: np.random.Generator, n_rows: int, config: ModelConfig,
                         dtype=np.float32) -> list[np.ndarray]:
    """One 0/1 keep-mask per hidden readout layer."""
    return [
        (rng.random((n_rows, width)) >= config.dropout_rate).astype(dtype)
        for width in config.readout_hidden
    ]


def readout(hp: Tensor, params: ModelParams, config: ModelConfig,
            masks: list[np.ndarray] | None = None) -> Tensor:
    """SELU hidden layers with dropout, then a linear scalar per path.

    `masks=None` runs deterministically: dropout is skipped entirely, with no
    rescaling of the kept units.
    """
    if masks is not None and len(masks) != len(params.readout_layers):
        raise ConfigError("need one dropout mask per hidden layer")
    h = hp
    for i, (w, b) in enumerate(params.readout_layers):
        h = ad.selu(ad.add(ad.matmul(h, w), b))
        if masks is not None:
            h = ad.dropout(h, masks[i], config.dropout_rate)
    w_out, b_out = params.readout_out
    y = ad.add(ad.matmul(h, w_out), b_out)
    return ad.reshape(y, (y.shape[0],))


def forward(params: ModelParams, config: ModelConfig, instance: InstanceEncoding,
            masks: list[np.ndarray] | None = None) -> Tensor:
    hp0, hl0 = init_states(instance, config, dtype=params.dtype)
    hp, _ = message_passing(hp0, hl0, instance, params, config.iterations)
    return readout(hp, params, config, masks)


# ---------------------------------------------------------------------------
# Monte-Carlo dropout inference


@dataclass(frozen=True)
class PredictiveDistribution:
    """Raw dropout samples plus median and central 95% interval per path."""

    samples: np.ndarray   # (n_samples, n_paths)
    median: np.ndarray
    lo: np.ndarray        # 2.5th percentile
    hi: np.ndarray        # 97.5th percentile

    def __post_init__(self):
        if not (np.all(self.lo <= self.median) and np.all(self.median <= self.hi)):
            raise ConfigError("percentile bounds must bracket the median")


def predict_mc(params: ModelParams, config: ModelConfig, instance: InstanceEncoding,
               n_samples: int = 50, seed: int = 0) -> PredictiveDistribution:
    """Message passing once, then `n_samples` dropout-randomized readouts."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        hp0, hl0 = init_states(instance, config, dtype=params.dtype)
        hp, _ = message_passing(hp0, hl0, instance, params, config.iterations)
        rows = []
        for _ in range(n_samples):
            masks = sample_readout_masks(rng, instance.n_paths, config, dtype=params.dtype)
            rows.append(readout(hp, params, config, masks).data.astype(np.float64))
    samples = np.stack(rows, axis=0)
    return PredictiveDistribution(
        samples=samples,
        median=np.median(samples, axis=0),
        lo=np.percentile(samples, 2.5, axis=0),
        hi=np.percentile(samples, 97.5, axis=0),
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    meta: dict


def save_checkpoint(params: ModelParams, config: ModelConfig, path, meta: dict | None = None) -> None:
    """Header: length-prefixed JSON manifest (config, tensor names/shapes,
    format version, payload CRC-32); payload: little-endian float32 tensors
    row-major in manifest order."""
    names = params.store.names()
    payload = b"".join(
        np.ascontiguousarray(params.store[n].data, dtype="<f4").tobytes() for n in names
    )
    manifest = {
        "format_version": _CKPT_VERSION,
        "config": asdict(config),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(params.store[n].shape)} for n in names],
        "payload_crc32": binascii.crc32(payload) & 0xFFFFFFFF,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = _CKPT_MAGIC + struct.pack("<I", len(header)) + header + payload
    from .dataio import atomic_write_bytes

    atomic_write_bytes(path, blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != _CKPT_MAGIC:
        raise CorruptCheckpointError("not a checkpoint file")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise CorruptCheckpointError("truncated header")
    try:
        manifest = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"bad manifest: {exc}") from exc
    if manifest.get("format_version") != _CKPT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {manifest.get('format_version')!r}"
        )
    payload = blob[8 + header_len:]
    expected = sum(
        int(np.prod(t["shape"])) if t["shape"] else 1 for t in manifest["tensors"]
    )
    if len(payload) != expected * 4:
        raise CorruptCheckpointError("truncated payload")
    if (binascii.crc32(payload) & 0xFFFFFFFF) != manifest["payload_crc32"]:
        raise CorruptCheckpointError("payload checksum mismatch")

    cfg_dict = dict(manifest["config"])
    cfg_dict["readout_hidden"] = tuple(cfg_dict["readout_hidden"])
    config = ModelConfig(**cfg_dict)
    params = init_model_params(config, seed=0)
    offset = 0
    for t in manifest["tensors"]:
        name, shape = t["name"], tuple(t["shape"])
        if name not in params.store:
            raise CorruptCheckpointError(f"unexpected tensor {name!r}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        tensor = params.store[name]
        if tensor.data.shape != shape:
            raise CorruptCheckpointError(f"shape mismatch for {name!r}")
        tensor.data = arr.astype(np.float32).copy()
    return Checkpoint(params=params, config=config, meta=manifest.get("meta", {}))
