"""Loss, the training loop with its two-phase learning-rate schedule,
transfer learning between metrics, and evaluation statistics.

Labels are z-scored with training-set statistics before the squared loss;
the statistics ride in the checkpoint metadata so predictions can be mapped
back to natural units at evaluation time.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .dataio import DatasetRecord, atomic_write_text
from .errors import ConfigError, DataError, NumericError

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EvalReport",
    "loss",
    "train",
    "transfer_to_jitter",
    "evaluate",
    "r_squared",
    "pearson_rho",
]

TARGETS = ("delay", "jitter")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    lr: float = 0.001
    lr_after: float = 0.0003
    lr_switch_step: int = 60000
    l2_lambda: float = 0.1
    eval_every: int = 1000
    seed: int = 0
    early_fraction: float = 0.1   # where the transfer-init checkpoint is taken
    smoothing: float = 0.95       # display-only EMA for the loss curve

    def __post_init__(self):
        if min(self.total_steps, self.batch_size, self.eval_every, self.lr_switch_step) < 1:
            raise ConfigError("steps, batch size, eval interval, and switch step must be positive")
        if self.lr <= 0 or self.lr_after <= 0 or self.l2_lambda < 0:
            raise ConfigError("learning rates must be positive, l2_lambda nonnegative")
        if not self.lr_after < self.lr:
            raise ConfigError("lr_after must be below the initial lr")
        if not (0.0 < self.early_fraction < 1.0):
            raise ConfigError("early_fraction must be in (0, 1)")

    def lr_at(self, step: int) -> float:
        return self.lr if step < self.lr_switch_step else self.lr_after


def loss(predictions: Tensor, targets, decay_params: list[Tensor], l2_lambda: float) -> Tensor:
    """Mean squared error over all path predictions plus L2 on the weights.

    Biases are excluded from the regularizer by construction: callers pass
    only weight matrices in `decay_params`.
    """
    t = targets if isinstance(targets, Tensor) else Tensor(
        np.asarray(targets, dtype=predictions.data.dtype))
    if t.data.shape != predictions.data.shape:
        raise ConfigError(
            f"predictions {predictions.shape} and targets {t.data.shape} must align")
    diff = ad.sub(predictions, t)
    total = ad.tensor_mean(ad.mul(diff, diff))
    if l2_lambda > 0 and decay_params:
        reg = ad.tensor_sum(ad.mul(decay_params[0], decay_params[0]))
        for w in decay_params[1:]:
            reg = ad.add(reg, ad.tensor_sum(ad.mul(w, w)))
        total = ad.add(total, ad.mul(reg, float(l2_lambda)))
    return total


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class _Prepared:
    encodings: list[mdl.InstanceEncoding]
    targets: list[np.ndarray]            # standardized, float64
    label_mean: float
    label_std: float
    input_scale: float


def _structure_key(record: DatasetRecord):
    topo = record.topology
    return (
        topo.node_count,
        tuple((l.id, l.src, l.dst, l.capacity) for l in topo.links),
        record.routing.canonical_key(),
    )


def _prepare(records: list[DatasetRecord], config: mdl.ModelConfig, target: str,
             label_mean: float | None = None, label_std: float | None = None) -> _Prepared:
    if not records:
        raise DataError("empty dataset")
    if target not in TARGETS:
        raise ConfigError(f"target must be one of {TARGETS}")
    labels = [
        np.asarray(rec.delay if target == "delay" else rec.jitter, dtype=np.float64)
        for rec in records
    ]
    pooled = np.concatenate(labels)
    if label_mean is None:
        label_mean = float(pooled.mean())
        label_std = float(pooled.std())
        if label_std == 0.0:
            raise DataError("labels have zero variance")
    input_scale = config.input_scale

    structures: dict = {}
    encodings = []
    for rec in records:
        key = _structure_key(rec)
        base = structures.get(key)
        if base is None:
            base = mdl.encode_instance(rec.topology, rec.routing, rec.tm, config)
            structures[key] = base
        pairs = base.pairs
        x = np.asarray([rec.tm.rate(s, d) for s, d in pairs], dtype=np.float64) / input_scale
        encodings.append(dataclasses.replace(base, x_path=x))
    targets = [(lab - label_mean) / label_std for lab in labels]
    return _Prepared(encodings, targets, label_mean, label_std, input_scale)


def compute_input_scale(records: list[DatasetRecord]) -> float:
    """Default feature scale: the largest demand in the training set."""
    peak = max(float(rec.tm.demand.max()) for rec in records)
    if peak <= 0:
        raise DataError("all demands are zero")
    return peak


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: mdl.ModelParams
    config: mdl.ModelConfig
    meta: dict
    loss_curve: list[tuple[int, float, float]]   # (step, mse, smoothed mse)
    checkpoint_path: str | None = None
    early_checkpoint_path: str | None = None

    def loss_curve_csv(self) -> str:
        rows = ["step,mse,smoothed_mse"]
        rows += [f"{s},{m!r},{e!r}" for s, m, e in self.loss_curve]
        return "\n".join(rows) + "\n"


def train(records: list[DatasetRecord], model_config: mdl.ModelConfig,
          train_config: TrainConfig, target: str = "delay",
          init_params: mdl.ModelParams | None = None,
          meta_overrides: dict | None = None,
          out_dir: str | None = None, auto_scale: bool = True) -> TrainResult:
    """Adam SGD over random batches with the two-phase lr schedule.

    Deterministic per (records, configs, seed). A non-finite loss aborts with
    the failing step and batch seed in the message. When `out_dir` is given,
    an early-stage checkpoint (at `early_fraction` of the steps) and the
    final checkpoint are written there.
    """
    if auto_scale and init_params is None:
        model_config = dataclasses.replace(model_config, input_scale=compute_input_scale(records))
    mean = std = None
    if meta_overrides and "label_mean" in meta_overrides:
        mean = meta_overrides["label_mean"]
        std = meta_overrides["label_std"]
    prep = _prepare(records, model_config, target, mean, std)
    params = init_params if init_params is not None else mdl.init_model_params(
        model_config, seed=train_config.seed)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=train_config.seed,
                                                       spawn_key=(7,)))
    n = len(prep.encodings)
    early_step = max(1, int(round(train_config.early_fraction * train_config.total_steps)))
    meta = {
        "target": target,
        "label_mean": prep.label_mean,
        "label_std": prep.label_std,
        "train_steps": train_config.total_steps,
        "train_seed": train_config.seed,
    }
    if meta_overrides:
        meta.update(meta_overrides)

    curve: list[tuple[int, float, float]] = []
    smooth = None
    early_path = final_path = None
    dtype = params.dtype

    for step in range(train_config.total_steps):
        batch_idx = rng.integers(0, n, size=train_config.batch_size)
        merged = mdl.merge_instances([prep.encodings[i] for i in batch_idx])
        targets = np.concatenate([prep.targets[i] for i in batch_idx]).astype(dtype)
        masks = mdl.sample_readout_masks(rng, merged.n_paths, model_config, dtype)

        params.store.zero_grad()
        preds = mdl.forward(params, model_config, merged, masks)
        mse = float(np.mean((preds.data.astype(np.float64) - targets.astype(np.float64)) ** 2))
        total = loss(preds, targets, params.store.decay_tensors(), train_config.l2_lambda)
        if not math.isfinite(total.item()):
            raise NumericError(
                f"non-finite loss at step {step} (train seed {train_config.seed})")
        ad.backward(total)
        params.store.adam_update(params.store.collect_grads(), train_config.lr_at(step))

        smooth = mse if smooth is None else (
            train_config.smoothing * smooth + (1.0 - train_config.smoothing) * mse)
        curve.append((step, mse, smooth))

        if out_dir and step + 1 == early_step:
            early_path = os.path.join(out_dir, f"{target}-early.ckpt")
            mdl.save_checkpoint(params, model_config, early_path,
                                meta={**meta, "train_steps": step + 1, "stage": "early"})

    if out_dir:
        final_path = os.path.join(out_dir, f"{target}-final.ckpt")
        mdl.save_checkpoint(params, model_config, final_path, meta=meta)
        atomic_write_text(os.path.join(out_dir, f"{target}-loss.csv"),
                          TrainResult(params, model_config, meta, curve).loss_curve_csv())

    return TrainResult(params=params, config=model_config, meta=meta, loss_curve=curve,
                       checkpoint_path=final_path, early_checkpoint_path=early_path)


def transfer_to_jitter(delay_checkpoint: str, records: list[DatasetRecord],
                       train_config: TrainConfig, out_dir: str | None = None) -> TrainResult:
    """Retarget a (typically early-stage) delay model to jitter labels.

    The trunk and readout initialize from the delay checkpoint; jitter labels
    get their own standardization since they span a different range.
    """
    ckpt = mdl.load_checkpoint(delay_checkpoint)
    if ckpt.meta.get("target") != "delay":
        raise ConfigError("transfer expects a delay checkpoint")
    return train(
        records, ckpt.config, train_config, target="jitter",
        init_params=ckpt.params,
        meta_overrides={"initialized_from": os.path.basename(str(delay_checkpoint))},
        out_dir=out_dir, auto_scale=False,
    )


# ---------------------------------------------------------------------------
# evaluation


def r_squared(targets: np.ndarray, predictions: np.ndarray) -> float:
    """Fraction of target variance explained: 1 - SS_res / SS_tot."""
    y = np.asarray(targets, dtype=np.float64)
    f = np.asarray(predictions, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("zero-variance targets: r-squared undefined")
    return 1.0 - float(np.sum((y - f) ** 2)) / ss_tot


def pearson_rho(targets: np.ndarray, predictions: np.ndarray) -> float:
    y = np.asarray(targets, dtype=np.float64)
    f = np.asarray(predictions, dtype=np.float64)
    yc = y - y.mean()
    fc = f - f.mean()
    denom = math.sqrt(float(np.sum(yc * yc)) * float(np.sum(fc * fc)))
    if denom == 0.0:
        raise DataError("zero-variance inputs: correlation undefined")
    return float(np.sum(yc * fc)) / denom


REL_ERR_PERCENTILES = (1, 5, 10, 25, 50, 75, 90, 95, 99)


@dataclass
class EvalReport:
    r_squared: float
    pearson_rho: float
    rel_err_quantiles: list[tuple[int, float]]
    per_sample: list[tuple[int, float, float]] = field(repr=False)  # (idx, mean rel err, rmse)
    n_samples: int = 0
    n_points: int = 0

    def __post_init__(self):
        if self.r_squared > 1.0 + 1e-12:
            raise NumericError("r_squared above 1")
        if not -1.0 - 1e-12 <= self.pearson_rho <= 1.0 + 1e-12:
            raise NumericError("pearson rho outside [-1, 1]")

    def summary_text(self) -> str:
        lines = [
            f"samples:   {self.n_samples}",
            f"points:    {self.n_points}",
            f"r_squared: {self.r_squared:.6f}",
            f"pearson:   {self.pearson_rho:.6f}",
            "relative error quantiles:",
        ]
        lines += [f"  p{q:02d}: {v:+.6f}" for q, v in self.rel_err_quantiles]
        return "\n".join(lines) + "\n"

    def residuals_csv(self) -> str:
        rows = ["sample,mean_rel_err,rmse"]
        rows += [f"{i},{m!r},{r!r}" for i, m, r in self.per_sample]
        return "\n".join(rows) + "\n"


def predict_records(ckpt: mdl.Checkpoint, records: list[DatasetRecord],
                    n_mc: int = 50, seed: int = 0) -> list[np.ndarray]:
    """Per-record MC-dropout median predictions in natural label units."""
    mean = float(ckpt.meta["label_mean"])
    std = float(ckpt.meta["label_std"])
    out = []
    for i, rec in enumerate(records):
        enc = mdl.encode_instance(rec.topology, rec.routing, rec.tm, ckpt.config)
        mc_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i,))
                      .generate_state(1, np.uint64)[0])
        dist = mdl.predict_mc(ckpt.params, ckpt.config, enc, n_samples=n_mc, seed=mc_seed)
        out.append(mean + std * dist.median)
    return out


def evaluate(checkpoint: mdl.Checkpoint | str, records: list[DatasetRecord],
             n_mc: int = 50, seed: int = 0) -> EvalReport:
    """MC-dropout median predictions scored by R^2, Pearson correlation, and
    the relative-error distribution, pooled over every pair of every sample."""
    if not records:
        raise DataError("empty evaluation dataset")
    ckpt = mdl.load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    target = ckpt.meta.get("target", "delay")
    preds = predict_records(ckpt, records, n_mc=n_mc, seed=seed)

    per_sample = []
    all_y, all_f = [], []
    for i, (rec, f) in enumerate(zip(records, preds)):
        y = np.asarray(rec.delay if target == "delay" else rec.jitter, dtype=np.float64)
        all_y.append(y)
        all_f.append(f)
        rel = (f - y) / y
        per_sample.append((i, float(np.mean(np.abs(rel))), float(np.sqrt(np.mean((f - y) ** 2)))))
    y = np.concatenate(all_y)
    f = np.concatenate(all_f)
    rel = (f - y) / y
    quants = [(q, float(np.percentile(rel, q))) for q in REL_ERR_PERCENTILES]
    return EvalReport(
        r_squared=r_squared(y, f),
        pearson_rho=pearson_rho(y, f),
        rel_err_quantiles=quants,
        per_sample=per_sample,
        n_samples=len(records),
        n_points=int(y.size),
    )
