"""Reverse-mode automatic differentiation over dense arrays.

Exactly the operator set the message-passing model needs, plus Adam. Tensors
wrap numpy arrays (float32 by default, float64 for gradient verification) and
record a backward rule per op. Accumulation orders are fixed, so forward
passes are bit-deterministic for identical inputs and masks.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, NumericError

__all__ = [
    "Tensor",
    "CompGraph",
    "ParamStore",
    "GruParams",
    "no_grad",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "selu",
    "concat",
    "narrow",
    "dropout",
    "segment_sum",
    "gather",
    "scatter_rows",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "gru_step",
    "init_gru_params",
    "SELU_ALPHA",
    "SELU_SCALE",
]

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

_tape_enabled = True
_finite_checks = True


@contextmanager
def no_grad():
    """Disable tape recording, e.g. for inference."""
    global _tape_enabled
    prev = _tape_enabled
    _tape_enabled = False
    try:
        yield
    finally:
        _tape_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _assert_finite(data: np.ndarray, op: str) -> None:
    # cheap screen first: any NaN/Inf poisons the sum
    if data.size and not math.isfinite(float(data.sum())):
        if not np.isfinite(data).all():
            raise NumericError(f"non-finite values in output of {op}")


class Tensor:
    """Dense array node. Leaf tensors may require gradients; op results
    inherit gradient tracking from their parents while the tape is enabled."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _finite_checks:
        _assert_finite(data, op)
    out = Tensor(data)
    if _tape_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    first = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != first:
            raise ConfigError(f"{op}: mixed dtypes {first} vs {t.data.dtype}")


# ---------------------------------------------------------------------------
# elementary ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g @ b.data.T)
        if b.requires_grad or b._parents:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backward_fn, "matmul")


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes("add", a, b)
    if b.data.shape != a.data.shape:
        # only bias-style broadcast: 1-D or scalar added to the last axis
        if not (b.data.ndim == 0 or (b.data.ndim == 1 and a.data.shape[-1] == b.data.shape[0])):
            raise ConfigError(f"add: incompatible shapes {a.shape} + {b.shape}")
    data = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            if b.data.shape == g.shape:
                b._accumulate(g)
            elif b.data.ndim == 0:
                b._accumulate(np.asarray(g.sum(), dtype=g.dtype))
            else:
                b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(data, (a, b), backward_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes("sub", a, b)
    if a.data.shape != b.data.shape and b.data.ndim != 0:
        raise ConfigError(f"sub: incompatible shapes {a.shape} - {b.shape}")
    data = a.data - b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            if b.data.ndim == 0:
                b._accumulate(np.asarray(-g.sum(), dtype=g.dtype))
            else:
                b._accumulate(-g)

    return _result(data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a python scalar."""
    b = _as_tensor(b, a)
    _check_dtypes("mul", a, b)
    if a.data.shape != b.data.shape and b.data.ndim != 0:
        raise ConfigError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    data = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g * b.data)
        if b.requires_grad or b._parents:
            if b.data.ndim == 0:
                b._accumulate(np.asarray((g * a.data).sum(), dtype=g.dtype))
            else:
                b._accumulate(g * a.data)

    return _result(data, (a, b), backward_fn, "mul")


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable two-sided form, one exp evaluation
    x = a.data
    t = np.exp(-np.abs(x))
    t /= 1.0 + t
    data = np.where(x >= 0, 1.0 - t, t).astype(x.dtype, copy=False)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), backward_fn, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g * (1.0 - data * data))

    return _result(data, (a,), backward_fn, "tanh")


def selu(a: Tensor) -> Tensor:
    x = a.data
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    data = (SELU_SCALE * np.where(x > 0, x, neg)).astype(x.dtype, copy=False)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            # for x <= 0: d/dx = scale * alpha * exp(x) = scale*alpha + neg*scale
            deriv = np.where(x > 0, SELU_SCALE, SELU_SCALE * (SELU_ALPHA + neg))
            a._accumulate(g * deriv.astype(x.dtype, copy=False))

    return _result(data, (a,), backward_fn, "selu")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ConfigError("concat: need at least one tensor")
    _check_dtypes("concat", *tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward_fn(g: np.ndarray) -> None:
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                t._accumulate(g[tuple(idx)])
            offset += size

    return _result(data, tuple(tensors), backward_fn, "concat")


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    return _result(data, (a,), backward_fn, "narrow")


def dropout(a: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with an explicit pre-sampled 0/1 mask.

    Kept units are scaled by 1/(1-rate), so training and Monte-Carlo
    inference share one code path.
    """
    if not (0.0 <= rate < 1.0):
        raise ConfigError("dropout rate must be in [0, 1)")
    mask = np.asarray(mask, dtype=a.data.dtype)
    if mask.shape != a.data.shape:
        raise ConfigError(f"dropout: mask shape {mask.shape} != input shape {a.shape}")
    scale = a.data.dtype.type(1.0 / (1.0 - rate))
    scaled = mask * scale
    data = a.data * scaled

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g * scaled)

    return _result(data, (a,), backward_fn, "dropout")


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows into segments; empty segments yield zeros.

    `segment_ids` must be non-decreasing so every segment is accumulated in
    ascending row order (bit-reproducible).
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != a.data.shape[0]:
        raise ConfigError("segment_sum: need one id per leading row")
    if ids.size and (np.any(np.diff(ids) < 0) or ids[0] < 0 or ids[-1] >= num_segments):
        raise ConfigError("segment_sum: ids must be sorted and within range")
    out_shape = (num_segments,) + a.data.shape[1:]
    data = np.zeros(out_shape, dtype=a.data.dtype)
    if ids.size:
        # ids are sorted, so each segment is one contiguous slice
        present, starts = np.unique(ids, return_index=True)
        data[present] = np.add.reduceat(a.data, starts, axis=0)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g[ids])

    return _result(data, (a,), backward_fn, "segment_sum")


def gather(a: Tensor, indices: np.ndarray, unique: bool = False) -> Tensor:
    """Select leading-axis rows by index.

    Set `unique` only when the indices are known distinct; the backward pass
    then scatters by assignment instead of accumulation.
    """
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            full = np.zeros_like(a.data)
            if unique:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accumulate(full)

    return _result(data, (a,), backward_fn, "gather")


def scatter_rows(base: Tensor, indices: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of `base` with `rows` written at the given leading-axis indices.

    Indices must be distinct; each written row fully replaces the old one.
    """
    _check_dtypes("scatter_rows", base, rows)
    idx = np.asarray(indices, dtype=np.int64)
    data = base.data.copy()
    data[idx] = rows.data

    def backward_fn(g: np.ndarray) -> None:
        if rows.requires_grad or rows._parents:
            rows._accumulate(g[idx])
        if base.requires_grad or base._parents:
            gb = g.copy()
            gb[idx] = 0.0
            base._accumulate(gb)

    return _result(data, (base, rows), backward_fn, "scatter_rows")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(g.reshape(a.data.shape))

    return _result(data, (a,), backward_fn, "reshape")


def tensor_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _result(data, (a,), backward_fn, "sum")


def tensor_mean(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ConfigError("mean of an empty tensor")
    inv = a.data.dtype.type(1.0 / a.data.size)
    data = np.asarray(a.data.sum() * inv, dtype=a.data.dtype)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a._accumulate(np.broadcast_to(g * inv, a.data.shape).astype(a.data.dtype, copy=False))

    return _result(data, (a,), backward_fn, "mean")


# ---------------------------------------------------------------------------
# backward pass


class CompGraph:
    """Topologically ordered op nodes reachable from one output tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "CompGraph":
        # iterative post-order DFS; graphs can be thousands of nodes deep
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, output: Tensor) -> None:
        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def backward(output: Tensor) -> None:
    """Reverse-mode gradients of a scalar output into leaf `.grad` fields."""
    if output.data.size != 1:
        raise ConfigError("backward requires a scalar output")
    CompGraph.from_output(output).run_backward(output)


# ---------------------------------------------------------------------------
# GRU cell


class GruParams:
    """Weights of one GRU cell over the [state, input] concatenation."""

    def __init__(self, w_update: Tensor, b_update: Tensor, w_reset: Tensor,
                 b_reset: Tensor, w_cand: Tensor, b_cand: Tensor):
        state_dim = w_update.shape[1]
        joint = w_update.shape[0]
        for w in (w_reset, w_cand):
            if w.shape != (joint, state_dim):
                raise ConfigError("GRU weight shapes inconsistent")
        for b in (b_update, b_reset, b_cand):
            if b.shape != (state_dim,):
                raise ConfigError("GRU bias shapes inconsistent")
        self.w_update, self.b_update = w_update, b_update
        self.w_reset, self.b_reset = w_reset, b_reset
        self.w_cand, self.b_cand = w_cand, b_cand
        self.state_dim = state_dim
        self.input_dim = joint - state_dim

    def tensors(self) -> dict[str, Tensor]:
        return {
            "w_update": self.w_update, "b_update": self.b_update,
            "w_reset": self.w_reset, "b_reset": self.b_reset,
            "w_cand": self.w_cand, "b_cand": self.b_cand,
        }


def init_gru_params(state_dim: int, input_dim: int, rng: np.random.Generator,
                    dtype=np.float32) -> GruParams:
    """Uniform [-s, s] init with s = 1/sqrt(fan_in) for every tensor."""
    joint = state_dim + input_dim
    s = 1.0 / math.sqrt(joint)

    def new(shape):
        return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)

    return GruParams(
        w_update=new((joint, state_dim)), b_update=new((state_dim,)),
        w_reset=new((joint, state_dim)), b_reset=new((state_dim,)),
        w_cand=new((joint, state_dim)), b_cand=new((state_dim,)),
    )


def gru_step(params: GruParams, state: Tensor, inp: Tensor) -> Tensor:
    """One GRU update; the output equals the new state.

    update z = sigmoid([s, i] W_z + b_z)
    reset  r = sigmoid([s, i] W_r + b_r)
    cand   c = tanh([r*s, i] W_c + b_c)
    next   s' = (1 - z)*s + z*c
    """
    if state.data.ndim != 2 or inp.data.ndim != 2:
        raise ConfigError("gru_step expects 2-D state and input")
    if state.data.shape[1] != params.state_dim or inp.data.shape[1] != params.input_dim:
        raise ConfigError(
            f"gru_step: got state {state.shape}, input {inp.shape} for cell "
            f"({params.state_dim}, {params.input_dim})"
        )
    joint = concat([state, inp], axis=1)
    z = sigmoid(add(matmul(joint, params.w_update), params.b_update))
    r = sigmoid(add(matmul(joint, params.w_reset), params.b_reset))
    gated = concat([mul(r, state), inp], axis=1)
    cand = tanh(add(matmul(gated, params.w_cand), params.b_cand))
    # (1 - z)*s + z*c  ==  s + z*(c - s)
    return add(state, mul(z, sub(cand, state)))


# ---------------------------------------------------------------------------
# parameter store + Adam


class ParamStore:
    """Named trainable tensors with per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}

    def add(self, name: str, tensor: Tensor, decay: bool) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._decay[name] = decay
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        self._steps[name] = 0
        return tensor

    def add_gru(self, prefix: str, params: GruParams) -> GruParams:
        for key, t in params.tensors().items():
            self.add(f"{prefix}.{key}", t, decay=key.startswith("w_"))
        return params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def decay_tensors(self) -> list[Tensor]:
        """Weight matrices subject to L2 regularization (biases excluded)."""
        return [t for n, t in self._params.items() if self._decay[n]]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def collect_grads(self) -> dict[str, np.ndarray]:
        """Gradients after a backward pass; untouched parameters get zeros."""
        out = {}
        for name, t in self._params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def adam_update(self, grads: dict[str, np.ndarray], lr: float,
                    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        """Standard bias-corrected Adam step on every parameter in `grads`."""
        for name, g in grads.items():
            if name not in self._params:
                raise ConfigError(f"unknown parameter {name!r}")
            p = self._params[name]
            if g.shape != p.data.shape:
                raise ConfigError(f"gradient shape mismatch for {name!r}")
            g = g.astype(p.data.dtype, copy=False)
            self._steps[name] += 1
            t = self._steps[name]
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)

    def step_count(self, name: str) -> int:
        return self._steps[name]
