"""Minimal dense-tensor engine with reverse-mode differentiation.

Primitives operate on :class:`Tensor` wrappers around float64 numpy
arrays. While a :class:`Tape` is active (``with Tape():``) every
primitive whose inputs require gradients appends a backward record;
:func:`backward` replays the records in reverse creation order and
accumulates gradients into every reachable tensor with
``requires_grad``. There is no graph pruning, no broadcasting beyond
what the models here need, and no higher-order support.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "DimensionError",
    "ContractError",
    "backward",
    "OptimizerState",
    "sgd",
    "adam",
    "step",
    "zero_grads",
    "add",
    "mul",
    "matmul",
    "concat",
    "embedding_lookup",
    "relu",
    "sigmoid",
    "tanh",
    "reshape",
    "sum_tensor",
    "mean",
    "slice_vec",
    "pick",
    "log_softmax",
    "elementwise",
    "BatchNormState",
    "batchnorm",
    "dropout",
]


class TensorError(Exception):
    pass


class DimensionError(TensorError):
    pass


class ContractError(TensorError):
    pass


class Tensor:
    __slots__ = ("val", "requires_grad", "grad", "decay", "_tape")

    def __init__(self, val, requires_grad: bool = False, decay: bool = True):
        self.val = np.asarray(val, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.decay = decay  # False exempts the tensor from l2 decay (biases)
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.val.shape

    def __repr__(self):
        return f"Tensor(shape={self.val.shape}, requires_grad={self.requires_grad})"


_STACK = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._records)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.val.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.val)
    t.grad += g


def _make(val, inputs, backward_fn) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(val, requires_grad=req)
    tape = _active_tape()
    if tape is not None and req:
        out._tape = tape
        tape._records.append((out, backward_fn))
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/dp into ``grad`` of every tensor on the path."""
    if root.val.ndim != 0 and root.val.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.val.shape}")
    tape = root._tape
    if tape is None:
        raise ContractError("root was not produced on an active tape")
    _accum(root, np.ones_like(root.val))
    for out, fn in reversed(tape._records):
        if out.grad is None:
            continue
        fn(out.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# --- primitives -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        val = a.val + b.val
    except ValueError as e:
        raise DimensionError(f"add: {a.val.shape} vs {b.val.shape}") from e

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(val, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        val = a.val * b.val
    except ValueError as e:
        raise DimensionError(f"mul: {a.val.shape} vs {b.val.shape}") from e

    def bwd(g):
        _accum(a, g * b.val)
        _accum(b, g * a.val)

    return _make(val, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.val.shape[-1] != b.val.shape[0]:
        raise DimensionError(f"matmul: {a.val.shape} @ {b.val.shape}")
    val = a.val @ b.val

    def bwd(g):
        if a.val.ndim == 1:
            _accum(a, g @ b.val.T)
            _accum(b, np.outer(a.val, g))
        else:
            _accum(a, g @ b.val.T)
            _accum(b, a.val.T @ g)

    return _make(val, (a, b), bwd)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if a.val.ndim != b.val.ndim:
        raise DimensionError(f"concat: {a.val.shape} vs {b.val.shape}")
    val = np.concatenate([a.val, b.val], axis=axis)
    split = a.val.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accum(a, ga)
        _accum(b, gb)

    return _make(val, (a, b), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.val.shape[0]):
        raise DimensionError(
            f"embedding_lookup: id out of range [0, {table.val.shape[0]})"
        )
    val = table.val[ids]

    def bwd(g):
        if not table.requires_grad:
            return
        buf = np.zeros_like(table.val)
        np.add.at(buf, ids, g)
        _accum(table, buf)

    return _make(val, (table,), bwd)


def relu(x: Tensor) -> Tensor:
    val = np.maximum(x.val, 0.0)

    def bwd(g):
        _accum(x, g * (x.val > 0.0))

    return _make(val, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form avoids exp overflow at extreme magnitudes
    pos = x.val >= 0
    e = np.exp(np.where(pos, -x.val, x.val))
    val = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        _accum(x, g * val * (1.0 - val))

    return _make(val, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    val = np.tanh(x.val)

    def bwd(g):
        _accum(x, g * (1.0 - val * val))

    return _make(val, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    val = x.val.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.val.shape))

    return _make(val, (x,), bwd)


def sum_tensor(x: Tensor, axis: int | None = None) -> Tensor:
    val = x.val.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accum(x, np.full_like(x.val, float(g)))
        else:
            _accum(x, np.expand_dims(g, axis) * np.ones_like(x.val))

    return _make(val, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    n = x.val.size
    val = x.val.mean()

    def bwd(g):
        _accum(x, np.full_like(x.val, float(g) / n))

    return _make(val, (x,), bwd)


def slice_vec(x: Tensor, start: int, stop: int) -> Tensor:
    if x.val.ndim != 1:
        raise DimensionError("slice_vec expects a 1-d tensor")
    val = x.val[start:stop]

    def bwd(g):
        buf = np.zeros_like(x.val)
        buf[start:stop] = g
        _accum(x, buf)

    return _make(val, (x,), bwd)


def pick(x: Tensor, index: int) -> Tensor:
    if x.val.ndim != 1:
        raise DimensionError("pick expects a 1-d tensor")
    val = x.val[index]

    def bwd(g):
        buf = np.zeros_like(x.val)
        buf[index] = g
        _accum(x, buf)

    return _make(val, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    if x.val.ndim != 1:
        raise DimensionError("log_softmax expects a 1-d tensor")
    m = x.val.max()
    z = x.val - m
    lse = np.log(np.exp(z).sum())
    val = z - lse
    soft = np.exp(val)

    def bwd(g):
        _accum(x, g - soft * g.sum())

    return _make(val, (x,), bwd)


def elementwise(x: Tensor, fn, deriv_fn) -> Tensor:
    """Custom elementwise map with caller-supplied derivative."""
    val = fn(x.val)
    dval = None

    def bwd(g):
        nonlocal dval
        if dval is None:
            dval = deriv_fn(x.val)
        _accum(x, g * dval)

    return _make(val, (x,), bwd)


@dataclass
class BatchNormState:
    """Running statistics owned by the model, mutated in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def for_width(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    if x.val.ndim != 2:
        raise DimensionError("batchnorm expects a 2-d batch")
    if mode == "train":
        mu = x.val.mean(axis=0)
        var = x.val.var(axis=0)
        n = x.val.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        state.mean[:] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[:] = (1.0 - momentum) * state.var + momentum * unbiased
    elif mode == "eval":
        mu = state.mean
        var = state.var
    else:
        raise ContractError(f"batchnorm mode must be train/eval, got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.val - mu) * inv_std
    val = gamma.val * xhat + beta.val

    def bwd(g):
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        if not x.requires_grad:
            return
        dxhat = g * gamma.val
        if mode == "eval":
            _accum(x, dxhat * inv_std)
            return
        n = x.val.shape[0]
        centered = x.val - mu
        dvar = (dxhat * centered * -0.5 * inv_std**3).sum(axis=0)
        dmu = (-dxhat * inv_std).sum(axis=0) + dvar * (-2.0 * centered).mean(axis=0)
        _accum(x, dxhat * inv_std + dvar * 2.0 * centered / n + dmu / n)

    return _make(val, (x, gamma, beta), bwd)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    if mode == "eval" or rate == 0.0:
        return x  # inverted dropout: eval is the identity
    if mode != "train":
        raise ContractError(f"dropout mode must be train/eval, got {mode!r}")
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    mask = (rng.random(x.val.shape) >= rate) / (1.0 - rate)
    val = x.val * mask

    def bwd(g):
        _accum(x, g * mask)

    return _make(val, (x,), bwd)


# --- optimizers ------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    l2: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def sgd(lr: float = 0.01, l2: float = 1e-5) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr, l2=l2)


def adam(lr: float = 0.001, l2: float = 1e-5) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, l2=l2)


def step(opt: OptimizerState, params) -> None:
    """Apply one update to every parameter, then clear gradients."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError("step: parameter has no gradient")
    if opt.kind == "adam" and not opt.m:
        opt.m = [np.zeros_like(p.val) for p in params]
        opt.v = [np.zeros_like(p.val) for p in params]
    if opt.kind == "adam":
        if len(opt.m) != len(params):
            raise ContractError("step: optimizer state does not match parameter list")
        opt.step_count += 1
        b1, b2 = opt.beta1, opt.beta2
        for idx, p in enumerate(params):
            if opt.m[idx].shape != p.val.shape:
                raise ContractError("step: moment buffer shape mismatch")
            g = p.grad + opt.l2 * p.val if p.decay else p.grad
            opt.m[idx] = b1 * opt.m[idx] + (1.0 - b1) * g
            opt.v[idx] = b2 * opt.v[idx] + (1.0 - b2) * g * g
            mhat = opt.m[idx] / (1.0 - b1**opt.step_count)
            vhat = opt.v[idx] / (1.0 - b2**opt.step_count)
            p.val -= opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
            p.grad = None
    elif opt.kind == "sgd":
        opt.step_count += 1
        for p in params:
            g = p.grad + opt.l2 * p.val if p.decay else p.grad
            p.val -= opt.lr * g
            p.grad = None
    else:
        raise ContractError(f"unknown optimizer kind {opt.kind!r}")
