"""Minimal dense-tensor math with reverse-mode gradients for every model primitive.

Tensors wrap float64 numpy arrays. Ops build a tape only when an input
requires gradients, so frozen subgraphs run as plain numpy. Every
primitive's backward contribution passes through a per-op scale hook
(`corrupt_backward`) so a verification harness can mutate any single
backward and confirm the finite-difference checker catches it.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import HeadDivisibility, NonScalarOutput, ShapeMismatch

# Ops with a hand-written backward; the mutation sweep iterates this set.
PRIMITIVE_OPS = frozenset(
    {
        "add",
        "mul",
        "scale",
        "matmul",
        "matvec",
        "transpose",
        "gelu",
        "softmax_rows",
        "layer_norm",
        "mean_pool_rows",
        "concat_rows",
        "concat_cols",
        "concat_vecs",
        "slice_cols",
        "slice_rows",
        "sum_all",
        "weighted_ce",
    }
)

_BACKWARD_SCALE: dict[str, float] = {}


def _bscale(op: str) -> float:
    return _BACKWARD_SCALE.get(op, 1.0)


@contextmanager
def corrupt_backward(op: str, factor: float):
    """Scale one primitive's backward by `factor` inside the context (testing aid)."""
    if op not in PRIMITIVE_OPS:
        raise KeyError(f"unknown primitive {op!r}")
    _BACKWARD_SCALE[op] = factor
    try:
        yield
    finally:
        _BACKWARD_SCALE.pop(op, None)


_F64 = np.dtype(np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), op: str = "leaf"):
        if type(data) is np.ndarray and data.dtype == _F64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = _prev
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Reverse pass from a scalar output; accumulates into .grad of leaves."""
        if self.data.shape != ():
            raise NonScalarOutput(f"backward needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(1.0)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """Named tensor; the optimizer only ever updates trainable ones."""

    name: str
    tensor: Tensor
    trainable: bool = True

    @staticmethod
    def create(name: str, data, trainable: bool = True) -> "Parameter":
        return Parameter(name, Tensor(data, requires_grad=trainable), trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# When set, ops skip tape construction entirely (used for finite-difference
# sweeps, where only forward values matter). List cell keeps it mutable for
# the context manager without a global statement.
_NO_GRAD = [False]


@contextmanager
def no_grad():
    prev = _NO_GRAD[0]
    _NO_GRAD[0] = True
    try:
        yield
    finally:
        _NO_GRAD[0] = prev


def _make(data, op, prev, backward) -> Tensor:
    req = False
    if not _NO_GRAD[0]:
        for t in prev:
            if t.requires_grad:
                req = True
                break
    out = Tensor(data, requires_grad=req, _prev=tuple(prev) if req else (), op=op)
    if req:
        out._backward = backward(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(out):
        def run():
            g = out.grad * _bscale("add")
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        return run

    return _make(data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(out):
        def run():
            g = out.grad * _bscale("mul")
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        return run

    return _make(data, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        def run():
            a._accumulate(out.grad * c * _bscale("scale"))
        return run

    return _make(a.data * c, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(out):
        def run():
            g = out.grad * _bscale("matmul")
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        return run

    return _make(data, "matmul", (a, b), backward)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    """(m x n) @ (n,) -> (m,)."""
    a, x = as_tensor(a), as_tensor(x)
    if a.data.ndim != 2 or x.data.ndim != 1 or a.data.shape[1] != x.data.shape[0]:
        raise ShapeMismatch(f"matvec: incompatible shapes {a.shape} x {x.shape}")
    data = a.data @ x.data

    def backward(out):
        def run():
            g = out.grad * _bscale("matvec")
            if a.requires_grad:
                a._accumulate(np.outer(g, x.data))
            if x.requires_grad:
                x._accumulate(a.data.T @ g)
        return run

    return _make(data, "matvec", (a, x), backward)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose: need 2-D, got {a.shape}")

    def backward(out):
        def run():
            a._accumulate(out.grad.T * _bscale("transpose"))
        return run

    return _make(a.data.T, "transpose", (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact erf formulation: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    data = x * phi_cdf

    def backward(out):
        def run():
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            a._accumulate(out.grad * (phi_cdf + x * pdf) * _bscale("gelu"))
        return run

    return _make(data, "gelu", (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with mandatory max subtraction."""
    a = as_tensor(a)
    x = a.data
    if x.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: need 2-D, got {a.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(out):
        def run():
            g = out.grad
            dx = (g - (g * y).sum(axis=1, keepdims=True)) * y
            a._accumulate(dx * _bscale("softmax_rows"))
        return run

    return _make(y, "softmax_rows", (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    if x.ndim != 2:
        raise ShapeMismatch(f"layer_norm: need 2-D, got {a.shape}")
    n = x.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeMismatch(f"layer_norm: gain/bias must be ({n},)")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(out):
        def run():
            g = out.grad * _bscale("layer_norm")
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))
            if a.requires_grad:
                dxhat = g * gain.data
                dx = inv * (
                    dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
                )
                a._accumulate(dx)
        return run

    return _make(data, "layer_norm", (a, gain, bias), backward)


def mean_pool_rows(a: Tensor) -> Tensor:
    """m x n -> n: unweighted mean over rows."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"mean_pool_rows: need 2-D, got {a.shape}")
    m = a.data.shape[0]

    def backward(out):
        def run():
            g = out.grad * (_bscale("mean_pool_rows") / m)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        return run

    return _make(a.data.mean(axis=0), "mean_pool_rows", (a,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeMismatch("concat_rows: need a non-empty list of 2-D tensors")
    width = parts[0].data.shape[1]
    if any(p.data.shape[1] != width for p in parts):
        raise ShapeMismatch("concat_rows: column counts differ")
    data = np.concatenate([p.data for p in parts], axis=0)

    def backward(out):
        def run():
            g = out.grad * _bscale("concat_rows")
            off = 0
            for p in parts:
                m = p.data.shape[0]
                if p.requires_grad:
                    p._accumulate(g[off : off + m])
                off += m
        return run

    return _make(data, "concat_rows", tuple(parts), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeMismatch("concat_cols: need a non-empty list of 2-D tensors")
    height = parts[0].data.shape[0]
    if any(p.data.shape[0] != height for p in parts):
        raise ShapeMismatch("concat_cols: row counts differ")
    data = np.concatenate([p.data for p in parts], axis=1)

    def backward(out):
        def run():
            g = out.grad * _bscale("concat_cols")
            off = 0
            for p in parts:
                n = p.data.shape[1]
                if p.requires_grad:
                    p._accumulate(g[:, off : off + n])
                off += n
        return run

    return _make(data, "concat_cols", tuple(parts), backward)


def concat_vecs(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeMismatch(f"concat_vecs: need 1-D tensors, got {a.shape} and {b.shape}")
    na = a.data.shape[0]

    def backward(out):
        def run():
            g = out.grad * _bscale("concat_vecs")
            if a.requires_grad:
                a._accumulate(g[:na])
            if b.requires_grad:
                b._accumulate(g[na:])
        return run

    return _make(np.concatenate([a.data, b.data]), "concat_vecs", (a, b), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"slice_cols: need 2-D, got {a.shape}")

    def backward(out):
        def run():
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad * _bscale("slice_cols")
            a._accumulate(g)
        return run

    return _make(a.data[:, start:stop].copy(), "slice_cols", (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"slice_rows: need 2-D, got {a.shape}")

    def backward(out):
        def run():
            g = np.zeros_like(a.data)
            g[start:stop] = out.grad * _bscale("slice_rows")
            a._accumulate(g)
        return run

    return _make(a.data[start:stop].copy(), "slice_rows", (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        def run():
            a._accumulate(np.full_like(a.data, float(out.grad) * _bscale("sum_all")))
        return run

    return _make(a.data.sum(), "sum_all", (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b (composite of matmul and broadcast add)."""
    return add(matmul(x, w), b)


def weighted_ce(logits: Tensor, label: int, weight: float = 1.0) -> Tensor:
    """-weight * log softmax(logits)[label], numerically stable."""
    logits = as_tensor(logits)
    x = logits.data
    if x.ndim != 1:
        raise ShapeMismatch(f"weighted_ce: logits must be 1-D, got {logits.shape}")
    if not (0 <= label < x.shape[0]):
        raise ShapeMismatch(f"weighted_ce: label {label} out of range for K={x.shape[0]}")
    m = x.max()
    z = x - m
    lse = m + math.log(np.exp(z).sum())
    loss = weight * (lse - x[label])

    def backward(out):
        def run():
            sm = np.exp(z)
            sm = sm / sm.sum()
            onehot = np.zeros_like(x)
            onehot[label] = 1.0
            logits._accumulate(float(out.grad) * weight * (sm - onehot) * _bscale("weighted_ce"))
        return run

    return _make(loss, "weighted_ce", (logits,), backward)


@dataclass
class MhaParams:
    """Projection parameters for one multi-head attention block.

    The key projection carries no bias: a shared key offset cancels inside
    the row softmax, so it would be a dead parameter.
    """

    wq: Parameter
    bq: Parameter
    wk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter

    def all(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo]


def multi_head_attention(qry: Tensor, key: Tensor, val: Tensor, heads: int, proj: MhaParams):
    """Scaled dot-product attention with `heads` heads.

    Returns (output, attention maps), one row-stochastic matrix per head.
    """
    qry, key, val = as_tensor(qry), as_tensor(key), as_tensor(val)
    d_model = qry.data.shape[1]
    if key.data.shape[1] != d_model or val.data.shape[1] != d_model:
        raise ShapeMismatch("attention inputs must share the model dimension")
    if key.data.shape[0] != val.data.shape[0]:
        raise ShapeMismatch("key and value row counts differ")
    if d_model % heads != 0:
        raise HeadDivisibility(f"model dim {d_model} not divisible by {heads} heads")
    dh = d_model // heads

    q = linear(qry, proj.wq.tensor, proj.bq.tensor)
    k = matmul(key, proj.wk.tensor)
    v = linear(val, proj.wv.tensor, proj.bv.tensor)

    outs = []
    maps = []
    inv_sqrt = 1.0 / math.sqrt(dh)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt))
        maps.append(att.data.copy())
        outs.append(matmul(att, vh))
    concat = outs[0] if heads == 1 else concat_cols(outs)
    out = linear(concat, proj.wo.tensor, proj.bo.tensor)
    return out, maps


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def grad_check(fn, params: list[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must be a pure scalar-valued function of the trainable params.
    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    for p in params:
        p.tensor.zero_grad()
    out = fn()
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise NonScalarOutput("grad_check needs a scalar Tensor output")
    out.backward()
    analytic = {
        p.name: (p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.data))
        for p in params
        if p.trainable
    }

    worst = 0.0
    with no_grad():
        for p in params:
            if not p.trainable:
                continue
            flat = p.data.reshape(-1)
            aflat = analytic[p.name].reshape(-1)
            for i in range(flat.shape[0]):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = aflat[i]
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                if rel > worst:
                    worst = rel
    return worst
