"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operator set the decoding models need: grouped
dilated 1-D convolution, batch normalization, ELU/sigmoid, Pearson
correlation (scalar and all-pairs), binary cross-entropy on logits, a
dense layer, and the elementwise/reduction glue around them.

Reference precision is float64. float32 is supported as a fast path;
mixing dtypes in one expression is an error.

Every primitive records a `Node` on the implicit tape while gradients are
enabled. `backward()` linearizes the graph reachable from the loss into a
`Tape` (topological order) and walks it exactly once in reverse.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, StateError

DEFAULT_DTYPE = np.float64
_SUPPORTED_DTYPES = (np.float32, np.float64)

_grad_enabled = contextvars.ContextVar("aad_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for eval forwards)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """Contiguous float array plus shape metadata and an autodiff record.

    Tensors are immutable by convention once created; only optimizer steps
    rewrite `.data` in place. `node` points at the primitive that produced
    this tensor (None for leaves).
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _non_scalar(t: Tensor):
    raise ContractError(f"item() on non-scalar tensor of shape {tuple(t.shape)}")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Node:
    """One recorded primitive: its operands, its output, and a VJP rule.

    `vjp` maps the gradient w.r.t. the output to a tuple of gradients
    aligned with `inputs` (None for inputs that don't need one).
    """

    __slots__ = ("inputs", "output", "vjp", "name")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 vjp: Callable[[np.ndarray], tuple], name: str):
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp
        self.name = name


class Tape:
    """Topologically ordered list of nodes below a root tensor.

    Invariant: every operand of nodes[i] is either a leaf or the output of
    some nodes[j] with j < i. The backward pass walks the list exactly once
    in reverse.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                nodes.append(node)
            else:
                stack.append((t, True))
                for parent in node.inputs:
                    if parent.node is not None and id(parent.node) not in seen:
                        stack.append((parent, False))
        return cls(nodes)


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    rg = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, rg)
    if rg:
        out.node = Node(inputs, out, vjp, name)
    return out


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None):
    """Accumulate gradients of a scalar loss into all requires_grad leaves.

    Leaves listed in `params` that the loss does not depend on receive an
    explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    tape = Tape.trace(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}

    def _sink(t: Tensor, g: np.ndarray):
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not (t.requires_grad or t.node is not None):
                continue
            _sink(t, g)

    def _deposit(t: Tensor):
        g = grads.get(id(t))
        if g is None:
            return
        if t.grad is None:
            t.grad = np.array(g, copy=True)
        else:
            t.grad = t.grad + g

    handled = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is None and t.requires_grad and id(t) not in handled:
                handled.add(id(t))
                _deposit(t)
    if loss.node is None and loss.requires_grad:
        _deposit(loss)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of leading-batch broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_dtypes(*tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} and {t.data.dtype} in one op")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _record("sum", (a,), out, vjp)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False),)

    return _record("mean", (a,), out, vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = np.reshape(a.data, shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", (a,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, vjp)


def elu(x: Tensor) -> Tensor:
    """ELU with alpha=1: x for x > 0, exp(x) - 1 otherwise."""
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, np.expm1(np.minimum(xd, 0.0)))
    # derivative: 1 where positive, exp(x) = out + 1 where negative
    dfactor = np.where(pos, 1.0, out + 1.0).astype(xd.dtype, copy=False)

    def vjp(g):
        return (g * dfactor,)

    return _record("elu", (x,), out, vjp)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, vjp)


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Numerically stable binary cross entropy on raw logits.

    loss = max(z, 0) - z*y + log(1 + exp(-|z|)), elementwise. Labels must
    be 0 or 1 and are treated as constants.
    """
    z = logit.data
    y = np.asarray(label, dtype=z.dtype)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("bce_with_logits labels must be 0 or 1")
    if y.shape not in ((), z.shape):
        y = np.broadcast_to(y, z.shape)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def vjp(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * (s - y),)

    return _record("bce_with_logits", (logit,), out, vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Dense layer: out[b, o] = sum_f x[b, f] * weight[o, f] + bias[o]."""
    _check_dtypes(*( (x, weight, bias) if bias is not None else (x, weight) ))
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear: x {x.data.shape} incompatible with weight {weight.data.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("linear", inputs, out, vjp)


# ---------------------------------------------------------------------------
# 1-D convolution
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           dilation: int = 1, groups: int = 1,
           pad: tuple = (0, 0)) -> Tensor:
    """Grouped dilated 1-D convolution with explicit zero padding.

    x: (B, Cin, T), weight: (Cout, Cin/groups, K), bias: (Cout,) or None.
    pad = (left, right) must satisfy left + right == (K-1)*dilation so the
    output length equals the input length.

    out[b, co, t] = bias[co]
                  + sum_{ci, k} weight[co, ci, k] * xpad[b, g0+ci, t + k*dilation]
    """
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError(
            f"conv1d: expected 3-d input/weight, got {x.data.shape} / {weight.data.shape}")
    B, cin, T = x.data.shape
    cout, cin_g, K = weight.data.shape
    if dilation < 1 or groups < 1:
        raise ConfigurationError("conv1d: dilation and groups must be >= 1")
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigurationError(
            f"conv1d: groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"conv1d: weight expects Cin/groups={cin_g}, input has {cin // groups}")
    left, right = pad
    if left < 0 or right < 0 or left + right != (K - 1) * dilation:
        raise ConfigurationError(
            f"conv1d: pad {pad} must be non-negative and sum to (K-1)*dilation={(K-1)*dilation}")
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError(f"conv1d: bias shape {bias.data.shape} != ({cout},)")
    _check_dtypes(*( (x, weight, bias) if bias is not None else (x, weight) ))

    xd = x.data
    if left or right:
        xp = np.zeros((B, cin, T + left + right), dtype=xd.dtype)
        xp[:, :, left:left + T] = xd
    else:
        xp = xd

    wd = weight.data
    if K == 1 and groups == 1:
        # pointwise: one batched GEMM
        out = np.matmul(wd[:, :, 0], xp)
    elif groups == cin and cout == cin:
        # depthwise: accumulate K shifted slices
        out = wd[:, 0, 0, None] * xp[:, :, 0:T]
        for k in range(1, K):
            out += wd[:, 0, k, None] * xp[:, :, k * dilation:k * dilation + T]
    elif groups == 1:
        out = np.matmul(wd[:, :, 0], xp[:, :, 0:T])
        for k in range(1, K):
            out += np.matmul(wd[:, :, k], xp[:, :, k * dilation:k * dilation + T])
    else:
        out = np.zeros((B, cout, T), dtype=xd.dtype)
        og = cout // groups
        for g in range(groups):
            xs = xp[:, g * cin_g:(g + 1) * cin_g]
            ws = wd[g * og:(g + 1) * og]
            acc = np.matmul(ws[:, :, 0], xs[:, :, 0:T])
            for k in range(1, K):
                acc += np.matmul(ws[:, :, k], xs[:, :, k * dilation:k * dilation + T])
            out[:, g * og:(g + 1) * og] = acc
    if bias is not None:
        out += bias.data[:, None]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        if K == 1 and groups == 1:
            np.matmul(wd[:, :, 0].T, g, out=gxp)
            gw[:, :, 0] = np.tensordot(g, xp, axes=([0, 2], [0, 2]))
        elif groups == cin and cout == cin:
            for k in range(K):
                sl = slice(k * dilation, k * dilation + T)
                gxp[:, :, sl] += wd[:, 0, k, None] * g
                gw[:, 0, k] = np.einsum("bct,bct->c", g, xp[:, :, sl])
        elif groups == 1:
            for k in range(K):
                sl = slice(k * dilation, k * dilation + T)
                gxp[:, :, sl] += np.matmul(wd[:, :, k].T, g)
                gw[:, :, k] = np.tensordot(g, xp[:, :, sl], axes=([0, 2], [0, 2]))
        else:
            og = cout // groups
            for grp in range(groups):
                cs = slice(grp * cin_g, (grp + 1) * cin_g)
                os_ = slice(grp * og, (grp + 1) * og)
                for k in range(K):
                    sl = slice(k * dilation, k * dilation + T)
                    gxp[:, cs, sl] += np.matmul(wd[os_, :, k].T, g[:, os_])
                    gw[os_, :, k] = np.tensordot(g[:, os_], xp[:, cs, sl],
                                                 axes=([0, 2], [0, 2]))
        gx = gxp[:, :, left:left + T] if (left or right) else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv1d", inputs, out, vjp)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class RunningStats:
    """Mutable EMA holder for batch-norm inference statistics."""

    __slots__ = ("mean", "var")

    def __init__(self):
        self.mean: Optional[np.ndarray] = None
        self.var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def copy(self) -> "RunningStats":
        out = RunningStats()
        if self.initialized:
            out.mean = self.mean.copy()
            out.var = self.var.copy()
        return out


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                training: bool, momentum: float = 0.1, eps: float = 1e-8) -> Tensor:
    """Per-channel batch normalization over (batch, time).

    Training mode normalizes with the current batch's population statistics
    and updates `stats` by exponential moving average; eval mode uses the
    stored statistics and requires them to be initialized.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"batchnorm1d expects (B, C, T), got {x.data.shape}")
    B, C, T = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise DimensionError("batchnorm1d: gamma/beta must have shape (C,)")
    _check_dtypes(x, gamma, beta)
    xd = x.data

    if training:
        m = B * T
        if m < 2:
            raise ContractError("batchnorm1d training needs at least 2 samples per channel")
        mu = xd.mean(axis=(0, 2))
        xc = xd - mu[:, None]
        var = np.einsum("bct,bct->c", xc, xc) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[:, None]
        if stats.mean is None:
            stats.mean = mu.astype(xd.dtype)
            stats.var = var.astype(xd.dtype)
        else:
            stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
            stats.var = (1.0 - momentum) * stats.var + momentum * var
        out = gamma.data[:, None] * xhat + beta.data[:, None]

        def vjp(g):
            gsum = g.sum(axis=(0, 2))
            gx_dot = np.einsum("bct,bct->c", g, xhat)
            ggamma = gx_dot
            gbeta = gsum
            gx = (gamma.data * inv)[:, None] * (
                g - (gsum / m)[:, None] - xhat * (gx_dot / m)[:, None])
            return gx, ggamma, gbeta

        return _record("batchnorm1d", (x, gamma, beta), out, vjp)

    if not stats.initialized:
        raise StateError("batchnorm1d eval mode before any training step")
    inv = 1.0 / np.sqrt(stats.var + eps)
    xhat = (xd - stats.mean[:, None]) * inv[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def vjp(g):
        ggamma = np.einsum("bct,bct->c", g, xhat)
        gbeta = g.sum(axis=(0, 2))
        gx = (gamma.data * inv)[:, None] * g
        return gx, ggamma, gbeta

    return _record("batchnorm1d_eval", (x, gamma, beta), out, vjp)


# ---------------------------------------------------------------------------
# Pearson correlation
# ---------------------------------------------------------------------------

PEARSON_EPS = 1e-8


def correlate_pairs(e: Tensor, s: Tensor, eps: float = PEARSON_EPS) -> Tensor:
    """All-pairs Pearson correlation along time.

    e: (B, I, T), s: (B, J, T) -> (B, I, J). Each standard deviation is
    stabilized by an additive eps, so a zero-variance row yields exactly
    zero correlation with a finite gradient.
    """
    if e.data.ndim != 3 or s.data.ndim != 3:
        raise DimensionError("correlate_pairs expects (B, C, T) operands")
    if e.data.shape[0] != s.data.shape[0] or e.data.shape[2] != s.data.shape[2]:
        raise DimensionError(
            f"correlate_pairs: batch/time mismatch {e.data.shape} vs {s.data.shape}")
    if e.data.shape[2] < 2:
        raise ContractError("correlate_pairs needs at least 2 time samples")
    _check_dtypes(e, s)
    T = e.data.shape[2]

    ec = e.data - e.data.mean(axis=2, keepdims=True)
    sc = s.data - s.data.mean(axis=2, keepdims=True)
    sde = np.sqrt(np.einsum("bit,bit->bi", ec, ec) / T)
    sds = np.sqrt(np.einsum("bjt,bjt->bj", sc, sc) / T)
    cov = np.matmul(ec, sc.transpose(0, 2, 1)) / T
    ue = 1.0 / (sde + eps)
    us = 1.0 / (sds + eps)
    out = cov * ue[:, :, None] * us[:, None, :]

    # guarded 1/sd for the gradient of the sd terms; at sd == 0 the centered
    # signal is identically zero so the product below vanishes anyway
    inv_sde = np.where(sde > 0, 1.0 / np.maximum(sde, 1e-300), 0.0)
    inv_sds = np.where(sds > 0, 1.0 / np.maximum(sds, 1e-300), 0.0)

    def vjp(g):
        dcov = g * ue[:, :, None] * us[:, None, :]
        ge = np.matmul(dcov, sc) / T
        gs = np.matmul(dcov.transpose(0, 2, 1), ec) / T
        # d out / d sde = -cov * ue^2 * us
        a_e = -np.einsum("bij,bij->bi", g, cov * us[:, None, :]) * ue ** 2
        a_s = -np.einsum("bij,bij->bj", g, cov * ue[:, :, None]) * us ** 2
        ge += (a_e * inv_sde / T)[:, :, None] * ec
        gs += (a_s * inv_sds / T)[:, :, None] * sc
        ge -= ge.mean(axis=2, keepdims=True)
        gs -= gs.mean(axis=2, keepdims=True)
        return ge, gs

    return _record("correlate_pairs", (e, s), out, vjp)


def pearson(a: Tensor, b: Tensor, eps: float = PEARSON_EPS) -> Tensor:
    """Pearson correlation of two equal-length sequences (scalar output)."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("pearson expects 1-d sequences")
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"pearson: length mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.size < 2:
        raise ContractError("pearson needs at least 2 samples")
    n = a.data.size
    r = correlate_pairs(reshape(a, (1, 1, n)), reshape(b, (1, 1, n)), eps=eps)
    return reshape(r, ())
