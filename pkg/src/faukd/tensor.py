"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable computation in this package is built from the
primitives in this module. A `Tensor` wraps a numpy array; operations on
tensors record backward closures on a per-expression tape that is rebuilt
each forward pass and consumed by `grad`. Tensors are immutable values:
no operation mutates an input, so they are safe to share across threads.
Non-finite values are rejected at construction, which makes any NaN/Inf
anywhere in a computation a hard error at the op that produced it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Immutable dense array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(
                f"non-finite value in tensor of shape {tuple(arr.shape)}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut off from any recorded graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators delegate to module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Build an op output; only record the tape when a parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward)


def power(a, exponent: float) -> Tensor:
    """Elementwise a**c for a constant exponent."""
    a = as_tensor(a)
    c = float(exponent)
    out = np.power(a.data, c)

    def backward(g):
        if c == 0.0:
            return (np.zeros_like(a.data),)
        return (g * c * np.power(a.data, c - 1.0),)

    return _make(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * out),)

    return _make(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def backward(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            gk = np.expand_dims(g, axes) if axes else g
        else:
            gk = g
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            gk = np.expand_dims(g, axes) if axes else g
        else:
            gk = g
        return (np.broadcast_to(gk, a.shape) / count,)

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(out, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-d."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# row gather / scatter (token selection and mask-token insertion)
# ---------------------------------------------------------------------------

def _row_index(x_shape, idx):
    idx = np.asarray(idx)
    if idx.ndim not in (1, 2):
        raise ValueError("row index must be 1-d or 2-d")
    if len(x_shape) == 2:
        if idx.ndim != 1:
            raise ValueError("per-batch index requires a batched operand")
        return (idx,)
    if len(x_shape) == 3:
        batch = x_shape[0]
        if idx.ndim == 1:
            idx = np.broadcast_to(idx, (batch, idx.shape[0]))
        elif idx.shape[0] != batch:
            raise ValueError("index batch dimension mismatch")
        return (np.arange(batch)[:, None], idx)
    raise ValueError("row gather/scatter supports 2-d or 3-d operands")


def gather_rows(x, idx) -> Tensor:
    """Select rows along axis -2: out[..., l, :] = x[..., idx[l], :].

    `idx` may be shared (L,) or per-batch (B, L).
    """
    x = as_tensor(x)
    sel = _row_index(x.shape, idx)
    out = x.data[sel]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, sel, g)
        return (gx,)

    return _make(out, (x,), backward)


def scatter_rows(base, idx, rows) -> Tensor:
    """Overwrite rows along axis -2 of `base` with `rows` at positions `idx`.

    Positions must be unique within each batch element.
    """
    base, rows = as_tensor(base), as_tensor(rows)
    sel = _row_index(base.shape, idx)
    out = base.data.copy()
    out[sel] = rows.data

    def backward(g):
        gbase = g.copy()
        gbase[sel] = 0.0
        return gbase, g[sel]

    return _make(out, (base, rows), backward)


# ---------------------------------------------------------------------------
# fused neural-net primitives
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Numerically stable softmax of x / temperature along `axis`."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out / temperature,)

    return _make(out, (x,), backward)


def cosine_similarity(a, b) -> Tensor:
    """cos(a, b) for two equal-length vectors; 0 if either norm < 1e-12."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < 1e-12 or nb < 1e-12:
        return Tensor(0.0)
    num = tsum(mul(a, b))
    den = mul(sqrt(tsum(mul(a, a))), sqrt(tsum(mul(b, b))))
    return div(num, den)


@dataclass
class BatchNormState:
    """Learnable per-channel affine plus running statistics (channels-last)."""

    scale: Tensor
    offset: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        c = self.scale.shape[-1]
        if not (self.offset.shape[-1] == len(self.running_mean) == len(self.running_var) == c):
            raise ValueError("batch norm channel counts disagree")
        if not (0.0 < self.momentum < 1.0):
            raise ValueError("momentum must lie in (0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0.0):
            raise ValueError("running variance must be nonnegative")

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            offset=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            scale=Tensor(self.scale.data.copy(), requires_grad=self.scale.requires_grad),
            offset=Tensor(self.offset.data.copy(), requires_grad=self.offset.requires_grad),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            eps=self.eps,
        )


def batch_norm(x, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize per channel (last axis) over all leading axes.

    Train mode uses batch statistics and folds them into the running
    estimates by `state.momentum` as a side effect; eval mode uses the
    running estimates. Train mode requires at least 2 normalized samples.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch norm mode {mode!r}")
    x = as_tensor(x)
    c = x.shape[-1]
    if c != state.scale.shape[-1]:
        raise ValueError("channel count does not match batch norm state")
    lead_axes = tuple(range(x.ndim - 1))
    m = int(np.prod(x.shape[:-1])) if lead_axes else 1
    scale, offset = state.scale, state.offset
    eps = state.eps

    if mode == "train":
        if m < 2:
            raise ValueError(f"batch norm train mode needs >= 2 samples, got {m}")
        mean = x.data.mean(axis=lead_axes)
        var = x.data.var(axis=lead_axes)
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
        state.running_var = (1.0 - mom) * state.running_var + mom * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * scale.data + offset.data

    if mode == "train":

        def backward(g):
            gscale = (g * xhat).sum(axis=lead_axes)
            goffset = g.sum(axis=lead_axes)
            gxh = g * scale.data
            gx = inv_std * (
                gxh
                - gxh.mean(axis=lead_axes, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=lead_axes, keepdims=True)
            )
            return gx, gscale, goffset

    else:

        def backward(g):
            gscale = (g * xhat).sum(axis=lead_axes) if lead_axes else g * xhat
            goffset = g.sum(axis=lead_axes) if lead_axes else g
            return g * scale.data * inv_std, gscale, goffset

    return _make(out, (x, scale, offset), backward)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution: x (B,H,W,Cin), w (kh,kw,Cin,Cout), b (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    kb, hh, ww, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (kb, ho, wo, kh, kw, cin), (s0, s1 * stride, s2 * stride, s1, s2, s3)
    ).reshape(kb, ho, wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat + b.data

    def backward(g):
        gmat = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ gmat).reshape(w.shape)
        gb = gmat.sum(axis=0)
        gcols = (gmat @ wmat.T).reshape(kb, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
        if padding:
            gx = gxp[:, padding:-padding, padding:-padding, :]
        else:
            gx = gxp
        return gx, gw, gb

    return _make(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# gradient machinery
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(scalar_loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Reverse-mode gradients of a recorded scalar loss.

    Returns d(loss)/dp for each p, in order, with the same shape as p.
    Parameters not reachable from the loss get a zero gradient rather
    than an error. Each param's `.grad` field is also populated. Calling
    again on the same recorded graph gives identical results.
    """
    if scalar_loss.size != 1:
        raise ValueError(f"grad expects a scalar loss, got shape {scalar_loss.shape}")
    grads: dict[int, np.ndarray] = {id(scalar_loss): np.ones_like(scalar_loss.data)}
    if scalar_loss.requires_grad:
        for node in reversed(_toposort(scalar_loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
    out: list[Tensor] = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        out.append(Tensor(g))
    return out


def finite_diff_grad(f: Callable[[Tensor], object], p: Tensor, eps: float) -> Tensor:
    """Central-difference gradient oracle: (f(p+eps*e_k) - f(p-eps*e_k)) / 2eps.

    `f` must be pure and deterministic and return a scalar (float or
    size-1 Tensor); a non-finite function value is an error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate(arr: np.ndarray) -> float:
        val = f(Tensor(arr))
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise FloatingPointError("finite_diff_grad: function returned non-finite value")
        return val

    base = p.data.astype(np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for k in range(flat.size):
        bump = flat.copy()
        bump[k] = flat[k] + eps
        hi = evaluate(bump.reshape(base.shape))
        bump[k] = flat[k] - eps
        lo = evaluate(bump.reshape(base.shape))
        out[k] = (hi - lo) / (2.0 * eps)
    return Tensor(out.reshape(base.shape))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference used by the gradient checks."""
    na = np.linalg.norm(np.asarray(a).reshape(-1))
    nb = np.linalg.norm(np.asarray(b).reshape(-1))
    denom = max(na, nb, 1e-12)
    return float(np.linalg.norm((np.asarray(a) - np.asarray(b)).reshape(-1)) / denom)
