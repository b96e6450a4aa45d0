"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Image tensors use NHWC layout (batch, height, width, channels); flat
tensors are (batch, features).  Every op records a closure that pushes the
output gradient back to its parents; :func:`backward` walks the recorded
graph in reverse topological order.

Graph recording is skipped when no input requires a gradient, so inference
passes cost nothing beyond the forward arithmetic.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64
BN_EPS = 1e-5

# no_grad() switches graph recording off globally
_grad_enabled = True
# patch matrices above this many bytes are built in bands when no graph is kept
IM2COL_BUDGET = 64 * 2**20

# sign masks of every leaky_relu input, collected while ``record_kinks`` is active
_kink_masks: list[np.ndarray] | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}{', op=' + self.op if self.op else ''})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextmanager
def no_grad():
    """Evaluate without recording a graph (inference)."""
    global _grad_enabled
    outer, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = outer


def _recording(parents: Sequence[Tensor]) -> bool:
    return _grad_enabled and any(p.requires_grad for p in parents)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    if _recording(parents):
        out = Tensor(data, requires_grad=True, _parents=tuple(parents), op=op)
        out._backward = backward_fn
        return out
    return Tensor(data, op=op)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from each reachable leaf tensor that requires a gradient
    to its gradient array.  Tensors outside the loss's graph are untouched.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.data > 0
    if _kink_masks is not None:
        _kink_masks.append(positive)
    scale = np.where(positive, 1.0, slope)

    def bw(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), "leaky_relu", bw)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), "sigmoid", bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0) or not np.all(np.isfinite(x.data)):
        bad = x.data[~(x.data > 0)] if np.any(~(x.data > 0)) else x.data[~np.isfinite(x.data)]
        raise ValueError(f"log of non-positive or non-finite value {bad.reshape(-1)[0]!r}; clamp first")

    def bw(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), "log", bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping was active."""
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), "clamp", bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the last (channel) axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), "softmax", bw)


# ------------------------------------------------------------ reductions


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, float(g.reshape(-1)[0]) / n, dtype=DTYPE),)

    return _make(np.asarray(x.data.mean()), (x,), "mean", bw)


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), "sum", bw)


# --------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat_channels(*xs: Tensor) -> Tensor:
    """Concatenate along the last axis; all other dims must agree."""
    xs = tuple(as_tensor(x) for x in xs)
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: non-channel dims differ, {lead} vs {x.shape[:-1]}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=-1), xs, "concat", bw)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of a BHWC tensor."""
    _, h, w, _ = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w or height <= 0 or width <= 0:
        raise ShapeError(f"crop region ({top},{left},{height},{width}) outside {h}x{w} input")

    def bw(g):
        out = np.zeros(x.shape, dtype=DTYPE)
        out[:, top:top + height, left:left + width, :] = g
        return (out,)

    return _make(x.data[:, top:top + height, left:left + width, :], (x,), "crop", bw)


# ---------------------------------------------------------------- layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"fully_connected expects a B x F input, got {x.shape}")
    if weights.shape[0] != x.shape[1]:
        raise ShapeError(f"fully_connected: input has {x.shape[1]} features but weights expect {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} does not match {weights.shape[1]} outputs")

    def bw(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ weights.data + bias.data, (x, weights, bias), "fc", bw)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding for 'same' output size ceil(size/stride).

    Odd totals put the extra pixel after (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N*Ho*Wo, Kh*Kw*Cin) patch matrix of a padded NHWC array."""
    xp = np.ascontiguousarray(xp)
    n, _, _, cin = xp.shape
    sn, sh, sw, sc = xp.strides
    cols = np.empty((n, ho, wo, kh, kw * cin), dtype=DTYPE)
    for i in range(kh):
        # one kernel row of every patch is a contiguous run of kw*cin values
        cols[:, :, :, i, :] = as_strided(xp[:, i:], shape=(n, ho, wo, kw * cin), strides=(sn, stride * sh, stride * sw, sc))
    return cols.reshape(n * ho * wo, kh * kw * cin)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, NHWC input and (Kh, Kw, Cin, Cout) kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a BHWC input, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects a KhKwCinCout kernel, got shape {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects Cin={kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")

    if padding == "same":
        pt, pb = same_padding(h, kh, stride)
        pl, pr = same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    w2d = kernel.data.reshape(kh * kw * cin, cout)
    if not _recording((x, kernel, bias)):
        # nothing to keep for backward: bound memory by working in output-row bands
        band = max(1, IM2COL_BUDGET // (n * wo * kh * kw * cin * 8))
        out = np.empty((n, ho, wo, cout), dtype=DTYPE)
        for r0 in range(0, ho, band):
            r1 = min(ho, r0 + band)
            rows = xp[:, r0 * stride:(r1 - 1) * stride + kh]
            out[:, r0:r1] = (_im2col(rows, kh, kw, stride, r1 - r0, wo) @ w2d).reshape(n, r1 - r0, wo, cout)
        out += bias.data
        return Tensor(out, op="conv2d")
    cols2d = _im2col(xp, kh, kw, stride, ho, wo)
    out = (cols2d @ w2d).reshape(n, ho, wo, cout)
    out += bias.data

    def bw(g):
        g2d = g.reshape(n * ho * wo, cout)
        gk = (cols2d.T @ g2d).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2d.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2d @ w2d.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, hp, wp, cin), dtype=DTYPE)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        return gx, gk, gb

    return _make(out, (x, kernel, bias), "conv2d", bw)


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def ready(self) -> bool:
        return self.mean is not None and self.var is not None


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over every axis but the last.

    ``train`` uses batch statistics and folds them into ``running`` as
    ``running = momentum*running + (1-momentum)*batch`` (the first call
    seeds ``running`` with the batch values).  ``infer`` uses ``running``.
    """
    axes = tuple(range(x.data.ndim - 1))
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")

    if mode == "train":
        count = x.size // c
        if count < 2:
            raise ShapeError(f"batchnorm in train mode needs >= 2 values per channel, got {count}")
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = np.mean(centered * centered, axis=axes)
        if running.ready:
            running.mean = momentum * running.mean + (1.0 - momentum) * mu
            running.var = momentum * running.var + (1.0 - momentum) * var
        else:
            running.mean, running.var = mu.copy(), var.copy()
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        out = xhat * gamma.data + beta.data

        def bw(g):
            gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data
                gx = inv_std * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
            return gx, gg, gbeta

    elif mode == "infer":
        if not running.ready:
            raise RuntimeError("batchnorm in infer mode before any running statistics exist")
        inv_std = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean) * inv_std
        out = xhat * gamma.data + beta.data

        def bw(g):
            return g * (gamma.data * inv_std), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    return _make(out, (x, gamma, beta), "batchnorm", bw)


# ------------------------------------------------------- gradient checks


@contextmanager
def record_kinks():
    """Collect the leaky_relu sign masks produced inside the block.

    Finite differences are meaningless when a perturbation moves a
    leaky_relu input across zero; comparing masks detects that.
    """
    global _kink_masks
    outer, _kink_masks = _kink_masks, []
    try:
        yield _kink_masks
    finally:
        _kink_masks = outer


def same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index: tuple, eps: float) -> float:
    orig = t.data[index]
    t.data[index] = orig + eps
    fp = fn().item()
    t.data[index] = orig - eps
    fm = fn().item()
    t.data[index] = orig
    return (fp - fm) / (2.0 * eps)


def relative_floor(analytic: np.ndarray) -> float:
    return max(1e-8, 1e-4 * float(np.abs(analytic).max(initial=0.0)))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn(*inputs)`` must be deterministic and return a scalar Tensor.  The
    error per element is ``|a - n| / max(|a|, |n|, floor)`` where the floor is
    the larger of 1e-8 and ``1e-4 * max|a|`` over that input: an entry whose
    gradient cancels to nearly zero by chance is then judged against the
    input's gradient scale instead of against float64 roundoff.  With
    ``max_elements`` set, that many entries per input are probed (chosen by
    ``rng``) instead of all of them.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in inputs]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        floor = relative_floor(a)
        flat = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            flat = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        for k in flat:
            idx = np.unravel_index(k, t.shape)
            num = numerical_grad(lambda: fn(*inputs), t, idx, eps)
            ana = a[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
