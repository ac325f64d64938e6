"""Minimal reverse-mode autodiff over numpy arrays.

Operations are recorded on the active :class:`GradTape` and replayed in reverse
by :meth:`GradTape.backward`. Every array op in this module accepts an optional
leading batch dimension so several planning problems can share one pass.
"""
import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_DEBUG = bool(os.environ.get("MPT_DEBUG"))
_TAPES: List["GradTape"] = []


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checking of every op output."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside are recorded if any input
    requires a gradient. ``backward`` walks the record in exact reverse order
    and accumulates (adds) into ``.grad`` of leaf tensors.
    """

    def __init__(self):
        self.entries: List[Tuple[Tensor, Tuple[Tensor, ...], Callable]] = []
        self._produced = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: Callable) -> None:
        self.entries.append((out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, root: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if root.data.size != 1:
                raise ShapeError("backward from a non-scalar needs an explicit seed gradient")
            grad = np.ones_like(root.data)
        grads: Dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
        for out, inputs, fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    gi = gi.astype(t.dtype, copy=False)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        if id(root) not in self._produced and root.requires_grad:
            g = grads[id(root)]
            root.grad = g.copy() if root.grad is None else root.grad + g


def _wrap(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite output from finite inputs")
    out = Tensor(out_data, dtype=out_data.dtype)
    needs = any(t.requires_grad for t in inputs)
    if needs and _TAPES:
        out.requires_grad = True
        _TAPES[-1].record(out, tuple(inputs), backward)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    return _wrap(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    return _wrap(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    return _wrap(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _wrap(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _wrap(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


# --- shape ----------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _wrap(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate in backward."""
    if x.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _wrap(x.data[idx], (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _wrap(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _wrap(np.matmul(a.data, b.data), (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _wrap(y, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (feature) axis, then apply gain and bias."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        gx = g * gain.data
        dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _wrap(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _wrap(x.data * keep, (x,), lambda g: (g * keep,))


# --- convolution / pooling ------------------------------------------------

def conv_out(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    x is (C, H, W) or (N, C, H, W); w is (O, C, k, k); b is (O,).
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x (N,C,H,W) or (C,H,W) and w (O,C,k,k)")
    n, c, h, wd = xd.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise ShapeError(f"conv2d channel/kernel mismatch: x{x.shape} w{w.shape}")
    if h < k or wd < k:
        raise ShapeError(f"kernel {k} larger than input {h}x{wd}")
    if b.shape != (o,):
        raise ShapeError(f"bias shape {b.shape} != ({o},)")
    ho, wo = conv_out(h, k, stride), conv_out(wd, k, stride)
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g[None] if squeeze else g
        db = g4.sum(axis=(0, 2, 3))
        dw = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g4, w.data, axes=([1], [0]))  # N, Ho, Wo, C, k, k
        dx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (dx[0] if squeeze else dx), dw, db

    return _wrap(out[0] if squeeze else out, (x, w, b), backward)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping max pooling (stride = k). Ties route to the first element."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if h % k or w % k:
        raise ShapeError(f"pool input {h}x{w} not divisible by {k}")
    hb, wb = h // k, w // k
    blocks = xd.reshape(n, c, hb, k, wb, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hb, wb, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g4[..., None], axis=-1)
        dx = gb.reshape(n, c, hb, wb, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx[0] if squeeze else dx,)

    return _wrap(out[0] if squeeze else out, (x,), backward)


# --- gradient checking ----------------------------------------------------

# op_id -> factory(rng) returning (input arrays, fn(*Tensors) -> Tensor, smooth_inputs)
GRADCHECK_REGISTRY: Dict[str, Callable] = {}


def register_gradcheck(op_id: str):
    def deco(factory):
        GRADCHECK_REGISTRY[op_id] = factory
        return factory
    return deco


def _separated(rng, shape, spacing=0.05):
    """Random values with pairwise gaps >= spacing and |v| >= spacing/2 (keeps kinks away)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - (n - 1) / 2.0) * spacing + spacing / 4
    vals = vals + rng.uniform(-spacing / 8, spacing / 8, n)
    return rng.permutation(vals).reshape(shape)


@register_gradcheck("matmul")
def _gc_matmul(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], matmul


@register_gradcheck("matmul_batched")
def _gc_matmul_b(rng):
    return [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))], matmul


@register_gradcheck("add_broadcast")
def _gc_add(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(4,))], add


@register_gradcheck("mul")
def _gc_mul(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], mul


@register_gradcheck("relu")
def _gc_relu(rng):
    return [_separated(rng, (4, 5))], relu


@register_gradcheck("softmax")
def _gc_softmax(rng):
    return [rng.normal(size=(3, 5))], softmax


@register_gradcheck("layernorm")
def _gc_layernorm(rng):
    return ([rng.normal(size=(4, 6)), rng.normal(size=(6,)) + 1.0, rng.normal(size=(6,))],
            layernorm)


@register_gradcheck("dropout")
def _gc_dropout(rng):
    seed = int(rng.integers(2**31))
    return [rng.normal(size=(4, 6))], (
        lambda x: dropout(x, 0.3, np.random.default_rng(seed), training=True))


@register_gradcheck("conv2d")
def _gc_conv(rng):
    return ([rng.normal(size=(2, 9, 9)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))],
            conv2d)


@register_gradcheck("conv2d_strided")
def _gc_conv_s(rng):
    return ([rng.normal(size=(2, 2, 11, 11)), rng.normal(size=(4, 2, 5, 5)), rng.normal(size=(4,))],
            lambda x, w, b: conv2d(x, w, b, stride=3))


@register_gradcheck("maxpool2d")
def _gc_pool(rng):
    return [_separated(rng, (1, 6, 6))], (lambda x: maxpool2d(x, 2))


@register_gradcheck("take_rows")
def _gc_take(rng):
    return [rng.normal(size=(5, 2))], (lambda x: take_rows(x, [0, 3, 3, 1]))


def _loss64(fn, arrays, proj):
    ts = [Tensor(a, dtype=np.float64) for a in arrays]
    return float((fn(*ts).data * proj).sum())


def _refine(fn, arrays, proj, a, pos, f0, h, g_ad):
    """Re-probe one coordinate at h/100 then h/1e4; returns (estimate, kink_flag)."""
    orig = a[pos]
    for h2 in (h / 100, h / 1e4):
        a[pos] = orig + h2
        fp = _loss64(fn, arrays, proj)
        a[pos] = orig - h2
        fm = _loss64(fn, arrays, proj)
        a[pos] = orig
        right, left = (fp - f0) / h2, (f0 - fm) / h2
        if abs(right - left) <= 1e-5 * max(abs(right), abs(left), 1e-3):
            return (fp - fm) / (2 * h2), 0
    return min((right, left), key=lambda v: abs(v - g_ad)), 1


def gradcheck(op_id: str, trial_count: int = 5, seed: int = 0, h: float = 1e-3,
              max_coords: int = 400) -> Dict[str, float]:
    """Compare reverse-mode gradients with 64-bit central differences.

    The scalar probed is sum(out * R) for a fixed random R; both routes run in
    float64. Error per input: ||g_ad - g_fd||_inf / max(||g_fd||_inf,
    ||g_ad||_inf, 1e-6). Inputs with more than ``max_coords`` entries are
    probed on a random coordinate subset.

    Where the one-sided differences at h disagree (curvature, or a relu /
    maxpool kink inside [x-h, x+h]) the coordinate is re-probed at h/100 and
    h/1e4. If the one-sided differences still jump, a kink is that close; the
    one-sided difference closest to the analytic value is used (the branch
    without the kink is exact) and the coordinate is counted in ``kinks``.
    """
    if op_id not in GRADCHECK_REGISTRY:
        raise KeyError(f"op {op_id!r} is not registered for gradcheck")
    rng = np.random.default_rng(seed)
    worst, kinks = 0.0, 0
    for _ in range(trial_count):
        arrays, fn = GRADCHECK_REGISTRY[op_id](rng)
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        with GradTape() as tape:
            out = fn(*ts)
        proj = rng.normal(size=out.shape)
        tape.backward(out, proj)
        f0 = _loss64(fn, arrays, proj)
        for a, t in zip(arrays, ts):
            g_ad = t.grad if t.grad is not None else np.zeros_like(a)
            flat = np.arange(a.size)
            if a.size > max_coords:
                flat = rng.choice(a.size, size=max_coords, replace=False)
            g_sel = g_ad.reshape(-1)[flat]
            g_fd = np.zeros(len(flat))
            for j, idx in enumerate(flat):
                pos = np.unravel_index(idx, a.shape)
                orig = a[pos]
                a[pos] = orig + h
                fp = _loss64(fn, arrays, proj)
                a[pos] = orig - h
                fm = _loss64(fn, arrays, proj)
                a[pos] = orig
                central = (fp - fm) / (2 * h)
                right, left = (fp - f0) / h, (f0 - fm) / h
                if abs(right - left) > 1e-4 * max(abs(right), abs(left), 1e-3):
                    central, kink = _refine(fn, arrays, proj, a, pos, f0, h, g_sel[j])
                    kinks += kink
                g_fd[j] = central
            denom = max(np.abs(g_fd).max(), np.abs(g_sel).max(), 1e-6)
            worst = max(worst, float(np.abs(g_sel - g_fd).max() / denom))
    return {"max_rel_err": worst, "trials": trial_count, "kinks": kinks, "passed": worst < 1e-4}
