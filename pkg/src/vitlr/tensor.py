"""Dense tensors, a restricted operator set, and tape-based reverse mode.

Every operator is a pure function of :class:`Tensor` values. When a
:class:`Tape` is active the operator also records a closure that maps the
output gradient to input gradients; :func:`backward` replays those closures
in reverse execution order.

Layout for images and feature maps is NCHW. Convolution is
cross-correlation (no kernel flip).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "backward", "precision", "default_dtype",
    "conv2d", "dwconv2d", "batchnorm2d", "layernorm", "relu", "sigmoid",
    "softmax", "dense", "reshape", "flatten", "adaptive_avg_pool2d",
    "concat_channels", "upsample_nearest", "broadcast_batch", "to_tokens", "from_tokens",
    "add", "sub", "mul", "div", "neg", "log", "arctan", "square", "pow_scalar",
    "maximum", "minimum", "clamp_min", "tsum", "mean", "take", "scale",
]

MAX_RANK = 4
_dtype_stack: list[type] = [np.float32]


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf from finite inputs."""


def default_dtype() -> type:
    return _dtype_stack[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the floating type new tensors are stored in.

    Training runs in float32; gradient checks switch to float64 so that
    finite differences are not swamped by rounding.
    """
    _dtype_stack.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype_stack.pop()


class Tensor:
    """Immutable dense array of rank <= 4.

    ``name`` marks a tensor whose gradient :func:`backward` should report
    (parameters, or inputs under a gradient check).
    """

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None, *, check: bool = True):
        arr = np.array(data, dtype=default_dtype(), copy=True, order="C")
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        if check and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: str | None = None) -> "Tensor":
        # internal fast path: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=default_dtype())
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("operation produced non-finite values")
        arr.flags.writeable = False
        t.data = arr
        t.name = name
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

class _Record:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_active_tapes: list["Tape"] = []


class Tape:
    """Ordered log of executed operations for one forward/backward pass.

    Use as a context manager; operators executed inside the ``with`` block
    are recorded. A tape is single-owner and not reentrant.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.produced: set[int] = set()
        self._open = False

    def __enter__(self) -> "Tape":
        if self._open:
            raise RuntimeError("tape is already recording")
        self._open = True
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)
        self._open = False

    def __len__(self) -> int:
        return len(self.records)


def _record(out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if _active_tapes:
        tape = _active_tapes[-1]
        tape.records.append(_Record(out, tuple(inputs), grad_fn))
        tape.produced.add(id(out))
    return out


def _recording() -> bool:
    return bool(_active_tapes)


def _needs_grad(x: Tensor) -> bool:
    # raw inputs (unnamed and not computed on the tape) get no gradient
    return x.name is not None or bool(_active_tapes) and id(x) in _active_tapes[-1].produced


def backward(tape: Tape, loss: Tensor, params: dict[str, Tensor] | Iterable[Tensor] | None = None
             ) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every named tensor the pass reached.

    ``params`` lists tensors that must appear in the result; those the
    forward pass never touched get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    named: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.grad_fn(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp.name is not None:
                named[key] = inp
    out: dict[str, np.ndarray] = {}
    if loss.name is not None:
        named[id(loss)] = loss
    for key, t in named.items():
        if key in grads:
            out[t.name] = grads[key].reshape(t.shape)
    if params is not None:
        items = params.values() if isinstance(params, dict) else params
        for t in items:
            if t.name not in out:
                out[t.name] = np.zeros_like(t.data)
    return out


# ---------------------------------------------------------------------------
# convolution

def _out_extent(size: int, k: int, stride: int, padding: int, dim: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded {dim} extent {size + 2 * padding}")
    # trailing rows/columns that cannot host a full window are dropped
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]


def _scatter_windows(dcols: np.ndarray, xshape: tuple, k: int, stride: int,
                     padding: int) -> np.ndarray:
    # dcols: [N, Ho, Wo, C, k, k] -> gradient on the unpadded NCHW input.
    # Accumulating channels-last keeps the innermost axis contiguous.
    n, c, h, w = xshape
    ho, wo = dcols.shape[1], dcols.shape[2]
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i: i + (ho - 1) * stride + 1: stride,
                j: j + (wo - 1) * stride + 1: stride] += dcols[..., i, j]
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def _check4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a rank-4 NCHW tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    _check4(x, "conv2d")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be [Cout,Cin,k,k], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input Cin={cin}, weight Cin={wcin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    k = kh
    ho = _out_extent(h, k, stride, padding, "height")
    wo = _out_extent(w, k, stride, padding, "width")
    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride, ho, wo)
    if k == 1:
        cols = win[..., 0, 0]  # [N,C,Ho,Wo]
        out = np.einsum("nchw,oc->nohw", cols, weight.data[:, :, 0, 0], optimize=True)
    else:
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * k * k)
        out = (cols @ weight.data.reshape(cout, -1).T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    y = Tensor._wrap(out)
    if not _recording():
        return y
    wdata = weight.data
    want_x = _needs_grad(x)

    def grad_fn(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if k == 1:
            gw = np.einsum("nohw,nchw->oc", g, cols, optimize=True)[:, :, None, None]
        else:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (g2.T @ cols).reshape(wdata.shape)
        if want_x and k == 1:
            dcols = np.einsum("nohw,oc->nchw", g, wdata[:, :, 0, 0], optimize=True)
            dxp = np.zeros_like(xp)
            dxp[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride] = dcols
            gx = dxp[:, :, padding: padding + h, padding: padding + w] if padding else dxp
        elif want_x:
            dcols = (g2 @ wdata.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
            gx = _scatter_windows(dcols, x.shape, k, stride, padding)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(y, inputs, grad_fn)


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
             padding: int = 0) -> Tensor:
    """Depthwise convolution: output channel c sees only input channel c."""
    _check4(x, "dwconv2d")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ValueError(f"dwconv2d weight must be [C,1,k,k], got {weight.shape}")
    if weight.shape[0] != c:
        raise ValueError(f"dwconv2d channel mismatch: input C={c}, weight C={weight.shape[0]}")
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ValueError(f"dwconv2d kernel must be square and odd, got {weight.shape[2:]}")
    if bias is not None and bias.shape != (c,):
        raise ValueError(f"dwconv2d bias must have shape ({c},), got {bias.shape}")
    ho = _out_extent(h, k, stride, padding, "height")
    wo = _out_extent(w, k, stride, padding, "width")
    xp = _pad(x.data, padding)
    kern = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i: i + (ho - 1) * stride + 1: stride,
                      j: j + (wo - 1) * stride + 1: stride] * kern[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    y = Tensor._wrap(out)
    if not _recording():
        return y

    def grad_fn(g):
        gw = np.empty_like(kern)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None),
                      slice(i, i + (ho - 1) * stride + 1, stride),
                      slice(j, j + (wo - 1) * stride + 1, stride))
                gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                dxp[sl] += g * kern[None, :, i, j, None, None]
        gx = dxp[:, :, padding: padding + h, padding: padding + w] if padding else dxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw[:, None], gb) if bias is not None else (gx, gw[:, None])

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(y, inputs, grad_fn)


# ---------------------------------------------------------------------------
# normalization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, eps: float = 1e-5, mode: str = "train",
                momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In train mode ``running_mean`` / ``running_var`` are updated in place
    (they are buffers, not tensors) and the batch variance is the biased one.
    """
    _check4(x, "batchnorm2d")
    c = x.shape[1]
    for nm, t in (("gamma", gamma.shape), ("beta", beta.shape),
                  ("running_mean", running_mean.shape), ("running_var", running_var.shape)):
        if t != (c,):
            raise ValueError(f"batchnorm2d {nm} has shape {t}, expected ({c},) for C={c}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        cnt = xd.size // c
        unbiased = var * cnt / max(cnt - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    y = Tensor._wrap(out)
    if not _recording():
        return y
    gdata = gamma.data

    def grad_fn(g):
        gg = np.einsum("nchw,nchw->c", g, xhat)
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gdata[None, :, None, None]
        if mode == "eval":
            gx = gxhat * inv[None, :, None, None]
        else:
            m = xd.size // c
            s1 = gxhat.sum(axis=(0, 2, 3))
            s2 = np.einsum("nchw,nchw->c", gxhat, xhat)
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
        return gx, gg, gb

    return _record(y, (x, gamma, beta), grad_fn)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis independently at every (n, h, w)."""
    _check4(x, "layernorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layernorm gamma/beta must have shape ({c},), got "
                         f"{gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    y = Tensor._wrap(out)
    if not _recording():
        return y
    gdata = gamma.data

    def grad_fn(g):
        gg = np.einsum("nchw,nchw->c", g, xhat)
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gdata[None, :, None, None]
        gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx, gg, gb

    return _record(y, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = Tensor._wrap(np.where(mask, x.data, 0))
    return _record(y, (x,), lambda g: (g * mask,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    y = Tensor._wrap(s)
    return _record(y, (x,), lambda g: (g * s * (1 - s),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax along ``axis`` (the channel axis by default)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    y = Tensor._wrap(p)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), grad_fn)


# ---------------------------------------------------------------------------
# dense and shape ops

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` for x of shape [N, Din]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"dense expects x [N,Din] and W [Dout,Din], got {x.shape}, {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"dense Din mismatch: x has {x.shape[1]}, W has {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"dense bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    y = Tensor._wrap(out)
    xd, wd = x.data, weight.data

    def grad_fn(g):
        gx = g @ wd
        gw = g.T @ xd
        return (gx, gw, g.sum(axis=0)) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(y, inputs, grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        if known == 0 or x.data.size % known:
            raise ValueError(f"cannot reshape {x.shape} to {shape}")
        shape = tuple(x.data.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.data.size:
        raise ValueError(f"reshape element count mismatch: {x.shape} ({x.data.size}) "
                         f"to {shape} ({math.prod(shape)})")
    y = Tensor._wrap(x.data.reshape(shape))
    src = x.shape
    return _record(y, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the batch axis."""
    return reshape(x, (x.shape[0], -1))


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over disjoint windows; output extents must divide input extents."""
    _check4(x, "adaptive_avg_pool2d")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1 or h % out_h or w % out_w:
        raise ValueError(f"pool output {out_h}x{out_w} must evenly divide input {h}x{w}")
    kh, kw = h // out_h, w // out_w
    out = x.data.reshape(n, c, out_h, kh, out_w, kw).mean(axis=(3, 5))
    y = Tensor._wrap(out)

    def grad_fn(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (kh * kw), (n, c, out_h, kh, out_w, kw))
        return (gx.reshape(n, c, h, w),)

    return _record(y, (x,), grad_fn)


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour upsampling by integer factors."""
    _check4(x, "upsample_nearest")
    n, c, h, w = x.shape
    if out_h % h or out_w % w:
        raise ValueError(f"upsample target {out_h}x{out_w} must be a multiple of {h}x{w}")
    fh, fw = out_h // h, out_w // w
    out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)
    y = Tensor._wrap(out)

    def grad_fn(g):
        return (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),)

    return _record(y, (x,), grad_fn)


def to_tokens(x: Tensor) -> Tensor:
    """[N, C, H, W] map to [N, H*W, C] token sequence (row-major over H, W)."""
    _check4(x, "to_tokens")
    n, c, h, w = x.shape
    y = Tensor._wrap(x.data.reshape(n, c, h * w).transpose(0, 2, 1))
    return _record(y, (x,), lambda g: (g.transpose(0, 2, 1).reshape(n, c, h, w),))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`to_tokens`: [N, H*W, C] back to [N, C, H, W]."""
    if t.ndim != 3 or t.shape[1] != h * w:
        raise ValueError(f"from_tokens: {t.shape} does not hold a {h}x{w} token map")
    n, _, c = t.shape
    y = Tensor._wrap(t.data.transpose(0, 2, 1).reshape(n, c, h, w))
    return _record(y, (t,), lambda g: (g.reshape(n, c, h * w).transpose(0, 2, 1),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or (t.shape[0], *t.shape[2:]) != (ref[0], *ref[2:]):
            raise ValueError(f"concat_channels shape mismatch: {t.shape} vs {ref}")
    out = np.concatenate([t.data for t in xs], axis=1)
    y = Tensor._wrap(out)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def grad_fn(g):
        return tuple(g[:, bounds[i]: bounds[i + 1]] for i in range(len(xs)))

    return _record(y, tuple(xs), grad_fn)


def broadcast_batch(x: Tensor, n: int) -> Tensor:
    """Repeat a batch-1 tensor ``n`` times along axis 0."""
    if x.shape[0] != 1:
        raise ValueError(f"broadcast_batch expects batch 1, got {x.shape[0]}")
    y = Tensor._wrap(np.repeat(x.data, n, axis=0))
    return _record(y, (x,), lambda g: (g.sum(axis=0, keepdims=True),))


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (integer index array)."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take expects a 1-D index")
    out = np.take(x.data, idx, axis=axis)
    y = Tensor._wrap(out)
    src_shape = x.shape

    def grad_fn(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _record(y, (x,), grad_fn)


# ---------------------------------------------------------------------------
# elementwise arithmetic with numpy broadcasting (used by the losses)

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = fwd(a.data, b.data)
    y = Tensor._wrap(out)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(da(g, ad, bd, out), a.shape),
                _unbroadcast(db(g, ad, bd, out), b.shape))

    return _record(y, (a, b), grad_fn)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def maximum(a, b) -> Tensor:
    # ties send the gradient to the first operand
    return _binary(a, b, np.maximum,
                   lambda g, x, y, o: g * (x >= y), lambda g, x, y, o: g * (x < y))


def minimum(a, b) -> Tensor:
    return _binary(a, b, np.minimum,
                   lambda g, x, y, o: g * (x <= y), lambda g, x, y, o: g * (x > y))


def _unary(x: Tensor, fwd, dfn) -> Tensor:
    xd = x.data
    out = fwd(xd)
    y = Tensor._wrap(out)
    return _record(y, (x,), lambda g: (dfn(g, xd, out),))


def neg(x: Tensor) -> Tensor:
    return _unary(x, np.negative, lambda g, x_, o: -g)


def scale(x: Tensor, c: float) -> Tensor:
    return _unary(x, lambda a: a * c, lambda g, x_, o: g * c)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log, lambda g, x_, o: g / x_)


def arctan(x: Tensor) -> Tensor:
    return _unary(x, np.arctan, lambda g, x_, o: g / (1 + x_ * x_))


def square(x: Tensor) -> Tensor:
    return _unary(x, np.square, lambda g, x_, o: 2 * g * x_)


def pow_scalar(x: Tensor, p: float) -> Tensor:
    """``x ** p`` for x >= 0; the derivative at 0 is taken as 0 when p < 1."""
    def d(g, x_, o):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = p * np.power(x_, p - 1)
        return g * np.where(x_ > 0, r, 0.0 if p < 1 else (1.0 if p == 1 else 0.0))
    return _unary(x, lambda a: np.power(a, p), d)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); the gradient is zero where the clamp is active."""
    return _unary(x, lambda a: np.maximum(a, lo), lambda g, x_, o: g * (x_ >= lo))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)
    y = Tensor._wrap(out)
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(y, (x,), grad_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / count)
