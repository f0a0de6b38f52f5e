"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient slot. Operations
build a tape (parent links + a backward closure) only when at least one
input requires gradients, so frozen/inference forward passes run at plain
numpy speed. ``backward`` walks the tape in reverse topological order and
accumulates exact analytic gradients into every requires-grad tensor.

Everything is float64: the package trades speed for verification
precision, and every op's output is checked finite (a NaN/Inf raises
NumericalError immediately rather than poisoning a training run).
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError

Array = np.ndarray

_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (inference passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(data: Array, op: str) -> None:
    # One-pass reduction: the sum is finite iff every element is finite
    # (values here are far from the f64 overflow range).
    if not np.isfinite(np.sum(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


class Tensor:
    """An n-dimensional float64 array participating in reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], bwd) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    return out


def _make(data: Array, op: str, parents: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(data, op)
    return _record(Tensor(data), parents, bwd)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, "mul", (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _make(out, "relu", (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, "tanh", (a,), bwd)


def clamp(a, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to [lo, hi]; the backward pass lets gradient through on the
    closed interval (subgradient 1 at both edges)."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(out, "clamp", (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - op name
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, a.data.ndim)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, "sum", (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - op name
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes]))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _make(out, "mean", (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(out, "reshape", (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _make(out, "transpose", (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product covering the 1D/2D/batched-3D cases used here."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bwd(g):
        if ad.ndim == 1 and bd.ndim == 1:  # dot -> scalar
            return g * bd, g * ad
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:  # (m,k)@(k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:  # (k,)@(k,m) -> (m,)
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 3 and bd.ndim == 2:  # (n,t,k)@(k,m) -> (n,t,m)
            ga = np.matmul(g, bd.T)
            gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
            return ga, gb
        if ad.ndim == 3 and bd.ndim == 1:  # (n,t,k)@(k,) -> (n,t)
            ga = g[..., None] * bd
            gb = np.tensordot(g, ad, axes=([0, 1], [0, 1]))
            return ga, gb
        raise ValueError(f"unsupported matmul ranks {ad.ndim}x{bd.ndim}")

    return _make(out, "matmul", (a, b), bwd)


# ---------------------------------------------------------------------------
# softmax family and losses


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), bwd)


def masked_softmax(a, mask: Array, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is true.

    Masked positions get exactly zero weight and zero gradient. A row with
    no unmasked position is an error.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ValueError("mask shape must match input shape")
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: a row has zero unmasked entries")
    neg_min = np.min(a.data)
    shifted = np.where(mask, a.data, neg_min)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted) * mask
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "masked_softmax", (a,), bwd)


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = np.mean(diff * diff)
    n = diff.size

    def bwd(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return _make(out, "mse", (a, b), bwd)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ValueError("cross_entropy expects (N,K) logits and (N,) labels")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    n = z.shape[0]
    picked = z[np.arange(n), labels]
    out = np.mean(logsumexp - picked)

    def bwd(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(out, "cross_entropy", (logits,), bwd)


# ---------------------------------------------------------------------------
# convolution


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for ceil-division 'same' conv."""
    out = -(-size // stride)
    total = max(0, (out - 1) * stride + kernel - size)
    before = total // 2
    return out, before, total - before


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def conv2d_channel_major(x, w, b=None, stride: int | tuple[int, int] = 1) -> Tensor:
    """'Same'-padded conv on channel-major activations.

    x: (C_in, N, H, W); w: (C_out, C_in, kH, kW); optional bias (C_out,);
    output (C_out, N, ceil(H/sh), ceil(W/sw)). This layout turns both the
    forward pass and the weight gradient into single large GEMMs, which is
    what the training loop's speed lives on.
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    if x.data.shape[0] != w.data.shape[1]:
        raise ValueError("conv2d channel mismatch")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    cin, n, h, wi = x.data.shape
    cout, _, kh, kw = w.data.shape
    oh, pt, pb = same_padding(h, kh, sh)
    ow, pl, pr = same_padding(wi, kw, sw)
    pointwise = kh == 1 and kw == 1 and pt == pb == pl == pr == 0

    if pointwise:
        xp = x.data
        cols = np.ascontiguousarray(
            xp[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
        ).reshape(cin, n * oh * ow)
    else:
        xp = np.zeros((cin, n, h + pt + pb, wi + pl + pr))
        xp[:, :, pt : pt + h, pl : pl + wi] = x.data
        cols = np.empty((cin, kh, kw, n, oh, ow))
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i : i + (oh - 1) * sh + 1 : sh,
                                   j : j + (ow - 1) * sw + 1 : sw]
        cols = cols.reshape(cin * kh * kw, n * oh * ow)

    w_mat = w.data.reshape(cout, cin * kh * kw)
    out = w_mat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(cout, n, oh, ow)

    need_x, need_w = _needs_grad(x), _needs_grad(w)
    need_b = b is not None and _needs_grad(b)

    def bwd(g):
        gt = np.ascontiguousarray(g).reshape(cout, n * oh * ow)
        gw = (gt @ cols.T).reshape(w.data.shape) if need_w else None
        gb = gt.sum(axis=1) if need_b else None
        gx = None
        if need_x:
            gcols = w_mat.T @ gt
            if pointwise:
                gxp = np.zeros_like(x.data)
                gxp[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw] = gcols.reshape(
                    cin, n, oh, ow
                )
                gx = gxp
            else:
                view = gcols.reshape(cin, kh, kw, n, oh, ow)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + (oh - 1) * sh + 1 : sh,
                            j : j + (ow - 1) * sw + 1 : sw] += view[:, i, j]
                gx = gxp[:, :, pt : pt + h, pl : pl + wi]
        if b is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, "conv2d", parents, bwd)


def conv2d(x, w, b=None, stride: int | tuple[int, int] = 1) -> Tensor:
    """2-D convolution with 'same' (ceil-division) padding.

    x: (N, C_in, H, W); w: (C_out, C_in, kH, kW); optional bias (C_out,).
    Output: (N, C_out, ceil(H/sh), ceil(W/sw)).
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    out = conv2d_channel_major(transpose(x, (1, 0, 2, 3)), w, b, stride)
    return transpose(out, (1, 0, 2, 3))


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out.copy(), "narrow", (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(tensor) into every requires-grad tensor.

    The loss must be scalar. Gradients add into ``.grad`` so repeated
    backward calls without zeroing accumulate.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad and loss._backward is None:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p._backward is not None or p.requires_grad):
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not (p.requires_grad or p._backward is not None):
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    n_samples: int = 20,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. For
    each parameter, up to ``n_samples`` coordinates are sampled; returns
    the max over sampled coordinates of |a-n| / max(1e-8, |a|+|n|).
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)

    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError("finite_diff_check: non-finite loss")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        count = min(n_samples, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError("finite_diff_check: non-finite evaluation")
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for '{k}'")
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= update
            if not np.isfinite(np.sum(p.data)):
                raise NumericalError(f"non-finite parameter '{k}' after Adam step")


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"TRNC"
_VERSION = 1


def save_checkpoint(path, blocks: dict[str, Array]) -> None:
    """Write named float64 arrays: magic, version, then per-block
    (name_len u32, name utf-8, ndim u32, dims u32..., data f64 LE)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise NumericalError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise NumericalError(f"unsupported checkpoint version {version}")
        blocks: dict[str, Array] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            blocks[name] = data.copy()
    return blocks
