"""Tape-based reverse-mode differentiation over dense real and complex arrays.

Tensors wrap a numpy array (``float64`` or ``complex128``).  Operations executed
while a :class:`Tape` is active are recorded together with a backward rule;
``Tape.backward`` replays them in reverse.

Complex gradients are carried as a single complex array ``dL/dRe + 1j*dL/dIm``
so the real and imaginary planes receive independent real gradients.  With that
convention a linear map ``y = A x`` back-propagates as ``gx = A^H gy`` and a
product ``y = a*b`` as ``ga = gy * conj(b)``.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "exp",
    "log",
    "softplus",
    "sqrt",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "embed",
    "make_complex",
    "real",
    "imag",
    "conj",
    "abs2",
    "fft",
    "ifft",
    "circular_conv",
    "conv2d",
    "avgpool2d",
    "softmax_cross_entropy",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if np.iscomplexobj(arr):
            arr = arr.astype(np.complex128, copy=False)
        else:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag if self.is_complex else np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        kind = "complex" if self.is_complex else "real"
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}({kind}, shape={self.shape})"

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records operations for one forward pass.

    Use as a context manager; tapes nest per thread, and only the innermost
    tape records.  A tape is single-use: build a new one per forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Back-propagate ``loss`` and return ``{param: gradient}``.

        Gradients are also stored on each reachable leaf's ``.grad``.  When
        ``params`` is given every listed parameter appears in the result, with a
        zero gradient if the loss does not depend on it.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.is_complex:
            raise ValueError("backward needs a real-valued loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not parent.is_complex and np.iscomplexobj(pg):
                    pg = pg.real
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    leaves.setdefault(key, parent)
        result: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            if key in grads:
                t.grad = grads[key]
                result[t] = grads[key]
        if params is not None:
            for p in params:
                if p not in result:
                    p.grad = np.zeros_like(p.data)
                    result[p] = p.grad
        return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * np.conj(bd), g * np.conj(ad)))


def relu(x: Tensor) -> Tensor:
    if x.is_complex:
        raise TypeError("relu: complex input; apply to real/imag planes separately")
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * np.conj(y),))


def log(x: Tensor) -> Tensor:
    if x.is_complex:
        raise TypeError("log: complex input not supported")
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    y = np.logaddexp(0.0, xd)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _record(y, (x,), lambda g: (g * sig,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _record(y, (x,), lambda g: (g * 0.5 / y,))


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}: {err}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.conj(np.swapaxes(bd, -1, -2))) if a.requires_grad else None
        gb = np.matmul(np.conj(np.swapaxes(ad, -1, -2)), g) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    orig = x.shape
    return _record(y, (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
    else:
        inverse = None
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def _getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} along axis {axis}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(out, xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {[x.shape for x in xs]}")
    out = np.stack([x.data for x in xs], axis=axis)
    return _record(out, xs, lambda g: tuple(np.moveaxis(g, axis, 0)))


def embed(x: Tensor, index: np.ndarray, size: int, axis: int) -> Tensor:
    """Place ``x`` at positions ``index`` of a zero array of length ``size`` along ``axis``."""
    axis = axis % x.ndim
    if len(index) != x.shape[axis]:
        raise ShapeError(f"embed: {len(index)} positions for axis of length {x.shape[axis]}")
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.data.dtype)
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)
    out[sl] = x.data
    return _record(out, (x,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# complex plumbing


def make_complex(re: Tensor, im: Tensor) -> Tensor:
    re, im = _as_tensor(re), _as_tensor(im)
    if re.shape != im.shape:
        raise ShapeError(f"make_complex: real {re.shape} vs imag {im.shape}")
    if re.is_complex or im.is_complex:
        raise TypeError("make_complex: planes must be real")
    return _record(re.data + 1j * im.data, (re, im), lambda g: (g.real, g.imag))


def real(x: Tensor) -> Tensor:
    return _record(np.ascontiguousarray(x.data.real), (x,), lambda g: (g.astype(np.complex128),))


def imag(x: Tensor) -> Tensor:
    return _record(np.ascontiguousarray(x.data.imag), (x,), lambda g: (1j * g,))


def conj(x: Tensor) -> Tensor:
    return _record(np.conj(x.data), (x,), lambda g: (np.conj(g),))


def abs2(x: Tensor) -> Tensor:
    xd = x.data
    return _record((xd * np.conj(xd)).real, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# transforms


def _check_pow2(op: str, n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ShapeError(f"{op}: axis length {n} is not a power of two")


def fft(x: Tensor, axis: int = -1) -> Tensor:
    """Unitary DFT along ``axis`` (scale ``1/sqrt(N)``)."""
    _check_pow2("fft", x.shape[axis])
    y = np.fft.fft(x.data, axis=axis, norm="ortho")
    return _record(y, (x,), lambda g: (np.fft.ifft(g, axis=axis, norm="ortho"),))


def ifft(x: Tensor, axis: int = -1) -> Tensor:
    """Unitary inverse DFT along ``axis``."""
    _check_pow2("ifft", x.shape[axis])
    y = np.fft.ifft(x.data, axis=axis, norm="ortho")
    return _record(y, (x,), lambda g: (np.fft.fft(g, axis=axis, norm="ortho"),))


FFT_CONV_THRESHOLD = 64


def circulant(key: np.ndarray) -> np.ndarray:
    """Matrix ``C`` with ``C[j, i] = key[(j - i) mod n]`` so that ``C @ a == a (*) key``."""
    n = key.shape[-1]
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return key[..., idx]


def _circ_conv_direct(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    # a: [..., n] and k: [n]
    return a @ circulant(k).T


def _circ_conv_fft(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    return np.fft.irfft(np.fft.rfft(a, axis=-1) * np.fft.rfft(k), n=n, axis=-1)


def _circ_corr_fft(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    return np.fft.irfft(np.fft.rfft(g, axis=-1) * np.conj(np.fft.rfft(k)), n=n, axis=-1)


def circular_conv(a: Tensor, key: Tensor, axis: int = -1, method: str = "auto") -> Tensor:
    """Circular convolution of every fiber of ``a`` along ``axis`` with a real ``key``.

    ``out[..., j, ...] = sum_i a[..., i, ...] * key[(j - i) mod n]``.
    """
    a, key = _as_tensor(a), _as_tensor(key)
    if key.ndim != 1:
        raise ShapeError(f"circular_conv: key must be 1-D, got {key.shape}")
    n = a.shape[axis]
    if key.shape[0] != n:
        raise ShapeError(f"circular_conv: key length {key.shape[0]} != axis length {n} of {a.shape}")
    if a.is_complex or key.is_complex:
        raise TypeError("circular_conv: real operands only")
    if method == "auto":
        method = "fft" if n >= FFT_CONV_THRESHOLD else "direct"
    am = np.moveaxis(a.data, axis, -1)
    kd = key.data
    if method == "fft":
        out = _circ_conv_fft(am, kd)
    elif method == "direct":
        out = _circ_conv_direct(am, kd)
    else:
        raise ValueError(f"circular_conv: unknown method {method!r}")

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        ga = gk = None
        if method == "direct":
            if a.requires_grad:
                ga = np.moveaxis(gm @ circulant(kd), -1, axis)
            if key.requires_grad:
                # corr[j, i] = sum over fibers of g_j a_i; gk_m collects entries with j - i = m
                corr = gm.reshape(-1, n).T @ am.reshape(-1, n)
                j = np.arange(n)
                gk = np.array([corr[j, (j - m) % n].sum() for m in range(n)])
            return ga, gk
        if a.requires_grad:
            ga = np.moveaxis(_circ_corr_fft(gm, kd), -1, axis)
        if key.requires_grad:
            # d out_j / d k_m = a_{(j - m) mod n}: correlate g with a, sum over fibers
            flat_g = gm.reshape(-1, n)
            flat_a = am.reshape(-1, n)
            spec = (np.fft.rfft(flat_g, axis=-1) * np.conj(np.fft.rfft(flat_a, axis=-1))).sum(axis=0)
            gk = np.fft.irfft(spec, n=n)
        return ga, gk

    return _record(np.moveaxis(out, -1, axis), (a, key), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation.  ``x: [B, C, H, W]``, ``w: [O, C, kh, kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B C Ho Wo kh kw
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if b is not None:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _record(out, parents, backward)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avgpool2d: spatial shape {(H, W)} not divisible by {k}")
    y = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _record(y, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N, classes], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients with central finite differences.

    ``f`` must be deterministic (any sampling noise frozen).  Returns the max over
    checked entries of ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``max_entries`` only a random subset of each parameter's entries is probed.
    """
    with Tape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ga = np.real(analytic[p]).reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + epsilon
            up = f().item()
            flat[i] = old - epsilon
            down = f().item()
            flat[i] = old
            numeric = (up - down) / (2 * epsilon)
            worst = max(worst, abs(ga[i] - numeric) / max(1.0, abs(numeric)))
    return worst
