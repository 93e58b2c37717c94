"""Dense numpy tensors with a reverse-mode gradient tape.

Only the operators needed by the branch encoders, the fusion blocks and the
CCC loss are provided. Each op records its parents and a closure that maps
the output gradient to parent gradients; ``Tensor.backward`` walks the
recorded graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_kink_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("kink_log", default=None)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (context-local)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Intermediate gradients live only for the duration of the call, so a
        second call on the same graph adds exactly the same amount again.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("implicit gradient seed requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x))
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


@contextlib.contextmanager
def relu_patterns():
    """Record the sign pattern of every ``relu`` input evaluated inside the block."""
    seen: list[bytes] = []
    token = _kink_log.set(seen)
    try:
        yield seen
    finally:
        _kink_log.reset(token)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    seen = _kink_log.get()
    if seen is not None:
        seen.append(np.packbits(x.data > 0).tobytes())
    return Tensor._make(out, (x,), lambda g: (g * (out > 0),), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return Tensor._make(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return Tensor._make(np.swapaxes(x.data, a1, a2), (x,),
                        lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(x.data[idx], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat extent mismatch off axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(lo, hi)
                out.append(g[tuple(sl)])
            else:
                out.append(None)
        return tuple(out)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis % (t.ndim + 1)
        shape.insert(ax, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward, "sum")


def _count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = _count(x.shape, axis)
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population (1/N) variance."""
    n = _count(x.shape, axis)
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    out = (centered * centered).mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * centered * (2.0 / n),)

    return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), backward, "variance")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if b.ndim > 1 else None
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., Din] @ W[Din, Dout] + b[Dout]``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match output width {W.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (W.shape[1],))
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g2.sum(axis=0) if b.requires_grad else None)

    return Tensor._make(out, parents, backward, "linear")


def conv1d_dilated_causal(x: Tensor, K: Tensor, b: Tensor | None, dilation: int = 1) -> Tensor:
    """Causal dilated convolution over the time axis.

    x is ``[..., T, Cin]``, K is ``[k, Cin, Cout]``. Tap ``j`` of the kernel
    reads ``x[t - (k - 1 - j) * dilation]``; positions before the start are
    zeros, so the output keeps length T and never sees the future.
    """
    if int(dilation) != dilation or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    x = as_tensor(x)
    k, cin, cout = K.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d: input channels {x.shape[-1]} != kernel channels {cin}")
    T = x.shape[-2]
    lead = x.shape[:-2]
    cols = np.zeros(lead + (T, k, cin), dtype=x.dtype)
    for j in range(k):
        shift = (k - 1 - j) * dilation
        if shift < T:
            cols[..., shift:, j, :] = x.data[..., :T - shift, :]
    Kmat = K.data.reshape(k * cin, cout)
    lead = lead + (T,)
    cols2 = cols.reshape(-1, k * cin)
    out = cols2 @ Kmat
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (cout,))
    parents = (x, K) if b is None else (x, K, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gK = gb = None
        if x.requires_grad:
            gcols = (g2 @ Kmat.T).reshape(lead + (k, cin))
            gx = np.zeros(x.shape, dtype=g.dtype)
            for j in range(k):
                shift = (k - 1 - j) * dilation
                if shift < T:
                    gx[..., :T - shift, :] += gcols[..., shift:, j, :]
        if K.requires_grad:
            gK = (cols2.T @ g2).reshape(K.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gK) if b is None else (gx, gK, gb)

    return Tensor._make(out, parents, backward, "conv1d")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p:p + h, p:p + w] = x
    return out


def conv2d_nhwc(x: Tensor, K: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last cross-correlation: ``x[N, H, W, C]`` with ``K[Cout, C, kh, kw]``."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    cout, cin, kh, kw = K.shape
    if c != cin:
        raise ValueError(f"conv2d: input channels {c} != kernel channels {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = _pad_hw(x.data, padding)
    # cols[n, i, j, (di, dj, c)] gathered tap by tap
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    cols2 = cols.reshape(n * ho * wo, kh * kw * c)
    Kmat = K.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, cout)
    out = cols2 @ Kmat
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, K) if b is None else (x, K, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gK = gb = None
        if x.requires_grad:
            gcols = (g2 @ Kmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :]
        if K.requires_grad:
            gK = (cols2.T @ g2).reshape(kh, kw, c, cout).transpose(3, 2, 0, 1)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gK) if b is None else (gx, gK, gb)

    return Tensor._make(out, parents, backward, "conv2d")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def conv2d(x: Tensor, K: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N, C, H, W]`` (or ``[C, H, W]``) with ``K[Cout, C, kh, kw]``.

    Output extents are ``floor((H + 2p - k) / s) + 1``.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects [N, C, H, W] or [C, H, W], got shape {x.shape}")
    out = transpose(conv2d_nhwc(transpose(x, (0, 2, 3, 1)), K, b, stride, padding), (0, 3, 1, 2))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], h: float = 1e-4,
               max_elements: int | None = None, rng: np.random.Generator | None = None,
               skip_kinks: bool = False, stats: dict | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` is a zero-argument closure reading ``x`` (one tensor or several).
    The error per element is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``max_elements`` samples that many entries per tensor instead of all.
    With ``skip_kinks`` an element is left out when either perturbation flips
    the sign of some ReLU input, since the difference quotient then straddles
    a kink. ``stats`` receives the checked and skipped counts.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ValueError("grad_check needs float64 tensors")
        t.data = np.ascontiguousarray(t.data)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with relu_patterns() as base:
        out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    worst, checked, skipped = 0.0, 0, 0

    def evaluate():
        with relu_patterns() as seen:
            value = float(f().data)
        return value, seen == base

    try:
        for t in xs:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
            with no_grad():
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + h
                    fp, same_p = evaluate()
                    flat[i] = orig - h
                    fm, same_m = evaluate()
                    flat[i] = orig
                    if skip_kinks and not (same_p and same_m):
                        skipped += 1
                        continue
                    num = (fp - fm) / (2 * h)
                    ana = float(analytic.reshape(-1)[i])
                    err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                    worst = max(worst, err)
                    checked += 1
    finally:
        for t, r in zip(xs, saved):
            t.requires_grad = r
            t.grad = None
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst
