"""Dense float64 tensors with reverse-mode automatic differentiation.

Every ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record their parents and a closure mapping the output gradient to
parent gradients; :meth:`Tensor.backward` replays those closures in reverse
topological order.

Only the operator set needed by the segmentation backbone and the training
losses is provided: broadcasting arithmetic, a handful of unary functions,
reductions, 2-D convolution, channel softmax and per-channel z-score
normalisation.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = ""

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -----------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    # -- backpropagation ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every tensor t in the graph.

        ``self`` must hold a single value. Gradients add onto whatever is
        already stored, so call :meth:`zero_grad` between independent passes.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each listed after all of its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise binary -------------------------------------------------------


def elementwise(op_kind: str, a, b) -> Tensor:
    """Apply ``add``, ``sub``, ``mul`` or ``div`` with numpy broadcasting."""
    try:
        fn = _BINARY[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._result(ad / bd, (a, b), backward, "div")


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


# -- unary --------------------------------------------------------------------


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return Tensor._result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return Tensor._result(np.where(positive, a.data, 0.0), (a,), lambda g: (g * positive,), "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to ``[lo, hi]``; the gradient is zero where clamping bit."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._result(np.asarray(out), (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)

    def backward(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return Tensor._result(np.asarray(out), (a,), backward, "mean")


# -- convolution --------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [C,H,W] or [N,C,H,W] with ``kernel`` [O,C,kH,kW].

    Zero padding of ``padding`` pixels is applied on every side, stride 1.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected input [C,H,W] or [N,C,H,W] and kernel [O,C,kH,kW], got {x.shape} and {kernel.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {kernel.shape} expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    p = int(padding)
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {kernel.shape} with padding {p}")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + ho, j : j + wo].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, -1)
    w2 = kernel.data.reshape(o, -1)
    out = (w2 @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (g2 @ cols2.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            if not batched:
                gx = gx[0]
        return gx, gk

    return Tensor._result(out, (x, kernel), backward, "conv2d")


# -- normalisation ------------------------------------------------------------


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over the channel axis (axis -3) of [C,H,W] or [N,C,H,W] logits."""
    if logits.ndim < 3:
        raise DimensionError(f"softmax_channels: expected [C,H,W] or [N,C,H,W], got {logits.shape}")
    if logits.shape[-3] < 2:
        raise ContractError(f"softmax_channels: need at least 2 channels, got {logits.shape[-3]}")
    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-3, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-3, keepdims=True)),)

    return Tensor._result(s, (logits,), backward, "softmax")


ZSCORE_EPS = 1e-6


def zscore_normalize(channel: Tensor, eps: float = ZSCORE_EPS) -> Tensor:
    """Standardise each [H,W] plane (the last two axes) to zero mean, unit std.

    Uses the population standard deviation. Planes whose std does not exceed
    ``eps`` map to zeros and pass no gradient.
    """
    if channel.ndim < 2 or channel.size == 0:
        raise DimensionError(f"zscore_normalize: expected a non-empty [..., H, W] tensor, got {channel.shape}")
    xd = channel.data
    mu = xd.mean(axis=(-2, -1), keepdims=True)
    centred = xd - mu
    sd = np.sqrt((centred * centred).mean(axis=(-2, -1), keepdims=True))
    live = sd > eps
    safe_sd = np.where(live, sd, 1.0)
    y = np.where(live, centred / safe_sd, 0.0)

    def backward(g):
        gm = g.mean(axis=(-2, -1), keepdims=True)
        gy = (g * y).mean(axis=(-2, -1), keepdims=True)
        return (np.where(live, (g - gm - y * gy) / safe_sd, 0.0),)

    return Tensor._result(y, (channel,), backward, "zscore")
