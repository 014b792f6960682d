"""Minimal reverse-mode tensor library and Adam optimizer.

Images and feature maps are NCHW arrays. Only the ops the refiner needs are
provided; every op records a closure that maps the upstream gradient to the
gradients of its inputs.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_DTYPE = np.float32


class ShapeError(ValueError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 or float64).

    float64 exists only to tighten gradient-check tolerances.
    """
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    prev, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# ops


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv3x3 expects NCHW input, got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 weight must be (out, in, 3, 3), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3x3 channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3x3 bias must be ({weight.shape[0]},), got {bias.shape}")

    w = weight.data
    out, cols = _conv_forward(x.data, w, bias.data)

    def backward(g):
        o = g.shape[1]
        gf = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gf @ cols.T).reshape(w.shape)
        gb = gf.sum(axis=1)
        flipped = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        gx, _ = _conv_forward(g, flipped, np.zeros(flipped.shape[0], dtype=g.dtype))
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Returns the output and the (C*9, N*H*W) column matrix used for weight grads."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.zeros((c, n, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h, wd), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            cols[:, u, v] = xp[:, :, u:u + h, v:v + wd]
    cols = cols.reshape(c * 9, n * h * wd)
    out = (w.reshape(o, c * 9) @ cols).reshape(o, n, h, wd) + b[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols


def elu(x: Tensor) -> Tensor:
    d = x.data
    neg = np.expm1(np.minimum(d, 0))
    out = np.where(d > 0, d, neg)

    def backward(g):
        return (g * np.where(d > 0, 1, neg + 1).astype(d.dtype),)

    return _make(out, (x,), backward)


def resize_nearest(x: Tensor, factor: int, direction: str) -> Tensor:
    """Nearest-neighbour resize by an integer factor.

    Upsampling replicates each pixel into a factor x factor block; downsampling
    keeps the top-left pixel of each block, so down(up(x)) == x exactly.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be an integer >= 1, got {factor!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"resize_nearest expects NCHW input, got shape {x.shape}")
    f = int(factor)
    n, c, h, w = x.shape
    if direction == "up":
        out = x.data.repeat(f, axis=2).repeat(f, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    elif direction == "down":
        if h % f or w % f:
            raise ShapeError(f"cannot downsample {h}x{w} by {f}: not divisible")
        out = np.ascontiguousarray(x.data[:, :, ::f, ::f])

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[:, :, ::f, ::f] = g
            return (gx,)

    else:
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    if f == 1:
        out = out.copy()
    return _make(out, (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x W^T + b for x of shape (batch, n)."""
    if x.data.ndim != 2:
        raise ShapeError(f"fully_connected expects (batch, n) input, got {x.shape}")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input width {x.shape[1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected bias must be ({weight.shape[0]},), got {bias.shape}")
    xd, w = x.data, weight.data
    out = xd @ w.T + bias.data

    def backward(g):
        return g @ w, g.T @ xd, g.sum(axis=0)

    return _make(out, (x, weight, bias), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), backward)


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements, as a 0-d tensor."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_mean shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.abs(diff).mean(dtype=diff.dtype)

    def backward(g):
        ga = np.sign(diff) * (g / diff.size)
        return ga, -ga

    return _make(np.asarray(out, dtype=diff.dtype), (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(x: Tensor, c) -> Tensor:
    if isinstance(c, Tensor):
        raise TypeError("scale multiplies by a Python number, not a Tensor")
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    _backprop(loss, np.ones((), dtype=loss.data.dtype))


def _backprop(root: Tensor, seed: np.ndarray) -> None:
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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

    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    s: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing)}")
    for name, p in params.items():
        if p.grad.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {p.grad.shape} != param shape {p.shape} for {name}")

    state.t += 1
    t = state.t
    for name, p in params.items():
        dt = p.data.dtype.type
        b1, b2 = dt(state.beta1), dt(state.beta2)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.s[name] = np.zeros_like(p.data)
        g = p.grad
        m = state.m[name] = b1 * state.m[name] + (dt(1) - b1) * g
        s = state.s[name] = b2 * state.s[name] + (dt(1) - b2) * (g * g)
        m_hat = m / dt(1.0 - state.beta1**t)
        s_hat = s / dt(1.0 - state.beta2**t)
        p.data = p.data - dt(state.lr) * m_hat / (np.sqrt(s_hat) + dt(state.epsilon))
    return state


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

