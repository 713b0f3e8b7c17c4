"""Dense float64 tensors with reverse-mode automatic differentiation.

Each op builds a node holding references to its parents and a closure that
pushes the output gradient back into them.  ``backward`` walks the graph in
reverse topological order so every node is visited exactly once and
gradients from multiple paths are summed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, _parents=tuple(parents) if rg else (), op=op)
    if rg:
        out._backward = fn
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accum(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``leaves``; zeros when disconnected."""
    leaves = list(leaves)
    for t in leaves:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    return _node(a.data ** p, (a,), "pow", lambda g: (g * p * a.data ** (p - 1),))


def tabs(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), "sum", fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def index(a: Tensor, key) -> Tensor:
    """Basic (slice) indexing; the gradient is scattered back into place."""

    def fn(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _node(a.data[key], (a,), "index", fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat",
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), "stack",
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _node(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _node(out, (a,), "elu", lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _node(out, (a,), "log_softmax",
                 lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with w of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-dim {w.shape[1]}")
    y = matmul(x, _transpose(w))
    return add(y, b) if b is not None else y


def _transpose(w: Tensor) -> Tensor:
    return _node(w.data.T, (w,), "transpose", lambda g: (g.T,))


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (N, C, H+2, W+2) -> (N, C*9, H*W), tap-major within each channel
    n, c = xp.shape[:2]
    cols = np.empty((n, c, 9, h, w))
    for i in range(3):
        for j in range(3):
            cols[:, :, 3 * i + j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * 9, h * w)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x[N,C,H,W] and w[K,C,3,3]")
    n, c, h, wd = x.shape
    k = w.shape[0]
    if w.shape[1:] != (c, 3, 3):
        raise ShapeError(f"conv2d: weight {w.shape} does not match {c} input channels / 3x3 kernel")
    if b.shape != (k,):
        raise ShapeError(f"conv2d: bias {b.shape} != ({k},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, wd)
    wf = w.data.reshape(k, c * 9)
    out = (np.matmul(wf, cols) + b.data[:, None]).reshape(n, k, h, wd)

    def fn(g):
        gf = g.reshape(n, k, h * wd)
        gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gb = gf.sum(axis=(0, 2)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wf.T, gf).reshape(n, c, 9, h, wd)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + wd] += dcols[:, :, 3 * i + j]
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb

    return _node(out, (x, w, b), "conv2d", fn)


def max_pool2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling; ties route the gradient to the first window element."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # argmax returns the first maximal index
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _node(out, (x,), "max_pool2", fn)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    a = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a[np.arange(n_out), lo] = 1.0 - frac
    a[np.arange(n_out), lo + 1] += frac
    return a


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: output dims must be >= 1")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ah, aw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    out = ah @ x.data @ aw.T
    return _node(out, (x,), "resize", lambda g: (ah.T @ g @ aw,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = (0, 2, 3) if x.data.ndim == 4 else (0,)
    shp = (1, -1, 1, 1) if x.data.ndim == 4 else (1, -1)
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in training mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

    def fn(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data.reshape(shp)
            if training:
                m = x.data.size // x.shape[1]
                gx = (inv.reshape(shp) / m) * (
                    m * gxh - gxh.sum(axis=axes).reshape(shp)
                    - xhat * (gxh * xhat).sum(axis=axes).reshape(shp))
            else:
                gx = gxh * inv.reshape(shp)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), "batch_norm", fn)


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell step.

    ``w_x`` is (4H, D), ``w_h`` is (4H, H), ``b`` is (4H,); gate order is
    input, forget, candidate, output.
    """
    hid = h.shape[-1]
    if w_x.shape != (4 * hid, x.shape[-1]) or w_h.shape != (4 * hid, hid) or b.shape != (4 * hid,):
        raise ShapeError("lstm_step: weight shapes do not match input/hidden sizes")
    z = linear(x, w_x, b) + linear(h, w_h)
    i = sigmoid(index(z, (Ellipsis, slice(0, hid))))
    f = sigmoid(index(z, (Ellipsis, slice(hid, 2 * hid))))
    g = tanh(index(z, (Ellipsis, slice(2 * hid, 3 * hid))))
    o = sigmoid(index(z, (Ellipsis, slice(3 * hid, 4 * hid))))
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def dft_matrix(n: int) -> np.ndarray:
    """Rows k = 1..n/2 of the unnormalized forward DFT matrix."""
    k = np.arange(1, n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return np.exp(-2j * math.pi * k * t / n)


def dft_magnitude(x: Tensor) -> Tensor:
    """|DFT(x)| for bins 1..N/2 along the last axis (DC excluded, no 1/N)."""
    n = x.shape[-1]
    if n % 2:
        raise ShapeError(f"dft_magnitude needs an even length, got {n}")
    spec = np.fft.fft(x.data, axis=-1)[..., 1:n // 2 + 1]
    mag = np.abs(spec)

    def fn(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            phase = np.where(mag > 0, np.conj(spec) / np.where(mag > 0, mag, 1.0), 0.0)
        return (np.real((g * phase) @ dft_matrix(n)),)

    return _node(mag, (x,), "dft_magnitude", fn)


def gather2d(x: Tensor, flat_index: np.ndarray, valid: np.ndarray) -> Tensor:
    """Pick ``x[..., flat_index]`` over the flattened last two axes; invalid -> 0."""
    lead = x.shape[:-2]
    flat = x.data.reshape(lead + (-1,))
    idx = np.where(valid, flat_index, 0)
    out = np.where(valid, np.take(flat, idx, axis=-1), 0.0)

    def fn(g):
        gf = np.zeros_like(flat)
        gm = np.where(valid, g, 0.0).reshape(lead + (-1,))
        np.add.at(gf, (Ellipsis, idx.reshape(-1)), gm)
        return (gf.reshape(x.shape),)

    return _node(out, (x,), "gather2d", fn)
