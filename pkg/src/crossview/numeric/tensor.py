"""Dense NHWC tensors with reverse-mode differentiation.

Every op here computes its value eagerly with numpy and, when any input
requires a gradient, records a closure that pushes the output gradient
back to its inputs. ``backward`` replays those closures in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (sampling, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(value: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(value)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def square(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accum(x, 2.0 * x.data * g)

    return _make(x.data * x.data, (x,), "square", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        _accum(x, g * pos)

    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), "relu", backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        _accum(x, g * (s + x.data * s * (1.0 - s)))

    return _make(x.data * s, (x,), "silu", backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - y * y))

    return _make(y, (x,), "tanh", backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), "softmax", backward)


# -- reductions and reshaping ----------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), "sum", backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(out), (x,), "mean", backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), "reshape", backward)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), "transpose", backward)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(x, g[tuple(idx)])

    return _make(out, xs, "concat", backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with an (kh, kw, Cin, Cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    dtype = np.result_type(x.data, w.data)
    # one matmul per kernel tap over a strided view; avoids materialising im2col
    taps = [(i, j, (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride)))
            for i in range(kh) for j in range(kw)]
    out = np.zeros((n, ho, wo, co), dtype=dtype)
    for i, j, sl in taps:
        out += xp[sl] @ w.data[i, j]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {co} output channels")
        out += b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(n * ho * wo, co)
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=g.dtype)
            for i, j, sl in taps:
                gw[i, j] = xp[sl].reshape(-1, c).T @ g2
            _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, sl in taps:
                gxp[sl] += g @ w.data[i, j].T
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + wd, :]
            _accum(x, gxp)

    return _make(out, parents, "conv2d", backward)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NHWC tensor."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        n, h, w, c = x.shape
        _accum(x, g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _make(out, (x,), "upsample2x", backward)


# -- bilinear gather -----------------------------------------------------------


def grid_sample(img, coords, valid=None, wrap_cols: bool = False) -> Tensor:
    """Bilinearly sample ``img`` (N, H, W, C) at continuous (row, col) coords.

    ``coords`` has shape (N, Ht, Wt, 2) or (Ht, Wt, 2) (shared over the batch)
    and may itself be a differentiable tensor. Integer coordinates are pixel
    centres. Entries where ``valid`` is False produce zeros and no gradient.
    With ``wrap_cols`` the column axis is periodic (360 degree panoramas).
    """
    img, coords = as_tensor(img), as_tensor(coords)
    if img.ndim != 4:
        raise ShapeError(f"grid_sample: image must be NHWC, got {img.shape}")
    n, h, w, c = img.shape
    cd = coords.data
    shared = cd.ndim == 3
    if cd.shape[-1] != 2 or (not shared and (cd.ndim != 4 or cd.shape[0] != n)):
        raise ShapeError(f"grid_sample: coords shape {cd.shape} incompatible with image {img.shape}")
    cb = np.broadcast_to(cd, (n,) + cd.shape[-3:])
    ht, wt = cb.shape[1:3]
    if valid is None:
        vmask = np.ones((n, ht, wt), dtype=bool)
    else:
        vmask = np.broadcast_to(np.asarray(valid, dtype=bool), (n, ht, wt))
    r = np.where(vmask, cb[..., 0], 0.0)
    q = np.where(vmask, cb[..., 1], 0.0)
    if wrap_cols:
        q = np.mod(q, w)
    r0 = np.clip(np.floor(r), 0, h - 1).astype(np.int64)
    c0 = np.clip(np.floor(q), 0, w - 1).astype(np.int64)
    fr = (r - r0).astype(img.dtype)
    fc = (q - c0).astype(img.dtype)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = (c0 + 1) % w if wrap_cols else np.minimum(c0 + 1, w - 1)
    bidx = np.arange(n)[:, None, None]
    base = bidx * (h * w)
    i00 = (base + r0 * w + c0).ravel()
    i01 = (base + r0 * w + c1).ravel()
    i10 = (base + r1 * w + c0).ravel()
    i11 = (base + r1 * w + c1).ravel()
    m = vmask.astype(img.dtype)
    w00 = ((1 - fr) * (1 - fc) * m).reshape(-1, 1)
    w01 = ((1 - fr) * fc * m).reshape(-1, 1)
    w10 = (fr * (1 - fc) * m).reshape(-1, 1)
    w11 = (fr * fc * m).reshape(-1, 1)
    flat = img.data.reshape(n * h * w, c)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(n, ht, wt, c)

    def backward(g):
        g2 = g.reshape(-1, c)
        if img.requires_grad:
            gi = np.zeros_like(flat)
            for idx, wk in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                np.add.at(gi, idx, wk * g2)
            _accum(img, gi.reshape(img.shape))
        if coords.requires_grad:
            mm = m.reshape(-1, 1)
            fr2 = fr.reshape(-1, 1)
            fc2 = fc.reshape(-1, 1)
            d_r = ((1 - fc2) * (v10 - v00) + fc2 * (v11 - v01)) * mm
            d_c = ((1 - fr2) * (v01 - v00) + fr2 * (v11 - v10)) * mm
            gr = (d_r * g2).sum(axis=1).reshape(n, ht, wt)
            gq = (d_c * g2).sum(axis=1).reshape(n, ht, wt)
            gcoord = np.stack([gr, gq], axis=-1)
            if shared:
                gcoord = gcoord.sum(axis=0)
            _accum(coords, gcoord)

    return _make(out, (img, coords), "grid_sample", backward)


# -- graph traversal -----------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Returns the gradients of the leaf tensors (parameters and inputs that
    require grad). Gradients accumulate into existing ``.grad`` buffers;
    callers zero them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        if node._backward is None:
            leaves[node] = node.grad
            continue
        if node.grad is not None:
            node._backward(node.grad)
        # intermediates release their buffers once consumed
        if node is not loss:
            node.grad = None
    return {t: t.grad for t in leaves}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
