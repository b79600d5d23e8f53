"""Reverse-mode automatic differentiation over numpy arrays.

The engine records a dynamic computation graph: every operation returns a
:class:`Var` holding the forward value, its parent nodes, and a vector-Jacobian
callback. :func:`backward` replays the graph in reverse topological order and
accumulates gradients on every node it visits, leaves included.

All values are float64. Operations are vectorized; per-element Python loops
never appear on the forward or backward path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "as_var",
    "backward",
    "GradientBundle",
    "collect",
    "grad_check",
]


class Var:
    """A node in the computation graph wrapping one float64 ndarray."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    # keep numpy from broadcasting ufuncs over Var objects; with this unset,
    # ndarray * Var silently builds an object array instead of calling __rmul__
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Var(shape={self.data.shape}, leaf={self._vjp is None})"

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def item(self):
        return float(self.data)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data, parents, vjp) -> Var:
    return Var(data, _parents=tuple(parents), _vjp=vjp)


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(out, (a, b), vjp)


def power(a, p: float) -> Var:
    a = as_var(a)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _node(out, (a,), vjp)


def matmul(a, b) -> Var:
    """Matrix product supporting 1D/2D operands with numpy semantics."""
    a, b = as_var(a), as_var(b)
    a2 = a.data if a.data.ndim == 2 else a.data[None, :]
    b2 = b.data if b.data.ndim == 2 else b.data[:, None]
    out2 = a2 @ b2
    out = out2
    if a.data.ndim == 1:
        out = out[0]
    if b.data.ndim == 1:
        out = out[..., 0] if out.ndim > 0 else out

    def vjp(g):
        g2 = np.asarray(g, dtype=np.float64)
        if a.data.ndim == 1:
            g2 = g2[None, ...]
        if b.data.ndim == 1:
            g2 = g2[..., None]
        ga = g2 @ b2.T
        gb = a2.T @ g2
        if a.data.ndim == 1:
            ga = ga[0]
        if b.data.ndim == 1:
            gb = gb[:, 0]
        return ga, gb

    return _node(out, (a, b), vjp)


# -- shape ops -----------------------------------------------------------


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for d in sorted(ax):
                g = np.expand_dims(g, d)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def vmean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[d] for d in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (np.asarray(g).reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    out = a.data.transpose(axes)

    def vjp(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.asarray(g).transpose(inv),)

    return _node(out, (a,), vjp)


def take(a, key) -> Var:
    """Indexing/slicing; backward scatter-adds into the source shape."""
    a = as_var(a)
    out = a.data[key]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g)
        return (z,)

    return _node(out, (a,), vjp)


def concat(parts: Sequence, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        g = np.asarray(g)
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _node(out, parts, vjp)


def stack(parts: Sequence, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def vjp(g):
        g = np.asarray(g)
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _node(out, parts, vjp)


# -- elementwise nonlinearities -------------------------------------------


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp)


def log(a) -> Var:
    a = as_var(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp)


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), vjp)


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp)


def sigmoid(a) -> Var:
    a = as_var(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def relu(a) -> Var:
    a = as_var(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _node(out, (a,), vjp)


def clip_min(a, lo: float) -> Var:
    """max(a, lo); gradient is zero where the floor is active."""
    a = as_var(a)
    out = np.maximum(a.data, lo)

    def vjp(g):
        return (g * (a.data > lo),)

    return _node(out, (a,), vjp)


def clip(a, lo, hi) -> Var:
    """Two-sided clamp; gradient passes only strictly inside the range.

    ``lo``/``hi`` may be arrays broadcasting against ``a``.
    """
    a = as_var(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _node(out, (a,), vjp)


def detach(a) -> Var:
    """Cut the graph: same values, no gradient flows past this node."""
    return Var(as_var(a).data)


# -- linear algebra helpers ------------------------------------------------


def dot(a, b) -> Var:
    return vsum(mul(a, b))


def cross3(a, b) -> Var:
    """Cross product of 3-vectors (or (N,3) row batches)."""
    a, b = as_var(a), as_var(b)
    out = np.cross(a.data, b.data)

    def vjp(g):
        g = np.asarray(g)
        # d<g, a x b> = <b x g, da> + <g x a, db>
        return (
            _unbroadcast(np.cross(b.data, g), a.data.shape),
            _unbroadcast(np.cross(g, a.data), b.data.shape),
        )

    return _node(out, (a, b), vjp)


def solve(A, b) -> Var:
    """x = A^-1 b for square A; gradients flow into both A and b."""
    A, b = as_var(A), as_var(b)
    x = np.linalg.solve(A.data, b.data)

    def vjp(g):
        gb = np.linalg.solve(A.data.T, np.asarray(g, dtype=np.float64))
        gA = -np.outer(gb, x) if x.ndim == 1 else -gb @ x.T
        return gA, gb

    return _node(x, (A, b), vjp)


def batch_matvec(M, v) -> Var:
    """einsum('nij,j->ni') for a (N,r,c) stack of matrices and one (c,) vector."""
    M, v = as_var(M), as_var(v)
    out = M.data @ v.data

    def vjp(g):
        g = np.asarray(g)
        gM = g[:, :, None] * v.data[None, None, :]
        gv = np.einsum("nij,ni->j", M.data, g)
        return gM, gv

    return _node(out, (M, v), vjp)


def take_along(a, idx: np.ndarray) -> Var:
    """Row-wise gather: out[n, j] = a[n, idx[n, j]] for constant idx."""
    a = as_var(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=1)

    def vjp(g):
        z = np.zeros_like(a.data)
        rows = np.arange(a.data.shape[0])[:, None]
        np.add.at(z, (rows, idx), g)
        return (z,)

    return _node(out, (a,), vjp)


# -- image ops -------------------------------------------------------------


def bilinear_sample(image: np.ndarray, coords) -> Var:
    """Sample a constant (H,W,C) image at float pixel coords (N,2) = (x, y).

    Coordinates are clamped to the image rectangle; clamped axes get zero
    gradient (use :func:`clamp_mask` to count them). Gradients flow to the
    coordinates only, the image is constant data.
    """
    image = np.asarray(image, dtype=np.float64)
    coords = as_var(coords)
    H, W = image.shape[0], image.shape[1]
    x = np.clip(coords.data[:, 0], 0.0, W - 1.0)
    y = np.clip(coords.data[:, 1], 0.0, H - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, W - 2) if W > 1 else np.zeros(len(x), int)
    y0 = np.clip(np.floor(y).astype(int), 0, H - 2) if H > 1 else np.zeros(len(y), int)
    tx = (x - x0)[:, None]
    ty = (y - y0)[:, None]
    i00 = image[y0, x0]
    i01 = image[y0, np.minimum(x0 + 1, W - 1)]
    i10 = image[np.minimum(y0 + 1, H - 1), x0]
    i11 = image[np.minimum(y0 + 1, H - 1), np.minimum(x0 + 1, W - 1)]
    out = (1 - ty) * ((1 - tx) * i00 + tx * i01) + ty * ((1 - tx) * i10 + tx * i11)

    inside_x = (coords.data[:, 0] > 0.0) & (coords.data[:, 0] < W - 1.0)
    inside_y = (coords.data[:, 1] > 0.0) & (coords.data[:, 1] < H - 1.0)

    def vjp(g):
        g = np.asarray(g)
        dx = (1 - ty) * (i01 - i00) + ty * (i11 - i10)
        dy = (1 - tx) * (i10 - i00) + tx * (i11 - i01)
        gc = np.zeros_like(coords.data)
        gc[:, 0] = (g * dx).sum(axis=1) * inside_x
        gc[:, 1] = (g * dy).sum(axis=1) * inside_y
        return (gc,)

    return _node(out, (coords,), vjp)


def clamp_mask(image_shape, coords: np.ndarray) -> np.ndarray:
    """Boolean mask of samples that fall outside the image rectangle."""
    H, W = image_shape[0], image_shape[1]
    x, y = coords[:, 0], coords[:, 1]
    return (x < 0) | (x > W - 1) | (y < 0) | (y > H - 1)


def _win_sum(img: np.ndarray, win: int) -> np.ndarray:
    """Centered window sum with edge truncation, via padded cumsum."""
    r = win // 2
    h, w = img.shape[0], img.shape[1]
    acc = np.cumsum(np.cumsum(img, axis=0), axis=1)
    pad = np.zeros((h + 1, w + 1) + img.shape[2:])
    pad[1:, 1:] = acc
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (
        pad[y1[:, None], x1[None, :]]
        - pad[y0[:, None], x1[None, :]]
        - pad[y1[:, None], x0[None, :]]
        + pad[y0[:, None], x0[None, :]]
    )


def box_blur(a, radius: int) -> Var:
    """Centered box blur of an (H,W,C) Var with edge-truncated windows.

    The window is symmetric, so the transpose operation reuses the same
    window sum applied to the count-normalized gradient.
    """
    a = as_var(a)
    h, w = a.data.shape[0], a.data.shape[1]
    win = 2 * radius + 1
    cnt = _win_sum(np.ones((h, w)), win)[..., None]
    out = _win_sum(a.data, win) / cnt

    def vjp(g):
        return (_win_sum(np.asarray(g) / cnt, win),)

    return _node(out, (a,), vjp)


def scatter_rows(shape, rc: np.ndarray, values) -> Var:
    """Build an (H,W,C) Var that is zero except values at integer (row,col).

    Duplicate indices accumulate, which keeps the gather below an exact
    transpose.
    """
    values = as_var(values)
    rc = np.asarray(rc)
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, (rc[:, 0], rc[:, 1]), values.data)

    def vjp(g):
        return (np.asarray(g)[rc[:, 0], rc[:, 1]],)

    return _node(out, (values,), vjp)


# -- driver ----------------------------------------------------------------


def backward(root: Var, seed=None) -> None:
    """Populate ``.grad`` on every node reachable from ``root``."""
    order: list[Var] = []
    seen: set[int] = set()
    stack_: list[tuple[Var, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))

    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = (
        np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    )
    for node in reversed(order):
        if node._vjp is None or not node._parents:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None:
                parent.grad = parent.grad + g


@dataclass
class GradientBundle:
    """Scalar loss value plus gradients for a named set of leaf variables."""

    value: float
    grads: dict

    def flat(self, order: Sequence[str]) -> np.ndarray:
        return np.concatenate([np.ravel(self.grads[k]) for k in order])


def collect(loss: Var, leaves: dict) -> GradientBundle:
    """Run backward and gather gradients for ``leaves`` (name -> leaf Var)."""
    backward(loss)
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = (
            np.array(leaf.grad) if leaf.grad is not None else np.zeros_like(leaf.data)
        )
    return GradientBundle(value=float(loss.data), grads=grads)


def grad_check(
    fn: Callable[[Var], Var],
    point: np.ndarray,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a leaf Var holding a flat vector to a scalar Var. The error
    for coordinate i is |ga - gf| / max(1, |ga|, |gf|); the max over the
    probed coordinates is returned. ``coords`` restricts the finite-difference
    probes (the analytic gradient is always full).
    """
    point = np.asarray(point, dtype=np.float64).ravel()
    leaf = Var(point)
    out = fn(leaf)
    backward(out)
    ga = leaf.grad if leaf.grad is not None else np.zeros_like(point)

    idxs = range(point.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        e = np.zeros_like(point)
        e[i] = h
        fp = float(fn(Var(point + e)).data)
        fm = float(fn(Var(point - e)).data)
        gf = (fp - fm) / (2.0 * h)
        err = abs(ga[i] - gf) / max(1.0, abs(ga[i]), abs(gf))
        if err > worst:
            worst = err
    return worst
