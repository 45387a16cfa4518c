"""Minimal reverse-mode autodiff over dense float32 numpy arrays.

Only the operations the rendering pipeline needs are implemented.  The
graph is built eagerly: every op returns a new Tensor holding its parents
and a closure that routes the incoming gradient to them.  backward() runs
a topological sweep once; calling it a second time on the same graph
raises, which catches the classic stale-graph bug early.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None
        self._done = False

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        if self._done:
            raise RuntimeError("backward() already called on this graph")
        self._done = True

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p._parents or p.requires_grad):
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)
        # Free the graph so intermediate buffers can be collected.
        for node in order:
            if node is not self:
                node._parents = ()
                node._backprop = None

    # ------------------------------------------------------------------
    # operator sugar
    def __neg__(self):
        return mul(self, -1.0)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(wrap(other), -1.0))

    def __rsub__(self, other):
        return add(wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _needs_graph(*ts):
    return _grad_enabled and any(t.requires_grad or t._parents for t in ts)


def _make(data, parents, backprop):
    out = Tensor(data)
    if _needs_graph(*parents):
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _accum(t, g):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# arithmetic
def add(a, b):
    a, b = wrap(a), wrap(b)
    data = a.data + b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backprop)


def mul(a, b):
    a, b = wrap(a), wrap(b)
    data = a.data * b.data

    def backprop(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backprop)


def div(a, b):
    a, b = wrap(a), wrap(b)
    data = a.data / b.data

    def backprop(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return _make(data, (a, b), backprop)


def square(a):
    return mul(a, a)


def matmul(a, b):
    a, b = wrap(a), wrap(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    data = a.data @ b.data

    def backprop(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(data, (a, b), backprop)


# ----------------------------------------------------------------------
# elementwise nonlinearities
def exp(a):
    a = wrap(a)
    data = np.exp(a.data)

    def backprop(g):
        _accum(a, g * data)

    return _make(data, (a,), backprop)


def log(a):
    a = wrap(a)
    data = np.log(a.data)

    def backprop(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backprop)


def sqrt(a):
    a = wrap(a)
    data = np.sqrt(a.data)

    def backprop(g):
        _accum(a, g * (0.5 / np.maximum(data, 1e-12)))

    return _make(data, (a,), backprop)


def sin(a):
    a = wrap(a)
    data = np.sin(a.data)

    def backprop(g):
        _accum(a, g * np.cos(a.data))

    return _make(data, (a,), backprop)


def cos(a):
    a = wrap(a)
    data = np.cos(a.data)

    def backprop(g):
        _accum(a, -g * np.sin(a.data))

    return _make(data, (a,), backprop)


def softplus(a):
    a = wrap(a)
    x = a.data
    data = np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))

    def backprop(g):
        _accum(a, g * sig)

    return _make(data.astype(np.float32), (a,), backprop)


def sigmoid(a):
    a = wrap(a)
    data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
    data = data.astype(np.float32)

    def backprop(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backprop)


def relu(a):
    a = wrap(a)
    data = np.maximum(a.data, 0.0)

    def backprop(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), backprop)


def softmax(a, axis=-1):
    a = wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)

    def backprop(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), backprop)


# ----------------------------------------------------------------------
# shape ops
def reshape(a, shape):
    a = wrap(a)
    data = a.data.reshape(shape)

    def backprop(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backprop)


def transpose_2d(a):
    a = wrap(a)
    data = a.data.T.copy()

    def backprop(g):
        _accum(a, g.T)

    return _make(data, (a,), backprop)


def scatter_rows(values, idx, n_rows):
    """Place row block `values` (M, C) at rows `idx` of an (n_rows, C) zero
    tensor.  Inverse of a row gather; duplicate indices accumulate."""
    values = wrap(values)
    idx = np.asarray(idx)
    data = np.zeros((n_rows,) + values.data.shape[1:], dtype=np.float32)
    np.add.at(data, idx, values.data)

    def backprop(g):
        _accum(values, g[idx])

    return _make(data, (values,), backprop)


def concat(tensors, axis=-1):
    tensors = [wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backprop(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            _accum(t, piece)

    return _make(data, tuple(tensors), backprop)


def getitem(a, key):
    a = wrap(a)
    data = a.data[key]

    def backprop(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _make(data, (a,), backprop)


def take(a, idx):
    """Gather from the flattened tensor; backward scatter-adds."""
    a = wrap(a)
    idx = np.asarray(idx)
    flat = a.data.reshape(-1)
    data = flat[idx]

    def backprop(g):
        full = np.bincount(idx.reshape(-1), weights=g.reshape(-1).astype(np.float64),
                           minlength=a.data.size).astype(np.float32)
        _accum(a, full.reshape(a.data.shape))

    return _make(data, (a,), backprop)


def tsum(a, axis=None, keepdims=False):
    a = wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backprop)


def tmean(a, axis=None, keepdims=False):
    a = wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ----------------------------------------------------------------------
# interpolation gathers
def grid_sample_3d(volume, points):
    """Trilinear sample of a (C, Nx, Ny, Nz) volume at (N, 3) voxel coords.

    Zero-padded outside the grid; differentiable in both the volume values
    and the sample coordinates.  Returns (N, C).
    """
    volume, points = wrap(volume), wrap(points)
    vol = volume.data
    C, Nx, Ny, Nz = vol.shape
    p = points.data
    x0 = np.floor(p).astype(np.int64)
    f = (p - x0).astype(np.float32)

    vals = np.zeros((8, p.shape[0], C), dtype=np.float32)
    wts = np.zeros((8, p.shape[0]), dtype=np.float32)
    masks, idxs = [], []
    dims = np.array([Nx, Ny, Nz])
    flat = vol.reshape(C, -1)
    for c in range(8):
        d = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        corner = x0 + d
        ok = np.all((corner >= 0) & (corner < dims), axis=1)
        w = np.prod(np.where(d, f, 1.0 - f), axis=1).astype(np.float32)
        ci = np.where(ok[:, None], corner, 0)
        lin = (ci[:, 0] * Ny + ci[:, 1]) * Nz + ci[:, 2]
        v = flat[:, lin].T * ok[:, None]
        vals[c] = v
        wts[c] = w * ok
        masks.append(ok)
        idxs.append((lin, ok, d))
    data = np.einsum("kn,knc->nc", wts, vals)

    def backprop(g):
        if volume.requires_grad or volume._parents:
            gv = np.zeros_like(flat)
            ncell = flat.shape[1]
            for c in range(8):
                lin, ok, d = idxs[c]
                contrib = g * wts[c][:, None]
                li = lin[ok]
                co = contrib[ok]
                for ch in range(C):
                    gv[ch] += np.bincount(li, weights=co[:, ch],
                                          minlength=ncell).astype(np.float32)
            _accum(volume, gv.reshape(vol.shape))
        if points.requires_grad or points._parents:
            gp = np.zeros_like(p)
            gdot = np.einsum("nc,knc->kn", g, vals)  # (8, N)
            for c in range(8):
                _, ok, d = idxs[c]
                for ax in range(3):
                    # d weight / d f_ax
                    others = [a for a in range(3) if a != ax]
                    dw = np.ones(p.shape[0], dtype=np.float32)
                    for a in others:
                        dw *= f[:, a] if d[a] else (1.0 - f[:, a])
                    dw *= 1.0 if d[ax] else -1.0
                    gp[:, ax] += gdot[c] * dw * ok
            _accum(points, gp)

    return _make(data, (volume, points), backprop)


def grid_sample_2d(image, points):
    """Bilinear sample of a (C, H, W) map at (N, 2) pixel coords (x, y).

    Pixel centers sit at integer coordinates; zero-padded outside.
    Differentiable in both the map and the coordinates.  Returns (N, C).
    """
    image, points = wrap(image), wrap(points)
    img = image.data
    C, H, W = img.shape
    p = points.data
    xy = p[:, ::-1]  # work in (row=y, col=x)
    x0 = np.floor(xy).astype(np.int64)
    f = (xy - x0).astype(np.float32)
    dims = np.array([H, W])
    flat = img.reshape(C, -1)
    vals = np.zeros((4, p.shape[0], C), dtype=np.float32)
    wts = np.zeros((4, p.shape[0]), dtype=np.float32)
    idxs = []
    for c in range(4):
        d = np.array([(c >> 1) & 1, c & 1])
        corner = x0 + d
        ok = np.all((corner >= 0) & (corner < dims), axis=1)
        w = np.prod(np.where(d, f, 1.0 - f), axis=1).astype(np.float32)
        ci = np.where(ok[:, None], corner, 0)
        lin = ci[:, 0] * W + ci[:, 1]
        vals[c] = flat[:, lin].T * ok[:, None]
        wts[c] = w * ok
        idxs.append((lin, ok, d))
    data = np.einsum("kn,knc->nc", wts, vals)

    def backprop(g):
        if image.requires_grad or image._parents:
            gi = np.zeros_like(flat)
            npix = flat.shape[1]
            for c in range(4):
                lin, ok, _ = idxs[c]
                contrib = g * wts[c][:, None]
                li = lin[ok]
                co = contrib[ok]
                for ch in range(C):
                    gi[ch] += np.bincount(li, weights=co[:, ch],
                                          minlength=npix).astype(np.float32)
            _accum(image, gi.reshape(img.shape))
        if points.requires_grad or points._parents:
            gp = np.zeros_like(p)
            gdot = np.einsum("nc,knc->kn", g, vals)
            for c in range(4):
                _, ok, d = idxs[c]
                for ax in range(2):  # ax 0 = row (y), 1 = col (x)
                    other = 1 - ax
                    dw = (f[:, other] if d[other] else (1.0 - f[:, other])).copy()
                    dw *= 1.0 if d[ax] else -1.0
                    # points are (x, y): row derivative goes to index 1
                    gp[:, 1 - ax] += gdot[c] * dw * ok
            _accum(points, gp)

    return _make(data, (image, points), backprop)
