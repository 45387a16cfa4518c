"""Convolutions built from gather + matmul so they ride the autodiff core.

Index maps are cached per shape; zero padding is realized by clamping the
gather indices and masking the out-of-range taps.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

_cache = {}


def _patch_indices_2d(C, H, W, k=3):
    key = ("2d", C, H, W, k)
    if key not in _cache:
        r = k // 2
        ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        taps = []
        valid = []
        for c in range(C):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = ys + dy
                    xx = xs + dx
                    ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
                    idx = c * H * W + np.clip(yy, 0, H - 1) * W + np.clip(xx, 0, W - 1)
                    taps.append(idx.ravel())
                    valid.append(ok.ravel())
        idx = np.stack(taps, axis=1)       # (H*W, C*k*k)
        mask = np.stack(valid, axis=1).astype(np.float32)
        _cache[key] = (idx, mask)
    return _cache[key]


def conv2d(x, weight, bias, k=3):
    """x: (C, H, W) Tensor; weight: (C*k*k, C_out); bias: (C_out,).

    Returns (C_out, H, W), same spatial size, zero padding.
    """
    C, H, W = x.shape
    idx, mask = _patch_indices_2d(C, H, W, k)
    patches = T.mul(T.reshape(T.take(x, idx), idx.shape), Tensor(mask))
    out = T.add(T.matmul(patches, weight), bias)  # (H*W, C_out)
    return T.reshape(T.transpose_2d(out), (weight.shape[1], H, W))


def _patch_indices_3d(C, X, Y, Z, k=3):
    key = ("3d", C, X, Y, Z, k)
    if key not in _cache:
        r = k // 2
        gx, gy, gz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z),
                                 indexing="ij")
        taps, valid = [], []
        for c in range(C):
            for dx in range(-r, r + 1):
                for dy in range(-r, r + 1):
                    for dz in range(-r, r + 1):
                        xx, yy, zz = gx + dx, gy + dy, gz + dz
                        ok = ((xx >= 0) & (xx < X) & (yy >= 0) & (yy < Y)
                              & (zz >= 0) & (zz < Z))
                        idx = (c * X * Y * Z
                               + np.clip(xx, 0, X - 1) * Y * Z
                               + np.clip(yy, 0, Y - 1) * Z
                               + np.clip(zz, 0, Z - 1))
                        taps.append(idx.ravel())
                        valid.append(ok.ravel())
        idx = np.stack(taps, axis=1)
        mask = np.stack(valid, axis=1).astype(np.float32)
        _cache[key] = (idx, mask)
    return _cache[key]


def conv3d(x, weight, bias, k=3):
    """x: (C, X, Y, Z) Tensor; weight: (C*k*k*k, C_out); bias: (C_out,)."""
    C, X, Y, Z = x.shape
    idx, mask = _patch_indices_3d(C, X, Y, Z, k)
    patches = T.mul(T.reshape(T.take(x, idx), idx.shape), Tensor(mask))
    out = T.add(T.matmul(patches, weight), bias)
    return T.reshape(T.transpose_2d(out), (weight.shape[1], X, Y, Z))


def downsample2x_2d(x):
    """(C, H, W) -> (C, H/2, W/2) by picking even-index pixels."""
    return x[:, ::2, ::2]


def upsample2x_nearest_2d(x):
    C, H, W = x.shape
    key = ("up2d", C, H, W)
    if key not in _cache:
        ys = np.repeat(np.arange(H), 2)
        xs = np.repeat(np.arange(W), 2)
        cgrid = np.arange(C)[:, None, None]
        idx = cgrid * H * W + ys[None, :, None] * W + xs[None, None, :]
        _cache[key] = idx
    return T.reshape(T.take(x, _cache[key]), (C, 2 * H, 2 * W))


def upsample2x_trilinear_3d(x):
    """(C, N, N, N) -> (C, 2N, 2N, 2N) by trilinear resampling.

    Target voxel centers are mapped into source voxel coordinates so that
    the corners of the grids align.
    """
    C, X, Y, Z = x.shape
    coords = [np.arange(2 * n) * (n - 1) / (2 * n - 1) for n in (X, Y, Z)]
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    pts = Tensor(np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(np.float32))
    out = T.grid_sample_3d(x, pts)  # (8N^3, C)
    return T.reshape(T.transpose_2d(out), (C, 2 * X, 2 * Y, 2 * Z))


def identity_conv_weight(c_in, c_out, k, rng=None, noise=0.0, spatial_dims=3):
    """Kernel that passes channel i through to output i (center tap),
    optionally with small noise elsewhere."""
    taps = k ** spatial_dims
    w = np.zeros((c_in * taps, c_out), dtype=np.float32)
    center = taps // 2
    for c in range(min(c_in, c_out)):
        w[c * taps + center, c] = 1.0
    if noise > 0 and rng is not None:
        w += rng.normal(0.0, noise, w.shape).astype(np.float32)
    return w
