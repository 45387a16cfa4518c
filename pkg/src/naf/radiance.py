"""Canonical-space rendering network and the volume-rendering integrator.

The network is two 8-layer MLP stacks: the first maps the positional
encoding of a canonical point to a 36-vector whose first component (after
softplus) is the density; the remaining 35 components concatenated with
the blended keyframe feature feed the second stack, which emits RGB
through a sigmoid.  No view-direction input anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from .numcore import Mlp, Tensor
from .numcore import tensor as T

STAGE1_OUT = 36


class RenderingNetwork:
    def __init__(self, feat_dim=19, width=64, num_freqs=10, bounds=None,
                 seed=0):
        self.num_freqs = num_freqs
        self.feat_dim = feat_dim
        enc_dim = 6 * num_freqs
        rng = np.random.default_rng(seed)
        self.stage1 = Mlp([enc_dim] + [width] * 7 + [STAGE1_OUT],
                          rng=rng, name="radiance_s1")
        self.stage2 = Mlp([STAGE1_OUT - 1 + feat_dim] + [width] * 7 + [3],
                          rng=rng, name="radiance_s2")
        if bounds is None:
            self.center = np.zeros(3, np.float32)
            self.half = np.ones(3, np.float32)
        else:
            lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
            self.center = ((lo + hi) / 2).astype(np.float32)
            self.half = ((hi - lo) / 2).astype(np.float32)

    def parameters(self):
        return self.stage1.parameters() + self.stage2.parameters()

    def query(self, x_c, F, no_feat=False):
        """(color (N,3), density (N,1)) at canonical points with blended
        feature F; `no_feat` substitutes zeros for F (ablation)."""
        x_n = T.mul(T.add(x_c, Tensor(-self.center)),
                    Tensor(1.0 / self.half))
        enc = G.positional_encoding_t(x_n, self.num_freqs)
        s1 = self.stage1(enc)
        sigma = T.softplus(s1[:, 0:1])
        h = s1[:, 1:STAGE1_OUT]
        n = x_c.shape[0]
        if no_feat or F is None:
            F = Tensor(np.zeros((n, self.feat_dim), np.float32))
        if F.shape[-1] != self.feat_dim:
            raise ValueError(
                f"blended feature dim {F.shape[-1]} != expected {self.feat_dim}"
            )
        rgb = T.sigmoid(self.stage2(T.concat([h, F], axis=-1)))
        return rgb, sigma


# ----------------------------------------------------------------------
@dataclass
class RaySampleBatch:
    origins: np.ndarray     # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    depths: np.ndarray      # (R, D) strictly increasing
    deltas: np.ndarray      # (R, D) interval widths
    hit: np.ndarray         # (R,) rays that intersect the subject box


def skeleton_bounding_box(skeleton, pose, pad=0.3):
    """Padded axis-aligned box around the posed joints."""
    joints = G.posed_joint_positions(skeleton, pose)
    return joints.min(axis=0) - pad, joints.max(axis=0) + pad


def ray_box_intersect(origins, dirs, lo, hi):
    """Slab test; returns (t_near, t_far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    tmin = np.maximum(tmin, 1e-4)
    hit = tmax > tmin
    return tmin, tmax, hit


def sample_rays(cam, pixels, bounds, num_samples, stratified=False, rng=None):
    """Depth samples for the given pixel coordinates (N, 2).

    near/far come from intersecting each ray with the padded posed-skeleton
    box `bounds`; rays that miss are flagged and render pure background.
    """
    if num_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    pixels = np.asarray(pixels, np.float64)
    ones = np.ones((pixels.shape[0], 1))
    dirs_cam = np.concatenate([pixels, ones], axis=1) @ np.linalg.inv(cam.K_mat).T
    dirs = dirs_cam @ cam.R
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = cam.position
    lo, hi = bounds
    tn, tf, hit = ray_box_intersect(origin[None], dirs, lo, hi)
    tn = np.where(hit, tn, 1.0)
    tf = np.where(hit, tf, 2.0)
    frac = np.linspace(0.0, 1.0, num_samples)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        step = 1.0 / (num_samples - 1)
        jitter = rng.uniform(-0.5, 0.5, (pixels.shape[0], num_samples)) * step
        jitter[:, 0] = np.abs(jitter[:, 0]) * 0.5
        jitter[:, -1] = -np.abs(jitter[:, -1]) * 0.5
        frac = np.clip(frac[None] + jitter, 0.0, 1.0)
        frac = np.sort(frac, axis=1)
    else:
        frac = np.broadcast_to(frac, (pixels.shape[0], num_samples)).copy()
    depths = tn[:, None] + (tf - tn)[:, None] * frac
    deltas = np.diff(depths, axis=1)
    deltas = np.concatenate([deltas, deltas[:, -1:]], axis=1)
    origins = np.broadcast_to(origin, dirs.shape).copy()
    return RaySampleBatch(origins.astype(np.float32), dirs.astype(np.float32),
                          depths.astype(np.float32), deltas.astype(np.float32),
                          hit)


_LTRI_CACHE = {}


def _exclusive_lower_triangular(D):
    if D not in _LTRI_CACHE:
        _LTRI_CACHE[D] = Tensor(np.triu(np.ones((D, D), np.float32), k=1))
    return _LTRI_CACHE[D]


def composite(colors, densities, deltas):
    """Alpha-composite per-ray samples.

    colors: (R, D, 3) Tensor-compatible, densities (R, D), deltas (R, D)
    constant.  alpha_i = 1 - exp(-sigma_i dt_i); transmittance is the
    exclusive product of (1 - alpha_j) = exp(-sum_{j<i} sigma_j dt_j).
    Returns (C (R, 3), A (R, 1)).
    """
    if not isinstance(colors, Tensor):
        colors = Tensor(colors)
    if not isinstance(densities, Tensor):
        densities = Tensor(densities)
    R, D = densities.shape
    if colors.shape[:2] != (R, D) or deltas.shape != (R, D):
        raise ValueError(
            f"composite: mismatched shapes colors {colors.shape}, "
            f"densities {densities.shape}, deltas {deltas.shape}"
        )
    tau = T.mul(densities, Tensor(np.asarray(deltas, np.float32)))  # (R, D)
    accum = T.matmul(tau, _exclusive_lower_triangular(D))  # sum_{j<i}
    trans = T.exp(T.mul(accum, -1.0))
    alpha = T.add(1.0, T.mul(T.exp(T.mul(tau, -1.0)), -1.0))
    weights = T.mul(trans, alpha)  # (R, D)
    C = T.tsum(T.mul(colors, T.reshape(weights, (R, D, 1))), axis=1)
    A = T.tsum(weights, axis=1, keepdims=True)
    return C, A
