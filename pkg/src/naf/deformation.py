"""Bidirectional deformation between observation and canonical space.

One canonical motion-weight volume drives both directions: the backward
map warps an observation point with every bone's observation->canonical
rigid transform and blends by weights sampled at the warped positions,
while the forward map samples weights directly at the canonical point and
applies the inverse rigid transforms.  Two independent MLPs add residual
non-rigid offsets on top.  The cycle error ||x - D_f(D_b(x))|| feeds a
thresholded consistency loss.
"""

from __future__ import annotations

import numpy as np

from . import geometry as G
from .numcore import Mlp, Tensor
from .numcore import tensor as T
from .numcore import convs

CONSISTENCY_THRESHOLD = 0.05  # scene units


def capsule_prior_logits(points, capsules, tau=0.2):
    """Signed-distance style skinning prior: (r - d(x, segment)) / tau."""
    n = points.shape[0]
    out = np.zeros((len(capsules), n), dtype=np.float32)
    for i, (a, b, r) in enumerate(capsules):
        ba = b - a
        denom = max(float(ba @ ba), 1e-12)
        t = np.clip((points - a) @ ba / denom, 0.0, 1.0)
        d = np.linalg.norm(points - (a + t[:, None] * ba), axis=1)
        out[i] = (r - d) / tau
    return np.clip(out, -8.0, 8.0)


def skeleton_stub_capsules(skeleton, radius=0.09):
    """Fallback per-bone segments when no explicit body geometry is known."""
    rest = skeleton.rest_joint_positions()
    children = {i: [] for i in range(skeleton.num_joints)}
    for i, p in enumerate(skeleton.parents):
        if p >= 0:
            children[p].append(i)
    caps = []
    for i in range(skeleton.num_joints):
        if children[i]:
            end = rest[list(children[i])].mean(axis=0)
        else:
            d = rest[i] - rest[skeleton.parents[i]] if skeleton.parents[i] >= 0 \
                else np.array([0.0, 0.2, 0.0])
            nd = np.linalg.norm(d)
            end = rest[i] + (d / nd * 0.2 if nd > 1e-9 else np.array([0, 0.2, 0]))
        caps.append((rest[i], end, radius))
    return caps


class MotionWeightVolume:
    """K-channel canonical skinning-weight grid decoded from a constant latent.

    The decoder is a small CNN: a linear map takes the fixed latent to a
    coarse learnable base grid, then trilinear-upsample + 3x3x3 conv stages
    reach the target resolution; softplus keeps all weights non-negative.
    The base grid and the pass-through conv taps are initialized from a
    capsule-distance prior so optimization starts from a plausible skinning.
    """

    def __init__(self, num_bones, bounds, resolution=32, base_res=4,
                 channels=16, latent_dim=64, seed=0, capsules=None):
        stages = int(round(np.log2(resolution / base_res)))
        if base_res * 2 ** stages != resolution:
            raise ValueError("resolution must be base_res * 2^stages")
        self.num_bones = num_bones
        self.bounds = (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        self.resolution = resolution
        self.base_res = base_res
        self.channels = max(channels, num_bones)
        self.stages = stages
        rng = np.random.default_rng(seed)
        self.latent = Tensor(rng.normal(size=(1, latent_dim)).astype(np.float32))

        C = self.channels
        b3 = base_res ** 3
        base_bias = rng.normal(0.0, 0.01, (C * b3,)).astype(np.float32)
        if capsules is not None:
            # prior logits on the base-grid voxel centers, first K channels
            axes = [np.linspace(self.bounds[0][d], self.bounds[1][d], base_res)
                    for d in range(3)]
            gx, gy, gz = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
            prior = capsule_prior_logits(pts, capsules)
            bb = base_bias.reshape(C, b3)
            bb[:num_bones] = prior
            base_bias = bb.reshape(-1)
        self.base_w = Tensor(np.zeros((latent_dim, C * b3), np.float32),
                             requires_grad=True)
        self.base_b = Tensor(base_bias, requires_grad=True)
        # convolutions run only up to conv_res; the remaining upsampling
        # stages are pure trilinear (keeps the per-step decode cheap, the
        # interpolated field is smooth anyway)
        self.conv_res = min(resolution, 16)
        self.stage_w = []
        self.stage_b = []
        res = base_res
        for _ in range(stages):
            res *= 2
            if res > self.conv_res:
                break
            w = convs.identity_conv_weight(C, C, 3, rng, noise=0.01)
            self.stage_w.append(Tensor(w, requires_grad=True))
            self.stage_b.append(Tensor(np.zeros(C, np.float32), requires_grad=True))
        wf = convs.identity_conv_weight(C, num_bones, 3, rng, noise=0.005)
        self.final_w = Tensor(wf, requires_grad=True)
        self.final_b = Tensor(np.zeros(num_bones, np.float32), requires_grad=True)

    def parameters(self):
        out = [("weight_vol.base_w", self.base_w), ("weight_vol.base_b", self.base_b)]
        for i, (w, b) in enumerate(zip(self.stage_w, self.stage_b)):
            out += [(f"weight_vol.stage{i}_w", w), (f"weight_vol.stage{i}_b", b)]
        out += [("weight_vol.final_w", self.final_w), ("weight_vol.final_b", self.final_b)]
        return out

    def generate(self):
        """Decode the K-channel non-negative weight grid (differentiable)."""
        C, br = self.channels, self.base_res
        x = T.reshape(T.add(T.matmul(self.latent, self.base_w), self.base_b),
                      (C, br, br, br))
        res = br
        # stages are linear convs (identity-initialized) so the capsule
        # prior in the base grid survives to the output at initialization
        for w, b in zip(self.stage_w, self.stage_b):
            x = convs.upsample2x_trilinear_3d(x)
            res *= 2
            x = convs.conv3d(x, w, b)
        logits = convs.conv3d(x, self.final_w, self.final_b)
        while res < self.resolution:
            logits = convs.upsample2x_trilinear_3d(logits)
            res *= 2
        return T.softplus(logits)

    # ------------------------------------------------------------------
    def to_voxel(self, pts):
        """World (N,3) Tensor -> continuous voxel coordinates."""
        lo, hi = self.bounds
        scale = (self.resolution - 1) / (hi - lo)
        if isinstance(pts, Tensor):
            return T.mul(T.add(pts, Tensor(-lo.astype(np.float32))),
                         Tensor(scale.astype(np.float32)))
        return (pts - lo) * scale

    def sample(self, grid, pts):
        """Trilinear weights at world points; zero outside bounds. (N, K)."""
        if not isinstance(pts, Tensor):
            pts = Tensor(np.asarray(pts, np.float32))
        return T.grid_sample_3d(grid, self.to_voxel(pts))

    def sample_np(self, grid_data, pts):
        """Graph-free twin of sample() for culling passes."""
        vox = self.to_voxel(np.asarray(pts, np.float64))
        K = grid_data.shape[0]
        n = vox.shape[0]
        x0 = np.floor(vox).astype(np.int64)
        f = vox - x0
        res = self.resolution
        out = np.zeros((n, K), np.float32)
        flat = grid_data.reshape(K, -1)
        for c in range(8):
            d = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
            corner = x0 + d
            ok = np.all((corner >= 0) & (corner < res), axis=1)
            w = np.prod(np.where(d, f, 1.0 - f), axis=1) * ok
            ci = np.where(ok[:, None], corner, 0)
            lin = (ci[:, 0] * res + ci[:, 1]) * res + ci[:, 2]
            out += (w[:, None] * flat[:, lin].T).astype(np.float32)
        return out


class NonRigidField:
    """Two architecture-identical, independently parameterized offset MLPs:
    one for the backward direction, one for the forward direction."""

    def __init__(self, pose_dim, num_freqs=4, width=64, depth=4, seed=0,
                 warmup_iters=5000):
        in_dim = 6 * num_freqs + pose_dim
        widths = [in_dim] + [width] * (depth - 1) + [3]
        self.num_freqs = num_freqs
        self.warmup_iters = warmup_iters
        self.backward_mlp = Mlp(widths, rng=np.random.default_rng(seed),
                                zero_init_last=True, name="nonrigid_bwd")
        self.forward_mlp = Mlp(widths, rng=np.random.default_rng(seed + 1),
                               zero_init_last=True, name="nonrigid_fwd")

    def active(self, iteration):
        return iteration is None or iteration >= self.warmup_iters

    def offset(self, mlp, pts, pose_vec):
        n = pts.shape[0]
        enc = G.positional_encoding_t(pts, self.num_freqs)
        cond = Tensor(np.broadcast_to(pose_vec, (n, pose_vec.size)).copy())
        return mlp(T.concat([enc, cond], axis=-1))

    def parameters(self):
        return self.backward_mlp.parameters() + self.forward_mlp.parameters()


class DeformationField:
    """Shared bidirectional deformation with consistency diagnostics."""

    def __init__(self, skeleton, volume, nonrigid,
                 theta=CONSISTENCY_THRESHOLD):
        if theta <= 0:
            raise ValueError("consistency threshold must be positive")
        self.skeleton = skeleton
        self.volume = volume
        self.nonrigid = nonrigid
        self.theta = theta

    def parameters(self):
        return self.volume.parameters() + self.nonrigid.parameters()

    # ------------------------------------------------------------------
    def backward_skeletal(self, grid, x_o, pose):
        """Blend-skinning backward map. Returns (x_skel, weights, empty)."""
        if not isinstance(x_o, Tensor):
            x_o = Tensor(np.asarray(x_o, np.float32))
        bts = G.bone_transforms(self.skeleton, pose)
        warped = []
        raw = []
        for i, bt in enumerate(bts):
            y = T.add(T.matmul(x_o, Tensor(bt.R.T.astype(np.float32))),
                      Tensor(bt.t.astype(np.float32)))
            warped.append(y)
            raw.append(self.volume.sample(grid[i:i + 1], y))  # (N, 1)
        w_raw = T.concat(raw, axis=-1)  # (N, K)
        denom = T.tsum(w_raw, axis=-1, keepdims=True)
        empty = denom.data[:, 0] < 1e-9
        safe = T.add(denom, Tensor(empty[:, None].astype(np.float32)))
        weights = T.div(w_raw, safe)
        x_skel = None
        for i, y in enumerate(warped):
            term = T.mul(y, weights[:, i:i + 1])
            x_skel = term if x_skel is None else T.add(x_skel, term)
        return x_skel, weights, empty

    def forward_skeletal(self, grid, x_c, pose):
        """Forward blend skinning: weights queried directly at x_c and the
        inverse rigid maps applied. Returns (x_o, weights, empty)."""
        if not isinstance(x_c, Tensor):
            x_c = Tensor(np.asarray(x_c, np.float32))
        bts = G.bone_transforms(self.skeleton, pose)
        w_raw = self.volume.sample(grid, x_c)  # (N, K)
        denom = T.tsum(w_raw, axis=-1, keepdims=True)
        empty = denom.data[:, 0] < 1e-9
        safe = T.add(denom, Tensor(empty[:, None].astype(np.float32)))
        weights = T.div(w_raw, safe)
        x_o = None
        for i, bt in enumerate(bts):
            # inverse of y = R x + t is x = R^T (y - t)
            y = T.matmul(T.add(x_c, Tensor(-bt.t.astype(np.float32))),
                         Tensor(bt.R.astype(np.float32)))
            term = T.mul(y, weights[:, i:i + 1])
            x_o = term if x_o is None else T.add(x_o, term)
        return x_o, weights, empty

    # ------------------------------------------------------------------
    def deform_backward(self, grid, x_o, pose, iteration=None):
        x_skel, weights, empty = self.backward_skeletal(grid, x_o, pose)
        if self.nonrigid.active(iteration):
            off = self.nonrigid.offset(self.nonrigid.backward_mlp, x_skel,
                                       pose.vector())
            x_skel = T.add(x_skel, off)
        return x_skel, weights, empty

    def deform_forward(self, grid, x_c, pose, iteration=None):
        x_o, weights, empty = self.forward_skeletal(grid, x_c, pose)
        if self.nonrigid.active(iteration):
            off = self.nonrigid.offset(self.nonrigid.forward_mlp, x_o,
                                       pose.vector())
            x_o = T.add(x_o, off)
        return x_o, weights, empty

    # ------------------------------------------------------------------
    def cycle_distance(self, grid, x_o, pose, iteration=None):
        """d(x) = ||x_o - D_f(D_b(x_o))||_2 as a Tensor, plus empty mask."""
        if not isinstance(x_o, Tensor):
            x_o = Tensor(np.asarray(x_o, np.float32))
        x_c, _, empty_b = self.deform_backward(grid, x_o, pose, iteration)
        x_back, _, empty_f = self.deform_forward(grid, x_c, pose, iteration)
        diff = T.add(x_o, T.mul(x_back, -1.0))
        d = T.sqrt(T.add(T.tsum(T.square(diff), axis=-1), 1e-12))
        return d, empty_b | empty_f

    def consistency_loss(self, grid, points, pose, iteration=None):
        """Thresholded cycle error, mean over non-empty points.

        Returns (loss Tensor, d values ndarray, violator mask ndarray).
        A point contributes d when d >= theta, else 0; empty points are
        excluded from the mean.
        """
        d, empty = self.cycle_distance(grid, points, pose, iteration)
        dvals = d.data.copy()
        violators = (dvals >= self.theta) & ~empty
        n_valid = int((~empty).sum())
        if n_valid == 0:
            return Tensor(np.float32(0.0)), dvals, violators
        gate = violators.astype(np.float32) / n_valid
        loss = T.tsum(T.mul(d, Tensor(gate)))
        return loss, dvals, violators


def vertex_consistency_diagnostic(field, grid, vertices, pose, cam,
                                  background=None):
    """Scatter observation-space vertices onto an image; cycle violators
    (d >= theta) are drawn red, consistent points gray.

    Returns (image (H, W, 3) float32, violation fraction over the valid
    vertices).  Behind-camera and empty vertices are skipped.
    """
    from .numcore.tensor import no_grad

    vertices = np.asarray(vertices, np.float32)
    with no_grad():
        d, empty = field.cycle_distance(grid, vertices, pose)
    dvals = np.asarray(d.data)
    uv, in_front = G.project_points(cam, vertices.astype(np.float64))
    valid = in_front & ~empty
    if background is None:
        img = np.ones((cam.height, cam.width, 3), np.float32)
    else:
        img = np.asarray(background, np.float32).copy()
    n_valid = int(valid.sum())
    viol = (dvals >= field.theta) & valid
    frac = float(viol.sum()) / max(n_valid, 1)
    # draw consistent points first so red stays visible on overlap
    for mask, color in ((valid & ~viol, (0.55, 0.55, 0.55)),
                        (viol, (0.9, 0.1, 0.1))):
        pts = np.round(uv[mask]).astype(int)
        keep = ((pts[:, 0] >= 0) & (pts[:, 0] < cam.width)
                & (pts[:, 1] >= 0) & (pts[:, 1] < cam.height))
        pts = pts[keep]
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                xs = np.clip(pts[:, 0] + dx, 0, cam.width - 1)
                ys = np.clip(pts[:, 1] + dy, 0, cam.height - 1)
                img[ys, xs] = color
    return img, frac
