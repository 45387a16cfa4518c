"""Full avatar model: deformation + correspondence + radiance, wired for
both training (gradient graph) and chunked inference rendering."""

from __future__ import annotations

import numpy as np

from . import correspondence as C
from . import deformation as D
from . import geometry as G
from . import radiance as R
from .numcore import Tensor, no_grad
from .numcore import tensor as T
from .numcore.checkpoint import load_checkpoint, save_checkpoint

BACKGROUND = np.array([1.0, 1.0, 1.0], dtype=np.float32)


class AvatarModel:
    """Everything learnable plus the keyframe bank and scene constants."""

    def __init__(self, skeleton, bounds, capsules=None, num_bones=None,
                 seed=0, width=64, volume_resolution=32, num_samples=64,
                 nonrigid_warmup=5000, theta=D.CONSISTENCY_THRESHOLD,
                 background=BACKGROUND, no_feat=False, blend_normalize=True):
        num_bones = num_bones or skeleton.num_joints
        self.skeleton = skeleton
        self.bounds = (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        self.num_samples = num_samples
        self.background = np.asarray(background, np.float32)
        self.no_feat = no_feat
        self.blend_normalize = blend_normalize
        self.volume = D.MotionWeightVolume(
            num_bones, self.bounds, resolution=volume_resolution,
            seed=seed, capsules=capsules)
        pose_dim = 3 * (num_bones - 1)
        self.nonrigid = D.NonRigidField(pose_dim, seed=seed + 1,
                                        warmup_iters=nonrigid_warmup)
        self.field = D.DeformationField(skeleton, self.volume, self.nonrigid,
                                        theta=theta)
        self.extractor = C.FeatureExtractor(seed=seed + 2)
        self.blend_mlp = C.make_blend_mlp(seed=seed + 3)
        self.renderer = R.RenderingNetwork(bounds=self.bounds, width=width,
                                           seed=seed + 4)
        self.bank = None
        self.iteration = 0

    # ------------------------------------------------------------------
    def parameter_groups(self):
        """Disjoint, exhaustive named groups for the per-group optimizer."""
        deform = self.field.parameters()
        rest = (self.extractor.parameters() + self.blend_mlp.parameters()
                + self.renderer.parameters())
        return {"deformation": deform, "rest": rest}

    def named_parameters(self):
        out = []
        for group in self.parameter_groups().values():
            out.extend(group)
        return out

    def set_bank(self, bank):
        self.bank = bank

    def refresh_features(self, with_grad=True):
        """Recompute keyframe feature maps with the current extractor."""
        if self.bank is None:
            raise ValueError("no keyframe bank set")
        for kf in self.bank.pair:
            if with_grad:
                kf.features = self.extractor(kf.image, kf.mask)
            else:
                with no_grad():
                    kf.features = self.extractor(kf.image, kf.mask)

    # ------------------------------------------------------------------
    def _cull(self, grid_data, x_o, pose):
        """Graph-free emptiness test: True where the skeletal backward
        denominator would vanish (all bone warps land outside the volume)."""
        bts = G.bone_transforms(self.skeleton, pose)
        denom = np.zeros(x_o.shape[0], np.float32)
        for i, bt in enumerate(bts):
            y = x_o @ bt.R.T + bt.t
            denom += self.volume.sample_np(grid_data[i:i + 1], y)[:, 0]
        return denom >= 1e-9

    def render_rays(self, batch, pose, grid=None, iteration=None,
                    collect_consistency=False):
        """Render a RaySampleBatch at `pose`.

        Returns dict with C (R,3) Tensor, A (R,1) Tensor, plus bookkeeping
        used by the trainer (in-box observation samples for the
        consistency loss).
        """
        if iteration is None:
            iteration = self.iteration
        if grid is None:
            grid = self.volume.generate()
        Rn, Dn = batch.depths.shape
        pts = (batch.origins[:, None, :]
               + batch.depths[:, :, None] * batch.directions[:, None, :])
        pts = pts.reshape(-1, 3)
        live = np.repeat(batch.hit, Dn) & self._cull(grid.data, pts, pose)
        idx = np.where(live)[0]
        out = {"n_live": idx.size, "live_points": pts[idx]}
        if idx.size == 0:
            C_flat = Tensor(np.zeros((Rn, 3), np.float32))
            A = Tensor(np.zeros((Rn, 1), np.float32))
        else:
            x_o = Tensor(pts[idx])
            x_c, _, empty = self.field.deform_backward(grid, x_o, pose,
                                                       iteration)
            if self.no_feat or self.bank is None:
                F = None
            else:
                kf_i, kf_j = self.bank.pair
                f_i, c_i, _ = C.search_correspondence(self.field, grid, kf_i,
                                                      x_c, iteration)
                f_j, c_j, _ = C.search_correspondence(self.field, grid, kf_j,
                                                      x_c, iteration)
                F, _ = C.blend_features(self.blend_mlp, f_i, c_i, f_j, c_j,
                                        normalize=self.blend_normalize)
            rgb, sigma = self.renderer.query(x_c, F, no_feat=self.no_feat)
            # empty-flagged samples contribute zero density
            gate = Tensor((~empty)[:, None].astype(np.float32))
            sigma = T.mul(sigma, gate)
            n_total = Rn * Dn
            sig_full = T.reshape(T.scatter_rows(sigma, idx, n_total), (Rn, Dn))
            rgb_full = T.reshape(T.scatter_rows(rgb, idx, n_total), (Rn, Dn, 3))
            C_flat, A = R.composite(rgb_full, sig_full, batch.deltas)
            if collect_consistency:
                out["x_c"] = x_c
                out["empty"] = empty
        bg = Tensor(self.background[None, :])
        one_minus_A = T.add(1.0, T.mul(A, -1.0))
        out["C"] = T.add(C_flat, T.mul(one_minus_A, bg))
        out["A"] = A
        return out

    # ------------------------------------------------------------------
    def render_image(self, cam, pose, chunk=2048, num_samples=None,
                     background=None):
        """Chunked full-frame inference render; returns (H, W, 3) float32."""
        num_samples = num_samples or self.num_samples
        bg = self.background if background is None else np.asarray(background)
        H, W = cam.height, cam.width
        xs, ys = np.meshgrid(np.arange(W), np.arange(H))
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        bounds = R.skeleton_bounding_box(self.skeleton, pose)
        img = np.zeros((H * W, 3), np.float32)
        with no_grad():
            grid = self.volume.generate()
            if self.bank is not None and (self.bank.pair[0].features is None):
                self.refresh_features(with_grad=False)
            for start in range(0, pixels.shape[0], chunk):
                pix = pixels[start:start + chunk]
                batch = R.sample_rays(cam, pix, bounds, num_samples)
                res = self.render_rays(batch, pose, grid=grid,
                                       iteration=self.iteration)
                img[start:start + chunk] = np.clip(res["C"].data, 0.0, 1.0)
        return img.reshape(H, W, 3)

    # ------------------------------------------------------------------
    def config_extra(self):
        return {
            "iteration": self.iteration,
            "num_bones": self.volume.num_bones,
            "bounds_lo": list(map(float, self.bounds[0])),
            "bounds_hi": list(map(float, self.bounds[1])),
            "keyframes": ([kf.index for kf in self.bank.pair]
                          if self.bank else None),
        }

    def save(self, path, optimizer=None):
        arrays = list(self.named_parameters())
        if optimizer is not None:
            arrays += optimizer.state_arrays()
            extra_opt = optimizer.step_count
        else:
            extra_opt = 0
        extra = self.config_extra()
        extra["adam_steps"] = extra_opt
        save_checkpoint(path, arrays,
                        modules=["deformation", "correspondence", "radiance"],
                        extra=extra)

    def load(self, path, optimizer=None):
        header, tensors = load_checkpoint(path)
        for name, p in self.named_parameters():
            if name not in tensors:
                raise KeyError(f"checkpoint missing parameter '{name}'")
            if tuple(p.data.shape) != tensors[name].shape:
                raise ValueError(
                    f"checkpoint parameter '{name}' shape "
                    f"{tensors[name].shape} != model {p.data.shape}"
                )
            p.data[...] = tensors[name]
        self.iteration = int(header["extra"].get("iteration", 0))
        if optimizer is not None:
            for name, arr in optimizer.state_arrays():
                if name in tensors:
                    arr[...] = tensors[name]
            optimizer.step_count = int(header["extra"].get("adam_steps", 0))
        return header


def build_model(dataset, config=None, **overrides):
    """Construct an AvatarModel sized for a dataset."""
    cfg = dict(config or {})
    cfg.update(overrides)
    if dataset.avatar is not None:
        bounds = dataset.avatar.canonical_bounds()
        capsules = [(c.a, c.b, c.radius) for c in dataset.avatar.capsules]
    else:
        caps = D.skeleton_stub_capsules(dataset.skeleton)
        pts = np.concatenate([[a, b] for a, b, _ in caps])
        lo = pts.min(axis=0) - 0.15
        hi = pts.max(axis=0) + 0.15
        pad = 0.1 * (hi - lo)
        bounds = (lo - pad, hi + pad)
        capsules = caps
    keys = ("seed", "width", "volume_resolution", "num_samples",
            "nonrigid_warmup", "theta", "no_feat", "blend_normalize")
    kwargs = {k: cfg[k] for k in keys if k in cfg}
    return AvatarModel(dataset.skeleton, bounds, capsules=capsules, **kwargs)
