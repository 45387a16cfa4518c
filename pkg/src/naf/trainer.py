"""Loss assembly, per-group learning rates, training loop, checkpoints."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import correspondence as C
from . import geometry as G
from . import radiance as R
from .model import AvatarModel, build_model
from .numcore import Adam, Tensor
from .numcore import tensor as T


@dataclass
class TrainConfig:
    iterations: int = 20000
    ray_batch: int = 1024
    num_samples: int = 64          # per-ray depth samples
    lr_deform: float = 5e-6        # shared bidirectional deformation group
    lr_rest: float = 5e-5          # everything else
    lambda_lpips: float = 0.0      # perceptual hook weight; 0 = disabled
    theta: float = 0.05            # consistency threshold (scene units)
    no_consis: bool = False        # ablation: drop the consistency loss
    no_feat: bool = False          # ablation: zero the blended feature
    nonrigid_warmup: int = 5000
    seed: int = 0
    sample_rate: int = 1           # training-frame subsampling stride
    mask_ray_fraction: float = 0.8  # rays drawn from the dilated subject mask
    mask_dilate: int = 6           # dilation radius in pixels
    stratified: bool = True
    width: int = 64                # MLP hidden width
    volume_resolution: int = 32
    max_consis_points: int = 2048  # cap on consistency samples per step
    log_every: int = 20
    checkpoint_every: int = 2000

    def validate(self):
        if self.lr_deform <= 0 or self.lr_rest <= 0:
            raise ValueError("learning rates must be positive")
        if self.ray_batch < 1:
            raise ValueError("ray batch size must be >= 1")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        return self


def parse_config_file(path):
    """Flat key=value config with '#' comments."""
    cfg = {}
    valid = {f.name: f.type for f in TrainConfig.__dataclass_fields__.values()}
    defaults = TrainConfig()
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in valid:
                raise ValueError(f"{path}:{ln}: unknown key '{key}'")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                cfg[key] = val.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                cfg[key] = int(val)
            else:
                cfg[key] = float(val)
    return cfg


# ----------------------------------------------------------------------
def compute_loss(rendered, target, consis_loss, config, lpips_fn=None):
    """Total = MSE + lambda * LPIPS + CONSIS; components reported separately.

    MSE is the squared color error summed over channels, averaged over the
    ray batch (mean, not the raw sum, so learning rates decouple from batch
    size).  The LPIPS hook returns a scalar Tensor when supplied.
    """
    diff = T.add(rendered, T.mul(Tensor(np.asarray(target, np.float32)), -1.0))
    mse = T.tmean(T.tsum(T.square(diff), axis=-1))
    total = mse
    components = {"mse": float(mse.data)}
    if lpips_fn is not None and config.lambda_lpips > 0:
        lp = lpips_fn(rendered, target)
        total = T.add(total, T.mul(lp, config.lambda_lpips))
        components["lpips"] = float(lp.data)
    else:
        components["lpips"] = 0.0
    if config.no_consis or consis_loss is None:
        components["consis"] = 0.0
    else:
        total = T.add(total, consis_loss)
        components["consis"] = float(consis_loss.data)
    components["total"] = float(total.data)
    if not np.isfinite(components["total"]):
        raise FloatingPointError(f"non-finite loss: {components}")
    return total, components


# ----------------------------------------------------------------------
class TrainState:
    def __init__(self, dataset, config, model=None, bank=None,
                 metrics_path=None, lpips_fn=None):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.frames = dataset.frames[::config.sample_rate]
        self.rng = np.random.default_rng(config.seed)
        self.lpips_fn = lpips_fn
        self.model = model or build_model(
            dataset, seed=config.seed, width=config.width,
            volume_resolution=config.volume_resolution,
            num_samples=config.num_samples,
            nonrigid_warmup=config.nonrigid_warmup, theta=config.theta,
            no_feat=config.no_feat)
        if bank is None:
            bank = C.select_keyframes(dataset)
        self.model.set_bank(bank)
        groups = self.model.parameter_groups()
        self.optimizer = Adam([
            {"name": "deformation", "params": groups["deformation"],
             "lr": config.lr_deform},
            {"name": "rest", "params": groups["rest"], "lr": config.lr_rest},
        ])
        self.metrics_path = metrics_path
        self._metrics_file = None
        self._mask_cache = {}
        self.history = []

    # ------------------------------------------------------------------
    def _pixel_pool(self, frame_idx):
        """(subject pixels, background pixels) for ray sampling."""
        if frame_idx not in self._mask_cache:
            mask = self.frames[frame_idx].mask
            dil = ndimage.binary_dilation(mask, iterations=self.config.mask_dilate)
            ys, xs = np.nonzero(dil)
            subject = np.stack([xs, ys], axis=1)
            ys_b, xs_b = np.nonzero(~dil)
            background = np.stack([xs_b, ys_b], axis=1)
            self._mask_cache[frame_idx] = (subject, background)
        return self._mask_cache[frame_idx]

    def sample_ray_pixels(self, frame_idx):
        cfg = self.config
        subject, background = self._pixel_pool(frame_idx)
        n_subj = int(round(cfg.ray_batch * cfg.mask_ray_fraction))
        n_subj = min(n_subj, len(subject))
        n_bg = cfg.ray_batch - n_subj
        pick_s = self.rng.integers(0, len(subject), n_subj)
        pix = [subject[pick_s]]
        if n_bg > 0 and len(background) > 0:
            pick_b = self.rng.integers(0, len(background), n_bg)
            pix.append(background[pick_b])
        return np.concatenate(pix, axis=0)

    # ------------------------------------------------------------------
    def train_step(self):
        cfg = self.config
        model = self.model
        it = model.iteration
        frame_idx = int(self.rng.integers(0, len(self.frames)))
        frame = self.frames[frame_idx]
        pixels = self.sample_ray_pixels(frame_idx)
        bounds = R.skeleton_bounding_box(model.skeleton, frame.pose)
        batch = R.sample_rays(frame.camera, pixels.astype(np.float64), bounds,
                              cfg.num_samples, stratified=cfg.stratified,
                              rng=self.rng)
        target = frame.image[pixels[:, 1], pixels[:, 0]]

        if not cfg.no_feat:
            model.refresh_features(with_grad=True)
        grid = model.volume.generate()
        out = model.render_rays(batch, frame.pose, grid=grid, iteration=it,
                                collect_consistency=not cfg.no_consis)

        consis_loss = None
        consis_frac = 0.0
        if not cfg.no_consis and out.get("x_c") is not None:
            x_c, empty = out["x_c"], out["empty"]
            x_o_np = out["live_points"]
            n = x_o_np.shape[0]
            if n > cfg.max_consis_points:
                sel = self.rng.choice(n, cfg.max_consis_points, replace=False)
                sel.sort()
                x_c = x_c[sel]
                x_o_np = x_o_np[sel]
                empty = empty[sel]
            x_back, _, empty_f = model.field.deform_forward(grid, x_c,
                                                            frame.pose, it)
            diff = T.add(Tensor(x_o_np), T.mul(x_back, -1.0))
            d = T.sqrt(T.add(T.tsum(T.square(diff), axis=-1), 1e-12))
            dead = empty | empty_f
            viol = (d.data >= cfg.theta) & ~dead
            n_valid = max(int((~dead).sum()), 1)
            gate = viol.astype(np.float32) / n_valid
            consis_loss = T.tsum(T.mul(d, Tensor(gate)))
            consis_frac = float(viol.sum()) / n_valid

        total, components = compute_loss(out["C"], target, consis_loss, cfg,
                                         self.lpips_fn)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        model.iteration += 1

        record = {"iter": model.iteration, **components,
                  "violation_frac": consis_frac, "frame": frame.index if
                  hasattr(frame, "index") else frame_idx,
                  "n_live": out["n_live"],
                  "lr_deform": cfg.lr_deform, "lr_rest": cfg.lr_rest}
        self.history.append(record)
        if self.metrics_path and (model.iteration % cfg.log_every == 0
                                  or model.iteration == 1):
            if self._metrics_file is None:
                self._metrics_file = open(self.metrics_path, "a")
            self._metrics_file.write(json.dumps(record) + "\n")
            self._metrics_file.flush()
        return record

    # ------------------------------------------------------------------
    def run(self, iterations=None, out_dir=None, quiet=False):
        n = iterations if iterations is not None else self.config.iterations
        t0 = time.time()
        for i in range(n):
            rec = self.train_step()
            if not quiet and (rec["iter"] % 200 == 0 or i == 0):
                dt = time.time() - t0
                print(f"iter {rec['iter']:6d}  mse {rec['mse']:.5f}  "
                      f"consis {rec['consis']:.5f}  viol {rec['violation_frac']:.3f}  "
                      f"[{dt:.0f}s]", flush=True)
            if out_dir and self.config.checkpoint_every and \
                    rec["iter"] % self.config.checkpoint_every == 0:
                self.save_checkpoint(os.path.join(out_dir, "checkpoint.naf"))
        if out_dir:
            self.save_checkpoint(os.path.join(out_dir, "checkpoint.naf"))
        return self.history

    def save_checkpoint(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.model.save(path, optimizer=self.optimizer)

    def load_checkpoint(self, path):
        return self.model.load(path, optimizer=self.optimizer)
