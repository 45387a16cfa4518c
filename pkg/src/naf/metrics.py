"""PSNR/SSIM and the evaluation protocol (split, sampling, bbox crop)."""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np
from scipy import ndimage

from . import geometry as G
from . import radiance as R
from . import synthdata as S

PSNR_CAP = 99.0  # dB reported for zero MSE, keeps JSON finite


def psnr(pred, gt, bbox=None):
    """10*log10(1/MSE) in dB over an optional (x0, y0, x1, y1) crop."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"empty crop {bbox}")
        pred = pred[y0:y1, x0:x1]
        gt = gt[y0:y1, x0:x1]
        if pred.size == 0:
            raise ValueError(f"crop {bbox} outside image")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def subject_bbox(cam, skeleton, pose, pad_frac=0.1):
    """2D crop from projecting the posed joints, padded by 10% of the span."""
    joints = G.posed_joint_positions(skeleton, pose)
    uv, valid = G.project_points(cam, joints)
    if not valid.any():
        raise ValueError("subject entirely behind camera")
    uv = uv[valid]
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    pad = pad_frac * (hi - lo) + 8.0  # joints underestimate the body extent
    x0 = int(max(np.floor(lo[0] - pad[0]), 0))
    y0 = int(max(np.floor(lo[1] - pad[1]), 0))
    x1 = int(min(np.ceil(hi[0] + pad[0]) + 1, cam.width))
    y1 = int(min(np.ceil(hi[1] + pad[1]) + 1, cam.height))
    if x1 <= x0 or y1 <= y0:
        raise ValueError("projected bounding box is empty")
    return (x0, y0, x1, y1)


# ----------------------------------------------------------------------
def _gaussian_kernel(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    return np.outer(k, k)


def to_luma(img):
    """ITU-R 601 luma; grayscale input passes through."""
    img = np.asarray(img, np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def ssim(pred, gt, window=11, sigma=1.5):
    """Mean windowed SSIM on luma, unit dynamic range constants."""
    pred = to_luma(pred)
    gt = to_luma(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if min(pred.shape) < window:
        raise ValueError(f"image {pred.shape} smaller than {window}x{window} window")
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    kern = _gaussian_kernel(window, sigma)

    def filt(x):
        # valid windows only: correlate then crop the centered region
        full = ndimage.correlate(x, kern, mode="constant")
        h = window // 2
        return full[h:x.shape[0] - h, h:x.shape[1] - h]

    mu_p, mu_g = filt(pred), filt(gt)
    var_p = filt(pred * pred) - mu_p ** 2
    var_g = filt(gt * gt) - mu_g ** 2
    cov = filt(pred * gt) - mu_p * mu_g
    num = (2 * mu_p * mu_g + C1) * (2 * cov + C2)
    den = (mu_p ** 2 + mu_g ** 2 + C1) * (var_p + var_g + C2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------------
def split_frames(frames):
    """Deterministic 4:1 split in frame order: every 5th frame held out."""
    held = frames[4::5]
    train = [f for i, f in enumerate(frames) if i % 5 != 4]
    return train, held


def subsample_eval(frames, rate):
    """Every `rate`-th frame starting at 0, so count = ceil(n / rate)."""
    return frames[::rate]


def novel_view_camera(dataset, azimuth_offset=2.0944):
    """Held-out camera: orbit position rotated ~120 degrees from frame 0."""
    f0 = dataset.frames[0].camera
    target = np.asarray(dataset.metadata.get("camera_target", [0.0, 1.1, 0.0]))
    pos = f0.position
    rel = pos - target
    base_az = math.atan2(rel[0], rel[2])
    radius = float(np.linalg.norm(rel[[0, 2]]))
    return S.orbit_camera(base_az + azimuth_offset, target, radius=radius,
                          width=f0.width, height=f0.height)


def evaluate(render_fn, dataset, skeleton=None, rate=30, settings=("novel_view", "novel_pose"),
             avatar=None):
    """Protocol report: 4:1 split, rate subsampling, bbox PSNR + SSIM.

    `render_fn(camera, pose)` returns an (H, W, 3) image in [0, 1].
    Novel view renders train-split poses from a held-out orbit camera
    (ground truth from the analytic oracle, so `avatar` is required for
    that setting).  Novel pose renders held-out frames with their own
    cameras against the captured images.
    """
    skeleton = skeleton or dataset.skeleton
    train, held = split_frames(dataset.frames)
    report = {}
    per_frame = []
    if "novel_view" in settings:
        if avatar is None:
            avatar = dataset.avatar
        if avatar is None:
            raise ValueError("novel-view setting needs the oracle avatar")
        cam = novel_view_camera(dataset)
        vals_p, vals_s = [], []
        for f in subsample_eval(train, rate):
            gt, _ = S.render_ground_truth(avatar, f.pose, cam)
            pred = render_fn(cam, f.pose)
            box = subject_bbox(cam, skeleton, f.pose)
            p = psnr(pred, gt, bbox=box)
            x0, y0, x1, y1 = box
            s = ssim(pred[y0:y1, x0:x1], gt[y0:y1, x0:x1])
            vals_p.append(p)
            vals_s.append(s)
            per_frame.append(("novel_view", len(vals_p) - 1, p, s))
        report["novel_view"] = {"psnr": float(np.mean(vals_p)),
                                "ssim": float(np.mean(vals_s)),
                                "n_frames": len(vals_p)}
    if "novel_pose" in settings:
        vals_p, vals_s = [], []
        for f in subsample_eval(held, rate):
            pred = render_fn(f.camera, f.pose)
            box = subject_bbox(f.camera, skeleton, f.pose)
            p = psnr(pred, f.image, bbox=box)
            x0, y0, x1, y1 = box
            s = ssim(pred[y0:y1, x0:x1], f.image[y0:y1, x0:x1])
            vals_p.append(p)
            vals_s.append(s)
            per_frame.append(("novel_pose", len(vals_p) - 1, p, s))
        report["novel_pose"] = {"psnr": float(np.mean(vals_p)),
                                "ssim": float(np.mean(vals_s)),
                                "n_frames": len(vals_p)}
    report["lpips"] = "unavailable"
    report["_per_frame"] = per_frame
    return report


def write_report(report, out_dir, name="eval"):
    """JSON report + flat CSV + a PSNR/SSIM bar figure."""
    os.makedirs(out_dir, exist_ok=True)
    per_frame = report.pop("_per_frame", [])
    json_path = os.path.join(out_dir, f"{name}.json")
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    csv_path = os.path.join(out_dir, f"{name}.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["setting", "frame", "psnr", "ssim"])
        for row in per_frame:
            w.writerow([row[0], row[1], f"{row[2]:.4f}", f"{row[3]:.6f}"])
    fig_path = os.path.join(out_dir, f"{name}.png")
    _report_figure(report, per_frame, fig_path)
    report["_per_frame"] = per_frame
    return json_path, csv_path, fig_path


def _report_figure(report, per_frame, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, label in ((axes[0], 2, "PSNR (dB)"), (axes[1], 3, "SSIM")):
        for setting in ("novel_view", "novel_pose"):
            pts = [r[key] for r in per_frame if r[0] == setting]
            if pts:
                ax.plot(pts, marker="o", label=setting)
        ax.set_xlabel("eval frame")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
