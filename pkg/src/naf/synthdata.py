"""Procedural capsule-avatar sequences with an analytic ground-truth renderer.

The avatar is a small skeleton whose bones carry capsules, each rigidly
skinned to its bone (hard weights), so the ground-truth deformation is
exactly invertible.  Textures are deterministic functions of canonical
surface coordinates and differ between the front and back of each capsule
so that keyframe complementarity is meaningful.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import geometry as G

BACKGROUND = np.array([1.0, 1.0, 1.0], dtype=np.float32)


class DatasetError(Exception):
    pass


@dataclass
class Capsule:
    bone: int            # index of the bone/joint this capsule is attached to
    a: np.ndarray        # canonical start point (3,)
    b: np.ndarray        # canonical end point (3,)
    radius: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)

    def to_json(self):
        return {"bone": self.bone, "a": self.a.tolist(), "b": self.b.tolist(),
                "radius": self.radius}

    @staticmethod
    def from_json(obj):
        return Capsule(int(obj["bone"]), np.array(obj["a"]), np.array(obj["b"]),
                       float(obj["radius"]))


@dataclass
class SyntheticAvatar:
    skeleton: G.Skeleton
    capsules: list
    texture_seed: int = 0
    _palette: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.texture_seed)
        n = len(self.capsules)
        # two palettes per capsule: front colors and back colors, kept
        # saturated and distinct so texture coverage is informative
        front = 0.25 + 0.7 * rng.random((n, 3))
        back = 0.25 + 0.7 * rng.random((n, 3))
        self._palette = np.stack([front, back])  # (2, n, 3)

    @property
    def num_bones(self):
        return self.skeleton.num_joints

    def canonical_bounds(self, margin=0.1):
        pts = np.concatenate([[c.a, c.b] for c in self.capsules])
        r = max(c.radius for c in self.capsules)
        lo = pts.min(axis=0) - r
        hi = pts.max(axis=0) + r
        pad = margin * (hi - lo)
        return lo - pad, hi + pad

    def to_json(self):
        return {"skeleton": self.skeleton.to_json(),
                "capsules": [c.to_json() for c in self.capsules],
                "texture_seed": self.texture_seed}

    @staticmethod
    def from_json(obj):
        return SyntheticAvatar(G.Skeleton.from_json(obj["skeleton"]),
                               [Capsule.from_json(c) for c in obj["capsules"]],
                               int(obj.get("texture_seed", 0)))

    # ------------------------------------------------------------------
    def texture(self, cap_idx, x_c, n_c):
        """Albedo at canonical surface points x_c with outward normals n_c."""
        cap = self.capsules[cap_idx]
        axis = cap.b - cap.a
        length = np.linalg.norm(axis)
        axis = axis / max(length, 1e-9)
        ref = np.array([1.0, 0.0, 0.0])
        if abs(axis @ ref) > 0.9:
            ref = np.array([0.0, 0.0, 1.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        h = np.clip((x_c - cap.a) @ axis / max(length, 1e-9), 0.0, 1.0)
        cos_phi = n_c @ u
        sin_phi = n_c @ v
        front_blend = 0.5 + 0.5 * np.tanh(3.0 * cos_phi)
        stripes = 0.62 + 0.33 * np.sin(4.0 * np.pi * h + 1.2 * np.arctan2(sin_phi, cos_phi))
        fcol, bcol = self._palette[0, cap_idx], self._palette[1, cap_idx]
        base = front_blend[:, None] * fcol + (1.0 - front_blend[:, None]) * bcol
        return np.clip(base * stripes[:, None], 0.0, 1.0)

    def surface_samples(self, per_capsule=64, seed=1234):
        """Fixed canonical surface point set with normals and bone ids."""
        rng = np.random.default_rng(seed)
        pts, nrm, bones = [], [], []
        for ci, cap in enumerate(self.capsules):
            axis = cap.b - cap.a
            length = np.linalg.norm(axis)
            axis_n = axis / max(length, 1e-9)
            ref = np.array([1.0, 0.0, 0.0])
            if abs(axis_n @ ref) > 0.9:
                ref = np.array([0.0, 0.0, 1.0])
            u = np.cross(axis_n, ref)
            u /= np.linalg.norm(u)
            v = np.cross(axis_n, u)
            h = rng.random(per_capsule)
            phi = rng.uniform(0, 2 * np.pi, per_capsule)
            n = (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v)
            p = cap.a + h[:, None] * axis + cap.radius * n
            pts.append(p)
            nrm.append(n)
            bones.append(np.full(per_capsule, cap.bone))
        return np.concatenate(pts), np.concatenate(nrm), np.concatenate(bones)


def default_avatar(num_bones=4, texture_seed=0):
    """Small humanoid: torso, head, two arms (4 bones) or a longer chain."""
    if num_bones == 4:
        parents = [-1, 0, 0, 0]
        offsets = np.array([
            [0.0, 0.90, 0.0],   # pelvis (root) above ground
            [0.0, 0.50, 0.0],   # neck
            [0.17, 0.44, 0.0],  # left shoulder
            [-0.17, 0.44, 0.0],  # right shoulder
        ])
        sk = G.Skeleton(parents, offsets)
        rest = sk.rest_joint_positions()
        capsules = [
            Capsule(0, rest[0], rest[0] + [0.0, 0.50, 0.0], 0.14),
            Capsule(1, rest[1], rest[1] + [0.0, 0.28, 0.0], 0.10),
            Capsule(2, rest[2], rest[2] + [0.07, -0.42, 0.0], 0.055),
            Capsule(3, rest[3], rest[3] + [-0.07, -0.42, 0.0], 0.055),
        ]
        return SyntheticAvatar(sk, capsules, texture_seed)
    # generic chain avatar for stress tests
    parents = [-1] + list(range(num_bones - 1))
    seg = 1.4 / num_bones
    offsets = np.zeros((num_bones, 3))
    offsets[0] = [0.0, 0.3, 0.0]
    offsets[1:] = [0.0, seg, 0.0]
    sk = G.Skeleton(parents, offsets)
    rest = sk.rest_joint_positions()
    capsules = [Capsule(i, rest[i], rest[i] + [0.0, seg, 0.0], 0.09)
                for i in range(num_bones)]
    return SyntheticAvatar(sk, capsules, texture_seed)


# ----------------------------------------------------------------------
# analytic rendering
def _ray_capsule(o, d, pa, pb, r):
    """Vectorized ray/capsule intersection.

    o: (3,) shared origin, d: (N, 3) unit directions.  Returns t (N,) with
    inf for misses.
    """
    ba = pb - pa
    oa = o - pa
    baba = ba @ ba
    bard = d @ ba
    baoa = oa @ ba
    rdoa = d @ oa
    oaoa = oa @ oa
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - r * r * baba
    h = b * b - a * c
    t = np.full(d.shape[0], np.inf)
    ok = h >= 0
    a_safe = np.where(np.abs(a) < 1e-12, 1e-12, a)
    tc = (-b - np.sqrt(np.maximum(h, 0.0))) / a_safe
    y = baoa + tc * bard
    body = ok & (y > 0.0) & (y < baba) & (tc > 1e-6)
    t[body] = tc[body]
    # spherical caps
    for center, ysel in ((pa, y <= 0.0), (pb, y >= baba)):
        oc = o - center
        b2 = d @ oc
        c2 = oc @ oc - r * r
        h2 = b2 * b2 - c2
        okc = ok & ysel & (h2 >= 0.0)
        tcap = -b2 - np.sqrt(np.maximum(h2, 0.0))
        okc &= tcap > 1e-6
        t[okc] = np.minimum(t[okc], tcap[okc])
    return t


def camera_rays(cam):
    """Unit world-space ray directions for every pixel, row-major (H*W, 3)."""
    xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=1)
    dirs_cam = pix @ np.linalg.inv(cam.K_mat).T
    dirs = dirs_cam @ cam.R  # R^T applied from the right
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return cam.position, dirs


def render_ground_truth(avatar, pose, cam, background=BACKGROUND):
    """Analytic render of the LBS-posed capsules; returns (image, mask)."""
    o, dirs = camera_rays(cam)
    R_w, t_w = G.forward_kinematics(avatar.skeleton, pose)
    n_pix = dirs.shape[0]
    best_t = np.full(n_pix, np.inf)
    best_cap = np.full(n_pix, -1)
    posed = []
    for ci, cap in enumerate(avatar.capsules):
        i = cap.bone
        pa = R_w[i] @ cap.a + t_w[i]
        pb = R_w[i] @ cap.b + t_w[i]
        posed.append((pa, pb))
        t = _ray_capsule(o, dirs, pa, pb, cap.radius)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_cap[closer] = ci
    mask = best_cap >= 0
    img = np.tile(np.asarray(background, dtype=np.float32), (n_pix, 1))
    for ci, cap in enumerate(avatar.capsules):
        sel = best_cap == ci
        if not sel.any():
            continue
        i = cap.bone
        x_hit = o + best_t[sel, None] * dirs[sel]
        # rigid map back to canonical space
        x_c = (x_hit - t_w[i]) @ R_w[i]
        ba = cap.b - cap.a
        h = np.clip((x_c - cap.a) @ ba / max(ba @ ba, 1e-12), 0.0, 1.0)
        closest = cap.a + h[:, None] * ba
        n_c = x_c - closest
        n_c /= np.maximum(np.linalg.norm(n_c, axis=1, keepdims=True), 1e-9)
        img[sel] = avatar.texture(ci, x_c, n_c)
    H, W = cam.height, cam.width
    return img.reshape(H, W, 3), mask.reshape(H, W)


# ----------------------------------------------------------------------
# sequence generation
def orbit_camera(azimuth, target, radius=2.6, elevation=0.12, width=128,
                 height=128, focal_scale=1.25):
    """Camera on a horizontal orbit, looking at `target`."""
    cx = target + radius * np.array([np.sin(azimuth),
                                     elevation,
                                     np.cos(azimuth)])
    fwd = target - cx
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # world -> camera rows
    t = -R @ cx
    f = focal_scale * width
    K = np.array([[f, 0.0, (width - 1) / 2.0],
                  [0.0, f, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return G.Camera(K, np.concatenate([R, t[:, None]], axis=1), width, height)


MOTIONS = ("swing", "turnaround")


def motion_pose(avatar, motion, u, rng_phases):
    """Pose at normalized time u in [0, 1]."""
    K = avatar.num_bones
    rot = np.zeros((K, 3))
    amps, phases, axes = rng_phases
    for j in range(1, K):
        rot[j] = axes[j] * amps[j] * np.sin(2 * np.pi * (1.5 * u + phases[j]))
    if motion == "turnaround":
        # half turn about the vertical axis: the facing sign w.r.t. a fixed
        # camera flips exactly at the midpoint frame
        rot[0] = [0.0, np.pi * u, 0.0]
        root_t = np.zeros(3)
    else:  # swing
        rot[0] = [0.0, 0.8 * np.sin(2 * np.pi * u), 0.0]
        root_t = np.array([0.06 * np.sin(2 * np.pi * u), 0.0,
                           0.04 * np.cos(2 * np.pi * u)])
    return G.Pose(rot, root_t)


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray   # (H, W) bool
    camera: G.Camera
    pose: G.Pose


@dataclass
class Dataset:
    frames: list
    skeleton: G.Skeleton
    avatar: SyntheticAvatar = None
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


def generate_sequence(avatar, n_frames, motion="swing", seed=0,
                      width=128, height=128, camera_orbit=True):
    """Deterministic synthetic sequence: poses, cameras, oracle images."""
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion '{motion}', choose from {MOTIONS}")
    rng = np.random.default_rng(seed)
    K = avatar.num_bones
    amps = 0.12 + 0.15 * rng.random(K)
    phases = rng.random(K)
    axes = rng.normal(size=(K, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    # bias swing axes toward z so arms/head swing visibly in camera
    axes = 0.4 * axes + 0.6 * np.array([0.0, 0.0, 1.0])
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    rng_phases = (amps, phases, axes)

    target = np.array([0.0, 1.1, 0.0])
    frames = []
    for n in range(n_frames):
        u = n / (n_frames - 1)
        pose = motion_pose(avatar, motion, u, rng_phases)
        if motion == "turnaround" or not camera_orbit:
            az = 0.0
        else:
            az = 2 * np.pi * u
        cam = orbit_camera(az, target, width=width, height=height)
        img, mask = render_ground_truth(avatar, pose, cam)
        frames.append(Frame(img.astype(np.float32), mask, cam, pose))
    meta = {"fps": 15, "units": "meters", "seed": seed, "motion": motion,
            "midpoint_frame": n_frames // 2,
            "camera_target": target.tolist()}
    return Dataset(frames, avatar.skeleton, avatar, meta)


# ----------------------------------------------------------------------
# on-disk format
def write_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    entries = []
    for i, fr in enumerate(dataset.frames):
        img_rel = f"frames/{i:06d}.png"
        mask_rel = f"masks/{i:06d}.png"
        Image.fromarray((np.clip(fr.image, 0, 1) * 255 + 0.5).astype(np.uint8)
                        ).save(os.path.join(directory, img_rel))
        Image.fromarray((fr.mask.astype(np.uint8) * 255)
                        ).save(os.path.join(directory, mask_rel))
        entries.append({"image": img_rel, "mask": mask_rel,
                        "camera": fr.camera.to_json(),
                        "pose": fr.pose.to_json()})
    meta = {"skeleton": dataset.skeleton.to_json(),
            "frames": entries,
            "metadata": dataset.metadata}
    if dataset.avatar is not None:
        meta["avatar"] = dataset.avatar.to_json()
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def read_dataset(directory):
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise DatasetError(f"missing {meta_path}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed meta.json: {e}") from e
    skeleton = G.Skeleton.from_json(meta["skeleton"])
    avatar = (SyntheticAvatar.from_json(meta["avatar"])
              if "avatar" in meta else None)
    frames = []
    for i, entry in enumerate(meta["frames"]):
        img_path = os.path.join(directory, entry["image"])
        mask_path = os.path.join(directory, entry["mask"])
        for p in (img_path, mask_path):
            if not os.path.exists(p):
                raise DatasetError(f"frame {i}: missing file {p}")
        img = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(mask_path)) > 127
        if img.shape[:2] != mask.shape:
            raise DatasetError(
                f"frame {i}: image {img.shape[:2]} vs mask {mask.shape} size mismatch"
            )
        frames.append(Frame(img, mask, G.Camera.from_json(entry["camera"]),
                            G.Pose.from_json(entry["pose"])))
    if len(frames) < 2:
        raise DatasetError("dataset must contain at least 2 frames")
    return Dataset(frames, skeleton, avatar, meta.get("metadata", {}))


def subsample_frames(frames, rate):
    """Stride subsampling; keeps ceil(n / rate) frames."""
    if rate < 1:
        raise ValueError("sample rate must be >= 1")
    return frames[::rate]
