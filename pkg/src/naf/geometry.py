"""Rigid-body math, skeletal poses, pinhole cameras, positional encoding.

All functions here are pure.  Where the training graph needs gradients
(projection, encoding), a Tensor-graph twin of the numpy routine is
provided with a `_t` suffix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import tensor as T

DEFAULT_ENCODING_FREQS = 10


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation."""

    joint_rotations: np.ndarray  # (K, 3) axis-angle, radians * axis
    root_translation: np.ndarray  # (3,) scene units

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.joint_rotations.ndim != 2 or self.joint_rotations.shape[1] != 3:
            raise ValueError("joint_rotations must be (K, 3)")
        if not (np.all(np.isfinite(self.joint_rotations))
                and np.all(np.isfinite(self.root_translation))):
            raise ValueError("pose components must be finite")

    @property
    def num_joints(self):
        return self.joint_rotations.shape[0]

    def vector(self, include_root_joint=False):
        """Flat conditioning vector: concatenated joint rotations, root excluded
        by default (root orientation is global, not a body deformation)."""
        rot = self.joint_rotations if include_root_joint else self.joint_rotations[1:]
        return rot.reshape(-1).astype(np.float32)

    def to_json(self):
        return {"joints": self.joint_rotations.tolist(),
                "root": self.root_translation.tolist()}

    @staticmethod
    def from_json(obj):
        return Pose(np.array(obj["joints"]), np.array(obj["root"]))

    @staticmethod
    def rest(num_joints):
        return Pose(np.zeros((num_joints, 3)), np.zeros(3))


@dataclass
class Skeleton:
    """Topologically sorted joint tree; joint 0 is the pelvis/root."""

    parents: list  # parent index per joint, -1 for root
    offsets: np.ndarray  # (K, 3) rest offset from parent joint

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for i, p in enumerate(self.parents[1:], start=1):
            if not (0 <= p < i):
                raise ValueError(
                    f"joint {i}: parent {p} must precede it (topological order)"
                )

    @property
    def num_joints(self):
        return len(self.parents)

    def rest_joint_positions(self):
        pos = np.zeros((self.num_joints, 3))
        for i, p in enumerate(self.parents):
            pos[i] = self.offsets[i] if p < 0 else pos[p] + self.offsets[i]
        return pos

    def to_json(self):
        return {"parents": list(self.parents), "offsets": self.offsets.tolist()}

    @staticmethod
    def from_json(obj):
        return Skeleton(list(obj["parents"]), np.array(obj["offsets"]))


@dataclass
class Camera:
    """Pinhole camera: K_mat intrinsics, E = [R|t] world->camera extrinsics.

    Pixel centers sit at integer coordinates, origin at the top-left pixel.
    """

    K_mat: np.ndarray  # (3, 3)
    E: np.ndarray  # (3, 4)
    width: int
    height: int

    def __post_init__(self):
        self.K_mat = np.asarray(self.K_mat, dtype=np.float64)
        self.E = np.asarray(self.E, dtype=np.float64)
        fx, fy = self.K_mat[0, 0], self.K_mat[1, 1]
        cx, cy = self.K_mat[0, 2], self.K_mat[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def R(self):
        return self.E[:, :3]

    @property
    def t(self):
        return self.E[:, 3]

    @property
    def position(self):
        return -self.R.T @ self.t

    def to_json(self):
        return {"K": self.K_mat.tolist(), "E": self.E.tolist(),
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json(obj):
        return Camera(np.array(obj["K"]), np.array(obj["E"]),
                      int(obj["width"]), int(obj["height"]))


class BehindCameraError(ValueError):
    pass


# ----------------------------------------------------------------------
def axis_angle_to_rotation(omega):
    """Rodrigues formula; series expansion near the zero rotation."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = np.array([[0.0, -omega[2], omega[1]],
                  [omega[2], 0.0, -omega[0]],
                  [-omega[1], omega[0], 0.0]])
    if theta < 1e-8:
        # sin(t)/t ~ 1, (1-cos t)/t^2 ~ 1/2
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass
class BoneTransform:
    """Rigid map taking observation-space points into canonical space."""

    R: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)

    def apply(self, x):
        return np.asarray(x) @ self.R.T + self.t

    def inverse_apply(self, x):
        return (np.asarray(x) - self.t) @ self.R


def forward_kinematics(skeleton, pose):
    """World transform (rest -> posed) per bone.

    Returns (R_w, t_w) arrays of shape (K, 3, 3) and (K, 3): the rigid map
    that carries a point rigidly attached to bone i from its rest-pose
    world position to its posed world position.
    """
    K = skeleton.num_joints
    if pose.num_joints != K:
        raise ValueError(
            f"pose has {pose.num_joints} joints, skeleton has {K}"
        )
    rest = skeleton.rest_joint_positions()
    G = np.zeros((K, 4, 4))
    for i, parent in enumerate(skeleton.parents):
        local = np.eye(4)
        local[:3, :3] = axis_angle_to_rotation(pose.joint_rotations[i])
        local[:3, 3] = skeleton.offsets[i]
        if parent < 0:
            local[:3, 3] = local[:3, 3] + pose.root_translation
            G[i] = local
        else:
            G[i] = G[parent] @ local
    # A_i = G_i * inv(G_i^rest); rest transform is a pure translation.
    R_w = G[:, :3, :3].copy()
    t_w = np.zeros((K, 3))
    for i in range(K):
        t_w[i] = G[i, :3, 3] - R_w[i] @ rest[i]
    return R_w, t_w


def bone_transforms(skeleton, pose):
    """Observation -> canonical rigid maps, one BoneTransform per bone.

    These are the inverses of the forward-kinematics rest->posed maps.
    """
    R_w, t_w = forward_kinematics(skeleton, pose)
    out = []
    for i in range(skeleton.num_joints):
        Ri = R_w[i].T
        ti = -Ri @ t_w[i]
        out.append(BoneTransform(Ri, ti))
    return out


def posed_joint_positions(skeleton, pose):
    rest = skeleton.rest_joint_positions()
    R_w, t_w = forward_kinematics(skeleton, pose)
    return np.stack([R_w[i] @ rest[i] + t_w[i]
                     for i in range(skeleton.num_joints)])


def pose_distance(pose_a, pose_b, exclude_root=False):
    """Mean per-joint geodesic rotation angle between two poses.

    exclude_root drops the root joint, comparing body configuration only
    (global orientation handled separately, e.g. by the facing split).
    """
    ra = pose_a.joint_rotations[1:] if exclude_root else pose_a.joint_rotations
    rb = pose_b.joint_rotations[1:] if exclude_root else pose_b.joint_rotations
    angles = []
    for wa, wb in zip(ra, rb):
        Ra = axis_angle_to_rotation(wa)
        Rb = axis_angle_to_rotation(wb)
        angles.append(rotation_angle(Ra.T @ Rb))
    return float(np.mean(angles))


# ----------------------------------------------------------------------
def project_point(cam, x):
    """World point -> pixel, with the homogeneous divide."""
    x = np.asarray(x, dtype=np.float64)
    xc = cam.R @ x + cam.t
    if xc[2] <= 1e-6:
        raise BehindCameraError(f"point {x} is behind the camera (z={xc[2]:.3g})")
    uvw = cam.K_mat @ xc
    return uvw[:2] / uvw[2]


def project_points(cam, xs):
    """Vectorized projection; returns (pixels (N,2), valid mask (N,))."""
    xs = np.asarray(xs, dtype=np.float64)
    xc = xs @ cam.R.T + cam.t
    valid = xc[:, 2] > 1e-6
    z = np.where(valid, xc[:, 2], 1.0)
    uvw = xc @ cam.K_mat.T
    pix = uvw[:, :2] / z[:, None]
    return pix, valid


def project_points_t(cam, xs):
    """Differentiable projection of a Tensor of points (N, 3).

    Returns (pixels Tensor (N, 2), valid mask ndarray (N,)).  Behind-camera
    points get a clamped depth so the graph stays finite; callers must mask
    them out with `valid`.
    """
    R = T.Tensor(cam.R.astype(np.float32))
    t = T.Tensor(cam.t.astype(np.float32))
    Km = T.Tensor(cam.K_mat.astype(np.float32))
    xc = T.add(T.matmul(xs, T.Tensor(cam.R.T.astype(np.float32))), t)
    z = xc[:, 2:3]
    valid = z.data[:, 0] > 1e-6
    z_safe = T.add(T.mul(z, T.Tensor(valid[:, None].astype(np.float32))),
                   T.Tensor((~valid[:, None]).astype(np.float32)))
    uvw = T.matmul(xc, T.Tensor(cam.K_mat.T.astype(np.float32)))
    pix = T.div(uvw[:, :2], z_safe)
    return pix, valid


# ----------------------------------------------------------------------
def positional_encoding(x, num_freqs=DEFAULT_ENCODING_FREQS):
    """NeRF-style sinusoidal encoding of (..., 3) points.

    Output layout, per coordinate c and frequency l (slow axis = frequency):
    [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]
    with the three coordinates interleaved inside each frequency block,
    giving 6 * num_freqs values per point.
    """
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    freqs = (2.0 ** np.arange(num_freqs)).astype(np.float32) * np.pi
    ang = x[..., None, :] * freqs[:, None]  # (..., L, 3)
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # (..., L, 6)
    return out.reshape(*x.shape[:-1], 6 * num_freqs)


def positional_encoding_t(x, num_freqs=DEFAULT_ENCODING_FREQS):
    """Tensor-graph twin of positional_encoding for (N, 3) inputs."""
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    blocks = []
    for l in range(num_freqs):
        scale = float((2.0 ** l) * np.pi)
        ang = T.mul(x, scale)
        blocks.append(T.sin(ang))
        blocks.append(T.cos(ang))
    return T.concat(blocks, axis=-1)
