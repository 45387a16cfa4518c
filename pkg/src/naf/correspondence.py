"""Keyframe bank, feature extraction, and forward correspondence search.

A pair of keyframes with complementary visible texture is selected once;
during rendering every canonical sample is forward-deformed into each
keyframe's observation space, projected, and its image color and learned
feature are bilinearly sampled there.  A 3-layer MLP turns the two
feature/color vectors into convex blend weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from .numcore import Mlp, Tensor
from .numcore import tensor as T
from .numcore import convs

FEATURE_DIM = 16


class FeatureExtractor:
    """Small 3-level conv encoder-decoder with skip connections.

    Input (3, H, W) with H, W divisible by 4; output (16, H, W).  The final
    conv is zero-initialized, so features start at zero and grow as the
    extractor trains.  Background pixels are zeroed via the mask.
    """

    def __init__(self, seed=0, feat_dim=FEATURE_DIM):
        rng = np.random.default_rng(seed)
        self.feat_dim = feat_dim

        def conv_param(c_in, c_out, name, zero=False, k=3):
            fan = c_in * k * k
            if zero:
                w = np.zeros((fan, c_out), np.float32)
            else:
                w = (rng.normal(0, np.sqrt(2.0 / fan), (fan, c_out))
                     .astype(np.float32))
            return (Tensor(w, requires_grad=True),
                    Tensor(np.zeros(c_out, np.float32), requires_grad=True))

        self.enc1 = conv_param(3, 12, "enc1")
        self.enc2 = conv_param(12, 16, "enc2")
        self.enc3 = conv_param(16, 24, "enc3")
        self.dec2 = conv_param(24 + 16, 16, "dec2")
        self.dec1 = conv_param(16 + 12, feat_dim, "dec1", zero=True)

    def parameters(self):
        out = []
        for name in ("enc1", "enc2", "enc3", "dec2", "dec1"):
            w, b = getattr(self, name)
            out.append((f"extractor.{name}_w", w))
            out.append((f"extractor.{name}_b", b))
        return out

    def __call__(self, image, mask=None):
        """image: (H, W, 3) array or (3, H, W) Tensor; returns (16, H, W)."""
        if not isinstance(image, Tensor):
            image = Tensor(np.moveaxis(np.asarray(image, np.float32), -1, 0))
        C, H, W = image.shape
        if H % 4 or W % 4:
            raise ValueError(f"image size {H}x{W} must be divisible by 4")
        act = T.softplus
        e1 = act(convs.conv2d(image, *self.enc1))
        e2 = act(convs.conv2d(convs.downsample2x_2d(e1), *self.enc2))
        e3 = act(convs.conv2d(convs.downsample2x_2d(e2), *self.enc3))
        u2 = convs.upsample2x_nearest_2d(e3)
        d2 = act(convs.conv2d(T.concat([u2, e2], axis=0), *self.dec2))
        u1 = convs.upsample2x_nearest_2d(d2)
        feats = convs.conv2d(T.concat([u1, e1], axis=0), *self.dec1)
        if mask is not None:
            m = np.asarray(mask, np.float32)[None]
            feats = T.mul(feats, Tensor(m))
        return feats


@dataclass
class Keyframe:
    index: int
    image: np.ndarray   # (H, W, 3) in [0, 1]
    mask: np.ndarray    # (H, W) bool
    camera: G.Camera
    pose: G.Pose
    features: object = None  # (16, H, W) Tensor, refreshed during training


@dataclass
class KeyframeBank:
    pair: tuple            # (Keyframe, Keyframe)
    pose_distance: float
    coverage_score: int
    candidates: list = field(default_factory=list)  # [(i, j, score), ...]

    def to_json(self):
        i, j = self.pair
        return {"indices": [i.index, j.index],
                "pose_distance": self.pose_distance,
                "coverage_score": self.coverage_score,
                "candidates": [[a, b, int(s)] for a, b, s in self.candidates]}


def pelvis_facing_sign(skeleton, pose, camera):
    """Sign of dot(pelvis forward axis, viewing direction); negative means
    the subject faces the camera."""
    R_root = G.axis_angle_to_rotation(pose.joint_rotations[0])
    forward = R_root @ np.array([0.0, 0.0, 1.0])
    pelvis = G.posed_joint_positions(skeleton, pose)[0]
    view = pelvis - camera.position
    view /= np.linalg.norm(view)
    return float(np.dot(forward, view))


def _coverage(frame, surface_pts, surface_nrm, bone_ids, skeleton):
    """Boolean cover mask: canonical surface samples visible in `frame`.

    Samples are carried into observation space by the rigid per-bone maps
    (ground-truth skinning for the synthetic avatar), projected, and count
    as covered when they land inside the subject mask facing the camera.
    """
    R_w, t_w = G.forward_kinematics(skeleton, frame.pose)
    x_o = np.einsum("nij,nj->ni", R_w[bone_ids], surface_pts) + t_w[bone_ids]
    n_o = np.einsum("nij,nj->ni", R_w[bone_ids], surface_nrm)
    pix, in_front = G.project_points(frame.camera, x_o)
    H, W = frame.mask.shape
    xi = np.round(pix[:, 0]).astype(int)
    yi = np.round(pix[:, 1]).astype(int)
    inside = in_front & (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    covered = np.zeros(len(x_o), bool)
    view = x_o - frame.camera.position
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    facing = np.einsum("ni,ni->n", n_o, view) < 0.0
    idx = np.where(inside)[0]
    covered[idx] = frame.mask[yi[idx], xi[idx]] & facing[idx]
    return covered


def select_keyframes(dataset, k_pairs=5, surface_samples=None):
    """Pick the cross-facing frame pair with maximal texture coverage.

    Frames split into front/back sets by the pelvis facing sign; among the
    k cross-set pairs with smallest mean joint-angle distance, the pair
    whose union of covered surface samples is largest wins.  Ties break
    toward the lexicographically smallest (i, j).
    """
    frames = dataset.frames
    if len(frames) < 2:
        raise ValueError("need at least 2 frames to build a keyframe bank")
    skeleton = dataset.skeleton
    signs = [pelvis_facing_sign(skeleton, fr.pose, fr.camera) for fr in frames]
    front = [i for i, s in enumerate(signs) if s < 0]
    back = [i for i, s in enumerate(signs) if s >= 0]
    if not front or not back:
        import warnings
        warnings.warn("all frames face the same way; falling back to the two "
                      "most orientation-opposed frames")
        order = np.argsort(signs)
        front, back = [int(order[0])], [int(order[-1])]

    cross = [(i, j) for i in front for j in back]
    # body-only distance: the facing split already accounts for the root
    dists = {(i, j): G.pose_distance(frames[i].pose, frames[j].pose,
                                     exclude_root=True)
             for i, j in cross}
    closest = sorted(cross, key=lambda p: (dists[p], min(p), max(p)))[:k_pairs]

    if surface_samples is None:
        if dataset.avatar is not None:
            surface_samples = dataset.avatar.surface_samples()
        else:
            raise ValueError("need surface samples (or a dataset avatar) "
                             "for coverage scoring")
    pts, nrm, bones = surface_samples
    cover_cache = {}

    def cover(i):
        if i not in cover_cache:
            cover_cache[i] = _coverage(frames[i], pts, nrm, bones, skeleton)
        return cover_cache[i]

    scored = []
    for i, j in closest:
        score = int(np.sum(cover(i) | cover(j)))
        scored.append((i, j, score))
    best = max(scored, key=lambda s: (s[2], -min(s[0], s[1]), -max(s[0], s[1])))
    i, j = sorted(best[:2])
    kf = lambda n: Keyframe(n, frames[n].image, frames[n].mask,
                            frames[n].camera, frames[n].pose)
    return KeyframeBank((kf(i), kf(j)), dists[(best[0], best[1])], best[2],
                        candidates=scored)


def pair_coverage_score(dataset, i, j, surface_samples=None):
    """Brute-force coverage score of an arbitrary frame pair (oracle)."""
    if surface_samples is None:
        surface_samples = dataset.avatar.surface_samples()
    pts, nrm, bones = surface_samples
    ci = _coverage(dataset.frames[i], pts, nrm, bones, dataset.skeleton)
    cj = _coverage(dataset.frames[j], pts, nrm, bones, dataset.skeleton)
    return int(np.sum(ci | cj))


# ----------------------------------------------------------------------
def sample_keyframe(keyframe, pix, valid):
    """Bilinear feature + color lookup at projected pixels.

    pix: (N, 2) Tensor; valid: (N,) bool for in-front-of-camera points.
    Out-of-image or invalid points get zero feature, zero color, flag set.
    Returns (f (N, 16) Tensor, c (N, 3) Tensor, occluded (N,) bool).
    """
    H, W = keyframe.mask.shape
    px = pix.data
    inside = (valid & (px[:, 0] >= 0) & (px[:, 0] <= W - 1)
              & (px[:, 1] >= 0) & (px[:, 1] <= H - 1))
    gate = Tensor(inside[:, None].astype(np.float32))
    pix_safe = T.mul(pix, gate)  # clamp invalid to pixel (0,0); gated below
    feats = keyframe.features
    if feats is None:
        raise ValueError(f"keyframe {keyframe.index} has no feature map")
    f = T.mul(T.grid_sample_2d(feats, pix_safe), gate)
    img = np.moveaxis(keyframe.image, -1, 0).astype(np.float32)
    c = T.mul(T.grid_sample_2d(Tensor(img), pix_safe), gate)
    return f, c, ~inside


def blend_features(blend_mlp, f_i, c_i, f_j, c_j, normalize=True):
    """Blend two feature/color vectors with MLP-predicted weights.

    Returns (F (N, 19) Tensor, weights (N, 2) Tensor).  With normalize
    (default) the two logits pass through softmax, making F a convex
    combination; the raw-weight variant is exposed for ablation.
    """
    fc_i = T.concat([f_i, c_i], axis=-1)
    fc_j = T.concat([f_j, c_j], axis=-1)
    logits = blend_mlp(T.concat([fc_i, fc_j], axis=-1))
    w = T.softmax(logits, axis=-1) if normalize else logits
    F = T.add(T.mul(fc_i, w[:, 0:1]), T.mul(fc_j, w[:, 1:2]))
    return F, w


def make_blend_mlp(feat_dim=FEATURE_DIM, width=64, seed=0):
    """3-layer MLP from the two concatenated feature/color vectors to the
    two blend logits."""
    in_dim = 2 * (feat_dim + 3)
    return Mlp([in_dim, width, width, 2], rng=np.random.default_rng(seed),
               name="blend")


def search_correspondence(field, grid, keyframe, x_c, iteration=None):
    """Canonical points -> keyframe feature/color via forward deformation.

    x_c: (N, 3) Tensor.  Returns (f, c, occluded) where occluded also
    covers points whose forward deformation came up empty.
    """
    x_o, _, empty = field.deform_forward(grid, x_c, keyframe.pose, iteration)
    pix, in_front = G.project_points_t(keyframe.camera, x_o)
    f, c, occluded = sample_keyframe(keyframe, pix, in_front & ~empty)
    return f, c, occluded | empty
