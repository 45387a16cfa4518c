import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import naf.deformation as D
import naf.geometry as G
from naf.numcore import Tensor
from naf.numcore import tensor as T


def one_bone_setup(seed=0):
    sk = G.Skeleton([-1], np.array([[0.0, 0.8, 0.0]]))
    caps = [(np.array([0.0, 0.5, 0.0]), np.array([0.0, 1.1, 0.0]), 0.15)]
    bounds = (np.array([-0.6, 0.0, -0.6]), np.array([0.6, 1.6, 0.6]))
    vol = D.MotionWeightVolume(1, bounds, seed=seed, capsules=caps)
    nr = D.NonRigidField(pose_dim=0, seed=seed)
    field = D.DeformationField(sk, vol, nr)
    return sk, caps, field


def multi_bone_setup(seed=0, k=3):
    parents = [-1] + list(range(k - 1))
    offsets = np.zeros((k, 3))
    offsets[0, 1] = 0.5
    offsets[1:, 1] = 0.35
    sk = G.Skeleton(parents, offsets)
    caps = D.skeleton_stub_capsules(sk)
    pts = np.concatenate([[a, b] for a, b, _ in caps])
    bounds = (pts.min(axis=0) - 0.4, pts.max(axis=0) + 0.4)
    vol = D.MotionWeightVolume(k, bounds, seed=seed, capsules=caps)
    nr = D.NonRigidField(pose_dim=3 * (k - 1), seed=seed)
    return sk, caps, D.DeformationField(sk, vol, nr)


def surface_points(caps, n_per=300, seed=0, shrink=0.7):
    rng = np.random.default_rng(seed)
    pts = []
    for a, b, r in caps:
        t = rng.random(n_per)[:, None]
        dirs = rng.normal(size=(n_per, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts.append(a + t * (b - a) + shrink * r * dirs * rng.random((n_per, 1)))
    return np.concatenate(pts).astype(np.float32)


# ----------------------------------------------------------------------
def test_weight_volume_nonnegative():
    _, _, field = multi_bone_setup()
    grid = field.volume.generate()
    assert np.all(grid.data >= 0.0)
    assert grid.data.shape[0] == 3


def test_capsule_prior_dominates_at_init():
    # a point deep inside bone i's capsule gets its largest weight from i
    sk, caps, field = multi_bone_setup()
    grid = field.volume.generate()
    for i, (a, b, r) in enumerate(caps):
        mid = (0.5 * (a + b)).astype(np.float32)[None]
        w = field.volume.sample_np(grid.data, mid)[0]
        assert np.argmax(w) == i, (i, w)


def test_simplex_invariant_bulk():
    # normalized backward weights land on the K-simplex for non-empty points
    sk, caps, field = multi_bone_setup(seed=1)
    grid = field.volume.generate()
    rng = np.random.default_rng(0)
    pose = G.Pose(rng.normal(scale=0.25, size=(3, 3)), rng.normal(scale=0.1, size=3))
    lo, hi = field.volume.bounds
    pts = rng.uniform(lo, hi, size=(100_000, 3)).astype(np.float32)
    _, w, empty = field.backward_skeletal(grid, pts, pose)
    wd = w.data[~empty]
    assert wd.size > 0
    assert np.all(wd >= 0.0)
    assert np.allclose(wd.sum(axis=-1), 1.0, atol=1e-5)


def test_single_bone_exact_inverse():
    # one bone: backward then forward is exact up to float32 roundoff,
    # regardless of the weight values (they normalize to 1)
    sk, caps, field = one_bone_setup()
    grid = field.volume.generate()
    rng = np.random.default_rng(0)
    pose = G.Pose(rng.normal(scale=0.6, size=(1, 3)), rng.normal(scale=0.2, size=3))
    x_c = surface_points(caps, n_per=10_000, seed=1)
    bts = G.bone_transforms(sk, pose)
    x_o = ((x_c - bts[0].t) @ bts[0].R).astype(np.float32)  # rigid to obs
    with T.no_grad():
        x_back, _, empty = field.forward_skeletal(
            grid, field.backward_skeletal(grid, x_o, pose)[0], pose)
    err = np.linalg.norm(x_o - x_back.data, axis=1)[~empty]
    assert err.size > 9000
    assert err.max() < 1e-5, err.max()


def test_rest_pose_identity():
    sk, caps, field = multi_bone_setup()
    grid = field.volume.generate()
    pose = G.Pose.rest(3)
    pts = surface_points(caps, n_per=200, seed=2)
    with T.no_grad():
        x_c, _, empty = field.deform_backward(grid, pts, pose, iteration=0)
        x_o, _, empty2 = field.deform_forward(grid, x_c, pose, iteration=0)
    keep = ~(empty | empty2)
    assert np.abs(pts[keep] - x_c.data[keep]).max() < 1e-5
    assert np.abs(pts[keep] - x_o.data[keep]).max() < 1e-5


# ----------------------------------------------------------------------
def test_consistency_threshold_branches():
    # force known cycle distances around theta via a rigid shift
    theta = D.CONSISTENCY_THRESHOLD
    assert theta == 0.05
    for eps in (1e-3,):
        for d_target, expect_active in ((theta - eps, False),
                                        (theta, True),
                                        (theta + eps, True)):
            loss = _loss_at_distance(d_target)
            if expect_active:
                assert abs(loss - d_target) < 1e-4, (d_target, loss)
            else:
                assert loss == 0.0, (d_target, loss)


def _loss_at_distance(d_target):
    """Single point with an exactly controlled cycle distance."""
    sk, caps, field = one_bone_setup()
    grid = field.volume.generate()
    pose = G.Pose.rest(1)
    pt = np.array([[0.0, 0.8, 0.05]], np.float32)

    class ShiftedField(D.DeformationField):
        def deform_forward(self, grid, x_c, pose, iteration=None):
            x_o, w, empty = super().deform_forward(grid, x_c, pose, iteration)
            return T.add(x_o, Tensor(np.array([d_target, 0, 0], np.float32))), w, empty

    f2 = ShiftedField(sk, field.volume, field.nonrigid)
    loss, dvals, viol = f2.consistency_loss(grid, pt, pose, iteration=0)
    assert abs(dvals[0] - d_target) < 1e-6
    return float(loss.data)


def test_consistency_loss_empty_points_excluded():
    sk, caps, field = one_bone_setup()
    grid = field.volume.generate()
    pose = G.Pose.rest(1)
    far = np.array([[55.0, 55.0, 55.0]], np.float32)
    loss, dvals, viol = field.consistency_loss(grid, far, pose, iteration=0)
    assert float(loss.data) == 0.0
    assert not viol.any()


def test_consistency_loss_gradient_reaches_nonrigid():
    sk, caps, field = multi_bone_setup(seed=3)
    # give the non-rigid head something to undo
    rng = np.random.default_rng(0)
    for name, p in field.nonrigid.parameters():
        if name.endswith("w3"):
            p.data += rng.normal(scale=0.004, size=p.data.shape).astype(np.float32)
    grid = field.volume.generate()
    pose = G.Pose(rng.normal(scale=0.3, size=(3, 3)), np.zeros(3))
    pts = surface_points(caps, n_per=100, seed=4)
    loss, dvals, viol = field.consistency_loss(grid, pts, pose, iteration=10 ** 9)
    assert viol.any(), "perturbation should create violations"
    loss.backward()
    grads = [p.grad for n, p in field.nonrigid.parameters() if p.grad is not None]
    assert any(np.abs(g).max() > 0 for g in grads)


def test_nonrigid_warmup_gating():
    nr = D.NonRigidField(pose_dim=3, warmup_iters=100)
    assert not nr.active(0)
    assert not nr.active(99)
    assert nr.active(100)
    assert nr.active(None)  # inference default: enabled


def test_volume_resolution_validation():
    with pytest.raises(ValueError):
        D.MotionWeightVolume(2, (np.zeros(3), np.ones(3)), resolution=24)


def test_theta_validation():
    sk, caps, field = one_bone_setup()
    with pytest.raises(ValueError):
        D.DeformationField(sk, field.volume, field.nonrigid, theta=0.0)


# ----------------------------------------------------------------------
def test_diagnostic_identity_deformation_no_red():
    sk, caps, field = multi_bone_setup()
    grid = field.volume.generate()
    pose = G.Pose.rest(3)
    verts = surface_points(caps, n_per=100, seed=5)
    import naf.synthdata as S
    cam = S.orbit_camera(0.0, np.array([0.0, 0.9, 0.0]), width=64, height=64)
    img, frac = D.vertex_consistency_diagnostic(field, grid, verts, pose, cam)
    assert frac == 0.0
    red = (img[..., 0] > 0.8) & (img[..., 1] < 0.3)
    assert not red.any()


def test_diagnostic_corrupted_forward_shows_red():
    sk, caps, field = multi_bone_setup()
    grid = field.volume.generate()
    pose = G.Pose.rest(3)
    verts = surface_points(caps, n_per=100, seed=5)

    class Corrupt(D.DeformationField):
        def deform_forward(self, grid, x_c, pose, iteration=None):
            x_o, w, empty = super().deform_forward(grid, x_c, pose, iteration)
            return T.add(x_o, Tensor(np.array([0.2, 0, 0], np.float32))), w, empty

    f2 = Corrupt(sk, field.volume, field.nonrigid)
    import naf.synthdata as S
    cam = S.orbit_camera(0.0, np.array([0.0, 0.9, 0.0]), width=64, height=64)
    img, frac = D.vertex_consistency_diagnostic(f2, grid, verts, pose, cam)
    assert frac > 0.5
    red = (img[..., 0] > 0.8) & (img[..., 1] < 0.3)
    assert red.any()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_weights_simplex(seed):
    sk, caps, field = multi_bone_setup(seed=0)
    grid = field.volume.generate()
    r = np.random.default_rng(seed)
    pose = G.Pose(r.normal(scale=0.3, size=(3, 3)), np.zeros(3))
    lo, hi = field.volume.bounds
    pts = r.uniform(lo, hi, size=(500, 3)).astype(np.float32)
    _, w, empty = field.forward_skeletal(grid, pts, pose)
    wd = w.data[~empty]
    if wd.size:
        assert np.all(wd >= 0)
        assert np.allclose(wd.sum(axis=-1), 1.0, atol=1e-5)
