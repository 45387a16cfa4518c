import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

import naf.geometry as G
from naf.numcore import Tensor


def chain_skeleton(k=3, seg=0.4):
    parents = [-1] + list(range(k - 1))
    offsets = np.zeros((k, 3))
    offsets[1:, 1] = seg
    return G.Skeleton(parents, offsets)


# ----------------------------------------------------------------------
@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rodrigues_matches_scipy(seed):
    r = np.random.default_rng(seed)
    omega = r.normal(scale=2.0, size=3)
    R = G.axis_angle_to_rotation(omega)
    assert np.allclose(R, Rotation.from_rotvec(omega).as_matrix(), atol=1e-8)


def test_rodrigues_small_angle_stable():
    for scale in (1e-6, 1e-9, 0.0):
        omega = np.array([scale, 0.0, 0.0])
        R = G.axis_angle_to_rotation(omega)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.allclose(R, Rotation.from_rotvec(omega).as_matrix(),
                           atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rotation_angle_recovers_magnitude(seed):
    r = np.random.default_rng(seed)
    axis = r.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = r.uniform(0.01, np.pi - 0.01)
    R = G.axis_angle_to_rotation(axis * ang)
    assert abs(G.rotation_angle(R) - ang) < 1e-8


# ----------------------------------------------------------------------
def test_fk_identity_at_rest():
    sk = chain_skeleton(4)
    R_w, t_w = G.forward_kinematics(sk, G.Pose.rest(4))
    assert np.allclose(R_w, np.eye(3)[None], atol=1e-12)
    assert np.allclose(t_w, 0.0, atol=1e-12)


def test_fk_root_translation_only():
    sk = chain_skeleton(3)
    pose = G.Pose(np.zeros((3, 3)), np.array([0.3, -0.1, 0.7]))
    pts = G.posed_joint_positions(sk, pose)
    rest = sk.rest_joint_positions()
    assert np.allclose(pts, rest + pose.root_translation, atol=1e-12)


def test_fk_composition_oracle():
    # two-bone chain, rotate root by 90deg around z: child joint at
    # rest (0, L, 0) must land at (-L, 0, 0) + root
    sk = chain_skeleton(2, seg=0.5)
    rot = np.array([[0.0, 0.0, np.pi / 2], [0.0, 0.0, 0.0]])
    pose = G.Pose(rot, np.array([1.0, 0.0, 0.0]))
    pts = G.posed_joint_positions(sk, pose)
    assert np.allclose(pts[0], [1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(pts[1], [0.5, 0.0, 0.0], atol=1e-12)


def test_fk_matches_manual_chain_composition():
    # brute-force oracle: accumulate 4x4 matrices independently
    rng = np.random.default_rng(3)
    k = 5
    parents = [-1, 0, 1, 1, 3]
    offsets = rng.normal(scale=0.3, size=(k, 3))
    offsets[0] = [0.0, 0.8, 0.0]
    sk = G.Skeleton(parents, offsets)
    pose = G.Pose(rng.normal(scale=0.7, size=(k, 3)), rng.normal(size=3))

    mats = [None] * k
    for i in range(k):
        local = np.eye(4)
        local[:3, :3] = Rotation.from_rotvec(pose.joint_rotations[i]).as_matrix()
        local[:3, 3] = offsets[i] + (pose.root_translation if parents[i] < 0 else 0)
        mats[i] = local if parents[i] < 0 else mats[parents[i]] @ local
    expected = np.stack([m[:3, 3] for m in mats])
    assert np.allclose(G.posed_joint_positions(sk, pose), expected, atol=1e-10)


def test_bone_transforms_invert_fk():
    rng = np.random.default_rng(5)
    sk = chain_skeleton(4)
    pose = G.Pose(rng.normal(scale=0.8, size=(4, 3)), rng.normal(size=3))
    R_w, t_w = G.forward_kinematics(sk, pose)
    bts = G.bone_transforms(sk, pose)
    x = rng.normal(size=(10, 3))
    for i, bt in enumerate(bts):
        posed = x @ R_w[i].T + t_w[i]
        assert np.allclose(bt.apply(posed), x, atol=1e-10)
        assert np.allclose(bt.inverse_apply(x), posed, atol=1e-10)


def test_pose_distance_symmetric_and_zero():
    rng = np.random.default_rng(1)
    a = G.Pose(rng.normal(scale=0.5, size=(4, 3)), np.zeros(3))
    b = G.Pose(rng.normal(scale=0.5, size=(4, 3)), np.zeros(3))
    assert G.pose_distance(a, a) < 1e-6  # arccos noise near trace 3
    assert abs(G.pose_distance(a, b) - G.pose_distance(b, a)) < 1e-12
    assert G.pose_distance(a, b) > 0


def test_pose_mismatched_joints_raises():
    sk = chain_skeleton(3)
    with pytest.raises(ValueError):
        G.forward_kinematics(sk, G.Pose.rest(5))


# ----------------------------------------------------------------------
def simple_camera(w=64, h=64, f=80.0):
    K = np.array([[f, 0, (w - 1) / 2], [0, f, (h - 1) / 2], [0, 0, 1.0]])
    E = np.concatenate([np.eye(3), np.array([[0.0], [0.0], [2.0]])], axis=1)
    return G.Camera(K, E, w, h)


def test_projection_center():
    cam = simple_camera()
    uv = G.project_point(cam, np.array([0.0, 0.0, 1.0]))
    assert np.allclose(uv, [(cam.width - 1) / 2, (cam.height - 1) / 2])


def test_projection_behind_camera_raises():
    cam = simple_camera()
    with pytest.raises(G.BehindCameraError):
        G.project_point(cam, np.array([0.0, 0.0, -3.0]))


def test_project_points_valid_mask():
    cam = simple_camera()
    xs = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -3.0]])
    uv, valid = G.project_points(cam, xs)
    assert valid.tolist() == [True, False]


def test_project_points_tensor_twin():
    cam = simple_camera()
    rng = np.random.default_rng(2)
    xs = rng.normal(scale=0.3, size=(8, 3)) + [0, 0, 0.5]
    uv, valid = G.project_points(cam, xs)
    uv_t, valid_t = G.project_points_t(cam, Tensor(xs.astype(np.float32)))
    assert np.array_equal(valid, valid_t)
    assert np.allclose(uv[valid], uv_t.data[valid], atol=1e-3)


# ----------------------------------------------------------------------
def test_positional_encoding_layout():
    x = np.array([[0.2, -0.4, 1.0]])
    L = 3
    enc = G.positional_encoding(x, L)
    assert enc.shape == (1, 6 * L)
    # per-frequency blocks: [sin(2^l pi x), cos(2^l pi x)] over the 3 coords
    for l in range(L):
        s = 2.0 ** l * np.pi
        blk = enc[0, 6 * l: 6 * l + 6]
        assert np.allclose(blk[:3], np.sin(s * x[0]), atol=1e-6)
        assert np.allclose(blk[3:], np.cos(s * x[0]), atol=1e-6)


def test_positional_encoding_twins_agree():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 3)).astype(np.float32)
    a = G.positional_encoding(x, 5)
    b = G.positional_encoding_t(Tensor(x), 5).data
    assert np.allclose(a, b, atol=1e-5)


def test_pose_json_roundtrip():
    rng = np.random.default_rng(6)
    pose = G.Pose(rng.normal(size=(4, 3)), rng.normal(size=3))
    back = G.Pose.from_json(pose.to_json())
    assert np.allclose(back.joint_rotations, pose.joint_rotations)
    assert np.allclose(back.root_translation, pose.root_translation)
