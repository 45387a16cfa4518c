import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from naf.numcore import (Adam, CheckpointError, Mlp, Tensor, grad_check,
                         load_checkpoint, no_grad, save_checkpoint)
from naf.numcore import tensor as T
from naf.numcore import convs


def numeric_grad(f, x, h=1e-2):
    # h sized against float32 roundoff in the forward pass
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, x_data, tol=5e-3):
    """build(Tensor) -> scalar Tensor; compares backward vs central diff."""
    x = Tensor(x_data.copy(), requires_grad=True)
    out = build(x)
    out.backward()
    num = numeric_grad(lambda: float(build(Tensor(x.data)).data), x.data)
    denom = np.maximum(np.abs(num), 1e-2)
    err = np.max(np.abs(x.grad - num) / denom)
    assert err < tol, f"max rel grad err {err}"


rng = np.random.default_rng(0)


@pytest.mark.parametrize("op", [
    lambda x: T.tsum(T.square(x)),
    lambda x: T.tsum(T.exp(T.mul(x, 0.3))),
    lambda x: T.tsum(T.sigmoid(x)),
    lambda x: T.tsum(T.softplus(x)),
    lambda x: T.tsum(T.relu(T.add(x, 0.05))),
    lambda x: T.tsum(T.sqrt(T.add(T.square(x), 0.5))),
    lambda x: T.tsum(T.mul(T.sin(x), T.cos(x))),
    lambda x: T.tmean(T.softmax(x, axis=-1)[:, 0:1]) if x.data.ndim == 2
    else T.tsum(x),
])
def test_elementwise_grads(op):
    check_op(op, rng.normal(size=(5, 4)).astype(np.float32))


def test_matmul_grad():
    w = rng.normal(size=(4, 3)).astype(np.float32)
    check_op(lambda x: T.tsum(T.square(T.matmul(x, Tensor(w)))),
             rng.normal(size=(5, 4)).astype(np.float32))


def test_broadcast_add_grad():
    b = Tensor(rng.normal(size=(1, 4)).astype(np.float32), requires_grad=True)
    x = Tensor(rng.normal(size=(6, 4)).astype(np.float32))
    out = T.tsum(T.square(T.add(x, b)))
    out.backward()
    num = numeric_grad(lambda: float(T.tsum(T.square(T.add(x, Tensor(b.data)))).data),
                       b.data)
    assert np.allclose(b.grad, num, atol=1e-2, rtol=1e-2)


def test_scatter_take_roundtrip_grad():
    idx = np.array([1, 3, 4])
    check_op(lambda x: T.tsum(T.square(T.scatter_rows(x, idx, 7))),
             rng.normal(size=(3, 2)).astype(np.float32))
    check_op(lambda x: T.tsum(T.square(T.take(x, idx))),
             rng.normal(size=(6, 2)).astype(np.float32))


def test_backward_requires_scalar():
    x = Tensor(np.ones((3, 2), np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        T.square(x).backward()


def test_double_backward_raises():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    out = T.tsum(x)
    out.backward()
    with pytest.raises(RuntimeError):
        out.backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with no_grad():
        y = T.tsum(T.square(x))
    assert y._backprop is None and not y.requires_grad


# ----------------------------------------------------------------------
# trilinear/bilinear sampling: corner-average oracle and gradient checks

def test_grid_sample_3d_center_oracle():
    vol = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    # midpoint of a cell is the mean of its 8 corners
    pt = np.array([[0.5, 0.5, 0.5]], np.float32)
    out = T.grid_sample_3d(Tensor(vol), Tensor(pt))
    expect = vol[:, 0:2, 0:2, 0:2].reshape(2, -1).mean(axis=1)
    assert np.allclose(out.data[0], expect, atol=1e-6)
    # exact lattice points return the stored values
    pt = np.array([[1.0, 2.0, 0.0]], np.float32)
    out = T.grid_sample_3d(Tensor(vol), Tensor(pt))
    assert np.allclose(out.data[0], vol[:, 1, 2, 0], atol=1e-6)


def test_grid_sample_3d_zero_outside():
    vol = np.ones((1, 3, 3, 3), np.float32)
    pts = np.array([[-1.5, 1.0, 1.0], [1.0, 1.0, 5.0]], np.float32)
    out = T.grid_sample_3d(Tensor(vol), Tensor(pts))
    assert np.allclose(out.data, 0.0)


def test_grid_sample_grads_values_and_coords():
    vol = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    pts = (rng.random((6, 3)) * 2.4 + 0.3).astype(np.float32)

    check_op(lambda v: T.tsum(T.square(T.grid_sample_3d(v, Tensor(pts)))), vol)
    check_op(lambda p: T.tsum(T.square(T.grid_sample_3d(Tensor(vol), p))), pts)


def test_grid_sample_2d_oracle_and_grads():
    img = rng.normal(size=(3, 5, 5)).astype(np.float32)
    pt = np.array([[2.0, 3.0]], np.float32)  # (x, y) exact pixel
    out = T.grid_sample_2d(Tensor(img), Tensor(pt))
    assert np.allclose(out.data[0], img[:, 3, 2], atol=1e-6)
    pts = (rng.random((5, 2)) * 3.4 + 0.3).astype(np.float32)
    check_op(lambda i: T.tsum(T.square(T.grid_sample_2d(i, Tensor(pts)))), img)
    check_op(lambda p: T.tsum(T.square(T.grid_sample_2d(Tensor(img), p))), pts)


# ----------------------------------------------------------------------
def test_mlp_grad_check():
    net = Mlp([3, 8, 8, 2], rng=np.random.default_rng(1), name="t")
    x = rng.normal(size=(4, 3)).astype(np.float32)

    def loss_fn():
        return T.tmean(T.square(net(Tensor(x))))

    err = grad_check(loss_fn, net.parameters(), h=1e-2)
    assert err < 1e-3, err


def test_conv2d_identity_init():
    w = convs.identity_conv_weight(3, 3, 3, np.random.default_rng(0),
                                   noise=0.0, spatial_dims=2)
    x = rng.normal(size=(3, 6, 6)).astype(np.float32)
    y = convs.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3, np.float32)))
    assert np.allclose(y.data, x, atol=1e-6)


def test_conv3d_matches_direct_convolution():
    from scipy import ndimage
    cin, k, n = 2, 3, 5
    wt = rng.normal(size=(cin * k ** 3, 1)).astype(np.float32)
    x = rng.normal(size=(cin, n, n, n)).astype(np.float32)
    y = convs.conv3d(Tensor(x), Tensor(wt), Tensor(np.zeros(1, np.float32)))
    # oracle: sum of per-channel correlate with zero padding
    kern = wt.reshape(cin, k, k, k)
    expect = sum(ndimage.correlate(x[c], kern[c], mode="constant")
                 for c in range(cin))
    assert np.allclose(y.data[0], expect, atol=1e-4)


def test_adam_quadratic_convergence():
    x = Tensor(np.array([4.0, -3.0], np.float32), requires_grad=True)
    opt = Adam([{"name": "g", "params": [("x", x)], "lr": 0.2}])
    for _ in range(300):
        loss = T.tsum(T.square(x))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-3


def test_adam_flags_nonfinite_gradient():
    x = Tensor(np.array([1.0], np.float32), requires_grad=True)
    opt = Adam([{"name": "g", "params": [("x", x)], "lr": 0.1}])
    x.grad = np.array([np.nan], np.float32)
    with pytest.raises(FloatingPointError, match="x"):
        opt.step()


def test_checkpoint_roundtrip(tmp_path):
    path = str(tmp_path / "ck.naf")
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
               "b": np.array([1.5], np.float32)}
    save_checkpoint(path, list(tensors.items()), extra={"iteration": 7})
    header, loaded = load_checkpoint(path)
    assert header["extra"]["iteration"] == 7
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.naf"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_truncated(tmp_path):
    path = str(tmp_path / "ck.naf")
    save_checkpoint(path, [("a", np.ones(100, np.float32))])
    data = open(path, "rb").read()
    trunc = tmp_path / "trunc.naf"
    trunc.write_bytes(data[:-50])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(trunc))


# ----------------------------------------------------------------------
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(scale=3.0, size=(4, 5)).astype(np.float32))
    s = T.softmax(x, axis=-1).data
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_grid_sample_3d_convex_bounds(seed):
    r = np.random.default_rng(seed)
    vol = r.random((1, 4, 4, 4)).astype(np.float32)
    pts = (r.random((16, 3)) * 3).astype(np.float32)
    out = T.grid_sample_3d(Tensor(vol), Tensor(pts)).data
    assert np.all(out >= vol.min() - 1e-6)
    assert np.all(out <= vol.max() + 1e-6)
