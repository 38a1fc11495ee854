import struct

import numpy as np
import pytest

from cdet import microdiff as md
from cdet.errors import DataIOError
from gradcheck import end_to_end_errors, op_check, toy_setup

TOL = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


def conv_oracle(x, w, b, stride):
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def deconv_oracle(x, w):
    n, c, h, wd = x.shape
    out = np.zeros((n, w.shape[1], 2 * h, 2 * wd))
    for i in range(h):
        for j in range(wd):
            for di in range(2):
                for dj in range(2):
                    out[:, :, 2 * i + di, 2 * j + dj] += x[:, :, i, j] @ w[:, :, di, dj]
    return out


@pytest.mark.parametrize("stride,shape", [(1, (2, 3, 5, 6)), (2, (1, 2, 8, 8)), (2, (2, 2, 5, 7))])
def test_conv_forward_matches_loops(stride, shape):
    r = rng(1)
    x = r.standard_normal(shape)
    w = r.standard_normal((4, shape[1], 3, 3))
    b = r.standard_normal(4)
    got = md.conv3x3(md.Tensor(x), md.Tensor(w), md.Tensor(b), stride).value
    assert np.allclose(got, conv_oracle(x, w, b, stride))


def test_deconv_forward_matches_loops():
    r = rng(2)
    x = r.standard_normal((2, 3, 3, 4))
    w = r.standard_normal((3, 5, 2, 2))
    got = md.deconv2x(md.Tensor(x), md.Tensor(w)).value
    assert got.shape == (2, 5, 6, 8)
    assert np.allclose(got, deconv_oracle(x, w))


@pytest.mark.parametrize("stride", [1, 2])
def test_grad_conv3x3(stride):
    r = rng(3)
    arrays = [r.standard_normal((2, 3, 6, 5)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)]
    errs = op_check(lambda x, w, b: md.conv3x3(x, w, b, stride), arrays)
    assert max(errs) < TOL


def test_grad_conv3x3_no_bias():
    r = rng(4)
    arrays = [r.standard_normal((1, 2, 4, 4)), r.standard_normal((3, 2, 3, 3))]
    assert max(op_check(lambda x, w: md.conv3x3(x, w, None), arrays)) < TOL


def test_grad_deconv2x():
    r = rng(5)
    arrays = [r.standard_normal((2, 3, 3, 2)), r.standard_normal((3, 2, 2, 2))]
    assert max(op_check(md.deconv2x, arrays)) < TOL


def test_grad_relu():
    x = rng(6).standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 0.05] = 0.3  # keep away from the kink
    assert max(op_check(md.relu, [x])) < TOL


def test_grad_eltwise_sum():
    r = rng(7)
    arrays = [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))]
    assert max(op_check(md.eltwise_sum, arrays)) < TOL


def test_eltwise_sum_shape_mismatch():
    with pytest.raises(ValueError):
        md.eltwise_sum(md.Tensor(np.zeros((1, 2))), md.Tensor(np.zeros((2, 1))))


def test_grad_softmax():
    x = rng(8).standard_normal((5, 4)) * 3
    assert max(op_check(md.softmax, [x])) < TOL
    v = md.softmax(md.Tensor(x)).value
    assert np.allclose(v.sum(axis=-1), 1.0)


def test_softmax_stable_for_large_logits():
    v = md.softmax_array(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(v)) and v[0, 0] == pytest.approx(1.0)


def test_grad_sigmoid():
    x = rng(9).standard_normal((3, 7)) * 4
    assert max(op_check(md.sigmoid, [x])) < TOL
    assert md.sigmoid(md.Tensor(np.array([-800.0, 800.0]))).value.tolist() == [0.0, 1.0]


def test_grad_l2norm_scale():
    r = rng(10)
    arrays = [r.standard_normal((2, 4, 3, 3)), r.uniform(1, 10, 4)]
    assert max(op_check(md.l2norm_scale, arrays)) < TOL
    out = md.l2norm_scale(md.Tensor(arrays[0]), md.Tensor(np.ones(4))).value
    assert np.allclose(np.sqrt((out**2).sum(axis=1)), 1.0)


def test_l2norm_zero_input_finite():
    out = md.l2norm_scale(md.Tensor(np.zeros((1, 3, 2, 2))), md.Tensor(np.ones(3))).value
    assert np.all(out == 0.0)


def test_grad_to_anchor_layout():
    r = rng(11)
    arrays = [r.standard_normal((2, 6, 4, 4)), r.standard_normal((2, 6, 2, 2))]
    assert max(op_check(lambda a, b: md.to_anchor_layout([a, b], 3), arrays)) < TOL


def test_anchor_layout_order():
    # channel k*per + j of cell (row, col) is field j of anchor k at that cell
    x = np.arange(2 * 6 * 2 * 3, dtype=float).reshape(2, 6, 2, 3)
    out = md.to_anchor_layout([md.Tensor(x)], 3).value
    assert out.shape == (2, 2 * 3 * 2, 3)
    # row 1, col 0, anchor 1 sits at (1 * 3 + 0) * 2 + 1 = 7
    assert out[1, 7].tolist() == x[1, 3:6, 1, 0].tolist()


def test_backward_accumulates_shared_leaf():
    x = md.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = md.eltwise_sum(x, md.relu(x))
    md.backward([y], [np.ones(3)])
    assert x.grad.tolist() == [2.0, 1.0, 2.0]


def test_graph_ops_lists_nodes():
    x = md.Tensor(np.ones((1, 1, 2, 2)))
    w = md.Tensor(np.ones((1, 1, 2, 2)))
    ops = md.graph_ops([md.relu(md.deconv2x(x, w))])
    assert ops.count("deconv2x") == 1 and ops[-1] == "relu"


def _toy_e2e(**kw):
    net, images, anchors, plans = toy_setup(**kw)
    br, errs = end_to_end_errors(net, images, plans, count=20)
    return anchors, br, errs


def test_end_to_end_gradient_eight_anchors():
    anchors, br, errs = _toy_e2e(strides=(8,), ratios=(1.0, 2.0))
    assert len(anchors) == 8
    assert br.n_arm > 0 and br.n_odm > 0
    assert max(errs) < 1e-3


def test_end_to_end_gradient_two_levels():
    anchors, br, errs = _toy_e2e()
    assert len(anchors) == 10
    assert max(errs) < 1e-3


# ---------------------------------------------------------------- parameters


def test_init_is_seeded():
    a, b = md.ParameterStore(), md.ParameterStore()
    for s in (a, b):
        s.add("c.weight", (4, 2, 3, 3), "weight")
        s.add("c.bias", (4,), "bias", 5.0)
        s.add("n.scale", (2,), "scale")
        md.init(s, "xavier", seed=7, scale_inits={"n.scale": 10.0})
    for (_, ta), (_, tb) in zip(a, b):
        assert np.array_equal(ta.value, tb.value)
    assert np.all(a["c.bias"].value == 0) and np.all(a["n.scale"].value == 10)
    bound = np.sqrt(6 / (2 * 9 + 4 * 9))
    assert np.abs(a["c.weight"].value).max() <= bound


def test_fans_transposed():
    assert md.fans((4, 2, 3, 3)) == (18, 36)
    assert md.fans((4, 2, 2, 2), transposed=True) == (16, 8)


def test_unknown_init_scheme():
    s = md.ParameterStore()
    s.add("w", (2, 2), "weight")
    with pytest.raises(ValueError):
        md.init(s, "orthogonal")


def test_sgd_step_formula():
    s = md.ParameterStore(np.float64)
    p = s.add("w", (2,), "weight", 1.0)
    p.grad = np.array([0.5, -1.0])
    md.sgd_step(s, lr=0.1, momentum=0.9, weight_decay=0.01)
    v1 = np.array([0.5, -1.0]) + 0.01
    assert np.allclose(p.value, 1.0 - 0.1 * v1)
    p.grad = np.array([0.0, 0.0])
    before = p.value.copy()
    md.sgd_step(s, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert np.allclose(p.value, before - 0.1 * 0.9 * v1)
    assert p.grad is None


def _store():
    s = md.ParameterStore()
    s.add("a.weight", (3, 2, 3, 3), "weight")
    s.add("a.bias", (3,), "bias")
    s.add("scale", (2,), "scale", 4.0)
    md.init(s, seed=1)
    return s


def test_checkpoint_roundtrip(tmp_path):
    s = _store()
    path = tmp_path / "m.cdet"
    md.save_checkpoint(path, s, {"k": 1})
    cfg, vals = md.load_checkpoint(path)
    assert cfg == {"k": 1}
    assert list(vals) == ["a.weight", "a.bias", "scale"]
    for name, t in s:
        assert vals[name].dtype == np.float32
        assert np.array_equal(vals[name], t.value)


def test_checkpoint_layout(tmp_path):
    s = md.ParameterStore()
    s.add("w", (2,), "weight", 1.5)
    path = tmp_path / "m.cdet"
    md.save_checkpoint(path, s, {})
    raw = path.read_bytes()
    expected = b"CDET" + struct.pack("<II", 1, 2) + b"{}" + struct.pack("<II", 1, 1) + b"w"
    expected += struct.pack("<II", 1, 2) + struct.pack("<2f", 1.5, 1.5)
    assert raw == expected


def test_checkpoint_bytes_deterministic(tmp_path):
    md.save_checkpoint(tmp_path / "a", _store(), {"x": [1, 2]})
    md.save_checkpoint(tmp_path / "b", _store(), {"x": [1, 2]})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.cdet"
    md.save_checkpoint(path, _store())
    data = path.read_bytes()
    (tmp_path / "t").write_bytes(data[:-3])
    with pytest.raises(DataIOError):
        md.load_checkpoint(tmp_path / "t")
    (tmp_path / "bad").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DataIOError):
        md.load_checkpoint(tmp_path / "bad")
    with pytest.raises(DataIOError):
        md.load_checkpoint(tmp_path / "missing")


def test_load_values_checks_shapes():
    s = _store()
    vals = s.values()
    vals["a.bias"] = np.zeros(4)
    with pytest.raises(ValueError):
        s.load_values(vals)
