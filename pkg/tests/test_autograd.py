import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rcn import autograd as ag
from rcn.autograd import ParamStore, Tensor, backward, no_grad, read_checkpoint, sgd_step, write_checkpoint
from rcn.errors import FormatError, InvalidArgument, InvalidState

from oracles import conv2d_loop, fc_loop, gradcheck, maxpool_loop


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_zero_input_gives_zero():
    out = ag.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), 1, 1)
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 0)


def test_conv2d_constant_sum():
    out = ag.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (2, 0)])
def test_conv2d_matches_loop(rng, stride, pad):
    h = 5 if (5 + 2 * pad - 3) % stride == 0 else 6
    x = rng.uniform(-1, 1, (2, 2, h, h))
    k = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    out = ag.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
    assert np.max(np.abs(out - conv2d_loop(x, k, b, stride, pad))) <= 1e-12


def test_conv2d_rejects_bad_geometry():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(InvalidArgument):
        ag.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), None, 2, 0)  # (4-3)/2 not integral
    with pytest.raises(InvalidArgument):
        ag.conv2d(x, Tensor(np.zeros((1, 1, 7, 7))), None, 1, 1)
    with pytest.raises(InvalidArgument):
        ag.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), None, 1, 1)
    with pytest.raises(InvalidArgument):
        ag.conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)), 1, 1)


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 2, 5, 5))
    k = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    err = gradcheck(lambda a, w, c: ag.conv2d(a, w, c, 2, 1), [x, k, b], rng)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# fully connected


def test_fc_identity_and_zero_map(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(ag.fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = rng.standard_normal(2)
    out = ag.fully_connected(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(b)).data
    assert np.array_equal(out, np.tile(b, (3, 1)))


def test_fc_matches_loop(rng):
    x, w, b = rng.uniform(-1, 1, (2, 4)), rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, 3)
    assert np.max(np.abs(ag.fully_connected(Tensor(x), Tensor(w), Tensor(b)).data - fc_loop(x, w, b))) <= 1e-12


def test_fc_shape_mismatch():
    with pytest.raises(InvalidArgument):
        ag.fully_connected(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# pooling


def test_maxpool_basic():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = ag.max_pool2d(x, 2, 2)
    assert out.data.item() == 4.0


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.full((1, 1, 4, 4), 7.0), requires_grad=True)
    out = ag.max_pool2d(x, 2, 2)
    assert np.all(out.data == 7.0)
    backward(ag.sum(out))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    assert np.array_equal(x.grad[0, 0], expected)


def test_maxpool_matches_loop(rng):
    x = rng.uniform(-1, 1, (1, 1, 6, 6))
    assert np.array_equal(ag.max_pool2d(Tensor(x), 2, 2).data, maxpool_loop(x, 2, 2))


def test_maxpool_rejects_small_input():
    with pytest.raises(InvalidArgument):
        ag.max_pool2d(Tensor(np.zeros((1, 1, 1, 3))), 2, 2)


# ---------------------------------------------------------------------------
# pointwise


def test_sigmoid_at_zero():
    assert np.all(ag.sigmoid(Tensor(np.zeros(5))).data == 0.5)


def test_hadamard_identity(rng):
    x = rng.standard_normal((3, 2))
    assert np.array_equal(ag.pointwise("hadamard", Tensor(x), Tensor(np.ones((3, 2)))).data, x)


def test_pointwise_shape_mismatch():
    with pytest.raises(InvalidArgument):
        ag.pointwise("add", Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(InvalidArgument):
        ag.pointwise("softmax", Tensor(np.zeros(3)))


@pytest.mark.parametrize("kind", ["tanh", "sigmoid"])
def test_activation_gradcheck(rng, kind):
    x = rng.uniform(-3, 3, (4, 5))
    assert gradcheck(lambda a: ag.pointwise(kind, a), [x], rng) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_activation_open_interval(x):
    s = ag.sigmoid(Tensor(x)).data
    t = ag.tanh(Tensor(x)).data
    assert np.all((s > 0) & (s < 1))
    assert np.all((t > -1) & (t < 1))


# ---------------------------------------------------------------------------
# loss


def test_sce_examples():
    assert ag.sigmoid_cross_entropy(Tensor([0.0]), Tensor([1.0])).data == pytest.approx(math.log(2), abs=1e-12)
    v = float(ag.sigmoid_cross_entropy(Tensor([20.0]), Tensor([1.0])).data)
    assert math.isfinite(v) and v < 1e-8
    v = float(ag.sigmoid_cross_entropy(Tensor([-800.0]), Tensor([1.0])).data)
    assert v == pytest.approx(800.0)


def test_sce_rejects_soft_labels():
    with pytest.raises(InvalidArgument):
        ag.sigmoid_cross_entropy(Tensor([0.0, 1.0]), Tensor([0.5, 1.0]))


def test_sce_gradcheck(rng):
    z = rng.uniform(-5, 5, 8)
    y = (rng.random(8) < 0.5).astype(float)
    assert gradcheck(lambda a: ag.sigmoid_cross_entropy(a, Tensor(y)), [z], rng) < 1e-6


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_and_square(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    backward(ag.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    backward(ag.sum(ag.hadamard(x, x)))
    assert np.allclose(x.grad, 2 * x.data, atol=0, rtol=1e-15)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(InvalidArgument):
        backward(ag.scale(x, 2.0))


def test_backward_shared_parent_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ag.add(ag.hadamard(x, x), ag.scale(x, 3.0))
    backward(ag.sum(y))
    assert np.array_equal(x.grad, 2 * x.data + 3.0)


def test_graph_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    loss = ag.sum(ag.tanh(ag.add(x, x)))
    g = ag.build_graph(loss)
    pos = {nid: i for i, nid in enumerate(g.order)}
    for node in g.nodes:
        assert all(pos[i] < pos[node.output] for i in node.inputs)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ag.tanh(x)
    assert not y.requires_grad and y.parents == ()


def test_backward_deterministic(rng):
    x0 = rng.standard_normal((1, 2, 6, 6))
    k0 = rng.standard_normal((3, 2, 3, 3))
    grads = []
    for _ in range(2):
        x, k = Tensor(x0, requires_grad=True), Tensor(k0, requires_grad=True)
        out = ag.max_pool2d(ag.relu(ag.conv2d(x, k, None, 1, 1)), 2)
        backward(ag.sum(ag.hadamard(out, out)))
        grads.append((x.grad.tobytes(), k.grad.tobytes()))
    assert grads[0] == grads[1]


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_plain_step():
    ps = ParamStore()
    p = ps.add("w", np.array(0.0))
    p.grad = np.array(1.0)
    sgd_step(ps, 0.1, momentum=0.0)
    assert p.data == pytest.approx(-0.1, abs=0)
    assert p.grad is None


def test_sgd_frozen_untouched():
    ps = ParamStore()
    a = ps.add("a", np.array([1.0, 2.0]))
    b = ps.add("b", np.array([3.0]))
    ps.freeze("a")
    a.grad, b.grad = np.array([5.0, 5.0]), np.array([1.0])
    before = a.data.tobytes()
    sgd_step(ps, 0.5)
    assert a.data.tobytes() == before
    assert b.data[0] == 2.5


def test_sgd_momentum_unrolled():
    ps = ParamStore()
    p = ps.add("w", np.array([1.0]))
    g1, g2, lr, mu = 0.3, -0.7, 0.05, 0.9
    p.grad = np.array([g1])
    sgd_step(ps, lr, mu)
    p.grad = np.array([g2])
    sgd_step(ps, lr, mu)
    v1 = g1
    v2 = mu * v1 + g2
    expected = 1.0 - lr * v1 - lr * v2
    assert p.data[0] == expected


def test_sgd_errors():
    ps = ParamStore()
    ps.add("w", np.zeros(2))
    with pytest.raises(InvalidState):
        sgd_step(ps, 0.1)
    ps["w"].grad = np.zeros(2)
    with pytest.raises(InvalidArgument):
        sgd_step(ps, 0.0)
    with pytest.raises(InvalidArgument):
        ps.add("w", np.zeros(1))


# ---------------------------------------------------------------------------
# checkpoint format


def _store(rng):
    ps = ParamStore()
    ps.add("a/w", rng.standard_normal((2, 3)))
    ps.add("b", rng.standard_normal(4), frozen=True)
    return ps


def test_checkpoint_roundtrip_bitexact(tmp_path, rng):
    ps = _store(rng)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    write_checkpoint(p1, ps, meta={"x": 1})
    header, arrays = read_checkpoint(p1)
    assert header["meta"] == {"x": 1}
    assert [e["frozen"] for e in header["params"]] == [False, True]
    from rcn.autograd.params import params_from_checkpoint

    write_checkpoint(p2, params_from_checkpoint(header, arrays), meta={"x": 1})
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:4] == b"RCN1"


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version", "json"])
def test_checkpoint_corruption(tmp_path, rng, damage):
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, _store(rng))
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "truncate":
        raw = raw[:-5]
    elif damage == "trailing":
        raw += b"\0" * 8
    elif damage == "version":
        raw = bytearray(bytes(raw).replace(b'"format_version":1', b'"format_version":9'))
    else:
        raw[14] = ord("}")
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_checkpoint(p)


def test_index_repeated_entries_accumulate():
    a = Tensor(np.arange(4.0), requires_grad=True)
    backward(ag.sum(ag.index(a, [1, 1, 3])))
    assert a.grad.tolist() == [0.0, 2.0, 0.0, 1.0]
