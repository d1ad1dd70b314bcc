import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from stadm import numerics as nx
from stadm.errors import ConfigError, DimensionError, NumericError
from stadm.numerics import Adam, ParamStore, Tensor, grad_check

SEEDS = range(20)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def store_with(rng, **shapes):
    s = ParamStore()
    for name, shape in shapes.items():
        s.add(name, rng.standard_normal(shape))
    return s


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_zero():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(np.eye(2), m).data, m)
    assert np.array_equal(nx.matmul(np.eye(2), np.zeros((2, 1))).data, np.zeros((2, 1)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(nx.matmul(a, b).data, oracles.matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- conv1d_same

def test_conv_ones_kernel():
    out = nx.conv1d_same(Tensor([[1.0, 1, 1, 1]]), Tensor(np.ones((1, 1, 3))), Tensor([0.0]))
    assert out.data.tolist() == [[2.0, 3.0, 3.0, 2.0]]


def test_conv_zero_kernel_gives_bias(rng):
    out = nx.conv1d_same(Tensor(rng.standard_normal((2, 6))), Tensor(np.zeros((3, 2, 5))), Tensor([1.5, -2.0, 0.25]))
    assert np.array_equal(out.data, np.repeat([[1.5], [-2.0], [0.25]], 6, axis=1))


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        nx.conv1d_same(Tensor(np.ones((1, 5))), Tensor(np.ones((1, 1, 4))), Tensor([0.0]))


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_sliding_window(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((3, 7)), rng.standard_normal((2, 3, 5)), rng.standard_normal(2)
    expect = oracles.conv1d_same(x.tolist(), w.tolist(), b.tolist())
    np.testing.assert_allclose(nx.conv1d_same(Tensor(x), Tensor(w), Tensor(b)).data, expect, atol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=finite),
       st.sampled_from([1, 3, 5, 7]))
def test_conv_delta_kernel_is_identity(x, k):
    c = x.shape[0]
    w = np.zeros((c, c, k))
    for i in range(c):
        w[i, i, k // 2] = 1.0
    assert np.array_equal(nx.conv1d_same(Tensor(x), Tensor(w), Tensor(np.zeros(c))).data, x)


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0, 0]])).data, [[1 / 3] * 3], atol=1e-15)
    big = nx.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[1.0, 2, 3]])).data[0], oracles.softmax([1, 2, 3]), atol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax_rows(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.array_equal(nx.layer_norm(Tensor([[3.0, 3.0]]), one, zero).data, [[0.0, 0.0]])
    got = nx.layer_norm(Tensor([[-1.0, 1.0]]), one, zero).data[0]
    np.testing.assert_allclose(got, oracles.layer_norm([-1.0, 1.0], [1, 1], [0, 0]), atol=1e-15)
    assert got[1] == pytest.approx(0.999995, abs=1e-6)
    const = nx.layer_norm(Tensor([[1.0, 5.0]]), Tensor(np.zeros(2)), Tensor([0.7, 0.7])).data
    assert np.array_equal(const, [[0.7, 0.7]])


def test_layer_norm_needs_two_features():
    with pytest.raises(ConfigError):
        nx.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


# ---------------------------------------------------------------- batch norm

def test_batch_norm_examples():
    stats = nx.RunningStats(1)
    one, zero = Tensor([1.0]), Tensor([0.0])
    out = nx.batch_norm(Tensor([[0.0], [2.0]]), one, zero, stats, training=True).data
    np.testing.assert_allclose(out, oracles.batch_norm_train([[0.0], [2.0]], [1], [0]), atol=1e-15)
    np.testing.assert_allclose(out, [[-1.0], [1.0]], atol=1e-5)
    same = nx.batch_norm(Tensor(np.ones((3, 2)) * 4), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                         nx.RunningStats(2), training=True).data
    assert np.array_equal(same, np.zeros((3, 2)))


def test_batch_norm_eval_identity_stats_is_affine(rng):
    x = rng.standard_normal((4, 3))
    gain, shift = rng.standard_normal(3), rng.standard_normal(3)
    out = nx.batch_norm(Tensor(x), Tensor(gain), Tensor(shift), nx.RunningStats(3), training=False).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + nx.BN_EPS) * gain + shift, atol=1e-15)


def test_batch_norm_running_stats_momentum():
    stats = nx.RunningStats(1)
    nx.batch_norm(Tensor([[0.0], [2.0]]), Tensor([1.0]), Tensor([0.0]), stats, training=True)
    assert stats.mean[0] == pytest.approx(0.1)
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * 2.0)  # unbiased batch variance is 2


def test_batch_norm_single_row_train_rejected():
    with pytest.raises(ConfigError):
        nx.batch_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), nx.RunningStats(2), True)


# ---------------------------------------------------------------- attention

def test_fused_attention_matches_formula(rng):
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
    got = nx.attention(Tensor(q), Tensor(k), Tensor(v), 0.5).data
    np.testing.assert_allclose(got, oracles.attention(q.tolist(), k.tolist(), v.tolist(), 0.5), atol=1e-12)


# ---------------------------------------------------------------- grad_check

def test_grad_check_sum_of_squares(rng):
    s = store_with(rng, a=(3, 4), b=(5,))
    err = grad_check(lambda p: nx.tsum(p["a"] * p["a"]) + nx.tsum(p["b"] * p["b"]), s)
    assert err < 1e-7


def test_grad_check_constant_has_zero_gradient(rng):
    s = store_with(rng, a=(2, 2))
    assert grad_check(lambda p: Tensor(3.0) + nx.tsum(p["a"]) * 0.0, s) == 0.0
    assert np.array_equal(s["a"].grad, np.zeros((2, 2)))


def test_grad_check_rejects_non_finite(rng):
    s = store_with(rng, a=(2,))
    with pytest.raises(NumericError):
        grad_check(lambda p: nx.tsum(p["a"]) * np.inf, s)


def _bn_objective(p):
    stats = nx.RunningStats(3)
    y = nx.batch_norm(p["x"], p["g"], p["s"], stats, training=True)
    return nx.tsum(y * p["w"])


# each entry: parameter shapes and a scalar objective exercising one operation
OPS = {
    "add": ({"a": (3, 4), "b": (4,)}, lambda p: nx.tsum((p["a"] + p["b"]) * (p["a"] + p["b"]))),
    "sub": ({"a": (3, 4), "b": (3, 1)}, lambda p: nx.tsum((p["a"] - p["b"]) * (p["a"] - p["b"]))),
    "mul": ({"a": (3, 4), "b": (1, 4)}, lambda p: nx.tsum(p["a"] * p["b"] * p["a"])),
    "relu": ({"a": (4, 5)}, lambda p: nx.tsum(nx.relu(p["a"]) * p["a"])),
    "gelu": ({"a": (4, 5)}, lambda p: nx.tsum(nx.gelu(p["a"]) * p["a"])),
    "matmul": ({"a": (2, 3, 4), "b": (4, 2)}, lambda p: nx.tsum(nx.matmul(p["a"], p["b"]) * nx.matmul(p["a"], p["b"]))),
    "transpose": ({"a": (2, 3, 4), "w": (4, 3, 2)}, lambda p: nx.tsum(nx.transpose(p["a"]) * p["w"] * p["w"])),
    "reshape": ({"a": (2, 6), "w": (3, 4)}, lambda p: nx.tsum(nx.reshape(p["a"], (3, 4)) * nx.reshape(p["a"], (3, 4)) * p["w"])),
    "broadcast": ({"a": (1, 3), "w": (4, 3)}, lambda p: nx.tsum(nx.broadcast_to(p["a"], (4, 3)) * p["w"] * p["a"])),
    "concat": ({"a": (2, 3), "b": (4, 3), "w": (6, 3)},
               lambda p: nx.tsum(nx.concat([p["a"], p["b"]], axis=0) * nx.concat([p["a"], p["b"]], axis=0) * p["w"])),
    "embedding": ({"t": (5, 3), "w": (6, 3)}, lambda p: nx.tsum(nx.embedding(p["t"], [0, 2, 2, 4, 1, 0]) * p["w"] * nx.embedding(p["t"], [0, 2, 2, 4, 1, 0]))),
    "sum_axis": ({"a": (3, 4), "w": (4,)}, lambda p: nx.tsum(nx.tsum(p["a"], axis=0) * nx.tsum(p["a"], axis=0) * p["w"])),
    "mean": ({"a": (3, 4)}, lambda p: nx.mean(p["a"] * p["a"] * p["a"])),
    "mse": ({"a": (3, 4), "b": (3, 4)}, lambda p: nx.mse(p["a"] * p["a"], p["b"])),
    "softmax": ({"a": (3, 5), "w": (3, 5)}, lambda p: nx.tsum(nx.softmax_rows(p["a"]) * p["w"])),
    "layer_norm": ({"x": (3, 5), "g": (5,), "s": (5,), "w": (3, 5)},
                   lambda p: nx.tsum(nx.layer_norm(p["x"], p["g"], p["s"]) * p["w"])),
    "batch_norm": ({"x": (5, 3), "g": (3,), "s": (3,), "w": (5, 3)}, _bn_objective),
    "conv1d": ({"x": (2, 3, 6), "k": (4, 3, 3), "b": (4,), "w": (2, 4, 6)},
               lambda p: nx.tsum(nx.conv1d_same(p["x"], p["k"], p["b"]) * p["w"])),
    "attention": ({"q": (2, 3, 4), "k": (2, 5, 4), "v": (2, 5, 3), "w": (2, 3, 3)},
                  lambda p: nx.tsum(nx.attention(p["q"], p["k"], p["v"], 0.5) * p["w"])),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(OPS))
def test_every_op_passes_grad_check(op, seed):
    shapes, f = OPS[op]
    s = store_with(np.random.default_rng(seed), **shapes)
    assert grad_check(f, s) < 1e-4


# ---------------------------------------------------------------- misc

def test_backward_accumulates_into_leaves(rng):
    s = store_with(rng, a=(3,))
    loss = nx.tsum(s["a"] * 2.0)
    loss.backward()
    np.testing.assert_array_equal(s["a"].grad, 2.0 * np.ones(3))


def test_no_grad_builds_no_graph(rng):
    s = store_with(rng, a=(3,))
    with nx.no_grad():
        out = nx.tsum(s["a"] * s["a"])
    assert not out.requires_grad


def test_forward_is_deterministic(rng):
    s = store_with(rng, x=(3, 5), g=(5,), sh=(5,))
    a = nx.gelu(nx.layer_norm(s["x"], s["g"], s["sh"])).data
    b = nx.gelu(nx.layer_norm(s["x"], s["g"], s["sh"])).data
    assert a.tobytes() == b.tobytes()


def test_param_store_round_trip(rng):
    s = store_with(rng, a=(2, 3))
    stats = s.add_stats("bn", 3)
    stats.mean[:] = [1, 2, 3]
    arrays = s.to_arrays()
    t = ParamStore()
    t.add("a", np.zeros((2, 3)))
    t.add_stats("bn", 3)
    t.load_arrays(arrays)
    assert np.array_equal(t["a"].data, s["a"].data)
    assert np.array_equal(t.state["bn"].mean, [1, 2, 3])
    for path, p in s.items():
        assert p.grad.shape == p.data.shape


def test_param_store_rejects_duplicates():
    s = ParamStore()
    s.add("a", np.zeros(1))
    with pytest.raises(ConfigError):
        s.add("a", np.zeros(1))


def test_adam_minimises_quadratic():
    s = ParamStore()
    s.add("x", np.array([3.0, -2.0]))
    opt = Adam(s, lr=0.1)
    for _ in range(300):
        s.zero_grad()
        nx.tsum(s["x"] * s["x"]).backward()
        opt.step()
    assert np.abs(s["x"].data).max() < 1e-2
