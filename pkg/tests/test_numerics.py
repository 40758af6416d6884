import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from reco import numerics as nx
from reco.numerics import ParameterStore, Tensor, Trace


def leaf(x, name):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


finite = st.floats(-50, 50, allow_nan=False)


# ---------------------------------------------------------------- affine

def test_affine_identity_plus_bias():
    y = nx.affine(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(y.data, [2.0, 3.0])


def test_affine_zero_input_returns_bias():
    W = Tensor(np.random.default_rng(0).normal(size=(2, 2)))
    y = nx.affine(Tensor([0.0, 0.0]), W, Tensor([0.5, -0.5]))
    np.testing.assert_array_equal(y.data, [0.5, -0.5])


def test_affine_matches_scalar_loop():
    rng = np.random.default_rng(3)
    x = [0.3, -1.2, 2.0]
    W = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    expected = [sum(x[i] * W[i, j] for i in range(3)) + b[j] for j in range(2)]
    y = nx.affine(Tensor(x), Tensor(W), Tensor(b))
    np.testing.assert_allclose(y.data, expected, rtol=0, atol=1e-14)


def test_affine_batched_rows_match_unbatched():
    rng = np.random.default_rng(1)
    X, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    Y = nx.affine(Tensor(X), Tensor(W), Tensor(b)).data
    for r in range(4):
        np.testing.assert_allclose(Y[r], nx.affine(Tensor(X[r]), Tensor(W), Tensor(b)).data, atol=1e-14)


@pytest.mark.parametrize("x_shape,w_shape,b_shape", [
    ((3,), (2, 2), (2,)),
    ((2,), (2, 3), (2,)),
    ((2, 2), (3, 2), None),
])
def test_affine_shape_errors_name_both_shapes(x_shape, w_shape, b_shape):
    b = Tensor(np.zeros(b_shape)) if b_shape else None
    with pytest.raises(nx.ShapeError) as err:
        nx.affine(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)), b)
    assert str(x_shape) in str(err.value) or str(w_shape) in str(err.value)


# ---------------------------------------------------------------- elementwise

@pytest.mark.parametrize("op,x,expected", [
    ("sigmoid", 0.0, 0.5),
    ("tanh", 0.0, 0.0),
    ("exp", 0.0, 1.0),
    ("sigmoid", math.log(3), 0.75),
    ("log", 1.0, 0.0),
])
def test_unary_values(op, x, expected):
    y = nx.elementwise(op, Tensor([x]))
    assert abs(y.data[0] - expected) < 1e-12


@pytest.mark.parametrize("op,expected", [("add", 5.0), ("sub", -1.0), ("mul", 6.0), ("div", 2 / 3)])
def test_binary_values(op, expected):
    y = nx.elementwise(op, Tensor([2.0]), Tensor([3.0]))
    assert y.data[0] == pytest.approx(expected, abs=1e-15)


def test_elementwise_arity_checked():
    with pytest.raises(TypeError):
        nx.elementwise("sigmoid", Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(TypeError):
        nx.elementwise("add", Tensor([1.0]))
    with pytest.raises(ValueError):
        nx.elementwise("relu", Tensor([1.0]))


def test_binary_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700)))
def test_sigmoid_tanh_ranges(x):
    s = nx.sigmoid(Tensor(x)).data
    t = nx.tanh(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))
    # strictly inside where the float64 result is representable
    mid = np.abs(x) < 30
    assert np.all((s[mid] > 0) & (s[mid] < 1))
    assert np.all((t[np.abs(x) < 15] > -1) & (t[np.abs(x) < 15] < 1))


# ---------------------------------------------------------------- softmax2

@pytest.mark.parametrize("z,expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([math.log(1), math.log(3)], [0.25, 0.75]),
    ([1000.0, 1000.0], [0.5, 0.5]),
])
def test_softmax2_values(z, expected):
    np.testing.assert_allclose(nx.softmax2(Tensor(z)).data, expected, rtol=0, atol=1e-12)


@given(arrays(np.float64, (3, 2), elements=finite), st.floats(-100, 100))
def test_softmax2_simplex_and_shift_invariance(z, c):
    p = nx.softmax2(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax2(Tensor(z + c)).data, p, atol=1e-12)


def test_softmax2_rejects_bad_input():
    with pytest.raises(nx.ShapeError):
        nx.softmax2(Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(nx.NonFiniteError):
        nx.softmax2(Tensor([np.nan, 0.0]))


# ---------------------------------------------------------------- concat

@pytest.mark.parametrize("a,b,expected", [
    ([1.0], [2.0], [1.0, 2.0]),
    ([1.0, 2.0], [3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0, 5.0]),
])
def test_concat(a, b, expected):
    np.testing.assert_array_equal(nx.concat(Tensor(a), Tensor(b)).data, expected)


def test_concat_rejects_empty_and_mismatched_rows():
    with pytest.raises(nx.ShapeError):
        nx.concat(Tensor(np.zeros(0)), Tensor([1.0]))
    with pytest.raises(nx.ShapeError):
        nx.concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


# ---------------------------------------------------------------- backward

def test_backward_of_sum_is_ones():
    x = leaf([1.0, -2.0, 3.0], "x")
    with Trace() as tape:
        loss = nx.total(x)
    np.testing.assert_array_equal(nx.backward(tape, loss)["x"], [1.0, 1.0, 1.0])


def test_backward_sigmoid_dot_matches_analytic():
    rng = np.random.default_rng(5)
    xv = rng.normal(size=4)
    w = leaf(rng.normal(size=(4, 1)), "w")
    with Trace() as tape:
        loss = nx.total(nx.sigmoid(nx.affine(Tensor(xv), w)))
    s = 1 / (1 + np.exp(-(xv @ w.data[:, 0])))
    np.testing.assert_allclose(nx.backward(tape, loss)["w"][:, 0], s * (1 - s) * xv, rtol=1e-12)


def test_backward_accumulates_reused_tensor():
    x = leaf([2.0], "x")
    with Trace() as tape:
        loss = nx.total(nx.mul(x, x))
    assert nx.backward(tape, loss)["x"][0] == pytest.approx(4.0)


def test_backward_requires_scalar_on_same_trace():
    x = leaf([1.0, 2.0], "x")
    with Trace() as tape:
        y = nx.exp(x)
    with pytest.raises(nx.ShapeError):
        nx.backward(tape, y)
    with Trace() as other:
        loss = nx.total(nx.exp(x))
    with pytest.raises(ValueError):
        nx.backward(tape, loss)
    assert nx.backward(other, loss)["x"] == pytest.approx(np.exp([1.0, 2.0]))


def test_two_traces_do_not_interfere():
    x = leaf([0.5], "x")
    with Trace() as t1:
        l1 = nx.total(nx.square(x))
    with Trace() as t2:
        l2 = nx.total(nx.exp(x))
    assert len(t1) == 2 and len(t2) == 2
    assert nx.backward(t1, l1)["x"][0] == pytest.approx(1.0)
    assert nx.backward(t2, l2)["x"][0] == pytest.approx(math.exp(0.5))


def test_no_trace_records_nothing():
    x = leaf([1.0], "x")
    y = nx.tanh(x)
    assert y.trace_id is None


def test_store_backward_gives_zeros_for_unused():
    store = ParameterStore()
    rng = np.random.default_rng(0)
    store.init_linear("a", 2, 2, rng)
    store.init_linear("b", 2, 2, rng)
    with Trace() as tape:
        loss = nx.total(nx.affine(Tensor([1.0, 1.0]), store["a.W"], store["a.b"]))
    g = nx.backward(tape, loss, store)
    assert set(g) == {"a.W", "a.b", "b.W", "b.b"}
    assert not g["b.W"].any()


def test_determinism_bit_identical():
    rng = np.random.default_rng(2)
    xv, wv = rng.normal(size=3), rng.normal(size=(3, 2))

    def run():
        w = leaf(wv, "w")
        with Trace() as tape:
            loss = nx.total(nx.tanh(nx.affine(Tensor(xv), w)))
        return loss.item(), nx.backward(tape, loss)["w"]

    (a, ga), (b, gb) = run(), run()
    assert a == b and np.array_equal(ga, gb)


def test_non_grad_tensors_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# ---------------------------------------------------------------- gradient property

OPS = {
    "sigmoid": nx.sigmoid, "tanh": nx.tanh, "exp": nx.exp, "square": nx.square,
    "log_softplus": lambda a: nx.log(nx.add(nx.exp(a), Tensor(np.ones(a.shape)))),
}


@pytest.mark.parametrize("op", sorted(OPS))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_composed_gradients_match_finite_diff(op, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("W", rng.uniform(-0.5, 0.5, size=(3, 2)))
    store.add("b", rng.uniform(-0.5, 0.5, size=2))
    x = Tensor(rng.uniform(-1, 1, size=3))

    def forward(s):
        h = OPS[op](nx.affine(x, s["W"], s["b"]))
        return nx.total(nx.softmax2(h) if h.shape == (2,) else h)

    with Trace() as tape:
        loss = forward(store)
    g = nx.backward(tape, loss, store)
    fd = nx.finite_diff(lambda s: forward(s).item(), store)
    for name in ("W", "b"):
        assert nx.rel_error(g[name], fd[name]).max() < 1e-4


# ---------------------------------------------------------------- finite_diff

def test_finite_diff_square():
    store = ParameterStore()
    store.add("t", [3.0])
    res = nx.finite_diff(lambda s: float(s["t"].data[0] ** 2), store, h=1e-4)
    assert abs(res["t"][0] - 6.0) < 1e-7
    assert res.nonsmooth["t"] == []
    assert store["t"].data[0] == 3.0  # restored


def test_finite_diff_flags_kink_of_abs():
    store = ParameterStore()
    store.add("t", [0.0])
    res = nx.finite_diff(lambda s: abs(float(s["t"].data[0])), store)
    assert res["t"][0] == 0.0
    assert res.nonsmooth["t"] == [0]


def test_finite_diff_rejects_non_finite():
    store = ParameterStore()
    store.add("t", [0.0])
    with pytest.raises(nx.NonFiniteError):
        nx.finite_diff(lambda s: float("nan"), store)
    with pytest.raises(ValueError):
        nx.finite_diff(lambda s: 0.0, store, h=0.0)


def test_rel_error_definition():
    np.testing.assert_allclose(nx.rel_error([0.0, 10.0], [1e-5, 11.0]), [1e-5, 1 / 11])


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_from_fresh_state_keeps_params():
    store = ParameterStore()
    store.add("t", [1.0, -2.0])
    for _ in range(3):
        nx.adam_step(store, {"t": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(store["t"].data, [1.0, -2.0])
    assert store.entry("t").step == 3


def test_adam_zero_gradient_decays_moments():
    store = ParameterStore()
    store.add("t", [1.0, -2.0])
    e = store.entry("t")
    e.m[:] = 0.5
    e.v[:] = 0.25
    nx.adam_step(store, {"t": np.zeros(2)}, lr=0.1)
    np.testing.assert_allclose(e.m, [0.45, 0.45])
    np.testing.assert_allclose(e.v, [0.24975, 0.24975])


def test_adam_first_step_moves_by_lr():
    store = ParameterStore()
    store.add("t", [0.0])
    nx.adam_step(store, {"t": np.ones(1)}, lr=0.1)
    assert store["t"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def _scalar_adam(theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def test_adam_quadratic_trajectory():
    store = ParameterStore()
    store.add("t", [1.0])
    traj = []
    for _ in range(100):
        nx.adam_step(store, {"t": 2 * store["t"].data}, lr=0.1)
        traj.append(store["t"].data[0])
    np.testing.assert_allclose(traj, _scalar_adam(1.0, 100, 0.1), rtol=0, atol=1e-12)
    # recorded: steady descent for ten steps, a damped overshoot, then |theta| < 0.05
    assert traj[0] == pytest.approx(0.9000000005, abs=1e-12)
    assert traj[99] == pytest.approx(0.002936675681102579, abs=1e-12)
    assert all(abs(traj[i + 1]) < abs(traj[i]) for i in range(10))
    assert max(abs(t) for t in traj) < 1.0
    assert max(abs(t) for t in traj[60:]) < 0.05


def test_adam_rejects_unknown_and_misshaped():
    store = ParameterStore()
    store.add("t", [0.0, 0.0])
    with pytest.raises(KeyError):
        nx.adam_step(store, {"u": np.zeros(2)}, lr=0.1)
    with pytest.raises(nx.ShapeError):
        nx.adam_step(store, {"t": np.zeros(3)}, lr=0.1)


def test_init_linear_ranges_and_zero_bias():
    store = ParameterStore()
    store.init_linear("lin", 16, 4, np.random.default_rng(0))
    W = store["lin.W"].data
    assert W.shape == (16, 4) and np.abs(W).max() <= 1 / math.sqrt(16)
    assert not store["lin.b"].data.any()
    with pytest.raises(KeyError):
        store.init_linear("lin", 16, 4, np.random.default_rng(0))


def test_store_copy_is_independent():
    store = ParameterStore()
    store.add("t", [1.0])
    dup = store.copy()
    store["t"].data[0] = 2.0
    assert dup["t"].data[0] == 1.0
    assert store.size() == 1
