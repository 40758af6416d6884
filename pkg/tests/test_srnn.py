import math

import numpy as np
import pytest

from reco import numerics as nx
from reco import srnn
from reco.numerics import ParameterStore, Tensor, Trace
from reco.srnn import SrnnInput, srnn_forward, srnn_step

M = 4


def make_store(m=M, seed=0, bias=True):
    s = ParameterStore()
    srnn.init_params(s, m, np.random.default_rng(seed))
    if bias:
        r = np.random.default_rng(seed + 100)
        for name in s.names():
            if name.endswith(".b"):
                s[name].data[...] = r.uniform(-0.5, 0.5, s[name].shape)
    return s


def rand_vecs(k, m=M, seed=1):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=m) for _ in range(k)]


# ---- scalar-loop oracle ---------------------------------------------------

def lin(s, name, x, bias=True):
    W = s[f"{name}.W"].data
    out = [sum(x[i] * W[i, j] for i in range(len(x))) for j in range(W.shape[1])]
    if bias:
        out = [o + s[f"{name}.b"].data[j] for j, o in enumerate(out)]
    return out


sig = lambda v: [1 / (1 + math.exp(-x)) for x in v]  # noqa: E731
tnh = lambda v: [math.tanh(x) for x in v]  # noqa: E731


def o_alpha(s, ua, ub):
    a, b = lin(s, "srnn.scene_a", ua), lin(s, "srnn.scene_b", ub)
    return sig([x - y for x, y in zip(a, b)])


def o_hidden(s, ha, hb, hc):
    return tnh(lin(s, "srnn.hidden", list(ha) + list(hb))), tnh(lin(s, "srnn.hidden", list(hb) + list(hc)))


def o_beta(s, ua, ub, hb_agg, hc_agg, alpha):
    diff = [x - y for x, y in zip(list(ub) + list(hc_agg), list(ua) + list(hb_agg))]
    pre = lin(s, "srnn.threshold", diff, bias=False)
    return sig([p * (1 - a) for p, a in zip(pre, alpha)])


def o_E(s, ua, ub, alpha, beta):
    x = [b + (a_ + bt) / 2 * a for a, b, a_, bt in zip(ua, ub, alpha, beta)]
    return tnh(lin(s, "srnn.exo", x))


def o_out(s, ua, E):
    return tnh(lin(s, "srnn.out", list(ua) + list(E)))


def o_step(s, ha, hb, hc, ua, ub):
    al = o_alpha(s, ua, ub)
    hb2, hc2 = o_hidden(s, ha, hb, hc)
    be = o_beta(s, ua, ub, hb2, hc2, al)
    E = o_E(s, ua, ub, al, be)
    return dict(alpha=al, beta=be, h_b_agg=hb2, h_c_agg=hc2, E=E, u_agg=o_out(s, ua, E))


T = lambda v: Tensor(np.asarray(v, dtype=np.float64))  # noqa: E731


# ---------------------------------------------------------------- unit gates

def test_scene_drift_equal_inputs_tied_weights_is_half():
    s = make_store()
    s["srnn.scene_b.W"].data[...] = s["srnn.scene_a.W"].data
    s["srnn.scene_b.b"].data[...] = s["srnn.scene_a.b"].data
    u = T(rand_vecs(1)[0])
    np.testing.assert_allclose(srnn.scene_drift(u, u, s).data, 0.5, atol=1e-15)


def test_scene_drift_saturates_with_bias_gap():
    s = make_store()
    for n in ("srnn.scene_a.W", "srnn.scene_b.W", "srnn.scene_b.b"):
        s[n].data[...] = 0.0
    s["srnn.scene_a.b"].data[...] = 50.0
    ua, ub = map(T, rand_vecs(2))
    assert np.all(srnn.scene_drift(ua, ub, s).data > 1 - 1e-15)


def test_gates_match_scalar_oracle():
    s = make_store(seed=3)
    ha, hb, hc, ua, ub = rand_vecs(5, seed=4)
    al = srnn.scene_drift(T(ua), T(ub), s)
    np.testing.assert_allclose(al.data, o_alpha(s, ua, ub), atol=1e-14)
    hb2, hc2 = srnn.hidden_gate(T(ha), T(hb), T(hc), s)
    ob, oc = o_hidden(s, ha, hb, hc)
    np.testing.assert_allclose(hb2.data, ob, atol=1e-14)
    np.testing.assert_allclose(hc2.data, oc, atol=1e-14)
    be = srnn.threshold_effect(T(ua), T(ub), hb2, hc2, al, s)
    np.testing.assert_allclose(be.data, o_beta(s, ua, ub, ob, oc, al.data), atol=1e-14)
    E = srnn.exogenous_gate(T(ua), T(ub), al, be, s)
    np.testing.assert_allclose(E.data, o_E(s, ua, ub, al.data, be.data), atol=1e-14)
    u2 = srnn.output_gate(T(ua), E, s)
    np.testing.assert_allclose(u2.data, o_out(s, ua, E.data), atol=1e-14)


def test_hidden_gate_zero_params_and_identical_inputs():
    s = make_store()
    h = T(rand_vecs(1)[0])
    a, b = srnn.hidden_gate(h, h, h, s)
    assert np.array_equal(a.data, b.data)
    for n in s.names():
        s[n].data[...] = 0.0
    a, b = srnn.hidden_gate(*map(T, rand_vecs(3)), s)
    assert not a.data.any() and not b.data.any()


def test_threshold_gate_closed_by_alpha_one():
    s = make_store()
    ua, ub, hb, hc = map(T, rand_vecs(4))
    np.testing.assert_array_equal(srnn.threshold_effect(ua, ub, hb, hc, T(np.ones(M)), s).data, 0.5)


def test_threshold_gate_half_on_zero_difference():
    s = make_store()
    u, h = map(T, rand_vecs(2))
    alpha = T(np.full(M, 0.3))
    np.testing.assert_array_equal(srnn.threshold_effect(u, u, h, h, alpha, s).data, 0.5)


def test_exogenous_gate_forced_coefficients():
    s = make_store()
    ua, ub = map(T, rand_vecs(2))
    zero, one = T(np.zeros(M)), T(np.ones(M))
    np.testing.assert_allclose(srnn.exogenous_gate(ua, ub, zero, zero, s).data,
                               np.tanh(ub.data @ s["srnn.exo.W"].data + s["srnn.exo.b"].data), atol=1e-15)
    np.testing.assert_allclose(srnn.exogenous_gate(ua, ub, one, one, s).data,
                               np.tanh((ub.data + ua.data) @ s["srnn.exo.W"].data + s["srnn.exo.b"].data),
                               atol=1e-15)


def test_gate_independence_from_u_a_when_closed():
    s = make_store()
    ha, hb, hc, ua, ub = map(T, rand_vecs(5))
    zero = T(np.zeros(M))
    e1 = srnn_step(SrnnInput(ha, hb, hc, ua, ub), s, alpha=zero, beta=zero).E
    e2 = srnn_step(SrnnInput(ha, hb, hc, T(ua.data + 3.0), ub), s, alpha=zero, beta=zero).E
    assert np.array_equal(e1.data, e2.data)


def test_output_gate_zero_params_and_range():
    s = make_store()
    ua, E = map(T, rand_vecs(2))
    out = srnn.output_gate(T(ua.data * 100), E, s).data
    assert np.all(np.abs(out) <= 1)
    for n in s.names():
        s[n].data[...] = 0.0
    assert not srnn.output_gate(ua, E, s).data.any()


def test_gate_shape_mismatch():
    s = make_store()
    with pytest.raises(nx.ShapeError):
        srnn.scene_drift(T(np.zeros(M)), T(np.zeros(M + 1)), s)


# ---------------------------------------------------------------- recurrence

@pytest.mark.parametrize("n", [3, 4, 5])
def test_step_count_and_ranges(n):
    s = make_store()
    vs = rand_vecs(2 * n - 1, seed=n)
    fin = srnn_forward([T(v * 5) for v in vs[:n]], [T(v * 5) for v in vs[n:]], s)
    assert len(fin.steps) == n - 2
    for st in fin.steps:
        assert all(t.shape == (M,) for t in (st.alpha, st.beta, st.h_b_agg, st.h_c_agg, st.E, st.u_agg))
        assert np.all((st.alpha.data > 0) & (st.alpha.data < 1))
        assert np.all((st.beta.data > 0) & (st.beta.data < 1))
        assert np.all(np.abs(st.E.data) < 1) and np.all(np.abs(st.u_agg.data) < 1)


def test_length_three_is_a_single_step():
    s = make_store()
    h1, h2, h3, u1, u2 = rand_vecs(5)
    fin = srnn_forward([T(h1), T(h2), T(h3)], [T(u1), T(u2)], s)
    o = o_step(s, h1, h2, h3, u1, u2)
    np.testing.assert_allclose(fin.alpha_T.data, o["alpha"], atol=1e-14)
    np.testing.assert_allclose(fin.h_pen.data, o["h_b_agg"], atol=1e-14)
    np.testing.assert_allclose(fin.h_last.data, o["h_c_agg"], atol=1e-14)
    assert np.array_equal(fin.u_in_last.data, u1)


def test_length_four_equals_manual_chaining():
    s = make_store(seed=9)
    h1, h2, h3, h4, u1, u2, u3 = rand_vecs(7, seed=10)
    fin = srnn_forward(list(map(T, (h1, h2, h3, h4))), list(map(T, (u1, u2, u3))), s)
    o1 = o_step(s, h1, h2, h3, u1, u2)
    o2 = o_step(s, o1["h_b_agg"], o1["h_c_agg"], h4, o1["u_agg"], u3)
    for field, key in (("alpha_T", "alpha"), ("beta_T", "beta"), ("h_pen", "h_b_agg"),
                       ("h_last", "h_c_agg"), ("E_T", "E")):
        np.testing.assert_allclose(getattr(fin, field).data, o2[key], atol=1e-13)
    np.testing.assert_allclose(fin.u_in_last.data, o1["u_agg"], atol=1e-14)


def test_raw_mode_uses_latent():
    s = make_store()
    vs = rand_vecs(9)
    fin = srnn_forward(list(map(T, vs[:5])), list(map(T, vs[5:])), s, srnn.RAW)
    assert np.array_equal(fin.u_in_last.data, vs[5 + 2])


@pytest.mark.parametrize("n_events,n_latents", [(2, 1), (6, 5), (4, 4)])
def test_forward_rejects_bad_lengths(n_events, n_latents):
    vs = rand_vecs(n_events + n_latents)
    with pytest.raises(ValueError):
        srnn_forward(list(map(T, vs[:n_events])), list(map(T, vs[n_events:])), make_store())


def test_first_event_reaches_the_output():
    s = make_store()
    vs = rand_vecs(9)
    a = srnn_forward(list(map(T, vs[:5])), list(map(T, vs[5:])), s)
    vs[0] = vs[0][::-1].copy()
    b = srnn_forward(list(map(T, vs[:5])), list(map(T, vs[5:])), s)
    # h_1 reaches the final state through the penultimate aggregate
    assert not np.allclose(a.h_pen.data, b.h_pen.data)
    assert np.array_equal(a.h_last.data, b.h_last.data)


def test_batched_recurrence_matches_rows():
    s = make_store()
    rng = np.random.default_rng(5)
    ev = [rng.normal(size=(3, M)) for _ in range(4)]
    la = [rng.normal(size=(3, M)) for _ in range(3)]
    fin = srnn_forward(list(map(T, ev)), list(map(T, la)), s)
    for r in range(3):
        one = srnn_forward([T(e[r]) for e in ev], [T(u[r]) for u in la], s)
        np.testing.assert_allclose(fin.E_T.data[r], one.E_T.data, atol=1e-14)


def test_final_state_gradients_match_finite_differences():
    s = make_store(m=3, seed=2)
    vs = rand_vecs(9, m=3, seed=3)
    w = np.random.default_rng(4).normal(size=3)

    def f(store):
        fin = srnn_forward(list(map(T, vs[:5])), list(map(T, vs[5:])), store)
        parts = [fin.alpha_T, fin.beta_T, fin.h_last, fin.E_T, fin.u_in_last]
        acc = nx.total(nx.mul(parts[0], T(w)))
        for p in parts[1:]:
            acc = nx.add(acc, nx.total(nx.mul(p, T(w))))
        return acc

    with Trace() as tape:
        loss = f(s)
    g = nx.backward(tape, loss, s)
    fd = nx.finite_diff(lambda st: f(st).item(), s)
    for name in s.names():
        assert nx.rel_error(g[name], fd[name]).max() < 1e-4, name
