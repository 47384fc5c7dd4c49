import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_fd, min_abs_preactivation, rel_err, small_net
from optrl.diffcore import (
    DimensionError, ExpectileError, GradVector, LinearHead, MlpLayout, NetworkLoss, NonFiniteError,
    OptimizerState, ParamVector, adapted_params, backward, forward, forward_cache, grad, meta_grad,
    mlp_init, polyak_update, sgd_or_adam_step, SquaredError,
)


# -- layout and init ---------------------------------------------------------

def test_param_count_small_layout():
    assert MlpLayout(1, (2,), 1).n_params == 7


def test_init_is_deterministic():
    lay = MlpLayout(1, (2,), 1)
    assert mlp_init(lay, 7).values.tobytes() == mlp_init(lay, 7).values.tobytes()


def test_init_depends_on_seed():
    lay = MlpLayout(1, (2,), 1)
    assert np.any(mlp_init(lay, 7).values != mlp_init(lay, 8).values)


def test_init_bounds_follow_fan_in():
    lay = MlpLayout(4, (16, 9), 1)
    p = mlp_init(lay, 0)
    for (W, b), fan_in in zip(lay.unpack(p.values), lay.dims[:-1]):
        assert np.all(np.abs(W) <= 1 / np.sqrt(fan_in))
        assert np.all(b == 0)


def test_layout_rejects_bad_activation():
    with pytest.raises(ValueError):
        MlpLayout(1, (2,), 1, "sigmoid")


def test_param_vector_rejects_wrong_length():
    with pytest.raises(DimensionError):
        ParamVector(np.zeros(3), MlpLayout(1, (2,), 1))


# -- forward -----------------------------------------------------------------

def test_zero_params_give_zero_output():
    lay = MlpLayout(3, (4,), 2)
    out = forward(ParamVector(np.zeros(lay.n_params), lay), np.ones((5, 3)))
    assert np.all(out == 0)


def test_identity_weights_pass_input_through():
    # two layers, both identity matrices, relu hidden: positive inputs pass unchanged
    lay = MlpLayout(2, (2,), 2)
    v = np.zeros(lay.n_params)
    (w1, _, _), (w2, _, _) = lay.slices
    v[w1] = np.eye(2).ravel()
    v[w2] = np.eye(2).ravel()
    x = np.array([[0.3, 1.7], [2.0, 0.5]])
    np.testing.assert_array_equal(forward(ParamVector(v, lay), x), x)


def test_forward_matches_hand_evaluation():
    # 1 -> 1 (tanh) -> 1: y = w2 * tanh(w1 x + b1) + b2
    lay = MlpLayout(1, (1,), 1, "tanh")
    w1, b1, w2, b2 = 0.7, -0.2, 1.3, 0.05
    p = ParamVector(np.array([w1, b1, w2, b2]), lay)
    x = 0.4
    assert forward(p, np.array([x]))[0] == pytest.approx(w2 * np.tanh(w1 * x + b1) + b2, abs=1e-15)


def test_unbatched_input_gives_unbatched_output():
    p = small_net()
    assert forward(p, np.zeros(3)).shape == (1,)
    assert forward(p, np.zeros((4, 3))).shape == (4, 1)


def test_wrong_input_width_raises():
    with pytest.raises(DimensionError):
        forward(small_net(), np.zeros((2, 4)))


def test_nonfinite_forward_names_layer():
    lay = MlpLayout(1, (2,), 1)
    v = np.full(lay.n_params, 1e200)
    p = ParamVector(v, lay)
    with pytest.raises(NonFiniteError) as e, np.errstate(all="ignore"):
        forward(p, np.array([[1e200]]))
    assert e.value.layer in (0, 1)


# -- gradients ---------------------------------------------------------------

def test_gradient_zero_at_minimum():
    p = small_net(1)
    x = np.random.default_rng(0).normal(size=(6, 3))
    y = forward(p, x)
    _, g = grad(p, NetworkLoss(x, SquaredError(y)))
    assert np.all(g.values == 0)


def test_one_parameter_square_loss():
    # a bias-only "net": output = b, loss b^2 -> gradient 2b
    lay = MlpLayout(1, (1,), 1)
    v = np.array([0.0, 0.0, 0.0, 1.5])
    _, g = grad(ParamVector(v, lay), NetworkLoss(np.zeros((1, 1)), SquaredError(np.zeros((1, 1)))))
    assert g.values[-1] == pytest.approx(2 * 1.5)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("head", ["squared", "expectile", "linear"])
def test_gradient_matches_finite_differences(activation, head):
    rng = np.random.default_rng([["tanh", "relu"].index(activation),
                                 ["squared", "expectile", "linear"].index(head)])
    checked = 0
    for trial in range(60):
        p = small_net(trial, 3, (4, 3), activation)
        assert len(p) <= 64
        x = rng.normal(size=(7, 3))
        if activation == "relu" and min_abs_preactivation(p, x) < 1e-3:
            continue
        checked += 1
        if head == "squared":
            h = SquaredError(rng.normal(size=(7, 1)), 0.7)
        elif head == "expectile":
            h = ExpectileError(rng.normal(size=(7, 1)), 0.8)
        else:
            h = LinearHead(rng.normal(size=(7, 1)))
        loss = NetworkLoss(x, h)
        _, g = grad(p, loss)
        fd = central_fd(lambda v: loss.value(p.replace(v)), p.values)
        assert rel_err(g.values, fd) < 1e-4
    assert checked >= 10


def test_input_gradient_matches_finite_differences():
    p = small_net(3, 3, (5,), "tanh")
    x = np.random.default_rng(1).normal(size=(1, 3))
    c = forward_cache(p, x)
    _, d_in = backward(p, c, np.ones((1, 1)), need_input_grad=True)
    fd = central_fd(lambda z: forward(p, z[None, :])[0, 0], x[0])
    assert rel_err(d_in[0], fd) < 1e-6


def test_hvp_matches_gradient_differences():
    p = small_net(5, 3, (4,), "tanh")
    rng = np.random.default_rng(2)
    loss = NetworkLoss(rng.normal(size=(9, 3)), SquaredError(rng.normal(size=(9, 1))))
    v = rng.normal(size=len(p))
    hv = loss.hvp(p, v)
    h = 1e-5
    gp = loss.value_and_grad(p.replace(p.values + h * v))[1]
    gm = loss.value_and_grad(p.replace(p.values - h * v))[1]
    assert rel_err(hv, (gp - gm) / (2 * h)) < 1e-6


# -- meta gradient -----------------------------------------------------------

def _meta_problem(seed, alpha_lo=0.05, alpha_hi=0.5):
    rng = np.random.default_rng(seed)
    psi = small_net(seed, 3, (6,), "tanh")
    off = NetworkLoss(rng.normal(size=(8, 3)), SquaredError(rng.normal(size=(8, 1))))
    on = NetworkLoss(rng.normal(size=(8, 3)), SquaredError(rng.normal(size=(8, 1))))
    return psi, off, on, float(rng.uniform(alpha_lo, alpha_hi))


def composed(psi_values, layout, off, on, alpha):
    psi = ParamVector(psi_values, layout)
    _, g_off = off.value_and_grad(psi)
    return off.value(psi) + on.value(psi.replace(psi_values - alpha * g_off))


def test_adapted_params_arithmetic():
    lay = MlpLayout(1, (1,), 1)
    psi = ParamVector(np.array([1.0, 1.0, 0.0, 0.0]), lay)
    out = adapted_params(psi, GradVector(np.array([2.0, 4.0, 0.0, 0.0])), 0.5)
    np.testing.assert_array_equal(out.values[:2], [0.0, -1.0])


def test_adapted_params_identities():
    psi = small_net()
    g = GradVector(np.random.default_rng(0).normal(size=len(psi)))
    np.testing.assert_array_equal(adapted_params(psi, g, 0.0).values, psi.values)
    np.testing.assert_array_equal(adapted_params(psi, GradVector(np.zeros(len(psi))), 0.3).values,
                                  psi.values)


def test_meta_grad_alpha_zero_collapses():
    psi, off, on, _ = _meta_problem(0)
    val, g = meta_grad(psi, off, on, 0.0, "exact")
    _, g_fo = meta_grad(psi, off, on, 0.0, "first_order")
    l_off, g_off = grad(psi, off)
    l_on, g_on = grad(psi, on)
    assert val == pytest.approx(l_off + l_on, abs=1e-14)
    assert np.max(np.abs(g.values - (g_off.values + g_on.values))) <= 1e-12
    np.testing.assert_array_equal(g.values, g_fo.values)


def test_meta_grad_same_batch_alpha_zero_doubles():
    psi, off, _, _ = _meta_problem(1)
    val, g = meta_grad(psi, off, off, 0.0)
    l, g1 = grad(psi, off)
    assert val == pytest.approx(2 * l)
    np.testing.assert_allclose(g.values, 2 * g1.values, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_exact_meta_grad_matches_composed_fd(seed):
    psi, off, on, alpha = _meta_problem(seed)
    _, g = meta_grad(psi, off, on, alpha, "exact")
    fd = central_fd(lambda v: composed(v, psi.layout, off, on, alpha), psi.values)
    assert rel_err(g.values, fd) < 1e-4


def test_first_order_differs_and_fails_oracle():
    psi, off, on, alpha = _meta_problem(3, 0.3, 0.5)
    _, g_ex = meta_grad(psi, off, on, alpha, "exact")
    _, g_fo = meta_grad(psi, off, on, alpha, "first_order")
    fd = central_fd(lambda v: composed(v, psi.layout, off, on, alpha), psi.values)
    assert np.any(g_ex.values != g_fo.values)
    assert rel_err(g_ex.values, fd) < 1e-4
    assert rel_err(g_fo.values, fd) > 1e-3


def test_meta_grad_rejects_unknown_mode():
    psi, off, on, alpha = _meta_problem(0)
    with pytest.raises(ValueError):
        meta_grad(psi, off, on, alpha, "second_order")


def test_meta_grad_is_pure():
    psi, off, on, alpha = _meta_problem(4)
    before = psi.values.copy()
    a = meta_grad(psi, off, on, alpha)
    b = meta_grad(psi, off, on, alpha)
    np.testing.assert_array_equal(psi.values, before)
    assert a[0] == b[0] and a[1].values.tobytes() == b[1].values.tobytes()


# -- polyak and optimizers ---------------------------------------------------

def _two_param():
    lay = MlpLayout(1, (1,), 1)
    return lambda v: ParamVector(np.array(v, dtype=float), lay)


def test_polyak_endpoints_and_arithmetic():
    mk = _two_param()
    t, o = mk([0, 0, 0, 0]), mk([1, 2, 3, 4])
    np.testing.assert_array_equal(polyak_update(t, o, 0.0).values, t.values)
    np.testing.assert_array_equal(polyak_update(t, o, 1.0).values, o.values)
    np.testing.assert_allclose(polyak_update(t, o, 0.005).values[:2], [0.005, 0.01], rtol=0, atol=1e-15)


def test_polyak_rejects_bad_tau():
    mk = _two_param()
    with pytest.raises(ValueError):
        polyak_update(mk([0] * 4), mk([1] * 4), 1.5)


def test_sgd_step():
    mk = _two_param()
    p = mk([0, 0, 0, 0])
    new, _ = sgd_or_adam_step(p, np.array([1.0, 0, 0, 0]), OptimizerState("sgd", lr=0.1))
    assert new.values[0] == pytest.approx(-0.1)
    same, _ = sgd_or_adam_step(p, np.zeros(4), OptimizerState("sgd", lr=0.1))
    np.testing.assert_array_equal(same.values, p.values)


def test_adam_matches_hand_recurrence():
    mk = _two_param()
    p = mk([0.5, 0, 0, 0])
    st_ = OptimizerState("adam", lr=0.01)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    w, m, v = 0.5, 0.0, 0.0
    for t, gv in enumerate([0.3, -1.2, 0.7], start=1):
        p, st_ = sgd_or_adam_step(p, np.array([gv, 0, 0, 0]), st_)
        m = b1 * m + (1 - b1) * gv
        v = b2 * v + (1 - b2) * gv * gv
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert p.values[0] == pytest.approx(w, abs=1e-15)
    assert st_.t == 3


# -- properties --------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 0.5))
def test_property_meta_grad_finite_and_first_order_gap_scales(seed, alpha):
    psi, off, on, _ = _meta_problem(seed)
    _, g_ex = meta_grad(psi, off, on, alpha, "exact")
    _, g_fo = meta_grad(psi, off, on, alpha, "first_order")
    gap = g_fo.values - g_ex.values
    # the gap is exactly alpha * H_off g_on
    _, g_on = on.value_and_grad(psi.replace(psi.values - alpha * off.value_and_grad(psi)[1]))
    np.testing.assert_allclose(gap, alpha * off.hvp(psi, g_on), rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_grad_is_pure_and_repeatable(seed):
    rng = np.random.default_rng(seed)
    p = small_net(seed % 97, 2, (3,), "relu")
    x = rng.normal(size=(4, 2))
    x_copy = x.copy()
    loss = NetworkLoss(x, SquaredError(rng.normal(size=(4, 1))))
    a = grad(p, loss)
    b = grad(p, loss)
    np.testing.assert_array_equal(x, x_copy)
    assert a[1].values.tobytes() == b[1].values.tobytes()
