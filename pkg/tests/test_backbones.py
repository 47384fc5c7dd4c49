import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from conftest import central_fd, rel_err
from optrl.backbones import (
    AwrLoss, BackboneConfig, CriticPair, advantage_weights, awr_policy_loss, critic_loss,
    iql_q_loss, iql_v_loss, make_critic_pair, make_gaussian_policy, q_value, td3bc_policy_loss,
    td_target,
)
from optrl.diffcore import ExpectileError, MlpLayout, ParamVector, forward, mlp_init
from optrl.replay import Batch

CRITIC = MlpLayout(2, (8,), 1, "tanh")
ACTOR = MlpLayout(1, (6,), 1, "tanh", "tanh")
NO_NOISE = BackboneConfig(target_noise_sigma=0.0)


def toy_batch(n=16, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.uniform(0, 1, (n, 1)), rng.uniform(-1, 1, (n, 1)), rng.normal(size=(n, 1)),
                 rng.uniform(0, 1, (n, 1)), (rng.uniform(size=(n, 1)) < 0.2).astype(float),
                 np.zeros(n, dtype=np.int64))


def bias_only(layout, value):
    v = np.zeros(layout.n_params)
    v[-1] = value
    return ParamVector(v, layout)


# -- td targets and critic loss ----------------------------------------------

@pytest.mark.parametrize("r,gamma,q_next,term,expected", [
    (1.0, 0.0, 5.0, 0.0, 1.0),
    (0.0, 0.99, 10.0, 0.0, 9.9),
    (1.0, 0.99, 10.0, 1.0, 1.0),
])
def test_td_target_cases(r, gamma, q_next, term, expected):
    assert td_target(r, gamma, q_next, term) == pytest.approx(expected)


def test_critic_loss_zero_iff_targets_matched():
    # constant critics c with gamma 0 and reward c: y = c everywhere
    lay = MlpLayout(2, (1,), 1)
    c = 0.4
    q = bias_only(lay, c)
    pair = CriticPair(q, q, q, q)
    batch = toy_batch()
    batch = Batch(batch.s, batch.a, np.full((16, 1), c), batch.s_next, batch.terminal, batch.origin)
    cfg = BackboneConfig(gamma=0.0)
    assert critic_loss(pair, mlp_init(ACTOR, 0), batch, cfg).value(pair) == 0.0
    off = CriticPair(bias_only(lay, c + 0.1), q, q, q)
    assert critic_loss(off, mlp_init(ACTOR, 0), batch, cfg).value(off) > 0.0


def test_tied_scalar_critic_gradient():
    # one transition, gamma 0, both critics are the same constant w
    lay = MlpLayout(2, (1,), 1)
    w, r = 0.7, 0.2
    q = bias_only(lay, w)
    pair = CriticPair(q, q, q, q)
    batch = Batch(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[r]]), np.zeros((1, 1)),
                  np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
    loss = critic_loss(pair, bias_only(ACTOR, 0.0), batch, BackboneConfig(gamma=0.0))
    assert loss.value(pair) == pytest.approx(2 * (w - r) ** 2)
    g_total = sum(loss.value_and_grad(n)[1][-1] for n in pair.online)
    assert g_total == pytest.approx(4 * (w - r))


def test_critic_loss_permutation_invariant():
    batch = toy_batch()
    perm = np.random.default_rng(1).permutation(16)
    shuffled = Batch(*(getattr(batch, f)[perm] for f in ("s", "a", "r", "s_next", "terminal", "origin")))
    pair, pol = make_critic_pair(CRITIC, 2), mlp_init(ACTOR, 3)
    a = critic_loss(pair, pol, batch, NO_NOISE).value(pair)
    b = critic_loss(pair, pol, shuffled, NO_NOISE).value(pair)
    assert a == pytest.approx(b, rel=1e-14)


def test_target_smoothing_noise_is_clipped():
    from optrl.backbones import smoothed_target_action
    cfg = BackboneConfig(target_noise_sigma=10.0, target_noise_clip=0.5)
    pol = bias_only(ACTOR, 0.0)  # tanh(0) = 0 action everywhere
    a = smoothed_target_action(pol, np.zeros((1000, 1)), cfg, np.random.default_rng(0))
    assert np.all(np.abs(a) <= 0.5)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        BackboneConfig(gamma=1.0)
    with pytest.raises(ValueError):
        BackboneConfig(expectile_tau=1.0)


# -- TD3+BC actor loss ---------------------------------------------------------

def test_bc_weight_zero_is_negative_q():
    batch = toy_batch()
    pol, pair = mlp_init(ACTOR, 4), make_critic_pair(CRITIC, 5)
    loss = td3bc_policy_loss(pol, pair, batch, BackboneConfig(bc_weight=0.0))
    pi = forward(pol, batch.s)
    expected = -np.mean(forward(pair.q1, np.hstack([batch.s, pi]))[:, 0])
    assert loss.value(pol) == pytest.approx(expected, rel=1e-14)


def test_bc_term_vanishes_when_policy_matches_data():
    batch = toy_batch()
    pol, pair = mlp_init(ACTOR, 4), make_critic_pair(CRITIC, 5)
    pi = forward(pol, batch.s)
    matched = Batch(batch.s, pi, batch.r, batch.s_next, batch.terminal, batch.origin)
    with_bc = td3bc_policy_loss(pol, pair, matched, BackboneConfig(bc_weight=3.0)).value(pol)
    without = td3bc_policy_loss(pol, pair, matched, BackboneConfig(bc_weight=0.0)).value(pol)
    assert with_bc == pytest.approx(without, abs=1e-15)


def test_large_bc_weight_aligns_with_bc_gradient():
    batch = toy_batch()
    pol, pair = mlp_init(ACTOR, 6), make_critic_pair(CRITIC, 7)
    _, g = td3bc_policy_loss(pol, pair, batch, BackboneConfig(bc_weight=1e6)).value_and_grad(pol)
    from optrl.backbones import ActorLoss
    _, g_bc = ActorLoss(batch.s, batch.a, (), 1.0).value_and_grad(pol)
    cos = g @ g_bc / (np.linalg.norm(g) * np.linalg.norm(g_bc))
    assert cos > 0.99


@pytest.mark.parametrize("mode", ["q1", "min"])
def test_actor_gradient_matches_fd(mode):
    batch = toy_batch(8, 3)
    pol, pair = mlp_init(ACTOR, 8), make_critic_pair(CRITIC, 9)
    loss = td3bc_policy_loss(pol, pair, batch, BackboneConfig(policy_critic_mode=mode))
    _, g = loss.value_and_grad(pol)
    fd = central_fd(lambda v: loss.value(pol.replace(v)), pol.values)
    assert rel_err(g, fd) < 1e-4


def test_policy_loss_shift_invariance():
    batch = toy_batch()
    pol, pair = mlp_init(ACTOR, 1), make_critic_pair(CRITIC, 2)
    c = 3.25
    shifted_q1 = pair.q1.replace(pair.q1.values + np.eye(1, len(pair.q1), len(pair.q1) - 1)[0] * c)
    shifted = CriticPair(shifted_q1, pair.q2, pair.q1_target, pair.q2_target)
    cfg = BackboneConfig()
    v0, g0 = td3bc_policy_loss(pol, pair, batch, cfg).value_and_grad(pol)
    v1, g1 = td3bc_policy_loss(pol, shifted, batch, cfg).value_and_grad(pol)
    assert v1 - v0 == pytest.approx(-c, abs=1e-9)
    assert np.max(np.abs(g1 - g0)) <= 1e-9


# -- IQL -----------------------------------------------------------------------

def test_expectile_symmetric_case():
    u = np.array([[-1.0], [2.0], [0.5]])
    head = ExpectileError(u, 0.5)
    assert head.value(np.zeros((3, 1))) == pytest.approx(0.5 * np.mean(u ** 2))


def test_expectile_positive_branch():
    head = ExpectileError(np.array([[2.0]]), 0.7)
    assert head.value(np.zeros((1, 1))) == pytest.approx(0.7 * 4.0)


def newton_expectile(samples, tau, v0=0.0, iters=50):
    """Minimize the expectile loss over a scalar with the loss head's own derivatives."""
    target = np.asarray(samples, dtype=float)[:, None]
    head = ExpectileError(target, tau)
    v = v0
    for _ in range(iters):
        out = np.full_like(target, v)
        v -= float(np.sum(head.d_out(out)) / np.sum(head.d2_out(out) * np.ones_like(out)))
    return v


def golden_expectile(samples, tau):
    samples = np.asarray(samples, dtype=float)
    f = lambda v: np.mean(np.where(samples - v < 0, 1 - tau, tau) * (samples - v) ** 2)  # noqa: E731
    return optimize.minimize_scalar(f, bracket=(samples.min(), samples.max()), method="golden",
                                    tol=1e-12).x


def test_expectile_minimizer_two_samples():
    assert newton_expectile([0.0, 10.0], 0.5) == pytest.approx(5.0, abs=1e-3)
    assert golden_expectile([0.0, 10.0], 0.5) == pytest.approx(5.0, abs=1e-3)
    assert newton_expectile([0.0, 10.0], 0.95) >= 9.0
    assert newton_expectile([0.0, 10.0], 0.999) > 9.9


def test_iql_q_loss_gamma_zero_regresses_on_reward():
    batch = toy_batch()
    pair, v = make_critic_pair(CRITIC, 0), mlp_init(MlpLayout(1, (4,), 1), 1)
    np.testing.assert_array_equal(iql_q_loss(pair, v, batch, BackboneConfig(gamma=0.0)).y, batch.r)


def test_iql_q_loss_matches_critic_loss_with_value_bootstrap():
    # target critics and V are the same constant, so both code paths bootstrap the same value
    batch = toy_batch()
    c = -1.3
    q = bias_only(MlpLayout(2, (1,), 1), c)
    pair = CriticPair(q, q, q, q)
    v = bias_only(MlpLayout(1, (1,), 1), c)
    cfg = BackboneConfig()
    y_iql = iql_q_loss(pair, v, batch, cfg).y
    y_td3 = critic_loss(pair, mlp_init(ACTOR, 0), batch, cfg, np.random.default_rng(0)).y
    np.testing.assert_array_equal(y_iql, y_td3)
    assert iql_q_loss(pair, v, batch, cfg).value(pair) == critic_loss(pair, mlp_init(ACTOR, 0), batch, cfg).value(pair)


def test_iql_v_loss_zero_when_v_matches_q():
    batch = toy_batch()
    pair = make_critic_pair(CRITIC, 0)
    v = mlp_init(MlpLayout(1, (4,), 1), 1)
    loss = iql_v_loss(v, pair, batch, BackboneConfig())
    q = q_value(pair, batch.s, batch.a, target=True)
    assert ExpectileError(q[:, None], 0.7).value(q[:, None]) == 0.0
    assert loss.value(v) > 0.0


def test_awr_beta_zero_is_plain_nll():
    batch = toy_batch()
    pol = make_gaussian_policy(MlpLayout(1, (4,), 1, "tanh", "tanh"), 0, log_std=-0.5)
    w = advantage_weights(np.random.default_rng(0).normal(size=16), 0.0)
    np.testing.assert_array_equal(w, np.ones(16))
    loss = awr_policy_loss(pol, w, batch)
    assert loss.value(pol) == pytest.approx(-np.mean(pol.log_prob(batch.s, batch.a)))


def test_awr_weight_ratio():
    w = advantage_weights(np.array([2.0, 0.0, 0.0]), 3.0)
    assert w[0] / w[1] > 100


def test_awr_weights_clipped_and_checked():
    assert advantage_weights(np.array([100.0]), 3.0, 10.0)[0] == pytest.approx(np.exp(10.0))
    with pytest.raises(FloatingPointError):
        advantage_weights(np.array([np.nan]), 3.0)


def test_awr_gradient_matches_fd():
    batch = toy_batch(8)
    pol = make_gaussian_policy(MlpLayout(1, (1,), 1, "tanh", "tanh"), 3, log_std=-0.3)
    loss = AwrLoss(batch.s, batch.a, advantage_weights(np.linspace(-1, 1, 8), 3.0))
    _, g = loss.value_and_grad(pol)
    fd = central_fd(lambda v: loss.value(pol.with_flat(v)), pol.flat())
    assert rel_err(g, fd) < 1e-4


# -- properties ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(r=st.floats(-10, 10), q=st.floats(-10, 10), dr=st.floats(0, 5), dq=st.floats(0, 5),
       gamma=st.floats(0, 0.999))
def test_property_td_target_monotone(r, q, dr, dq, gamma):
    base = td_target(r, gamma, q, 0.0)
    assert td_target(r + dr, gamma, q, 0.0) >= base
    assert td_target(r, gamma, q + dq, 0.0) >= base


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_critic_loss_nonnegative(seed):
    batch = toy_batch(8, seed)
    pair = make_critic_pair(CRITIC, seed)
    assert critic_loss(pair, mlp_init(ACTOR, seed), batch, BackboneConfig()).value(pair) >= 0.0


@settings(max_examples=40, deadline=None)
@given(samples=st.lists(st.floats(-50, 50), min_size=1, max_size=12),
       t1=st.floats(0.01, 0.99), t2=st.floats(0.01, 0.99))
def test_property_expectile_monotone_and_bracketed(samples, t1, t2):
    lo_tau, hi_tau = sorted((t1, t2))
    a = newton_expectile(samples, lo_tau)
    b = newton_expectile(samples, hi_tau)
    tol = 1e-9 * (1 + max(abs(x) for x in samples))
    assert a <= b + tol
    assert min(samples) - tol <= a and b <= max(samples) + tol
    assert a == pytest.approx(golden_expectile(samples, lo_tau), abs=1e-4 * (1 + np.ptp(samples)))
