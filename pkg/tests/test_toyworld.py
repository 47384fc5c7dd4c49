import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from optrl.toyworld import (
    DatasetTier, Transition, build_oracle, clip_action, episode_returns, evaluate_policy,
    expert_controller, gen_dataset, make_env, medium_controller, normalized_score, policy_value,
    random_controller, read_dataset, reference_returns, reset, step, step_batch, write_dataset,
)

ENV = make_env("PointReach1D")


# -- reset and step ----------------------------------------------------------

def test_reset_is_deterministic_in_seed():
    np.testing.assert_array_equal(reset(ENV, 0), reset(ENV, 0))


def test_reset_range():
    xs = np.array([reset(ENV, s)[0] for s in range(1000)])
    assert xs.min() >= 0.0 and xs.max() <= 0.2


@pytest.mark.parametrize("name", ["PointReach1D", "PointReach2D"])
def test_state_length_matches_spec(name):
    spec = make_env(name)
    assert reset(spec, 3).shape == (spec.state_dim,)


def test_reward_at_goal_is_zero():
    res = step(ENV, np.array([0.9]), np.array([0.0]))
    assert res.reward == 0.0


def test_step_arithmetic():
    res = step(ENV, np.array([0.5]), np.array([0.1]))
    assert res.state[0] == pytest.approx(0.6)
    assert res.reward == pytest.approx(-0.3)


def test_step_clips_state_at_boundary():
    assert step(ENV, np.array([0.98]), np.array([0.1])).state[0] == 1.0


def test_out_of_bounds_action_is_clipped_and_recorded():
    res = step(ENV, np.array([0.5]), np.array([3.0]))
    assert res.clipped and res.state[0] == 1.0
    a, clipped = clip_action(ENV, [0.2])
    assert not clipped and a[0] == 0.2


def test_sparse_reward_band():
    spec = make_env("PointReach1D", "sparse")
    assert step(spec, np.array([0.86]), np.array([0.0])).reward == 1.0
    assert step(spec, np.array([0.5]), np.array([0.0])).reward == 0.0


def test_horizon_marks_last_step():
    assert step(ENV, np.array([0.1]), np.array([0.0]), t=ENV.horizon - 1).terminal
    assert not step(ENV, np.array([0.1]), np.array([0.0]), t=0).terminal


def test_step_batch_matches_step():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 1, size=(20, 1))
    a = rng.uniform(-1.5, 1.5, size=(20, 1))
    nxt, r = step_batch(ENV, s, a)
    for i in range(20):
        res = step(ENV, s[i], a[i])
        assert nxt[i, 0] == res.state[0] and r[i] == res.reward


def test_evaluate_policy_expert_beats_random():
    rng = np.random.default_rng
    expert = evaluate_policy(ENV, lambda s: np.clip(0.9 - s, -1, 1), 10, rng(0)).mean()
    still = evaluate_policy(ENV, lambda s: np.zeros_like(s), 10, rng(0)).mean()
    assert expert > still


# -- datasets ----------------------------------------------------------------

def test_random_tier_actions_uniform():
    data = gen_dataset(ENV, DatasetTier("random", 100, 0))
    assert len(data) == 100
    a = np.array([t.a[0] for t in data])
    assert stats.kstest(a, stats.uniform(loc=-1, scale=2).cdf).pvalue > 0.01


def test_medium_tier_between_random_and_expert():
    n = 100
    rand = episode_returns(ENV, random_controller(ENV), n, 0).mean()
    med = episode_returns(ENV, medium_controller(ENV), n, 0).mean()
    exp = episode_returns(ENV, expert_controller(ENV), n, 0).mean()
    assert rand < med < exp


@pytest.mark.parametrize("tier", ["random", "medium", "medium_replay"])
def test_dataset_deterministic_and_sized(tier):
    a = gen_dataset(ENV, DatasetTier(tier, 257, 4))
    b = gen_dataset(ENV, DatasetTier(tier, 257, 4))
    assert len(a) == 257 and a == b


@pytest.mark.parametrize("tier", ["random", "medium", "medium_replay"])
def test_dataset_actions_within_bounds(tier):
    for t in gen_dataset(make_env("PointReach2D"), DatasetTier(tier, 300, 1)):
        assert np.all(t.a >= -1) and np.all(t.a <= 1)


def test_dataset_tier_validation():
    with pytest.raises(ValueError):
        DatasetTier("expert", 10)
    with pytest.raises(ValueError):
        DatasetTier("random", 0)


def test_dataset_file_round_trip(tmp_path):
    data = gen_dataset(ENV, DatasetTier("medium", 64, 2))
    path = tmp_path / "d.csv"
    write_dataset(path, ENV, DatasetTier("medium", 64, 2), data)
    raw = path.read_bytes()
    f = read_dataset(path)
    assert f.transitions == data
    assert f.spec == ENV
    assert f.refs == reference_returns(ENV)
    assert path.read_bytes() == raw


def test_dataset_file_rejects_bad_width(tmp_path):
    path = tmp_path / "d.csv"
    write_dataset(path, ENV, DatasetTier("medium", 2, 0), gen_dataset(ENV, DatasetTier("medium", 2, 0)))
    lines = path.read_text().splitlines()
    lines[2] += ",7"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=":3:"):
        read_dataset(path)


# -- normalized score --------------------------------------------------------

def test_normalized_score_anchors():
    ref = reference_returns(ENV)
    assert normalized_score(ref, ref.random) == 0.0
    assert normalized_score(ref, ref.expert) == 100.0
    assert normalized_score(ref, (ref.random + ref.expert) / 2) == pytest.approx(50.0)


# -- oracle ------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle():
    return build_oracle(ENV, 101, 21, 0.99)


def test_oracle_gamma_zero_is_immediate_reward():
    o = build_oracle(ENV, 11, 5, 0.0)
    np.testing.assert_allclose(o.q_star, o.rewards, rtol=0, atol=0)


def test_oracle_goal_bin_standing_still_is_zero(oracle):
    assert oracle.q(np.array([0.9]), np.array([0.0])) == 0.0


@pytest.mark.parametrize("bins,gamma", [(11, 0.5), (41, 0.9), (101, 0.99)])
def test_oracle_bellman_residual(bins, gamma):
    o = build_oracle(ENV, bins, 11, gamma)
    assert o.bellman_residual() < 1e-8
    np.testing.assert_allclose(o.v_star, o.q_star.max(axis=1), rtol=0, atol=1e-9)


def test_oracle_greedy_dominates_random_policies():
    o = build_oracle(ENV, 21, 11, 0.9)
    v_greedy = policy_value(o, np.argmax(o.q_star, axis=1))
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pol = rng.integers(0, o.q_star.shape[1], size=o.q_star.shape[0])
        assert np.all(v_greedy >= policy_value(o, pol) - 1e-9)


def test_oracle_rejects_noisy_dynamics():
    with pytest.raises(ValueError):
        build_oracle(make_env("PointReach1D").__class__(**{**ENV.__dict__, "noise_sigma": 0.1}))


def test_oracle_rejects_out_of_domain_state(oracle):
    with pytest.raises(ValueError):
        oracle.q(np.array([1.5]), np.array([0.0]))


# -- properties --------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(x=st.floats(0, 1), a=st.floats(-3, 3))
def test_property_step_stays_in_box(x, a):
    res = step(ENV, np.array([x]), np.array([a]))
    assert 0.0 <= res.state[0] <= 1.0
    assert np.isfinite(res.reward) and res.reward <= 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), size=st.integers(1, 120))
def test_property_dataset_is_pure_function_of_seed(seed, size):
    tier = DatasetTier("medium_replay", size, seed)
    a, b = gen_dataset(ENV, tier), gen_dataset(ENV, tier)
    assert a == b and all(isinstance(t, Transition) for t in a)
