import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rat import policy as pol
from rat.advantage import (PopArtState, RolloutBatch, RunningMoments, gae, normalize_advantages,
                           obs_normalize, popart_rescale)
from rat.linalg import ShapeError


def batch_from(rewards, values, dones, bootstrap, timeout_values=None):
    rewards = np.asarray(rewards, dtype=float)
    T = rewards.shape[0]
    E = 1 if rewards.ndim == 1 else rewards.shape[1]
    return RolloutBatch(states=np.zeros((T, E, 1)), actions=np.zeros((T, E)), rewards=rewards,
                        dones=dones, behavior_log_probs=np.zeros((T, E)), values=values,
                        bootstrap_values=bootstrap, timeout_values=timeout_values)


def test_gae_single_terminal_step():
    adv, ret = gae(batch_from([1.0], [0.0], [True], [0.0]))
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0


def test_gae_gamma_zero_is_td_residual():
    r = np.array([1.0, -2.0, 0.5])
    v = np.array([0.3, 0.1, -0.4])
    adv, _ = gae(batch_from(r, v, [False, False, False], [9.0]), gamma=0.0, lam=0.95)
    assert np.allclose(adv[:, 0], r - v)


def test_gae_direct_sum_three_steps():
    gamma, lam = 0.99, 0.95
    r = np.array([0.5, -1.0, 2.0])
    v = np.array([0.2, 0.7, -0.3])
    boot = 0.0  # episode terminates at the last step
    adv, ret = gae(batch_from(r, v, [False, False, True], [5.0]), gamma, lam)
    v_next = np.array([v[1], v[2], boot])
    delta = r + gamma * v_next - v
    direct = [sum((gamma * lam) ** l * delta[t + l] for l in range(3 - t)) for t in range(3)]
    assert np.allclose(adv[:, 0], direct, atol=1e-14)
    assert np.allclose(ret[:, 0], adv[:, 0] + v)


def test_gae_bootstrap_and_timeout():
    gamma, lam = 0.9, 0.8
    r = np.array([1.0, 1.0, 1.0, 1.0])
    v = np.array([0.5, 0.4, 0.3, 0.2])
    dones = [False, True, False, False]
    timeout = np.array([0.0, 2.0, 0.0, 0.0])  # episode 1 truncated, bootstrap 2.0
    adv, _ = gae(batch_from(r, v, dones, [3.0], timeout), gamma, lam)
    d1 = r[1] + gamma * 2.0 - v[1]
    d0 = r[0] + gamma * v[1] - v[0]
    d3 = r[3] + gamma * 3.0 - v[3]
    d2 = r[2] + gamma * v[3] - v[2]
    assert np.allclose(adv[:, 0], [d0 + gamma * lam * d1, d1, d2 + gamma * lam * d3, d3])


def test_gae_lambda_one_is_monte_carlo_minus_baseline():
    rng = np.random.default_rng(0)
    T, E, gamma = 12, 3, 0.97
    r = rng.standard_normal((T, E))
    v = rng.standard_normal((T, E))
    dones = np.zeros((T, E), bool)
    dones[4, 0] = dones[T - 1] = True
    dones[7, 2] = True
    adv, _ = gae(batch_from(r, v, dones, np.zeros(E)), gamma, 1.0)
    mc = np.zeros((T, E))
    for e in range(E):
        acc = 0.0
        for t in range(T - 1, -1, -1):
            acc = r[t, e] + (0.0 if dones[t, e] else gamma * acc)
            mc[t, e] = acc
    assert np.max(np.abs(adv - (mc - v))) <= 1e-10


def test_gae_shape_error():
    b = batch_from([1.0, 2.0], [0.0, 0.0], [False, False], [0.0])
    b.values = np.zeros((3, 1))
    with pytest.raises(ShapeError):
        gae(b)


def test_batch_validation():
    with pytest.raises(ValueError):
        batch_from([1.0, np.nan], [0.0, 0.0], [False, False], [0.0])
    with pytest.raises(ShapeError):
        RolloutBatch(states=np.zeros((3, 1, 1)), actions=np.zeros((2, 1)), rewards=np.zeros((2, 1)),
                     dones=np.zeros((2, 1)), behavior_log_probs=np.zeros((2, 1)),
                     values=np.zeros((2, 1)), bootstrap_values=np.zeros(1))


def test_normalize_two_point_and_constant():
    assert np.allclose(normalize_advantages([1.0, 3.0]), [-1.0, 1.0], atol=1e-15)
    assert np.array_equal(normalize_advantages([2.0, 2.0, 2.0]), np.zeros(3))
    with pytest.raises(ShapeError):
        normalize_advantages([1.0])


def test_normalize_random_moments():
    out = normalize_advantages(np.random.default_rng(1).standard_normal(1024) * 3 + 7)
    assert abs(out.mean()) <= 1e-10 and abs(out.std() - 1) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 64), elements=st.floats(-100, 100)), st.floats(-1e3, 1e3))
def test_normalize_shift_invariant(a, c):
    if np.std(a) < 1e-6:
        return
    assert np.max(np.abs(normalize_advantages(a) - normalize_advantages(a + c))) <= 1e-10 * max(1.0, abs(c))


def test_obs_normalize_clip_and_centre():
    m = RunningMoments(mean=np.zeros(1), var=np.ones(1), count=10.0)
    assert obs_normalize(m, np.array([7.0]), update=False)[0] == pytest.approx(5.0)
    m = RunningMoments(mean=np.array([2.0, -1.0]), var=np.array([4.0, 1.0]), count=5.0)
    assert np.allclose(obs_normalize(m, m.mean.copy(), update=False), 0.0)


def test_running_moments_match_batch():
    x = np.random.default_rng(2).standard_normal((10_000, 3)) * [1.0, 5.0, 0.1] + [3.0, -2.0, 0.0]
    m = RunningMoments.zeros(3)
    for chunk in np.array_split(x, 37):
        m.update(chunk)
    assert np.allclose(m.mean, x.mean(axis=0), atol=1e-6)
    assert np.allclose(m.var, x.var(axis=0), atol=1e-6)
    assert m.count == 10_000


def test_obs_normalize_output_is_standardised():
    rng = np.random.default_rng(3)
    m = RunningMoments.zeros(2)
    for _ in range(20):
        obs_normalize(m, rng.standard_normal((1000, 2)) * 3 + 1)
    z = obs_normalize(m, rng.standard_normal((10_000, 2)) * 3 + 1, update=False)
    assert np.all(np.abs(z.mean(axis=0)) <= 0.05) and np.all(np.abs(z.std(axis=0) - 1) <= 0.05)


# PopArt

def test_popart_first_update_mean_is_exact():
    for decay in (0.5, 0.99, 0.99999):
        targets = np.array([1.0, 4.0, 7.0])
        st_, _ = popart_rescale(PopArtState(decay=decay), targets, (np.ones(2), np.zeros(1)))
        assert st_.mu == pytest.approx(4.0, rel=1e-9)
        assert st_.sigma == pytest.approx(targets.std(), rel=1e-6)


def test_popart_no_op_when_statistics_match():
    rng = np.random.default_rng(4)
    state = PopArtState(decay=0.9)
    layer = (rng.standard_normal(3), rng.standard_normal(1))
    for _ in range(5):
        state, layer = popart_rescale(state, rng.standard_normal(20) * 2 + 1, layer)
    mu, sigma = state.mu, state.sigma
    new_state, new_layer = popart_rescale(state, np.array([mu - sigma, mu + sigma]), layer)
    assert new_state.mu == pytest.approx(mu, abs=1e-10)
    assert new_state.sigma == pytest.approx(sigma, abs=1e-10)
    assert np.allclose(new_layer[0], layer[0], atol=1e-10) and np.allclose(new_layer[1], layer[1], atol=1e-10)


def test_popart_sigma_floor():
    state, _ = popart_rescale(PopArtState(decay=0.9), np.full(4, 3.0), (np.ones(1), np.zeros(1)))
    assert state.sigma >= 1e-6


def popart_probe_change(n_updates, decay, seed=5):
    spec = pol.MlpSpec((4, 8, 1), head="value")
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(spec.n_params)
    probes = rng.standard_normal((50, 4))
    state = PopArtState(decay=decay)
    worst = 0.0
    for k in range(n_updates):
        before = state.denormalize(pol.values(spec, theta, probes))
        targets = rng.standard_normal(64) * (1 + 10 * rng.random()) + 50 * np.sin(k / 50)
        state, layer = popart_rescale(state, targets, pol.value_layer(spec, theta))
        theta = pol.with_value_layer(spec, theta, *layer)
        after = state.denormalize(pol.values(spec, theta, probes))
        worst = max(worst, float(np.max(np.abs(after - before))))
    return worst


def test_popart_preserves_unnormalised_outputs():
    assert popart_probe_change(200, 0.99) <= 1e-6
    assert popart_probe_change(200, 0.99999) <= 1e-6
