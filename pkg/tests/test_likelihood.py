import numpy as np
import pytest

from rat.kaczmarz import BlockPartition, DampedSystem, exact_dual_woodbury, run_kaczmarz
from rat.likelihood import (METHODS, GaussParams, analytic_fisher, analytic_gradients,
                            empirical_natural_gradient, grid, gradient_field, log_likelihood,
                            rat_estimate_demo, scores)
from rat.linalg import cosine


def test_fisher_closed_form_values():
    assert np.array_equal(analytic_fisher(GaussParams(0.3, 0.0)), np.diag([1.0, 2.0]))
    assert np.allclose(analytic_fisher(GaussParams(-1.0, np.log(2.0))), np.diag([0.25, 2.0]), atol=1e-15)


@pytest.mark.parametrize("theta", [(0.0, 0.0), (1.0, 0.5), (-2.0, -1.2)])
def test_fisher_matches_monte_carlo(theta):
    p = GaussParams(*theta)
    rng = np.random.default_rng(0)
    x = p.theta1 + np.exp(p.theta2) * rng.standard_normal(1_000_000)
    h = scores(p, x)
    mc = h.T @ h / x.size
    F = analytic_fisher(p)
    assert np.all(np.abs(np.diag(mc) - np.diag(F)) <= 0.01 * np.diag(F))
    assert abs(mc[0, 1]) <= 0.01 * np.sqrt(F[0, 0] * F[1, 1])
    assert np.all(np.linalg.eigvalsh(F) > 0)


def test_gradients_at_the_mean():
    for t2 in (-1.0, 0.0, 0.7):
        p = GaussParams(0.4, t2)
        vanilla, natural, _ = analytic_gradients(p, np.full(5, 0.4))
        assert np.allclose(vanilla, [0.0, -1.0], atol=1e-15)
        assert np.allclose(natural, [0.0, -0.5], atol=1e-15)


def test_damped_tends_to_natural():
    x = np.random.default_rng(1).standard_normal(100)
    _, natural, damped = analytic_gradients(GaussParams(0.0, 0.0), x, lam=1e-10)
    assert np.max(np.abs(damped - natural)) <= 1e-8


def test_damped_is_damped_fisher_solve():
    x = np.random.default_rng(2).standard_normal(300)
    p = GaussParams(0.5, -0.3)
    vanilla, _, damped = analytic_gradients(p, x, lam=0.4)
    assert np.allclose(damped, np.linalg.solve(analytic_fisher(p) + 0.4 * np.eye(2), vanilla), atol=1e-12)


def test_vanilla_matches_finite_differences():
    x = np.random.default_rng(3).standard_normal(500) * 1.5 + 0.2
    t = np.array([0.3, 0.1])
    f = lambda th: np.mean(log_likelihood(GaussParams(*th), x))  # noqa: E731
    fd = np.array([(f(t + e) - f(t - e)) / 2e-6 for e in 1e-6 * np.eye(2)])
    vanilla, _, _ = analytic_gradients(GaussParams(*t), x)
    assert np.max(np.abs(vanilla - fd)) <= 1e-5
    assert np.allclose(scores(GaussParams(*t), x).mean(axis=0), vanilla, atol=1e-12)


def test_natural_is_inverse_fisher_times_vanilla():
    x = np.random.default_rng(4).standard_normal(50)
    for p in (GaussParams(0.0, 0.0), GaussParams(-1.3, 0.9), GaussParams(2.0, -1.4)):
        vanilla, natural, _ = analytic_gradients(p, x)
        assert np.max(np.abs(natural - np.linalg.solve(analytic_fisher(p), vanilla))) <= 1e-12


def test_params_validation():
    with pytest.raises(ValueError):
        GaussParams(0.0, 11.0)
    with pytest.raises(ValueError):
        GaussParams(np.nan, 0.0)
    with pytest.raises(ValueError):
        analytic_gradients(GaussParams(0.0, 0.0), [])


def test_rat_single_block_matches_woodbury():
    x = np.random.default_rng(5).standard_normal(200)
    p = GaussParams(0.7, 0.2)
    g = rat_estimate_demo(p, x, lam=1e-3, batch_size=200, n_steps=1)
    ref = exact_dual_woodbury(DampedSystem(scores(p, x), np.ones(200), 1e-3))
    assert np.max(np.abs(g - ref)) <= 1e-8 * max(1.0, np.linalg.norm(ref))
    assert np.linalg.norm(empirical_natural_gradient(p, x, 1e-3) - ref) <= 1e-8 * np.linalg.norm(ref)


def test_rat_at_sample_optimum_is_statistically_zero():
    x = np.random.default_rng(6).standard_normal(2000)
    p = GaussParams(float(x.mean()), float(np.log(x.std())))
    assert np.linalg.norm(empirical_natural_gradient(p, x)) <= 1e-10
    g = np.array([rat_estimate_demo(p, x, 0.1, 256, 16, seed=s) for s in range(50)])
    se = g.std(axis=0, ddof=1) / np.sqrt(len(g))
    assert np.all(np.abs(g.mean(axis=0)) <= 3 * se)


def test_rat_matches_empirical_natural_gradient_off_optimum():
    x = np.random.default_rng(7).standard_normal(2000)
    p = GaussParams(1.0, 0.5)
    g = rat_estimate_demo(p, x, 0.1, 256, 16, seed=0)
    assert cosine(g, empirical_natural_gradient(p, x, 0.1)) >= 0.95


def test_rat_converges_on_consistent_targets():
    x = np.random.default_rng(8).standard_normal(400)
    H = scores(GaussParams(0.2, -0.1), x)
    g_star = np.array([0.8, -0.3])
    part = BlockPartition.random(400, 50, np.random.default_rng(9))
    trace = run_kaczmarz(DampedSystem(H, H @ g_star, 0.1), part, n_steps=200, rng_seed=1, g_star=g_star)
    assert trace.errors[-1] <= 1e-6 * trace.errors[0]


def test_gradient_field_layout_and_determinism():
    x = np.random.default_rng(10).standard_normal(300)
    rows = gradient_field(x, 0.1, 100, 4, seed=3, theta1=(-1, 1, 3), theta2=(-1, 1, 2))
    assert len(rows) == 3 * 2 * len(METHODS)
    assert [r[2] for r in rows[:4]] == list(METHODS)
    assert rows == gradient_field(x, 0.1, 100, 4, seed=3, theta1=(-1, 1, 3), theta2=(-1, 1, 2))
    assert len(grid()) == 17 * 13
