import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rat.kaczmarz import (BlockPartition, DampedSystem, cg_normal_equations, estimate_mu,
                          exact_dual_woodbury, exact_primal, expected_projection,
                          kaczmarz_ensemble, noise_gain, projection_matrix, rat_block_step,
                          run_kaczmarz)
from rat.linalg import ShapeError


def random_system(rng, n, p, lam):
    return DampedSystem(rng.standard_normal((n, p)), rng.standard_normal(n), lam)


# exact oracles

def test_primal_hand_cases():
    assert np.allclose(exact_primal(DampedSystem(np.eye(2), [2.0, 4.0], 1.0)), [1, 2], atol=1e-15)
    assert np.array_equal(exact_primal(DampedSystem(np.ones((3, 2)), np.zeros(3), 1.0)), np.zeros(2))


def test_primal_normal_equation_residual():
    sys = random_system(np.random.default_rng(0), 50, 8, 0.3)
    g = exact_primal(sys)
    r = (sys.lam * np.eye(8) + sys.H.T @ sys.H) @ g - sys.H.T @ sys.y
    assert np.linalg.norm(r) <= 1e-8


def test_dual_hand_cases():
    H = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    assert np.allclose(exact_dual_woodbury(DampedSystem(H, np.ones(3), 1.0)), [0.5, 0.5], atol=1e-15)
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((6, 3)))
    H = q.T  # orthonormal rows
    y = np.arange(3.0)
    assert np.allclose(exact_dual_woodbury(DampedSystem(H, y, 1.0)), H.T @ y / 2, atol=1e-14)


def test_primal_dual_random():
    sys = random_system(np.random.default_rng(2), 60, 10, 0.1)
    gp, gd = exact_primal(sys), exact_dual_woodbury(sys)
    assert np.linalg.norm(gp - gd) <= 1e-8 * np.linalg.norm(gp)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(1, 50), st.floats(-3, 1), st.integers(0, 2**31 - 1))
def test_primal_dual_property(n, p, log_lam, seed):
    sys = random_system(np.random.default_rng(seed), n, p, 10.0 ** log_lam)
    gp, gd = exact_primal(sys), exact_dual_woodbury(sys)
    assert np.linalg.norm(gp - gd) <= 1e-8 * (1 + np.linalg.norm(gp))


def test_system_validation():
    with pytest.raises(ValueError):
        DampedSystem(np.eye(2), np.ones(2), 0.0)
    with pytest.raises(ShapeError):
        DampedSystem(np.eye(2), np.ones(3), 1.0)


# block step

def test_block_step_fixed_point():
    rng = np.random.default_rng(3)
    H = rng.standard_normal((4, 6))
    g_star = rng.standard_normal(6)
    g_next, adv = rat_block_step(g_star, H, H @ g_star, 0.1)
    assert np.allclose(adv, 0, atol=1e-14) and np.allclose(g_next, g_star, atol=1e-14)


def test_block_step_hand_case():
    g_next, adv = rat_block_step(np.zeros(2), np.eye(2), np.array([2.0, 4.0]), 1.0)
    assert np.allclose(adv, [1, 2]) and np.allclose(g_next, [1, 2])


def test_block_step_solves_proximal_objective():
    rng = np.random.default_rng(4)
    H = rng.standard_normal((5, 9))
    y = rng.standard_normal(5)
    g_prev = rng.standard_normal(9)
    lam = 0.3
    g_next, _ = rat_block_step(g_prev, H, y, lam)
    # normal equations of ||y - H g||^2 + lam ||g - g_prev||^2, solved in the primal space
    direct = np.linalg.solve(H.T @ H + lam * np.eye(9), H.T @ y + lam * g_prev)
    assert np.max(np.abs(g_next - direct)) <= 1e-8

    def obj(g):
        return np.sum((y - H @ g) ** 2) + lam * np.sum((g - g_prev) ** 2)

    base = obj(g_next)
    for _ in range(100):
        d = rng.standard_normal(9)
        d *= 1e-3 / np.linalg.norm(d)
        assert obj(g_next + d) >= base - 1e-12


def test_block_step_errors():
    with pytest.raises(ValueError):
        rat_block_step(np.zeros(2), np.eye(2), np.ones(2), 0.0)
    with pytest.raises(ShapeError):
        rat_block_step(np.zeros(3), np.eye(2), np.ones(2), 1.0)


# partitions

def test_partition_validation_and_schedules():
    with pytest.raises(ValueError):
        BlockPartition(([0, 1], [1, 2]))
    with pytest.raises(ValueError):
        BlockPartition(([0], []))
    with pytest.raises(ValueError):
        BlockPartition(([0],), sampling="cyclic")
    part = BlockPartition.contiguous(10, 3)
    assert part.n_blocks == 4 and part.covers(10)
    sched = list(part.schedule(8, np.random.default_rng(0)))
    assert sorted(sched[:4]) == [0, 1, 2, 3] and len(sched) == 8
    rand = BlockPartition.random(10, 4, np.random.default_rng(1))
    assert rand.covers(10) and [b.size for b in rand.blocks] == [4, 4, 2]


# iteration

def consistent_system(rng, n=40, p=6, lam=0.5):
    H = rng.standard_normal((n, p))
    g_star = rng.standard_normal(p)
    return DampedSystem(H, H @ g_star, lam), g_star


def test_run_converges_on_consistent_system():
    sys, g_star = consistent_system(np.random.default_rng(5))
    part = BlockPartition.contiguous(40, 5, "uniform_with_replacement")
    trace = run_kaczmarz(sys, part, n_steps=600, rng_seed=1, g_star=g_star)
    assert trace.errors[-1] <= 1e-6 * trace.errors[0]
    assert len(trace.blocks) == 600 and trace.iterates.shape == (601, 6)


def test_single_block_orthonormal_rows_geometric():
    q, _ = np.linalg.qr(np.random.default_rng(6).standard_normal((5, 5)))
    H = q.T
    g_star = np.arange(1.0, 6.0)
    lam = 0.5
    sys = DampedSystem(H, H @ g_star, lam)
    trace = run_kaczmarz(sys, BlockPartition.contiguous(5, 5), n_steps=10, g_star=g_star)
    ratios = trace.errors[1:] / trace.errors[:-1]
    assert np.allclose(ratios, lam / (1 + lam), atol=1e-12)
    assert np.allclose(trace.iterates[1], g_star / (1 + lam), atol=1e-12)


def test_run_is_deterministic():
    sys, _ = consistent_system(np.random.default_rng(7))
    part = BlockPartition.contiguous(40, 8)
    a = run_kaczmarz(sys, part, n_steps=30, rng_seed=9)
    b = run_kaczmarz(sys, part, n_steps=30, rng_seed=9)
    assert np.array_equal(a.iterates, b.iterates) and a.blocks == b.blocks


def test_noise_free_steps_never_expand():
    sys, g_star = consistent_system(np.random.default_rng(8), lam=0.2)
    part = BlockPartition.contiguous(40, 4, "uniform_with_replacement")
    for seed in range(20):
        err = run_kaczmarz(sys, part, n_steps=100, rng_seed=seed, g_star=g_star).errors
        assert np.all(np.diff(err) <= 1e-12)


def test_ensemble_matches_scalar_runs():
    sys, _ = consistent_system(np.random.default_rng(9))
    part = BlockPartition.contiguous(40, 4, "uniform_with_replacement")
    seeds = [[3, r] for r in range(5)]
    for noise in (0.0, 0.2):
        ens = kaczmarz_ensemble(sys, part, seeds, 50, noise_std=noise)
        for r, seed in enumerate(seeds):
            ref = run_kaczmarz(sys, part, n_steps=50, rng_seed=seed, noise_std=noise).iterates
            assert np.max(np.abs(ens[r] - ref)) <= 1e-12


def test_ensemble_needs_equal_blocks():
    sys, _ = consistent_system(np.random.default_rng(10))
    with pytest.raises(ValueError):
        kaczmarz_ensemble(sys, BlockPartition.contiguous(40, 7), [0], 5)


# projections and mu

def test_projection_hand_cases():
    assert np.allclose(projection_matrix(np.eye(3), 1.0), 0.5 * np.eye(3))
    assert np.array_equal(projection_matrix(np.zeros((2, 3)), 1.0), np.zeros((3, 3)))


def test_projection_spectrum_and_p2_below_p():
    rng = np.random.default_rng(11)
    for _ in range(10):
        P = projection_matrix(rng.standard_normal((4, 7)) * rng.uniform(0.1, 10), rng.uniform(0.01, 5))
        ev = np.linalg.eigvalsh(P)
        assert ev.min() >= -1e-12 and ev.max() < 1.0
        for _ in range(10):
            v = rng.standard_normal(7)
            assert v @ P @ P @ v <= v @ P @ v + 1e-10


def test_mu_identity_singletons():
    part = BlockPartition.contiguous(2, 1, "uniform_with_replacement")
    assert estimate_mu(np.eye(2), 1.0, part) == pytest.approx(0.25, abs=1e-15)
    mc = estimate_mu(np.eye(2), 1.0, part, method="monte_carlo", n_samples=4000)
    assert mc == pytest.approx(0.25, abs=0.02)


def test_mu_single_block_is_min_eigenvalue():
    H = np.random.default_rng(12).standard_normal((10, 4))
    part = BlockPartition.contiguous(10, 10)
    expected = np.linalg.eigvalsh(projection_matrix(H, 0.3))[0]
    assert estimate_mu(H, 0.3, part) == pytest.approx(expected, abs=1e-14)
    assert estimate_mu(H, 0.3, part, method="monte_carlo", n_samples=10) == pytest.approx(expected, abs=1e-14)


def test_mu_monte_carlo_self_consistent():
    H = np.random.default_rng(13).standard_normal((40, 6))
    part = BlockPartition.contiguous(40, 5)
    a = estimate_mu(H, 0.1, part, n_samples=2000, rng_seed=1, method="monte_carlo")
    b = estimate_mu(H, 0.1, part, n_samples=2000, rng_seed=2, method="monte_carlo")
    assert abs(a - b) <= 0.05 * max(a, b)
    exact = estimate_mu(H, 0.1, part)
    assert exact > 0 and abs(a - exact) <= 0.1 * exact


def test_expected_projection_is_block_average():
    H = np.random.default_rng(14).standard_normal((6, 3))
    part = BlockPartition.contiguous(6, 2)
    avg = sum(projection_matrix(H[b], 0.2) for b in part.blocks) / 3
    assert np.allclose(expected_projection(H, 0.2, part), avg, atol=1e-15)


def test_mu_decreases_with_damping_on_low_rank_blocks():
    rng = np.random.default_rng(15)
    H = np.vstack([rng.standard_normal((4, 2)) @ rng.standard_normal((2, 12)) for _ in range(30)])
    part = BlockPartition.contiguous(120, 4, "uniform_with_replacement")
    mus = [estimate_mu(H, lam, part) for lam in (0.01, 0.1, 1.0)]
    assert mus[0] > mus[1] > mus[2] > 0


def test_noise_gain_matches_direct_sampling():
    rng = np.random.default_rng(16)
    H = rng.standard_normal((12, 3))
    part = BlockPartition.contiguous(12, 3)
    eta2 = noise_gain(H, 0.5, part, 0.3, n_samples=4000)
    draws = []
    for _ in range(20000):
        rows = part.blocks[rng.integers(part.n_blocks)]
        _, adv = rat_block_step(np.zeros(3), H[rows], 0.3 * rng.standard_normal(3), 0.5)
        draws.append(np.sum((H[rows].T @ adv) ** 2))
    assert eta2 == pytest.approx(np.mean(draws), rel=0.05)


# conjugate gradient

def test_cg_diagonal_finite_termination():
    H = np.diag([1.0, 2.0, 3.0, 4.0])
    sys = DampedSystem(H, np.ones(4), 0.1)
    res = cg_normal_equations(sys, max_iter=4)
    assert res.converged and res.n_iter <= 4
    assert np.max(np.abs(res.x - exact_primal(sys))) <= 1e-8


def test_cg_zero_rhs():
    res = cg_normal_equations(DampedSystem(np.ones((3, 2)), np.zeros(3), 1.0))
    assert res.n_iter == 0 and res.converged and np.array_equal(res.x, np.zeros(2))


def test_cg_random_matches_primal():
    sys = random_system(np.random.default_rng(17), 80, 12, 0.05)
    res = cg_normal_equations(sys, tol=1e-10)
    gp = exact_primal(sys)
    assert res.converged
    assert np.linalg.norm(res.x - gp) <= 1e-8 * (1 + np.linalg.norm(gp))


def test_cg_reports_non_convergence():
    sys = random_system(np.random.default_rng(18), 80, 12, 1e-3)
    res = cg_normal_equations(sys, max_iter=2, tol=1e-14)
    assert not res.converged and res.n_iter == 2
