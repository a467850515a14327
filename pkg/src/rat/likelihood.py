"""Maximum-likelihood toy problem: a univariate Gaussian with ``theta = (mu, log sigma)``.

Everything here is closed form, which makes it a convenient place to compare
vanilla, natural, empirical natural and RAT gradient estimates.
"""

from dataclasses import dataclass

import numpy as np

from .kaczmarz import BlockPartition, DampedSystem, exact_primal, run_kaczmarz

GRID_THETA1 = (-2.0, 2.0, 17)
GRID_THETA2 = (-1.5, 1.5, 13)
METHODS = ("vanilla", "natural_closed_form", "natural_empirical", "rat")


@dataclass(frozen=True)
class GaussParams:
    theta1: float
    theta2: float

    def __post_init__(self):
        if not (np.isfinite(self.theta1) and np.isfinite(self.theta2)):
            raise ValueError("parameters must be finite")
        if not -10.0 <= self.theta2 <= 10.0:
            raise ValueError("log sigma must lie in [-10, 10]")


def log_likelihood(p, x):
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * np.log(2 * np.pi) - p.theta2 - (x - p.theta1) ** 2 / (2 * np.exp(2 * p.theta2))


def scores(p, x):
    """Per-sample gradient of ``log N(x | theta)``, shape ``(N, 2)``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    inv_var = np.exp(-2.0 * p.theta2)
    d = x - p.theta1
    return np.stack([inv_var * d, -1.0 + inv_var * d * d], axis=1)


def analytic_fisher(p):
    """``diag(exp(-2 theta2), 2)``."""
    return np.diag([np.exp(-2.0 * p.theta2), 2.0])


def analytic_gradients(p, samples, lam=0.1):
    """Sample means of the closed-form vanilla, natural and damped natural gradients."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("need at least one sample")
    var = np.exp(2.0 * p.theta2)
    d = x - p.theta1
    vanilla = np.array([np.mean(d / var), np.mean(-1.0 + d * d / var)])
    natural = np.array([np.mean(d), np.mean(-0.5 + d * d / (2.0 * var))])
    damped = np.array([
        np.mean(d / (1.0 + lam * var)),
        np.mean(-1.0 / (2.0 + lam) + d * d / ((2.0 + lam) * var)),
    ])
    return vanilla, natural, damped


def empirical_natural_gradient(p, samples, lam=0.1):
    """Damped natural gradient with the empirical Fisher: ``exact_primal(H, 1, lam)``.

    With raw score rows ``H`` and unit targets, ``H^T 1`` is ``N`` times the
    mean score and ``H^T H`` is ``N`` times the empirical Fisher, so the
    result is the empirical natural gradient damped by ``lam / N``.
    """
    H = scores(p, samples)
    return exact_primal(DampedSystem(H, np.ones(H.shape[0]), lam))


def rat_estimate_demo(p, samples, lam=0.1, batch_size=256, n_steps=32, seed=0):
    """Block Kaczmarz estimate of the empirical natural gradient from ``g0 = 0``."""
    H = scores(p, samples)
    n = H.shape[0]
    if batch_size > n:
        raise ValueError("batch size exceeds the number of samples")
    rng = np.random.default_rng(seed)
    partition = BlockPartition.random(n, batch_size, rng)
    trace = run_kaczmarz(DampedSystem(H, np.ones(n), lam), partition, n_steps=n_steps,
                         rng_seed=int(rng.integers(2**31)))
    return trace.final


def grid(theta1=GRID_THETA1, theta2=GRID_THETA2):
    t1 = np.linspace(*theta1[:2], int(theta1[2]))
    t2 = np.linspace(*theta2[:2], int(theta2[2]))
    return [(a, b) for a in t1 for b in t2]


def gradient_field(samples, lam=0.1, batch_size=256, n_steps=32, seed=0,
                   theta1=GRID_THETA1, theta2=GRID_THETA2):
    """Rows ``(theta1, theta2, method, g1, g2)`` for every grid point and method."""
    rows = []
    for k, (a, b) in enumerate(grid(theta1, theta2)):
        p = GaussParams(float(a), float(b))
        vanilla, natural, _ = analytic_gradients(p, samples, lam)
        emp = empirical_natural_gradient(p, samples, lam)
        rat = rat_estimate_demo(p, samples, lam, batch_size, n_steps, seed=[seed, k])
        for name, g in zip(METHODS, (vanilla, natural, emp, rat)):
            rows.append((float(a), float(b), name, float(g[0]), float(g[1])))
    return rows
