"""Damped least squares: exact oracles and the regularised block Kaczmarz solver.

The fixed system is ``min_g ||y - H g||^2 + lam ||g||^2``.  Its solution can
be computed in the parameter space (``p x p`` solve) or, through the Woodbury
identity, in the sample space (``n x n`` solve).  The iterative solver visits
row blocks ``tau`` and applies the proximal step

    g <- g + H_tau^T (lam I + H_tau H_tau^T)^{-1} (y_tau - H_tau g),

whose bracketed factor is the transformed advantage of the block.
"""

from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, as_matrix, as_vector, damped, gram, solve_spd, sym_eigvalsh

SAMPLING_MODES = ("uniform_with_replacement", "shuffled_epoch")


@dataclass(frozen=True)
class DampedSystem:
    H: np.ndarray
    y: np.ndarray
    lam: float

    def __post_init__(self):
        H = as_matrix(self.H, "H")
        y = as_vector(self.y, "y")
        if H.shape[0] != y.shape[0]:
            raise ShapeError(f"H has {H.shape[0]} rows but y has {y.shape[0]} entries")
        if not self.lam > 0:
            raise ValueError(f"damping must be positive, got {self.lam}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def n_rows(self):
        return self.H.shape[0]

    @property
    def n_params(self):
        return self.H.shape[1]


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint row blocks and the rule used to visit them.

    ``shuffled_epoch`` visits every block once per epoch in a fresh random
    order; ``uniform_with_replacement`` draws blocks i.i.d. uniformly, which
    is the sampling model of the convergence theorems.
    """

    blocks: tuple
    sampling: str = "shuffled_epoch"

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=np.int64) for b in self.blocks)
        if not blocks or any(b.size == 0 for b in blocks):
            raise ValueError("a partition needs at least one block and no empty blocks")
        flat = np.concatenate(blocks)
        if np.unique(flat).size != flat.size:
            raise ValueError("blocks must be disjoint")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def contiguous(cls, n_rows, block_size, sampling="shuffled_epoch"):
        starts = range(0, n_rows, block_size)
        return cls(tuple(np.arange(s, min(s + block_size, n_rows)) for s in starts), sampling)

    @classmethod
    def random(cls, n_rows, block_size, rng, sampling="shuffled_epoch"):
        """Randomly permute the rows, then cut them into blocks of ``block_size``."""
        perm = rng.permutation(n_rows)
        return cls(tuple(perm[s:s + block_size] for s in range(0, n_rows, block_size)), sampling)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def covers(self, n_rows):
        flat = np.concatenate(self.blocks)
        return flat.size == n_rows and flat.min() == 0 and flat.max() == n_rows - 1

    def schedule(self, n_steps, rng):
        """Yield ``n_steps`` block indices drawn according to ``sampling``."""
        m = self.n_blocks
        if self.sampling == "uniform_with_replacement":
            for k in rng.integers(0, m, size=n_steps):
                yield int(k)
            return
        done = 0
        while done < n_steps:
            for k in rng.permutation(m):
                if done == n_steps:
                    return
                yield int(k)
                done += 1


@dataclass
class KaczmarzTrace:
    iterates: np.ndarray
    blocks: list = field(default_factory=list)
    residuals: np.ndarray = None
    errors: np.ndarray = None

    @property
    def final(self):
        return self.iterates[-1]


@dataclass
class CGResult:
    x: np.ndarray
    n_iter: int
    converged: bool
    residual: float


def exact_primal(sys):
    """``(lam I_p + H^T H)^{-1} H^T y`` by a ``p x p`` Cholesky solve."""
    H = sys.H
    return solve_spd(damped(gram(H.T), sys.lam), H.T @ sys.y)


def exact_dual_woodbury(sys):
    """``H^T (lam I_n + H H^T)^{-1} y``, the Woodbury form of :func:`exact_primal`."""
    H = sys.H
    return H.T @ solve_spd(damped(gram(H), sys.lam), sys.y)


def rat_block_step(g_prev, H_tau, y_tau, lam):
    """One regularised block Kaczmarz step.

    Returns ``(g_next, adv)`` where ``adv`` solves
    ``(lam I + H_tau H_tau^T) adv = y_tau - H_tau g_prev`` and
    ``g_next = g_prev + H_tau^T adv`` minimises
    ``||y_tau - H_tau g||^2 + lam ||g - g_prev||^2``.
    """
    if not lam > 0:
        raise ValueError(f"damping must be positive, got {lam}")
    H_tau = np.asarray(H_tau, dtype=np.float64)
    g_prev = np.asarray(g_prev, dtype=np.float64)
    y_tau = np.asarray(y_tau, dtype=np.float64)
    if H_tau.ndim != 2 or H_tau.shape != (y_tau.shape[0], g_prev.shape[0]):
        raise ShapeError(
            f"H_tau {H_tau.shape} inconsistent with y_tau {y_tau.shape} and g {g_prev.shape}"
        )
    adv = solve_spd(damped(gram(H_tau), lam), y_tau - H_tau @ g_prev)
    return g_prev + H_tau.T @ adv, adv


def run_kaczmarz(sys, partition, g0=None, n_steps=1, rng_seed=0, g_star=None, noise_std=0.0):
    """Run the block iteration for ``n_steps`` steps and record every iterate.

    With ``noise_std > 0`` fresh zero-mean Gaussian noise is added to the
    block targets at every visit (the stochastic-target model).  The noise
    stream is drawn after the block schedule so that noise-free and noisy
    runs with one seed visit the same blocks.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    rng = np.random.default_rng(rng_seed)
    noise_rng = np.random.default_rng([rng_seed, 1]) if noise_std > 0 else None
    g = np.zeros(sys.n_params) if g0 is None else np.array(g0, dtype=np.float64)
    iterates = np.empty((n_steps + 1, sys.n_params))
    iterates[0] = g
    residuals = np.empty(n_steps)
    visited = []
    for j, k in enumerate(partition.schedule(n_steps, rng)):
        rows = partition.blocks[k]
        H_tau = sys.H[rows]
        y_tau = sys.y[rows]
        if noise_rng is not None:
            y_tau = y_tau + noise_std * noise_rng.standard_normal(rows.size)
        residuals[j] = np.linalg.norm(y_tau - H_tau @ g)
        g, _ = rat_block_step(g, H_tau, y_tau, sys.lam)
        iterates[j + 1] = g
        visited.append(k)
    errors = None
    if g_star is not None:
        errors = np.linalg.norm(iterates - np.asarray(g_star)[None, :], axis=1)
    return KaczmarzTrace(iterates=iterates, blocks=visited, residuals=residuals, errors=errors)


def kaczmarz_ensemble(sys, partition, seeds, n_steps, g0=None, noise_std=0.0):
    """Many independent runs of :func:`run_kaczmarz`, vectorised over runs.

    Run ``r`` uses ``rng_seed=seeds[r]`` and reproduces the iterates of the
    scalar version.  Because the system is fixed, each block's operator
    ``H_tau^T (lam I + H_tau H_tau^T)^{-1}`` is factorised once and reused.
    Blocks must all have the same size.  Returns iterates shaped
    ``(n_runs, n_steps + 1, p)``.
    """
    sizes = {b.size for b in partition.blocks}
    if len(sizes) != 1:
        raise ValueError("the ensemble runner needs equal block sizes")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    H, y, lam = sys.H, sys.y, sys.lam
    H_blocks = np.stack([H[b] for b in partition.blocks])
    y_blocks = np.stack([y[b] for b in partition.blocks])
    S_blocks = np.stack([solve_spd(damped(gram(Hb), lam), Hb).T for Hb in H_blocks])
    R, b = len(seeds), sizes.pop()
    schedule = np.empty((R, n_steps), dtype=np.int64)
    noise = np.zeros((R, n_steps, b))
    for r, seed in enumerate(seeds):
        schedule[r] = list(partition.schedule(n_steps, np.random.default_rng(seed)))
        if noise_std > 0:
            noise[r] = noise_std * np.random.default_rng([seed, 1]).standard_normal((n_steps, b))
    g = np.zeros((R, sys.n_params)) if g0 is None else np.tile(np.asarray(g0, dtype=np.float64), (R, 1))
    out = np.empty((R, n_steps + 1, sys.n_params))
    out[:, 0] = g
    for j in range(n_steps):
        k = schedule[:, j]
        resid = y_blocks[k] + noise[:, j] - np.einsum("rbp,rp->rb", H_blocks[k], g)
        g = g + np.einsum("rpb,rb->rp", S_blocks[k], resid)
        out[:, j + 1] = g
    return out


def projection_matrix(H_tau, lam):
    """``P = H^T (lam I + H H^T)^{-1} H``; symmetric with spectrum in ``[0, 1)``."""
    H_tau = as_matrix(H_tau, "H_tau")
    if not lam > 0:
        raise ValueError(f"damping must be positive, got {lam}")
    P = H_tau.T @ solve_spd(damped(gram(H_tau), lam), H_tau)
    return 0.5 * (P + P.T)


def expected_projection(H, lam, partition):
    """``E[P_tau]`` under uniform block sampling, by enumeration."""
    H = as_matrix(H, "H")
    total = np.zeros((H.shape[1], H.shape[1]))
    for rows in partition.blocks:
        total += projection_matrix(H[rows], lam)
    return total / partition.n_blocks


def estimate_mu(H, lam, partition, n_samples=2000, rng_seed=0, method="auto"):
    """Smallest eigenvalue of ``E[P_tau]`` (the contraction constant).

    ``method="auto"`` enumerates the blocks when there are at most 64 of them
    and otherwise averages ``n_samples`` uniformly drawn blocks.
    """
    if method not in ("auto", "exact", "monte_carlo"):
        raise ValueError(f"unknown method {method!r}")
    if method == "exact" or (method == "auto" and partition.n_blocks <= 64):
        return float(sym_eigvalsh(expected_projection(H, lam, partition))[0])
    H = as_matrix(H, "H")
    rng = np.random.default_rng(rng_seed)
    cache = {}
    total = np.zeros((H.shape[1], H.shape[1]))
    for k in rng.integers(0, partition.n_blocks, size=n_samples):
        k = int(k)
        if k not in cache:
            cache[k] = projection_matrix(H[partition.blocks[k]], lam)
        total += cache[k]
    return float(sym_eigvalsh(total / n_samples)[0])


def noise_gain(H, lam, partition, noise_std, n_samples=2000, rng_seed=0):
    """Monte Carlo estimate of ``E||H_tau^T (lam I + H_tau H_tau^T)^{-1} xi||^2``.

    For i.i.d. Gaussian noise of standard deviation ``noise_std`` the inner
    expectation is available exactly as ``noise_std^2 * trace(S S^T)``; the
    outer expectation over uniformly drawn blocks is sampled.
    """
    H = as_matrix(H, "H")
    rng = np.random.default_rng(rng_seed)
    per_block = {}
    total = 0.0
    for k in rng.integers(0, partition.n_blocks, size=n_samples):
        k = int(k)
        if k not in per_block:
            H_tau = H[partition.blocks[k]]
            St = solve_spd(damped(gram(H_tau), lam), H_tau)
            per_block[k] = float(np.sum(St * St))
        total += per_block[k]
    return noise_std ** 2 * total / n_samples


def cg_normal_equations(sys, max_iter=None, tol=1e-10):
    """Conjugate gradient on ``(lam I + H^T H) g = H^T y`` using only products with ``H``.

    ``tol`` is relative to ``||H^T y||``.  Non-convergence is reported in the
    result rather than raised.
    """
    H = sys.H
    lam = sys.lam
    b = H.T @ sys.y
    x = np.zeros(sys.n_params)
    if max_iter is None:
        max_iter = 10 * sys.n_params
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(x=x, n_iter=0, converged=True, residual=0.0)
    r = b.copy()
    d = r.copy()
    rr = r @ r
    for k in range(1, max_iter + 1):
        Ad = lam * d + H.T @ (H @ d)
        step = rr / (d @ Ad)
        x += step * d
        r -= step * Ad
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol * bnorm:
            return CGResult(x=x, n_iter=k, converged=True, residual=float(np.sqrt(rr_new)))
        d = r + (rr_new / rr) * d
        rr = rr_new
    return CGResult(x=x, n_iter=max_iter, converged=False, residual=float(np.sqrt(rr)))
